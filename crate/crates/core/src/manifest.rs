//! JSON-lines image manifests: `{id, path, split, labels?}` per line.
//!
//! Relative paths resolve against the manifest's own directory, so a dataset
//! directory can be moved as a unit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<BTreeMap<String, u8>>,
    /// Set when labels were predicted by a pretrained classifier.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pseudo_labels: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = io_util::read_jsonl(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, root)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_jsonl(path, &self.entries)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.id.is_empty() {
                return Err(Error::Validation("manifest entry with empty id".into()));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Validation(format!("duplicate manifest id `{}`", e.id)));
            }
            if let Some(labels) = &e.labels {
                if let Some((k, v)) = labels.iter().find(|(_, v)| **v > 1) {
                    return Err(Error::Label(format!(
                        "entry `{}`: label `{k}` is {v}, expected 0 or 1",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fingerprint(&self) -> String {
        crate::hashing::canonical_hash(&self.entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_schema_and_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(
            &p,
            concat!(
                r#"{"id":"a","path":"img/a.png","split":"train","labels":{"Smiling":1}}"#,
                "\n",
                r#"{"id":"b","path":"/abs/b.png","split":"test"}"#,
                "\n"
            ),
        )
        .unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.resolve(&m.entries[0]), dir.path().join("img/a.png"));
        assert_eq!(m.resolve(&m.entries[1]), PathBuf::from("/abs/b.png"));
        assert_eq!(m.entries[0].labels.as_ref().unwrap()["Smiling"], 1);
    }

    #[test]
    fn rejects_duplicates_and_bad_labels() {
        let e = |id: &str, l: u8| ManifestEntry {
            id: id.into(),
            path: "x.png".into(),
            split: Split::Train,
            labels: Some([("A".to_string(), l)].into()),
            pseudo_labels: false,
        };
        assert!(Manifest::new(vec![e("a", 0), e("a", 1)], ".").is_err());
        assert!(matches!(Manifest::new(vec![e("a", 2)], "."), Err(Error::Label(_))));
    }

    #[test]
    fn rejects_unknown_split() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, r#"{"id":"a","path":"a.png","split":"val"}"#).unwrap();
        assert!(Manifest::load(&p).is_err());
    }
}

//! TOML run configuration. Validation reports every problem at once.
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::synthetic::SyntheticParams;
use crate::backend::{BackendKind, ModelServerConfig};
use crate::error::{Error, Result};
use crate::evaluation::ClassifierConfig;
use crate::optimizer::HyperParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Largest tolerated fraction of skipped items in invert and anonymize.
    pub skip_limit: f64,
    pub backend: BackendConfig,
    pub io: IoConfig,
    pub pool: PoolConfig,
    pub optimizer: HyperParams,
    pub evaluation: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            skip_limit: 0.01,
            backend: BackendConfig::default(),
            io: IoConfig::default(),
            pool: PoolConfig::default(),
            optimizer: HyperParams::default(),
            evaluation: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub synthetic: SyntheticParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server: Option<ModelServerConfig>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            synthetic: SyntheticParams::default(),
            server: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub manifest: PathBuf,
    pub output: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            output: PathBuf::from("output"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// Defaults to twice the number of real images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    /// Defaults to the global seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub checkpoint_every: usize,
    /// One-to-one pairing instead of plain nearest neighbour.
    pub unique: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            size: None,
            seed: None,
            checkpoint_every: 64,
            unique: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPolicy {
    /// Use the manifest's own train/test split.
    Manifest,
    /// Seeded shuffle split by `train_fraction`.
    Shuffle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionLists {
    pub inner: Vec<String>,
    pub outer: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub detection: bool,
    pub reid: bool,
    pub fid: bool,
    pub attributes: bool,
    pub split: SplitPolicy,
    pub train_fraction: f64,
    /// Label real images with the backend's attribute classifier when the
    /// manifest carries no labels.
    pub pseudo_labels: bool,
    pub classifier: ClassifierConfig,
    /// Attribute partition; the 40 CelebA attributes when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regions: Option<RegionLists>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            detection: true,
            reid: true,
            fid: true,
            attributes: true,
            split: SplitPolicy::Manifest,
            train_fraction: 0.8,
            pseudo_labels: false,
            classifier: ClassifierConfig::default(),
            regions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub margins: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            margins: vec![0.0, 0.9],
        }
    }
}

/// Keys that may appear although the default config does not serialize them.
const OPTIONAL_KEYS: &[&str] = &[
    "backend.server",
    "pool.size",
    "pool.seed",
    "evaluation.regions",
];

fn unknown_keys(user: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(u), Some(k)) = (user.as_table(), known.as_table()) else {
        return;
    };
    for (key, value) in u {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match k.get(key) {
            Some(kv) => unknown_keys(value, kv, &path, out),
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(format!("unknown key `{path}`")),
        }
    }
}

/// Drops the keys [`unknown_keys`] reports, so the rest can still be checked.
fn prune(user: &mut toml::Value, known: &toml::Value, prefix: &str) {
    let (Some(u), Some(k)) = (user.as_table_mut(), known.as_table()) else {
        return;
    };
    u.retain(|key, _| {
        let path = if prefix.is_empty() { key.to_string() } else { format!("{prefix}.{key}") };
        k.contains_key(key) || OPTIONAL_KEYS.contains(&path.as_str())
    });
    for (key, value) in u.iter_mut() {
        if let Some(kv) = k.get(key) {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            prune(value, kv, &path);
        }
    }
}

impl RunConfig {
    /// Parses and validates, resolving relative paths against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::Config(vec![format!("TOML syntax: {e}")]))?;
        let known = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Config(vec![format!("internal default table: {e}")]))?;
        let mut errors = Vec::new();
        unknown_keys(&user, &known, "", &mut errors);
        let mut user = user;
        prune(&mut user, &known, "");
        // Re-rendered so type errors carry a snippet naming the key.
        let pruned = toml::to_string(&user).map_err(|e| Error::Config(vec![format!("internal re-render: {e}")]))?;
        let mut cfg: RunConfig = match toml::from_str(&pruned) {
            Ok(c) => c,
            Err(e) => {
                errors.push(e.to_string().trim_end().to_string());
                return Err(Error::Config(errors));
            }
        };
        cfg.resolve_paths(base_dir);
        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.io.manifest);
        fix(&mut self.io.output);
        if let Some(server) = &mut self.backend.server {
            server.resolve_paths(base);
        }
    }

    /// Every validation problem, with the offending field named.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.skip_limit) {
            out.push(format!("skip_limit must be in [0, 1], got {}", self.skip_limit));
        }
        if self.io.manifest.as_os_str().is_empty() {
            out.push("io.manifest is required".into());
        } else if !self.io.manifest.is_file() {
            out.push(format!("io.manifest: no such file {}", self.io.manifest.display()));
        }
        match self.backend.kind {
            BackendKind::Synthetic => {
                out.extend(self.backend.synthetic.validate().into_iter().map(|e| format!("backend.synthetic.{e}")))
            }
            BackendKind::Pretrained => match &self.backend.server {
                Some(s) => out.extend(s.problems().into_iter().map(|e| format!("backend.server.{e}"))),
                None => out.push("backend.server is required when backend.kind = \"pretrained\"".into()),
            },
        }
        if self.pool.checkpoint_every == 0 {
            out.push("pool.checkpoint_every must be >= 1".into());
        }
        if self.pool.size == Some(0) {
            out.push("pool.size must be >= 1".into());
        }
        out.extend(
            self.optimizer
                .problems(false)
                .into_iter()
                .map(|e| format!("optimizer.{e}")),
        );
        if !(self.evaluation.train_fraction > 0.0 && self.evaluation.train_fraction < 1.0) {
            out.push(format!(
                "evaluation.train_fraction must be in (0, 1), got {}",
                self.evaluation.train_fraction
            ));
        }
        out.extend(
            self.evaluation
                .classifier
                .problems()
                .into_iter()
                .map(|e| format!("evaluation.{e}")),
        );
        for m in &self.ablation.margins {
            if !(0.0..=1.0).contains(m) {
                out.push(format!("ablation.margins: {m} is outside [0, 1]"));
            }
        }
        out
    }

    pub fn pool_seed(&self) -> u64 {
        self.pool.seed.unwrap_or(self.seed)
    }

    /// Hash of everything that affects results. Output location is excluded
    /// so two runs into different directories share a hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(io) = v.get_mut("io").and_then(|io| io.as_object_mut()) {
            io.remove("output");
            io.remove("manifest");
        }
        crate::hashing::canonical_hash(&v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_with_manifest() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("m.jsonl"), "").unwrap();
        d
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let d = dir_with_manifest();
        let cfg = RunConfig::from_toml_str(
            "[backend]\nkind = \"synthetic\"\n[io]\nmanifest = \"m.jsonl\"\n",
            d.path(),
        )
        .unwrap();
        assert_eq!(cfg.optimizer.epochs, 50);
        assert_eq!(cfg.optimizer.steps_per_epoch, 1);
        assert_eq!(cfg.optimizer.lambda_id, 1.0);
        assert_eq!(cfg.optimizer.lambda_att, 1.0);
        assert_eq!(cfg.io.manifest, d.path().join("m.jsonl"));
        assert_eq!(cfg.io.output, d.path().join("output"));
    }

    #[test]
    fn margin_out_of_range_is_named() {
        let d = dir_with_manifest();
        let err = RunConfig::from_toml_str("[io]\nmanifest = \"m.jsonl\"\n[optimizer]\nmargin = 1.5\n", d.path()).unwrap_err();
        let Error::Config(list) = err else { panic!() };
        assert!(list.iter().any(|e| e.contains("optimizer.margin") && e.contains("[0, 1]")), "{list:?}");
    }

    #[test]
    fn all_problems_reported_together() {
        let d = tempfile::tempdir().unwrap();
        let err = RunConfig::from_toml_str(
            "skip_limit = 2.0\n[io]\nmanifest = \"missing.jsonl\"\n[optimizer]\nmargin = -1.0\nlearning_rate = 0.0\n",
            d.path(),
        )
        .unwrap_err();
        let Error::Config(list) = err else { panic!() };
        assert_eq!(list.len(), 4, "{list:?}");
    }

    #[test]
    fn unknown_keys_are_listed() {
        let d = dir_with_manifest();
        let err = RunConfig::from_toml_str(
            "colour = 1\n[io]\nmanifest = \"m.jsonl\"\n[optimizer]\nlr = 0.1\n[pool]\nsize = 10\n",
            d.path(),
        )
        .unwrap_err();
        let Error::Config(list) = err else { panic!() };
        assert_eq!(list, vec!["unknown key `colour`".to_string(), "unknown key `optimizer.lr`".to_string()]);
    }

    #[test]
    fn hash_ignores_key_order() {
        let d = dir_with_manifest();
        let a = RunConfig::from_toml_str(
            "seed = 3\n[io]\nmanifest = \"m.jsonl\"\n[optimizer]\nmargin = 0.3\nepochs = 7\n",
            d.path(),
        )
        .unwrap();
        let b = RunConfig::from_toml_str(
            "seed = 3\n[optimizer]\nepochs = 7\nmargin = 0.3\n[io]\nmanifest = \"m.jsonl\"\n",
            d.path(),
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            seed: 4,
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn pretrained_needs_a_server_section() {
        let d = dir_with_manifest();
        let err = RunConfig::from_toml_str("[backend]\nkind = \"pretrained\"\n[io]\nmanifest = \"m.jsonl\"\n", d.path()).unwrap_err();
        let Error::Config(list) = err else { panic!() };
        assert!(list[0].contains("backend.server"));
    }
}

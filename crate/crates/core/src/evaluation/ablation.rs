use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::protocol::AttributeAccuracy;
use crate::error::{Error, Result};
use crate::io_util;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub margin: f64,
    pub fid: Option<f64>,
    pub detection_rate: Option<f64>,
    pub reid_rate: BTreeMap<String, f64>,
    pub attribute_accuracy: Option<AttributeAccuracy>,
    pub mean_final_cos_sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_fingerprints: BTreeMap<String, String>,
}

pub fn check_margins(margins: &[f64]) -> Result<()> {
    if margins.len() < 2 {
        return Err(Error::InsufficientMargins(margins.len()));
    }
    if let Some(m) = margins.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::Validation(format!("margin {m} is outside [0, 1]")));
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let tags: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.reid_rate.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["margin".to_string(), "fid".into(), "detection_rate".into()];
        header.extend(tags.iter().map(|t| format!("reid_{t}")));
        header.extend(["acc_inner", "acc_outer", "acc_combined", "mean_final_cos_sim"].map(String::from));
        let err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![format!("{}", r.margin), opt(r.fid), opt(r.detection_rate)];
            rec.extend(tags.iter().map(|t| opt(r.reid_rate.get(t).copied())));
            let a = r.attribute_accuracy.as_ref();
            rec.push(opt(a.map(|a| a.inner)));
            rec.push(opt(a.map(|a| a.outer)));
            rec.push(opt(a.map(|a| a.combined)));
            rec.push(format!("{}", r.mean_final_cos_sim));
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io_util::write_json(&dir.join("ablation.json"), self)?;
        io_util::write_atomic(&dir.join("ablation.csv"), self.to_csv()?.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_margin_is_rejected() {
        assert!(matches!(check_margins(&[0.5]), Err(Error::InsufficientMargins(1))));
        assert!(check_margins(&[0.0, 0.9]).is_ok());
        assert!(check_margins(&[0.0, 1.2]).is_err());
    }

    #[test]
    fn csv_has_one_line_per_margin() {
        let row = |m: f64| AblationRow {
            margin: m,
            fid: Some(1.5),
            detection_rate: Some(1.0),
            reid_rate: [("a,b".to_string(), 0.25)].into(),
            attribute_accuracy: None,
            mean_final_cos_sim: m,
        };
        let t = AblationTable {
            rows: vec![row(0.0), row(0.9)],
            config_hash: "h".into(),
            seed: 0,
            dataset_fingerprints: BTreeMap::new(),
        };
        let csv = t.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("\"reid_a,b\""));
        assert!(lines[2].starts_with("0.9,1.5,1,0.25,,,,0.9"));
    }
}

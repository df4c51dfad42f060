use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attributes::{AttributeSpec, Region};
use super::fid::fid;
use super::metrics::{detection_rate, reid_rate};
use super::protocol::{attribute_protocol, image_features, pseudo_label, shuffle_split, AttributeAccuracy, LabelMap};
use crate::backend::BackendBundle;
use crate::config::{EvalConfig, SplitPolicy};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::manifest::{Manifest, Split};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub real: usize,
    pub anonymized: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: Option<f64>,
    pub detection_rate: Option<f64>,
    pub reid_rate: BTreeMap<String, f64>,
    /// Trained on anonymized images, tested on real ones.
    pub attribute_accuracy: Option<AttributeAccuracy>,
    /// Same protocol trained on the real originals.
    pub attribute_accuracy_original: Option<AttributeAccuracy>,
    pub pseudo_labels: bool,
    pub counts: Counts,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_fingerprints: BTreeMap<String, String>,
    pub model_fingerprints: BTreeMap<String, String>,
}

pub fn attribute_spec(cfg: &EvalConfig) -> Result<AttributeSpec> {
    match &cfg.regions {
        None => Ok(AttributeSpec::celeba()),
        Some(r) => {
            let mut names = r.outer.clone();
            names.extend(r.inner.iter().cloned());
            let region = r
                .outer
                .iter()
                .map(|n| (n.clone(), Region::Outer))
                .chain(r.inner.iter().map(|n| (n.clone(), Region::Inner)))
                .collect();
            AttributeSpec::new(names, region)
        }
    }
}

fn load_images(m: &Manifest) -> Result<BTreeMap<String, ImageTensor>> {
    m.entries
        .par_iter()
        .map(|e| Ok((e.id.clone(), ImageTensor::load(&m.resolve(e))?)))
        .collect()
}

pub struct EvalInputs<'a> {
    pub backend: &'a BackendBundle,
    pub real: &'a Manifest,
    pub anonymized: &'a Manifest,
    pub cfg: &'a EvalConfig,
    pub seed: u64,
    pub config_hash: &'a str,
}

/// Every enabled metric for one anonymized dataset against its source.
pub fn evaluate_dataset(inp: &EvalInputs) -> Result<EvalReport> {
    let EvalInputs {
        backend,
        real,
        anonymized,
        cfg,
        ..
    } = *inp;
    let real_ids: BTreeSet<&str> = real.entries.iter().map(|e| e.id.as_str()).collect();
    if let Some(e) = anonymized.entries.iter().find(|e| !real_ids.contains(e.id.as_str())) {
        return Err(Error::ManifestMismatch(format!("anonymized `{}` has no source image", e.id)));
    }
    let real_images = load_images(real)?;
    let anon_images = load_images(anonymized)?;
    let anon_list: Vec<ImageTensor> = anon_images.values().cloned().collect();

    let detection_rate = if cfg.detection {
        Some(detection_rate(&anon_list, backend.face_detector.as_ref())?)
    } else {
        None
    };

    let mut reid = BTreeMap::new();
    if cfg.reid {
        let gallery: BTreeMap<String, ImageTensor> = real_images
            .iter()
            .filter(|(id, _)| anon_images.contains_key(*id))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (tag, enc) in &backend.reid_encoders {
            reid.insert(tag.clone(), reid_rate(&anon_images, &gallery, enc.as_ref())?);
        }
    }

    let fid = if cfg.fid {
        let feats = |m: &BTreeMap<String, ImageTensor>| -> Result<Vec<Vec<f64>>> {
            m.par_iter().map(|(_, im)| backend.fid_extractor.features(im)).collect()
        };
        Some(fid(&feats(&real_images)?, &feats(&anon_images)?)?)
    } else {
        None
    };

    let mut counts = Counts {
        real: real.len(),
        anonymized: anonymized.len(),
        ..Counts::default()
    };
    let mut used_pseudo = false;
    let (mut acc, mut acc_orig) = (None, None);
    if cfg.attributes {
        let spec = attribute_spec(cfg)?;
        let has_labels = real.entries.iter().all(|e| e.labels.is_some());
        let labels: Option<BTreeMap<String, LabelMap>> = if has_labels {
            Some(
                real.entries
                    .iter()
                    .map(|e| (e.id.clone(), e.labels.clone().unwrap_or_default()))
                    .collect(),
            )
        } else if cfg.pseudo_labels {
            used_pseudo = true;
            let ids: Vec<String> = real_images.keys().cloned().collect();
            let ims: Vec<ImageTensor> = real_images.values().cloned().collect();
            let l = pseudo_label(&ims, backend.attribute_classifier.as_deref())?;
            Some(ids.into_iter().zip(l).collect())
        } else {
            log::warn!("manifest has no attribute labels and pseudo-labelling is off; skipping attribute protocol");
            None
        };
        if let Some(labels) = labels {
            let ids: Vec<&str> = real.entries.iter().map(|e| e.id.as_str()).collect();
            let splits: Vec<Split> = real.entries.iter().map(|e| e.split).collect();
            let use_manifest = cfg.split == SplitPolicy::Manifest
                && splits.contains(&Split::Train)
                && splits.contains(&Split::Test);
            let is_test: Vec<bool> = if use_manifest {
                splits.iter().map(|s| *s == Split::Test).collect()
            } else {
                let (_, test) = shuffle_split(ids.len(), cfg.train_fraction, inp.seed);
                (0..ids.len()).map(|i| test.binary_search(&i).is_ok()).collect()
            };
            let train_ids: Vec<&str> = ids
                .iter()
                .zip(&is_test)
                .filter(|(id, t)| !**t && anon_images.contains_key(**id))
                .map(|(id, _)| *id)
                .collect();
            let test_ids: Vec<&str> = ids.iter().zip(&is_test).filter(|(_, t)| **t).map(|(id, _)| *id).collect();
            counts.train = train_ids.len();
            counts.test = test_ids.len();
            if train_ids.is_empty() || test_ids.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "attribute protocol needs train and test images, got {} and {}",
                    train_ids.len(),
                    test_ids.len()
                )));
            }
            let gather = |src: &BTreeMap<String, ImageTensor>, ids: &[&str]| -> Vec<ImageTensor> {
                ids.iter().map(|id| src[*id].clone()).collect()
            };
            let lab = |ids: &[&str]| -> Vec<LabelMap> { ids.iter().map(|id| labels[*id].clone()).collect() };
            let test_x = image_features(&gather(&real_images, &test_ids));
            let test_y = lab(&test_ids);
            let train_y = lab(&train_ids);
            let classifier = crate::evaluation::ClassifierConfig {
                seed: cfg.classifier.seed ^ inp.seed,
                ..cfg.classifier.clone()
            };
            acc = Some(attribute_protocol(
                &image_features(&gather(&anon_images, &train_ids)),
                &train_y,
                &test_x,
                &test_y,
                &spec,
                &classifier,
            )?);
            acc_orig = Some(attribute_protocol(
                &image_features(&gather(&real_images, &train_ids)),
                &train_y,
                &test_x,
                &test_y,
                &spec,
                &classifier,
            )?);
        }
    }

    let dataset_fingerprints = [
        ("real".to_string(), real.fingerprint()),
        ("anonymized".to_string(), anonymized.fingerprint()),
    ]
    .into();
    Ok(EvalReport {
        fid,
        detection_rate,
        reid_rate: reid,
        attribute_accuracy: acc,
        attribute_accuracy_original: acc_orig,
        pseudo_labels: used_pseudo,
        counts,
        config_hash: inp.config_hash.to_string(),
        seed: inp.seed,
        dataset_fingerprints,
        model_fingerprints: backend.model_fingerprints.clone(),
    })
}

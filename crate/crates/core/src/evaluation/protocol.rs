//! Train-on-one-set, test-on-real attribute classification, and pseudo-labels.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attributes::{AttributeSpec, Region};
use super::classifier::{ClassifierConfig, Mlp};
use crate::backend::AttributeClassifier;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub type LabelMap = BTreeMap<String, u8>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    pub inner: f64,
    pub outer: f64,
    pub combined: f64,
    pub per_attribute: BTreeMap<String, f64>,
}

impl AttributeAccuracy {
    /// Aggregates per-attribute accuracies (in `spec.names` order).
    pub fn aggregate(spec: &AttributeSpec, per: &[f64]) -> Self {
        let mean_of = |region: Option<Region>| {
            let v: Vec<f64> = per
                .iter()
                .enumerate()
                .filter(|(i, _)| region.is_none_or(|r| spec.region_of(*i) == r))
                .map(|(_, &a)| a)
                .collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Self {
            inner: mean_of(Some(Region::Inner)),
            outer: mean_of(Some(Region::Outer)),
            combined: mean_of(None),
            per_attribute: spec.names.iter().cloned().zip(per.iter().copied()).collect(),
        }
    }
}

/// Label rows in `spec.names` order; every name must be present.
pub fn label_matrix(spec: &AttributeSpec, labels: &[LabelMap]) -> Result<Vec<Vec<bool>>> {
    labels
        .iter()
        .enumerate()
        .map(|(row, map)| {
            spec.names
                .iter()
                .map(|n| match map.get(n) {
                    Some(0) => Ok(false),
                    Some(1) => Ok(true),
                    Some(v) => Err(Error::Label(format!("row {row}: `{n}` has value {v}"))),
                    None => Err(Error::Label(format!("row {row}: no label for `{n}`"))),
                })
                .collect()
        })
        .collect()
}

pub fn image_features(images: &[ImageTensor]) -> Vec<Vec<f64>> {
    images.iter().map(|im| im.as_slice().to_vec()).collect()
}

/// Trains on `(train_x, train_y)` and scores every attribute on the test set.
pub fn attribute_protocol(
    train_x: &[Vec<f64>],
    train_y: &[LabelMap],
    test_x: &[Vec<f64>],
    test_y: &[LabelMap],
    spec: &AttributeSpec,
    cfg: &ClassifierConfig,
) -> Result<AttributeAccuracy> {
    spec.validate()?;
    if test_x.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    if test_x.len() != test_y.len() {
        return Err(Error::Label(format!("{} test samples but {} label rows", test_x.len(), test_y.len())));
    }
    let ytr = label_matrix(spec, train_y)?;
    let yte = label_matrix(spec, test_y)?;
    let model = Mlp::train(train_x, &ytr, cfg)?;
    let probs = model.predict_proba(test_x)?;
    let per: Vec<f64> = (0..spec.names.len())
        .map(|a| {
            let hits = probs
                .iter()
                .zip(&yte)
                .filter(|(p, y)| (p[a] > 0.5) == y[a])
                .count();
            hits as f64 / test_x.len() as f64
        })
        .collect();
    Ok(AttributeAccuracy::aggregate(spec, &per))
}

/// Seeded 80/20 shuffle split. Returns (train, test) index lists, each sorted.
pub fn shuffle_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let mut train = idx[..cut.min(n)].to_vec();
    let mut test = idx[cut.min(n)..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Label rows with values permuted across samples, attribute by attribute.
pub fn shuffle_labels(labels: &[LabelMap], seed: u64) -> Vec<LabelMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labels.to_vec();
    let names: Vec<String> = labels.first().map(|m| m.keys().cloned().collect()).unwrap_or_default();
    for n in names {
        let mut col: Vec<Option<u8>> = labels.iter().map(|m| m.get(&n).copied()).collect();
        col.shuffle(&mut rng);
        for (m, v) in out.iter_mut().zip(col) {
            match v {
                Some(v) => m.insert(n.clone(), v),
                None => m.remove(&n),
            };
        }
    }
    out
}

pub const PSEUDO_THRESHOLD: f64 = 0.5;

/// Thresholded predictions of a pretrained classifier, in label-map form.
pub fn pseudo_label(
    images: &[ImageTensor],
    classifier: Option<&dyn AttributeClassifier>,
) -> Result<Vec<LabelMap>> {
    let classifier =
        classifier.ok_or_else(|| Error::Backend("no attribute classifier configured for pseudo-labelling".into()))?;
    let names = classifier.attribute_names();
    images
        .par_iter()
        .map(|im| {
            let p = classifier.predict(im)?;
            if p.len() != names.len() {
                return Err(Error::Backend(format!(
                    "classifier returned {} probabilities for {} attributes",
                    p.len(),
                    names.len()
                )));
            }
            Ok(names
                .iter()
                .zip(p)
                .map(|(n, p)| (n.clone(), (p > PSEUDO_THRESHOLD) as u8))
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f64);

    impl AttributeClassifier for Constant {
        fn attribute_names(&self) -> Vec<String> {
            vec!["A".into(), "B".into()]
        }
        fn predict(&self, _: &ImageTensor) -> Result<Vec<f64>> {
            Ok(vec![self.0; 2])
        }
    }

    #[test]
    fn pseudo_labels_threshold_at_half() {
        let ims = vec![ImageTensor::filled(2, 2, 0.5).unwrap(); 3];
        let l = pseudo_label(&ims, Some(&Constant(0.9))).unwrap();
        assert!(l.iter().all(|m| m.values().all(|&v| v == 1)));
        assert_eq!(l, pseudo_label(&ims, Some(&Constant(0.9))).unwrap());
        let l = pseudo_label(&ims, Some(&Constant(0.2))).unwrap();
        assert!(l.iter().all(|m| m.values().all(|&v| v == 0)));
        assert!(matches!(pseudo_label(&ims, None), Err(Error::Backend(_))));
    }

    #[test]
    fn combined_is_the_mean_over_all_attributes() {
        let spec = AttributeSpec::celeba();
        let per: Vec<f64> = (0..40).map(|i| (i as f64) / 40.0).collect();
        let acc = AttributeAccuracy::aggregate(&spec, &per);
        let mean = per.iter().sum::<f64>() / 40.0;
        assert_eq!(acc.combined, mean);
        let weighted = (17.0 * acc.outer + 23.0 * acc.inner) / 40.0;
        assert!((weighted - acc.combined).abs() < 1e-12);
    }

    #[test]
    fn missing_labels_are_reported() {
        let spec = AttributeSpec::celeba();
        let mut m = LabelMap::new();
        m.insert("Bald".into(), 1);
        assert!(matches!(label_matrix(&spec, &[m]), Err(Error::Label(_))));
    }

    #[test]
    fn split_is_a_partition() {
        let (a, b) = shuffle_split(50, 0.8, 3);
        assert_eq!((a.len(), b.len()), (40, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(shuffle_split(50, 0.8, 3), (a, b));
    }

    #[test]
    fn shuffled_labels_keep_column_counts() {
        let labels: Vec<LabelMap> = (0..20)
            .map(|i| [("A".to_string(), (i % 3 == 0) as u8)].into())
            .collect();
        let s = shuffle_labels(&labels, 1);
        let count = |l: &[LabelMap]| l.iter().map(|m| m["A"] as usize).sum::<usize>();
        assert_eq!(count(&labels), count(&s));
        assert_ne!(labels, s);
    }
}

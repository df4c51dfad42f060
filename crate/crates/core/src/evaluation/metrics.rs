use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::backend::{FaceDetector, IdentityEmbedding, IdentityEncoder};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub fn detection_rate(images: &[ImageTensor], detector: &dyn FaceDetector) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no images to run detection on".into()));
    }
    let found = images
        .par_iter()
        .map(|im| detector.detect(im).map(|d| d.found as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(found as f64 / images.len() as f64)
}

/// Index of the gallery entry most similar to `probe`; ties go to the
/// smallest index.
pub fn top1(probe: &IdentityEmbedding, gallery: &[IdentityEmbedding]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, g) in gallery.iter().enumerate() {
        let s = probe.cosine(g);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Fraction of probes whose top-1 gallery match is their own source.
/// `probes` pairs each anonymized embedding with its source id.
pub fn reid_rate_embeddings(
    probes: &[(String, IdentityEmbedding)],
    gallery: &[(String, IdentityEmbedding)],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::EmptyInput("no anonymized images to re-identify".into()));
    }
    let ids: BTreeSet<&str> = gallery.iter().map(|(id, _)| id.as_str()).collect();
    if ids.len() != gallery.len() {
        return Err(Error::ManifestMismatch("duplicate ids in the real gallery".into()));
    }
    let mut seen = BTreeSet::new();
    for (id, _) in probes {
        if !ids.contains(id.as_str()) {
            return Err(Error::ManifestMismatch(format!("source `{id}` missing from the real gallery")));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::ManifestMismatch(format!("source `{id}` has two anonymized images")));
        }
    }
    let embeddings: Vec<IdentityEmbedding> = gallery.iter().map(|(_, e)| e.clone()).collect();
    let hits = probes
        .par_iter()
        .filter(|(id, e)| top1(e, &embeddings).is_some_and(|i| &gallery[i].0 == id))
        .count();
    Ok(hits as f64 / probes.len() as f64)
}

/// Re-identification rate of anonymized images against the real originals
/// under one matcher. Both maps are keyed by real id.
pub fn reid_rate(
    anonymized: &BTreeMap<String, ImageTensor>,
    gallery: &BTreeMap<String, ImageTensor>,
    encoder: &dyn IdentityEncoder,
) -> Result<f64> {
    let embed = |m: &BTreeMap<String, ImageTensor>| -> Result<Vec<(String, IdentityEmbedding)>> {
        m.par_iter()
            .map(|(id, im)| Ok((id.clone(), encoder.embed(im)?)))
            .collect()
    };
    reid_rate_embeddings(&embed(anonymized)?, &embed(gallery)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Detection;
    use rand::{Rng, SeedableRng};

    struct Fixed(Vec<bool>);

    impl FaceDetector for Fixed {
        fn detect(&self, image: &ImageTensor) -> Result<Detection> {
            let i = (image.as_slice()[0] * 1000.0).round() as usize;
            Ok(Detection {
                found: self.0[i],
                bbox: None,
                confidence: 1.0,
            })
        }
    }

    fn tagged(n: usize) -> Vec<ImageTensor> {
        (0..n).map(|i| ImageTensor::filled(2, 2, i as f64 / 1000.0).unwrap()).collect()
    }

    fn emb(v: Vec<f64>) -> IdentityEmbedding {
        IdentityEmbedding::normalize(v).unwrap()
    }

    #[test]
    fn detection_counts() {
        let d = Fixed(vec![true; 4]);
        assert_eq!(detection_rate(&tagged(4), &d).unwrap(), 1.0);
        let d = Fixed((0..10).map(|i| i < 3).collect());
        assert!((detection_rate(&tagged(10), &d).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(detection_rate(&[], &d), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn gallery_against_itself_is_fully_reidentified() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let g: Vec<(String, IdentityEmbedding)> = (0..30)
            .map(|i| (format!("r{i}"), emb((0..16).map(|_| rng.random_range(-1.0..1.0)).collect())))
            .collect();
        assert_eq!(reid_rate_embeddings(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn missing_source_is_a_mismatch() {
        let g = vec![("a".to_string(), emb(vec![1.0, 0.0]))];
        let p = vec![("b".to_string(), emb(vec![1.0, 0.0]))];
        assert!(matches!(reid_rate_embeddings(&p, &g), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn null_rate_is_near_chance() {
        // Gallery lives in the first 8 coordinates; each probe is orthogonal
        // to all of it, plus a small gallery component picking a random argmax.
        let n = 200;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let gallery: Vec<(String, IdentityEmbedding)> = (0..n)
            .map(|i| {
                let mut v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                v.extend([0.0; 8]);
                (format!("r{i}"), emb(v))
            })
            .collect();
        let mut hits = 0;
        for i in 0..n {
            let target = rng.random_range(0..n);
            let mut v = vec![0.0; 16];
            v[8 + i % 8] = 1.0;
            for (k, g) in gallery[target].1.as_slice()[..8].iter().enumerate() {
                v[k] = 1e-3 * g;
            }
            let p = vec![(format!("r{i}"), emb(v))];
            let sub: Vec<_> = gallery.clone();
            hits += (reid_rate_embeddings(&p, &sub).unwrap() == 1.0) as usize;
        }
        assert!(hits as f64 / n as f64 <= 3.0 / n as f64, "{hits} hits");
    }

    #[test]
    fn top1_ties_take_the_smallest_index() {
        let g = vec![emb(vec![1.0, 0.0]), emb(vec![1.0, 0.0])];
        assert_eq!(top1(&emb(vec![1.0, 0.0]), &g), Some(0));
    }
}

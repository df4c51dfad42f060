//! Fake pool generation, dataset inversion, nearest-neighbour pairing in the
//! semantic class-token space, and construction of spliced latent codes.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{sample_latent, BackendBundle};
use crate::error::{Error, Result};
use crate::hashing::Fingerprinter;
use crate::image::ImageTensor;
use crate::io_util;
use crate::latent::{LatentCode, LayerSplit, LATENT_COLS, LATENT_LEN};
use crate::manifest::Manifest;

pub const FEATURE_SPACE_CLS: &str = "semantic-cls";

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub fake_id: u64,
    pub code: LatentCode,
    pub cls: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FakePool {
    /// Sorted by `fake_id`.
    pub entries: Vec<PoolEntry>,
    pub seed: u64,
}

impl FakePool {
    pub fn new(mut entries: Vec<PoolEntry>, seed: u64) -> Result<Self> {
        entries.sort_by_key(|e| e.fake_id);
        if entries.windows(2).any(|w| w[0].fake_id == w[1].fake_id) {
            return Err(Error::Validation("duplicate fake_id in pool".into()));
        }
        Ok(Self { entries, seed })
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, fake_id: u64) -> Option<&PoolEntry> {
        self.entries
            .binary_search_by_key(&fake_id, |e| e.fake_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprinter::new();
        fp.update(&self.seed.to_le_bytes());
        for e in &self.entries {
            fp.update(&e.fake_id.to_le_bytes());
            fp.update_f32s(e.code.as_slice());
            let cls: Vec<u8> = e.cls.iter().flat_map(|v| v.to_le_bytes()).collect();
            fp.update(&cls);
        }
        fp.finish()
    }
}

/// Computes one pool entry: sample, render, encode.
pub fn pool_entry(backend: &BackendBundle, seed: u64, fake_id: u64) -> Result<PoolEntry> {
    let code = sample_latent(backend.generator.as_ref(), seed, fake_id as usize)?;
    let image = backend.generate(&code)?;
    let cls = backend.embed_semantic(&image)?.cls;
    Ok(PoolEntry { fake_id, code, cls })
}

/// Builds a pool strictly larger than the real set.
pub fn build_pool(
    backend: &BackendBundle,
    size: usize,
    seed: u64,
    real_count: usize,
) -> Result<FakePool> {
    check_pool_size(size, real_count)?;
    let entries = (0..size as u64)
        .into_par_iter()
        .map(|id| pool_entry(backend, seed, id))
        .collect::<Result<Vec<_>>>()?;
    FakePool::new(entries, seed)
}

pub fn check_pool_size(size: usize, real_count: usize) -> Result<()> {
    if size == 0 || size <= real_count {
        return Err(Error::PoolTooSmall {
            size,
            reals: real_count,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealRecord {
    pub real_id: String,
    pub source: PathBuf,
    pub code: LatentCode,
    /// Class-token feature of the original image, not of its reconstruction.
    pub cls: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct InversionOutput {
    pub records: Vec<RealRecord>,
    pub skipped: Vec<SkippedItem>,
}

pub fn enforce_skip_limit(skipped: usize, total: usize, limit: f64) -> Result<()> {
    if total > 0 && skipped as f64 > limit * total as f64 {
        return Err(Error::SkipLimitExceeded {
            skipped,
            total,
            limit,
        });
    }
    Ok(())
}

fn invert_one(backend: &BackendBundle, path: &Path) -> Result<(LatentCode, Vec<f64>)> {
    let image = ImageTensor::load(path)?;
    let code = backend.invert(&image)?;
    let cls = backend.embed_semantic(&image)?.cls;
    Ok((code, cls))
}

/// Inverts every manifest image. Unreadable or rejected items are recorded and
/// skipped; the run fails only when the skipped fraction exceeds `skip_limit`.
pub fn invert_dataset(
    backend: &BackendBundle,
    manifest: &Manifest,
    skip_limit: f64,
) -> Result<InversionOutput> {
    let results: Vec<_> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            (e, path.clone(), invert_one(backend, &path))
        })
        .collect();
    let mut out = InversionOutput::default();
    for (entry, source, res) in results {
        match res {
            Ok((code, cls)) => out.records.push(RealRecord {
                real_id: entry.id.clone(),
                source,
                code,
                cls,
            }),
            Err(e @ (Error::Io { .. } | Error::Image { .. } | Error::InversionRejected(_))) => {
                log::warn!("skipping {}: {e}", entry.id);
                out.skipped.push(SkippedItem {
                    id: entry.id.clone(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    enforce_skip_limit(out.skipped.len(), manifest.len(), skip_limit)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub real_id: String,
    pub fake_id: u64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub pool_fingerprint: String,
    pub feature_space: String,
    pub unique_assignment: bool,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairManifest {
    pub entries: Vec<PairEntry>,
    pub meta: PairMeta,
}

impl PairManifest {
    pub fn get(&self, real_id: &str) -> Option<&PairEntry> {
        self.entries.iter().find(|e| e.real_id == real_id)
    }

    /// Writes `<stem>.jsonl` plus the `<stem>.meta.json` sidecar.
    pub fn save(&self, jsonl: &Path) -> Result<()> {
        io_util::write_jsonl(jsonl, &self.entries)?;
        io_util::write_json(&meta_path(jsonl), &self.meta)
    }

    pub fn load(jsonl: &Path) -> Result<Self> {
        Ok(Self {
            entries: io_util::read_jsonl(jsonl)?,
            meta: io_util::read_json(&meta_path(jsonl))?,
        })
    }

    /// Re-checks stored distances against the features they were computed from.
    pub fn verify(&self, reals: &[RealRecord], pool: &FakePool, tol: f64) -> Result<()> {
        if self.entries.len() != reals.len() {
            return Err(Error::ManifestMismatch(format!(
                "{} pairs for {} real records",
                self.entries.len(),
                reals.len()
            )));
        }
        for (entry, real) in self.entries.iter().zip(reals) {
            if entry.real_id != real.real_id {
                return Err(Error::ManifestMismatch(format!(
                    "pair order differs at `{}`",
                    real.real_id
                )));
            }
            let fake = pool.get(entry.fake_id).ok_or_else(|| {
                Error::ManifestMismatch(format!("fake_id {} not in pool", entry.fake_id))
            })?;
            let d = euclidean(&real.cls, &fake.cls);
            if (d - entry.distance).abs() > tol {
                return Err(Error::ManifestMismatch(format!(
                    "distance for `{}` is {}, recomputed {d}",
                    entry.real_id, entry.distance
                )));
            }
        }
        Ok(())
    }
}

fn meta_path(jsonl: &Path) -> PathBuf {
    let stem = jsonl.file_stem().and_then(|s| s.to_str()).unwrap_or("pairs");
    jsonl.with_file_name(format!("{stem}.meta.json"))
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Exact nearest neighbour of every real record in the pool. Ties go to the
/// smallest `fake_id`; several reals may share one neighbour.
pub fn pair_nearest(reals: &[RealRecord], pool: &FakePool) -> Result<PairManifest> {
    if pool.entries.is_empty() {
        return Err(Error::EmptyPool);
    }
    if reals.is_empty() {
        return Err(Error::EmptyInput("no real records to pair".into()));
    }
    check_feature_dims(reals, pool)?;
    let entries = reals
        .par_iter()
        .map(|r| {
            let mut best = (f64::INFINITY, u64::MAX);
            for f in &pool.entries {
                let d = squared_distance(&r.cls, &f.cls);
                if d < best.0 {
                    best = (d, f.fake_id);
                }
            }
            PairEntry {
                real_id: r.real_id.clone(),
                fake_id: best.1,
                distance: best.0.sqrt(),
            }
        })
        .collect();
    Ok(PairManifest {
        entries,
        meta: PairMeta {
            pool_fingerprint: pool.fingerprint(),
            feature_space: FEATURE_SPACE_CLS.into(),
            unique_assignment: false,
            config_hash: String::new(),
        },
    })
}

/// Greedy one-to-one assignment in ascending distance order.
pub fn pair_unique(reals: &[RealRecord], pool: &FakePool) -> Result<PairManifest> {
    if pool.entries.is_empty() {
        return Err(Error::EmptyPool);
    }
    if reals.is_empty() {
        return Err(Error::EmptyInput("no real records to pair".into()));
    }
    if pool.size() < reals.len() {
        return Err(Error::PoolTooSmall {
            size: pool.size(),
            reals: reals.len(),
        });
    }
    check_feature_dims(reals, pool)?;
    let mut candidates: Vec<(f64, usize, usize)> = reals
        .par_iter()
        .enumerate()
        .flat_map_iter(|(ri, r)| {
            pool.entries
                .iter()
                .enumerate()
                .map(move |(fi, f)| (squared_distance(&r.cls, &f.cls), ri, fi))
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut real_done = vec![None; reals.len()];
    let mut fake_used = vec![false; pool.size()];
    let mut remaining = reals.len();
    for (d, ri, fi) in candidates {
        if remaining == 0 {
            break;
        }
        if real_done[ri].is_none() && !fake_used[fi] {
            real_done[ri] = Some((fi, d));
            fake_used[fi] = true;
            remaining -= 1;
        }
    }
    let entries = reals
        .iter()
        .zip(real_done)
        .map(|(r, slot)| {
            let (fi, d) = slot.expect("pool at least as large as reals");
            PairEntry {
                real_id: r.real_id.clone(),
                fake_id: pool.entries[fi].fake_id,
                distance: d.sqrt(),
            }
        })
        .collect();
    Ok(PairManifest {
        entries,
        meta: PairMeta {
            pool_fingerprint: pool.fingerprint(),
            feature_space: FEATURE_SPACE_CLS.into(),
            unique_assignment: true,
            config_hash: String::new(),
        },
    })
}

fn check_feature_dims(reals: &[RealRecord], pool: &FakePool) -> Result<()> {
    let dim = pool.entries[0].cls.len();
    let bad = reals
        .iter()
        .map(|r| r.cls.len())
        .chain(pool.entries.iter().map(|e| e.cls.len()))
        .find(|&d| d != dim);
    match bad {
        Some(d) => Err(Error::FeatureShapeMismatch(format!(
            "class-token features of width {d} and {dim}"
        ))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub real_id: String,
    pub fake_id: u64,
}

/// A code split into frozen rows (from the real inversion) and a trainable band.
#[derive(Clone, Debug, PartialEq)]
pub struct SplicedCode {
    pub split: LayerSplit,
    pub frozen_low: Vec<f32>,
    pub trainable: Vec<f32>,
    pub frozen_high: Vec<f32>,
    pub provenance: Provenance,
}

impl SplicedCode {
    pub fn assemble(&self) -> LatentCode {
        let mut v = Vec::with_capacity(LATENT_LEN);
        v.extend_from_slice(&self.frozen_low);
        v.extend_from_slice(&self.trainable);
        v.extend_from_slice(&self.frozen_high);
        LatentCode::from_vec(v).expect("spliced parts are valid by construction")
    }

    /// Splits an assembled code back into bands.
    pub fn from_assembled(code: &LatentCode, split: LayerSplit, provenance: Provenance) -> Self {
        let s = code.as_slice();
        let r = split.flat_range();
        Self {
            split,
            frozen_low: s[..r.start].to_vec(),
            trainable: s[r.clone()].to_vec(),
            frozen_high: s[r.end..].to_vec(),
            provenance,
        }
    }

    /// Working-precision copy of the full code.
    pub fn assembled_f64(&self) -> Vec<f64> {
        self.frozen_low
            .iter()
            .chain(&self.trainable)
            .chain(&self.frozen_high)
            .map(|&v| v as f64)
            .collect()
    }

    pub fn with_trainable(&self, block: &[f64]) -> Result<Self> {
        if block.len() != self.trainable.len() {
            return Err(Error::Validation(format!(
                "trainable block has {} values, expected {}",
                block.len(),
                self.trainable.len()
            )));
        }
        if block.iter().any(|v| !v.is_finite() || !(*v as f32).is_finite()) {
            return Err(Error::Validation("trainable block is not finite".into()));
        }
        Ok(Self {
            trainable: block.iter().map(|&v| v as f32).collect(),
            ..self.clone()
        })
    }

    pub fn trainable_rows(&self) -> usize {
        self.trainable.len() / LATENT_COLS
    }
}

/// Frozen rows from the real inversion, trainable rows from the fake neighbour.
pub fn splice_init(
    real: &RealRecord,
    fake_code: &LatentCode,
    fake_id: u64,
    split: LayerSplit,
) -> SplicedCode {
    let r = split.flat_range();
    let real_s = real.code.as_slice();
    SplicedCode {
        split,
        frozen_low: real_s[..r.start].to_vec(),
        trainable: fake_code.as_slice()[r.clone()].to_vec(),
        frozen_high: real_s[r.end..].to_vec(),
        provenance: Provenance {
            real_id: real.real_id.clone(),
            fake_id,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn record(id: &str, cls: Vec<f64>) -> RealRecord {
        RealRecord {
            real_id: id.into(),
            source: PathBuf::new(),
            code: LatentCode::zeros(),
            cls,
        }
    }

    fn entry(id: u64, cls: Vec<f64>) -> PoolEntry {
        PoolEntry {
            fake_id: id,
            code: LatentCode::zeros(),
            cls,
        }
    }

    fn random_code(rng: &mut impl Rng) -> LatentCode {
        LatentCode::from_vec((0..LATENT_LEN).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn pool_size_must_exceed_real_count() {
        assert!(matches!(check_pool_size(10, 10), Err(Error::PoolTooSmall { .. })));
        assert!(matches!(check_pool_size(0, 0), Err(Error::PoolTooSmall { .. })));
        assert!(check_pool_size(11, 10).is_ok());
    }

    #[test]
    fn exact_match_wins_with_zero_distance() {
        let pool = FakePool::new(
            vec![entry(0, vec![1.0, 1.0]), entry(1, vec![0.5, 0.25]), entry(2, vec![3.0, 0.0])],
            0,
        )
        .unwrap();
        let m = pair_nearest(&[record("a", vec![0.5, 0.25])], &pool).unwrap();
        assert_eq!(m.entries[0].fake_id, 1);
        assert_eq!(m.entries[0].distance, 0.0);
    }

    #[test]
    fn singleton_pool_takes_everyone() {
        let pool = FakePool::new(vec![entry(9, vec![0.0, 0.0])], 0).unwrap();
        let reals = vec![record("a", vec![1.0, 0.0]), record("b", vec![0.0, 2.0])];
        let m = pair_nearest(&reals, &pool).unwrap();
        assert!(m.entries.iter().all(|e| e.fake_id == 9));
        assert_eq!(m.entries[1].distance, 2.0);
    }

    #[test]
    fn ties_go_to_smallest_fake_id() {
        let pool = FakePool::new(vec![entry(5, vec![1.0]), entry(3, vec![-1.0])], 0).unwrap();
        let m = pair_nearest(&[record("a", vec![0.0])], &pool).unwrap();
        assert_eq!(m.entries[0].fake_id, 3);
    }

    #[test]
    fn empty_pool_is_an_error() {
        let pool = FakePool::new(vec![], 0).unwrap();
        assert!(matches!(
            pair_nearest(&[record("a", vec![0.0])], &pool),
            Err(Error::EmptyPool)
        ));
    }

    #[test]
    fn unique_assignment_never_reuses_a_fake() {
        let pool = FakePool::new(
            vec![entry(0, vec![0.0]), entry(1, vec![10.0]), entry(2, vec![20.0])],
            0,
        )
        .unwrap();
        let reals = vec![record("a", vec![0.1]), record("b", vec![0.2])];
        let shared = pair_nearest(&reals, &pool).unwrap();
        assert_eq!(shared.entries[0].fake_id, shared.entries[1].fake_id);
        let unique = pair_unique(&reals, &pool).unwrap();
        assert_eq!(unique.entries[0].fake_id, 0);
        assert_eq!(unique.entries[1].fake_id, 1);
    }

    #[test]
    fn manifest_roundtrip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let pool = FakePool::new(vec![entry(0, vec![0.0, 3.0]), entry(1, vec![4.0, 0.0])], 0).unwrap();
        let reals = vec![record("a", vec![0.0, 0.0])];
        let m = pair_nearest(&reals, &pool).unwrap();
        assert_eq!(m.entries[0].distance, 3.0);
        let p = dir.path().join("pairs.jsonl");
        m.save(&p).unwrap();
        assert!(dir.path().join("pairs.meta.json").exists());
        let back = PairManifest::load(&p).unwrap();
        assert_eq!(back, m);
        back.verify(&reals, &pool, 1e-6).unwrap();
    }

    #[test]
    fn self_splice_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut r = record("a", vec![]);
        r.code = random_code(&mut rng);
        let s = splice_init(&r, &r.code, 0, LayerSplit::default());
        assert_eq!(s.assemble(), r.code);
        assert_eq!(s.trainable.len(), 5 * 512);
    }

    #[test]
    fn splice_takes_rows_from_the_right_source() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut r = record("a", vec![]);
            r.code = random_code(&mut rng);
            let f = random_code(&mut rng);
            let a = splice_init(&r, &f, 1, LayerSplit::default()).assemble();
            let (mut diff_real, mut diff_fake) = (0, 0);
            for row in 0..18 {
                for c in 0..512 {
                    let i = row * 512 + c;
                    let v = a.as_slice()[i];
                    if v != r.code.as_slice()[i] {
                        diff_real += 1;
                        assert!((3..8).contains(&row));
                    }
                    if v != f.as_slice()[i] {
                        diff_fake += 1;
                        assert!(!(3..8).contains(&row));
                    }
                }
            }
            assert_eq!(diff_real, 5 * 512);
            assert_eq!(diff_fake, 13 * 512);
        }
    }
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use latent_anon::backend::synthetic::{SyntheticParams, SyntheticTestbed};
use latent_anon::backend::BackendBundle;
use latent_anon::config::RunConfig;
use latent_anon::dataset::write_synthetic_dataset;
use latent_anon::image::ImageTensor;
use latent_anon::latent::LayerSplit;
use latent_anon::pairing::{build_pool, pair_nearest, splice_init, FakePool, PairManifest, RealRecord, SplicedCode};
use rayon::prelude::*;

pub struct Jobs {
    pub testbed: Arc<SyntheticTestbed>,
    pub backend: BackendBundle,
    pub reals: Vec<RealRecord>,
    pub images: Vec<ImageTensor>,
    pub pool: FakePool,
    pub pairs: PairManifest,
}

impl Jobs {
    /// `n` in-memory anonymization jobs: real faces, their inversions, a pool
    /// twice as large and nearest-neighbour pairs.
    pub fn new(n: usize, seed: u64, coupling: f64) -> Self {
        let testbed = Arc::new(
            SyntheticTestbed::new(SyntheticParams {
                coupling,
                ..SyntheticParams::default()
            })
            .unwrap(),
        );
        let backend = testbed.clone().bundle();
        let (reals, images): (Vec<_>, Vec<_>) = (0..n)
            .into_par_iter()
            .map(|i| {
                let code = testbed.sample_real_code(seed, i).unwrap();
                let image = backend.generate(&code).unwrap();
                let rec = RealRecord {
                    real_id: format!("face-{i:05}"),
                    source: PathBuf::new(),
                    code: backend.invert(&image).unwrap(),
                    cls: backend.embed_semantic(&image).unwrap().cls,
                };
                (rec, image)
            })
            .unzip();
        let pool = build_pool(&backend, 2 * n, seed ^ 0x5eed, n).unwrap();
        let pairs = pair_nearest(&reals, &pool).unwrap();
        Self {
            testbed,
            backend,
            reals,
            images,
            pool,
            pairs,
        }
    }

    pub fn spliced(&self, i: usize) -> SplicedCode {
        let p = &self.pairs.entries[i];
        splice_init(
            &self.reals[i],
            &self.pool.get(p.fake_id).unwrap().code,
            p.fake_id,
            LayerSplit::default(),
        )
    }
}

/// A synthetic dataset plus a run config pointing at it.
pub fn synthetic_run(dir: &Path, count: usize, extra_toml: &str) -> RunConfig {
    let data = dir.join("data");
    write_synthetic_dataset(&SyntheticParams::default(), count, 1, 0.8, &data).unwrap();
    let text = format!(
        "[backend]\nkind = \"synthetic\"\n[io]\nmanifest = \"data/manifest.jsonl\"\noutput = \"out\"\n{extra_toml}"
    );
    std::fs::write(dir.join("run.toml"), &text).unwrap();
    RunConfig::load(&dir.join("run.toml")).unwrap()
}

/// Every file under `root` with its bytes, sorted by relative path.
/// `ledger.json` and `events.jsonl` carry timestamps and are left out.
pub fn tree_contents(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().to_string();
                if rel != "ledger.json" && rel != "events.jsonl" {
                    out.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

//! Dataset-level anonymization: one independent optimization job per real
//! image, resumable through per-item completion markers.
//!
//! Layout under the output directory:
//!
//! ```text
//! codes/<stem>.falc          optimized code
//! images/<stem>.png          rendered anonymized face
//! trajectories/<stem>.jsonl  per-step losses
//! done/<stem>.json           completion marker, written last
//! records.jsonl              all records, input order
//! failures.jsonl             items skipped after an error
//! manifest.jsonl             anonymized dataset, labels inherited
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::BackendBundle;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io_util::{self, file_stem_for};
use crate::latent::{LatentCode, LayerSplit};
use crate::manifest::{Manifest, ManifestEntry};
use crate::optimizer::{optimize_latent, HyperParams, StepRecord};
use crate::pairing::{enforce_skip_limit, splice_init, FakePool, PairManifest, Provenance, RealRecord, SkippedItem, SplicedCode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnonymizedRecord {
    pub real_id: String,
    pub fake_id: u64,
    /// Relative to the output directory.
    pub code_file: PathBuf,
    pub image_file: PathBuf,
    pub code_fingerprint: String,
    #[serde(rename = "final")]
    pub final_step: StepRecord,
    pub config_hash: String,
}

pub struct AnonymizeJob<'a> {
    pub backend: &'a BackendBundle,
    pub reals: &'a [RealRecord],
    pub manifest: &'a Manifest,
    pub pairs: &'a PairManifest,
    pub pool: &'a FakePool,
    pub hp: &'a HyperParams,
    pub split: LayerSplit,
    pub config_hash: &'a str,
    pub skip_limit: f64,
    /// Stop with [`Error::Interrupted`] after this many newly computed items.
    pub item_limit: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct AnonymizeOutput {
    pub records: Vec<AnonymizedRecord>,
    pub codes: Vec<SplicedCode>,
    pub failures: Vec<SkippedItem>,
    pub manifest: Manifest,
    /// Items computed in this call, as opposed to loaded from markers.
    pub computed: usize,
}

fn rel_paths(id: &str) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let s = file_stem_for(id);
    (
        PathBuf::from("codes").join(format!("{s}.falc")),
        PathBuf::from("images").join(format!("{s}.png")),
        PathBuf::from("trajectories").join(format!("{s}.jsonl")),
        PathBuf::from("done").join(format!("{s}.json")),
    )
}

/// A finished item from an earlier run, if its marker and code are intact.
fn load_done(dir: &Path, real: &RealRecord, split: LayerSplit, config_hash: &str) -> Option<(AnonymizedRecord, SplicedCode)> {
    let (_, _, _, done) = rel_paths(&real.real_id);
    let rec: AnonymizedRecord = io_util::read_json(&dir.join(done)).ok()?;
    let code = LatentCode::load(&dir.join(&rec.code_file)).ok()?;
    if code.fingerprint() != rec.code_fingerprint || rec.real_id != real.real_id || rec.config_hash != config_hash {
        return None;
    }
    let spliced = SplicedCode::from_assembled(
        &code,
        split,
        Provenance {
            real_id: rec.real_id.clone(),
            fake_id: rec.fake_id,
        },
    );
    Some((rec, spliced))
}

fn run_one(job: &AnonymizeJob, dir: &Path, real: &RealRecord) -> Result<(AnonymizedRecord, SplicedCode)> {
    let pair = job
        .pairs
        .get(&real.real_id)
        .ok_or_else(|| Error::ManifestMismatch(format!("no pair for `{}`", real.real_id)))?;
    let fake = job
        .pool
        .get(pair.fake_id)
        .ok_or_else(|| Error::ManifestMismatch(format!("fake_id {} not in pool", pair.fake_id)))?;
    let real_image = ImageTensor::load(&real.source)?;
    let spliced = splice_init(real, &fake.code, pair.fake_id, job.split);
    let out = optimize_latent(job.backend, &real.real_id, &real_image, &spliced, job.hp)?;
    let code = out.code.assemble();
    let image = job.backend.generate(&code)?;
    let (code_file, image_file, traj_file, done_file) = rel_paths(&real.real_id);
    code.save(&dir.join(&code_file))?;
    image.save_png(&dir.join(&image_file))?;
    io_util::write_jsonl(&dir.join(traj_file), &out.report.steps)?;
    let rec = AnonymizedRecord {
        real_id: real.real_id.clone(),
        fake_id: pair.fake_id,
        code_file,
        image_file,
        code_fingerprint: code.fingerprint(),
        final_step: *out.report.last().expect("trajectory has a final record"),
        config_hash: job.config_hash.to_string(),
    };
    io_util::write_json(&dir.join(done_file), &rec)?;
    Ok((rec, out.code))
}

fn is_item_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence { .. } | Error::Backend(_) | Error::Io { .. } | Error::Image { .. } | Error::Validation(_)
    )
}

/// Optimizes every real record. Items already marked done in `dir` are
/// loaded, not recomputed.
pub fn anonymize_dataset(job: &AnonymizeJob, dir: &Path) -> Result<AnonymizeOutput> {
    for sub in ["codes", "images", "trajectories", "done"] {
        io_util::ensure_dir(&dir.join(sub))?;
    }
    let existing: Vec<Option<(AnonymizedRecord, SplicedCode)>> =
        job.reals.par_iter().map(|r| load_done(dir, r, job.split, job.config_hash)).collect();
    let pending: Vec<usize> = (0..job.reals.len()).filter(|&i| existing[i].is_none()).collect();
    let (batch, interrupted) = match job.item_limit {
        Some(k) if k < pending.len() => (&pending[..k], true),
        _ => (&pending[..], false),
    };
    let computed: Vec<(usize, Result<(AnonymizedRecord, SplicedCode)>)> = batch
        .par_iter()
        .map(|&i| (i, run_one(job, dir, &job.reals[i])))
        .collect();
    if interrupted {
        return Err(Error::Interrupted {
            completed: job.reals.len() - pending.len() + batch.len(),
        });
    }
    let mut results = existing;
    let mut failures = Vec::new();
    let mut trajectories_failed = Vec::new();
    for (i, res) in computed {
        match res {
            Ok(v) => results[i] = Some(v),
            Err(e) if is_item_failure(&e) => {
                log::warn!("anonymization of {} failed: {e}", job.reals[i].real_id);
                if let Error::Divergence { trajectory, .. } = &e {
                    trajectories_failed.push((i, trajectory.clone()));
                }
                failures.push(SkippedItem {
                    id: job.reals[i].real_id.clone(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    for (i, t) in trajectories_failed {
        let (_, _, traj, _) = rel_paths(&job.reals[i].real_id);
        io_util::write_jsonl(&dir.join(traj), &t)?;
    }
    io_util::write_jsonl(&dir.join("failures.jsonl"), &failures)?;
    enforce_skip_limit(failures.len(), job.reals.len(), job.skip_limit)?;

    let by_id: BTreeMap<&str, &ManifestEntry> = job.manifest.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut records = Vec::new();
    let mut codes = Vec::new();
    let mut entries = Vec::new();
    for (real, slot) in job.reals.iter().zip(results) {
        let Some((rec, code)) = slot else { continue };
        let src = by_id
            .get(real.real_id.as_str())
            .ok_or_else(|| Error::ManifestMismatch(format!("`{}` is not in the input manifest", real.real_id)))?;
        entries.push(ManifestEntry {
            id: real.real_id.clone(),
            path: rec.image_file.clone(),
            split: src.split,
            labels: src.labels.clone(),
            pseudo_labels: src.pseudo_labels,
        });
        records.push(rec);
        codes.push(code);
    }
    let manifest = Manifest::new(entries, dir)?;
    manifest.save(&dir.join("manifest.jsonl"))?;
    io_util::write_jsonl(&dir.join("records.jsonl"), &records)?;
    Ok(AnonymizeOutput {
        records,
        codes,
        failures,
        manifest,
        computed: batch.len(),
    })
}

//! Stage runner. Each stage writes into its own directory under the output
//! root and is recorded in `ledger.json` with the fingerprint of its inputs
//! and the hash of every file it produced.
//!
//! ```text
//! ledger.json    stage records
//! events.jsonl   start / finish / skip / failure events
//! pool/          chunk-NNNNN.bin, pool.json
//! invert/        codes/, records.jsonl, skipped.jsonl
//! pair/          pairs.jsonl, pairs.meta.json
//! anonymize/     see [`crate::anonymize`]
//! evaluate/      report.json
//! ablate/        m-<margin>/, ablation.json, ablation.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anonymize::{anonymize_dataset, AnonymizeJob, AnonymizedRecord};
use crate::backend::{BackendBundle, BackendKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::ablation::{check_margins, AblationRow, AblationTable};
use crate::evaluation::{evaluate_dataset, EvalInputs, EvalReport};
use crate::hashing::{canonical_hash, sha256_hex};
use crate::io_util::{self, file_fingerprint, file_stem_for};
use crate::latent::{LatentCode, LayerSplit};
use crate::manifest::Manifest;
use crate::pairing::{
    check_pool_size, invert_dataset, pair_nearest, pair_unique, pool_entry, FakePool, PairManifest, PoolEntry,
    RealRecord, SkippedItem,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pool,
    Invert,
    Pair,
    Anonymize,
    Evaluate,
    Ablate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Pool,
        Stage::Invert,
        Stage::Pair,
        Stage::Anonymize,
        Stage::Evaluate,
        Stage::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pool => "pool",
            Stage::Invert => "invert",
            Stage::Pair => "pair",
            Stage::Anonymize => "anonymize",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
        }
    }

    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Pool | Stage::Invert => &[],
            Stage::Pair => &[Stage::Pool, Stage::Invert],
            Stage::Anonymize => &[Stage::Pool, Stage::Invert, Stage::Pair],
            Stage::Evaluate => &[Stage::Anonymize],
            Stage::Ablate => &[Stage::Pool, Stage::Invert, Stage::Pair],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub input_fingerprint: String,
    /// Output file, relative to the output root, to its sha256.
    pub outputs: BTreeMap<String, String>,
    /// Upstream output files consumed, with the hash seen at start.
    pub inputs: BTreeMap<String, String>,
    pub started_ms: u64,
    pub finished_ms: Option<u64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl Ledger {
    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join("ledger.json");
        if p.exists() {
            io_util::read_json(&p)
        } else {
            Ok(Self::default())
        }
    }

    fn save(&self, root: &Path) -> Result<()> {
        io_util::write_json(&root.join("ledger.json"), self)
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stages.get(&stage).map_or(StageStatus::Pending, |r| r.status)
    }
}

#[derive(Serialize)]
struct Event<'a> {
    ts_ms: u64,
    stage: &'a str,
    event: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<String>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// What happened when a stage was requested.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Inputs unchanged and outputs intact; nothing was done.
    UpToDate,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub backend: BackendBundle,
    pub root: PathBuf,
    /// Keep partial stage output and continue from it.
    pub resume: bool,
    /// Testing hook: stop anonymization after this many new items.
    pub item_limit: Option<usize>,
}

fn split() -> LayerSplit {
    LayerSplit::default()
}

impl Pipeline {
    pub fn new(cfg: RunConfig, backend: BackendBundle) -> Result<Self> {
        let root = cfg.io.output.clone();
        io_util::ensure_dir(&root)?;
        Ok(Self {
            cfg,
            backend,
            root,
            resume: false,
            item_limit: None,
        })
    }

    /// Connects the backend named in the config.
    pub fn from_config(cfg: RunConfig) -> Result<Self> {
        let backend = match cfg.backend.kind {
            BackendKind::Synthetic => BackendBundle::synthetic(cfg.backend.synthetic.clone())?,
            BackendKind::Pretrained => cfg
                .backend
                .server
                .as_ref()
                .ok_or_else(|| Error::Config(vec!["backend.server: required for the pretrained backend".into()]))?
                .connect()?,
        };
        Self::new(cfg, backend)
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    fn event(&self, stage: Stage, event: &str, detail: Option<String>) -> Result<()> {
        let line = serde_json::to_string(&Event {
            ts_ms: now_ms(),
            stage: stage.name(),
            event,
            detail,
        })
        .map_err(|e| Error::json("event", e))?;
        io_util::append_line(&self.root.join("events.jsonl"), &line)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Manifest::load(&self.cfg.io.manifest)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn hash_outputs(&self, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        files
            .par_iter()
            .map(|f| Ok((self.rel(f), file_fingerprint(f)?)))
            .collect()
    }

    /// First recorded output whose content no longer matches.
    fn drifted(&self, rec: &StageRecord) -> Option<(String, String, String)> {
        rec.outputs.iter().find_map(|(rel, expected)| {
            let found = file_fingerprint(&self.root.join(rel)).unwrap_or_else(|_| "missing".into());
            (found != *expected).then(|| (rel.clone(), expected.clone(), found))
        })
    }

    fn stage_config(&self, stage: Stage) -> Result<serde_json::Value> {
        let c = &self.cfg;
        let m = self.manifest()?;
        let v = match stage {
            Stage::Pool => serde_json::json!({
                "seed": c.pool_seed(),
                "size": self.pool_size(&m)?,
                "chunk": c.pool.checkpoint_every,
            }),
            Stage::Invert => {
                let images: Vec<String> = m
                    .entries
                    .par_iter()
                    .map(|e| file_fingerprint(&m.resolve(e)).unwrap_or_else(|_| "unreadable".into()))
                    .collect();
                serde_json::json!({
                    "manifest": m.fingerprint(),
                    "images": canonical_hash(&images),
                    "skip_limit": c.skip_limit,
                })
            }
            Stage::Pair => serde_json::json!({ "unique": c.pool.unique }),
            Stage::Anonymize => serde_json::json!({
                "optimizer": c.optimizer,
                "skip_limit": c.skip_limit,
                "manifest": m.fingerprint(),
            }),
            Stage::Evaluate => serde_json::json!({
                "evaluation": c.evaluation,
                "seed": c.seed,
                "manifest": m.fingerprint(),
            }),
            Stage::Ablate => serde_json::json!({
                "ablation": c.ablation,
                "optimizer": c.optimizer,
                "evaluation": c.evaluation,
                "seed": c.seed,
                "skip_limit": c.skip_limit,
                "manifest": m.fingerprint(),
            }),
        };
        Ok(v)
    }

    /// Runs one stage if its dependencies are complete and its inputs changed
    /// since the last successful run.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let mut ledger = Ledger::load(&self.root)?;
        let mut inputs = BTreeMap::new();
        for dep in stage.dependencies() {
            let rec = ledger.stages.get(dep).filter(|r| r.status == StageStatus::Complete);
            let Some(rec) = rec else {
                return Err(Error::Dependency {
                    stage: stage.name().into(),
                    reason: format!("stage `{}` has not completed", dep.name()),
                });
            };
            if let Some((rel, expected, found)) = self.drifted(rec) {
                return Err(Error::StaleArtifact {
                    path: self.root.join(rel),
                    expected,
                    found,
                });
            }
            inputs.extend(rec.outputs.clone());
        }
        let input_fingerprint = canonical_hash(&serde_json::json!({
            "stage": stage.name(),
            "backend": self.backend.fingerprint(),
            "config": self.stage_config(stage)?,
            "inputs": inputs,
        }));

        if let Some(rec) = ledger.stages.get(&stage) {
            if rec.status == StageStatus::Complete
                && rec.input_fingerprint == input_fingerprint
                && self.drifted(rec).is_none()
            {
                self.event(stage, "up_to_date", None)?;
                return Ok(StageOutcome::UpToDate);
            }
        }

        let dir = self.stage_dir(stage);
        let keep = self.resume
            && ledger
                .stages
                .get(&stage)
                .is_some_and(|r| r.input_fingerprint == input_fingerprint);
        if !keep && dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        if keep {
            remove_temporaries(&dir)?;
        }
        io_util::ensure_dir(&dir)?;
        // Downstream records are invalid once this stage reruns.
        for s in Stage::ALL {
            if s != stage && depends_on(s, stage) {
                if let Some(r) = ledger.stages.get_mut(&s) {
                    r.status = StageStatus::Pending;
                }
            }
        }
        let started_ms = now_ms();
        ledger.stages.insert(
            stage,
            StageRecord {
                status: StageStatus::Running,
                input_fingerprint: input_fingerprint.clone(),
                outputs: BTreeMap::new(),
                inputs: inputs.clone(),
                started_ms,
                finished_ms: None,
                error: None,
            },
        );
        ledger.save(&self.root)?;
        self.event(stage, "start", None)?;

        let result = self.execute(stage, &dir).and_then(|files| self.hash_outputs(&files));
        let rec = ledger.stages.get_mut(&stage).expect("inserted above");
        rec.finished_ms = Some(now_ms());
        match result {
            Ok(outputs) => {
                rec.status = StageStatus::Complete;
                rec.outputs = outputs;
                ledger.save(&self.root)?;
                self.event(stage, "complete", None)?;
                Ok(StageOutcome::Ran)
            }
            Err(e) => {
                rec.status = StageStatus::Failed;
                rec.error = Some(e.to_string());
                ledger.save(&self.root)?;
                self.event(stage, "failed", Some(e.to_string()))?;
                Err(e)
            }
        }
    }

    /// Every stage in dependency order.
    pub fn run_all(&self) -> Result<()> {
        for s in Stage::ALL {
            self.run_stage(s)?;
        }
        Ok(())
    }

    fn execute(&self, stage: Stage, dir: &Path) -> Result<Vec<PathBuf>> {
        match stage {
            Stage::Pool => self.stage_pool(dir),
            Stage::Invert => self.stage_invert(dir),
            Stage::Pair => self.stage_pair(dir),
            Stage::Anonymize => self.stage_anonymize(dir),
            Stage::Evaluate => self.stage_evaluate(dir),
            Stage::Ablate => self.stage_ablate(dir),
        }
    }

    pub fn pool_size(&self, m: &Manifest) -> Result<usize> {
        let size = self.cfg.pool.size.unwrap_or(2 * m.len());
        check_pool_size(size, m.len())?;
        Ok(size)
    }

    fn stage_pool(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let m = self.manifest()?;
        let size = self.pool_size(&m)?;
        let seed = self.cfg.pool_seed();
        let cache = pool_cache_path(&self.backend, seed, size);
        let pool = match cache.as_ref().and_then(|p| read_pool_file(p).ok()) {
            Some(p) if p.size() == size && p.seed == seed => {
                log::info!("pool loaded from cache");
                p
            }
            _ => {
                let chunk = self.cfg.pool.checkpoint_every.max(1);
                let mut entries = Vec::with_capacity(size);
                for (c, start) in (0..size).step_by(chunk).enumerate() {
                    let path = dir.join(format!("chunk-{c:05}.bin"));
                    let ids = start as u64..(start + chunk).min(size) as u64;
                    let want = ids.end - ids.start;
                    let part = match read_chunk(&path) {
                        Ok(p) if p.len() as u64 == want && p.first().map(|e| e.fake_id) == Some(ids.start) => p,
                        _ => {
                            let p = ids
                                .into_par_iter()
                                .map(|id| pool_entry(&self.backend, seed, id))
                                .collect::<Result<Vec<_>>>()?;
                            io_util::write_atomic(&path, &encode_entries(&p))?;
                            p
                        }
                    };
                    entries.extend(part);
                }
                let pool = FakePool::new(entries, seed)?;
                if let Some(p) = &cache {
                    if let Err(e) = write_pool_file(p, &pool) {
                        log::warn!("pool cache not written: {e}");
                    }
                }
                pool
            }
        };
        // The chunk files are rewritten from the final pool so outputs do not
        // depend on whether the cache was hit.
        let chunk = self.cfg.pool.checkpoint_every.max(1);
        let mut files = Vec::new();
        for (c, part) in pool.entries.chunks(chunk).enumerate() {
            let path = dir.join(format!("chunk-{c:05}.bin"));
            io_util::write_atomic(&path, &encode_entries(part))?;
            files.push(path);
        }
        let meta = dir.join("pool.json");
        io_util::write_json(
            &meta,
            &serde_json::json!({
                "size": size,
                "seed": seed,
                "chunks": files.len(),
                "fingerprint": pool.fingerprint(),
            }),
        )?;
        files.push(meta);
        Ok(files)
    }

    pub fn load_pool(&self) -> Result<FakePool> {
        let dir = self.stage_dir(Stage::Pool);
        #[derive(Deserialize)]
        struct Meta {
            seed: u64,
            chunks: usize,
            fingerprint: String,
        }
        let meta: Meta = io_util::read_json(&dir.join("pool.json"))?;
        let mut entries = Vec::new();
        for c in 0..meta.chunks {
            entries.extend(read_chunk(&dir.join(format!("chunk-{c:05}.bin")))?);
        }
        let pool = FakePool::new(entries, meta.seed)?;
        if pool.fingerprint() != meta.fingerprint {
            return Err(Error::StaleArtifact {
                path: dir.join("pool.json"),
                expected: meta.fingerprint,
                found: pool.fingerprint(),
            });
        }
        Ok(pool)
    }

    fn stage_invert(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let m = self.manifest()?;
        let out = invert_dataset(&self.backend, &m, self.cfg.skip_limit)?;
        let rows = out
            .records
            .par_iter()
            .map(|r| {
                let code_file = PathBuf::from("codes").join(format!("{}.falc", file_stem_for(&r.real_id)));
                r.code.save(&dir.join(&code_file))?;
                Ok(RealRow {
                    real_id: r.real_id.clone(),
                    // Relative to the manifest so the record is the same wherever the run starts from.
                    source: r.source.strip_prefix(&m.root).unwrap_or(&r.source).to_path_buf(),
                    code_file,
                    code_fingerprint: r.code.fingerprint(),
                    cls: r.cls.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut files: Vec<PathBuf> = rows.iter().map(|r| dir.join(&r.code_file)).collect();
        io_util::write_jsonl(&dir.join("records.jsonl"), &rows)?;
        io_util::write_jsonl(&dir.join("skipped.jsonl"), &out.skipped)?;
        files.push(dir.join("records.jsonl"));
        files.push(dir.join("skipped.jsonl"));
        Ok(files)
    }

    pub fn load_reals(&self) -> Result<Vec<RealRecord>> {
        let dir = self.stage_dir(Stage::Invert);
        let rows: Vec<RealRow> = io_util::read_jsonl(&dir.join("records.jsonl"))?;
        let root = self.manifest()?.root;
        rows.into_par_iter()
            .map(|r| {
                let path = dir.join(&r.code_file);
                let code = LatentCode::load(&path)?;
                if code.fingerprint() != r.code_fingerprint {
                    return Err(Error::StaleArtifact {
                        path,
                        expected: r.code_fingerprint,
                        found: code.fingerprint(),
                    });
                }
                Ok(RealRecord {
                    real_id: r.real_id,
                    source: root.join(&r.source),
                    code,
                    cls: r.cls,
                })
            })
            .collect()
    }

    pub fn load_skipped(&self) -> Result<Vec<SkippedItem>> {
        io_util::read_jsonl(&self.stage_dir(Stage::Invert).join("skipped.jsonl"))
    }

    fn stage_pair(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let pool = self.load_pool()?;
        let reals = self.load_reals()?;
        let mut pairs = if self.cfg.pool.unique {
            pair_unique(&reals, &pool)?
        } else {
            pair_nearest(&reals, &pool)?
        };
        pairs.meta.config_hash = self.cfg.hash();
        let path = dir.join("pairs.jsonl");
        pairs.save(&path)?;
        Ok(vec![path, dir.join("pairs.meta.json")])
    }

    pub fn load_pairs(&self) -> Result<PairManifest> {
        PairManifest::load(&self.stage_dir(Stage::Pair).join("pairs.jsonl"))
    }

    fn anonymize_into(&self, dir: &Path, hp: &crate::optimizer::HyperParams, config_hash: &str) -> Result<Vec<PathBuf>> {
        let m = self.manifest()?;
        let pool = self.load_pool()?;
        let reals = self.load_reals()?;
        let pairs = self.load_pairs()?;
        if pairs.meta.pool_fingerprint != pool.fingerprint() {
            return Err(Error::StaleArtifact {
                path: self.stage_dir(Stage::Pair).join("pairs.meta.json"),
                expected: pairs.meta.pool_fingerprint,
                found: pool.fingerprint(),
            });
        }
        let job = AnonymizeJob {
            backend: &self.backend,
            reals: &reals,
            manifest: &m,
            pairs: &pairs,
            pool: &pool,
            hp,
            split: split(),
            config_hash,
            skip_limit: self.cfg.skip_limit,
            item_limit: self.item_limit,
        };
        let out = anonymize_dataset(&job, dir)?;
        let mut files = Vec::new();
        for r in &out.records {
            files.push(dir.join(&r.code_file));
            files.push(dir.join(&r.image_file));
        }
        for f in ["manifest.jsonl", "records.jsonl", "failures.jsonl"] {
            files.push(dir.join(f));
        }
        Ok(files)
    }

    fn stage_anonymize(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.anonymize_into(dir, &self.cfg.optimizer, &self.cfg.hash())
    }

    fn evaluate_dir(&self, anon_dir: &Path) -> Result<EvalReport> {
        let real = self.manifest()?;
        let anonymized = Manifest::load(&anon_dir.join("manifest.jsonl"))?;
        let config_hash = self.cfg.hash();
        evaluate_dataset(&EvalInputs {
            backend: &self.backend,
            real: &real,
            anonymized: &anonymized,
            cfg: &self.cfg.evaluation,
            seed: self.cfg.seed,
            config_hash: &config_hash,
        })
    }

    fn stage_evaluate(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let report = self.evaluate_dir(&self.stage_dir(Stage::Anonymize))?;
        let path = dir.join("report.json");
        io_util::write_json(&path, &report)?;
        Ok(vec![path])
    }

    fn stage_ablate(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let margins = &self.cfg.ablation.margins;
        check_margins(margins)?;
        let mut rows = Vec::new();
        let mut files = Vec::new();
        let mut fingerprints = BTreeMap::new();
        for &m in margins {
            let sub = dir.join(format!("m-{m:.2}"));
            let hp = crate::optimizer::HyperParams {
                margin: m,
                ..self.cfg.optimizer.clone()
            };
            let hash = canonical_hash(&serde_json::json!({ "config": self.cfg.hash(), "margin": m }));
            files.extend(self.anonymize_into(&sub, &hp, &hash)?);
            let report = self.evaluate_dir(&sub)?;
            let path = sub.join("report.json");
            io_util::write_json(&path, &report)?;
            files.push(path);
            let records: Vec<AnonymizedRecord> = io_util::read_jsonl(&sub.join("records.jsonl"))?;
            let mean_cos = if records.is_empty() {
                f64::NAN
            } else {
                records.iter().map(|r| r.final_step.cos_sim).sum::<f64>() / records.len() as f64
            };
            fingerprints.extend(report.dataset_fingerprints.iter().map(|(k, v)| {
                let key = if k == "real" { k.clone() } else { format!("{k}@{m:.2}") };
                (key, v.clone())
            }));
            rows.push(AblationRow {
                margin: m,
                fid: report.fid,
                detection_rate: report.detection_rate,
                reid_rate: report.reid_rate,
                attribute_accuracy: report.attribute_accuracy,
                mean_final_cos_sim: mean_cos,
            });
        }
        let table = AblationTable {
            rows,
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            dataset_fingerprints: fingerprints,
        };
        table.save(dir)?;
        files.push(dir.join("ablation.json"));
        files.push(dir.join("ablation.csv"));
        Ok(files)
    }

    pub fn load_report(&self) -> Result<EvalReport> {
        io_util::read_json(&self.stage_dir(Stage::Evaluate).join("report.json"))
    }

    pub fn load_ablation(&self) -> Result<AblationTable> {
        io_util::read_json(&self.stage_dir(Stage::Ablate).join("ablation.json"))
    }
}

/// Leftovers of writes interrupted before their rename.
fn remove_temporaries(dir: &Path) -> Result<()> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            remove_temporaries(&path)?;
        } else if path.extension().is_some_and(|x| x == "tmp") {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn depends_on(s: Stage, on: Stage) -> bool {
    s.dependencies().iter().any(|&d| d == on || depends_on(d, on))
}

#[derive(Serialize, Deserialize)]
struct RealRow {
    real_id: String,
    source: PathBuf,
    code_file: PathBuf,
    code_fingerprint: String,
    cls: Vec<f64>,
}

/// `u64 fake_id`, encoded code (length-prefixed), `u32 n`, `n × f64` cls.
fn encode_entries(entries: &[PoolEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&e.fake_id.to_le_bytes());
        let code = e.code.encode();
        out.extend_from_slice(&(code.len() as u32).to_le_bytes());
        out.extend_from_slice(&code);
        out.extend_from_slice(&(e.cls.len() as u32).to_le_bytes());
        for v in &e.cls {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_entries(bytes: &[u8]) -> Result<Vec<PoolEntry>> {
    let bad = || Error::Validation("truncated pool chunk".into());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
        pos += n;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let fake_id = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let n = u32_at(take(4)?);
        let code = LatentCode::decode(take(n)?)?;
        let k = u32_at(take(4)?);
        let cls = take(8 * k)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(PoolEntry { fake_id, code, cls });
    }
    if pos != bytes.len() {
        return Err(Error::Validation("trailing bytes in pool chunk".into()));
    }
    Ok(out)
}

fn read_chunk(path: &Path) -> Result<Vec<PoolEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_entries(&bytes)
}

fn pool_cache_path(backend: &BackendBundle, seed: u64, size: usize) -> Option<PathBuf> {
    let dir = std::env::var_os("ANON_CACHE_DIR")?;
    let key = sha256_hex(format!("{}:{seed}:{size}", backend.fingerprint()).as_bytes());
    Some(PathBuf::from(dir).join(format!("pool-{}.bin", &key[..24])))
}

fn write_pool_file(path: &Path, pool: &FakePool) -> Result<()> {
    let mut bytes = pool.seed.to_le_bytes().to_vec();
    bytes.extend(encode_entries(&pool.entries));
    io_util::write_atomic(path, &bytes)
}

fn read_pool_file(path: &Path) -> Result<FakePool> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Validation("truncated pool cache".into()));
    }
    let seed = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    FakePool::new(decode_entries(&bytes[8..])?, seed)
}

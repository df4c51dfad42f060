mod common;

use std::collections::BTreeMap;

use common::{synthetic_run, tree_contents};
use latent_anon::anonymize::AnonymizedRecord;
use latent_anon::config::RunConfig;
use latent_anon::io_util;
use latent_anon::latent::LatentCode;
use latent_anon::manifest::Manifest;
use latent_anon::pipeline::{Ledger, Pipeline, Stage, StageOutcome, StageStatus};
use latent_anon::Error;

const FAST: &str = "[optimizer]\nepochs = 10\n";

fn pipeline(cfg: &RunConfig, out: &str) -> Pipeline {
    let mut cfg = cfg.clone();
    cfg.io.output = cfg.io.output.with_file_name(out);
    Pipeline::from_config(cfg).unwrap()
}

fn with_workers<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

#[test]
fn stages_refuse_to_start_before_their_inputs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic_run(d.path(), 6, FAST);
    let p = pipeline(&cfg, "out");
    assert!(matches!(p.run_stage(Stage::Pair), Err(Error::Dependency { .. })));
    p.run_stage(Stage::Pool).unwrap();
    assert!(matches!(p.run_stage(Stage::Pair), Err(Error::Dependency { .. })));
    assert!(matches!(p.run_stage(Stage::Evaluate), Err(Error::Dependency { .. })));
    p.run_stage(Stage::Invert).unwrap();
    p.run_stage(Stage::Pair).unwrap();
}

#[test]
fn end_to_end_on_fifty_images() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic_run(d.path(), 50, "");
    let p = pipeline(&cfg, "out");
    for s in [Stage::Pool, Stage::Invert, Stage::Pair, Stage::Anonymize, Stage::Evaluate] {
        assert_eq!(p.run_stage(s).unwrap(), StageOutcome::Ran);
    }
    let report = p.load_report().unwrap();
    assert_eq!(report.counts.anonymized, 50);
    assert_eq!(report.detection_rate, Some(1.0));
    assert!(report.fid.unwrap() >= 0.0);
    assert_eq!(report.reid_rate.len(), 2);
    assert!(report.attribute_accuracy.is_some());
    assert_eq!(report.config_hash, cfg.hash());

    let pool = p.load_pool().unwrap();
    assert_eq!(pool.size(), 100);
    let reals = p.load_reals().unwrap();
    p.load_pairs().unwrap().verify(&reals, &pool, 1e-9).unwrap();

    // Labels inherited verbatim; frozen rows bit-equal to the inversion.
    let src = p.manifest().unwrap();
    let anon_dir = p.stage_dir(Stage::Anonymize);
    let anon = Manifest::load(&anon_dir.join("manifest.jsonl")).unwrap();
    let records: Vec<AnonymizedRecord> = io_util::read_jsonl(&anon_dir.join("records.jsonl")).unwrap();
    for ((a, s), (rec, real)) in anon.entries.iter().zip(&src.entries).zip(records.iter().zip(&reals)) {
        assert_eq!(a.id, s.id);
        assert_eq!(a.labels, s.labels);
        assert_eq!(a.split, s.split);
        let code = LatentCode::load(&anon_dir.join(&rec.code_file)).unwrap();
        assert_eq!(code.rows(0..3), real.code.rows(0..3));
        assert_eq!(code.rows(8..18), real.code.rows(8..18));
        assert_ne!(code.rows(3..8), real.code.rows(3..8));
    }
}

#[test]
fn rerunning_a_complete_stage_is_a_no_op() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic_run(d.path(), 8, FAST);
    let p = pipeline(&cfg, "out");
    for s in [Stage::Pool, Stage::Invert, Stage::Pair, Stage::Anonymize] {
        p.run_stage(s).unwrap();
    }
    let before = Ledger::load(&p.root).unwrap();
    let files = tree_contents(&p.root);
    assert_eq!(p.run_stage(Stage::Anonymize).unwrap(), StageOutcome::UpToDate);
    assert_eq!(Ledger::load(&p.root).unwrap(), before);
    assert_eq!(tree_contents(&p.root), files);

    // A changed optimizer section reruns the stage.
    let mut cfg2 = p.cfg.clone();
    cfg2.optimizer.epochs = 3;
    let p2 = Pipeline::from_config(cfg2).unwrap();
    assert_eq!(p2.run_stage(Stage::Pair).unwrap(), StageOutcome::UpToDate);
    assert_eq!(p2.run_stage(Stage::Anonymize).unwrap(), StageOutcome::Ran);
}

#[test]
fn tampered_upstream_output_is_stale() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic_run(d.path(), 6, FAST);
    let p = pipeline(&cfg, "out");
    for s in [Stage::Pool, Stage::Invert, Stage::Pair] {
        p.run_stage(s).unwrap();
    }
    let chunk = p.stage_dir(Stage::Pool).join("chunk-00000.bin");
    let mut bytes = std::fs::read(&chunk).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&chunk, bytes).unwrap();
    assert!(matches!(p.run_stage(Stage::Anonymize), Err(Error::StaleArtifact { .. })));
    // Rebuilding the pool restores it; everything downstream reruns.
    assert_eq!(p.run_stage(Stage::Pool).unwrap(), StageOutcome::Ran);
    assert!(matches!(p.run_stage(Stage::Anonymize), Err(Error::Dependency { .. })));
    assert_eq!(p.run_stage(Stage::Pair).unwrap(), StageOutcome::Ran);
    p.run_stage(Stage::Anonymize).unwrap();
}

#[test]
fn output_is_identical_across_runs_and_worker_counts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic_run(d.path(), 20, "[optimizer]\nepochs = 10\n[evaluation.classifier]\nepochs = 50\n");
    let run = |name: &str, workers| {
        let p = pipeline(&cfg, name);
        with_workers(workers, || p.run_all().unwrap());
        tree_contents(&p.root)
    };
    let a = run("w1", 1);
    assert_eq!(a, run("w4", 4));
    assert_eq!(a, run("w1-again", 1));
}

#[test]
fn interrupted_anonymization_resumes_to_the_same_result() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic_run(d.path(), 20, FAST);
    let full = pipeline(&cfg, "full");
    for s in [Stage::Pool, Stage::Invert, Stage::Pair, Stage::Anonymize] {
        full.run_stage(s).unwrap();
    }

    let mut p = pipeline(&cfg, "cut");
    for s in [Stage::Pool, Stage::Invert, Stage::Pair] {
        p.run_stage(s).unwrap();
    }
    p.item_limit = Some(7);
    assert!(matches!(p.run_stage(Stage::Anonymize), Err(Error::Interrupted { completed: 7 })));
    assert_eq!(Ledger::load(&p.root).unwrap().status(Stage::Anonymize), StageStatus::Failed);
    let done_dir = p.stage_dir(Stage::Anonymize).join("done");
    let marker_times: BTreeMap<_, _> = std::fs::read_dir(&done_dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name(), e.metadata().unwrap().modified().unwrap())
        })
        .collect();
    assert_eq!(marker_times.len(), 7);

    p.item_limit = None;
    p.resume = true;
    assert_eq!(p.run_stage(Stage::Anonymize).unwrap(), StageOutcome::Ran);
    for (name, t) in &marker_times {
        let now = std::fs::metadata(done_dir.join(name)).unwrap().modified().unwrap();
        assert_eq!(*t, now, "{name:?} was recomputed");
    }
    assert_eq!(tree_contents(&p.root), tree_contents(&full.root));
}

#[test]
fn restart_without_resume_starts_the_stage_over() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic_run(d.path(), 6, FAST);
    let mut p = pipeline(&cfg, "out");
    for s in [Stage::Pool, Stage::Invert, Stage::Pair] {
        p.run_stage(s).unwrap();
    }
    p.item_limit = Some(2);
    assert!(p.run_stage(Stage::Anonymize).is_err());
    p.item_limit = Some(3);
    // Nothing is kept, so three fresh items fit under the limit again.
    assert!(matches!(p.run_stage(Stage::Anonymize), Err(Error::Interrupted { completed: 3 })));
}

#[test]
fn ablation_needs_two_margins_and_tabulates_each() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic_run(d.path(), 10, "[optimizer]\nepochs = 10\n[ablation]\nmargins = [0.5]\n");
    let p = pipeline(&cfg, "out");
    for s in [Stage::Pool, Stage::Invert, Stage::Pair] {
        p.run_stage(s).unwrap();
    }
    assert!(matches!(p.run_stage(Stage::Ablate), Err(Error::InsufficientMargins(1))));

    let mut cfg2 = p.cfg.clone();
    cfg2.ablation.margins = vec![0.0, 0.9];
    let p2 = Pipeline::from_config(cfg2).unwrap();
    p2.run_stage(Stage::Ablate).unwrap();
    let t = p2.load_ablation().unwrap();
    assert_eq!(t.rows.iter().map(|r| r.margin).collect::<Vec<_>>(), vec![0.0, 0.9]);
    assert!(t.rows[1].mean_final_cos_sim > t.rows[0].mean_final_cos_sim);
    let csv = std::fs::read_to_string(p2.stage_dir(Stage::Ablate).join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn pool_cache_gives_identical_pools() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic_run(d.path(), 6, FAST);
    let cache = d.path().join("cache");
    std::env::set_var("ANON_CACHE_DIR", &cache);
    let a = pipeline(&cfg, "a");
    a.run_stage(Stage::Pool).unwrap();
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);
    let b = pipeline(&cfg, "b");
    b.run_stage(Stage::Pool).unwrap();
    std::env::remove_var("ANON_CACHE_DIR");
    assert_eq!(tree_contents(&a.stage_dir(Stage::Pool)), tree_contents(&b.stage_dir(Stage::Pool)));
}

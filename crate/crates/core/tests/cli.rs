mod common;

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use common::tree_contents;

const BIN: &str = env!("CARGO_BIN_EXE_latent-anon");

fn cli(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).current_dir(dir).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn setup(dir: &Path, count: usize, extra: &str) {
    let (code, err) = cli(dir, &["synth-dataset", "--out", "data", "--count", &count.to_string(), "--seed", "3"]);
    assert_eq!(code, 0, "{err}");
    std::fs::write(
        dir.join("run.toml"),
        format!("[backend]\nkind = \"synthetic\"\n[io]\nmanifest = \"data/manifest.jsonl\"\noutput = \"out\"\n{extra}"),
    )
    .unwrap();
}

#[test]
fn exit_codes_follow_the_error_class() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), 6, "[optimizer]\nepochs = 5\n");
    let p = d.path();

    std::fs::write(p.join("bad.toml"), "[optimizer]\nmargin = 1.5\nbogus = 1\n").unwrap();
    let (code, err) = cli(p, &["pool", "--config", "bad.toml"]);
    assert_eq!(code, 2);
    assert!(err.contains("optimizer.margin") && err.contains("optimizer.bogus"), "{err}");

    let (code, _) = cli(p, &["pair", "--config", "run.toml"]);
    assert_eq!(code, 3);

    let (code, _) = cli(p, &["pool", "--config", "run.toml", "--workers", "0"]);
    assert_eq!(code, 2);

    std::fs::write(p.join("small.toml"), "[backend]\nkind = \"synthetic\"\n[io]\nmanifest = \"data/manifest.jsonl\"\n[pool]\nsize = 3\n").unwrap();
    let (code, err) = cli(p, &["pool", "--config", "small.toml"]);
    assert_eq!(code, 4, "{err}");

    let (code, err) = cli(p, &["run-all", "--config", "run.toml", "--workers", "2"]);
    assert_eq!(code, 0, "{err}");
    assert!(p.join("out/evaluate/report.json").exists());
    assert!(p.join("out/ablate/ablation.csv").exists());
    let (code, _) = cli(p, &["run-all", "--config", "run.toml", "--output", "elsewhere", "--seed", "9"]);
    assert_eq!(code, 0);
    assert!(p.join("elsewhere/ledger.json").exists());
}

/// Starts a full run, SIGKILLs it once `ready` holds, resumes, and compares
/// with an uninterrupted run.
fn kill_and_resume(ready: impl Fn(&Path) -> bool) {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    setup(p, 60, "[pool]\ncheckpoint_every = 8\n[evaluation.classifier]\nepochs = 50\n");

    let (code, err) = cli(p, &["run-all", "--config", "run.toml", "--output", "full"]);
    assert_eq!(code, 0, "{err}");

    let mut child = Command::new(BIN)
        .args(["run-all", "--config", "run.toml", "--output", "cut", "--workers", "2"])
        .current_dir(p)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    while !ready(&p.join("cut")) {
        assert!(child.try_wait().unwrap().is_none(), "run finished before the kill point");
        assert!(start.elapsed() < Duration::from_secs(120));
        std::thread::sleep(Duration::from_millis(2));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(!p.join("cut/ablate/ablation.json").exists());

    let (code, err) = cli(p, &["run-all", "--config", "run.toml", "--output", "cut", "--resume"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(tree_contents(&p.join("cut")), tree_contents(&p.join("full")));
}

fn count(dir: &Path) -> usize {
    std::fs::read_dir(dir).map(|r| r.count()).unwrap_or(0)
}

#[test]
fn kill_during_anonymization_then_resume() {
    kill_and_resume(|out| count(&out.join("anonymize/done")) >= 10);
}

#[test]
fn kill_during_pool_then_resume() {
    kill_and_resume(|out| count(&out.join("pool")) >= 3);
}

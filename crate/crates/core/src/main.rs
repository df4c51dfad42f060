use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use latent_anon::backend::synthetic::SyntheticParams;
use latent_anon::config::RunConfig;
use latent_anon::dataset::write_synthetic_dataset;
use latent_anon::pipeline::{Pipeline, Stage, StageOutcome};
use latent_anon::Error;

#[derive(Parser)]
#[command(name = "latent-anon", version, about = "Latent-space face anonymization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `io.output`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Continue a partially written stage instead of starting it over.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and encode the fake latent pool.
    Pool(RunArgs),
    /// Invert every real image.
    Invert(RunArgs),
    /// Pair each real image with its nearest fake.
    Pair(RunArgs),
    /// Optimize one anonymized code per real image.
    Anonymize(RunArgs),
    /// Compute privacy and utility metrics.
    Evaluate(RunArgs),
    /// Repeat anonymization and evaluation for each configured margin.
    Ablate(RunArgs),
    /// Every stage in order.
    RunAll(RunArgs),
    /// Write a labelled dataset rendered by the synthetic backend.
    SynthDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        /// Read synthetic backend parameters from this run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Dependency { .. } | Error::StaleArtifact { .. } => 3,
        _ => 4,
    }
}

fn run_stages(args: &RunArgs, stages: &[Stage]) -> latent_anon::Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(o) = &args.output {
        cfg.io.output = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        if w == 0 {
            return Err(Error::Config(vec!["--workers: must be at least 1".into()]));
        }
        builder = builder.num_threads(w);
    }
    let threads = builder
        .build()
        .map_err(|e| Error::Config(vec![format!("--workers: {e}")]))?;
    threads.install(|| {
        let mut p = Pipeline::from_config(cfg)?;
        p.resume = args.resume;
        for &s in stages {
            match p.run_stage(s)? {
                StageOutcome::Ran => println!("{}: done", s.name()),
                StageOutcome::UpToDate => println!("{}: up to date", s.name()),
            }
        }
        Ok(())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pool(a) => run_stages(a, &[Stage::Pool]),
        Command::Invert(a) => run_stages(a, &[Stage::Invert]),
        Command::Pair(a) => run_stages(a, &[Stage::Pair]),
        Command::Anonymize(a) => run_stages(a, &[Stage::Anonymize]),
        Command::Evaluate(a) => run_stages(a, &[Stage::Evaluate]),
        Command::Ablate(a) => run_stages(a, &[Stage::Ablate]),
        Command::RunAll(a) => run_stages(a, &Stage::ALL),
        Command::SynthDataset {
            out,
            count,
            seed,
            train_fraction,
            config,
        } => (|| {
            let params = match config {
                Some(c) => RunConfig::load(c)?.backend.synthetic,
                None => SyntheticParams::default(),
            };
            let p = write_synthetic_dataset(&params, *count, *seed, *train_fraction, out)?;
            println!("{}", p.display());
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

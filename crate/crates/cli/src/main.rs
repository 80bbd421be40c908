use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use stforge_core::gradsuite::run_grad_suite;
use stforge_core::pipeline::{
    average_stage, decode_stage, make_synthetic_corpus, run, run_single, score_stage, ExperimentConfig, RunReport,
    StageRange,
};

#[derive(Parser)]
#[command(name = "stforge", version, about = "Speech recognition, translation and speech translation recipes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a range of recipe stages
    Run {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        stop: Option<usize>,
    },
    /// Stage 0: data preparation
    Prep(ConfigArg),
    /// Stage 1: feature extraction
    Feats(ConfigArg),
    /// Stage 2: subword model and manifests
    Dump(ConfigArg),
    /// Stage 3: language model training
    TrainLm(ConfigArg),
    /// Stage 4: model training
    Train(ConfigArg),
    /// Stage 5 without scoring: average checkpoints and decode
    Decode(ConfigArg),
    /// Stage 5 scoring of existing hypotheses
    Score(ConfigArg),
    /// Stage 6: cascade evaluation
    Cascade(ConfigArg),
    /// Write the synthetic corpus as a raw data directory
    MakeCorpus {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every autodiff op and a full model
    GradCheck,
}

fn load(arg: &ConfigArg) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(&arg.config).with_context(|| format!("loading {}", arg.config.display()))
}

fn report(r: &RunReport) {
    for s in &r.skipped {
        println!("stage {s}: up to date");
    }
    for s in &r.ran {
        println!("stage {s}: done");
    }
}

fn single(arg: &ConfigArg, stage: usize) -> anyhow::Result<()> {
    report(&run_single(&load(arg)?, stage)?);
    Ok(())
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("STFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("STFORGE_THREADS={v:?} is not a thread count"))?;
    if n == 0 {
        bail!("STFORGE_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Run { cfg, start, stop } => {
            let mut c = load(&cfg)?;
            c.stages = StageRange {
                start: start.unwrap_or(c.stages.start),
                stop: stop.unwrap_or(c.stages.stop),
            };
            let r = run(&c)?;
            report(&r);
        }
        Command::Prep(c) => single(&c, 0)?,
        Command::Feats(c) => single(&c, 1)?,
        Command::Dump(c) => single(&c, 2)?,
        Command::TrainLm(c) => single(&c, 3)?,
        Command::Train(c) => single(&c, 4)?,
        Command::Decode(c) => {
            let cfg = load(&c)?;
            average_stage(&cfg)?;
            decode_stage(&cfg)?;
        }
        Command::Score(c) => score_stage(&load(&c)?)?,
        Command::Cascade(c) => single(&c, 6)?,
        Command::MakeCorpus { seed, n, out } => {
            let utts = make_synthetic_corpus(seed, n, &out)?;
            println!("wrote {} utterances to {}", utts.len(), out.display());
        }
        Command::GradCheck => {
            let checks = run_grad_suite()?;
            let mut failed = 0;
            for c in &checks {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!("{verdict:4} {:<40} rel_err {:.3e} (tol {:.0e})", c.name, c.rel_err, c.tolerance);
                failed += usize::from(!c.passed());
            }
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                bail!("{failed} gradient checks exceeded tolerance");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

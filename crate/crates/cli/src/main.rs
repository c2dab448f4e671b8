use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybridroi::data::{Difficulty, Partition};
use hybridroi::experiment::{run_ablate, run_bench_scan, run_eval, run_split, run_synth, run_train};
use hybridroi::ssm::ProbeConfig;
use hybridroi::{config::ExperimentConfig, Error, Result};

#[derive(Parser)]
#[command(name = "hybridroi", version, about = "CNN + bidirectional selective-scan ROI classifier")]
struct Cli {
    /// Seed for every random choice; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ROI dataset with a manifest.
    Synth(SynthArgs),
    /// Compute a patient-level stratified split of a manifest.
    Split(SplitArgs),
    /// Train one configuration (both phases) and test the best checkpoint.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on one partition of its split.
    Eval(EvalArgs),
    /// Train and test the backbone-only, ViM-only and hybrid variants.
    Ablate(ConfigArgs),
    /// Time the selective scan against naive attention.
    BenchScan(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "easy")]
    difficulty: Difficulty,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory (`best/` or `last/` of a training run).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value = "test")]
    partition: Partition,
    /// Decision threshold; defaults to the trained config's.
    #[arg(long)]
    threshold: Option<f64>,
    /// Report directory; defaults to the checkpoint's parent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => {
            let manifest = run_synth(a.n, a.size, seed.unwrap_or(0), a.difficulty, &a.out)?;
            println!("wrote {} images and {}", a.n, manifest.display());
        }
        Command::Split(a) => {
            let split = run_split(&a.manifest, seed.unwrap_or(0), &a.out)?;
            for p in Partition::ALL {
                println!("{p}: {} patients", split.patients(p).count());
            }
        }
        Command::Train(a) => {
            let cfg = ExperimentConfig::load_seeded(&a.config, seed)?;
            let summary = run_train(&cfg, &a.out)?;
            match (summary.best_epoch, summary.best_val_auc) {
                (Some(e), Some(auc)) => println!("best epoch {e} val_auc={auc:.4}"),
                _ => println!("validation AUC was never defined; kept the final state"),
            }
            print!("{}", summary.test.to_text());
        }
        Command::Eval(a) => {
            let report = run_eval(&a.checkpoint, &a.split, a.partition, a.threshold, a.out.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::Ablate(a) => {
            let cfg = ExperimentConfig::load_seeded(&a.config, seed)?;
            for row in run_ablate(&cfg, &a.out)? {
                let auc = row.test.auc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
                println!("{} test_auc={auc}", row.variant);
            }
        }
        Command::BenchScan(a) => {
            let probe = ProbeConfig { repeats: a.repeats, seed: seed.unwrap_or(0), ..ProbeConfig::default() };
            let report = run_bench_scan(&probe, &a.lengths, &a.out)?;
            println!("scan_slope={:.3}", report.scan_slope);
            println!("attention_slope={:.3}", report.attention_slope);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Exit code 2 is reserved for I/O failures; bad usage is a config error.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}

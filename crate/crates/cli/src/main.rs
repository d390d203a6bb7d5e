use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use visa_core::config::PipelineConfig;
use visa_core::model::checkpoint::load_checkpoint;
use visa_core::model::vocab::Vocabulary;
use visa_core::pipeline::{
    ablation_tsv, run_ablation, run_eval, run_infer, run_train, write_report, CHECKPOINT_FILE,
};
use visa_core::synth::{build_dataset, Dataset, Split};
use visa_core::formats::write_atomic;
use visa_core::Error;

/// Reasoning video object segmentation on synthetic moving shapes.
#[derive(Parser)]
#[command(name = "visa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
    },
    /// Write predicted mask sequences for a split.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory of `<record>.vrle` predictions.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Frame-sampling ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn print_report(report: &visa_core::metrics::EvalReport) {
    for line in report.to_tsv().lines() {
        match line.strip_prefix("R\t") {
            Some(v) => println!("R(surrogate)\t{v}"),
            None => println!("{line}"),
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let manifest = build_dataset(&cfg.dataset(), &common.out, &Vocabulary::default())?;
            println!("wrote {} records to {}", manifest.records.len(), common.out.display());
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let data = Dataset::open(&data)?;
            create_dir(&common.out)?;
            write_atomic(&common.out.join("config.txt"), cfg.to_text().as_bytes())?;
            let (_, curve) = run_train(&data, &cfg, &common.out, |p| {
                if p.step % 50 == 0 {
                    eprintln!("step {:>5}  lr {:.2e}  total {:.4}", p.step, p.lr, p.total);
                }
            })?;
            let last = curve.last().map_or(f64::NAN, |p| p.total);
            println!("trained {} steps, final loss {last:.4}, checkpoint {}", curve.len(), common.out.join(CHECKPOINT_FILE).display());
        }
        Command::Infer { common, data, checkpoint, split } => {
            let cfg = load_config(&common)?;
            let data = Dataset::open(&data)?;
            let model = load_checkpoint(&checkpoint)?;
            create_dir(&common.out)?;
            let n = run_infer(&model, &data, split, &cfg, &common.out)?;
            println!("wrote {n} predictions to {}", common.out.display());
        }
        Command::Eval { data, pred, out, split } => {
            let data = Dataset::open(&data)?;
            let report = run_eval(&data, split, &pred)?;
            create_dir(&out)?;
            write_report(&report, &out)?;
            print_report(&report);
        }
        Command::Ablate { common, data, checkpoint, split } => {
            let cfg = load_config(&common)?;
            let data = Dataset::open(&data)?;
            let model = load_checkpoint(&checkpoint)?;
            let cells = run_ablation(&model, &data, split, &cfg)?;
            create_dir(&common.out)?;
            let table = ablation_tsv(&cells);
            write_atomic(&common.out.join("ablation.tsv"), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

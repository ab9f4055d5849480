//! Command-line driver: train adapters, evaluate checkpoints, compare
//! optimizers, sweep the penalty strength, dump adapter spectra, and export
//! the synthetic corpus.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use freqlora::experiments::{compare_optimizers, spectrum_report, sweep_lambda};
use freqlora::lora::load_checkpoint;
use freqlora::tasks::{build_dataset, export_split, LanguageId};
use freqlora::train::{base_model_for, evaluate, train_to_dir, TrainConfig};

#[derive(Parser)]
#[command(name = "freqlora", version, about = "Spectral low-rank adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to a TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> freqlora::Result<TrainConfig> {
        match &self.config {
            Some(path) => TrainConfig::load(path),
            None => {
                let mut cfg = TrainConfig::default();
                cfg.apply_seed_override()?;
                Ok(cfg)
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters and write metrics, checkpoint and report to a directory.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory for metrics.csv, adapters.ckpt, config.toml,
        /// report.txt.
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Adapter checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fold the adapters into the base weights before decoding.
        #[arg(long)]
        merged: bool,
        /// Which split to score: train or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train with AdamW and with the second-order rule on identical batches
    /// and print both trajectories.
    CompareOpt {
        #[command(flatten)]
        config: ConfigArg,
        /// Optional file to write the comparison report to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one arm per penalty strength and report transfer quality.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated lambda values, e.g. 0.0,0.02,0.1.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        /// Optional file to write the sweep report to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-target spectrum CSVs for a checkpoint.
    Spectrum {
        #[command(flatten)]
        config: ConfigArg,
        /// Adapter checkpoint to analyze.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory receiving spectrum_<target>.csv files.
        #[arg(long, default_value = "spectra")]
        out_dir: PathBuf,
    },
    /// Export the synthetic corpus as train.tsv / test.tsv.
    GenData {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_programs: usize,
        #[arg(long, default_value_t = 8)]
        max_ops: usize,
        /// Surface language: lang_a or lang_b.
        #[arg(long, default_value = "lang_a")]
        language: String,
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
    },
}

fn run(command: Command) -> freqlora::Result<()> {
    match command {
        Command::Train { config, out_dir } => {
            let cfg = config.load()?;
            let outcome = train_to_dir(&cfg, &out_dir)?;
            println!(
                "trained {} steps; task loss {:.4} -> {:.4}; artifacts in {}",
                outcome.metrics.len(),
                outcome.initial_task_loss,
                outcome.final_task_loss(),
                out_dir.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            merged,
            split,
        } => {
            let cfg = config.load()?;
            let model = base_model_for(&cfg)?;
            let adapters = load_checkpoint(&checkpoint)?;
            let dataset = build_dataset(
                cfg.seed,
                cfg.n_programs,
                cfg.max_ops,
                cfg.language_id()?,
            )?;
            let examples = match split.as_str() {
                "train" => &dataset.train,
                "test" => &dataset.test,
                other => {
                    return Err(freqlora::Error::InvalidArgument(format!(
                        "unknown split {other:?}; expected train or test"
                    )))
                }
            };
            let report = evaluate(&model, &adapters, examples, merged, cfg.eval_max_new)?;
            println!("split = \"{split}\"");
            println!("n_examples = {}", report.n_examples);
            println!("pass_at_1 = {}", report.pass_at_1);
            println!("avg_task_loss = {}", report.avg_task_loss);
            println!("merged = {}", report.merged);
        }
        Command::CompareOpt { config, out } => {
            let cfg = config.load()?;
            let report = compare_optimizers(&cfg)?;
            let text = report.render();
            if let Some(path) = out {
                std::fs::write(&path, &text)?;
            }
            print!("{text}");
        }
        Command::Sweep {
            config,
            lambdas,
            out,
        } => {
            let cfg = config.load()?;
            let report = sweep_lambda(&cfg, &lambdas)?;
            let text = report.render();
            if let Some(path) = out {
                std::fs::write(&path, &text)?;
            }
            print!("{text}");
        }
        Command::Spectrum {
            config,
            checkpoint,
            out_dir,
        } => {
            let cfg = config.load()?;
            let adapters = load_checkpoint(&checkpoint)?;
            let report = spectrum_report(&adapters, &cfg.fourier, &out_dir)?;
            print!("{}", report.render());
        }
        Command::GenData {
            seed,
            n_programs,
            max_ops,
            language,
            out_dir,
        } => {
            let lang = LanguageId::parse_name(&language)?;
            let dataset = build_dataset(seed, n_programs, max_ops, lang)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("train.tsv"), export_split(&dataset, "train")?)?;
            std::fs::write(out_dir.join("test.tsv"), export_split(&dataset, "test")?)?;
            println!(
                "wrote {} train / {} test examples to {}",
                dataset.train.len(),
                dataset.test.len(),
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits; bad usage is 1.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aem_core::data::{export_dataset, SplitName};
use aem_harness::checkpoint::Checkpoint;
use aem_harness::config::{DataSource, TrainConfig, PRESETS};
use aem_harness::experiments::{correlate, parse_grid, summarize, sweep, write_sweep};
use aem_harness::train::{evaluate, train_to_dir, Dataset};
use aem_harness::{HarnessError, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aem", version, about = "Attention-based MIL training with entropy regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs and write a checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Directory for the report and attention dump (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every λ in a grid over several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `binary`, `multiclass` or a comma-separated list.
        #[arg(long, default_value = "binary")]
        grid: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Anneal λ with a cosine schedule.
        #[arg(long)]
        cwa: bool,
        /// Length of the cumulative top-k attention curve.
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relate attention entropy to AUC across unregularized runs.
    Correlate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 30)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as bag files plus a manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset as a config file.
    Preset {
        #[arg(value_parser = PRESETS)]
        name: String,
    },
}

fn out_dir(flag: Option<PathBuf>, cfg: &TrainConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn cmd_eval(ckpt_path: &Path, manifest: &Path, split: SplitName, out: Option<PathBuf>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg = ckpt.config()?;
    let data = Dataset::from_manifest(manifest)?;
    let bags = data.bags(split);
    if let Some(b) = bags.iter().find(|b| b.dim() != cfg.input_dim || b.label >= cfg.n_classes) {
        return Err(HarnessError::Config(format!(
            "bag `{}` (dim {}, label {}) does not fit the checkpoint's model",
            b.id,
            b.dim(),
            b.label
        )));
    }
    let eval = evaluate(&ckpt.params, &bags)?;
    let dir = out.unwrap_or_else(|| {
        ckpt_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(format!("eval_{split}.txt")), eval.summary_text())?;
    fs::write(dir.join(format!("attention_{split}.txt")), eval.attention_dump())?;
    print!("{}", eval.summary_text());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out, resume, stop_after } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out_dir(out, &cfg, "runs/train");
            let files = train_to_dir(&cfg, &dir, resume.as_deref(), stop_after)?;
            println!("{}", files.dir.display());
        }
        Command::Eval { ckpt, manifest, split, out } => cmd_eval(&ckpt, &manifest, split, out)?,
        Command::Sweep { config, grid, seeds, cwa, topk, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let grid = parse_grid(&grid)?;
            let data = Dataset::from_config(&cfg)?;
            let rows = sweep(&cfg, &data, &grid, seeds, cwa, topk)?;
            let dir = out_dir(out, &cfg, "runs/sweep");
            write_sweep(&dir, &rows)?;
            println!("lambda,auc_mean,auc_std,entropy_mean");
            for g in summarize(&rows) {
                println!("{},{:.4},{:.4},{:.4}", g.lambda, g.auc_mean, g.auc_std, g.entropy_mean);
            }
        }
        Command::Correlate { config, seeds, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let data = Dataset::from_config(&cfg)?;
            let result = correlate(&cfg, &data, seeds)?;
            let dir = out_dir(out, &cfg, "runs/correlate");
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("pairs.csv"), result.csv())?;
            fs::write(dir.join("correlation.txt"), result.summary_text())?;
            print!("{}", result.summary_text());
        }
        Command::Generate { config, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            if !matches!(cfg.data, DataSource::Synthetic(_)) {
                return Err(HarnessError::Config("generate needs data = synthetic".into()));
            }
            let data = Dataset::from_config(&cfg)?;
            let manifest = export_dataset(&out, &data.bags, &data.split)?;
            println!("{}", manifest.display());
        }
        Command::Preset { name } => print!("{}", TrainConfig::preset(&name)?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! Multi-run experiments: λ sweeps over seeds and the entropy/AUC
//! correlation study.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use aem_core::metrics::{cumulative_topk_mass, pearson, spearman};
use aem_core::objectives::RegKind;
use log::{info, warn};
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::seeds::derive_seed;
use crate::train::{run, Dataset, EpochReport};

/// λ grid commonly used for the binary presets.
pub const GRID_BINARY: [f64; 7] = [0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05];
/// λ grid used for the four-class preset.
pub const GRID_MULTICLASS: [f64; 7] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5];

/// Parses `binary`, `multiclass` or a comma-separated list of λ values.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = match text.trim() {
        "binary" => GRID_BINARY.to_vec(),
        "multiclass" => GRID_MULTICLASS.to_vec(),
        list => list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| HarnessError::Config(format!("bad grid value `{v}`")))
            })
            .collect::<Result<_>>()?,
    };
    if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(HarnessError::Config(format!("grid values must be finite and >= 0: {text}")));
    }
    Ok(grid)
}

/// Config for one run: λ = 0 trains the unregularized baseline, any other
/// value uses the base regularizer (AEM when the base has none).
pub fn run_config(base: &TrainConfig, lambda: f64, cwa: bool, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    let kind = match (lambda, base.reg) {
        (l, _) if l == 0.0 => RegKind::None,
        (_, RegKind::None) => RegKind::Aem,
        (_, k) => k,
    };
    cfg.set_regularizer(kind, lambda);
    cfg.cwa = cwa;
    cfg.lambda_min = cfg.lambda_min.min(cfg.lambda);
    cfg.seed = seed;
    cfg
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub lambda: f64,
    pub cwa: bool,
    pub seed_index: u64,
    pub seed: u64,
    pub test_auc: f64,
    pub test_f1: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    pub mean_entropy: f64,
    pub mean_norm_entropy: f64,
    /// Test-split mean cumulative attention mass of the top `k` instances.
    pub topk_mass: Vec<f64>,
    pub history: Vec<EpochReport>,
}

fn summarize_run(cfg: &TrainConfig, data: &Dataset, seed_index: u64, topk: usize) -> Result<RunSummary> {
    let out = run(cfg, data)?;
    let r = &out.test.report;
    Ok(RunSummary {
        lambda: cfg.lambda,
        cwa: cfg.cwa,
        seed_index,
        seed: cfg.seed,
        test_auc: r.macro_auc,
        test_f1: r.macro_f1,
        test_acc: out.test.accuracy,
        test_loss: out.test.loss,
        mean_entropy: r.mean_attention_entropy,
        mean_norm_entropy: r.mean_normalized_entropy,
        topk_mass: cumulative_topk_mass(&out.test.maps(), topk)?,
        history: out.history,
    })
}

/// Trains every (λ, seed) pair in parallel on one shared dataset. Run `i`
/// uses `derive_seed(base.seed, i)`, so runs with the same seed index share
/// their initialization across λ. Rows come back sorted by (λ, seed index).
pub fn sweep(
    base: &TrainConfig,
    data: &Dataset,
    grid: &[f64],
    n_seeds: u64,
    cwa: bool,
    topk: usize,
) -> Result<Vec<RunSummary>> {
    if n_seeds == 0 {
        return Err(HarnessError::Config("need at least one seed".into()));
    }
    let jobs: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&l| (0..n_seeds).map(move |i| (l, i)))
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|&(lambda, i)| {
            let cfg = run_config(base, lambda, cwa, derive_seed(base.seed, i));
            let row = summarize_run(&cfg, data, i, topk)?;
            info!("lambda {lambda} seed#{i}: auc {:.4} entropy {:.4}", row.test_auc, row.mean_entropy);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.seed_index.cmp(&b.seed_index)));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub runs: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub entropy_mean: f64,
    pub entropy_std: f64,
    pub topk_mean: Vec<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(rows: &[RunSummary]) -> Vec<LambdaSummary> {
    let mut out: Vec<LambdaSummary> = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let lambda = rows[start].lambda;
        let end = start + rows[start..].iter().take_while(|r| r.lambda == lambda).count();
        let group = &rows[start..end];
        let col = |f: fn(&RunSummary) -> f64| group.iter().map(f).collect::<Vec<_>>();
        let (auc_mean, auc_std) = mean_std(&col(|r| r.test_auc));
        let (f1_mean, f1_std) = mean_std(&col(|r| r.test_f1));
        let (entropy_mean, entropy_std) = mean_std(&col(|r| r.mean_entropy));
        let k = group[0].topk_mass.len();
        let topk_mean = (0..k)
            .map(|j| group.iter().map(|r| r.topk_mass[j]).sum::<f64>() / group.len() as f64)
            .collect();
        out.push(LambdaSummary {
            lambda,
            runs: group.len(),
            auc_mean,
            auc_std,
            f1_mean,
            f1_std,
            entropy_mean,
            entropy_std,
            topk_mean,
        });
        start = end;
    }
    out
}

pub fn sweep_csv(rows: &[RunSummary]) -> String {
    let mut s = String::from("lambda,cwa,seed_index,seed,test_auc,test_f1,test_acc,test_loss,mean_entropy,mean_norm_entropy,topk_mass\n");
    for r in rows {
        let topk: Vec<String> = r.topk_mass.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.lambda,
            r.cwa,
            r.seed_index,
            r.seed,
            r.test_auc,
            r.test_f1,
            r.test_acc,
            r.test_loss,
            r.mean_entropy,
            r.mean_norm_entropy,
            topk.join(";")
        );
    }
    s
}

pub fn summary_csv(summary: &[LambdaSummary]) -> String {
    let mut s = String::from("lambda,runs,auc_mean,auc_std,f1_mean,f1_std,entropy_mean,entropy_std,topk_mean\n");
    for g in summary {
        let topk: Vec<String> = g.topk_mean.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            g.lambda, g.runs, g.auc_mean, g.auc_std, g.f1_mean, g.f1_std, g.entropy_mean, g.entropy_std,
            topk.join(";")
        );
    }
    s
}

pub fn write_sweep(dir: &Path, rows: &[RunSummary]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("sweep_runs.csv"), sweep_csv(rows))?;
    fs::write(dir.join("sweep_summary.csv"), summary_csv(&summarize(rows)))?;
    Ok(())
}

/// Fewest seeds for which a rank correlation is reported.
pub const MIN_CORRELATION_SEEDS: usize = 10;

#[derive(Debug, Clone)]
pub struct Correlation {
    /// `(seed index, seed, mean normalized test entropy, test macro AUC)`.
    pub pairs: Vec<(u64, u64, f64, f64)>,
    /// `None` below [`MIN_CORRELATION_SEEDS`] pairs.
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
}

impl Correlation {
    pub fn csv(&self) -> String {
        let mut s = String::from("seed_index,seed,mean_norm_entropy,test_auc\n");
        for (i, seed, h, auc) in &self.pairs {
            let _ = writeln!(s, "{i},{seed},{h},{auc}");
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
        format!(
            "runs = {}\nspearman = {}\npearson = {}\n",
            self.pairs.len(),
            show(self.spearman),
            show(self.pearson)
        )
    }
}

impl Correlation {
    /// Builds the study from per-run pairs, refusing degenerate input where
    /// every run produced the same result.
    pub fn from_pairs(pairs: Vec<(u64, u64, f64, f64)>) -> Result<Self> {
        let Some(first) = pairs.first().map(|p| (p.2, p.3)) else {
            return Err(HarnessError::Config("no runs to correlate".into()));
        };
        if pairs.len() > 1 && pairs.iter().all(|p| (p.2, p.3) == first) {
            return Err(HarnessError::Config(
                "every seed produced the same result; the seeds do not vary the runs".into(),
            ));
        }
        let (spearman_rho, pearson_r) = if pairs.len() < MIN_CORRELATION_SEEDS {
            warn!(
                "{} runs is below the {} needed for a correlation; reporting pairs only",
                pairs.len(),
                MIN_CORRELATION_SEEDS
            );
            (None, None)
        } else {
            let h: Vec<f64> = pairs.iter().map(|p| p.2).collect();
            let auc: Vec<f64> = pairs.iter().map(|p| p.3).collect();
            (spearman(&h, &auc).ok(), pearson(&h, &auc).ok())
        };
        Ok(Self {
            pairs,
            spearman: spearman_rho,
            pearson: pearson_r,
        })
    }
}

/// Trains `n_seeds` unregularized models on one fixed split and relates each
/// run's mean normalized test attention entropy to its test AUC.
pub fn correlate(base: &TrainConfig, data: &Dataset, n_seeds: u64) -> Result<Correlation> {
    let rows = sweep(base, data, &[0.0], n_seeds, false, 1)?;
    Correlation::from_pairs(
        rows.iter()
            .map(|r| (r.seed_index, r.seed, r.mean_norm_entropy, r.test_auc))
            .collect(),
    )
}

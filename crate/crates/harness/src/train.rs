//! Per-bag training loop with Adam, a cosine learning-rate schedule and an
//! optionally annealed regularizer weight.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use aem_core::data::{generate_synthetic, load_manifest, make_splits, subsample_bag, Bag, DatasetSplit, SplitName};
use aem_core::metrics::{argmax, EvalReport};
use aem_core::model::{model_forward, ModelParams};
use aem_core::objectives::cross_entropy;
use aem_core::optim::{cosine_value, AdamConfig, AdamState};
use aem_core::step::accumulate_bag_gradients;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, Selection, TrainConfig};
use crate::error::{HarnessError, Result};
use crate::seeds::derive_seed;

pub const CSV_HEADER: &str = "epoch,lambda,lr,train_ce,train_reg,train_total,test_loss,test_acc,test_f1,test_auc,test_mean_entropy,test_mean_norm_entropy";

/// Bags plus their train/val/test assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let data = match &cfg.data {
            DataSource::Synthetic(s) => {
                let bags = generate_synthetic(s)?;
                let split = make_splits(&bags, cfg.split_ratios, cfg.split_seed)?;
                Self { bags, split }
            }
            DataSource::Manifest(path) => Self::from_manifest(path)?,
        };
        data.check(cfg)?;
        Ok(data)
    }

    /// Loads bags with the split assignment recorded in the manifest.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let mut split = DatasetSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            ratios: [0.0; 3],
        };
        let mut bags = Vec::new();
        for (bag, s) in load_manifest(path)? {
            match s {
                SplitName::Train => split.train.push(bag.id.clone()),
                SplitName::Val => split.val.push(bag.id.clone()),
                SplitName::Test => split.test.push(bag.id.clone()),
            }
            bags.push(bag);
        }
        let n = bags.len().max(1) as f64;
        split.ratios = [
            split.train.len() as f64 / n,
            split.val.len() as f64 / n,
            split.test.len() as f64 / n,
        ];
        Ok(Self { bags, split })
    }

    fn check(&self, cfg: &TrainConfig) -> Result<()> {
        for bag in &self.bags {
            if bag.dim() != cfg.input_dim {
                return Err(HarnessError::Config(format!(
                    "bag `{}` has dimension {}, config says input_dim = {}",
                    bag.id,
                    bag.dim(),
                    cfg.input_dim
                )));
            }
            if bag.label >= cfg.n_classes {
                return Err(HarnessError::Config(format!(
                    "bag `{}` has label {}, config says classes = {}",
                    bag.id, bag.label, cfg.n_classes
                )));
            }
        }
        if self.split.train.is_empty() {
            return Err(HarnessError::Config("training split is empty".into()));
        }
        if self.split.test.is_empty() {
            return Err(HarnessError::Config("test split is empty".into()));
        }
        if cfg.select == Selection::ValBest && self.split.val.is_empty() {
            return Err(HarnessError::Config("select = val_best needs a validation split".into()));
        }
        Ok(())
    }

    pub fn bags(&self, split: SplitName) -> Vec<&Bag> {
        self.split.select(&self.bags, split)
    }
}

/// Predictions and attention for one set of bags.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Mean cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    pub probabilities: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// `(bag id, attention weights)` in evaluation order.
    pub attention: Vec<(String, Vec<f64>)>,
}

impl Evaluation {
    pub fn maps(&self) -> Vec<Vec<f64>> {
        self.attention.iter().map(|(_, a)| a.clone()).collect()
    }

    /// One line per bag: `<bag_id>,<N>,<a_1>,...,<a_N>` with nine
    /// significant digits.
    pub fn attention_dump(&self) -> String {
        let mut s = String::new();
        for (id, a) in &self.attention {
            s.push_str(id);
            s.push(',');
            s.push_str(&a.len().to_string());
            for w in a {
                s.push_str(&format!(",{w:.8e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let r = &self.report;
        let mut s = format!(
            "bags = {}\nloss = {}\naccuracy = {}\nmacro_f1 = {}\nmacro_auc = {}\n",
            self.labels.len(),
            self.loss,
            self.accuracy,
            r.macro_f1,
            r.macro_auc
        );
        for (c, auc) in r.per_class_auc.iter().enumerate() {
            s.push_str(&format!("auc_class_{c} = {auc}\n"));
        }
        s.push_str(&format!(
            "mean_attention_entropy = {}\nmean_normalized_entropy = {}\n",
            r.mean_attention_entropy, r.mean_normalized_entropy
        ));
        s
    }
}

pub fn evaluate(params: &ModelParams, bags: &[&Bag]) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(HarnessError::Config("cannot evaluate an empty split".into()));
    }
    let mut probabilities = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    let mut attention = Vec::with_capacity(bags.len());
    let mut loss = 0.0;
    let mut correct = 0usize;
    for bag in bags {
        let out = model_forward(&bag.features, params)?;
        let (ce, _) = cross_entropy(&out.logits, bag.label)?;
        loss += ce;
        let p = out.probabilities();
        if argmax(&p) == bag.label {
            correct += 1;
        }
        probabilities.push(p);
        labels.push(bag.label);
        attention.push((bag.id.clone(), out.weights));
    }
    let maps: Vec<Vec<f64>> = attention.iter().map(|(_, a)| a.clone()).collect();
    let report = EvalReport::compute(&probabilities, &labels, &maps)?;
    let n = bags.len() as f64;
    Ok(Evaluation {
        report,
        loss: loss / n,
        accuracy: correct as f64 / n,
        probabilities,
        labels,
        attention,
    })
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// Completed epochs, starting at 1.
    pub epoch: u64,
    pub lambda: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub train_ce: f64,
    pub train_reg: f64,
    pub train_total: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub test_f1: f64,
    pub test_auc: f64,
    pub test_mean_entropy: f64,
    pub test_mean_norm_entropy: f64,
}

impl EpochReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lambda,
            self.lr,
            self.train_ce,
            self.train_reg,
            self.train_total,
            self.test_loss,
            self.test_acc,
            self.test_f1,
            self.test_auc,
            self.test_mean_entropy,
            self.test_mean_norm_entropy
        )
    }
}

/// Best validation score seen so far with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: u64,
    pub val_auc: f64,
    pub params: ModelParams,
}

/// Training state. Everything needed to continue a run lives here and is
/// written to checkpoints.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    pub params: ModelParams,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    epoch: u64,
    best: Option<BestSnapshot>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        data.check(cfg)?;
        let params = ModelParams::init(&cfg.architecture(), derive_seed(cfg.seed, 0))?;
        let adam = AdamState::new(&params, AdamConfig::default());
        Ok(Self {
            cfg: cfg.clone(),
            data,
            params,
            adam,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1)),
            epoch: 0,
            best: None,
        })
    }

    pub fn from_checkpoint(cfg: &TrainConfig, data: &'a Dataset, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.hash() {
            return Err(HarnessError::Config(
                "checkpoint was written by a different configuration".into(),
            ));
        }
        data.check(cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            data,
            params: ckpt.params,
            adam: ckpt.adam,
            rng: ckpt.rng,
            epoch: ckpt.epoch,
            best: ckpt.best,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.cfg.hash(),
            epoch: self.epoch,
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            best: self.best.clone(),
            config_text: self.cfg.to_text(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epochs_done(&self) -> u64 {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Trains one epoch. Returns a report when the epoch is an evaluation
    /// epoch (every `eval_every` epochs and the last one).
    pub fn train_epoch(&mut self) -> Result<Option<EpochReport>> {
        let cfg = &self.cfg;
        let train = self.data.bags(SplitName::Train);
        let lambda = cfg.lambda_at_epoch(self.epoch);
        let total_steps = cfg.epochs * train.len() as u64;
        let first_lr = cosine_value(cfg.lr, cfg.lr_min, self.adam.t, total_steps);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut ce, mut reg, mut total) = (0.0, 0.0, 0.0);
        for &i in &order {
            let bag = train[i];
            let sub;
            let features = match cfg.subsample {
                Some(rho) if rho < 1.0 => {
                    sub = subsample_bag(bag, rho, &mut self.rng);
                    &sub.features
                }
                _ => &bag.features,
            };
            let lr = cosine_value(cfg.lr, cfg.lr_min, self.adam.t, total_steps);
            let (losses, _) =
                accumulate_bag_gradients(features, bag.label, &mut self.params, cfg.reg, lambda)?;
            if !losses.total.is_finite() {
                return Err(HarnessError::Diverged(format!(
                    "non-finite loss at epoch {} on bag `{}`",
                    self.epoch + 1,
                    bag.id
                )));
            }
            self.adam.step(&mut self.params, lr)?;
            ce += losses.ce;
            reg += losses.reg;
            total += losses.total;
        }
        self.epoch += 1;
        let n = train.len() as f64;
        debug!("epoch {} train_ce {:.6} lambda {}", self.epoch, ce / n, lambda);
        if self.epoch % cfg.eval_every != 0 && self.epoch != cfg.epochs {
            return Ok(None);
        }
        if cfg.select == Selection::ValBest {
            let val = evaluate(&self.params, &self.data.bags(SplitName::Val))?;
            let auc = val.report.macro_auc;
            if self.best.as_ref().is_none_or(|b| auc > b.val_auc) {
                self.best = Some(BestSnapshot {
                    epoch: self.epoch,
                    val_auc: auc,
                    params: self.params.clone(),
                });
            }
        }
        let test = evaluate(&self.params, &self.data.bags(SplitName::Test))?;
        Ok(Some(EpochReport {
            epoch: self.epoch,
            lambda,
            lr: first_lr,
            train_ce: ce / n,
            train_reg: reg / n,
            train_total: total / n,
            test_loss: test.loss,
            test_acc: test.accuracy,
            test_f1: test.report.macro_f1,
            test_auc: test.report.macro_auc,
            test_mean_entropy: test.report.mean_attention_entropy,
            test_mean_norm_entropy: test.report.mean_normalized_entropy,
        }))
    }

    /// Parameters chosen by the selection rule.
    pub fn selected(&self) -> (u64, &ModelParams) {
        match (&self.cfg.select, &self.best) {
            (Selection::ValBest, Some(b)) => (b.epoch, &b.params),
            _ => (self.epoch, &self.params),
        }
    }
}

/// Result of a complete in-memory run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: Vec<EpochReport>,
    pub selected_epoch: u64,
    pub params: ModelParams,
    /// Test-split evaluation of the selected parameters.
    pub test: Evaluation,
}

pub fn run(cfg: &TrainConfig, data: &Dataset) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(cfg, data)?;
    let mut history = Vec::new();
    while !trainer.finished() {
        if let Some(r) = trainer.train_epoch()? {
            history.push(r);
        }
    }
    let (selected_epoch, params) = trainer.selected();
    let test = evaluate(params, &data.bags(SplitName::Test))?;
    Ok(RunOutcome {
        history,
        selected_epoch,
        params: params.clone(),
        test,
    })
}

/// Files written by [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub csv: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            csv: dir.join("epochs.csv"),
            checkpoint: dir.join("checkpoint.bin"),
        }
    }
}

/// Trains into `dir`, appending CSV rows as epochs complete and writing a
/// checkpoint when the run ends or stops early. With `resume`, continues from
/// that checkpoint and appends to the existing CSV.
pub fn train_to_dir(
    cfg: &TrainConfig,
    dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<RunFiles> {
    fs::create_dir_all(dir)?;
    let files = RunFiles::in_dir(dir);
    let data = Dataset::from_config(cfg)?;
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(cfg, &data, Checkpoint::load(path)?)?,
        None => Trainer::new(cfg, &data)?,
    };
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut csv = if resume.is_some() {
        BufWriter::new(OpenOptions::new().append(true).open(&files.csv)?)
    } else {
        let mut w = BufWriter::new(File::create(&files.csv)?);
        writeln!(w, "{CSV_HEADER}")?;
        w.flush()?;
        w
    };
    let start = trainer.epochs_done();
    while !trainer.finished() {
        if stop_after.is_some_and(|s| trainer.epochs_done() - start >= s) {
            break;
        }
        if let Some(r) = trainer.train_epoch()? {
            writeln!(csv, "{}", r.csv_row())?;
            csv.flush()?;
            info!(
                "epoch {} test_auc {:.4} test_f1 {:.4} entropy {:.4}",
                r.epoch, r.test_auc, r.test_f1, r.test_mean_entropy
            );
        }
    }
    trainer.checkpoint().save(&files.checkpoint)?;
    if trainer.finished() {
        let (_, params) = trainer.selected();
        let test = evaluate(params, &data.bags(SplitName::Test))?;
        fs::write(dir.join("test_report.txt"), test.summary_text())?;
        fs::write(dir.join("test_attention.txt"), test.attention_dump())?;
    }
    Ok(files)
}

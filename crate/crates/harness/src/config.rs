//! Run configuration: a flat `key = value` text format with `#` comments.
//!
//! Unknown keys are rejected. A file may start with `preset = <name>` to load
//! one of the named profiles before applying its remaining keys. Serializing a
//! config always writes every key explicitly, so the output parses back to an
//! identical config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use aem_core::data::SyntheticConfig;
use aem_core::model::{ArchitectureSpec, Variant};
use aem_core::objectives::RegKind;
use aem_core::optim::LambdaSchedule;
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Manifest(PathBuf),
}

/// Which parameters a run reports at the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Final,
    ValBest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data: DataSource,
    /// Feature dimension of every bag (synthetic: generator dimension).
    pub input_dim: usize,
    pub n_classes: usize,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    pub variant: Variant,
    pub embed_dim: usize,
    pub attn_hidden: usize,
    pub reg: RegKind,
    pub lambda: f64,
    pub cwa: bool,
    pub lambda_min: f64,
    pub epochs: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub subsample: Option<f64>,
    pub eval_every: u64,
    pub select: Selection,
    pub out_dir: Option<PathBuf>,
}

pub const PRESETS: [&str; 4] = ["default", "c16-like", "c17-like", "lbc-like"];

impl Default for TrainConfig {
    /// The default synthetic profile: two classes, 32-dimensional features,
    /// 100 bags with a 10% witness rate, trained without regularization.
    fn default() -> Self {
        let synth = SyntheticConfig {
            n_classes: 2,
            dim: 32,
            bags_per_class: 50,
            min_instances: 20,
            max_instances: 60,
            witness_rate: 0.1,
            separation: 2.0,
            noise: 1.0,
            label_flip: 0.0,
            seed: 0,
        };
        Self {
            input_dim: synth.dim,
            n_classes: synth.n_classes,
            data: DataSource::Synthetic(synth),
            split_ratios: [0.6, 0.2, 0.2],
            split_seed: 0,
            variant: Variant::Gated,
            embed_dim: 64,
            attn_hidden: 32,
            reg: RegKind::None,
            lambda: 0.0,
            cwa: false,
            lambda_min: 0.0,
            epochs: 50,
            lr: 1e-4,
            lr_min: 0.0,
            seed: 0,
            subsample: None,
            eval_every: 1,
            select: Selection::Final,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// Named profiles. The three dataset-like presets carry the default
    /// regularizer weights 0.001, 0.1 and 0.2 and class counts 2, 2 and 4.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let with_synth = |cfg: &mut Self, f: &dyn Fn(&mut SyntheticConfig)| {
            if let DataSource::Synthetic(s) = &mut cfg.data {
                f(s);
                cfg.n_classes = s.n_classes;
                cfg.input_dim = s.dim;
            }
        };
        match name {
            "default" => {}
            "c16-like" => {
                with_synth(&mut cfg, &|s| s.witness_rate = 0.05);
                cfg.reg = RegKind::Aem;
                cfg.lambda = 0.001;
                cfg.cwa = true;
            }
            "c17-like" => {
                with_synth(&mut cfg, &|s| s.label_flip = 0.05);
                cfg.reg = RegKind::Aem;
                cfg.lambda = 0.1;
                cfg.cwa = true;
            }
            "lbc-like" => {
                with_synth(&mut cfg, &|s| {
                    s.n_classes = 4;
                    s.bags_per_class = 40;
                    s.witness_rate = 0.2;
                });
                cfg.reg = RegKind::Aem;
                cfg.lambda = 0.2;
                cfg.cwa = true;
            }
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    pub fn architecture(&self) -> ArchitectureSpec {
        ArchitectureSpec {
            input_dim: self.input_dim,
            embed_dim: self.embed_dim,
            attn_hidden: self.attn_hidden,
            n_classes: self.n_classes,
            variant: self.variant,
        }
    }

    pub fn lambda_schedule(&self) -> LambdaSchedule {
        LambdaSchedule {
            lambda0: self.lambda,
            lambda_min: self.lambda_min,
            annealed: self.cwa,
            epochs: self.epochs,
        }
    }

    /// Regularizer weight used during `epoch` (0-based).
    pub fn lambda_at_epoch(&self, epoch: u64) -> f64 {
        if self.reg == RegKind::None {
            0.0
        } else {
            self.lambda_schedule().at_epoch(epoch)
        }
    }

    /// Sets the regularizer, recording λ as zero for unregularized runs.
    pub fn set_regularizer(&mut self, reg: RegKind, lambda: f64) {
        self.reg = reg;
        self.lambda = if reg == RegKind::None { 0.0 } else { lambda };
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        self.architecture().validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
            if s.dim != self.input_dim || s.n_classes != self.n_classes {
                return fail("synthetic dims disagree with input_dim/classes".into());
            }
        }
        if self.split_ratios.iter().any(|&r| !(r >= 0.0))
            || (self.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return fail(format!("split ratios {:?} must sum to 1", self.split_ratios));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lambda_min >= 0.0) || (self.cwa && self.lambda_min > self.lambda) {
            return fail(format!(
                "lambda_min {} must lie in [0, lambda]",
                self.lambda_min
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return fail(format!("need 0 <= lr_min <= lr, lr > 0 (lr={}, lr_min={})", self.lr, self.lr_min));
        }
        if let Some(rho) = self.subsample {
            if !(rho > 0.0 && rho <= 1.0) {
                return fail(format!("subsample fraction {rho} not in (0, 1]"));
            }
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if self.reg == RegKind::None && self.lambda != 0.0 {
            return fail("reg = none requires lambda = 0".into());
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let DataSource::Manifest(m) = &mut cfg.data {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    *m = dir.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            lines.push((i + 1, key.trim().to_string(), value.trim().to_string()));
        }
        let mut cfg = match lines.first() {
            Some((_, k, v)) if k == "preset" => Self::preset(v)?,
            _ => Self::default(),
        };
        let mut synth = match &cfg.data {
            DataSource::Synthetic(s) => s.clone(),
            DataSource::Manifest(_) => SyntheticConfig::default(),
        };
        let mut source = match &cfg.data {
            DataSource::Synthetic(_) => "synthetic".to_string(),
            DataSource::Manifest(_) => "manifest".to_string(),
        };
        let mut manifest: Option<PathBuf> = None;
        for (idx, (lineno, key, value)) in lines.iter().enumerate() {
            let err = |m: String| HarnessError::Config(format!("line {lineno}: {m}"));
            let num = |what: &str| -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|_| err(format!("{what} must be a number, got `{value}`")))
            };
            let int = |what: &str| -> Result<u64> {
                value
                    .parse::<u64>()
                    .map_err(|_| err(format!("{what} must be a non-negative integer, got `{value}`")))
            };
            match key.as_str() {
                "preset" if idx == 0 => {}
                "preset" => return Err(err("preset must be the first key".into())),
                "data" => source = value.clone(),
                "manifest" => manifest = Some(PathBuf::from(value)),
                "input_dim" => cfg.input_dim = int(key)? as usize,
                "classes" => cfg.n_classes = int(key)? as usize,
                "synth_bags_per_class" => synth.bags_per_class = int(key)? as usize,
                "synth_min_instances" => synth.min_instances = int(key)? as usize,
                "synth_max_instances" => synth.max_instances = int(key)? as usize,
                "synth_witness_rate" => synth.witness_rate = num(key)?,
                "synth_separation" => synth.separation = num(key)?,
                "synth_noise" => synth.noise = num(key)?,
                "synth_label_flip" => synth.label_flip = num(key)?,
                "synth_seed" => synth.seed = int(key)?,
                "split" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|p| p.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| err(format!("split must be three numbers, got `{value}`")))?;
                    cfg.split_ratios = parts
                        .try_into()
                        .map_err(|_| err(format!("split must be three numbers, got `{value}`")))?;
                }
                "split_seed" => cfg.split_seed = int(key)?,
                "variant" => {
                    let heads = cfg.variant.n_heads();
                    cfg.variant = match value.as_str() {
                        "gated" => Variant::Gated,
                        "dual_stream" => Variant::DualStream,
                        "multi_head" => Variant::MultiHead { n_heads: heads },
                        other => return Err(err(format!("unknown variant `{other}`"))),
                    }
                }
                "heads" => {
                    let n = int(key)? as usize;
                    match &mut cfg.variant {
                        Variant::MultiHead { n_heads } => *n_heads = n,
                        _ if n == 1 => {}
                        _ => return Err(err("heads > 1 requires variant = multi_head".into())),
                    }
                }
                "embed_dim" => cfg.embed_dim = int(key)? as usize,
                "attn_hidden" => cfg.attn_hidden = int(key)? as usize,
                "reg" => cfg.reg = RegKind::from_str(value).map_err(|e| err(e.to_string()))?,
                "lambda" => cfg.lambda = num(key)?,
                "cwa" => {
                    cfg.cwa = match value.as_str() {
                        "true" => true,
                        "false" => false,
                        _ => return Err(err(format!("cwa must be true or false, got `{value}`"))),
                    }
                }
                "lambda_min" => cfg.lambda_min = num(key)?,
                "epochs" => cfg.epochs = int(key)?,
                "lr" => cfg.lr = num(key)?,
                "lr_min" => cfg.lr_min = num(key)?,
                "seed" => cfg.seed = int(key)?,
                "subsample" => {
                    cfg.subsample = if value == "none" { None } else { Some(num(key)?) }
                }
                "eval_every" => cfg.eval_every = int(key)?,
                "select" => {
                    cfg.select = match value.as_str() {
                        "final" => Selection::Final,
                        "val_best" => Selection::ValBest,
                        other => return Err(err(format!("unknown selection `{other}`"))),
                    }
                }
                "out" => cfg.out_dir = Some(PathBuf::from(value)),
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        cfg.data = match source.as_str() {
            "synthetic" => {
                synth.n_classes = cfg.n_classes;
                synth.dim = cfg.input_dim;
                DataSource::Synthetic(synth)
            }
            "manifest" => DataSource::Manifest(manifest.ok_or_else(|| {
                HarnessError::Config("data = manifest requires a `manifest` key".into())
            })?),
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown data source `{other}` (expected synthetic or manifest)"
                )))
            }
        };
        if cfg.reg == RegKind::None {
            cfg.lambda = 0.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn write_keys(&self, out: &mut String, include_out: bool) {
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &self.data {
            DataSource::Synthetic(_) => kv("data", "synthetic".into()),
            DataSource::Manifest(p) => {
                kv("data", "manifest".into());
                kv("manifest", p.display().to_string());
            }
        }
        kv("input_dim", self.input_dim.to_string());
        kv("classes", self.n_classes.to_string());
        if let DataSource::Synthetic(s) = &self.data {
            kv("synth_bags_per_class", s.bags_per_class.to_string());
            kv("synth_min_instances", s.min_instances.to_string());
            kv("synth_max_instances", s.max_instances.to_string());
            kv("synth_witness_rate", s.witness_rate.to_string());
            kv("synth_separation", s.separation.to_string());
            kv("synth_noise", s.noise.to_string());
            kv("synth_label_flip", s.label_flip.to_string());
            kv("synth_seed", s.seed.to_string());
        }
        let [a, b, c] = self.split_ratios;
        kv("split", format!("{a},{b},{c}"));
        kv("split_seed", self.split_seed.to_string());
        let (variant, heads) = match self.variant {
            Variant::Gated => ("gated", 1),
            Variant::DualStream => ("dual_stream", 1),
            Variant::MultiHead { n_heads } => ("multi_head", n_heads),
        };
        kv("variant", variant.into());
        kv("heads", heads.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("attn_hidden", self.attn_hidden.to_string());
        kv("reg", self.reg.to_string());
        kv("lambda", self.lambda.to_string());
        kv("cwa", self.cwa.to_string());
        kv("lambda_min", self.lambda_min.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_min", self.lr_min.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "subsample",
            self.subsample.map_or("none".into(), |r| r.to_string()),
        );
        kv("eval_every", self.eval_every.to_string());
        kv(
            "select",
            match self.select {
                Selection::Final => "final",
                Selection::ValBest => "val_best",
            }
            .into(),
        );
        if include_out {
            if let Some(dir) = &self.out_dir {
                kv("out", dir.display().to_string());
            }
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_keys(&mut s, true);
        s
    }

    /// SHA-256 of the canonical text, excluding the output directory.
    pub fn hash(&self) -> [u8; 32] {
        let mut s = String::new();
        self.write_keys(&mut s, false);
        Sha256::digest(s.as_bytes()).into()
    }
}

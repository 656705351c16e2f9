//! Training objectives: softmax cross-entropy plus the attention regularizers.
//!
//! The entropy regularizer is the negative Shannon entropy of the attention
//! map, `Σ a_n ln a_n`, which is minimized (entropy maximized) alongside the
//! classification loss as `total = ce + λ·reg`.
//!
//! The KL alternative measures `KL(U ‖ A)` against the uniform distribution
//! `U`. The opposite direction, `KL(A ‖ U) = ln N − H(A)`, differs from the
//! entropy term only by a constant and has an identical gradient, so it would
//! not be a distinct objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::AttentionOutput;
use crate::tensor::softmax_stable;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegKind {
    None,
    Aem,
    Kl,
}

impl fmt::Display for RegKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegKind::None => "none",
            RegKind::Aem => "aem",
            RegKind::Kl => "kl",
        })
    }
}

impl FromStr for RegKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RegKind::None),
            "aem" => Ok(RegKind::Aem),
            "kl" => Ok(RegKind::Kl),
            other => Err(Error::Config(format!(
                "unknown regularizer `{other}` (expected none, aem or kl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub reg: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Softmax cross-entropy against a hard label.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut grad = softmax_stable(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    let loss = (log_norm - logits[label]).max(0.0);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

fn check_simplex(a: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Domain("empty attention vector".into()));
    }
    if let Some((i, v)) = a.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::Domain(format!(
            "attention entry {i} is {v}, expected a non-negative value"
        )));
    }
    let sum: f64 = a.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::Domain(format!("attention sums to {sum}, not 1")));
    }
    Ok(())
}

#[inline]
fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn attention_entropy(a: &[f64]) -> Result<f64> {
    check_simplex(a)?;
    Ok(-a.iter().map(|&x| xlnx(x)).sum::<f64>())
}

/// Negative entropy `Σ a ln a` and its gradient `ln a + 1` (0 where `a = 0`).
pub fn aem_loss(a: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_simplex(a)?;
    let loss = a.iter().map(|&x| xlnx(x)).sum();
    let grad = a
        .iter()
        .map(|&x| if x > 0.0 { x.ln() + 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// `KL(U ‖ A) = −ln N − (1/N) Σ ln a_n` and its gradient `−1/(N a_n)`.
pub fn kl_uniform_loss(a: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_simplex(a)?;
    if let Some(i) = a.iter().position(|&x| x == 0.0) {
        return Err(Error::Domain(format!(
            "attention entry {i} is zero; KL to uniform diverges"
        )));
    }
    let n = a.len() as f64;
    let loss = -n.ln() - a.iter().map(|x| x.ln()).sum::<f64>() / n;
    let grad = a.iter().map(|&x| -1.0 / (n * x)).collect();
    Ok((loss.max(0.0), grad))
}

/// `ce + λ·reg`. With `RegKind::None` the regularizer is ignored and λ
/// recorded as zero.
pub fn total_loss(ce: f64, reg: f64, lambda: f64, kind: RegKind) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let (reg, lambda) = match kind {
        RegKind::None => (0.0, 0.0),
        _ => (reg, lambda),
    };
    Ok(LossBreakdown {
        ce,
        reg,
        lambda,
        total: ce + lambda * reg,
    })
}

fn regularizer(kind: RegKind, a: &[f64]) -> Result<(f64, Vec<f64>)> {
    match kind {
        RegKind::None => Ok((0.0, vec![0.0; a.len()])),
        RegKind::Aem => aem_loss(a),
        RegKind::Kl => kl_uniform_loss(a),
    }
}

/// Regularizer value and per-head gradients for one forward output. Multi-head
/// models average the regularizer over heads, so each head's gradient carries
/// a `1/n_heads` factor.
pub fn regularizer_for_variant(out: &AttentionOutput, kind: RegKind) -> Result<(f64, Vec<Vec<f64>>)> {
    let heads = &out.head_weights;
    if heads.len() == 1 {
        let (reg, grad) = regularizer(kind, &heads[0])?;
        return Ok((reg, vec![grad]));
    }
    let scale = (heads.len() as f64).recip();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(heads.len());
    for a in heads {
        let (r, mut g) = regularizer(kind, a)?;
        total += r;
        g.iter_mut().for_each(|v| *v *= scale);
        grads.push(g);
    }
    Ok((total * scale, grads))
}

/// `KL(A ‖ U)`, used only to document its equivalence with the entropy term.
pub fn kl_to_uniform_forward(a: &[f64]) -> Result<f64> {
    check_simplex(a)?;
    let n = a.len() as f64;
    Ok(a.iter().map(|&x| if x > 0.0 { x * (x * n).ln() } else { 0.0 }).sum())
}

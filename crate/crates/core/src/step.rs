//! One bag's contribution to the training objective: forward, loss and
//! backward through the whole model.

use crate::error::Result;
use crate::model::{model_backward, model_forward, AttentionOutput, ModelParams};
use crate::objectives::{cross_entropy, regularizer_for_variant, total_loss, LossBreakdown, RegKind};
use crate::tensor::Matrix;

/// Objective value for one bag without touching gradients.
pub fn bag_loss(
    features: &Matrix,
    label: usize,
    params: &ModelParams,
    kind: RegKind,
    lambda: f64,
) -> Result<(LossBreakdown, AttentionOutput)> {
    let out = model_forward(features, params)?;
    let (ce, _) = cross_entropy(&out.logits, label)?;
    let (reg, _) = regularizer_for_variant(&out, kind)?;
    Ok((total_loss(ce, reg, lambda, kind)?, out))
}

/// Accumulates `∇(ce + λ·reg)` for one bag into the parameter gradients.
pub fn accumulate_bag_gradients(
    features: &Matrix,
    label: usize,
    params: &mut ModelParams,
    kind: RegKind,
    lambda: f64,
) -> Result<(LossBreakdown, AttentionOutput)> {
    let out = model_forward(features, params)?;
    let (ce, grad_logits) = cross_entropy(&out.logits, label)?;
    let (reg, mut grad_attention) = regularizer_for_variant(&out, kind)?;
    let losses = total_loss(ce, reg, lambda, kind)?;
    if losses.lambda == 0.0 {
        grad_attention.clear();
    } else {
        for g in grad_attention.iter_mut().flatten() {
            *g *= losses.lambda;
        }
    }
    model_backward(&out, &grad_logits, &grad_attention, params)?;
    Ok((losses, out.without_cache()))
}

/// Largest relative error between the analytic gradient of the bag objective
/// and central differences with step `h`, over every parameter value.
pub fn bag_gradient_error(
    features: &Matrix,
    label: usize,
    params: &ModelParams,
    kind: RegKind,
    lambda: f64,
    h: f64,
) -> Result<f64> {
    let mut work = params.clone();
    work.zero_grad();
    accumulate_bag_gradients(features, label, &mut work, kind, lambda)?;
    let analytic = work.flat_grads();
    let theta = params.flat_values();
    let mut probe = params.clone();
    crate::gradcheck::check_gradient(
        |values| {
            probe
                .set_flat_values(values)
                .and_then(|_| bag_loss(features, label, &probe, kind, lambda))
                .map_or(f64::NAN, |(l, _)| l.total)
        },
        &theta,
        &analytic,
        h,
    )
}

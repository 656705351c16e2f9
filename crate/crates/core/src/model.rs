//! Attention aggregators for bag classification and the full
//! bag → embeddings → attention → logits pipeline.
//!
//! Every forward returns an [`AttentionOutput`] holding the caches its
//! backward needs. Backward passes accumulate into the parameter gradients;
//! callers zero them once per optimization step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_backward, softmax_stable, Activation, Linear, Matrix, ParamTensor};

/// Which attention aggregator sits between the embedding and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// ABMIL gated attention `wᵀ(tanh(V h) ⊙ sigmoid(U h))`.
    Gated,
    /// Similarity to the highest-scoring ("critical") instance.
    DualStream,
    /// Independent gated heads, averaged.
    MultiHead { n_heads: usize },
}

impl Variant {
    pub fn n_heads(self) -> usize {
        match self {
            Variant::MultiHead { n_heads } => n_heads,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub attn_hidden: usize,
    pub n_classes: usize,
    pub variant: Variant,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("attn_hidden", self.attn_hidden),
            ("n_classes", self.n_classes),
            ("n_heads", self.variant.n_heads()),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// One gated attention head. `v`, `u`: `[E × L]`, `w`: `[L × 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedHead {
    pub v: ParamTensor,
    pub u: ParamTensor,
    pub w: ParamTensor,
}

/// `score`: `[E × 1]` instance scorer, `query`: `[E × L]` query map.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStreamParams {
    pub score: ParamTensor,
    pub query: ParamTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams {
    Gated(GatedHead),
    DualStream(DualStreamParams),
    MultiHead(Vec<GatedHead>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Feature reduction `[D × E]`, followed by ReLU.
    pub reduce: Linear,
    pub attention: AttentionParams,
    /// `[E × C]`
    pub classifier: Linear,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
        .collect();
    Matrix::new(rows, cols, data).expect("shape matches data length")
}

fn init_gated_head(rng: &mut ChaCha8Rng, embed: usize, hidden: usize) -> GatedHead {
    GatedHead {
        v: ParamTensor::new(xavier(rng, embed, hidden)),
        u: ParamTensor::new(xavier(rng, embed, hidden)),
        w: ParamTensor::new(xavier(rng, hidden, 1)),
    }
}

impl ModelParams {
    /// Seeded Xavier-uniform initialization, zero biases. Tensors are drawn in
    /// the order reduce, attention, classifier, so a one-head multi-head model
    /// receives exactly the gated model's parameters.
    pub fn init(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, e, l, c) = (
            spec.input_dim,
            spec.embed_dim,
            spec.attn_hidden,
            spec.n_classes,
        );
        let reduce = Linear::new(xavier(&mut rng, d, e), vec![0.0; e])?;
        let attention = match spec.variant {
            Variant::Gated => AttentionParams::Gated(init_gated_head(&mut rng, e, l)),
            Variant::DualStream => AttentionParams::DualStream(DualStreamParams {
                score: ParamTensor::new(xavier(&mut rng, e, 1)),
                query: ParamTensor::new(xavier(&mut rng, e, l)),
            }),
            Variant::MultiHead { n_heads } => AttentionParams::MultiHead(
                (0..n_heads)
                    .map(|_| init_gated_head(&mut rng, e, l))
                    .collect(),
            ),
        };
        let classifier = Linear::new(xavier(&mut rng, e, c), vec![0.0; c])?;
        Ok(Self {
            reduce,
            attention,
            classifier,
        })
    }

    /// All tensors in a fixed traversal order.
    pub fn tensors(&self) -> Vec<&ParamTensor> {
        let mut out = vec![&self.reduce.weight, &self.reduce.bias];
        match &self.attention {
            AttentionParams::Gated(h) => out.extend([&h.v, &h.u, &h.w]),
            AttentionParams::DualStream(p) => out.extend([&p.score, &p.query]),
            AttentionParams::MultiHead(heads) => {
                for h in heads {
                    out.extend([&h.v, &h.u, &h.w]);
                }
            }
        }
        out.extend([&self.classifier.weight, &self.classifier.bias]);
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = vec![&mut self.reduce.weight, &mut self.reduce.bias];
        match &mut self.attention {
            AttentionParams::Gated(h) => out.extend([&mut h.v, &mut h.u, &mut h.w]),
            AttentionParams::DualStream(p) => out.extend([&mut p.score, &mut p.query]),
            AttentionParams::MultiHead(heads) => {
                for h in heads {
                    out.extend([&mut h.v, &mut h.u, &mut h.w]);
                }
            }
        }
        out.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
        out
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(ParamTensor::zero_grad);
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.value.data().len()).sum()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.grad.data().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::Dimension {
                op: "set_flat_values",
                left: (1, self.num_values()),
                right: (1, values.len()),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.value.data().len();
            t.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Checks every tensor shape against `spec`.
    pub fn conforms_to(&self, spec: &ArchitectureSpec) -> bool {
        let (d, e, l, c) = (
            spec.input_dim,
            spec.embed_dim,
            spec.attn_hidden,
            spec.n_classes,
        );
        let head_ok = |h: &GatedHead| {
            h.v.shape() == (e, l) && h.u.shape() == (e, l) && h.w.shape() == (l, 1)
        };
        let attention_ok = match (&self.attention, spec.variant) {
            (AttentionParams::Gated(h), Variant::Gated) => head_ok(h),
            (AttentionParams::DualStream(p), Variant::DualStream) => {
                p.score.shape() == (e, 1) && p.query.shape() == (e, l)
            }
            (AttentionParams::MultiHead(hs), Variant::MultiHead { n_heads }) => {
                hs.len() == n_heads && hs.iter().all(head_ok)
            }
            _ => false,
        };
        attention_ok
            && self.reduce.weight.shape() == (d, e)
            && self.reduce.bias.shape() == (1, e)
            && self.classifier.weight.shape() == (e, c)
            && self.classifier.bias.shape() == (1, c)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GatedCache {
    tanh: Matrix,
    gate: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
enum AttentionCache {
    /// One entry per head.
    Gated(Vec<GatedCache>),
    DualStream { queries: Matrix, critical: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct ReductionCache {
    features: Matrix,
    pre_activation: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    embeddings: Matrix,
    attention: AttentionCache,
    reduction: Option<ReductionCache>,
}

/// Result of one bag forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Reported attention distribution over instances (head mean for
    /// multi-head models).
    pub weights: Vec<f64>,
    /// One attention map per head; single-head variants carry one map equal
    /// to `weights`.
    pub head_weights: Vec<Vec<f64>>,
    /// Bag embedding `z = Σ a_n h_n`.
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    /// Index of the critical instance (dual-stream only).
    pub critical_index: Option<usize>,
    cache: Option<ForwardCache>,
}

impl AttentionOutput {
    pub fn n_instances(&self) -> usize {
        self.weights.len()
    }

    /// Instance embeddings the attention operated on.
    pub fn embeddings(&self) -> Option<&Matrix> {
        self.cache.as_ref().map(|c| &c.embeddings)
    }

    /// Drops the backward caches, keeping only the reported values.
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax_stable(&self.logits).expect("logits are nonempty and finite")
    }
}

fn weighted_sum(h: &Matrix, weights: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; h.cols()];
    for (n, &a) in weights.iter().enumerate() {
        for (zi, hi) in z.iter_mut().zip(h.row(n)) {
            *zi += a * hi;
        }
    }
    z
}

fn gated_head_forward(h: &Matrix, head: &GatedHead) -> Result<(Vec<f64>, GatedCache)> {
    let tanh = Activation::Tanh.forward(&h.matmul(&head.v.value)?);
    let gate = Activation::Sigmoid.forward(&h.matmul(&head.u.value)?);
    let w = head.w.value.data();
    let scores: Vec<f64> = (0..h.rows())
        .map(|n| {
            tanh.row(n)
                .iter()
                .zip(gate.row(n))
                .zip(w)
                .map(|((t, g), wl)| t * g * wl)
                .sum()
        })
        .collect();
    Ok((softmax_stable(&scores)?, GatedCache { tanh, gate }))
}

/// Backpropagates `grad_weights` (gradient w.r.t. this head's attention map)
/// into the head parameters and adds the embedding gradient into `grad_h`.
fn gated_head_backward(
    h: &Matrix,
    head: &mut GatedHead,
    cache: &GatedCache,
    weights: &[f64],
    grad_weights: &[f64],
    grad_h: &mut Matrix,
) -> Result<()> {
    let grad_scores = softmax_backward(grad_weights, weights)?;
    let (n, l) = cache.tanh.shape();
    let w = head.w.value.data().to_vec();
    let mut grad_tanh_pre = Matrix::zeros(n, l);
    let mut grad_gate_pre = Matrix::zeros(n, l);
    let mut grad_w = vec![0.0; l];
    for i in 0..n {
        let ds = grad_scores[i];
        let (t_row, g_row) = (cache.tanh.row(i), cache.gate.row(i));
        for j in 0..l {
            let (t, g) = (t_row[j], g_row[j]);
            grad_w[j] += ds * t * g;
            grad_tanh_pre.set(i, j, ds * w[j] * g * (1.0 - t * t));
            grad_gate_pre.set(i, j, ds * w[j] * t * g * (1.0 - g));
        }
    }
    head.w.accumulate(&Matrix::column_vector(grad_w))?;
    head.v.accumulate(&h.t_matmul(&grad_tanh_pre)?)?;
    head.u.accumulate(&h.t_matmul(&grad_gate_pre)?)?;
    grad_h.add_assign(&grad_tanh_pre.matmul_t(&head.v.value)?)?;
    grad_h.add_assign(&grad_gate_pre.matmul_t(&head.u.value)?)?;
    Ok(())
}

fn classify(params: &ModelParams, z: &[f64]) -> Result<Vec<f64>> {
    Ok(params
        .classifier
        .forward(&Matrix::row_vector(z.to_vec()))?
        .into_data())
}

fn check_embeddings(h: &Matrix, params: &ModelParams) -> Result<()> {
    if h.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    if h.cols() != params.classifier.in_dim() {
        return Err(Error::Config(format!(
            "embedding width {} does not match classifier input {}",
            h.cols(),
            params.classifier.in_dim()
        )));
    }
    Ok(())
}

fn variant_mismatch(expected: &str) -> Error {
    Error::Config(format!("parameters do not belong to a {expected} model"))
}

/// Gated attention on instance embeddings `h` (`N × E`).
pub fn gated_attention_forward(h: &Matrix, params: &ModelParams) -> Result<AttentionOutput> {
    check_embeddings(h, params)?;
    let AttentionParams::Gated(head) = &params.attention else {
        return Err(variant_mismatch("gated"));
    };
    let (weights, cache) = gated_head_forward(h, head)?;
    let embedding = weighted_sum(h, &weights);
    let logits = classify(params, &embedding)?;
    Ok(AttentionOutput {
        head_weights: vec![weights.clone()],
        weights,
        embedding,
        logits,
        critical_index: None,
        cache: Some(ForwardCache {
            embeddings: h.clone(),
            attention: AttentionCache::Gated(vec![cache]),
            reduction: None,
        }),
    })
}

/// Index of the largest score; ties go to the smallest index.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Dual-stream attention: each instance attends by scaled query similarity to
/// the critical (highest-scoring) instance.
pub fn dual_stream_forward(h: &Matrix, params: &ModelParams) -> Result<AttentionOutput> {
    check_embeddings(h, params)?;
    let AttentionParams::DualStream(p) = &params.attention else {
        return Err(variant_mismatch("dual-stream"));
    };
    let instance_scores = h.matmul(&p.score.value)?.into_data();
    let critical = argmax_first(&instance_scores);
    let queries = h.matmul(&p.query.value)?;
    let scale = (queries.cols() as f64).sqrt().recip();
    let q_c = queries.row(critical);
    let raw: Vec<f64> = (0..h.rows())
        .map(|n| dot(queries.row(n), q_c) * scale)
        .collect();
    let weights = softmax_stable(&raw)?;
    let embedding = weighted_sum(h, &weights);
    let logits = classify(params, &embedding)?;
    Ok(AttentionOutput {
        head_weights: vec![weights.clone()],
        weights,
        embedding,
        logits,
        critical_index: Some(critical),
        cache: Some(ForwardCache {
            embeddings: h.clone(),
            attention: AttentionCache::DualStream { queries, critical },
            reduction: None,
        }),
    })
}

/// Multi-head gated attention; embeddings and maps are averaged over heads.
pub fn multi_head_forward(h: &Matrix, params: &ModelParams) -> Result<AttentionOutput> {
    check_embeddings(h, params)?;
    let AttentionParams::MultiHead(heads) = &params.attention else {
        return Err(variant_mismatch("multi-head"));
    };
    if heads.is_empty() {
        return Err(Error::Config("multi-head model has no heads".into()));
    }
    let n_heads = heads.len() as f64;
    let mut head_weights = Vec::with_capacity(heads.len());
    let mut caches = Vec::with_capacity(heads.len());
    for head in heads {
        let (w, c) = gated_head_forward(h, head)?;
        head_weights.push(w);
        caches.push(c);
    }
    let (weights, embedding) = if heads.len() == 1 {
        let w = head_weights[0].clone();
        let z = weighted_sum(h, &w);
        (w, z)
    } else {
        let mut weights = vec![0.0; h.rows()];
        let mut embedding = vec![0.0; h.cols()];
        for w in &head_weights {
            for (acc, v) in weights.iter_mut().zip(w) {
                *acc += v;
            }
            for (acc, v) in embedding.iter_mut().zip(weighted_sum(h, w)) {
                *acc += v;
            }
        }
        weights.iter_mut().for_each(|v| *v /= n_heads);
        embedding.iter_mut().for_each(|v| *v /= n_heads);
        (weights, embedding)
    };
    let logits = classify(params, &embedding)?;
    Ok(AttentionOutput {
        weights,
        head_weights,
        embedding,
        logits,
        critical_index: None,
        cache: Some(ForwardCache {
            embeddings: h.clone(),
            attention: AttentionCache::Gated(caches),
            reduction: None,
        }),
    })
}

/// Dispatches on the parameter variant.
pub fn attention_forward(h: &Matrix, params: &ModelParams) -> Result<AttentionOutput> {
    match params.attention {
        AttentionParams::Gated(_) => gated_attention_forward(h, params),
        AttentionParams::DualStream(_) => dual_stream_forward(h, params),
        AttentionParams::MultiHead(_) => multi_head_forward(h, params),
    }
}

/// Full pipeline on raw instance features (`N × D`).
pub fn model_forward(features: &Matrix, params: &ModelParams) -> Result<AttentionOutput> {
    if features.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    if features.cols() != params.reduce.in_dim() {
        return Err(Error::Config(format!(
            "bag has {} feature columns, model expects {}",
            features.cols(),
            params.reduce.in_dim()
        )));
    }
    let pre_activation = params.reduce.forward(features)?;
    let h = Activation::Relu.forward(&pre_activation);
    let mut out = attention_forward(&h, params)?;
    if let Some(cache) = out.cache.as_mut() {
        cache.reduction = Some(ReductionCache {
            features: features.clone(),
            pre_activation,
        });
    }
    Ok(out)
}

/// Accumulates into every parameter gradient the derivative of
/// `⟨grad_logits, logits⟩ + Σ_k ⟨grad_attention[k], A⁽ᵏ⁾⟩`.
///
/// `grad_attention` holds one vector per head (see
/// [`AttentionOutput::head_weights`]); an empty slice means no direct
/// attention gradient.
pub fn model_backward(
    out: &AttentionOutput,
    grad_logits: &[f64],
    grad_attention: &[Vec<f64>],
    params: &mut ModelParams,
) -> Result<()> {
    let cache = out
        .cache
        .as_ref()
        .ok_or_else(|| Error::State("backward called without forward caches".into()))?;
    let h = &cache.embeddings;
    let n = h.rows();
    if grad_logits.len() != out.logits.len() {
        return Err(Error::Dimension {
            op: "model_backward(logits)",
            left: (1, out.logits.len()),
            right: (1, grad_logits.len()),
        });
    }
    if !grad_attention.is_empty()
        && (grad_attention.len() != out.head_weights.len()
            || grad_attention.iter().any(|g| g.len() != n))
    {
        return Err(Error::Dimension {
            op: "model_backward(attention)",
            left: (out.head_weights.len(), n),
            right: (
                grad_attention.len(),
                grad_attention.first().map_or(0, Vec::len),
            ),
        });
    }
    let external = |k: usize, i: usize| grad_attention.get(k).map_or(0.0, |g| g[i]);

    let grad_z = params
        .classifier
        .backward(
            &Matrix::row_vector(grad_logits.to_vec()),
            &Matrix::row_vector(out.embedding.clone()),
        )?
        .into_data();

    let mut grad_h = Matrix::zeros(n, h.cols());
    match (&mut params.attention, &cache.attention) {
        (AttentionParams::Gated(head), AttentionCache::Gated(caches)) => {
            let weights = &out.head_weights[0];
            let grad_a = attention_path(h, weights, &grad_z, |i| external(0, i), &mut grad_h);
            gated_head_backward(h, head, &caches[0], weights, &grad_a, &mut grad_h)?;
        }
        (AttentionParams::MultiHead(heads), AttentionCache::Gated(caches)) => {
            let scale = (heads.len() as f64).recip();
            let grad_zk: Vec<f64> = if heads.len() == 1 {
                grad_z.clone()
            } else {
                grad_z.iter().map(|g| g * scale).collect()
            };
            for (k, (head, c)) in heads.iter_mut().zip(caches).enumerate() {
                let weights = &out.head_weights[k];
                let grad_a = attention_path(h, weights, &grad_zk, |i| external(k, i), &mut grad_h);
                gated_head_backward(h, head, c, weights, &grad_a, &mut grad_h)?;
            }
        }
        (AttentionParams::DualStream(p), AttentionCache::DualStream { queries, critical }) => {
            let weights = &out.head_weights[0];
            let grad_a = attention_path(h, weights, &grad_z, |i| external(0, i), &mut grad_h);
            let grad_raw = softmax_backward(&grad_a, weights)?;
            let scale = (queries.cols() as f64).sqrt().recip();
            let q_c = queries.row(*critical).to_vec();
            let mut grad_q = Matrix::zeros(n, queries.cols());
            let mut grad_qc = vec![0.0; queries.cols()];
            for i in 0..n {
                let g = grad_raw[i] * scale;
                for ((dq, dqc), (&qc, &qi)) in grad_q
                    .row_mut(i)
                    .iter_mut()
                    .zip(grad_qc.iter_mut())
                    .zip(q_c.iter().zip(queries.row(i)))
                {
                    *dq += g * qc;
                    *dqc += g * qi;
                }
            }
            for (dq, v) in grad_q.row_mut(*critical).iter_mut().zip(&grad_qc) {
                *dq += v;
            }
            // The critical index is piecewise constant in `score`, so the
            // instance scorer receives no gradient from this path.
            p.query.accumulate(&h.t_matmul(&grad_q)?)?;
            grad_h.add_assign(&grad_q.matmul_t(&p.query.value)?)?;
        }
        _ => return Err(Error::State("forward cache does not match parameters".into())),
    }

    if let Some(red) = &cache.reduction {
        let relu_out = h;
        let grad_pre = Activation::Relu.backward(&grad_h, &red.pre_activation, relu_out)?;
        params.reduce.backward(&grad_pre, &red.features)?;
    }
    Ok(())
}

/// Gradient through `z = Σ a_n h_n`: adds `a_n · ∂z` into `grad_h` and returns
/// the total gradient on the attention map (aggregation path plus external).
fn attention_path(
    h: &Matrix,
    weights: &[f64],
    grad_z: &[f64],
    external: impl Fn(usize) -> f64,
    grad_h: &mut Matrix,
) -> Vec<f64> {
    (0..h.rows())
        .map(|i| {
            let a = weights[i];
            for (gh, gz) in grad_h.row_mut(i).iter_mut().zip(grad_z) {
                *gh += a * gz;
            }
            dot(h.row(i), grad_z) + external(i)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(variant: Variant) -> ArchitectureSpec {
        ArchitectureSpec {
            input_dim: 3,
            embed_dim: 4,
            attn_hidden: 5,
            n_classes: 3,
            variant,
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn singleton_bag_gets_all_attention() {
        for variant in [
            Variant::Gated,
            Variant::DualStream,
            Variant::MultiHead { n_heads: 3 },
        ] {
            let p = ModelParams::init(&spec(variant), 1).unwrap();
            let h = random_matrix(1, 4, 2);
            let out = attention_forward(&h, &p).unwrap();
            assert_eq!(out.weights, vec![1.0]);
            for (z, x) in out.embedding.iter().zip(h.row(0)) {
                assert!((z - x).abs() < 1e-15);
            }
            if variant == Variant::Gated {
                assert_eq!(out.embedding, h.row(0).to_vec());
            }
        }
    }

    #[test]
    fn identical_instances_share_attention() {
        let p = ModelParams::init(&spec(Variant::Gated), 3).unwrap();
        let row = random_matrix(1, 4, 4);
        let h = Matrix::from_rows(&[row.row(0), row.row(0)]).unwrap();
        let out = gated_attention_forward(&h, &p).unwrap();
        assert!(out.weights.iter().all(|&a| (a - 0.5).abs() < 1e-12));

        let p = ModelParams::init(&spec(Variant::DualStream), 3).unwrap();
        let h = Matrix::from_rows(&[row.row(0), row.row(0), row.row(0)]).unwrap();
        let out = dual_stream_forward(&h, &p).unwrap();
        assert_eq!(out.critical_index, Some(0));
        assert!(out.weights.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn empty_bag_rejected() {
        let p = ModelParams::init(&spec(Variant::Gated), 0).unwrap();
        assert!(matches!(
            model_forward(&Matrix::zeros(0, 3), &p),
            Err(Error::EmptyBag)
        ));
        assert!(matches!(
            gated_attention_forward(&Matrix::zeros(0, 4), &p),
            Err(Error::EmptyBag)
        ));
    }

    #[test]
    fn feature_width_mismatch_is_config_error() {
        let p = ModelParams::init(&spec(Variant::Gated), 0).unwrap();
        assert!(matches!(
            model_forward(&Matrix::zeros(2, 5), &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn wrong_variant_rejected() {
        let p = ModelParams::init(&spec(Variant::Gated), 0).unwrap();
        let h = random_matrix(2, 4, 1);
        assert!(dual_stream_forward(&h, &p).is_err());
        assert!(multi_head_forward(&h, &p).is_err());
    }

    #[test]
    fn backward_without_cache_is_state_error() {
        let mut p = ModelParams::init(&spec(Variant::Gated), 0).unwrap();
        let out = model_forward(&random_matrix(2, 3, 1), &p)
            .unwrap()
            .without_cache();
        assert!(matches!(
            model_backward(&out, &[0.0; 3], &[], &mut p),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let s = spec(Variant::MultiHead { n_heads: 2 });
        assert_eq!(
            ModelParams::init(&s, 9).unwrap(),
            ModelParams::init(&s, 9).unwrap()
        );
        assert_ne!(
            ModelParams::init(&s, 9).unwrap(),
            ModelParams::init(&s, 10).unwrap()
        );
    }

    #[test]
    fn tensor_traversal_matches_spec() {
        for variant in [
            Variant::Gated,
            Variant::DualStream,
            Variant::MultiHead { n_heads: 2 },
        ] {
            let s = spec(variant);
            let p = ModelParams::init(&s, 0).unwrap();
            assert!(p.conforms_to(&s));
            let flat = p.flat_values();
            let mut q = ModelParams::init(&s, 1).unwrap();
            q.set_flat_values(&flat).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_first(&[5.0]), 0);
    }
}

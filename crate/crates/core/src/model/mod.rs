//! A lightweight 3D residual CNN with from-scratch forward and backward
//! passes.
//!
//! Layer order: stem conv (1 -> C1, stride (1,2,2)) -> R-block at C1 ->
//! downsample conv (C1 -> C2, stride (2,2,2)) -> R-block at C2 -> BN -> ReLU
//! -> global average pool -> dropout (train only, inverted scaling) ->
//! affine C2 -> 1 -> sigmoid. An R-block is the pre-activation residual
//! `y = x + conv(relu(bn(x)))`.
//!
//! All math is f64 with fixed summation order; training is single-threaded
//! and fully determined by the seed.

mod checkpoint;
mod gradcheck;
mod layers;
mod tensor;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use layers::{BnParams, ConvParams};
pub use tensor::FeatureMap;
pub use train::{
    default_class_weights, train, EpochRecord, PreprocessedCase, TrainConfig, TrainOutcome,
};

use layers::{
    bn_backward, bn_forward_eval, bn_forward_train, conv3d_backward, conv3d_forward, gap_forward,
    relu_backward, relu_forward, BnCache,
};
use rand::Rng;
use thiserror::Error;

use crate::rng::derive_rng;

/// Default channel widths of the two resolution scales.
pub const DEFAULT_C1: usize = 8;
pub const DEFAULT_C2: usize = 16;
/// Minimum input extent per axis.
pub const MIN_INPUT_EXTENT: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("input must be a single-channel unit-domain patch")]
    InputNotUnitDomain,
    #[error("input dims ({0}, {1}, {2}) too small: every axis must be >= {MIN_INPUT_EXTENT}")]
    InputTooSmall(usize, usize, usize),
    #[error("batch samples disagree in shape")]
    RaggedBatch,
    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: &'static str },
    #[error("labels ({labels}) and probabilities ({probs}) differ in length")]
    LabelLengthMismatch { labels: usize, probs: usize },
    #[error("class weights must be positive, got ({0}, {1})")]
    InvalidClassWeights(f64, f64),
    #[error("gradient/parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("forward cache does not match this batch")]
    CacheMismatch,
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("split {split:?} contains a single class; validation AUC undefined")]
    SingleClassSplit { split: &'static str },
    #[error("split {split:?} is empty")]
    EmptySplit { split: &'static str },
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error("case {case_id}: {message}")]
    Case { case_id: String, message: String },
}

/// One residual block: batch norm, ReLU, 3x3x3 same-channel convolution,
/// identity skip.
#[derive(Debug, Clone, PartialEq)]
pub struct RBlockParams {
    pub bn: BnParams,
    pub conv: ConvParams,
}

impl RBlockParams {
    fn zeros(c: usize) -> Self {
        Self {
            bn: BnParams::identity(c),
            conv: ConvParams::zeros(c, c, (1, 1, 1)),
        }
    }
}

/// Every learnable and running-statistic value of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub c1: usize,
    pub c2: usize,
    pub stem: ConvParams,
    pub block1: RBlockParams,
    pub down: ConvParams,
    pub block2: RBlockParams,
    pub head_bn: BnParams,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl ModelParams {
    /// All-zero parameters (identity BN): the untrained anchor whose output
    /// is exactly 0.5 everywhere.
    pub fn zeros(c1: usize, c2: usize) -> Self {
        Self {
            c1,
            c2,
            stem: ConvParams::zeros(1, c1, (1, 2, 2)),
            block1: RBlockParams::zeros(c1),
            down: ConvParams::zeros(c1, c2, (2, 2, 2)),
            block2: RBlockParams::zeros(c2),
            head_bn: BnParams::identity(c2),
            head_w: vec![0.0; c2],
            head_b: 0.0,
        }
    }

    /// Seeded initialization: fan-in-scaled uniform convolution weights,
    /// identity BN, zeroed affine head (untrained output is exactly 0.5).
    pub fn init(c1: usize, c2: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "init");
        let mut params = Self::zeros(c1, c2);
        for conv in [
            &mut params.stem,
            &mut params.block1.conv,
            &mut params.down,
            &mut params.block2.conv,
        ] {
            let bound = 1.0 / ((conv.in_c * 27) as f64).sqrt();
            for w in conv.weights.iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        params
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn learnable_count(&self) -> usize {
        self.visit_learnable(|_| {}).0
    }

    /// Walk every learnable scalar in the canonical order, returning the
    /// count and the group boundaries `(name, start, len)`.
    fn visit_learnable(&self, mut f: impl FnMut(f64)) -> (usize, Vec<(String, usize, usize)>) {
        let mut groups = Vec::new();
        let mut offset = 0usize;
        let mut emit = |name: &str, values: &[f64], f: &mut dyn FnMut(f64)| {
            for &v in values {
                f(v);
            }
            groups.push((name.to_string(), offset, values.len()));
            offset += values.len();
        };
        emit("stem.w", &self.stem.weights, &mut f);
        emit("stem.b", &self.stem.bias, &mut f);
        emit("block1.bn.gamma", &self.block1.bn.gamma, &mut f);
        emit("block1.bn.beta", &self.block1.bn.beta, &mut f);
        emit("block1.conv.w", &self.block1.conv.weights, &mut f);
        emit("block1.conv.b", &self.block1.conv.bias, &mut f);
        emit("down.w", &self.down.weights, &mut f);
        emit("down.b", &self.down.bias, &mut f);
        emit("block2.bn.gamma", &self.block2.bn.gamma, &mut f);
        emit("block2.bn.beta", &self.block2.bn.beta, &mut f);
        emit("block2.conv.w", &self.block2.conv.weights, &mut f);
        emit("block2.conv.b", &self.block2.conv.bias, &mut f);
        emit("head.bn.gamma", &self.head_bn.gamma, &mut f);
        emit("head.bn.beta", &self.head_bn.beta, &mut f);
        emit("head.w", &self.head_w, &mut f);
        emit("head.b", &[self.head_b], &mut f);
        (offset, groups)
    }

    /// Learnable scalars flattened in the canonical order.
    pub fn learnable_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.learnable_count());
        self.visit_learnable(|v| out.push(v));
        out
    }

    /// Group layout of the flattened learnable vector.
    pub fn learnable_groups(&self) -> Vec<(String, usize, usize)> {
        self.visit_learnable(|_| {}).1
    }

    /// Overwrite every learnable scalar from a flat vector (canonical order).
    pub fn set_learnable_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.learnable_count() {
            return Err(ModelError::ShapeMismatch(format!(
                "flat length {} vs learnable count {}",
                flat.len(),
                self.learnable_count()
            )));
        }
        let mut it = flat.iter().copied();
        let mut fill = |values: &mut [f64]| {
            for v in values.iter_mut() {
                *v = it.next().unwrap();
            }
        };
        fill(&mut self.stem.weights);
        fill(&mut self.stem.bias);
        fill(&mut self.block1.bn.gamma);
        fill(&mut self.block1.bn.beta);
        fill(&mut self.block1.conv.weights);
        fill(&mut self.block1.conv.bias);
        fill(&mut self.down.weights);
        fill(&mut self.down.bias);
        fill(&mut self.block2.bn.gamma);
        fill(&mut self.block2.bn.beta);
        fill(&mut self.block2.conv.weights);
        fill(&mut self.block2.conv.bias);
        fill(&mut self.head_bn.gamma);
        fill(&mut self.head_bn.beta);
        fill(&mut self.head_w);
        let mut last = [self.head_b];
        fill(&mut last);
        self.head_b = last[0];
        Ok(())
    }
}

/// Gradients of every learnable parameter, flattened in the canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    flat: Vec<f64>,
}

impl Gradients {
    pub fn flat(&self) -> &[f64] {
        &self.flat
    }
}

/// Batch probabilities plus everything the backward pass needs.
pub struct ForwardCache {
    input: Vec<FeatureMap>,
    block1: RBlockCache,
    down_in: Vec<FeatureMap>,
    block2: RBlockCache,
    head_bn_cache: BnCache,
    head_relu_pre: Vec<FeatureMap>,
    head_relu_out: Vec<FeatureMap>,
    dropout_mask: Vec<Vec<f64>>,
    dropped: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

struct RBlockCache {
    bn: BnCache,
    relu_pre: Vec<FeatureMap>,
    relu_out: Vec<FeatureMap>,
}

fn validate_batch(batch: &[FeatureMap]) -> Result<(), ModelError> {
    let first = batch.first().ok_or(ModelError::EmptyBatch)?;
    if first.c != 1 {
        return Err(ModelError::InputNotUnitDomain);
    }
    if first.z < MIN_INPUT_EXTENT || first.y < MIN_INPUT_EXTENT || first.x < MIN_INPUT_EXTENT {
        return Err(ModelError::InputTooSmall(first.z, first.y, first.x));
    }
    if !batch.iter().all(|s| s.same_shape(first)) {
        return Err(ModelError::RaggedBatch);
    }
    Ok(())
}

fn check_finite(batch: &[FeatureMap], layer: &'static str) -> Result<(), ModelError> {
    for s in batch {
        if s.first_non_finite().is_some() {
            return Err(ModelError::NonFiniteActivation { layer });
        }
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rblock_eval(batch: &[FeatureMap], p: &RBlockParams) -> Vec<FeatureMap> {
    let mut t = bn_forward_eval(batch, &p.bn);
    relu_forward(&mut t);
    let conv: Vec<FeatureMap> = t.iter().map(|s| conv3d_forward(s, &p.conv)).collect();
    batch
        .iter()
        .zip(conv)
        .map(|(x, c)| {
            let mut y = x.clone();
            for (a, b) in y.data.iter_mut().zip(&c.data) {
                *a += b;
            }
            y
        })
        .collect()
}

fn head_logits(pooled: &[Vec<f64>], w: &[f64], b: f64) -> Vec<f64> {
    pooled
        .iter()
        .map(|g| g.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>() + b)
        .collect()
}

/// Eval-mode forward: running statistics, no dropout. Deterministic.
pub fn forward_eval(params: &ModelParams, batch: &[FeatureMap]) -> Result<Vec<f64>, ModelError> {
    validate_batch(batch)?;
    let stem: Vec<FeatureMap> = batch
        .iter()
        .map(|s| conv3d_forward(s, &params.stem))
        .collect();
    check_finite(&stem, "stem")?;
    let b1 = rblock_eval(&stem, &params.block1);
    check_finite(&b1, "block1")?;
    let down: Vec<FeatureMap> = b1.iter().map(|s| conv3d_forward(s, &params.down)).collect();
    check_finite(&down, "down")?;
    let b2 = rblock_eval(&down, &params.block2);
    check_finite(&b2, "block2")?;
    let mut bn = bn_forward_eval(&b2, &params.head_bn);
    relu_forward(&mut bn);
    check_finite(&bn, "head_bn")?;
    let pooled = gap_forward(&bn);
    let probs: Vec<f64> = head_logits(&pooled, &params.head_w, params.head_b)
        .into_iter()
        .map(sigmoid)
        .collect();
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(ModelError::NonFiniteActivation { layer: "head" });
    }
    Ok(probs)
}

/// Train-mode forward: batch statistics, running-stat update, inverted
/// dropout drawn from `rng`. Returns probabilities and the backward cache.
pub fn forward_train<R: Rng>(
    params: &mut ModelParams,
    batch: &[FeatureMap],
    dropout_p: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, ForwardCache), ModelError> {
    validate_batch(batch)?;
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(ModelError::InvalidTrainConfig(format!(
            "dropout_p {dropout_p} outside [0, 1)"
        )));
    }
    let input = batch.to_vec();
    let stem: Vec<FeatureMap> = batch
        .iter()
        .map(|s| conv3d_forward(s, &params.stem))
        .collect();
    check_finite(&stem, "stem")?;

    let run_block = |batch: &[FeatureMap],
                     p: &mut RBlockParams,
                     layer: &'static str|
     -> Result<(Vec<FeatureMap>, RBlockCache), ModelError> {
        let (mut t, bn_cache) = bn_forward_train(batch, &mut p.bn);
        let relu_pre = relu_forward(&mut t);
        let conv: Vec<FeatureMap> = t.iter().map(|s| conv3d_forward(s, &p.conv)).collect();
        let out: Vec<FeatureMap> = batch
            .iter()
            .zip(&conv)
            .map(|(x, c)| {
                let mut y = x.clone();
                for (a, b) in y.data.iter_mut().zip(&c.data) {
                    *a += b;
                }
                y
            })
            .collect();
        check_finite(&out, layer)?;
        Ok((
            out,
            RBlockCache {
                bn: bn_cache,
                relu_pre,
                relu_out: t,
            },
        ))
    };

    let (b1_out, block1) = run_block(&stem, &mut params.block1, "block1")?;
    let down_out: Vec<FeatureMap> = b1_out
        .iter()
        .map(|s| conv3d_forward(s, &params.down))
        .collect();
    check_finite(&down_out, "down")?;
    let (b2_out, block2) = run_block(&down_out, &mut params.block2, "block2")?;

    let (mut head, head_bn_cache) = bn_forward_train(&b2_out, &mut params.head_bn);
    let head_relu_pre = relu_forward(&mut head);
    check_finite(&head, "head_bn")?;
    let gap = gap_forward(&head);

    let keep = 1.0 - dropout_p;
    let dropout_mask: Vec<Vec<f64>> = gap
        .iter()
        .map(|g| {
            g.iter()
                .map(|_| {
                    if dropout_p == 0.0 || rng.gen::<f64>() >= dropout_p {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let dropped: Vec<Vec<f64>> = gap
        .iter()
        .zip(&dropout_mask)
        .map(|(g, m)| g.iter().zip(m).map(|(x, k)| x * k).collect())
        .collect();

    let probs: Vec<f64> = head_logits(&dropped, &params.head_w, params.head_b)
        .into_iter()
        .map(sigmoid)
        .collect();
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(ModelError::NonFiniteActivation { layer: "head" });
    }

    let cache = ForwardCache {
        input,
        block1,
        down_in: b1_out,
        block2,
        head_bn_cache,
        head_relu_pre,
        head_relu_out: head,
        dropout_mask,
        dropped,
        probs,
    };
    Ok((cache.probs.clone(), cache))
}

/// Probability clamp applied before logs in the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Weighted binary cross-entropy:
/// `-(1/N) sum [ w_pos y log p + w_neg (1-y) log(1-p) ]`
/// with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn wcel(probs: &[f64], labels: &[bool], w_pos: f64, w_neg: f64) -> Result<f64, ModelError> {
    if probs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(ModelError::LabelLengthMismatch {
            labels: labels.len(),
            probs: probs.len(),
        });
    }
    if !(w_pos > 0.0) || !(w_neg > 0.0) {
        return Err(ModelError::InvalidClassWeights(w_pos, w_neg));
    }
    let n = probs.len() as f64;
    let mut acc = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        acc += if y {
            w_pos * p.ln()
        } else {
            w_neg * (1.0 - p).ln()
        };
    }
    Ok(-acc / n)
}

/// Exact analytic gradients of `wcel(forward_train(...))` for every
/// learnable parameter, differentiating through the batch statistics.
/// Running statistics carry no gradient.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    labels: &[bool],
    w_pos: f64,
    w_neg: f64,
) -> Result<Gradients, ModelError> {
    if labels.len() != cache.probs.len() {
        return Err(ModelError::CacheMismatch);
    }
    if !(w_pos > 0.0) || !(w_neg > 0.0) {
        return Err(ModelError::InvalidClassWeights(w_pos, w_neg));
    }
    let n = cache.probs.len();
    let nf = n as f64;

    // dL/dlogit, loss linear in the per-class weights
    let dlogit: Vec<f64> = cache
        .probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if y {
                -w_pos * (1.0 - p) / nf
            } else {
                w_neg * p / nf
            }
        })
        .collect();

    // head affine
    let c2 = params.c2;
    let mut g_head_w = vec![0.0; c2];
    let mut g_head_b = 0.0;
    for (i, &dl) in dlogit.iter().enumerate() {
        g_head_b += dl;
        for ch in 0..c2 {
            g_head_w[ch] += dl * cache.dropped[i][ch];
        }
    }

    // dropout then GAP spread
    let keep_scale = &cache.dropout_mask;
    let spatial = cache.head_relu_out[0].spatial();
    let mut g_head: Vec<FeatureMap> = cache
        .head_relu_out
        .iter()
        .map(|s| FeatureMap::zeros(s.c, s.z, s.y, s.x))
        .collect();
    for (i, &dl) in dlogit.iter().enumerate() {
        for ch in 0..c2 {
            let g_gap = dl * params.head_w[ch] * keep_scale[i][ch];
            let per_voxel = g_gap / spatial as f64;
            let base = ch * spatial;
            for v in &mut g_head[i].data[base..base + spatial] {
                *v = per_voxel;
            }
        }
    }

    // head ReLU then BN
    relu_backward(&mut g_head, &cache.head_relu_pre);
    let head_bn = bn_backward(&g_head, &cache.head_bn_cache, &params.head_bn);

    // block2: y = x + conv(relu(bn(x)))
    let (g_b2_in, g_b2) = rblock_backward(&head_bn.input, &cache.block2, &params.block2);

    // down conv
    let mut g_down_w = vec![0.0; params.down.weights.len()];
    let mut g_down_b = vec![0.0; params.down.out_c];
    let mut g_down_in: Vec<FeatureMap> = Vec::with_capacity(n);
    for (i, g) in g_b2_in.iter().enumerate() {
        let grads = conv3d_backward(&cache.down_in[i], &params.down, g);
        accumulate(&mut g_down_w, &grads.weights);
        accumulate(&mut g_down_b, &grads.bias);
        g_down_in.push(grads.input);
    }

    // block1
    let (g_b1_in, g_b1) = rblock_backward(&g_down_in, &cache.block1, &params.block1);

    // stem conv
    let mut g_stem_w = vec![0.0; params.stem.weights.len()];
    let mut g_stem_b = vec![0.0; params.stem.out_c];
    for (i, g) in g_b1_in.iter().enumerate() {
        let grads = conv3d_backward(&cache.input[i], &params.stem, g);
        accumulate(&mut g_stem_w, &grads.weights);
        accumulate(&mut g_stem_b, &grads.bias);
    }

    let mut flat = Vec::with_capacity(params.learnable_count());
    flat.extend_from_slice(&g_stem_w);
    flat.extend_from_slice(&g_stem_b);
    flat.extend_from_slice(&g_b1.gamma);
    flat.extend_from_slice(&g_b1.beta);
    flat.extend_from_slice(&g_b1.conv_w);
    flat.extend_from_slice(&g_b1.conv_b);
    flat.extend_from_slice(&g_down_w);
    flat.extend_from_slice(&g_down_b);
    flat.extend_from_slice(&g_b2.gamma);
    flat.extend_from_slice(&g_b2.beta);
    flat.extend_from_slice(&g_b2.conv_w);
    flat.extend_from_slice(&g_b2.conv_b);
    flat.extend_from_slice(&head_bn.gamma);
    flat.extend_from_slice(&head_bn.beta);
    flat.extend_from_slice(&g_head_w);
    flat.push(g_head_b);
    debug_assert_eq!(flat.len(), params.learnable_count());
    Ok(Gradients { flat })
}

struct RBlockGrads {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    conv_w: Vec<f64>,
    conv_b: Vec<f64>,
}

/// Backward through one residual block; returns the gradient w.r.t. the
/// block input (skip path included) and the parameter gradients.
fn rblock_backward(
    grad_out: &[FeatureMap],
    cache: &RBlockCache,
    p: &RBlockParams,
) -> (Vec<FeatureMap>, RBlockGrads) {
    let mut conv_w = vec![0.0; p.conv.weights.len()];
    let mut conv_b = vec![0.0; p.conv.out_c];
    let mut g_relu: Vec<FeatureMap> = Vec::with_capacity(grad_out.len());
    for (i, g) in grad_out.iter().enumerate() {
        let grads = conv3d_backward(&cache.relu_out[i], &p.conv, g);
        accumulate(&mut conv_w, &grads.weights);
        accumulate(&mut conv_b, &grads.bias);
        g_relu.push(grads.input);
    }
    relu_backward(&mut g_relu, &cache.relu_pre);
    let bn = bn_backward(&g_relu, &cache.bn, &p.bn);
    let g_in: Vec<FeatureMap> = grad_out
        .iter()
        .zip(&bn.input)
        .map(|(skip, through)| {
            let mut g = skip.clone();
            for (a, b) in g.data.iter_mut().zip(&through.data) {
                *a += b;
            }
            g
        })
        .collect();
    (
        g_in,
        RBlockGrads {
            gamma: bn.gamma,
            beta: bn.beta,
            conv_w,
            conv_b,
        },
    )
}

fn accumulate(into: &mut [f64], from: &[f64]) {
    for (a, b) in into.iter_mut().zip(from) {
        *a += b;
    }
}

/// Continuously decayed learning rate: `lr0 * decay_rate^(step/decay_steps)`.
pub fn lr_schedule(cfg: &TrainConfig, step: usize) -> f64 {
    cfg.lr0 * cfg.decay_rate.powf(step as f64 / cfg.decay_steps as f64)
}

/// Plain SGD update `p <- p - lr * g` over every learnable parameter.
/// Running statistics are untouched; they move only during train forwards.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<(), ModelError> {
    if grads.flat.len() != params.learnable_count() {
        return Err(ModelError::ShapeMismatch(format!(
            "gradient length {} vs learnable count {}",
            grads.flat.len(),
            params.learnable_count()
        )));
    }
    let mut flat = params.learnable_flat();
    for (p, g) in flat.iter_mut().zip(&grads.flat) {
        *p -= lr * g;
    }
    params.set_learnable_flat(&flat)
}

#[cfg(test)]
mod tests;

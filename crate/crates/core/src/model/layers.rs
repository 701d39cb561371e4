//! Layer math: 3x3x3 convolutions with zero padding, batch normalization
//! over (batch, spatial) per channel, ReLU and global average pooling.
//! Everything runs in f64 with fixed summation order so results are
//! reproducible bit for bit.

use super::tensor::FeatureMap;

/// 3x3x3 convolution parameters. Weight layout is
/// `[out_c][in_c][kz][ky][kx]`, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: (usize, usize, usize),
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(in_c: usize, out_c: usize, stride: (usize, usize, usize)) -> Self {
        Self {
            in_c,
            out_c,
            stride,
            weights: vec![0.0; out_c * in_c * 27],
            bias: vec![0.0; out_c],
        }
    }

    #[inline]
    fn w_base(&self, co: usize, ci: usize) -> usize {
        (co * self.in_c + ci) * 27
    }

    pub fn out_dims(&self, z: usize, y: usize, x: usize) -> (usize, usize, usize) {
        // kernel 3, pad 1: out = floor((n - 1) / stride) + 1
        (
            (z - 1) / self.stride.0 + 1,
            (y - 1) / self.stride.1 + 1,
            (x - 1) / self.stride.2 + 1,
        )
    }
}

/// Forward convolution of one sample.
pub fn conv3d_forward(input: &FeatureMap, p: &ConvParams) -> FeatureMap {
    debug_assert_eq!(input.c, p.in_c);
    let (oz, oy, ox) = p.out_dims(input.z, input.y, input.x);
    let mut out = FeatureMap::zeros(p.out_c, oz, oy, ox);
    let (sz, sy, sx) = p.stride;
    for co in 0..p.out_c {
        let bias = p.bias[co];
        for ozi in 0..oz {
            for oyi in 0..oy {
                let out_base = out.index(co, ozi, oyi, 0);
                let row = &mut out.data[out_base..out_base + ox];
                for v in row.iter_mut() {
                    *v = bias;
                }
                for ci in 0..p.in_c {
                    let wb = p.w_base(co, ci);
                    for kz in 0..3 {
                        let iz = (ozi * sz + kz) as isize - 1;
                        if iz < 0 || iz >= input.z as isize {
                            continue;
                        }
                        for ky in 0..3 {
                            let iy = (oyi * sy + ky) as isize - 1;
                            if iy < 0 || iy >= input.y as isize {
                                continue;
                            }
                            let in_base = input.index(ci, iz as usize, iy as usize, 0);
                            let in_row = &input.data[in_base..in_base + input.x];
                            let w0 = p.weights[wb + kz * 9 + ky * 3];
                            let w1 = p.weights[wb + kz * 9 + ky * 3 + 1];
                            let w2 = p.weights[wb + kz * 9 + ky * 3 + 2];
                            for (oxi, v) in row.iter_mut().enumerate() {
                                let bx = (oxi * sx) as isize - 1;
                                let mut acc = 0.0;
                                if bx >= 0 {
                                    acc += w0 * in_row[bx as usize];
                                }
                                let x1 = bx + 1;
                                if x1 >= 0 && (x1 as usize) < input.x {
                                    acc += w1 * in_row[x1 as usize];
                                }
                                let x2 = bx + 2;
                                if (x2 as usize) < input.x {
                                    acc += w2 * in_row[x2 as usize];
                                }
                                *v += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient pieces of one sample's convolution.
pub struct ConvGrads {
    pub input: FeatureMap,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward convolution: gradients w.r.t. input, weights and bias.
pub fn conv3d_backward(input: &FeatureMap, p: &ConvParams, grad_out: &FeatureMap) -> ConvGrads {
    let (sz, sy, sx) = p.stride;
    let (oz, oy, ox) = (grad_out.z, grad_out.y, grad_out.x);
    let mut gw = vec![0.0; p.weights.len()];
    let mut gb = vec![0.0; p.out_c];
    let mut gi = FeatureMap::zeros(input.c, input.z, input.y, input.x);

    for co in 0..p.out_c {
        let mut bias_acc = 0.0;
        for ozi in 0..oz {
            for oyi in 0..oy {
                let go_base = grad_out.index(co, ozi, oyi, 0);
                let go_row = &grad_out.data[go_base..go_base + ox];
                for g in go_row {
                    bias_acc += g;
                }
                for ci in 0..p.in_c {
                    let wb = p.w_base(co, ci);
                    for kz in 0..3 {
                        let iz = (ozi * sz + kz) as isize - 1;
                        if iz < 0 || iz >= input.z as isize {
                            continue;
                        }
                        for ky in 0..3 {
                            let iy = (oyi * sy + ky) as isize - 1;
                            if iy < 0 || iy >= input.y as isize {
                                continue;
                            }
                            let in_base = input.index(ci, iz as usize, iy as usize, 0);
                            let gi_base = gi.index(ci, iz as usize, iy as usize, 0);
                            for kx in 0..3 {
                                let w = p.weights[wb + kz * 9 + ky * 3 + kx];
                                let mut w_acc = 0.0;
                                for (oxi, &g) in go_row.iter().enumerate() {
                                    let ix = (oxi * sx + kx) as isize - 1;
                                    if ix < 0 || ix >= input.x as isize {
                                        continue;
                                    }
                                    w_acc += g * input.data[in_base + ix as usize];
                                    gi.data[gi_base + ix as usize] += g * w;
                                }
                                gw[wb + kz * 9 + ky * 3 + kx] += w_acc;
                            }
                        }
                    }
                }
            }
        }
        gb[co] = bias_acc;
    }
    ConvGrads {
        input: gi,
        weights: gw,
        bias: gb,
    }
}

/// Per-channel batch-normalization parameters with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnParams {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// What the BN backward pass needs from the forward pass.
pub struct BnCache {
    /// Normalized activations, same shapes as the input batch.
    pub xhat: Vec<FeatureMap>,
    pub inv_std: Vec<f64>,
}

/// Train-mode BN over a batch: normalize by batch statistics (biased
/// variance) and update running statistics with the unbiased variance.
pub fn bn_forward_train(batch: &[FeatureMap], p: &mut BnParams) -> (Vec<FeatureMap>, BnCache) {
    let c = p.channels();
    let spatial = batch[0].spatial();
    let m = (batch.len() * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for s in batch {
            let base = ch * spatial;
            for &v in &s.data[base..base + spatial] {
                acc += v;
            }
        }
        mean[ch] = acc / m;
        let mut vacc = 0.0;
        for s in batch {
            let base = ch * spatial;
            for &v in &s.data[base..base + spatial] {
                let d = v - mean[ch];
                vacc += d * d;
            }
        }
        var[ch] = vacc / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + p.eps).sqrt()).collect();

    let mut out = Vec::with_capacity(batch.len());
    let mut xhat = Vec::with_capacity(batch.len());
    for s in batch {
        let mut h = s.clone();
        let mut o = s.clone();
        for ch in 0..c {
            let base = ch * spatial;
            for i in base..base + spatial {
                let normalized = (s.data[i] - mean[ch]) * inv_std[ch];
                h.data[i] = normalized;
                o.data[i] = p.gamma[ch] * normalized + p.beta[ch];
            }
        }
        xhat.push(h);
        out.push(o);
    }

    // unbiased variance feeds the running estimate
    let bessel = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    for ch in 0..c {
        p.running_mean[ch] = p.momentum * p.running_mean[ch] + (1.0 - p.momentum) * mean[ch];
        p.running_var[ch] =
            p.momentum * p.running_var[ch] + (1.0 - p.momentum) * var[ch] * bessel;
    }
    (out, BnCache { xhat, inv_std })
}

/// Eval-mode BN using the running statistics.
pub fn bn_forward_eval(batch: &[FeatureMap], p: &BnParams) -> Vec<FeatureMap> {
    let c = p.channels();
    let spatial = batch[0].spatial();
    let scale: Vec<f64> = (0..c)
        .map(|ch| p.gamma[ch] / (p.running_var[ch] + p.eps).sqrt())
        .collect();
    batch
        .iter()
        .map(|s| {
            let mut o = s.clone();
            for ch in 0..c {
                let base = ch * spatial;
                for i in base..base + spatial {
                    o.data[i] = scale[ch] * (s.data[i] - p.running_mean[ch]) + p.beta[ch];
                }
            }
            o
        })
        .collect()
}

/// BN gradient pieces.
pub struct BnGrads {
    pub input: Vec<FeatureMap>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Backward through train-mode BN, differentiating through the batch
/// statistics.
pub fn bn_backward(grad_out: &[FeatureMap], cache: &BnCache, p: &BnParams) -> BnGrads {
    let c = p.channels();
    let spatial = grad_out[0].spatial();
    let m = (grad_out.len() * spatial) as f64;

    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    let mut mean_g = vec![0.0; c];
    let mut mean_gx = vec![0.0; c];
    for (s, h) in grad_out.iter().zip(&cache.xhat) {
        for ch in 0..c {
            let base = ch * spatial;
            for i in base..base + spatial {
                let g = s.data[i];
                let x = h.data[i];
                g_beta[ch] += g;
                g_gamma[ch] += g * x;
            }
        }
    }
    for ch in 0..c {
        mean_g[ch] = g_beta[ch] / m;
        mean_gx[ch] = g_gamma[ch] / m;
    }

    let input = grad_out
        .iter()
        .zip(&cache.xhat)
        .map(|(s, h)| {
            let mut gi = FeatureMap::zeros(s.c, s.z, s.y, s.x);
            for ch in 0..c {
                let k = p.gamma[ch] * cache.inv_std[ch];
                let base = ch * spatial;
                for i in base..base + spatial {
                    gi.data[i] = k * (s.data[i] - mean_g[ch] - h.data[i] * mean_gx[ch]);
                }
            }
            gi
        })
        .collect();

    BnGrads {
        input,
        gamma: g_gamma,
        beta: g_beta,
    }
}

/// In-place ReLU; returns the input values for the backward mask.
pub fn relu_forward(batch: &mut [FeatureMap]) -> Vec<FeatureMap> {
    let pre = batch.to_vec();
    for s in batch.iter_mut() {
        for v in s.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    pre
}

/// Zero upstream gradients where the pre-activation was not positive.
pub fn relu_backward(grad: &mut [FeatureMap], pre: &[FeatureMap]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        for (gv, &pv) in g.data.iter_mut().zip(&p.data) {
            if pv <= 0.0 {
                *gv = 0.0;
            }
        }
    }
}

/// Global average pool: one value per (sample, channel).
pub fn gap_forward(batch: &[FeatureMap]) -> Vec<Vec<f64>> {
    batch
        .iter()
        .map(|s| {
            let spatial = s.spatial();
            (0..s.c)
                .map(|ch| {
                    let base = ch * spatial;
                    s.data[base..base + spatial].iter().sum::<f64>() / spatial as f64
                })
                .collect()
        })
        .collect()
}

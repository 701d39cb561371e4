//! Central finite-difference verification of the analytic gradients on a
//! reduced model, in full f64.

use rand::Rng;

use super::{backward, forward_train, wcel, FeatureMap, ModelError, ModelParams};
use crate::rng::derive_rng;

/// Reduced-model gradient check configuration.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub c1: usize,
    pub c2: usize,
    pub patch: (usize, usize, usize),
    pub batch: usize,
    pub eps: f64,
    pub seed: u64,
    pub dropout_p: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            c1: 2,
            c2: 4,
            patch: (8, 16, 16),
            batch: 2,
            eps: 1e-5,
            seed: 0,
            dropout_p: 0.5,
        }
    }
}

/// Worst relative error per parameter group and overall.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_group: String,
    pub per_group: Vec<(String, f64)>,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Run the check: analytic gradients from one train-mode forward/backward
/// against central differences of the loss, the dropout mask held fixed by
/// reseeding the same stream for every evaluation.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    let mut setup_rng = derive_rng(cfg.seed, "gradcheck/setup");
    let mut params = ModelParams::init(cfg.c1, cfg.c2, cfg.seed);
    // a zero head would silence every upstream gradient, so randomize it,
    // and move BN affines off their fixed point as well
    for w in params.head_w.iter_mut() {
        *w = setup_rng.gen_range(-0.5..0.5);
    }
    params.head_b = setup_rng.gen_range(-0.2..0.2);
    for bn in [
        &mut params.block1.bn,
        &mut params.block2.bn,
        &mut params.head_bn,
    ] {
        for g in bn.gamma.iter_mut() {
            *g = 1.0 + setup_rng.gen_range(-0.3..0.3);
        }
        for b in bn.beta.iter_mut() {
            *b = setup_rng.gen_range(-0.3..0.3);
        }
    }

    let (pz, py, px) = cfg.patch;
    let batch: Vec<FeatureMap> = (0..cfg.batch)
        .map(|_| {
            let mut s = FeatureMap::zeros(1, pz, py, px);
            for v in s.data.iter_mut() {
                *v = setup_rng.gen_range(0.0..1.0);
            }
            s
        })
        .collect();
    let labels: Vec<bool> = (0..cfg.batch).map(|i| i % 2 == 0).collect();
    let (w_pos, w_neg) = (1.3, 0.8);

    let loss_at = |theta: &[f64]| -> Result<f64, ModelError> {
        let mut p = params.clone();
        p.set_learnable_flat(theta)?;
        let mut dropout_rng = derive_rng(cfg.seed, "gradcheck/dropout");
        let (probs, _) = forward_train(&mut p, &batch, cfg.dropout_p, &mut dropout_rng)?;
        wcel(&probs, &labels, w_pos, w_neg)
    };

    let mut p = params.clone();
    let mut dropout_rng = derive_rng(cfg.seed, "gradcheck/dropout");
    let (probs, cache) = forward_train(&mut p, &batch, cfg.dropout_p, &mut dropout_rng)?;
    let _ = wcel(&probs, &labels, w_pos, w_neg)?;
    let analytic = backward(&p, &cache, &labels, w_pos, w_neg)?;

    let theta0 = params.learnable_flat();
    let groups = params.learnable_groups();
    let mut per_group: Vec<(String, f64)> = Vec::with_capacity(groups.len());
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (name, start, len) in groups {
        let mut group_max = 0.0f64;
        for i in start..start + len {
            let mut theta = theta0.clone();
            theta[i] = theta0[i] + cfg.eps;
            let up = loss_at(&theta)?;
            theta[i] = theta0[i] - cfg.eps;
            let down = loss_at(&theta)?;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let e = rel_err(analytic.flat()[i], numeric);
            if e > group_max {
                group_max = e;
            }
        }
        if group_max > max_rel {
            max_rel = group_max;
            worst = name.clone();
        }
        per_group.push((name, group_max));
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_group: worst,
        per_group,
    })
}

use super::*;
use crate::phantom::{CaseRecord, Label, Manifest, Split};
use crate::rng::derive_rng;
use rand::Rng;

fn random_params(c1: usize, c2: usize, seed: u64) -> ModelParams {
    let mut rng = derive_rng(seed, "test/params");
    let mut p = ModelParams::init(c1, c2, seed);
    for w in p.head_w.iter_mut() {
        *w = rng.gen_range(-0.6..0.6);
    }
    p.head_b = rng.gen_range(-0.3..0.3);
    for bn in [&mut p.block1.bn, &mut p.block2.bn, &mut p.head_bn] {
        for g in bn.gamma.iter_mut() {
            *g = 1.0 + rng.gen_range(-0.4..0.4);
        }
        for b in bn.beta.iter_mut() {
            *b = rng.gen_range(-0.3..0.3);
        }
        for m in bn.running_mean.iter_mut() {
            *m = rng.gen_range(-0.2..0.2);
        }
        for v in bn.running_var.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
    }
    p
}

fn random_batch(n: usize, dims: (usize, usize, usize), seed: u64) -> Vec<FeatureMap> {
    let mut rng = derive_rng(seed, "test/batch");
    (0..n)
        .map(|_| {
            let mut s = FeatureMap::zeros(1, dims.0, dims.1, dims.2);
            for v in s.data.iter_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            s
        })
        .collect()
}

// ---- forward ----

#[test]
fn eval_outputs_are_probabilities_and_deterministic() {
    let params = random_params(2, 4, 3);
    let batch = random_batch(3, (8, 16, 16), 3);
    let a = forward_eval(&params, &batch).unwrap();
    let b = forward_eval(&params, &batch).unwrap();
    assert_eq!(a, b);
    for p in a {
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn zero_head_outputs_exactly_half() {
    let params = ModelParams::init(4, 8, 9); // head stays zero under init
    let batch = random_batch(2, (8, 16, 16), 4);
    let probs = forward_eval(&params, &batch).unwrap();
    for p in probs {
        assert_eq!(p, 0.5);
    }
}

#[test]
fn rejects_small_and_ragged_inputs() {
    let params = ModelParams::zeros(2, 4);
    let small = random_batch(1, (4, 16, 16), 0);
    assert!(matches!(
        forward_eval(&params, &small),
        Err(ModelError::InputTooSmall(..))
    ));
    let mut ragged = random_batch(1, (8, 16, 16), 0);
    ragged.extend(random_batch(1, (8, 16, 24), 1));
    assert!(matches!(
        forward_eval(&params, &ragged),
        Err(ModelError::RaggedBatch)
    ));
    assert!(matches!(
        forward_eval(&params, &[]),
        Err(ModelError::EmptyBatch)
    ));
}

#[test]
fn train_mode_reproducible_under_fixed_rng() {
    let batch = random_batch(3, (8, 16, 16), 5);
    let mut p1 = random_params(2, 4, 6);
    let mut p2 = p1.clone();
    let (a, _) = forward_train(&mut p1, &batch, 0.5, &mut derive_rng(1, "d")).unwrap();
    let (b, _) = forward_train(&mut p2, &batch, 0.5, &mut derive_rng(1, "d")).unwrap();
    assert_eq!(a, b);
    assert_eq!(p1, p2); // running stats moved identically
}

// ---- naive forward oracle ----

/// Direct convolution on an explicitly zero-padded copy of the input.
fn naive_conv(input: &FeatureMap, p: &layers::ConvParams) -> FeatureMap {
    let (pz, py, px) = (input.z + 2, input.y + 2, input.x + 2);
    let mut padded = FeatureMap::zeros(input.c, pz, py, px);
    for c in 0..input.c {
        for z in 0..input.z {
            for y in 0..input.y {
                for x in 0..input.x {
                    let v = input.at(c, z, y, x);
                    let i = padded.index(c, z + 1, y + 1, x + 1);
                    padded.data[i] = v;
                }
            }
        }
    }
    let (oz, oy, ox) = p.out_dims(input.z, input.y, input.x);
    let mut out = FeatureMap::zeros(p.out_c, oz, oy, ox);
    for co in 0..p.out_c {
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let mut acc = p.bias[co];
                    for ci in 0..p.in_c {
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let w = p.weights
                                        [(co * p.in_c + ci) * 27 + kz * 9 + ky * 3 + kx];
                                    acc += w
                                        * padded.at(
                                            ci,
                                            z * p.stride.0 + kz,
                                            y * p.stride.1 + ky,
                                            x * p.stride.2 + kx,
                                        );
                                }
                            }
                        }
                    }
                    let i = out.index(co, z, y, x);
                    out.data[i] = acc;
                }
            }
        }
    }
    out
}

fn naive_bn_eval(s: &FeatureMap, bn: &layers::BnParams) -> FeatureMap {
    let mut out = s.clone();
    let spatial = s.spatial();
    for c in 0..s.c {
        for i in c * spatial..(c + 1) * spatial {
            let xhat = (s.data[i] - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt();
            out.data[i] = bn.gamma[c] * xhat + bn.beta[c];
        }
    }
    out
}

fn naive_relu(s: &FeatureMap) -> FeatureMap {
    let mut out = s.clone();
    for v in out.data.iter_mut() {
        *v = v.max(0.0);
    }
    out
}

fn naive_forward_eval(params: &ModelParams, sample: &FeatureMap) -> f64 {
    let stem = naive_conv(sample, &params.stem);
    let rblock = |x: &FeatureMap, b: &RBlockParams| {
        let t = naive_relu(&naive_bn_eval(x, &b.bn));
        let c = naive_conv(&t, &b.conv);
        let mut y = x.clone();
        for (a, v) in y.data.iter_mut().zip(&c.data) {
            *a += v;
        }
        y
    };
    let b1 = rblock(&stem, &params.block1);
    let down = naive_conv(&b1, &params.down);
    let b2 = rblock(&down, &params.block2);
    let head = naive_relu(&naive_bn_eval(&b2, &params.head_bn));
    let spatial = head.spatial();
    let mut logit = params.head_b;
    for c in 0..head.c {
        let mean =
            head.data[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / spatial as f64;
        logit += params.head_w[c] * mean;
    }
    1.0 / (1.0 + (-logit).exp())
}

#[test]
fn reduced_forward_matches_direct_convolution_oracle() {
    let params = random_params(2, 4, 11);
    let batch = random_batch(3, (8, 16, 16), 12);
    let fast = forward_eval(&params, &batch).unwrap();
    for (sample, &p) in batch.iter().zip(&fast) {
        let naive = naive_forward_eval(&params, sample);
        assert!(
            (p - naive).abs() < 1e-6,
            "forward mismatch: {p} vs oracle {naive}"
        );
    }
}

// ---- residual identity ----

#[test]
fn rblock_with_zero_conv_and_gamma_is_identity() {
    let mut params = random_params(2, 4, 21);
    for g in params.block1.bn.gamma.iter_mut() {
        *g = 0.0;
    }
    for b in params.block1.bn.beta.iter_mut() {
        *b = 0.0;
    }
    for w in params.block1.conv.weights.iter_mut() {
        *w = 0.0;
    }
    for b in params.block1.conv.bias.iter_mut() {
        *b = 0.0;
    }
    let batch = random_batch(2, (8, 16, 16), 22);
    let stem: Vec<FeatureMap> = batch
        .iter()
        .map(|s| layers::conv3d_forward(s, &params.stem))
        .collect();
    // eval path
    let out = rblock_eval(&stem, &params.block1);
    for (x, y) in stem.iter().zip(&out) {
        assert_eq!(x.data, y.data, "eval-mode block must be the identity");
    }
    // train path (batch statistics) must also collapse to the identity
    let mut p2 = params.clone();
    let (t, _) = layers::bn_forward_train(&stem, &mut p2.block1.bn);
    let mut t = t;
    layers::relu_forward(&mut t);
    for (x, s) in stem.iter().zip(&t) {
        let conv = layers::conv3d_forward(s, &p2.block1.conv);
        let mut y = x.clone();
        for (a, b) in y.data.iter_mut().zip(&conv.data) {
            *a += b;
        }
        assert_eq!(x.data, y.data);
    }
}

// ---- wcel ----

#[test]
fn wcel_with_unit_weights_is_bce() {
    let mut rng = derive_rng(31, "wcel");
    for _ in 0..50 {
        let n = rng.gen_range(1..20);
        let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let w = wcel(&probs, &labels, 1.0, 1.0).unwrap();
        let bce = -probs
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| if y { p.ln() } else { (1.0 - p).ln() })
            .sum::<f64>()
            / n as f64;
        assert!((w - bce).abs() < 1e-12);
    }
}

#[test]
fn wcel_examples() {
    let half = wcel(&[0.5, 0.5, 0.5], &[true, false, true], 1.0, 1.0).unwrap();
    assert!((half - std::f64::consts::LN_2).abs() < 1e-12);

    let one = wcel(&[0.8], &[true], 2.0, 1.0).unwrap();
    assert!((one - (-2.0 * 0.8f64.ln())).abs() < 1e-12);
    assert!((one - 0.446287).abs() < 1e-6);

    assert!(matches!(
        wcel(&[], &[], 1.0, 1.0),
        Err(ModelError::EmptyBatch)
    ));
    assert!(matches!(
        wcel(&[0.5], &[true], 0.0, 1.0),
        Err(ModelError::InvalidClassWeights(..))
    ));
}

#[test]
fn wcel_clamps_extreme_probabilities() {
    let loss = wcel(&[0.0, 1.0], &[true, false], 1.0, 1.0).unwrap();
    assert!(loss.is_finite());
    // both terms hit the clamp: -ln(1e-7)
    assert!((loss - (-(PROB_CLAMP.ln()))).abs() < 1e-9);
}

// ---- backward ----

#[test]
fn gradient_check_reduced_model() {
    let report = gradient_check(&GradCheckConfig::default()).unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "max relative error {} in group {}",
        report.max_rel_err,
        report.worst_group
    );
    // every parameter group was visited
    assert_eq!(report.per_group.len(), 16);
}

#[test]
fn saturated_loss_has_tiny_head_gradient() {
    let mut params = random_params(2, 4, 41);
    params.head_b = 25.0; // logits ~25 force p -> 1
    let batch = random_batch(4, (8, 16, 16), 42);
    let labels = vec![true; 4];
    let (probs, cache) =
        forward_train(&mut params, &batch, 0.0, &mut derive_rng(0, "d")).unwrap();
    assert!(probs.iter().all(|&p| p > 0.999999));
    let grads = backward(&params, &cache, &labels, 1.0, 1.0).unwrap();
    let groups = params.learnable_groups();
    let (_, start, len) = groups
        .iter()
        .find(|(n, _, _)| n == "head.w")
        .cloned()
        .unwrap();
    let norm: f64 = grads.flat()[start..start + len]
        .iter()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    assert!(norm < 1e-3, "head gradient norm {norm}");
}

#[test]
fn doubling_class_weights_doubles_every_gradient() {
    let mut params = random_params(2, 4, 51);
    let batch = random_batch(3, (8, 16, 16), 52);
    let labels = vec![true, false, true];
    let (_, cache) = forward_train(&mut params, &batch, 0.5, &mut derive_rng(3, "d")).unwrap();
    let g1 = backward(&params, &cache, &labels, 1.3, 0.7).unwrap();
    let g2 = backward(&params, &cache, &labels, 2.6, 1.4).unwrap();
    for (a, b) in g1.flat().iter().zip(g2.flat()) {
        assert_eq!(2.0 * a, *b, "gradient must scale exactly");
    }
}

// ---- schedule and SGD ----

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(&cfg, 0), 0.01);
    assert!((lr_schedule(&cfg, 100) - 0.009).abs() < 1e-12);
    let expected = 0.01 * 0.9f64.powf(2.5);
    assert!((lr_schedule(&cfg, 250) - expected).abs() < 1e-15);
    assert!((expected - 0.0076843).abs() < 1e-7);
}

#[test]
fn sgd_zero_lr_is_bitwise_noop() {
    let mut params = random_params(2, 4, 61);
    let before = params.learnable_flat();
    let batch = random_batch(2, (8, 16, 16), 62);
    let (_, cache) = forward_train(&mut params, &batch, 0.0, &mut derive_rng(0, "d")).unwrap();
    let grads = backward(&params, &cache, &[true, false], 1.0, 1.0).unwrap();
    sgd_step(&mut params, &grads, 0.0).unwrap();
    assert_eq!(params.learnable_flat(), before);
}

#[test]
fn sgd_scalar_example_and_linearity() {
    // p = 1, g = 2, lr = 0.1 -> 0.8 on the head bias
    let mut params = ModelParams::zeros(2, 4);
    params.head_b = 1.0;
    let mut flat = vec![0.0; params.learnable_count()];
    *flat.last_mut().unwrap() = 2.0;
    let grads = Gradients { flat };
    sgd_step(&mut params, &grads, 0.1).unwrap();
    assert!((params.head_b - 0.8).abs() < 1e-15);

    // two steps at lr 0.25 equal one step at 0.5 for dyadic values
    let mut twice = ModelParams::zeros(2, 4);
    twice.head_b = 1.0;
    sgd_step(&mut twice, &grads, 0.25).unwrap();
    sgd_step(&mut twice, &grads, 0.25).unwrap();
    let mut once = ModelParams::zeros(2, 4);
    once.head_b = 1.0;
    sgd_step(&mut once, &grads, 0.5).unwrap();
    assert_eq!(twice.head_b, once.head_b);
}

// ---- training ----

/// Synthetic separable manifest: loaders build patches in memory, positives
/// carry a bright centered block.
fn synthetic_manifest(n_pos: usize, n_neg: usize) -> Manifest {
    let mut cases = Vec::new();
    for i in 0..n_pos + n_neg {
        let label = if i < n_pos {
            Label::Positive
        } else {
            Label::Negative
        };
        let split = match i % 5 {
            0 | 1 | 2 => Split::Train,
            3 => Split::Val,
            _ => Split::Test,
        };
        cases.push(CaseRecord {
            case_id: format!("{}_{i:03}", label.as_str()),
            label,
            dose_mas: 57.0,
            lesion_fraction: if label == Label::Positive { 0.1 } else { 0.0 },
            path: String::new(),
            split,
        });
    }
    Manifest {
        cases,
        seed: 0,
        generator_version: "test".into(),
    }
}

fn synthetic_loader(case: &CaseRecord) -> Result<FeatureMap, ModelError> {
    let mut rng = derive_rng(17, &format!("case/{}", case.case_id));
    let mut s = FeatureMap::zeros(1, 8, 16, 16);
    for v in s.data.iter_mut() {
        *v = rng.gen_range(0.0..0.15);
    }
    if case.label == Label::Positive {
        for z in 2..6 {
            for y in 4..12 {
                for x in 4..12 {
                    let i = s.index(0, z, y, x);
                    s.data[i] = rng.gen_range(0.7..0.9);
                }
            }
        }
    }
    Ok(s)
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        c1: 2,
        c2: 4,
        lr0: 0.05,
        epochs: 5,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_loss_decreases() {
    let manifest = synthetic_manifest(20, 20);
    let a = train(&manifest, &quick_cfg(), &synthetic_loader).unwrap();
    let b = train(&manifest, &quick_cfg(), &synthetic_loader).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params.learnable_flat(), b.params.learnable_flat());
    assert_eq!(a.history.len(), 5);

    // net decrease across the first five epochs on the separable set;
    // dropout keeps individual epochs from being strictly monotone
    let first = a.history.first().unwrap().train_loss;
    let last = a.history.last().unwrap().train_loss;
    assert!(
        last < first,
        "loss should fall on the separable set: {:?}",
        a.history
    );
}

#[test]
fn balanced_split_gives_unit_weights() {
    let manifest = synthetic_manifest(20, 20);
    let outcome = train(&manifest, &quick_cfg(), &synthetic_loader).unwrap();
    // the train split carries 12 positives and 12 negatives
    assert_eq!(outcome.class_weights, (1.0, 1.0));
}

#[test]
fn mosmed_shaped_class_weights() {
    let (w_pos, w_neg) = default_class_weights(856, 254);
    assert_eq!(w_pos, 1110.0 / 1712.0);
    assert_eq!(w_neg, 1110.0 / 508.0);
    assert!((w_pos - 0.6483).abs() < 1e-4);
    assert!((w_neg - 2.1850).abs() < 1e-4);
}

#[test]
fn single_class_val_split_is_rejected() {
    let mut manifest = synthetic_manifest(10, 10);
    for c in manifest.cases.iter_mut() {
        if c.split == Split::Val && c.label == Label::Negative {
            c.split = Split::Test;
        }
    }
    assert!(matches!(
        train(&manifest, &quick_cfg(), &synthetic_loader),
        Err(ModelError::SingleClassSplit { split: "val" })
    ));
}

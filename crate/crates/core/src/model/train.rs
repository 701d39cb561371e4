//! The training loop: seeded shuffling, W-CEL + SGD with exponential decay,
//! per-epoch validation AUC, best-epoch model selection.

use rand::Rng;

use super::{
    backward, forward_eval, forward_train, lr_schedule, sgd_step, wcel, FeatureMap, ModelError,
    ModelParams,
};
use crate::metrics::{auc, ScoredLabels};
use crate::phantom::{CaseRecord, Label, Manifest, Split};
use crate::rng::derive_rng;

/// Training hyperparameters. One seed governs init, shuffling and dropout.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub c1: usize,
    pub c2: usize,
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_p: f64,
    /// Explicit (w_pos, w_neg); when absent the inverse-frequency weights
    /// `N/(2 N_pos)`, `N/(2 N_neg)` are computed from the train split.
    pub class_weights: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c1: super::DEFAULT_C1,
            c2: super::DEFAULT_C2,
            lr0: 0.01,
            decay_rate: 0.9,
            decay_steps: 100,
            epochs: 20,
            batch_size: 4,
            dropout_p: 0.5,
            class_weights: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidTrainConfig(m));
        if self.c1 == 0 || self.c2 == 0 {
            return fail(format!("channel widths ({}, {}) must be positive", self.c1, self.c2));
        }
        if !(self.lr0 > 0.0) {
            return fail(format!("lr0 {} must be positive", self.lr0));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return fail(format!("decay_rate {} outside (0, 1]", self.decay_rate));
        }
        if self.decay_steps == 0 {
            return fail("decay_steps must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if let Some((wp, wn)) = self.class_weights {
            if !(wp > 0.0 && wn > 0.0) {
                return Err(ModelError::InvalidClassWeights(wp, wn));
            }
        }
        Ok(())
    }
}

/// Inverse-frequency class weights normalized to mean 1:
/// `w_pos = N / (2 N_pos)`, `w_neg = N / (2 N_neg)`.
pub fn default_class_weights(n_pos: usize, n_neg: usize) -> (f64, f64) {
    let n = (n_pos + n_neg) as f64;
    (n / (2.0 * n_pos as f64), n / (2.0 * n_neg as f64))
}

/// One training epoch's record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub lr: f64,
}

/// Training result: best-validation-AUC parameters plus the full history.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub class_weights: (f64, f64),
}

/// A loaded, preprocessed case ready for the model.
pub struct PreprocessedCase {
    pub features: FeatureMap,
    pub label: bool,
}

fn cases_of<'a>(manifest: &'a Manifest, split: Split) -> Vec<&'a CaseRecord> {
    manifest.cases.iter().filter(|c| c.split == split).collect()
}

fn check_both_classes(cases: &[&CaseRecord], split: &'static str) -> Result<(usize, usize), ModelError> {
    if cases.is_empty() {
        return Err(ModelError::EmptySplit { split });
    }
    let n_pos = cases.iter().filter(|c| c.label == Label::Positive).count();
    let n_neg = cases.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ModelError::SingleClassSplit { split });
    }
    Ok((n_pos, n_neg))
}

/// Train from scratch on the manifest's train split, validating on the val
/// split each epoch. `loader` maps a case record to a preprocessed patch
/// (the clip -> normalize -> patch chain plus file I/O live there).
pub fn train(
    manifest: &Manifest,
    cfg: &TrainConfig,
    loader: &(dyn Fn(&CaseRecord) -> Result<FeatureMap, ModelError> + Sync),
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let train_cases = cases_of(manifest, Split::Train);
    let val_cases = cases_of(manifest, Split::Val);
    let (n_pos, n_neg) = check_both_classes(&train_cases, "train")?;
    check_both_classes(&val_cases, "val")?;

    let (w_pos, w_neg) = cfg
        .class_weights
        .unwrap_or_else(|| default_class_weights(n_pos, n_neg));

    let mut params = ModelParams::init(cfg.c1, cfg.c2, cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        let mut shuffle_rng = derive_rng(cfg.seed, &format!("shuffle/{epoch}"));
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }

        let mut loss_acc = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                batch.push(loader(train_cases[i])?);
                labels.push(train_cases[i].label == Label::Positive);
            }
            let mut dropout_rng = derive_rng(cfg.seed, &format!("dropout/{epoch}/{batch_idx}"));
            let (probs, cache) =
                forward_train(&mut params, &batch, cfg.dropout_p, &mut dropout_rng)?;
            let loss = wcel(&probs, &labels, w_pos, w_neg)?;
            if !loss.is_finite() {
                return Err(ModelError::TrainingDiverged { epoch });
            }
            loss_acc += loss * chunk.len() as f64;
            let grads = backward(&params, &cache, &labels, w_pos, w_neg)?;
            let lr = lr_schedule(cfg, step);
            sgd_step(&mut params, &grads, lr)?;
            step += 1;
        }
        let train_loss = loss_acc / train_cases.len() as f64;

        let val_auc = validation_auc(&params, &val_cases, cfg.batch_size, loader)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
            lr: lr_schedule(cfg, step),
        });
        let improved = best.as_ref().map(|(_, _, b)| val_auc > *b).unwrap_or(true);
        if improved {
            best = Some((params.clone(), epoch, val_auc));
        }
    }

    let (best_params, best_epoch, best_val_auc) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_val_auc,
        class_weights: (w_pos, w_neg),
    })
}

fn validation_auc(
    params: &ModelParams,
    cases: &[&CaseRecord],
    batch_size: usize,
    loader: &(dyn Fn(&CaseRecord) -> Result<FeatureMap, ModelError> + Sync),
) -> Result<f64, ModelError> {
    let mut scores = Vec::with_capacity(cases.len());
    let mut labels = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(batch_size.max(1)) {
        let mut batch = Vec::with_capacity(chunk.len());
        for case in chunk {
            batch.push(loader(case)?);
            labels.push(case.label == Label::Positive);
        }
        scores.extend(forward_eval(params, &batch)?);
    }
    let scored = ScoredLabels::new(scores, labels)
        .map_err(|e| ModelError::InvalidTrainConfig(e.to_string()))?;
    auc(&scored).map_err(|_| ModelError::SingleClassSplit { split: "val" })
}

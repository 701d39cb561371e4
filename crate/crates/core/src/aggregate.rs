//! Patient-level score construction from per-slice outputs: the mean of each
//! patient's top-fraction slice scores.

use thiserror::Error;

/// Default slice fraction entering the patient score.
pub const TOP_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("patient {0:?} has no slice scores")]
    EmptySlices(String),
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("slice score {value} of patient {patient} outside [0, 1]")]
    ScoreOutOfRange { patient: String, value: f64 },
}

/// Ordered per-slice probabilities for one patient.
#[derive(Debug, Clone)]
pub struct SliceScores {
    pub patient_id: String,
    pub scores: Vec<f64>,
}

impl SliceScores {
    pub fn new(patient_id: impl Into<String>, scores: Vec<f64>) -> Result<Self, AggregateError> {
        let patient_id = patient_id.into();
        if scores.is_empty() {
            return Err(AggregateError::EmptySlices(patient_id));
        }
        for &s in &scores {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(AggregateError::ScoreOutOfRange {
                    patient: patient_id,
                    value: s,
                });
            }
        }
        Ok(Self { patient_id, scores })
    }
}

/// Number of slices entering the patient score: `max(1, ceil(fraction * n))`.
///
/// The product is computed with a small epsilon backoff so that exact
/// rationals like 0.1 * 10 do not round up to 2 through binary float error.
pub fn top_k(fraction: f64, n: usize) -> usize {
    let k = (fraction * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Mean of the `k` largest slice scores, `k = max(1, ceil(fraction * n))`.
///
/// Invariant under permutation of the slice order; ties at the cutoff are
/// resolved by the total order on (score, slice index), which cannot change
/// the mean.
pub fn patient_score_top_fraction(s: &SliceScores, fraction: f64) -> Result<f64, AggregateError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AggregateError::InvalidFraction(fraction));
    }
    if s.scores.is_empty() {
        return Err(AggregateError::EmptySlices(s.patient_id.clone()));
    }
    let mut ranked: Vec<(f64, usize)> = s.scores.iter().copied().zip(0..).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let k = top_k(fraction, ranked.len());
    Ok(ranked[..k].iter().map(|(v, _)| v).sum::<f64>() / k as f64)
}

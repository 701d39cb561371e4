//! ROC analysis at the patient level: curve construction, Mann-Whitney AUC
//! with the 0.5 tie convention, DeLong variance and Wald confidence
//! intervals, and a paired DeLong test for comparing two score sets on the
//! same cases.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores ({scores}) and labels ({labels}) have different lengths")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("both classes required: got {n_pos} positives and {n_neg} negatives")]
    SingleClass { n_pos: usize, n_neg: usize },
    #[error("DeLong variance needs at least 2 cases per class: got {n_pos} positives and {n_neg} negatives")]
    TooFewPerClass { n_pos: usize, n_neg: usize },
    #[error("alpha must lie strictly inside (0, 1), got {0}")]
    InvalidAlpha(f64),
}

/// Parallel per-case scores and binary labels.
#[derive(Debug, Clone)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricsError::Empty);
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricsError::NonFiniteScore(i));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.labels.len() - self.n_pos()
    }

    fn require_both_classes(&self) -> Result<(usize, usize), MetricsError> {
        let (n_pos, n_neg) = (self.n_pos(), self.n_neg());
        if n_pos == 0 || n_neg == 0 {
            return Err(MetricsError::SingleClass { n_pos, n_neg });
        }
        Ok((n_pos, n_neg))
    }

    fn split_scores(&self) -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            if l {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        (pos, neg)
    }
}

/// AUC with DeLong variance, confidence interval and the ROC polyline.
#[derive(Debug, Clone)]
pub struct RocResult {
    pub auc: f64,
    pub variance: f64,
    pub ci: (f64, f64),
    pub points: Vec<(f64, f64)>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Mann-Whitney kernel: 1 when the positive outranks the negative, 0.5 on a
/// tie, 0 otherwise.
#[inline]
fn psi(pos: f64, neg: f64) -> f64 {
    if pos > neg {
        1.0
    } else if pos == neg {
        0.5
    } else {
        0.0
    }
}

/// ROC polyline with one threshold per distinct score, descending, tie
/// groups collapsed, endpoints (0,0) and (1,1) included.
pub fn roc_points(d: &ScoredLabels) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (n_pos, n_neg) = d.require_both_classes()?;
    let mut order: Vec<usize> = (0..d.scores.len()).collect();
    order.sort_by(|&a, &b| d.scores[b].partial_cmp(&d.scores[a]).unwrap());

    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = d.scores[order[i]];
        while i < order.len() && d.scores[order[i]] == threshold {
            if d.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half. Computed by midranks; agrees exactly
/// with direct pair counting.
pub fn auc(d: &ScoredLabels) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = d.require_both_classes()?;
    let n = d.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d.scores[a].partial_cmp(&d.scores[b]).unwrap());

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && d.scores[order[j]] == d.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if d.labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn structural_components(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let v10: Vec<f64> = pos
        .iter()
        .map(|&p| neg.iter().map(|&q| psi(p, q)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01: Vec<f64> = neg
        .iter()
        .map(|&q| pos.iter().map(|&p| psi(p, q)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01)
}

fn sample_variance(values: &[f64], mean: f64) -> f64 {
    let n = values.len();
    debug_assert!(n >= 2);
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
}

fn sample_covariance(a: &[f64], b: &[f64], mean_a: f64, mean_b: f64) -> f64 {
    let n = a.len();
    debug_assert!(n >= 2);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - mean_a) * (y - mean_b))
        .sum::<f64>()
        / (n - 1) as f64
}

/// AUC with DeLong variance and a Wald `1 - alpha` confidence interval
/// clamped to [0, 1].
pub fn delong_ci(d: &ScoredLabels, alpha: f64) -> Result<RocResult, MetricsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MetricsError::InvalidAlpha(alpha));
    }
    let (n_pos, n_neg) = d.require_both_classes()?;
    if n_pos < 2 || n_neg < 2 {
        return Err(MetricsError::TooFewPerClass { n_pos, n_neg });
    }
    let auc_value = auc(d)?;
    let points = roc_points(d)?;
    let (pos, neg) = d.split_scores();
    let (v10, v01) = structural_components(&pos, &neg);
    let variance = sample_variance(&v10, auc_value) / n_pos as f64
        + sample_variance(&v01, auc_value) / n_neg as f64;
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - alpha / 2.0);
    let half = z * variance.max(0.0).sqrt();
    let ci = (
        (auc_value - half).clamp(0.0, 1.0),
        (auc_value + half).clamp(0.0, 1.0),
    );
    Ok(RocResult {
        auc: auc_value,
        variance,
        ci,
        points,
        n_pos,
        n_neg,
    })
}

/// Result of a paired DeLong comparison of two score sets on the same cases.
#[derive(Debug, Clone, Copy)]
pub struct PairedAucTest {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_two_sided: f64,
}

/// Paired DeLong test: z = (auc_a - auc_b) / sqrt(var_a + var_b - 2 cov),
/// covariance taken over paired structural components.
pub fn delong_paired_test(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
) -> Result<PairedAucTest, MetricsError> {
    if scores_a.len() != scores_b.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores_a.len(),
            labels: scores_b.len(),
        });
    }
    let a = ScoredLabels::new(scores_a.to_vec(), labels.to_vec())?;
    let b = ScoredLabels::new(scores_b.to_vec(), labels.to_vec())?;
    let (n_pos, n_neg) = a.require_both_classes()?;
    if n_pos < 2 || n_neg < 2 {
        return Err(MetricsError::TooFewPerClass { n_pos, n_neg });
    }
    let auc_a = auc(&a)?;
    let auc_b = auc(&b)?;
    let (pos_a, neg_a) = a.split_scores();
    let (pos_b, neg_b) = b.split_scores();
    let (v10_a, v01_a) = structural_components(&pos_a, &neg_a);
    let (v10_b, v01_b) = structural_components(&pos_b, &neg_b);

    let var_a =
        sample_variance(&v10_a, auc_a) / n_pos as f64 + sample_variance(&v01_a, auc_a) / n_neg as f64;
    let var_b =
        sample_variance(&v10_b, auc_b) / n_pos as f64 + sample_variance(&v01_b, auc_b) / n_neg as f64;
    let cov = sample_covariance(&v10_a, &v10_b, auc_a, auc_b) / n_pos as f64
        + sample_covariance(&v01_a, &v01_b, auc_a, auc_b) / n_neg as f64;

    let var_diff = (var_a + var_b - 2.0 * cov).max(0.0);
    let diff = auc_a - auc_b;
    let z = if diff == 0.0 {
        0.0
    } else if var_diff == 0.0 {
        f64::INFINITY.copysign(diff)
    } else {
        diff / var_diff.sqrt()
    };
    let normal = Normal::new(0.0, 1.0).unwrap();
    let p_two_sided = if z.is_infinite() {
        0.0
    } else {
        2.0 * (1.0 - normal.cdf(z.abs()))
    };
    Ok(PairedAucTest {
        auc_a,
        auc_b,
        z,
        p_two_sided,
    })
}

/// Trapezoidal area under an ROC polyline.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

//! The evaluation harness: patient-level splits, end-to-end case scoring,
//! dose and extent stratification, report emission.

mod pipeline;
mod report;

pub use pipeline::{make_case_loader, preprocess_volume, PreprocessConfig};
pub use report::{
    emit_report, read_case_scores, read_report_json, round_sig, write_case_scores, Report,
    ReportJson, StratumJson,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{patient_score_top_fraction, AggregateError, SliceScores};
use crate::metrics::{delong_ci, MetricsError, RocResult, ScoredLabels};
use crate::model::{forward_eval, ModelError, ModelParams};
use crate::phantom::{CaseRecord, Label, Manifest, PhantomError, Split};
use crate::rng::derive_rng;

use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios((f64, f64, f64)),
    #[error("need at least 3 patients to split, got {0}")]
    TooFewPatients(usize),
    #[error("stratum {stratum:?} is single-class ({n_pos} positives, {n_neg} negatives)")]
    SingleClassStratum {
        stratum: String,
        n_pos: usize,
        n_neg: usize,
    },
    #[error("empty positive stratum {stratum:?}")]
    EmptyPositiveStratum { stratum: String },
    #[error("case {case_id}: dose {dose} not among configured dose levels")]
    DoseNotConfigured { case_id: String, dose: f64 },
    #[error("no cases selected for evaluation (split filter {0:?})")]
    NoCasesSelected(Option<Split>),
    #[error("case {case_id}: missing slice scores")]
    MissingSliceScores { case_id: String },
    #[error("slice-score table {path}, row {row}: {message}")]
    MalformedScoreRow {
        path: String,
        row: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
}

/// Evaluation configuration echoed into every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub extent_threshold: f64,
    pub dose_levels: Vec<f64>,
    pub top_fraction: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            extent_threshold: 0.0265,
            dose_levels: vec![28.5, 57.0],
            top_fraction: 0.10,
            alpha: 0.05,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), TrialError> {
        if !(self.extent_threshold > 0.0 && self.extent_threshold < 1.0) {
            return Err(TrialError::InvalidConfig(format!(
                "extent_threshold {} outside (0, 1)",
                self.extent_threshold
            )));
        }
        if self.dose_levels.is_empty() {
            return Err(TrialError::InvalidConfig("no dose levels".into()));
        }
        for (i, &d) in self.dose_levels.iter().enumerate() {
            if !(d > 0.0) || !d.is_finite() {
                return Err(TrialError::InvalidConfig(format!("dose level {d} invalid")));
            }
            if self.dose_levels[..i].contains(&d) {
                return Err(TrialError::InvalidConfig(format!("duplicate dose level {d}")));
            }
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(TrialError::InvalidConfig(format!(
                "top_fraction {} outside (0, 1]",
                self.top_fraction
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(TrialError::InvalidConfig(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// One evaluated case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseScore {
    pub case_id: String,
    pub label: Label,
    pub score: f64,
    pub dose_mas: f64,
    pub lesion_fraction: f64,
}

/// ROC analysis of one stratum. `key` is the descriptive form
/// (e.g. `dose=28.5`, `extent<0.0265`); `name` is the short label used in
/// report files (e.g. `dose_28.5`, `extent_lower`).
#[derive(Debug, Clone)]
pub struct StratumReport {
    pub key: String,
    pub name: String,
    pub roc: RocResult,
}

/// Assign train/val/test splits by patient: seeded shuffle, `floor(r * N)`
/// patients to train and val, the remainder to test.
pub fn split_by_patient(
    manifest: &Manifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Manifest, TrialError> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(TrialError::BadRatios(ratios));
    }
    let mut patients: Vec<&str> = manifest.cases.iter().map(|c| c.case_id.as_str()).collect();
    patients.sort_unstable();
    patients.dedup();
    if patients.len() < 3 {
        return Err(TrialError::TooFewPatients(patients.len()));
    }
    let mut rng = derive_rng(seed, "split");
    for i in (1..patients.len()).rev() {
        patients.swap(i, rng.gen_range(0..=i));
    }
    let n = patients.len();
    let n_train = (rt * n as f64).floor() as usize;
    let n_val = (rv * n as f64).floor() as usize;
    let assignment: BTreeMap<&str, Split> = patients
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (p, split)
        })
        .collect();
    let mut out = manifest.clone();
    for case in out.cases.iter_mut() {
        case.split = assignment[case.case_id.as_str()];
    }
    Ok(out)
}

fn selected_cases<'a>(
    manifest: &'a Manifest,
    split: Option<Split>,
) -> Result<Vec<&'a CaseRecord>, TrialError> {
    let mut cases: Vec<&CaseRecord> = manifest
        .cases
        .iter()
        .filter(|c| split.map(|s| c.split == s).unwrap_or(true))
        .collect();
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    if cases.is_empty() {
        return Err(TrialError::NoCasesSelected(split));
    }
    Ok(cases)
}

/// Score every case of the selected split with the model: read the volume,
/// run the preprocessing chain, one eval-mode forward per case. Cases are
/// processed in parallel and returned ordered by case id.
pub fn evaluate_cases(
    params: &ModelParams,
    manifest: &Manifest,
    manifest_path: &Path,
    split: Option<Split>,
    pre: &PreprocessConfig,
) -> Result<Vec<CaseScore>, TrialError> {
    let cases = selected_cases(manifest, split)?;
    let loader = make_case_loader(manifest_path.to_path_buf(), pre.clone());
    cases
        .par_iter()
        .map(|case| {
            let features = loader(case)?;
            let probs = forward_eval(params, &[features])?;
            Ok(CaseScore {
                case_id: case.case_id.clone(),
                label: case.label,
                score: probs[0],
                dose_mas: case.dose_mas,
                lesion_fraction: case.lesion_fraction,
            })
        })
        .collect()
}

/// Parse a slice-score table: CSV `patient_id,slice_index,score`, scores in
/// [0, 1]. Slices are ordered by slice index within each patient; patients
/// come out sorted by id.
pub fn import_slice_scores(path: &Path) -> Result<Vec<SliceScores>, TrialError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrialError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut rows: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if i == 0 {
            if line.trim() != "patient_id,slice_index,score" {
                return Err(TrialError::MalformedScoreRow {
                    path: path.display().to_string(),
                    row,
                    message: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| TrialError::MalformedScoreRow {
            path: path.display().to_string(),
            row,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(malformed(format!("expected 3 fields, got {}", fields.len())));
        }
        let patient = fields[0].trim();
        if patient.is_empty() {
            return Err(malformed("empty patient_id".into()));
        }
        let slice_index: u64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| malformed(format!("bad slice_index {:?}", fields[1])))?;
        let score: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| malformed(format!("bad score {:?}", fields[2])))?;
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(malformed(format!("score {score} outside [0, 1]")));
        }
        rows.entry(patient.to_string())
            .or_default()
            .push((slice_index, score));
    }
    rows.into_iter()
        .map(|(patient, mut slices)| {
            slices.sort_by_key(|&(idx, _)| idx);
            let scores: Vec<f64> = slices.into_iter().map(|(_, s)| s).collect();
            SliceScores::new(patient, scores).map_err(TrialError::from)
        })
        .collect()
}

/// Join slice scores onto manifest cases and aggregate each patient with the
/// top-fraction rule. Every selected case must appear in the table; table
/// patients outside the selection are ignored.
pub fn aggregate_slice_scores(
    tables: &[SliceScores],
    manifest: &Manifest,
    split: Option<Split>,
    top_fraction: f64,
) -> Result<Vec<CaseScore>, TrialError> {
    let cases = selected_cases(manifest, split)?;
    let by_patient: BTreeMap<&str, &SliceScores> = tables
        .iter()
        .map(|t| (t.patient_id.as_str(), t))
        .collect();
    cases
        .iter()
        .map(|case| {
            let slices =
                by_patient
                    .get(case.case_id.as_str())
                    .ok_or_else(|| TrialError::MissingSliceScores {
                        case_id: case.case_id.clone(),
                    })?;
            let score = patient_score_top_fraction(slices, top_fraction)?;
            Ok(CaseScore {
                case_id: case.case_id.clone(),
                label: case.label,
                score,
                dose_mas: case.dose_mas,
                lesion_fraction: case.lesion_fraction,
            })
        })
        .collect()
}

fn scored_labels(scores: &[&CaseScore]) -> Result<ScoredLabels, MetricsError> {
    ScoredLabels::new(
        scores.iter().map(|c| c.score).collect(),
        scores.iter().map(|c| c.label == Label::Positive).collect(),
    )
}

fn stratum_roc(
    key: &str,
    name: &str,
    members: &[&CaseScore],
    alpha: f64,
) -> Result<StratumReport, TrialError> {
    let n_pos = members.iter().filter(|c| c.label == Label::Positive).count();
    let n_neg = members.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrialError::SingleClassStratum {
            stratum: key.to_string(),
            n_pos,
            n_neg,
        });
    }
    let d = scored_labels(members)?;
    let roc = delong_ci(&d, alpha)?;
    Ok(StratumReport {
        key: key.to_string(),
        name: name.to_string(),
        roc,
    })
}

/// Whole-selection ROC.
pub fn overall_roc(scores: &[CaseScore], cfg: &EvalConfig) -> Result<StratumReport, TrialError> {
    let members: Vec<&CaseScore> = scores.iter().collect();
    stratum_roc("overall", "overall", &members, cfg.alpha)
}

/// One ROC per configured dose level over that level's cases only. Levels
/// with no cases are skipped; a populated single-class level is an error.
pub fn stratify_by_dose(
    scores: &[CaseScore],
    cfg: &EvalConfig,
) -> Result<Vec<StratumReport>, TrialError> {
    cfg.validate()?;
    for c in scores {
        if !cfg.dose_levels.contains(&c.dose_mas) {
            return Err(TrialError::DoseNotConfigured {
                case_id: c.case_id.clone(),
                dose: c.dose_mas,
            });
        }
    }
    let mut reports = Vec::new();
    for &dose in &cfg.dose_levels {
        let members: Vec<&CaseScore> = scores.iter().filter(|c| c.dose_mas == dose).collect();
        if members.is_empty() {
            continue;
        }
        reports.push(stratum_roc(
            &format!("dose={dose}"),
            &format!("dose_{dose}"),
            &members,
            cfg.alpha,
        )?);
    }
    Ok(reports)
}

/// Partition positives at the extent threshold (`>=` goes to "higher") and
/// score each positive stratum against the full negative set.
pub fn stratify_by_extent(
    scores: &[CaseScore],
    cfg: &EvalConfig,
) -> Result<Vec<StratumReport>, TrialError> {
    cfg.validate()?;
    let negatives: Vec<&CaseScore> = scores
        .iter()
        .filter(|c| c.label == Label::Negative)
        .collect();
    let lower_key = format!("extent<{}", cfg.extent_threshold);
    let higher_key = format!("extent>={}", cfg.extent_threshold);
    let mut reports = Vec::new();
    for (key, name, lower) in [
        (lower_key, "extent_lower", true),
        (higher_key, "extent_higher", false),
    ] {
        let positives: Vec<&CaseScore> = scores
            .iter()
            .filter(|c| {
                c.label == Label::Positive
                    && if lower {
                        c.lesion_fraction < cfg.extent_threshold
                    } else {
                        c.lesion_fraction >= cfg.extent_threshold
                    }
            })
            .collect();
        if positives.is_empty() {
            return Err(TrialError::EmptyPositiveStratum { stratum: key });
        }
        let mut members = positives;
        members.extend(negatives.iter().copied());
        reports.push(stratum_roc(&key, name, &members, cfg.alpha)?);
    }
    Ok(reports)
}

//! Report emission: `report.json` with config echo and every stratified
//! result at 6 significant digits, plus one `roc_<stratum>.csv` per stratum,
//! byte-identical across reruns of the same inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CaseScore, EvalConfig, StratumReport, TrialError};
use crate::phantom::Label;

/// Everything `emit_report` writes.
#[derive(Debug, Clone)]
pub struct Report {
    pub config: EvalConfig,
    pub overall: StratumReport,
    pub by_dose: Vec<StratumReport>,
    pub by_extent: Vec<StratumReport>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct StratumJson {
    pub name: String,
    pub stratum_key: String,
    pub auc: f64,
    pub variance: f64,
    pub ci: [f64; 2],
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct ReportJson {
    pub config: EvalConfig,
    pub overall: StratumJson,
    pub by_dose: Vec<StratumJson>,
    pub by_extent: Vec<StratumJson>,
}

/// Round to 6 significant digits; report numbers are serialized at this
/// precision and parse back exactly.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor();
    let scale = 10f64.powf(5.0 - magnitude);
    (x * scale).round() / scale
}

fn stratum_json(s: &StratumReport) -> StratumJson {
    StratumJson {
        name: s.name.clone(),
        stratum_key: s.key.clone(),
        auc: round_sig(s.roc.auc),
        variance: round_sig(s.roc.variance),
        ci: [round_sig(s.roc.ci.0), round_sig(s.roc.ci.1)],
        n_pos: s.roc.n_pos,
        n_neg: s.roc.n_neg,
    }
}

fn sanitize(key: &str) -> String {
    key.chars()
        .map(|c| if c.is_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn io_err(path: &Path, source: std::io::Error) -> TrialError {
    TrialError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `report.json` and one ROC CSV per stratum into `out_dir`. Returns
/// the written paths, `report.json` first.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>, TrialError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let json = ReportJson {
        config: report.config.clone(),
        overall: stratum_json(&report.overall),
        by_dose: report.by_dose.iter().map(stratum_json).collect(),
        by_extent: report.by_extent.iter().map(stratum_json).collect(),
    };
    let mut written = Vec::new();
    let report_path = out_dir.join("report.json");
    let mut body = serde_json::to_string_pretty(&json).expect("report serializes");
    body.push('\n');
    std::fs::write(&report_path, body).map_err(|e| io_err(&report_path, e))?;
    written.push(report_path);

    let strata = std::iter::once(&report.overall)
        .chain(&report.by_dose)
        .chain(&report.by_extent);
    for s in strata {
        let path = out_dir.join(format!("roc_{}.csv", sanitize(&s.name)));
        let mut csv = String::from("fpr,tpr\n");
        for (fpr, tpr) in &s.roc.points {
            csv.push_str(&format!("{fpr},{tpr}\n"));
        }
        std::fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Write per-case scores as CSV `case_id,label,score,dose_mas,lesion_fraction`.
pub fn write_case_scores(scores: &[CaseScore], path: &Path) -> Result<(), TrialError> {
    let mut buf = String::from("case_id,label,score,dose_mas,lesion_fraction\n");
    for s in scores {
        buf.push_str(&format!(
            "{},{},{},{},{}\n",
            s.case_id,
            s.label.as_str(),
            s.score,
            s.dose_mas,
            s.lesion_fraction
        ));
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Read a per-case score table written by [`write_case_scores`].
pub fn read_case_scores(path: &Path) -> Result<Vec<CaseScore>, TrialError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let malformed = |message: String| TrialError::MalformedScoreRow {
            path: path.display().to_string(),
            row,
            message,
        };
        if i == 0 {
            if line.trim() != "case_id,label,score,dose_mas,lesion_fraction" {
                return Err(malformed(format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(malformed(format!("expected 5 fields, got {}", fields.len())));
        }
        let label = Label::parse(fields[1]).map_err(|e| malformed(e.to_string()))?;
        let parse = |i: usize, name: &str| -> Result<f64, TrialError> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| malformed(format!("bad {name} {:?}", fields[i])))
        };
        let score = parse(2, "score")?;
        if !(0.0..=1.0).contains(&score) {
            return Err(malformed(format!("score {score} outside [0, 1]")));
        }
        out.push(CaseScore {
            case_id: fields[0].to_string(),
            label,
            score,
            dose_mas: parse(3, "dose_mas")?,
            lesion_fraction: parse(4, "lesion_fraction")?,
        });
    }
    Ok(out)
}

/// Parse a `report.json` produced by [`emit_report`].
pub fn read_report_json(path: &Path) -> Result<ReportJson, TrialError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| TrialError::InvalidConfig(format!("{e}")))
}

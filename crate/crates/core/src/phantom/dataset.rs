//! Dataset generation and the manifest container (CSV + JSON sidecar).

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_anatomy, insert_lesions, simulate_ct_noise, CaseRecord, Label, NoiseModel, PhantomError,
    PhantomSpec, Split,
};
use crate::rng::derive_rng;
use crate::volume::{write_mask, write_volume};
use crate::GENERATOR_VERSION;

/// One generation request row: `n` cases of `label` imaged at `dose_mas`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub label: Label,
    pub dose_mas: f64,
    pub n: usize,
}

/// Truncated log-normal over lesion fractions for positive cases.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LesionFractionDist {
    pub median: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for LesionFractionDist {
    fn default() -> Self {
        // median 0.04 with sigma 0.7 puts the mode near the 2.65% extent
        // threshold; truncation keeps both strata populated
        Self {
            median: 0.04,
            sigma: 0.7,
            lo: 0.002,
            hi: 0.25,
        }
    }
}

impl LesionFractionDist {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let normal = rand_distr::Normal::new(self.median.ln(), self.sigma).expect("valid dist");
        loop {
            let x = rand_distr::Distribution::sample(&normal, rng).exp();
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
    }
}

/// Generation switches beyond the phantom spec.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenOptions {
    /// Reuse the same anatomy (and lesions) across dose levels so dose
    /// renderings are paired; set false for independent anatomies per case.
    pub paired_doses: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { paired_doses: true }
    }
}

/// Ordered case collection plus generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub cases: Vec<CaseRecord>,
    pub seed: u64,
    pub generator_version: String,
}

/// JSON sidecar written next to the manifest CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSidecar {
    pub seed: u64,
    pub generator_version: String,
    pub counts: Vec<CountRow>,
}

const MANIFEST_CSV: &str = "manifest.csv";
const MANIFEST_JSON: &str = "manifest.json";

fn fmt_dose(dose: f64) -> String {
    format!("{dose}")
}

fn io_err(path: &Path, source: std::io::Error) -> PhantomError {
    PhantomError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Manifest {
    /// Write `manifest.csv` and its `manifest.json` sidecar into `dir`.
    pub fn write(&self, dir: &Path, counts: &[CountRow]) -> Result<(), PhantomError> {
        let csv_path = dir.join(MANIFEST_CSV);
        let mut buf = String::from("case_id,label,dose_mas,lesion_fraction,path,split\n");
        for c in &self.cases {
            buf.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.case_id,
                c.label.as_str(),
                c.dose_mas,
                c.lesion_fraction,
                c.path,
                c.split.as_str()
            ));
        }
        std::fs::write(&csv_path, buf).map_err(|e| io_err(&csv_path, e))?;

        let sidecar = ManifestSidecar {
            seed: self.seed,
            generator_version: self.generator_version.clone(),
            counts: counts.to_vec(),
        };
        let json_path = dir.join(MANIFEST_JSON);
        let mut f = std::fs::File::create(&json_path).map_err(|e| io_err(&json_path, e))?;
        let body = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        f.write_all(body.as_bytes()).map_err(|e| io_err(&json_path, e))?;
        f.write_all(b"\n").map_err(|e| io_err(&json_path, e))
    }
}

/// Read a manifest CSV (and sidecar when present) from `csv_path`.
pub fn read_manifest(csv_path: &Path) -> Result<Manifest, PhantomError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(csv_path)
        .map_err(|e| PhantomError::Manifest(format!("{}: {e}", csv_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| PhantomError::Manifest(e.to_string()))?
        .clone();
    let expected = ["case_id", "label", "dose_mas", "lesion_fraction", "path", "split"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(PhantomError::Manifest(format!(
            "unexpected manifest header {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut cases = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| PhantomError::Manifest(e.to_string()))?;
        let field = |i: usize| -> &str { row.get(i).unwrap_or("") };
        let case_id = field(0).to_string();
        if !seen.insert(case_id.clone()) {
            return Err(PhantomError::Manifest(format!(
                "duplicate case_id {case_id:?} at row {}",
                line + 2
            )));
        }
        let parse_f64 = |i: usize, name: &str| -> Result<f64, PhantomError> {
            field(i).parse::<f64>().map_err(|_| {
                PhantomError::Manifest(format!(
                    "row {}: bad {name} value {:?}",
                    line + 2,
                    field(i)
                ))
            })
        };
        let lesion_fraction = parse_f64(3, "lesion_fraction")?;
        if !(0.0..=1.0).contains(&lesion_fraction) {
            return Err(PhantomError::Manifest(format!(
                "row {}: lesion_fraction {lesion_fraction} outside [0, 1]",
                line + 2
            )));
        }
        let label = Label::parse(field(1))?;
        if label == Label::Negative && lesion_fraction != 0.0 {
            return Err(PhantomError::Manifest(format!(
                "row {}: negative case with nonzero lesion_fraction",
                line + 2
            )));
        }
        cases.push(CaseRecord {
            case_id,
            label,
            dose_mas: parse_f64(2, "dose_mas")?,
            lesion_fraction,
            path: field(4).to_string(),
            split: Split::parse(field(5))?,
        });
    }
    let sidecar_path = csv_path.with_file_name(MANIFEST_JSON);
    let (seed, generator_version) = match std::fs::read(&sidecar_path) {
        Ok(bytes) => {
            let sc: ManifestSidecar = serde_json::from_slice(&bytes)
                .map_err(|e| PhantomError::Manifest(format!("sidecar: {e}")))?;
            (sc.seed, sc.generator_version)
        }
        Err(_) => (0, String::from("unknown")),
    };
    Ok(Manifest {
        cases,
        seed,
        generator_version,
    })
}

struct CasePlan {
    case_id: String,
    label: Label,
    dose_mas: f64,
    anatomy_tag: String,
}

/// Generate a dataset: one volume plus lung/lesion masks per case, a CSV
/// manifest and a JSON sidecar, all fully determined by `seed`.
///
/// Positives draw their target lesion fraction from `dist`; negatives carry
/// none. With `opts.paired_doses` the same anatomy index reuses one anatomy
/// (and lesion layout) across dose levels, and only the noise differs.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    counts: &[CountRow],
    base_spec: &PhantomSpec,
    noise: &NoiseModel,
    dist: &LesionFractionDist,
    opts: &GenOptions,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest, PhantomError> {
    base_spec.validate()?;
    for row in counts {
        if row.n == 0 {
            return Err(PhantomError::InvalidSpec(
                "count rows must request at least one case".into(),
            ));
        }
        if !(row.dose_mas > 0.0) || !row.dose_mas.is_finite() {
            return Err(PhantomError::InvalidDose(row.dose_mas));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    // lay out every case up front; per-(label, dose) sequence numbers pair
    // anatomies across dose levels when requested
    let mut plans = Vec::new();
    let mut counters: HashMap<(Label, String), usize> = HashMap::new();
    for row in counts {
        let dose_key = fmt_dose(row.dose_mas);
        for _ in 0..row.n {
            let seq = counters.entry((row.label, dose_key.clone())).or_insert(0);
            let case_id = format!("{}_{:03}_{}mas", row.label.as_str(), *seq, dose_key);
            let anatomy_tag = if opts.paired_doses {
                format!("anatomy/{}/{:03}", row.label.as_str(), *seq)
            } else {
                format!("anatomy/{case_id}")
            };
            *seq += 1;
            plans.push(CasePlan {
                case_id,
                label: row.label,
                dose_mas: row.dose_mas,
                anatomy_tag,
            });
        }
    }

    let records: Result<Vec<CaseRecord>, PhantomError> = plans
        .par_iter()
        .map(|plan| generate_case(plan, base_spec, noise, dist, seed, out_dir))
        .collect();
    let manifest = Manifest {
        cases: records?,
        seed,
        generator_version: GENERATOR_VERSION.to_string(),
    };
    manifest.write(out_dir, counts)?;
    Ok(manifest)
}

fn generate_case(
    plan: &CasePlan,
    base_spec: &PhantomSpec,
    noise: &NoiseModel,
    dist: &LesionFractionDist,
    seed: u64,
    out_dir: &Path,
) -> Result<CaseRecord, PhantomError> {
    let mut anatomy_rng = derive_rng(seed, &plan.anatomy_tag);
    let (clean, lung) = build_anatomy(base_spec, &mut anatomy_rng)?;
    let (lesioned, lesion_mask, achieved) = match plan.label {
        Label::Positive => {
            let target = dist.sample(&mut anatomy_rng);
            let result = insert_lesions(&clean, &lung, target, base_spec, &mut anatomy_rng)?;
            (result.volume, result.lesion_mask, result.achieved_fraction)
        }
        Label::Negative => {
            let empty = crate::volume::Mask3D::zeros(clean.dims())?;
            (clean, empty, 0.0)
        }
    };

    let mut noise_rng = derive_rng(seed, &format!("noise/{}", plan.case_id));
    let noisy = simulate_ct_noise(&lesioned, plan.dose_mas, noise, &mut noise_rng)?;

    let vol_name = format!("{}.vvol", plan.case_id);
    write_volume(&noisy, &out_dir.join(&vol_name))?;
    write_mask(
        &lung,
        base_spec.spacing_mm,
        &out_dir.join(format!("{}.lung.vvol", plan.case_id)),
    )?;
    write_mask(
        &lesion_mask,
        base_spec.spacing_mm,
        &out_dir.join(format!("{}.lesion.vvol", plan.case_id)),
    )?;

    Ok(CaseRecord {
        case_id: plan.case_id.clone(),
        label: plan.label,
        dose_mas: plan.dose_mas,
        lesion_fraction: achieved,
        path: vol_name,
        split: Split::Unassigned,
    })
}

/// The default dataset preset: 50 positives and 40 negatives at each of
/// 28.5 and 57 mAs, 180 volumes in total.
pub fn cvit_covid_counts() -> Vec<CountRow> {
    vec![
        CountRow {
            label: Label::Positive,
            dose_mas: 28.5,
            n: 50,
        },
        CountRow {
            label: Label::Negative,
            dose_mas: 28.5,
            n: 40,
        },
        CountRow {
            label: Label::Positive,
            dose_mas: 57.0,
            n: 50,
        },
        CountRow {
            label: Label::Negative,
            dose_mas: 57.0,
            n: 40,
        },
    ]
}

/// Resolve a case's volume path relative to the manifest location.
pub fn resolve_case_path(manifest_path: &Path, case: &CaseRecord) -> PathBuf {
    let rel = Path::new(&case.path);
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(rel)
    }
}

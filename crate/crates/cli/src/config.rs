//! Run configuration: one JSON file with flat dotted-key overrides, one seed
//! governing generation, splits, initialization, shuffling and dropout.

use serde::{Deserialize, Serialize};
use vitbench_core::phantom::{CountRow, GenOptions, LesionFractionDist, NoiseModel, PhantomSpec};
use vitbench_core::trial::{EvalConfig, PreprocessConfig};
use vitbench_core::model::TrainConfig;

use crate::CliError;

/// Dataset generation section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSection {
    pub paired_doses: bool,
    /// Explicit count rows; `gen --preset` or `--counts` override this.
    pub counts: Option<Vec<CountRow>>,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            paired_doses: true,
            counts: None,
        }
    }
}

/// Merged view of every configurable knob.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub noise: NoiseModel,
    pub lesion_fraction_dist: LesionFractionDist,
    pub generate: GenSection,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ratios: (f64, f64, f64),
}

impl RunConfig {
    fn base() -> Self {
        Self {
            seed: 0,
            phantom: PhantomSpec::default(),
            noise: NoiseModel::default(),
            lesion_fraction_dist: LesionFractionDist::default(),
            generate: GenSection::default(),
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ratios: (0.6, 0.2, 0.2),
        }
    }

    /// Load the config: defaults, then the optional file, then `--set`
    /// overrides, then the seed (flag beats file beats `VITBENCH_SEED`).
    pub fn load(
        file: Option<&std::path::Path>,
        sets: &[String],
        seed_flag: Option<u64>,
    ) -> Result<Self, CliError> {
        let mut value =
            serde_json::to_value(Self::base()).expect("default config serializes");
        let file_had_seed = if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let overlay: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let had_seed = overlay.get("seed").is_some();
            merge(&mut value, overlay);
            had_seed
        } else {
            false
        };
        let mut set_had_seed = false;
        for spec in sets {
            let (path, raw) = spec
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {spec:?}")))?;
            if path == "seed" {
                set_had_seed = true;
            }
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            set_path(&mut value, path, parsed)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;

        if let Some(seed) = seed_flag {
            cfg.seed = seed;
        } else if !file_had_seed && !set_had_seed {
            if let Ok(env_seed) = std::env::var("VITBENCH_SEED") {
                cfg.seed = env_seed
                    .parse()
                    .map_err(|_| CliError::Config(format!("VITBENCH_SEED {env_seed:?} is not a seed")))?;
            }
        }
        // one seed governs every stream
        cfg.train.seed = cfg.seed;
        cfg.eval.seed = cfg.seed;
        cfg.phantom.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.phantom
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.eval
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let (a, b, c) = self.ratios;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "ratios {:?} must be positive and sum to 1",
                self.ratios
            )));
        }
        if !(self.noise.sigma_ref >= 0.0) || !(self.noise.dose_ref > 0.0) {
            return Err(CliError::Config(format!(
                "noise model sigma_ref {} / dose_ref {} invalid",
                self.noise.sigma_ref, self.noise.dose_ref
            )));
        }
        Ok(())
    }

    pub fn gen_options(&self) -> GenOptions {
        GenOptions {
            paired_doses: self.generate.paired_doses,
        }
    }
}

/// Deep-merge `overlay` into `base` (objects merge, everything else replaces).
fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Assign a dotted path that must already exist in the config tree.
fn set_path(
    root: &mut serde_json::Value,
    path: &str,
    value: serde_json::Value,
) -> Result<(), CliError> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("config path {path:?} is not an object at {part:?}")))?;
        if i + 1 == parts.len() {
            match obj.get_mut(*part) {
                Some(slot) => {
                    *slot = value;
                    return Ok(());
                }
                None => {
                    return Err(CliError::Config(format!("unknown config key {path:?}")));
                }
            }
        }
        cursor = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("unknown config key {path:?}")))?;
    }
    Err(CliError::Config(format!("empty config path {path:?}")))
}

/// Parse `--counts pos:5@28.5,neg:5@28.5` into count rows.
pub fn parse_counts(spec: &str) -> Result<Vec<CountRow>, CliError> {
    use vitbench_core::phantom::Label;
    let mut rows = Vec::new();
    for part in spec.split(',') {
        let bad = || CliError::Config(format!("bad counts entry {part:?}; expected label:n@dose"));
        let (label, rest) = part.split_once(':').ok_or_else(bad)?;
        let (n, dose) = rest.split_once('@').ok_or_else(bad)?;
        let label = Label::parse(label.trim()).map_err(|_| bad())?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        let dose_mas: f64 = dose.trim().parse().map_err(|_| bad())?;
        if n == 0 || !(dose_mas > 0.0) {
            return Err(bad());
        }
        rows.push(CountRow {
            label,
            dose_mas,
            n,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Config("empty counts".into()));
    }
    Ok(rows)
}

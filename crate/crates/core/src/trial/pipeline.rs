//! The preprocessing chain feeding the model: optional body crop, optional
//! B-spline resampling, HU clip, unit normalization, centered patch.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::model::{FeatureMap, ModelError};
use crate::phantom::{resolve_case_path, CaseRecord};
use crate::volume::{
    clip_hu, crop_to_body, extract_patch, normalize_unit, read_volume, resample_bspline, Volume3D,
    VolumeError, CLIP_HI_HU, CLIP_LO_HU, PATCH_SIZE,
};

/// Preprocessing applied to every volume before the model sees it.
///
/// The default chain is clip -> normalize -> patch; crop and resample can be
/// switched on, and normalization can be skipped to feed clipped HU directly
/// (the pad value then falls back to the lower clip bound).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub crop_threshold_hu: Option<f32>,
    pub resample_mm: Option<(f64, f64, f64)>,
    pub clip_lo: f32,
    pub clip_hi: f32,
    pub normalize: bool,
    pub patch: (usize, usize, usize),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            crop_threshold_hu: None,
            resample_mm: None,
            clip_lo: CLIP_LO_HU,
            clip_hi: CLIP_HI_HU,
            normalize: true,
            patch: PATCH_SIZE,
        }
    }
}

/// Run the preprocessing chain on an HU volume.
pub fn preprocess_volume(vol: Volume3D, cfg: &PreprocessConfig) -> Result<Volume3D, VolumeError> {
    let mut vol = vol;
    if let Some(threshold) = cfg.crop_threshold_hu {
        vol = crop_to_body(&vol, threshold)?.0;
    }
    if let Some(target) = cfg.resample_mm {
        vol = resample_bspline(&vol, target)?;
    }
    vol = clip_hu(vol, cfg.clip_lo, cfg.clip_hi)?;
    let pad = if cfg.normalize {
        vol = normalize_unit(vol, cfg.clip_lo, cfg.clip_hi)?;
        0.0
    } else {
        cfg.clip_lo
    };
    extract_patch(&vol, cfg.patch, pad)
}

/// Build the case loader used by training and evaluation: resolve the case
/// path against the manifest location, read the volume, preprocess, convert
/// to a single-channel feature map.
pub fn make_case_loader(
    manifest_path: PathBuf,
    cfg: PreprocessConfig,
) -> impl Fn(&CaseRecord) -> Result<FeatureMap, ModelError> + Sync {
    move |case: &CaseRecord| {
        let path = resolve_case_path(&manifest_path, case);
        let vol = read_volume(&path).map_err(|e| ModelError::Case {
            case_id: case.case_id.clone(),
            message: e.to_string(),
        })?;
        let pre = preprocess_volume(vol, &cfg).map_err(|e| ModelError::Case {
            case_id: case.case_id.clone(),
            message: e.to_string(),
        })?;
        if cfg.normalize {
            FeatureMap::from_unit_volume(&pre)
        } else {
            // clipped HU path: hand the raw values to the model unscaled
            let (z, y, x) = pre.dims();
            Ok(FeatureMap {
                c: 1,
                z,
                y,
                x,
                data: pre.voxels().iter().map(|&v| v as f64).collect(),
            })
        }
    }
}

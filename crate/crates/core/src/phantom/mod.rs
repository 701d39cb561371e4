//! Desk-scale geometric chest phantom: an ellipsoidal body with two lung
//! ellipsoids, sphere-packed lesions hitting a prescribed fraction of the
//! lung volume, and a dose-parameterized additive Gaussian noise model with
//! std proportional to 1/sqrt(mAs).

mod dataset;

pub use dataset::{
    cvit_covid_counts, generate_dataset, read_manifest, resolve_case_path, CountRow, GenOptions,
    LesionFractionDist, Manifest, ManifestSidecar,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Domain, Mask3D, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("dims {0:?} too small: every axis must be at least 16 voxels")]
    DimsTooSmall((usize, usize, usize)),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("lungs occupy {got:.3} of body voxels, below the 0.10 floor")]
    DegenerateAnatomy { got: f64 },
    #[error("lesion target {target} unreachable within {attempts} spheres")]
    TargetUnreachable { target: f64, attempts: usize },
    #[error("empty lung mask")]
    EmptyLungMask,
    #[error("mask dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("dose must be positive and finite, got {0}")]
    InvalidDose(f64),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Case label. Serialized as `pos` / `neg` in manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Positive => "pos",
            Label::Negative => "neg",
        }
    }

    pub fn parse(s: &str) -> Result<Self, PhantomError> {
        match s {
            "pos" => Ok(Label::Positive),
            "neg" => Ok(Label::Negative),
            other => Err(PhantomError::Manifest(format!("unknown label {other:?}"))),
        }
    }
}

/// Split assignment of a case. Serialized as `train`/`val`/`test`/`none`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[serde(rename = "none")]
    Unassigned,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self, PhantomError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "none" => Ok(Split::Unassigned),
            other => Err(PhantomError::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// One virtual patient in a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub label: Label,
    pub dose_mas: f64,
    /// Ground-truth lesion fraction of the lung volume; 0 for negatives.
    pub lesion_fraction: f64,
    /// Volume file path, relative to the manifest location.
    pub path: String,
    pub split: Split,
}

/// Parameters of the geometric phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub body_hu: f32,
    pub lung_hu: f32,
    pub air_hu: f32,
    pub lesion_hu: f32,
    /// Fraction of lung volume to cover with lesions for single-case callers.
    pub target_lesion_fraction: f64,
    /// Lesion sphere radius range in mm.
    pub lesion_radius_mm: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (96, 192, 192),
            spacing_mm: (5.0, 2.0, 2.0),
            body_hu: 40.0,
            lung_hu: -850.0,
            air_hu: -1000.0,
            lesion_hu: -400.0,
            target_lesion_fraction: 0.0,
            lesion_radius_mm: (2.0, 8.0),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(0.0..1.0).contains(&self.target_lesion_fraction) {
            return Err(PhantomError::InvalidSpec(format!(
                "target_lesion_fraction {} outside [0, 1)",
                self.target_lesion_fraction
            )));
        }
        let between = (self.lesion_hu - self.lung_hu) * (self.body_hu - self.lesion_hu);
        if between <= 0.0 {
            return Err(PhantomError::InvalidSpec(format!(
                "lesion_hu {} must lie strictly between lung_hu {} and body_hu {}",
                self.lesion_hu, self.lung_hu, self.body_hu
            )));
        }
        let (lo, hi) = self.lesion_radius_mm;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(PhantomError::InvalidSpec(format!(
                "lesion radius range ({lo}, {hi}) must be positive and ordered"
            )));
        }
        let ok = [self.spacing_mm.0, self.spacing_mm.1, self.spacing_mm.2]
            .iter()
            .all(|s| s.is_finite() && *s > 0.0);
        if !ok {
            return Err(PhantomError::InvalidSpec(format!(
                "spacing {:?} must be positive and finite",
                self.spacing_mm
            )));
        }
        Ok(())
    }
}

/// Dose-parameterized noise: std scales with the inverse square root of mAs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    /// HU noise std at the reference dose.
    pub sigma_ref: f64,
    /// Reference dose in mAs.
    pub dose_ref: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_ref: 25.0,
            dose_ref: 57.0,
        }
    }
}

impl NoiseModel {
    /// Noise std at a given dose: `sigma_ref * sqrt(dose_ref / dose)`.
    pub fn std_at(&self, dose_mas: f64) -> Result<f64, PhantomError> {
        if !(dose_mas > 0.0) || !dose_mas.is_finite() {
            return Err(PhantomError::InvalidDose(dose_mas));
        }
        Ok(self.sigma_ref * (self.dose_ref / dose_mas).sqrt())
    }
}

// body and lung ellipsoid semi-axes as fractions of the voxel grid
const BODY_SEMI: (f64, f64, f64) = (0.46, 0.40, 0.44);
const LUNG_SEMI: (f64, f64, f64) = (0.32, 0.24, 0.16);
const LUNG_OFFSET_X: f64 = 0.22;
const JITTER: f64 = 0.05;

struct Ellipsoid {
    center: (f64, f64, f64),
    semi: (f64, f64, f64),
}

impl Ellipsoid {
    #[inline]
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.center.0) / self.semi.0;
        let dy = (y - self.center.1) / self.semi.1;
        let dx = (x - self.center.2) / self.semi.2;
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

/// Build the base anatomy: an ellipsoidal body of `body_hu` in an `air_hu`
/// background with two disjoint lung ellipsoids of `lung_hu`, lightly
/// jittered (5% of the semi-axes) by `rng`. The returned mask marks exactly
/// the lung voxels.
pub fn build_anatomy<R: Rng>(
    spec: &PhantomSpec,
    rng: &mut R,
) -> Result<(Volume3D, Mask3D), PhantomError> {
    spec.validate()?;
    let (nz, ny, nx) = spec.dims;
    if nz < 16 || ny < 16 || nx < 16 {
        return Err(PhantomError::DimsTooSmall(spec.dims));
    }
    let center = (
        (nz as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nx as f64 - 1.0) / 2.0,
    );
    let body = Ellipsoid {
        center,
        semi: (
            BODY_SEMI.0 * nz as f64,
            BODY_SEMI.1 * ny as f64,
            BODY_SEMI.2 * nx as f64,
        ),
    };

    let mut lungs = Vec::with_capacity(2);
    for side in [-1.0, 1.0] {
        // fixed draw order keeps anatomy reproducible under one rng stream:
        // three center offsets then three semi-axis factors per lung
        let base_semi = (
            LUNG_SEMI.0 * nz as f64,
            LUNG_SEMI.1 * ny as f64,
            LUNG_SEMI.2 * nx as f64,
        );
        let jit = |rng: &mut R| rng.gen_range(-JITTER..=JITTER);
        let cz = center.0 + jit(rng) * base_semi.0;
        let cy = center.1 + jit(rng) * base_semi.1;
        let cx = center.2 + side * LUNG_OFFSET_X * nx as f64 + jit(rng) * base_semi.2;
        let sz = base_semi.0 * (1.0 + jit(rng));
        let sy = base_semi.1 * (1.0 + jit(rng));
        let sx = base_semi.2 * (1.0 + jit(rng));
        lungs.push(Ellipsoid {
            center: (cz, cy, cx),
            semi: (sz, sy, sx),
        });
    }

    let n = nz * ny * nx;
    let mut voxels = vec![spec.air_hu; n];
    let mut bits = vec![0u8; n];
    let mut body_count = 0usize;
    let mut lung_count = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (fz, fy, fx) = (z as f64, y as f64, x as f64);
                if !body.contains(fz, fy, fx) {
                    continue;
                }
                body_count += 1;
                let i = (z * ny + y) * nx + x;
                if lungs.iter().any(|l| l.contains(fz, fy, fx)) {
                    voxels[i] = spec.lung_hu;
                    bits[i] = 1;
                    lung_count += 1;
                } else {
                    voxels[i] = spec.body_hu;
                }
            }
        }
    }
    if body_count == 0 || (lung_count as f64) < 0.10 * body_count as f64 {
        return Err(PhantomError::DegenerateAnatomy {
            got: lung_count as f64 / body_count.max(1) as f64,
        });
    }
    let vol = Volume3D::from_vec(spec.dims, spec.spacing_mm, Domain::Hu, voxels)?;
    let mask = Mask3D::from_bits(spec.dims, bits)?;
    Ok((vol, mask))
}

/// Result of lesion insertion.
#[derive(Debug, Clone)]
pub struct LesionResult {
    pub volume: Volume3D,
    pub lesion_mask: Mask3D,
    /// Lesioned fraction of the lung volume actually achieved.
    pub achieved_fraction: f64,
}

const MAX_LESION_ATTEMPTS: usize = 10_000;

/// Insert lesion spheres until at least `target_fraction` of the lung volume
/// is covered.
///
/// Radii are drawn from the spec range but capped near the target so the
/// final sphere cannot overshoot by more than a voxel-scale sphere's worth;
/// centers are drawn uniformly over the lung mask and every sphere is
/// clipped to it.
pub fn insert_lesions<R: Rng>(
    vol: &Volume3D,
    lung: &Mask3D,
    target_fraction: f64,
    spec: &PhantomSpec,
    rng: &mut R,
) -> Result<LesionResult, PhantomError> {
    spec.validate()?;
    if !(0.0..1.0).contains(&target_fraction) {
        return Err(PhantomError::InvalidSpec(format!(
            "target_fraction {target_fraction} outside [0, 1)"
        )));
    }
    if vol.dims() != lung.dims() {
        return Err(PhantomError::DimsMismatch(vol.dims(), lung.dims()));
    }
    let lung_indices: Vec<usize> = lung
        .bits()
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| (b == 1).then_some(i))
        .collect();
    if lung_indices.is_empty() {
        return Err(PhantomError::EmptyLungMask);
    }

    let mut volume = vol.clone();
    let mut lesion = Mask3D::zeros(vol.dims())?;
    let lung_count = lung_indices.len();
    let target_voxels = (target_fraction * lung_count as f64).round() as usize;
    if target_voxels == 0 {
        return Ok(LesionResult {
            volume,
            lesion_mask: lesion,
            achieved_fraction: 0.0,
        });
    }

    let (nz, ny, nx) = vol.dims();
    let (dz, dy, dx) = vol.spacing();
    let voxel_mm3 = dz * dy * dx;
    let min_radius = 0.5 * dz.min(dy).min(dx);
    let (r_lo, r_hi) = spec.lesion_radius_mm;

    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < target_voxels {
        if attempts >= MAX_LESION_ATTEMPTS {
            return Err(PhantomError::TargetUnreachable {
                target: target_fraction,
                attempts,
            });
        }
        attempts += 1;
        let sampled = rng.gen_range(r_lo..=r_hi);
        let center = lung_indices[rng.gen_range(0..lung_count)];

        // cap the radius near the target so the last spheres shrink toward
        // the voxel scale instead of blowing past the requested fraction
        let remaining = target_voxels - placed;
        let r_needed = (3.0 * remaining as f64 * voxel_mm3 / (4.0 * std::f64::consts::PI)).cbrt();
        let radius = sampled.min(r_needed.max(min_radius));

        let cx = center % nx;
        let cy = (center / nx) % ny;
        let cz = center / (nx * ny);
        let ez = (radius / dz).ceil() as isize;
        let ey = (radius / dy).ceil() as isize;
        let ex = (radius / dx).ceil() as isize;
        let r2 = radius * radius;
        for z in (cz as isize - ez).max(0)..=(cz as isize + ez).min(nz as isize - 1) {
            let pz = (z - cz as isize) as f64 * dz;
            for y in (cy as isize - ey).max(0)..=(cy as isize + ey).min(ny as isize - 1) {
                let py = (y - cy as isize) as f64 * dy;
                for x in (cx as isize - ex).max(0)..=(cx as isize + ex).min(nx as isize - 1) {
                    let px = (x - cx as isize) as f64 * dx;
                    if pz * pz + py * py + px * px > r2 {
                        continue;
                    }
                    let i = (z as usize * ny + y as usize) * nx + x as usize;
                    if lung.bits()[i] == 1 && lesion.bits()[i] == 0 {
                        lesion.bits_mut()[i] = 1;
                        volume.voxels_mut()[i] = spec.lesion_hu;
                        placed += 1;
                    }
                }
            }
        }
    }

    Ok(LesionResult {
        volume,
        lesion_mask: lesion,
        achieved_fraction: placed as f64 / lung_count as f64,
    })
}

/// Lesioned fraction of the lung: `|lesion AND lung| / |lung|`.
pub fn lesion_fraction(lesion: &Mask3D, lung: &Mask3D) -> Result<f64, PhantomError> {
    if lesion.dims() != lung.dims() {
        return Err(PhantomError::DimsMismatch(lesion.dims(), lung.dims()));
    }
    let lung_count = lung.count();
    if lung_count == 0 {
        return Err(PhantomError::EmptyLungMask);
    }
    let joint = lesion
        .bits()
        .iter()
        .zip(lung.bits())
        .filter(|(&a, &b)| a == 1 && b == 1)
        .count();
    Ok(joint as f64 / lung_count as f64)
}

/// Add zero-mean Gaussian noise with `std = sigma_ref * sqrt(dose_ref / dose)`
/// independently per voxel.
pub fn simulate_ct_noise<R: Rng>(
    vol: &Volume3D,
    dose_mas: f64,
    model: &NoiseModel,
    rng: &mut R,
) -> Result<Volume3D, PhantomError> {
    let std = model.std_at(dose_mas)?;
    let mut out = vol.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, std).expect("validated std");
    for v in out.voxels_mut() {
        *v = (*v as f64 + normal.sample(rng)) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;

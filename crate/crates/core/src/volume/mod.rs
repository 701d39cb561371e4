//! Volumetric data type and the CT preprocessing chain: body crop, B-spline
//! resampling, HU clipping, unit normalization, center patch extraction and
//! the `.vvol` file container.
//!
//! Volumes are dense z-major `f32` grids with per-axis physical spacing in
//! millimeters. All operations are pure: inputs are never mutated in place
//! unless ownership is taken, and every output is a fresh, validated value.

mod io;
mod resample;

pub use io::{
    read_mask, read_mask_from, read_volume, read_volume_from, write_mask, write_mask_to,
    write_volume, write_volume_to,
};
pub use resample::resample_bspline;

use thiserror::Error;

/// Default HU clip window applied before normalization.
pub const CLIP_LO_HU: f32 = -1000.0;
/// Upper bound of the default HU clip window.
pub const CLIP_HI_HU: f32 = 800.0;
/// Default resampling target spacing in mm, (dz, dy, dx).
pub const TARGET_SPACING_MM: (f64, f64, f64) = (5.0, 2.0, 2.0);
/// Default patch size, (Z, H, W).
pub const PATCH_SIZE: (usize, usize, usize) = (96, 160, 160);
/// Default threshold separating body from air background.
pub const BODY_THRESHOLD_HU: f32 = -500.0;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid dims {0:?}: every axis must be positive")]
    InvalidDims((usize, usize, usize)),
    #[error("voxel count {actual} does not match dims {dims:?} (expected {expected})")]
    VoxelCountMismatch {
        dims: (usize, usize, usize),
        expected: usize,
        actual: usize,
    },
    #[error("invalid spacing {0:?}: every component must be finite and positive")]
    InvalidSpacing((f64, f64, f64)),
    #[error("non-finite voxel value at flat index {0}")]
    NonFiniteVoxel(usize),
    #[error("unit-domain voxel {value} at flat index {index} outside [0, 1]")]
    UnitOutOfRange { index: usize, value: f32 },
    #[error("mask value {value} at flat index {index} is not 0 or 1")]
    InvalidMaskValue { index: usize, value: f32 },
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("empty body region: no voxel exceeds threshold {0} HU")]
    EmptyBodyRegion(f32),
    #[error("invalid clip range: lo {lo} must be strictly below hi {hi}")]
    InvalidClipRange { lo: f32, hi: f32 },
    #[error("voxel {value} at flat index {index} outside clip range [{lo}, {hi}]; clip before normalizing")]
    OutsideClipRange {
        index: usize,
        value: f32,
        lo: f32,
        hi: f32,
    },
    #[error("operation requires a volume in the {expected:?} domain, got {actual:?}")]
    WrongDomain { expected: Domain, actual: Domain },
    #[error("invalid patch size {0:?}: every axis must be positive")]
    InvalidPatchSize((usize, usize, usize)),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a VITVOL01 container")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload length mismatch: expected {expected} bytes, got {actual}")]
    PayloadLengthMismatch { expected: usize, actual: usize },
}

/// Intensity domain of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Hounsfield units; any finite value.
    Hu,
    /// Unit-normalized; every voxel in [0, 1].
    Unit,
}

/// A dense 3D scalar field with physical spacing, stored z-major.
///
/// Flat index of voxel `(z, y, x)` is `(z * ny + y) * nx + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    domain: Domain,
    voxels: Vec<f32>,
}

impl Volume3D {
    /// Build a volume from raw voxels, validating every invariant.
    pub fn from_vec(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        domain: Domain,
        voxels: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        validate_dims(dims)?;
        validate_spacing(spacing)?;
        let expected = dims.0 * dims.1 * dims.2;
        if voxels.len() != expected {
            return Err(VolumeError::VoxelCountMismatch {
                dims,
                expected,
                actual: voxels.len(),
            });
        }
        for (i, &v) in voxels.iter().enumerate() {
            if !v.is_finite() {
                return Err(VolumeError::NonFiniteVoxel(i));
            }
            if domain == Domain::Unit && !(0.0..=1.0).contains(&v) {
                return Err(VolumeError::UnitOutOfRange { index: i, value: v });
            }
        }
        Ok(Self {
            dims,
            spacing,
            domain,
            voxels,
        })
    }

    /// Constant-valued volume.
    pub fn filled(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        domain: Domain,
        value: f32,
    ) -> Result<Self, VolumeError> {
        validate_dims(dims)?;
        let n = dims.0 * dims.1 * dims.2;
        Self::from_vec(dims, spacing, domain, vec![value; n])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    pub(crate) fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }
}

/// A binary mask sharing the z-major layout of [`Volume3D`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    dims: (usize, usize, usize),
    bits: Vec<u8>,
}

impl Mask3D {
    pub fn from_bits(dims: (usize, usize, usize), bits: Vec<u8>) -> Result<Self, VolumeError> {
        validate_dims(dims)?;
        let expected = dims.0 * dims.1 * dims.2;
        if bits.len() != expected {
            return Err(VolumeError::VoxelCountMismatch {
                dims,
                expected,
                actual: bits.len(),
            });
        }
        for (i, &b) in bits.iter().enumerate() {
            if b > 1 {
                return Err(VolumeError::InvalidMaskValue {
                    index: i,
                    value: b as f32,
                });
            }
        }
        Ok(Self { dims, bits })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Result<Self, VolumeError> {
        validate_dims(dims)?;
        let n = dims.0 * dims.1 * dims.2;
        Ok(Self {
            dims,
            bits: vec![0; n],
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.bits[self.index(z, y, x)] != 0
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, on: bool) {
        let i = self.index(z, y, x);
        self.bits[i] = on as u8;
    }

    /// Number of set voxels.
    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// True when every set voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask3D) -> bool {
        self.dims == other.dims
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| a == 0 || b == 1)
    }
}

/// Half-open voxel box: `lo` inclusive, `hi` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: (usize, usize, usize),
    pub hi: (usize, usize, usize),
}

impl BoundingBox {
    pub fn extent(&self) -> (usize, usize, usize) {
        (
            self.hi.0 - self.lo.0,
            self.hi.1 - self.lo.1,
            self.hi.2 - self.lo.2,
        )
    }
}

fn validate_dims(dims: (usize, usize, usize)) -> Result<(), VolumeError> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(VolumeError::InvalidDims(dims));
    }
    Ok(())
}

fn validate_spacing(spacing: (f64, f64, f64)) -> Result<(), VolumeError> {
    let ok = [spacing.0, spacing.1, spacing.2]
        .iter()
        .all(|s| s.is_finite() && *s > 0.0);
    if !ok {
        return Err(VolumeError::InvalidSpacing(spacing));
    }
    Ok(())
}

/// Crop an HU volume to the tight bounding box of the largest 6-connected
/// component of voxels strictly above `threshold`.
///
/// Returns the cropped volume (spacing preserved) and the box in input
/// coordinates. Fails with [`VolumeError::EmptyBodyRegion`] when nothing
/// exceeds the threshold.
pub fn crop_to_body(
    vol: &Volume3D,
    threshold: f32,
) -> Result<(Volume3D, BoundingBox), VolumeError> {
    if vol.domain != Domain::Hu {
        return Err(VolumeError::WrongDomain {
            expected: Domain::Hu,
            actual: vol.domain,
        });
    }
    let (nz, ny, nx) = vol.dims;
    let n = vol.len();
    // component label per voxel: 0 = below threshold / unvisited
    let mut labels = vec![0u32; n];
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut next_label = 0u32;
    let mut queue: Vec<usize> = Vec::new();

    for start in 0..n {
        if labels[start] != 0 || vol.voxels[start] <= threshold {
            continue;
        }
        next_label += 1;
        let label = next_label;
        let mut size = 0usize;
        labels[start] = label;
        queue.clear();
        queue.push(start);
        while let Some(idx) = queue.pop() {
            size += 1;
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            let mut visit = |nz_i: usize, ny_i: usize, nx_i: usize| {
                let j = (nz_i * ny + ny_i) * nx + nx_i;
                if labels[j] == 0 && vol.voxels[j] > threshold {
                    labels[j] = label;
                    queue.push(j);
                }
            };
            if z > 0 {
                visit(z - 1, y, x);
            }
            if z + 1 < nz {
                visit(z + 1, y, x);
            }
            if y > 0 {
                visit(z, y - 1, x);
            }
            if y + 1 < ny {
                visit(z, y + 1, x);
            }
            if x > 0 {
                visit(z, y, x - 1);
            }
            if x + 1 < nx {
                visit(z, y, x + 1);
            }
        }
        if size > best_size {
            best_size = size;
            best_label = label;
        }
    }

    if best_label == 0 {
        return Err(VolumeError::EmptyBodyRegion(threshold));
    }

    let mut lo = (usize::MAX, usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize, 0usize);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if labels[(z * ny + y) * nx + x] == best_label {
                    lo.0 = lo.0.min(z);
                    lo.1 = lo.1.min(y);
                    lo.2 = lo.2.min(x);
                    hi.0 = hi.0.max(z + 1);
                    hi.1 = hi.1.max(y + 1);
                    hi.2 = hi.2.max(x + 1);
                }
            }
        }
    }
    let bbox = BoundingBox { lo, hi };
    let (ez, ey, ex) = bbox.extent();
    let mut out = Vec::with_capacity(ez * ey * ex);
    for z in lo.0..hi.0 {
        for y in lo.1..hi.1 {
            let row = vol.index(z, y, lo.2);
            out.extend_from_slice(&vol.voxels[row..row + ex]);
        }
    }
    let cropped = Volume3D::from_vec((ez, ey, ex), vol.spacing, Domain::Hu, out)?;
    Ok((cropped, bbox))
}

/// Clamp every voxel of an HU volume into `[lo, hi]`.
pub fn clip_hu(mut vol: Volume3D, lo: f32, hi: f32) -> Result<Volume3D, VolumeError> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(VolumeError::InvalidClipRange { lo, hi });
    }
    if vol.domain != Domain::Hu {
        return Err(VolumeError::WrongDomain {
            expected: Domain::Hu,
            actual: vol.domain,
        });
    }
    for v in vol.voxels.iter_mut() {
        *v = v.clamp(lo, hi);
    }
    Ok(vol)
}

/// Map `[lo, hi]` HU linearly onto `[0, 1]` and retag the domain.
///
/// Every voxel must already lie inside the window; call [`clip_hu`] first.
pub fn normalize_unit(mut vol: Volume3D, lo: f32, hi: f32) -> Result<Volume3D, VolumeError> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(VolumeError::InvalidClipRange { lo, hi });
    }
    if vol.domain != Domain::Hu {
        return Err(VolumeError::WrongDomain {
            expected: Domain::Hu,
            actual: vol.domain,
        });
    }
    let span = (hi - lo) as f64;
    for (i, v) in vol.voxels.iter_mut().enumerate() {
        if *v < lo || *v > hi {
            return Err(VolumeError::OutsideClipRange {
                index: i,
                value: *v,
                lo,
                hi,
            });
        }
        let u = ((*v - lo) as f64 / span) as f32;
        *v = u.clamp(0.0, 1.0);
    }
    vol.domain = Domain::Unit;
    Ok(vol)
}

/// Extract a patch of exactly `size` voxels centered on the volume center.
///
/// Regions extending past the volume take `pad_value`. Spacing and domain are
/// preserved, so the pad value must respect the domain (0.0 is the unit-domain
/// equivalent of -1000 HU under the default window).
pub fn extract_patch(
    vol: &Volume3D,
    size: (usize, usize, usize),
    pad_value: f32,
) -> Result<Volume3D, VolumeError> {
    if size.0 == 0 || size.1 == 0 || size.2 == 0 {
        return Err(VolumeError::InvalidPatchSize(size));
    }
    if !pad_value.is_finite() {
        return Err(VolumeError::NonFiniteVoxel(0));
    }
    let (nz, ny, nx) = vol.dims;
    // output voxel j maps to input voxel j + shift along each axis
    let shift = (
        (nz as isize - size.0 as isize).div_euclid(2),
        (ny as isize - size.1 as isize).div_euclid(2),
        (nx as isize - size.2 as isize).div_euclid(2),
    );
    let mut out = vec![pad_value; size.0 * size.1 * size.2];
    for oz in 0..size.0 {
        let iz = oz as isize + shift.0;
        if iz < 0 || iz >= nz as isize {
            continue;
        }
        for oy in 0..size.1 {
            let iy = oy as isize + shift.1;
            if iy < 0 || iy >= ny as isize {
                continue;
            }
            let ix_first = shift.2.max(0);
            let ix_last = (nx as isize).min(size.2 as isize + shift.2);
            if ix_first >= ix_last {
                continue;
            }
            let ox_first = (ix_first - shift.2) as usize;
            let in_row = vol.index(iz as usize, iy as usize, ix_first as usize);
            let out_row = (oz * size.1 + oy) * size.2 + ox_first;
            let len = (ix_last - ix_first) as usize;
            out[out_row..out_row + len].copy_from_slice(&vol.voxels[in_row..in_row + len]);
        }
    }
    Volume3D::from_vec(size, vol.spacing, vol.domain, out)
}

#[cfg(test)]
mod tests;

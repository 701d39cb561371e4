//! Dense per-sample feature maps in channel-major (c, z, y, x) order.

use crate::volume::{Domain, Volume3D};

use super::ModelError;

/// One sample's activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub z: usize,
    pub y: usize,
    pub x: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, z: usize, y: usize, x: usize) -> Self {
        Self {
            c,
            z,
            y,
            x,
            data: vec![0.0; c * z * y * x],
        }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.z * self.y * self.x
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.z + z) * self.y + y) * self.x + x
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, z, y, x)]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.c == other.c && self.z == other.z && self.y == other.y && self.x == other.x
    }

    /// Single-channel feature map from a unit-domain volume.
    pub fn from_unit_volume(vol: &Volume3D) -> Result<Self, ModelError> {
        if vol.domain() != Domain::Unit {
            return Err(ModelError::InputNotUnitDomain);
        }
        let (z, y, x) = vol.dims();
        Ok(Self {
            c: 1,
            z,
            y,
            x,
            data: vol.voxels().iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

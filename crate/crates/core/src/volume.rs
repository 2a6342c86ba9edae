//! Scalar voxel volumes.

use ndarray::Array2;

use crate::geometry::VolumeGeometry;
use crate::{Error, Result};

/// Voxel payload, stored x-fastest (then y, then z).
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::I16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, i: usize) -> f64 {
        match self {
            VoxelData::I16(v) => f64::from(v[i]),
            VoxelData::F32(v) => f64::from(v[i]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geom: VolumeGeometry,
    pub data: VoxelData,
}

impl Volume {
    pub fn new(geom: VolumeGeometry, data: VoxelData) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.n_voxels() {
            return Err(Error::invalid(format!(
                "voxel count {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Volume { geom, data })
    }

    pub fn depth(&self) -> usize {
        self.geom.dims[2]
    }

    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        let [nx, ny, _] = self.geom.dims;
        self.data.get(x + nx * (y + ny * z))
    }

    /// Slice `k` as a `(rows = y, cols = x)` image.
    pub fn slice(&self, k: usize) -> Array2<f64> {
        let [nx, ny, _] = self.geom.dims;
        let base = nx * ny * k;
        Array2::from_shape_fn((ny, nx), |(y, x)| self.data.get(base + x + nx * y))
    }
}

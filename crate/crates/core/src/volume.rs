//! Dense 3D grids in `[depth][height][width]` order (width fastest).

use crate::error::{Error, Result};

/// Scalar field on a regular grid with physical voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<T>,
}

/// CT intensities in Hounsfield units.
pub type VoxelVolume = Volume<f32>;
/// Binary segmentation, values in {0, 1}.
pub type MaskVolume = Volume<u8>;

pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 3000.0;

impl<T: Copy> Volume<T> {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || data.len() != n {
            return Err(Error::config(format!(
                "volume {dims:?} needs {n} > 0 values, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    /// Physical extent in mm per axis.
    pub fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a] as f64)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl MaskVolume {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Symmetric crop to `target`; when the surplus on an axis is odd, the
/// extra voxel is taken from the high side.
pub fn center_crop<T: Copy>(v: &Volume<T>, target: [usize; 3]) -> Result<Volume<T>> {
    let d = v.dims();
    if (0..3).any(|a| target[a] == 0 || target[a] > d[a]) {
        return Err(Error::config(format!("cannot crop {d:?} to {target:?}")));
    }
    let lo: [usize; 3] = std::array::from_fn(|a| (d[a] - target[a]) / 2);
    let mut data = Vec::with_capacity(target.iter().product());
    for z in 0..target[0] {
        for y in 0..target[1] {
            let start = v.index(lo[0] + z, lo[1] + y, lo[2]);
            data.extend_from_slice(&v.data()[start..start + target[2]]);
        }
    }
    Volume::new(target, v.spacing(), data)
}

/// `mask(v) = 1` iff `lo <= value(v) <= hi`.
pub fn threshold_mask(v: &VoxelVolume, lo: f32, hi: f32) -> MaskVolume {
    v.map(|h| (lo <= h && h <= hi) as u8)
}

//! Voxel grid geometry and the occupancy/label volumes defined on it.
//!
//! Voxels are stored row-major with x slowest and z fastest:
//! `index = (ix * ny + iy) * nz + iz`.

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Minimum corner of the volume, meters.
    pub origin: [f64; 3],
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// Semantic classes, excluding free.
    pub num_classes: usize,
}

impl GridSpec {
    pub fn new(origin: [f64; 3], dims: [usize; 3], voxel_size: f64, num_classes: usize) -> Result<Self> {
        let spec = GridSpec { origin, dims, voxel_size, num_classes };
        spec.validate()?;
        Ok(spec)
    }

    /// 200 x 200 x 16 voxels of 0.4 m over [-40,40] x [-40,40] x [-1,5.4], 17 classes.
    pub fn full_scale() -> Self {
        GridSpec {
            origin: [-40.0, -40.0, -1.0],
            dims: [200, 200, 16],
            voxel_size: 0.4,
            num_classes: 17,
        }
    }

    /// 50 x 50 x 8 voxels of 0.4 m centered on the ego in x/y.
    pub fn desk(num_classes: usize) -> Self {
        GridSpec {
            origin: [-10.0, -10.0, -1.0],
            dims: [50, 50, 8],
            voxel_size: 0.4,
            num_classes,
        }
    }

    /// A cube of `n^3` voxels centered on the origin in x/y, starting at z = -1.
    pub fn cube(n: usize, voxel_size: f64, num_classes: usize) -> Self {
        let half = n as f64 * voxel_size / 2.0;
        GridSpec {
            origin: [-half, -half, -1.0],
            dims: [n, n, n],
            voxel_size,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::validation(format!("grid dims {:?} must be >= 1", self.dims)));
        }
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::validation(format!("voxel size {} must be > 0", self.voxel_size)));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::validation(format!("class count {} must be in 1..=255", self.num_classes)));
        }
        if self.origin.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("non-finite grid origin"));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Label used for free space.
    pub fn free_label(&self) -> u8 {
        self.num_classes as u8
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let iz = index % self.dims[2];
        let rest = index / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], iz]
    }

    #[inline]
    pub fn center_of(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (ix as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (iy as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (iz as f64 + 0.5) * self.voxel_size,
        )
    }

    pub fn center(&self, index: usize) -> Vector3<f64> {
        let [ix, iy, iz] = self.coords(index);
        self.center_of(ix, iy, iz)
    }

    /// Upper corner of the volume.
    pub fn extent_max(&self) -> [f64; 3] {
        [
            self.origin[0] + self.dims[0] as f64 * self.voxel_size,
            self.origin[1] + self.dims[1] as f64 * self.voxel_size,
            self.origin[2] + self.dims[2] as f64 * self.voxel_size,
        ]
    }

    /// Inclusive voxel index range along `axis` whose centers fall in `[lo, hi]`.
    /// `None` when no center does.
    pub fn center_range(&self, axis: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let n = self.dims[axis] as f64;
        let a = ((lo - self.origin[axis]) / self.voxel_size - 0.5).ceil().max(0.0);
        let b = ((hi - self.origin[axis]) / self.voxel_size - 0.5).floor().min(n - 1.0);
        if a.is_nan() || b.is_nan() || a > b {
            None
        } else {
            Some((a as usize, b as usize))
        }
    }

    pub fn same_as(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::validation(format!("grid specs differ: {self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Per-voxel occupancy probability and class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticOccupancyGrid {
    pub spec: GridSpec,
    pub occ_prob: Vec<f64>,
    /// `num_voxels x num_classes`; rows are zero where nothing contributes.
    pub class_prob: Vec<f64>,
}

impl SemanticOccupancyGrid {
    pub fn empty(spec: GridSpec) -> Self {
        let v = spec.num_voxels();
        let c = spec.num_classes;
        SemanticOccupancyGrid { spec, occ_prob: vec![0.0; v], class_prob: vec![0.0; v * c] }
    }

    pub fn class_row(&self, voxel: usize) -> &[f64] {
        let c = self.spec.num_classes;
        &self.class_prob[voxel * c..(voxel + 1) * c]
    }

    /// Probability over the `C + 1` categories (semantic classes then free).
    pub fn category_probs(&self, voxel: usize) -> Vec<f64> {
        let occ = self.occ_prob[voxel];
        let mut out: Vec<f64> = self.class_row(voxel).iter().map(|p| occ * p).collect();
        out.push(1.0 - occ);
        out
    }

    /// Dense `V x (C + 1)` category field, row-major.
    pub fn category_field(&self) -> Vec<f64> {
        (0..self.spec.num_voxels()).flat_map(|v| self.category_probs(v)).collect()
    }
}

/// Hard labels; `num_classes` denotes free.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub spec: GridSpec,
    pub labels: Vec<u8>,
}

impl LabelGrid {
    pub fn free(spec: GridSpec) -> Self {
        let labels = vec![spec.free_label(); spec.num_voxels()];
        LabelGrid { spec, labels }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.labels.len() != self.spec.num_voxels() {
            return Err(Error::validation(format!(
                "label count {} != voxel count {}",
                self.labels.len(),
                self.spec.num_voxels()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l > self.spec.free_label()) {
            return Err(Error::validation(format!("label {bad} out of range")));
        }
        Ok(())
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.labels[self.spec.index(ix, iy, iz)]
    }

    pub fn is_occupied(&self, voxel: usize) -> bool {
        self.labels[voxel] != self.spec.free_label()
    }

    pub fn occupied_count(&self) -> usize {
        (0..self.labels.len()).filter(|&v| self.is_occupied(v)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let g = GridSpec::desk(4);
        for idx in [0, 1, 7, 8, 399, 19_999] {
            let [x, y, z] = g.coords(idx);
            assert_eq!(g.index(x, y, z), idx);
        }
    }

    #[test]
    fn full_scale_extent() {
        let g = GridSpec::full_scale();
        assert_eq!(g.extent_max(), [40.0, 40.0, 5.4]);
        assert_eq!(g.num_voxels(), 200 * 200 * 16);
    }

    #[test]
    fn center_range_clamps() {
        let g = GridSpec::new([0.0; 3], [10, 10, 10], 1.0, 2).unwrap();
        assert_eq!(g.center_range(0, 0.5, 0.5), Some((0, 0)));
        assert_eq!(g.center_range(0, 0.6, 1.4), None);
        assert_eq!(g.center_range(0, -100.0, 100.0), Some((0, 9)));
        assert_eq!(g.center_range(0, 20.0, 30.0), None);
    }

    #[test]
    fn invalid_specs() {
        assert!(GridSpec::new([0.0; 3], [0, 1, 1], 1.0, 2).is_err());
        assert!(GridSpec::new([0.0; 3], [1, 1, 1], 0.0, 2).is_err());
        assert!(GridSpec::new([0.0; 3], [1, 1, 1], 1.0, 0).is_err());
    }
}

//! Axis-aligned world bounds and the voxel lattice derived from them.

use serde::{Deserialize, Serialize};

/// Inclusive-min, exclusive-max world-space box in the radar frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds3 {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] < self.max[k])
    }

    pub fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = p;
        for k in 0..3 {
            out[k] = out[k].clamp(self.min[k], self.max[k]);
        }
        out
    }

    pub fn centroid(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|k| self.max[k] > self.min[k] && self.min[k].is_finite() && self.max[k].is_finite())
    }
}

/// Uniform cubic voxel lattice over a [`Bounds3`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn from_bounds(bounds: &Bounds3, voxel_size: f64) -> Self {
        let ext = bounds.extent();
        let dims = [
            (ext[0] / voxel_size).ceil().max(1.0) as usize,
            (ext[1] / voxel_size).ceil().max(1.0) as usize,
            (ext[2] / voxel_size).ceil().max(1.0) as usize,
        ];
        Self {
            origin: bounds.min,
            voxel_size,
            dims,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Voxel index containing `p`, or None when out of range.
    pub fn voxel_of(&self, p: &[f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let rel = (p[k] - self.origin[k]) / self.voxel_size;
            if rel < 0.0 {
                return None;
            }
            let i = rel.floor() as usize;
            if i >= self.dims[k] {
                return None;
            }
            idx[k] = i;
        }
        Some(idx)
    }

    pub fn center(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (idx[2] as f64 + 0.5) * self.voxel_size,
        ]
    }

    /// BEV cell under (x, y), ignoring height.
    pub fn bev_cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let p = [x, y, self.origin[2]];
        self.voxel_of(&p).map(|v| (v[0], v[1]))
    }

    /// World-space center of a BEV cell.
    pub fn bev_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin[0] + (ix as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (iy as f64 + 0.5) * self.voxel_size,
        )
    }
}

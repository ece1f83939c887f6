//! Radar point clouds and their deterministic pillarization.
//!
//! The learned RCS/velocity encoder of the full system is replaced by a
//! fixed recipe: per-pillar mean position offsets for the geometry half of
//! the channels, max-RCS and mean radial velocity for the signature half,
//! each projected by a seeded linear map.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::VoxelGridSpec;
use crate::nn::{subseed, Activation, DenseStack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Radar cross-section, dB.
    pub rcs: f64,
    /// Radial velocity, m/s.
    pub velocity: f64,
}

impl RadarPoint {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// 4D radar returns; may be empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RadarCloud {
    pub points: Vec<RadarPoint>,
}

impl RadarCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(RadarPoint::position).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            let finite = [p.x, p.y, p.z, p.rcs, p.velocity]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::DimensionMismatch(format!(
                    "non-finite radar point at index {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Sparse BEV pillars: unique cell coordinates with one feature row each.
/// The first half of the channels is geometry-derived, the second half
/// carries RCS/velocity statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarSet {
    pub coords: Vec<(usize, usize)>,
    /// Row-major G x C.
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl PillarSet {
    pub fn empty(feature_dim: usize) -> Self {
        Self {
            coords: Vec::new(),
            features: Vec::new(),
            feature_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature(&self, g: usize) -> &[f64] {
        &self.features[g * self.feature_dim..(g + 1) * self.feature_dim]
    }
}

/// Aggregate radar returns into BEV pillars over `grid`. Points outside the
/// grid are dropped; cells are emitted in ascending (ix, iy) order so the
/// result is independent of input ordering up to per-cell accumulation.
pub fn pillarize(cloud: &RadarCloud, grid: &VoxelGridSpec, channels: usize, seed: u64) -> PillarSet {
    assert!(channels >= 2, "pillar features need at least two channels");
    let geo_dim = channels / 2;
    let sig_dim = channels - geo_dim;
    let geo_map = DenseStack::seeded(&[3, geo_dim], &[Activation::None], subseed(seed, 0x9107));
    let sig_map = DenseStack::seeded(&[2, sig_dim], &[Activation::None], subseed(seed, 0x9108));

    // BTreeMap keeps cell order deterministic.
    let mut cells: BTreeMap<(usize, usize), Vec<&RadarPoint>> = BTreeMap::new();
    let z_mid = grid.origin[2] + 0.5 * grid.dims[2] as f64 * grid.voxel_size;
    for p in &cloud.points {
        if let Some((ix, iy)) = grid.bev_cell_of(p.x, p.y) {
            // Height must also fall inside the volume for the return to count.
            if p.z >= grid.origin[2]
                && p.z < grid.origin[2] + grid.dims[2] as f64 * grid.voxel_size
            {
                cells.entry((ix, iy)).or_default().push(p);
            }
        }
    }

    let mut coords = Vec::with_capacity(cells.len());
    let mut features = Vec::with_capacity(cells.len() * channels);
    for ((ix, iy), pts) in cells {
        let n = pts.len() as f64;
        let (cx, cy) = grid.bev_center(ix, iy);
        let mean_dx = pts.iter().map(|p| p.x - cx).sum::<f64>() / n;
        let mean_dy = pts.iter().map(|p| p.y - cy).sum::<f64>() / n;
        let mean_dz = pts.iter().map(|p| p.z - z_mid).sum::<f64>() / n;
        let max_rcs = pts.iter().map(|p| p.rcs).fold(f64::NEG_INFINITY, f64::max);
        let mean_vel = pts.iter().map(|p| p.velocity).sum::<f64>() / n;

        let geo = geo_map
            .forward(&[mean_dx, mean_dy, mean_dz])
            .expect("geo map width fixed");
        let sig = sig_map.forward(&[max_rcs, mean_vel]).expect("sig map width fixed");
        coords.push((ix, iy));
        features.extend_from_slice(&geo);
        features.extend_from_slice(&sig);
    }
    PillarSet {
        coords,
        features,
        feature_dim: channels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Bounds3;

    fn grid() -> VoxelGridSpec {
        VoxelGridSpec::from_bounds(&Bounds3::new([0.0, -3.2, -1.0], [6.4, 3.2, 1.0]), 0.32)
    }

    #[test]
    fn empty_cloud_gives_empty_pillars() {
        let p = pillarize(&RadarCloud::default(), &grid(), 8, 1);
        assert!(p.is_empty());
        assert_eq!(p.feature_dim, 8);
    }

    #[test]
    fn points_in_one_cell_share_a_pillar() {
        let cloud = RadarCloud {
            points: vec![
                RadarPoint { x: 1.0, y: 0.0, z: 0.0, rcs: 5.0, velocity: 1.0 },
                RadarPoint { x: 1.05, y: 0.05, z: 0.1, rcs: 9.0, velocity: 3.0 },
                RadarPoint { x: 4.0, y: -2.0, z: 0.0, rcs: 1.0, velocity: 0.0 },
                // Outside the grid: dropped.
                RadarPoint { x: 99.0, y: 0.0, z: 0.0, rcs: 1.0, velocity: 0.0 },
            ],
        };
        let p = pillarize(&cloud, &grid(), 8, 1);
        assert_eq!(p.len(), 2);
        // Unique, ordered coordinates.
        assert!(p.coords.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn pillarize_is_order_invariant_and_seeded() {
        let mut pts = vec![
            RadarPoint { x: 1.0, y: 0.0, z: 0.0, rcs: 5.0, velocity: 1.0 },
            RadarPoint { x: 4.0, y: -2.0, z: 0.3, rcs: 1.0, velocity: -2.0 },
            RadarPoint { x: 2.5, y: 1.5, z: -0.5, rcs: 3.0, velocity: 0.5 },
        ];
        let a = pillarize(&RadarCloud { points: pts.clone() }, &grid(), 6, 7);
        pts.reverse();
        let b = pillarize(&RadarCloud { points: pts }, &grid(), 6, 7);
        assert_eq!(a, b);
        let c = pillarize(
            &RadarCloud {
                points: vec![RadarPoint { x: 1.0, y: 0.0, z: 0.0, rcs: 5.0, velocity: 1.0 }],
            },
            &grid(),
            6,
            8,
        );
        assert_ne!(a.features.get(..6), c.features.get(..6));
    }
}

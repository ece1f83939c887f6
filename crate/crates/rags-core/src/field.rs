//! Gaussian field: the continuous scene representation.

use crate::error::{Error, Result};

/// Width of one explicit-attribute row: position (3) + quaternion (4) +
/// scale (3) + opacity (1).
pub const EXPLICIT_WIDTH: usize = 11;

/// A set of N anisotropic 3D Gaussians in the radar frame.
///
/// Explicit attributes (position, rotation, scale, opacity) describe the
/// physical footprint; the feature rows are the implicit embedding updated
/// by the aggregation passes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub positions: Vec<[f64; 3]>,
    /// Unit quaternions, (w, x, y, z).
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    /// Row-major N x C embedding.
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl GaussianField {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn feature_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Concatenated explicit attributes, one row of width 11 per Gaussian.
    pub fn explicit_attributes(&self) -> Vec<[f64; EXPLICIT_WIDTH]> {
        (0..self.len())
            .map(|i| {
                let p = self.positions[i];
                let r = self.rotations[i];
                let s = self.scales[i];
                [
                    p[0], p[1], p[2], r[0], r[1], r[2], r[3], s[0], s[1], s[2],
                    self.opacities[i],
                ]
            })
            .collect()
    }

    /// Check the structural invariants: matching row counts, unit
    /// quaternions (1e-6), positive scales, opacities in (0, 1), finite
    /// values throughout.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.rotations.len() != n
            || self.scales.len() != n
            || self.opacities.len() != n
            || self.features.len() != n * self.feature_dim
        {
            return Err(Error::DimensionMismatch(format!(
                "field rows disagree: {} positions, {} rotations, {} scales, {} opacities, {} feature values (dim {})",
                n,
                self.rotations.len(),
                self.scales.len(),
                self.opacities.len(),
                self.features.len(),
                self.feature_dim
            )));
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::NonUnitQuaternion(norm));
            }
            if !q.iter().all(|v| v.is_finite()) {
                return Err(Error::DimensionMismatch(format!(
                    "non-finite quaternion at row {i}"
                )));
            }
        }
        for (i, s) in self.scales.iter().enumerate() {
            if !s.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(Error::DimensionMismatch(format!(
                    "scale at row {i} must be positive and finite, got {s:?}"
                )));
            }
        }
        for (i, &o) in self.opacities.iter().enumerate() {
            if !(o > 0.0 && o < 1.0) {
                return Err(Error::DimensionMismatch(format!(
                    "opacity at row {i} must lie in (0, 1), got {o}"
                )));
            }
        }
        let finite = self.positions.iter().flatten().all(|v| v.is_finite())
            && self.features.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::DimensionMismatch(
                "non-finite position or feature value".into(),
            ));
        }
        Ok(())
    }
}

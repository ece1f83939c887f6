//! Image feature map with per-pixel depth distribution.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Enhanced image features plus the depth probability volume and the sparse
/// radar depth prior. The depth-aware 3D volume consumed by the aggregation
/// pass is the outer product `feature_map x depth_prob`, exposed lazily by
/// [`crate::ima::VolumeView`].
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    /// H x W x C.
    pub feature_map: Tensor,
    /// H x W x D; each pixel a probability vector over depth bins.
    pub depth_prob: Tensor,
    /// H x W metric depth, zero where no radar return projects.
    pub sparse_depth: Tensor,
}

impl FeatureVolume {
    pub fn height(&self) -> usize {
        self.feature_map.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.feature_map.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.feature_map.dims()[2]
    }

    pub fn num_bins(&self) -> usize {
        self.depth_prob.dims()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let fd = self.feature_map.dims();
        let pd = self.depth_prob.dims();
        let sd = self.sparse_depth.dims();
        if fd.len() != 3 || pd.len() != 3 || sd.len() != 2 {
            return Err(Error::DimensionMismatch(
                "feature volume ranks must be (3, 3, 2)".into(),
            ));
        }
        if fd[0] != pd[0] || fd[1] != pd[1] || fd[0] != sd[0] || fd[1] != sd[1] {
            return Err(Error::DimensionMismatch(format!(
                "feature volume shapes disagree: {fd:?} vs {pd:?} vs {sd:?}"
            )));
        }
        for row in 0..pd[0] {
            for col in 0..pd[1] {
                let p = self.depth_prob.slice3(row, col);
                let sum: f64 = p.iter().sum();
                if (sum - 1.0).abs() > 1e-5 || p.iter().any(|&v| v < 0.0) {
                    return Err(Error::UnnormalizedDistribution { row, col, sum });
                }
            }
        }
        if !self.feature_map.is_finite() || !self.sparse_depth.is_finite() {
            return Err(Error::DimensionMismatch("non-finite feature volume".into()));
        }
        Ok(())
    }
}

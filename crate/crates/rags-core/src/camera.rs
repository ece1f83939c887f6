//! Pinhole camera model and frustum geometry.
//!
//! The radar frame doubles as the world frame: every field operation keeps
//! positions in radar coordinates and the camera extrinsics map radar to
//! camera. Frustum coordinates are (u, v, d): continuous pixel position plus
//! metric depth. Pixel (u, v) indexes the half-open rectangle [0, W) x [0, H).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Near plane guarding the projective division (meters).
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics plus radar-to-camera extrinsics and the depth-bin ladder.
///
/// Serialization goes through [`CameraModelRaw`] so that loading re-validates
/// the invariants and rebuilds the cached inverse intrinsics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CameraModelRaw", into = "CameraModelRaw")]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    intrinsics_inv: Matrix3<f64>,
    extrinsics_rotation: Matrix3<f64>,
    extrinsics_translation: Vector3<f64>,
    width: usize,
    height: usize,
    depth_bins: Vec<f64>,
}

/// Plain-array mirror of [`CameraModel`] used for (de)serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModelRaw {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics_rotation: [[f64; 3]; 3],
    pub extrinsics_translation: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub depth_bins: Vec<f64>,
}

impl TryFrom<CameraModelRaw> for CameraModel {
    type Error = Error;

    fn try_from(raw: CameraModelRaw) -> Result<Self> {
        let rows = |m: &[[f64; 3]; 3]| {
            Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            )
        };
        CameraModel::new(
            rows(&raw.intrinsics),
            rows(&raw.extrinsics_rotation),
            Vector3::from_column_slice(&raw.extrinsics_translation),
            raw.width,
            raw.height,
            raw.depth_bins,
        )
    }
}

impl From<CameraModel> for CameraModelRaw {
    fn from(cam: CameraModel) -> Self {
        let rows = |m: &Matrix3<f64>| {
            [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ]
        };
        CameraModelRaw {
            intrinsics: rows(&cam.intrinsics),
            extrinsics_rotation: rows(&cam.extrinsics_rotation),
            extrinsics_translation: [
                cam.extrinsics_translation.x,
                cam.extrinsics_translation.y,
                cam.extrinsics_translation.z,
            ],
            width: cam.width,
            height: cam.height,
            depth_bins: cam.depth_bins,
        }
    }
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics_rotation: Matrix3<f64>,
        extrinsics_translation: Vector3<f64>,
        width: usize,
        height: usize,
        depth_bins: Vec<f64>,
    ) -> Result<Self> {
        if (intrinsics[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidCamera(format!(
                "K[2][2] must be 1, got {}",
                intrinsics[(2, 2)]
            )));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        let should_be_identity = extrinsics_rotation * extrinsics_rotation.transpose();
        let ortho_err = (should_be_identity - Matrix3::identity()).abs().max();
        if ortho_err > 1e-9 {
            return Err(Error::InvalidCamera(format!(
                "extrinsic rotation is not orthonormal (max |R R^T - I| = {ortho_err:.3e})"
            )));
        }
        let det = extrinsics_rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCamera(format!(
                "extrinsic rotation determinant {det} is not +1"
            )));
        }
        if depth_bins.is_empty() {
            return Err(Error::InvalidCamera("depth_bins must be nonempty".into()));
        }
        if depth_bins[0] <= 0.0 || depth_bins.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidCamera(
                "depth_bins must be strictly increasing and positive".into(),
            ));
        }
        let intrinsics_inv = intrinsics
            .try_inverse()
            .ok_or_else(|| Error::InvalidCamera("intrinsics are singular".into()))?;
        Ok(Self {
            intrinsics,
            intrinsics_inv,
            extrinsics_rotation,
            extrinsics_translation,
            width,
            height,
            depth_bins,
        })
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.extrinsics_rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.extrinsics_translation
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth_bins(&self) -> &[f64] {
        &self.depth_bins
    }

    pub fn num_bins(&self) -> usize {
        self.depth_bins.len()
    }

    /// Radar-frame point to camera coordinates.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsics_rotation * p + self.extrinsics_translation
    }

    /// Project a radar-frame point to (u, v, d).
    ///
    /// (u d, v d, d)^T = K (R p + T). Coordinates are continuous and not
    /// clamped to the image; callers test FoV membership separately.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        let cam = self.to_camera(p);
        let d = cam.z;
        if d <= MIN_DEPTH {
            return Err(Error::NonPositiveDepth(d));
        }
        let uvw = self.intrinsics * cam;
        Ok((uvw.x / d, uvw.y / d, d))
    }

    /// Inverse of [`project`](Self::project): pixel plus metric depth back to
    /// the radar frame.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Result<Vector3<f64>> {
        if d <= 0.0 {
            return Err(Error::NonPositiveDepth(d));
        }
        let cam = self.intrinsics_inv * Vector3::new(u * d, v * d, d);
        Ok(self.extrinsics_rotation.transpose() * (cam - self.extrinsics_translation))
    }

    /// Indices of points that project inside [0, W) x [0, H) with positive
    /// depth; order-preserving.
    pub fn in_fov(&self, points: &[[f64; 3]]) -> Vec<usize> {
        points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let (u, v, _) = self.project(&Vector3::from_column_slice(p)).ok()?;
                let inside =
                    u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
                inside.then_some(i)
            })
            .collect()
    }

    /// Batch projection into frustum coordinates (u, v, d).
    pub fn frustum_transform(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        points
            .iter()
            .map(|p| {
                let (u, v, d) = self.project(&Vector3::from_column_slice(p))?;
                Ok([u, v, d])
            })
            .collect()
    }

    /// Batch inverse of [`frustum_transform`](Self::frustum_transform).
    pub fn frustum_inverse(&self, frustum: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        frustum
            .iter()
            .map(|f| {
                let p = self.unproject(f[0], f[1], f[2])?;
                Ok([p.x, p.y, p.z])
            })
            .collect()
    }

    /// Metric depth to continuous bin index, piecewise-linear over the bin
    /// ladder. Values outside the ladder extrapolate past [0, D-1] so that
    /// out-of-range samples fall outside the volume.
    pub fn depth_to_bin(&self, d: f64) -> f64 {
        let bins = &self.depth_bins;
        if bins.len() == 1 {
            return d - bins[0];
        }
        // Segment index for interior depths; first/last segment extrapolates.
        let seg = match bins.iter().position(|&b| d < b) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => bins.len() - 2,
        };
        seg as f64 + (d - bins[seg]) / (bins[seg + 1] - bins[seg])
    }

    /// Inverse of [`depth_to_bin`](Self::depth_to_bin).
    pub fn bin_to_depth(&self, b: f64) -> f64 {
        let bins = &self.depth_bins;
        if bins.len() == 1 {
            return bins[0] + b;
        }
        let seg = (b.floor() as i64).clamp(0, bins.len() as i64 - 2) as usize;
        bins[seg] + (b - seg as f64) * (bins[seg + 1] - bins[seg])
    }
}

//! Frustum-based localization initiation: build the initial Gaussian
//! positions from unprojected foreground pixels, radar returns, and
//! furthest-point samples over the in-frustum voxel lattice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::grid::{Bounds3, VoxelGridSpec};
use crate::nn::subseed;
use crate::tensor::Tensor;

/// Initial opacity for a fresh field; low enough that an untrained raster
/// stays far from saturation.
pub const INIT_OPACITY: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitConfig {
    /// Foreground pixels to unproject.
    pub top_k: usize,
    /// Furthest-point samples over the in-frustum lattice.
    pub n_sample: usize,
    /// Total anchor budget; the output is always exactly this long.
    pub n_total: usize,
    pub voxel_size: f64,
    pub bounds: Bounds3,
}

impl InitConfig {
    /// Split the budget as K = N/4, samples = N/2, remainder to radar.
    pub fn desk(n_total: usize, bounds: Bounds3, voxel_size: f64) -> Self {
        Self {
            top_k: n_total / 4,
            n_sample: n_total / 2,
            n_total,
            voxel_size,
            bounds,
        }
    }

    pub fn grid(&self) -> VoxelGridSpec {
        VoxelGridSpec::from_bounds(&self.bounds, self.voxel_size)
    }
}

/// The `k` pixels with highest logit, ties broken by row-major pixel index.
/// Returns (u, v, depth) triples on the integer pixel lattice; `k` beyond
/// the pixel count clamps.
pub fn select_foreground(logits: &Tensor, depth: &Tensor, k: usize) -> Vec<(f64, f64, f64)> {
    debug_assert_eq!(logits.dims(), depth.dims());
    let (h, w) = (logits.dims()[0], logits.dims()[1]);
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| {
        logits.data()[b]
            .partial_cmp(&logits.data()[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(k.min(h * w))
        .map(|idx| {
            let (row, col) = (idx / w, idx % w);
            (col as f64, row as f64, depth.at2(row, col))
        })
        .collect()
}

/// Elementwise unprojection of (u, v, d) pixels into the radar frame.
pub fn unproject_foreground(
    camera: &CameraModel,
    pixels: &[(f64, f64, f64)],
) -> Result<Vec<[f64; 3]>> {
    pixels
        .iter()
        .map(|&(u, v, d)| {
            let p = camera.unproject(u, v, d)?;
            Ok([p.x, p.y, p.z])
        })
        .collect()
}

/// Voxel-center candidates inside the camera FoV, in lattice order.
pub fn frustum_candidates(camera: &CameraModel, config: &InitConfig) -> Vec<[f64; 3]> {
    let grid = config.grid();
    let mut centers = Vec::with_capacity(grid.num_voxels());
    for ix in 0..grid.dims[0] {
        for iy in 0..grid.dims[1] {
            for iz in 0..grid.dims[2] {
                centers.push(grid.center([ix, iy, iz]));
            }
        }
    }
    camera
        .in_fov(&centers)
        .into_iter()
        .map(|i| centers[i])
        .collect()
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy furthest-point selection from an explicit start index. Each pick
/// maximizes the minimum distance to the chosen set; ties take the lowest
/// candidate index. `n` beyond the candidate count clamps.
pub fn fps_select(candidates: &[[f64; 3]], start: usize, n: usize) -> Vec<[f64; 3]> {
    let n = n.min(candidates.len());
    if n == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; candidates.len()];
    let push = |idx: usize, chosen: &mut Vec<[f64; 3]>, min_d2: &mut [f64]| {
        chosen.push(candidates[idx]);
        for (c, d) in candidates.iter().zip(min_d2.iter_mut()) {
            *d = d.min(dist2(c, &candidates[idx]));
        }
    };
    push(start, &mut chosen, &mut min_d2);
    while chosen.len() < n {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        push(best, &mut chosen, &mut min_d2);
    }
    chosen
}

/// Extend an existing point set by `n` furthest-point picks from
/// `candidates`, measuring distance against `initial` plus everything
/// already picked. With an empty `initial` this reduces to plain FPS from
/// index 0 of the distance field (every candidate is infinitely far, so the
/// lowest index wins the first pick).
pub fn fps_extend(candidates: &[[f64; 3]], initial: &[[f64; 3]], n: usize) -> Vec<[f64; 3]> {
    let n = n.min(candidates.len());
    let mut min_d2: Vec<f64> = candidates
        .iter()
        .map(|c| {
            initial
                .iter()
                .map(|p| dist2(c, p))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        out.push(candidates[best]);
        for (c, d) in candidates.iter().zip(min_d2.iter_mut()) {
            *d = d.min(dist2(c, &candidates[best]));
        }
    }
    out
}

/// Furthest-point sampling over the in-frustum lattice, starting from the
/// candidate nearest the range centroid so the result needs no seed.
pub fn sample_frustum(
    camera: &CameraModel,
    config: &InitConfig,
    n_sample: usize,
) -> Result<Vec<[f64; 3]>> {
    let candidates = frustum_candidates(camera, config);
    if candidates.is_empty() {
        return Err(Error::EmptyFrustum);
    }
    let centroid = config.bounds.centroid();
    let mut start = 0;
    let mut best = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let d = dist2(c, &centroid);
        if d < best {
            best = d;
            start = i;
        }
    }
    Ok(fps_select(&candidates, start, n_sample))
}

/// Concatenate (unprojected, sampled, radar) positions and reconcile the
/// total against the anchor budget: overflow truncates the sampled block
/// first, then the radar tail, then the unprojected tail; underflow pads
/// with furthest-point picks measured against everything already gathered,
/// cycling the gathered set if the lattice runs dry. Outputs are clamped
/// into the configured range.
pub fn gather_positions(
    camera: &CameraModel,
    config: &InitConfig,
    p_unproj: &[[f64; 3]],
    p_sample: &[[f64; 3]],
    p_radar: &[[f64; 3]],
) -> Vec<[f64; 3]> {
    let n_total = config.n_total;
    let mut keep_u = p_unproj.len();
    let mut keep_s = p_sample.len();
    let mut keep_r = p_radar.len();
    let total = keep_u + keep_s + keep_r;
    if total > n_total {
        let mut over = total - n_total;
        let cut = over.min(keep_s);
        keep_s -= cut;
        over -= cut;
        let cut = over.min(keep_r);
        keep_r -= cut;
        over -= cut;
        keep_u -= over.min(keep_u);
    }

    let mut out = Vec::with_capacity(n_total);
    out.extend_from_slice(&p_unproj[..keep_u]);
    out.extend_from_slice(&p_sample[..keep_s]);
    out.extend_from_slice(&p_radar[..keep_r]);

    if out.len() < n_total {
        let deficit = n_total - out.len();
        let candidates = frustum_candidates(camera, config);
        let extra = fps_extend(&candidates, &out, deficit);
        out.extend_from_slice(&extra);
    }
    // Lattice exhausted (or empty): cycle what we have, or fall back to the
    // range centroid for a degenerate empty gather.
    if out.is_empty() {
        out.push(config.bounds.centroid());
    }
    let mut cycle = 0;
    while out.len() < n_total {
        let p = out[cycle % out.len()];
        out.push(p);
        cycle += 1;
    }

    for p in &mut out {
        *p = config.bounds.clamp(*p);
    }
    out
}

/// Fresh field over the gathered positions: identity rotations, half-voxel
/// isotropic scales, fixed low opacity, seeded feature embedding.
pub fn init_field(
    positions: Vec<[f64; 3]>,
    feature_dim: usize,
    voxel_size: f64,
    seed: u64,
) -> GaussianField {
    let n = positions.len();
    let scale = voxel_size / 2.0;
    let mut rng = ChaCha20Rng::seed_from_u64(subseed(seed, 0xf1e1));
    let bound = 1.0 / (feature_dim as f64).sqrt();
    let features = (0..n * feature_dim)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    GaussianField {
        positions,
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; n],
        scales: vec![[scale, scale, scale]; n],
        opacities: vec![INIT_OPACITY; n],
        features,
        feature_dim,
    }
}

//! Multi-level Gaussian fusion: tile-parallel BEV rasterization with
//! analytic gradients, level fusion, cross-modal fusion with radar pillars,
//! and perspective depth rendering.
//!
//! BEV accumulation is an unnormalized opacity-weighted sum: BEV has no
//! occlusion ordering, so each cell takes `sum_g opacity_g * exp(-m/2) *
//! feature_g` over Gaussians within the cutoff. The perspective depth
//! renderer composites front-to-back without normalizing by accumulated
//! alpha; the two-Gaussian example in the tests pins that convention.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::BevGrid;
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::nn::{subseed, DenseStack};
use crate::radar::PillarSet;
use crate::tensor::Tensor;

/// Variance floor (m^2) keeping BEV covariances invertible.
pub const EIGENVALUE_FLOOR: f64 = 1e-8;

/// Accumulated-alpha threshold below which a rendered pixel reports depth 0.
pub const RENDER_ALPHA_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplatConfig {
    pub dims: (usize, usize),
    pub origin: [f64; 2],
    pub cell_size: f64,
    /// Hard support cutoff in Mahalanobis sigmas.
    pub cutoff_sigma: f64,
    /// Tile edge in cells.
    pub tile_size: usize,
    /// BEV levels fused by MGF.
    pub levels: usize,
}

impl SplatConfig {
    pub fn desk(dims: (usize, usize), origin: [f64; 2], cell_size: f64) -> Self {
        Self {
            dims,
            origin,
            cell_size,
            cutoff_sigma: 3.0,
            tile_size: 16,
            levels: 2,
        }
    }
}

/// 2x2 symmetric positive-definite BEV covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevCovariance {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl BevCovariance {
    /// Inverse entries (ixx, ixy, iyy).
    #[inline]
    pub fn inverse(&self) -> (f64, f64, f64) {
        let det = self.xx * self.yy - self.xy * self.xy;
        (self.yy / det, -self.xy / det, self.xx / det)
    }

    /// Squared Mahalanobis distance of the offset (dx, dy).
    #[inline]
    pub fn mahalanobis_sq(&self, dx: f64, dy: f64) -> f64 {
        let (ixx, ixy, iyy) = self.inverse();
        dx * dx * ixx + 2.0 * dx * dy * ixy + dy * dy * iyy
    }
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quaternion_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Apply the variance floor to a symmetric 2x2 matrix by flooring its
/// eigenvalues at `EIGENVALUE_FLOOR`.
fn floor_eigenvalues(xx: f64, xy: f64, yy: f64) -> BevCovariance {
    let tr = xx + yy;
    let disc = (0.25 * (xx - yy) * (xx - yy) + xy * xy).sqrt();
    let l1 = 0.5 * tr + disc;
    let l2 = 0.5 * tr - disc;
    if l2 >= EIGENVALUE_FLOOR {
        return BevCovariance { xx, xy, yy };
    }
    // Eigenvector for l1; the second axis is its perpendicular.
    let (ex, ey) = if xy.abs() > 1e-300 {
        (l1 - yy, xy)
    } else if xx >= yy {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let n = (ex * ex + ey * ey).sqrt();
    let (ex, ey) = (ex / n, ey / n);
    let l1f = l1.max(EIGENVALUE_FLOOR);
    let l2f = l2.max(EIGENVALUE_FLOOR);
    BevCovariance {
        xx: l1f * ex * ex + l2f * ey * ey,
        xy: (l1f - l2f) * ex * ey,
        yy: l1f * ey * ey + l2f * ex * ex,
    }
}

/// BEV (top-down) covariance of one Gaussian: the top-left 2x2 block of
/// R diag(s^2) R^T, eigenvalue-floored.
pub fn bev_covariance(rotation: &[f64; 4], scale: &[f64; 3]) -> Result<BevCovariance> {
    let norm = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::NonUnitQuaternion(norm));
    }
    let r = quaternion_matrix(rotation);
    let mut xx = 0.0;
    let mut xy = 0.0;
    let mut yy = 0.0;
    for k in 0..3 {
        let s2 = scale[k] * scale[k];
        let ax = r[(0, k)];
        let ay = r[(1, k)];
        xx += s2 * ax * ax;
        xy += s2 * ax * ay;
        yy += s2 * ay * ay;
    }
    Ok(floor_eigenvalues(xx, xy, yy))
}

/// Instrumentation counters for one rasterization call.
#[derive(Debug, Clone, Default)]
pub struct RasterStats {
    /// Gaussian entries binned per tile, tile-major (tx * tiles_y + ty).
    pub per_tile_gaussians: Vec<usize>,
    /// (gaussian, cell) pairs that passed the cutoff and accumulated.
    pub cells_written: u64,
    pub tiles: (usize, usize),
}

struct Footprint {
    mean: [f64; 2],
    inv: (f64, f64, f64),
    opacity: f64,
    /// Inclusive cell bounds of the cutoff ellipse's AABB.
    cell_min: (usize, usize),
    cell_max: (usize, usize),
}

fn footprints(field: &GaussianField, config: &SplatConfig) -> Result<Vec<Option<Footprint>>> {
    let (x_cells, y_cells) = config.dims;
    let cut = config.cutoff_sigma;
    field
        .positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let cov = bev_covariance(&field.rotations[i], &field.scales[i])?;
            let rx = cut * cov.xx.sqrt();
            let ry = cut * cov.yy.sqrt();
            let lo_x = (p[0] - rx - config.origin[0]) / config.cell_size - 0.5;
            let hi_x = (p[0] + rx - config.origin[0]) / config.cell_size - 0.5;
            let lo_y = (p[1] - ry - config.origin[1]) / config.cell_size - 0.5;
            let hi_y = (p[1] + ry - config.origin[1]) / config.cell_size - 0.5;
            if hi_x < 0.0 || hi_y < 0.0 || lo_x > (x_cells - 1) as f64 || lo_y > (y_cells - 1) as f64
            {
                return Ok(None);
            }
            let cell_min = (
                lo_x.ceil().max(0.0) as usize,
                lo_y.ceil().max(0.0) as usize,
            );
            let cell_max = (
                (hi_x.floor() as usize).min(x_cells - 1),
                (hi_y.floor() as usize).min(y_cells - 1),
            );
            if cell_min.0 > cell_max.0 || cell_min.1 > cell_max.1 {
                return Ok(None);
            }
            Ok(Some(Footprint {
                mean: [p[0], p[1]],
                inv: cov.inverse(),
                opacity: field.opacities[i],
                cell_min,
                cell_max,
            }))
        })
        .collect()
}

/// Tile-parallel BEV rasterization with instrumentation. Gaussians are
/// binned to the tiles their cutoff AABB overlaps; within a tile the
/// accumulation order is ascending Gaussian index, so the result is
/// independent of tile scheduling and thread count.
pub fn rasterize_with_stats(
    field: &GaussianField,
    config: &SplatConfig,
) -> Result<(BevGrid, RasterStats)> {
    let (x_cells, y_cells) = config.dims;
    let c = field.feature_dim;
    let tile = config.tile_size.max(1);
    let tiles_x = x_cells.div_ceil(tile);
    let tiles_y = y_cells.div_ceil(tile);
    let prints = footprints(field, config)?;

    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, fp) in prints.iter().enumerate() {
        let Some(fp) = fp else { continue };
        let t0 = (fp.cell_min.0 / tile, fp.cell_min.1 / tile);
        let t1 = (fp.cell_max.0 / tile, fp.cell_max.1 / tile);
        for tx in t0.0..=t1.0 {
            for ty in t0.1..=t1.1 {
                bins[tx * tiles_y + ty].push(i as u32);
            }
        }
    }

    let cut_sq = config.cutoff_sigma * config.cutoff_sigma;
    let half = 0.5 * config.cell_size;
    let tile_results: Vec<(Vec<f64>, u64)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t / tiles_y, t % tiles_y);
            let x0 = tx * tile;
            let y0 = ty * tile;
            let x1 = (x0 + tile).min(x_cells);
            let y1 = (y0 + tile).min(y_cells);
            let w = y1 - y0;
            let mut out = vec![0.0; (x1 - x0) * w * c];
            let mut written = 0u64;
            for &gi in &bins[t] {
                let fp = prints[gi as usize].as_ref().unwrap();
                let feature = field.feature(gi as usize);
                let cx0 = fp.cell_min.0.max(x0);
                let cx1 = fp.cell_max.0.min(x1 - 1);
                let cy0 = fp.cell_min.1.max(y0);
                let cy1 = fp.cell_max.1.min(y1 - 1);
                for ix in cx0..=cx1 {
                    let dx = config.origin[0] + ix as f64 * config.cell_size + half - fp.mean[0];
                    for iy in cy0..=cy1 {
                        let dy =
                            config.origin[1] + iy as f64 * config.cell_size + half - fp.mean[1];
                        let (ixx, ixy, iyy) = fp.inv;
                        let m = dx * dx * ixx + 2.0 * dx * dy * ixy + dy * dy * iyy;
                        if m > cut_sq {
                            continue;
                        }
                        let weight = fp.opacity * (-0.5 * m).exp();
                        let slot = ((ix - x0) * w + (iy - y0)) * c;
                        for (o, f) in out[slot..slot + c].iter_mut().zip(feature) {
                            *o += weight * f;
                        }
                        written += 1;
                    }
                }
            }
            (out, written)
        })
        .collect();

    let mut grid = BevGrid::zeros(config.origin, config.cell_size, config.dims, c);
    let mut cells_written = 0;
    for (t, (buf, written)) in tile_results.iter().enumerate() {
        let (tx, ty) = (t / tiles_y, t % tiles_y);
        let x0 = tx * tile;
        let y0 = ty * tile;
        let x1 = (x0 + tile).min(x_cells);
        let y1 = (y0 + tile).min(y_cells);
        let w = y1 - y0;
        for ix in x0..x1 {
            let src = ((ix - x0) * w) * c;
            let dst = (ix * y_cells + y0) * c;
            grid.data[dst..dst + w * c].copy_from_slice(&buf[src..src + w * c]);
        }
        cells_written += written;
    }
    let stats = RasterStats {
        per_tile_gaussians: bins.iter().map(Vec::len).collect(),
        cells_written,
        tiles: (tiles_x, tiles_y),
    };
    Ok((grid, stats))
}

pub fn rasterize(field: &GaussianField, config: &SplatConfig) -> Result<BevGrid> {
    rasterize_with_stats(field, config).map(|(g, _)| g)
}

/// All-pairs per-cell reference rasterizer: every cell visits every
/// Gaussian, no tiles, no AABB culling. Serves as the oracle for the tiled
/// path and as the benchmark baseline.
pub fn rasterize_naive(field: &GaussianField, config: &SplatConfig) -> Result<BevGrid> {
    let (x_cells, y_cells) = config.dims;
    let c = field.feature_dim;
    let mut covs = Vec::with_capacity(field.len());
    for i in 0..field.len() {
        covs.push(bev_covariance(&field.rotations[i], &field.scales[i])?);
    }
    let cut_sq = config.cutoff_sigma * config.cutoff_sigma;
    let half = 0.5 * config.cell_size;
    let mut grid = BevGrid::zeros(config.origin, config.cell_size, config.dims, c);
    for ix in 0..x_cells {
        for iy in 0..y_cells {
            let cx = config.origin[0] + ix as f64 * config.cell_size + half;
            let cy = config.origin[1] + iy as f64 * config.cell_size + half;
            let cell = grid.cell_mut(ix, iy);
            for g in 0..field.len() {
                let dx = cx - field.positions[g][0];
                let dy = cy - field.positions[g][1];
                let (ixx, ixy, iyy) = covs[g].inverse();
                let m = dx * dx * ixx + 2.0 * dx * dy * ixy + dy * dy * iyy;
                if m > cut_sq {
                    continue;
                }
                let weight = field.opacities[g] * (-0.5 * m).exp();
                for (o, f) in cell.iter_mut().zip(field.feature(g)) {
                    *o += weight * f;
                }
            }
        }
    }
    Ok(grid)
}

/// Gradients of a scalar loss through [`rasterize`], given the upstream
/// gradient on the output grid. Covers position-xy, scale, opacity, and
/// feature parameters; the hard cutoff contributes subgradient zero outside
/// the support, and rotation is not differentiated.
#[derive(Debug, Clone)]
pub struct SplatGradients {
    pub positions_xy: Vec<[f64; 2]>,
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    /// Row-major N x C.
    pub features: Vec<f64>,
}

pub fn rasterize_backward(
    field: &GaussianField,
    config: &SplatConfig,
    upstream: &Tensor,
) -> Result<SplatGradients> {
    let (x_cells, y_cells) = config.dims;
    let c = field.feature_dim;
    if upstream.dims() != [x_cells, y_cells, c] {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient dims {:?} must be [{x_cells}, {y_cells}, {c}]",
            upstream.dims()
        )));
    }
    let prints = footprints(field, config)?;
    let cut_sq = config.cutoff_sigma * config.cutoff_sigma;
    let half = 0.5 * config.cell_size;

    struct PerGaussian {
        pos: [f64; 2],
        scale: [f64; 3],
        opacity: f64,
        features: Vec<f64>,
    }

    let grads: Vec<PerGaussian> = (0..field.len())
        .into_par_iter()
        .map(|g| {
            let mut acc = PerGaussian {
                pos: [0.0; 2],
                scale: [0.0; 3],
                opacity: 0.0,
                features: vec![0.0; c],
            };
            let Some(fp) = prints[g].as_ref() else {
                return acc;
            };
            let feature = field.feature(g);
            let rot = quaternion_matrix(&field.rotations[g]);
            // BEV projections of the scaled principal axes.
            let axes = [
                (rot[(0, 0)], rot[(1, 0)]),
                (rot[(0, 1)], rot[(1, 1)]),
                (rot[(0, 2)], rot[(1, 2)]),
            ];
            let (ixx, ixy, iyy) = fp.inv;
            for ix in fp.cell_min.0..=fp.cell_max.0 {
                let dx = config.origin[0] + ix as f64 * config.cell_size + half - fp.mean[0];
                for iy in fp.cell_min.1..=fp.cell_max.1 {
                    let dy = config.origin[1] + iy as f64 * config.cell_size + half - fp.mean[1];
                    let m = dx * dx * ixx + 2.0 * dx * dy * ixy + dy * dy * iyy;
                    if m > cut_sq {
                        continue;
                    }
                    let e = (-0.5 * m).exp();
                    let w = fp.opacity * e;
                    let up = upstream.slice3(ix, iy);
                    let mut up_dot_f = 0.0;
                    for (u, f) in up.iter().zip(feature) {
                        up_dot_f += u * f;
                        }
                    for (gf, u) in acc.features.iter_mut().zip(up) {
                        *gf += w * u;
                    }
                    acc.opacity += e * up_dot_f;
                    // d = cell - mu, Q d:
                    let qdx = ixx * dx + ixy * dy;
                    let qdy = ixy * dx + iyy * dy;
                    let common = up_dot_f * w;
                    acc.pos[0] += common * qdx;
                    acc.pos[1] += common * qdy;
                    for k in 0..3 {
                        let a_dot_qd = axes[k].0 * qdx + axes[k].1 * qdy;
                        acc.scale[k] += common * field.scales[g][k] * a_dot_qd * a_dot_qd;
                    }
                }
            }
            acc
        })
        .collect();

    Ok(SplatGradients {
        positions_xy: grads.iter().map(|g| g.pos).collect(),
        scales: grads.iter().map(|g| g.scale).collect(),
        opacities: grads.iter().map(|g| g.opacity).collect(),
        features: grads.iter().flat_map(|g| g.features.clone()).collect(),
    })
}

/// 3x3 2D convolution kernel over BEV channels with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2DKernel {
    /// Tap-major 9 x c_out x c_in, tap index (dx+1)*3 + (dy+1).
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2DKernel {
    pub fn seeded(c_in: usize, c_out: usize, seed: u64) -> Self {
        let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(subseed(
            seed, 0x2dc0,
        ));
        let bound = 1.0 / ((9 * c_in) as f64).sqrt();
        let weights = (0..9 * c_in * c_out)
            .map(|_| rand::Rng::gen_range(&mut rng, -bound..bound))
            .collect();
        let bias = (0..c_out)
            .map(|_| rand::Rng::gen_range(&mut rng, -bound..bound))
            .collect();
        Self {
            weights,
            bias,
            c_in,
            c_out,
        }
    }

    /// Center tap passes channel c of the input block starting at `offset`
    /// straight through; everything else is zero.
    pub fn select_block(c_in: usize, c_out: usize, offset: usize) -> Self {
        let mut weights = vec![0.0; 9 * c_in * c_out];
        let center = 4; // (0+1)*3 + (0+1)
        for o in 0..c_out {
            weights[(center * c_out + o) * c_in + offset + o] = 1.0;
        }
        Self {
            weights,
            bias: vec![0.0; c_out],
            c_in,
            c_out,
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self::select_block(channels, channels, 0)
    }

    #[inline]
    fn tap(&self, dx: i64, dy: i64) -> &[f64] {
        let idx = ((dx + 1) * 3 + (dy + 1)) as usize;
        let n = self.c_in * self.c_out;
        &self.weights[idx * n..(idx + 1) * n]
    }
}

/// Dense 3x3 convolution over an X x Y x C_in buffer.
fn conv2d(
    data: &[f64],
    dims: (usize, usize),
    kernel: &Conv2DKernel,
) -> Vec<f64> {
    let (x_cells, y_cells) = dims;
    let (ci, co) = (kernel.c_in, kernel.c_out);
    let mut out = vec![0.0; x_cells * y_cells * co];
    for ix in 0..x_cells {
        for iy in 0..y_cells {
            let slot = (ix * y_cells + iy) * co;
            out[slot..slot + co].copy_from_slice(&kernel.bias);
            for dx in -1i64..=1 {
                let nx = ix as i64 + dx;
                if nx < 0 || nx >= x_cells as i64 {
                    continue;
                }
                for dy in -1i64..=1 {
                    let ny = iy as i64 + dy;
                    if ny < 0 || ny >= y_cells as i64 {
                        continue;
                    }
                    let src = ((nx as usize) * y_cells + ny as usize) * ci;
                    let input = &data[src..src + ci];
                    let tap = kernel.tap(dx, dy);
                    for o in 0..co {
                        let row = &tap[o * ci..(o + 1) * ci];
                        let mut acc = 0.0;
                        for (w, x) in row.iter().zip(input) {
                            acc += w * x;
                        }
                        out[slot + o] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Channel-concatenate the level grids and convolve down to the kernel's
/// output channels.
pub fn fuse_levels(bevs: &[BevGrid], kernel: &Conv2DKernel) -> Result<BevGrid> {
    let Some(first) = bevs.first() else {
        return Err(Error::DimensionMismatch("fuse_levels needs at least one grid".into()));
    };
    for b in bevs {
        if b.dims != first.dims || b.channels != first.channels {
            return Err(Error::DimensionMismatch(format!(
                "level grids disagree: {:?}x{} vs {:?}x{}",
                b.dims, b.channels, first.dims, first.channels
            )));
        }
    }
    let stacked = first.channels * bevs.len();
    if kernel.c_in != stacked {
        return Err(Error::DimensionMismatch(format!(
            "fusion kernel expects {} input channels, levels stack to {stacked}",
            kernel.c_in
        )));
    }
    let (x_cells, y_cells) = first.dims;
    let mut concat = vec![0.0; x_cells * y_cells * stacked];
    for ix in 0..x_cells {
        for iy in 0..y_cells {
            let dst = (ix * y_cells + iy) * stacked;
            for (l, b) in bevs.iter().enumerate() {
                let cell = b.cell(ix, iy);
                concat[dst + l * first.channels..dst + (l + 1) * first.channels]
                    .copy_from_slice(cell);
            }
        }
    }
    let data = conv2d(&concat, first.dims, kernel);
    Ok(BevGrid {
        origin: first.origin,
        cell_size: first.cell_size,
        dims: first.dims,
        channels: kernel.c_out,
        data,
    })
}

/// Scatter pillar features into an empty raster, concatenate with the
/// Gaussian BEV features, and convolve back down to C channels.
pub fn cross_modal_fuse(
    f_gs: &BevGrid,
    pillars: &PillarSet,
    kernel: &Conv2DKernel,
) -> Result<BevGrid> {
    let (x_cells, y_cells) = f_gs.dims;
    let c = f_gs.channels;
    if !pillars.is_empty() && pillars.feature_dim != c {
        return Err(Error::DimensionMismatch(format!(
            "pillar channels {} must match BEV channels {c}",
            pillars.feature_dim
        )));
    }
    if kernel.c_in != 2 * c {
        return Err(Error::DimensionMismatch(format!(
            "cross-modal kernel expects {} input channels, got {}",
            2 * c,
            kernel.c_in
        )));
    }
    let stacked = 2 * c;
    let mut concat = vec![0.0; x_cells * y_cells * stacked];
    for ix in 0..x_cells {
        for iy in 0..y_cells {
            let dst = (ix * y_cells + iy) * stacked;
            concat[dst..dst + c].copy_from_slice(f_gs.cell(ix, iy));
        }
    }
    for (g, &(ix, iy)) in pillars.coords.iter().enumerate() {
        if ix >= x_cells || iy >= y_cells {
            return Err(Error::OutOfGridPillar(ix as i64, iy as i64));
        }
        let dst = (ix * y_cells + iy) * stacked + c;
        for (slot, f) in concat[dst..dst + c].iter_mut().zip(pillars.feature(g)) {
            *slot += f;
        }
    }
    let data = conv2d(&concat, f_gs.dims, kernel);
    Ok(BevGrid {
        origin: f_gs.origin,
        cell_size: f_gs.cell_size,
        dims: f_gs.dims,
        channels: kernel.c_out,
        data,
    })
}

/// BEV segmentation head: a per-cell linear map (1x1 convolution) from the
/// fused features to one logit.
pub fn bev_seg_logits(f_bev: &BevGrid, head: &DenseStack) -> Result<Tensor> {
    let (x_cells, y_cells) = f_bev.dims;
    let mut out = Tensor::zeros(&[x_cells, y_cells]);
    for ix in 0..x_cells {
        for iy in 0..y_cells {
            let v = head.forward(f_bev.cell(ix, iy))?;
            out.set2(ix, iy, v[0]);
        }
    }
    Ok(out)
}

struct Splat2D {
    gaussian: usize,
    mean: [f64; 2],
    inv: (f64, f64, f64),
    depth: f64,
    opacity: f64,
    px_min: (usize, usize),
    px_max: (usize, usize),
}

/// Project every Gaussian to image space with the Jacobian-linearized 2D
/// covariance, sorted front to back.
fn image_splats(field: &GaussianField, camera: &CameraModel, cutoff: f64) -> Vec<Splat2D> {
    let k = camera.intrinsics();
    let rot = camera.rotation();
    let (w_px, h_px) = (camera.width(), camera.height());
    let mut splats = Vec::new();
    for g in 0..field.len() {
        let p = Vector3::from_column_slice(&field.positions[g]);
        let Ok((u, v, d)) = camera.project(&p) else {
            continue;
        };
        let cam = camera.to_camera(&p);
        // J of (u, v) wrt camera coordinates at the mean.
        let z = cam.z;
        let j00 = k[(0, 0)] / z;
        let j01 = k[(0, 1)] / z;
        let j02 = -(k[(0, 0)] * cam.x + k[(0, 1)] * cam.y) / (z * z);
        let j11 = k[(1, 1)] / z;
        let j12 = -(k[(1, 1)] * cam.y) / (z * z);
        let r3 = quaternion_matrix(&field.rotations[g]);
        let s = &field.scales[g];
        let sigma3 = {
            let mut m = Matrix3::zeros();
            for kk in 0..3 {
                let s2 = s[kk] * s[kk];
                for a in 0..3 {
                    for b in 0..3 {
                        m[(a, b)] += s2 * r3[(a, kk)] * r3[(b, kk)];
                    }
                }
            }
            m
        };
        let cam_cov = rot * sigma3 * rot.transpose();
        // 2x2 image covariance J C J^T with J rows (j00, j01, j02) and
        // (0, j11, j12).
        let row0 = [j00, j01, j02];
        let row1 = [0.0, j11, j12];
        let mut xx = 0.0;
        let mut xy = 0.0;
        let mut yy = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let cab = cam_cov[(a, b)];
                xx += row0[a] * cab * row0[b];
                xy += row0[a] * cab * row1[b];
                yy += row1[a] * cab * row1[b];
            }
        }
        let cov = floor_eigenvalues(xx, xy, yy);
        let ru = cutoff * cov.xx.sqrt();
        let rv = cutoff * cov.yy.sqrt();
        // Pixel centers at (col + 0.5, row + 0.5).
        let u_lo = u - ru - 0.5;
        let u_hi = u + ru - 0.5;
        let v_lo = v - rv - 0.5;
        let v_hi = v + rv - 0.5;
        if u_hi < 0.0 || v_hi < 0.0 || u_lo > (w_px - 1) as f64 || v_lo > (h_px - 1) as f64 {
            continue;
        }
        splats.push(Splat2D {
            gaussian: g,
            mean: [u, v],
            inv: cov.inverse(),
            depth: d,
            opacity: field.opacities[g],
            px_min: (
                v_lo.ceil().max(0.0) as usize,
                u_lo.ceil().max(0.0) as usize,
            ),
            px_max: (
                (v_hi.floor() as usize).min(h_px - 1),
                (u_hi.floor() as usize).min(w_px - 1),
            ),
        });
    }
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.gaussian.cmp(&b.gaussian))
    });
    splats
}

/// Per-pixel splat lists in front-to-back order.
fn pixel_lists(splats: &[Splat2D], w_px: usize, h_px: usize) -> Vec<Vec<u32>> {
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); w_px * h_px];
    for (si, sp) in splats.iter().enumerate() {
        for row in sp.px_min.0..=sp.px_max.0 {
            for col in sp.px_min.1..=sp.px_max.1 {
                lists[row * w_px + col].push(si as u32);
            }
        }
    }
    lists
}

/// Front-to-back alpha-composited depth map plus accumulated opacity.
/// Pixels with accumulated opacity below `RENDER_ALPHA_MIN` report depth 0.
pub fn render_depth(field: &GaussianField, camera: &CameraModel) -> (Tensor, Tensor) {
    let (w_px, h_px) = (camera.width(), camera.height());
    let cutoff = 3.0;
    let splats = image_splats(field, camera, cutoff);
    let lists = pixel_lists(&splats, w_px, h_px);
    let cut_sq = cutoff * cutoff;

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h_px)
        .into_par_iter()
        .map(|row| {
            let mut depth_row = vec![0.0; w_px];
            let mut alpha_row = vec![0.0; w_px];
            for col in 0..w_px {
                let u = col as f64 + 0.5;
                let v = row as f64 + 0.5;
                let mut transmittance = 1.0;
                let mut depth = 0.0;
                let mut alpha_acc = 0.0;
                for &si in &lists[row * w_px + col] {
                    let sp = &splats[si as usize];
                    let du = u - sp.mean[0];
                    let dv = v - sp.mean[1];
                    let (ixx, ixy, iyy) = sp.inv;
                    let m = du * du * ixx + 2.0 * du * dv * ixy + dv * dv * iyy;
                    if m > cut_sq {
                        continue;
                    }
                    let alpha = sp.opacity * (-0.5 * m).exp();
                    depth += transmittance * alpha * sp.depth;
                    alpha_acc += transmittance * alpha;
                    transmittance *= 1.0 - alpha;
                    if transmittance < 1e-12 {
                        break;
                    }
                }
                if alpha_acc >= RENDER_ALPHA_MIN {
                    depth_row[col] = depth;
                }
                alpha_row[col] = alpha_acc;
            }
            (depth_row, alpha_row)
        })
        .collect();

    let mut depth = Tensor::zeros(&[h_px, w_px]);
    let mut alpha = Tensor::zeros(&[h_px, w_px]);
    for (row, (d, a)) in rows.iter().enumerate() {
        for col in 0..w_px {
            depth.set2(row, col, d[col]);
            alpha.set2(row, col, a[col]);
        }
    }
    (depth, alpha)
}

/// Gradient of a scalar loss wrt opacities through [`render_depth`], given
/// the upstream gradient on the depth map. Pixels suppressed by the
/// accumulated-opacity threshold contribute subgradient zero.
pub fn render_depth_backward_opacity(
    field: &GaussianField,
    camera: &CameraModel,
    upstream_depth: &Tensor,
) -> Vec<f64> {
    let (w_px, h_px) = (camera.width(), camera.height());
    let cutoff = 3.0;
    let splats = image_splats(field, camera, cutoff);
    let lists = pixel_lists(&splats, w_px, h_px);
    let cut_sq = cutoff * cutoff;

    let partials: Vec<Vec<f64>> = (0..h_px)
        .into_par_iter()
        .map(|row| {
            let mut grad = vec![0.0; field.len()];
            let mut chain: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
            for col in 0..w_px {
                let up = upstream_depth.at2(row, col);
                if up == 0.0 {
                    continue;
                }
                let u = col as f64 + 0.5;
                let v = row as f64 + 0.5;
                chain.clear();
                let mut transmittance = 1.0;
                let mut alpha_acc = 0.0;
                for &si in &lists[row * w_px + col] {
                    let sp = &splats[si as usize];
                    let du = u - sp.mean[0];
                    let dv = v - sp.mean[1];
                    let (ixx, ixy, iyy) = sp.inv;
                    let m = du * du * ixx + 2.0 * du * dv * ixy + dv * dv * iyy;
                    if m > cut_sq {
                        continue;
                    }
                    let e = (-0.5 * m).exp();
                    let alpha = sp.opacity * e;
                    chain.push((sp.gaussian, alpha, e, sp.depth, transmittance));
                    alpha_acc += transmittance * alpha;
                    transmittance *= 1.0 - alpha;
                    if transmittance < 1e-12 {
                        break;
                    }
                }
                if alpha_acc < RENDER_ALPHA_MIN {
                    continue;
                }
                // d depth / d alpha_k = T_k d_k - suffix_k / (1 - alpha_k),
                // suffix_k = sum_{i > k} T_i alpha_i d_i.
                let mut suffix = 0.0;
                for &(gauss, alpha, e, depth_g, trans) in chain.iter().rev() {
                    let d_alpha = trans * depth_g - suffix / (1.0 - alpha);
                    grad[gauss] += up * d_alpha * e;
                    suffix += trans * alpha * depth_g;
                }
            }
            grad
        })
        .collect();

    let mut grad = vec![0.0; field.len()];
    for part in partials {
        for (g, p) in grad.iter_mut().zip(part) {
            *g += p;
        }
    }
    grad
}

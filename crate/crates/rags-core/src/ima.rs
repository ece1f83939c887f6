//! Iterative multimodal aggregation: deformable cross-attention into the
//! depth-aware image volume, sparse-voxel fusion with height-replicated
//! radar pillars, and frustum-space residual refinement of positions.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::grid::VoxelGridSpec;
use crate::nn::{subseed, Activation, DenseStack};
use crate::radar::PillarSet;
use crate::volume::FeatureVolume;

/// Depth floor applied after a residual update so refined Gaussians stay
/// strictly in front of the near plane.
pub const REFINE_MIN_DEPTH: f64 = 1e-4;

/// Bound on learned offsets in frustum units; tanh times these scales.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OffsetScale {
    pub u_px: f64,
    pub v_px: f64,
    pub d_m: f64,
}

impl Default for OffsetScale {
    fn default() -> Self {
        Self {
            u_px: 8.0,
            v_px: 8.0,
            d_m: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImaConfig {
    /// Aggregation rounds M.
    pub num_iterations: usize,
    /// Sampled offsets T per query.
    pub num_offsets: usize,
    pub offset_scale: OffsetScale,
}

impl Default for ImaConfig {
    fn default() -> Self {
        Self {
            num_iterations: 3,
            num_offsets: 4,
            offset_scale: OffsetScale::default(),
        }
    }
}

/// Lazy accessor over the product volume `feature_map x depth_prob`.
/// Nothing is materialized; `value` multiplies on demand.
pub struct VolumeView<'a> {
    fv: &'a FeatureVolume,
}

impl<'a> VolumeView<'a> {
    pub fn new(fv: &'a FeatureVolume) -> Self {
        Self { fv }
    }

    pub fn height(&self) -> usize {
        self.fv.height()
    }

    pub fn width(&self) -> usize {
        self.fv.width()
    }

    pub fn bins(&self) -> usize {
        self.fv.num_bins()
    }

    pub fn channels(&self) -> usize {
        self.fv.channels()
    }

    /// V[row, col, bin, c] = F2D[row, col, c] * Dprob[row, col, bin].
    #[inline]
    pub fn value(&self, row: usize, col: usize, bin: usize, c: usize) -> f64 {
        self.fv.feature_map.at3(row, col, c) * self.fv.depth_prob.at3(row, col, bin)
    }

    /// Accumulate `weight` times the node feature into `out`.
    #[inline]
    fn accumulate(&self, row: usize, col: usize, bin: usize, weight: f64, out: &mut [f64]) {
        let p = self.fv.depth_prob.at3(row, col, bin) * weight;
        for (o, f) in out.iter_mut().zip(self.fv.feature_map.slice3(row, col)) {
            *o += f * p;
        }
    }

    /// Trilinear sample at continuous (u, v, bin) coordinates; grid nodes sit
    /// at integer coordinates and out-of-range corners contribute zero.
    pub fn trilinear(&self, u: f64, v: f64, b: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        self.trilinear_into(u, v, b, &mut out);
        out
    }

    pub fn trilinear_into(&self, u: f64, v: f64, b: f64, out: &mut [f64]) {
        out.fill(0.0);
        let (h, w, d) = (
            self.height() as i64,
            self.width() as i64,
            self.bins() as i64,
        );
        let u0 = u.floor();
        let v0 = v.floor();
        let b0 = b.floor();
        let (fu, fv_, fb) = (u - u0, v - v0, b - b0);
        for (dv, wv) in [(0i64, 1.0 - fv_), (1, fv_)] {
            let row = v0 as i64 + dv;
            if row < 0 || row >= h || wv == 0.0 {
                continue;
            }
            for (du, wu) in [(0i64, 1.0 - fu), (1, fu)] {
                let col = u0 as i64 + du;
                if col < 0 || col >= w || wu == 0.0 {
                    continue;
                }
                for (db, wb) in [(0i64, 1.0 - fb), (1, fb)] {
                    let bin = b0 as i64 + db;
                    if bin < 0 || bin >= d || wb == 0.0 {
                        continue;
                    }
                    self.accumulate(row as usize, col as usize, bin as usize, wv * wu * wb, out);
                }
            }
        }
    }
}

/// Weights of one deformable cross-attention pass: a head predicting
/// offsets and attention logits from the query feature, and the output
/// projection (linear, no bias, matching a plain projection matrix).
#[derive(Debug, Clone)]
pub struct AttendWeights {
    /// C -> 4T: per offset (du, dv, dd) raw values then T attention logits.
    pub offset_attn: DenseStack,
    /// C -> C.
    pub proj: DenseStack,
}

impl AttendWeights {
    pub fn seeded(channels: usize, num_offsets: usize, seed: u64) -> Self {
        let offset_attn = DenseStack::seeded(
            &[channels, 4 * num_offsets],
            &[Activation::None],
            subseed(seed, 0xa11e),
        );
        let mut proj = DenseStack::seeded(
            &[channels, channels],
            &[Activation::None],
            subseed(seed, 0xa11f),
        );
        proj.layers[0].bias.fill(0.0);
        Self { offset_attn, proj }
    }
}

fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in x.iter_mut() {
        *v /= z;
    }
}

/// One deformable cross-attention round. Every Gaussian whose mean projects
/// inside the volume gets its feature replaced by the attended aggregate;
/// Gaussians projecting outside keep their feature unchanged.
pub fn deformable_attend(
    field: &GaussianField,
    fv: &FeatureVolume,
    camera: &CameraModel,
    weights: &AttendWeights,
    config: &ImaConfig,
) -> Result<GaussianField> {
    let volume = VolumeView::new(fv);
    let c = field.feature_dim;
    if c != volume.channels() {
        return Err(Error::DimensionMismatch(format!(
            "field features ({c}) must match volume channels ({})",
            volume.channels()
        )));
    }
    let t = config.num_offsets;
    let scale = config.offset_scale;
    let d_bins = volume.bins() as f64;

    let rows: Vec<Vec<f64>> = (0..field.len())
        .into_par_iter()
        .map(|i| {
            let feature = field.feature(i);
            let p = Vector3::from_column_slice(&field.positions[i]);
            let (u, v, d) = match camera.project(&p) {
                Ok(f) => f,
                Err(_) => return feature.to_vec(),
            };
            let b = camera.depth_to_bin(d);
            let inside = u >= 0.0
                && u < volume.width() as f64
                && v >= 0.0
                && v < volume.height() as f64
                && b >= 0.0
                && b <= d_bins - 1.0;
            if !inside {
                return feature.to_vec();
            }
            let raw = self::forward_unchecked(&weights.offset_attn, feature);
            let mut attn: Vec<f64> = raw[3 * t..4 * t].to_vec();
            softmax_in_place(&mut attn);
            let mut aggregated = vec![0.0; c];
            let mut sample = vec![0.0; c];
            for (n, &a) in attn.iter().enumerate() {
                let du = raw[3 * n].tanh() * scale.u_px;
                let dv = raw[3 * n + 1].tanh() * scale.v_px;
                let dd = raw[3 * n + 2].tanh() * scale.d_m;
                let bn = camera.depth_to_bin(d + dd);
                volume.trilinear_into(u + du, v + dv, bn, &mut sample);
                for (acc, s) in aggregated.iter_mut().zip(&sample) {
                    *acc += a * s;
                }
            }
            self::forward_unchecked(&weights.proj, &aggregated)
        })
        .collect();

    let mut out = field.clone();
    for (i, row) in rows.iter().enumerate() {
        out.feature_mut(i).copy_from_slice(row);
    }
    Ok(out)
}

#[inline]
fn forward_unchecked(stack: &DenseStack, input: &[f64]) -> Vec<f64> {
    stack
        .forward(input)
        .expect("stack widths validated at construction")
}

/// Sparse voxel set over an integer lattice; duplicate coordinates sum
/// their features at insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    pub coords: Vec<[usize; 3]>,
    /// Row-major rows x C, aligned with `coords`.
    pub values: Vec<f64>,
    pub feature_dim: usize,
    pub dims: [usize; 3],
}

impl SparseVoxelGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

/// Replicate each pillar along the height dimension: pillar g at (ix, iy)
/// becomes voxels (ix, iy, 0..Z-1), all sharing g's feature row.
pub fn replicate_pillars(pillars: &PillarSet, z_levels: usize, dims: [usize; 3]) -> SparseVoxelGrid {
    assert!(z_levels >= 1);
    let c = pillars.feature_dim;
    let mut coords = Vec::with_capacity(pillars.len() * z_levels);
    let mut values = Vec::with_capacity(pillars.len() * z_levels * c);
    for (g, &(ix, iy)) in pillars.coords.iter().enumerate() {
        for z in 0..z_levels {
            coords.push([ix, iy, z]);
            values.extend_from_slice(pillars.feature(g));
        }
    }
    SparseVoxelGrid {
        coords,
        values,
        feature_dim: c,
        dims,
    }
}

/// 3x3x3 convolution kernel over sparse voxel features.
#[derive(Debug, Clone)]
pub struct SparseConvKernel {
    /// Tap-major layout: 27 x c_out x c_in, tap index
    /// ((dx+1)*3 + (dy+1))*3 + (dz+1).
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub channels: usize,
}

impl SparseConvKernel {
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(subseed(
            seed, 0xc0de,
        ));
        let bound = 1.0 / ((27 * channels) as f64).sqrt();
        let weights = (0..27 * channels * channels)
            .map(|_| rand::Rng::gen_range(&mut rng, -bound..bound))
            .collect();
        let bias = (0..channels)
            .map(|_| rand::Rng::gen_range(&mut rng, -bound..bound))
            .collect();
        Self {
            weights,
            bias,
            channels,
        }
    }

    /// Center tap is the identity, all other taps and the bias are zero.
    pub fn identity(channels: usize) -> Self {
        let mut weights = vec![0.0; 27 * channels * channels];
        let center = 13; // (0+1)*9 + (0+1)*3 + (0+1)
        for c in 0..channels {
            weights[(center * channels + c) * channels + c] = 1.0;
        }
        Self {
            weights,
            bias: vec![0.0; channels],
            channels,
        }
    }

    #[inline]
    fn tap(&self, dx: i64, dy: i64, dz: i64) -> &[f64] {
        let idx = (((dx + 1) * 3 + (dy + 1)) * 3 + (dz + 1)) as usize;
        let n = self.channels * self.channels;
        &self.weights[idx * n..(idx + 1) * n]
    }
}

/// Unified sparse fusion: voxelize Gaussian means, insert the radar voxels
/// into the same lattice, run one submanifold 3x3x3 convolution over the
/// occupied sites, and write each Gaussian's convolved feature back through
/// its index (identity is preserved by the index list, not by coordinate
/// uniqueness). Gaussians outside the lattice pass through unchanged.
pub fn sparse_fuse(
    field: &GaussianField,
    radar_voxels: &SparseVoxelGrid,
    kernel: &SparseConvKernel,
    grid: &VoxelGridSpec,
) -> Result<GaussianField> {
    let c = field.feature_dim;
    if kernel.channels != c || (!radar_voxels.is_empty() && radar_voxels.feature_dim != c) {
        return Err(Error::DimensionMismatch(format!(
            "sparse_fuse channel mismatch: field {c}, kernel {}, radar {}",
            kernel.channels, radar_voxels.feature_dim
        )));
    }

    // Gaussian index -> voxel, and the summed occupancy map.
    let voxels: Vec<Option<[usize; 3]>> = field
        .positions
        .iter()
        .map(|p| grid.voxel_of(p))
        .collect();
    let mut occupied: BTreeMap<[usize; 3], Vec<f64>> = BTreeMap::new();
    for (i, v) in voxels.iter().enumerate() {
        if let Some(coord) = v {
            let slot = occupied
                .entry(*coord)
                .or_insert_with(|| vec![0.0; c]);
            for (s, f) in slot.iter_mut().zip(field.feature(i)) {
                *s += f;
            }
        }
    }
    for (row, coord) in radar_voxels.coords.iter().enumerate() {
        let slot = occupied
            .entry(*coord)
            .or_insert_with(|| vec![0.0; c]);
        for (s, f) in slot.iter_mut().zip(radar_voxels.value(row)) {
            *s += f;
        }
    }

    let conv_at = |site: &[usize; 3]| -> Vec<f64> {
        let mut out = kernel.bias.clone();
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    let nx = site[0] as i64 + dx;
                    let ny = site[1] as i64 + dy;
                    let nz = site[2] as i64 + dz;
                    if nx < 0
                        || ny < 0
                        || nz < 0
                        || nx >= grid.dims[0] as i64
                        || ny >= grid.dims[1] as i64
                        || nz >= grid.dims[2] as i64
                    {
                        continue;
                    }
                    let Some(input) = occupied.get(&[nx as usize, ny as usize, nz as usize])
                    else {
                        continue;
                    };
                    let tap = kernel.tap(dx, dy, dz);
                    for (o, orow) in out.iter_mut().enumerate() {
                        let row = &tap[o * c..(o + 1) * c];
                        let mut acc = 0.0;
                        for (w, x) in row.iter().zip(input) {
                            acc += w * x;
                        }
                        *orow += acc;
                    }
                }
            }
        }
        out
    };

    // Convolve once per distinct occupied Gaussian site.
    let mut site_out: BTreeMap<[usize; 3], Vec<f64>> = BTreeMap::new();
    for v in voxels.iter().flatten() {
        site_out
            .entry(*v)
            .or_insert_with(|| conv_at(v));
    }

    let mut out = field.clone();
    for (i, v) in voxels.iter().enumerate() {
        if let Some(coord) = v {
            out.feature_mut(i).copy_from_slice(&site_out[coord]);
        }
    }
    Ok(out)
}

/// Frustum-space residual refinement: an MLP over [feature, P(p)] predicts a
/// bounded (du, dv, dd) which is applied in frustum coordinates and mapped
/// back to 3D. A residual of exactly zero leaves the position bit-identical;
/// Gaussians without positive camera depth skip the round.
pub fn refine_positions(
    field: &GaussianField,
    camera: &CameraModel,
    refine_mlp: &DenseStack,
    offset_scale: OffsetScale,
) -> Result<GaussianField> {
    let c = field.feature_dim;
    if refine_mlp.input_dim() != c + 3 || refine_mlp.output_dim() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "refine MLP must map {}+3 -> 3, got {} -> {}",
            c,
            refine_mlp.input_dim(),
            refine_mlp.output_dim()
        )));
    }
    let mut out = field.clone();
    for i in 0..field.len() {
        let p = Vector3::from_column_slice(&field.positions[i]);
        let Ok((u, v, d)) = camera.project(&p) else {
            continue;
        };
        let mut input = field.feature(i).to_vec();
        input.extend_from_slice(&[u, v, d]);
        let raw = forward_unchecked(refine_mlp, &input);
        let du = raw[0].tanh() * offset_scale.u_px;
        let dv = raw[1].tanh() * offset_scale.v_px;
        let dd = raw[2].tanh() * offset_scale.d_m;
        if du == 0.0 && dv == 0.0 && dd == 0.0 {
            continue;
        }
        let refined = camera.unproject(u + du, v + dv, (d + dd).max(REFINE_MIN_DEPTH))?;
        out.positions[i] = [refined.x, refined.y, refined.z];
    }
    Ok(out)
}

/// Per-round parameter bundle.
#[derive(Debug, Clone)]
pub struct ImaRoundWeights {
    pub attend: AttendWeights,
    pub conv: SparseConvKernel,
    pub refine: DenseStack,
}

impl ImaRoundWeights {
    pub fn seeded(channels: usize, num_offsets: usize, seed: u64) -> Self {
        Self {
            attend: AttendWeights::seeded(channels, num_offsets, subseed(seed, 1)),
            conv: SparseConvKernel::seeded(channels, subseed(seed, 2)),
            refine: DenseStack::seeded(
                &[channels + 3, channels, 3],
                &[Activation::Relu, Activation::None],
                subseed(seed, 3),
            ),
        }
    }

    pub fn seeded_rounds(
        channels: usize,
        num_offsets: usize,
        rounds: usize,
        seed: u64,
    ) -> Vec<Self> {
        (0..rounds)
            .map(|r| Self::seeded(channels, num_offsets, subseed(seed, 0x17a0 + r as u64)))
            .collect()
    }
}

/// Run M sequential rounds of attend -> fuse -> refine, returning every
/// intermediate field (the fusion stage consumes the last L of them).
/// Radar voxels re-enter the lattice at every round.
pub fn run_ima(
    field: &GaussianField,
    fv: &FeatureVolume,
    pillars: &PillarSet,
    camera: &CameraModel,
    weights: &[ImaRoundWeights],
    config: &ImaConfig,
    grid: &VoxelGridSpec,
) -> Result<Vec<GaussianField>> {
    if weights.len() != config.num_iterations {
        return Err(Error::DimensionMismatch(format!(
            "expected {} weight bundles, got {}",
            config.num_iterations,
            weights.len()
        )));
    }
    let radar_voxels = replicate_pillars(pillars, grid.dims[2], grid.dims);
    let mut rounds = Vec::with_capacity(config.num_iterations);
    let mut current = field.clone();
    for bundle in weights {
        let attended = deformable_attend(&current, fv, camera, &bundle.attend, config)?;
        let fused = sparse_fuse(&attended, &radar_voxels, &bundle.conv, grid)?;
        let refined = refine_positions(&fused, camera, &bundle.refine, config.offset_scale)?;
        rounds.push(refined.clone());
        current = refined;
    }
    Ok(rounds)
}

//! Synthetic desk-scale scenes: yawed boxes, radar returns sampled on box
//! surfaces plus clutter, and analytic ground-truth depth / segmentation /
//! occupancy rasters.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::Result;
use crate::grid::{Bounds3, VoxelGridSpec};
use crate::nn::{subseed, Activation, DenseStack};
use crate::radar::{RadarCloud, RadarPoint};
use crate::tensor::Tensor;
use crate::volume::FeatureVolume;

/// Yawed 3D box in the radar frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// (length, width, height); length runs along the yaw heading.
    pub size: [f64; 3],
    /// Radians in (-pi, pi].
    pub yaw: f64,
    pub class_id: u32,
}

impl Box3D {
    /// BEV footprint corners, counter-clockwise.
    pub fn footprint_corners(&self) -> [[f64; 2]; 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (hl, hw) = (0.5 * self.size[0], 0.5 * self.size[1]);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        let mut out = [[0.0; 2]; 4];
        for (o, l) in out.iter_mut().zip(local) {
            o[0] = self.center[0] + c * l[0] - s * l[1];
            o[1] = self.center[1] + s * l[0] + c * l[1];
        }
        out
    }

    /// All eight corners in the radar frame.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let fp = self.footprint_corners();
        let z0 = self.center[2] - 0.5 * self.size[2];
        let z1 = self.center[2] + 0.5 * self.size[2];
        let mut out = [[0.0; 3]; 8];
        for (i, &z) in [z0, z1].iter().enumerate() {
            for j in 0..4 {
                out[i * 4 + j] = [fp[j][0], fp[j][1], z];
            }
        }
        out
    }

    /// World point to box-local coordinates (yaw undone, center at origin).
    pub fn to_local(&self, p: &[f64; 3]) -> [f64; 3] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn to_world(&self, local: &[f64; 3]) -> [f64; 3] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        [
            self.center[0] + c * local[0] - s * local[1],
            self.center[1] + s * local[0] + c * local[1],
            self.center[2] + local[2],
        ]
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= 0.5 * self.size[0]
            && l[1].abs() <= 0.5 * self.size[1]
            && l[2].abs() <= 0.5 * self.size[2]
    }

    /// Signed distance of `p` to the box surface in local max-norm terms;
    /// near zero means on-surface.
    pub fn surface_distance(&self, p: &[f64; 3]) -> f64 {
        let l = self.to_local(p);
        let dx = l[0].abs() - 0.5 * self.size[0];
        let dy = l[1].abs() - 0.5 * self.size[1];
        let dz = l[2].abs() - 0.5 * self.size[2];
        if dx <= 0.0 && dy <= 0.0 && dz <= 0.0 {
            // Inside: distance to the closest face.
            -dx.max(dy).max(dz).abs()
        } else {
            let ox = dx.max(0.0);
            let oy = dy.max(0.0);
            let oz = dz.max(0.0);
            (ox * ox + oy * oy + oz * oz).sqrt()
        }
    }

    /// First positive ray parameter where the ray enters the box, if any.
    /// Slab test in the box frame.
    pub fn ray_entry(&self, origin: &[f64; 3], dir: &[f64; 3]) -> Option<f64> {
        let o = self.to_local(origin);
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let d = [
            c * dir[0] + s * dir[1],
            -s * dir[0] + c * dir[1],
            dir[2],
        ];
        let half = [0.5 * self.size[0], 0.5 * self.size[1], 0.5 * self.size[2]];
        let mut t_min = f64::NEG_INFINITY;
        let mut t_max = f64::INFINITY;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k].abs() > half[k] {
                    return None;
                }
            } else {
                let mut t1 = (-half[k] - o[k]) / d[k];
                let mut t2 = (half[k] - o[k]) / d[k];
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                }
                t_min = t_min.max(t1);
                t_max = t_max.min(t2);
            }
        }
        (t_max >= t_min && t_min > 0.0).then_some(t_min)
    }
}

/// Parameters steering [`generate_scene`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_boxes: usize,
    pub returns_per_box: usize,
    /// Fraction of extra clutter returns relative to on-surface returns.
    pub clutter_ratio: f64,
    pub bounds: Bounds3,
    pub voxel_size: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub num_depth_bins: usize,
    pub num_classes: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_boxes: 4,
            returns_per_box: 24,
            clutter_ratio: 0.2,
            bounds: Bounds3::new([0.0, -6.4, -1.28], [12.8, 6.4, 1.92]),
            voxel_size: 0.32,
            image_height: 64,
            image_width: 96,
            num_depth_bins: 16,
            num_classes: 3,
        }
    }
}

/// A fully materialized synthetic scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub boxes: Vec<Box3D>,
    pub radar: RadarCloud,
    pub camera: CameraModel,
    /// H x W camera-frame z-depth of the nearest box surface, 0 where no hit.
    pub gt_depth: Tensor,
    /// H x W binary hit mask.
    pub gt_seg: Tensor,
    /// X x Y binary footprint-occupancy over the BEV lattice.
    pub gt_occupancy: Tensor,
    pub seed: u64,
}

impl Scene {
    pub fn grid(&self) -> VoxelGridSpec {
        VoxelGridSpec::from_bounds(&self.spec.bounds, self.spec.voxel_size)
    }
}

/// Desk-scale camera for a spec: looks down the radar +x axis, image plane
/// spanning y (horizontal) and z (vertical).
pub fn desk_camera(spec: &SceneSpec) -> Result<CameraModel> {
    let (w, h) = (spec.image_width, spec.image_height);
    let f = 0.62 * w as f64;
    let intrinsics = Matrix3::new(
        f,
        0.0,
        w as f64 / 2.0,
        0.0,
        f,
        h as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    // x_cam = -y_radar, y_cam = -z_radar, z_cam = x_radar.
    let rotation = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let translation = Vector3::new(0.0, 0.15, 0.0);
    let d_near = 1.0;
    let d_far = spec.bounds.max[0].max(2.0) + 0.5;
    let d = spec.num_depth_bins;
    let bins: Vec<f64> = (0..d)
        .map(|i| d_near + (d_far - d_near) * i as f64 / (d - 1).max(1) as f64)
        .collect();
    CameraModel::new(intrinsics, rotation, translation, w, h, bins)
}

fn sample_box(rng: &mut ChaCha20Rng, spec: &SceneSpec, camera: &CameraModel) -> Box3D {
    let class_id = rng.gen_range(0..spec.num_classes.max(1));
    for _ in 0..1000 {
        let size = match class_id {
            0 => [
                rng.gen_range(1.2..2.0),
                rng.gen_range(1.0..1.6),
                rng.gen_range(0.9..1.4),
            ],
            1 => [
                rng.gen_range(0.4..0.7),
                rng.gen_range(0.4..0.7),
                rng.gen_range(1.2..1.8),
            ],
            _ => [
                rng.gen_range(1.0..1.6),
                rng.gen_range(0.4..0.7),
                rng.gen_range(1.2..1.6),
            ],
        };
        let x = rng.gen_range(3.0..spec.bounds.max[0] - 2.0);
        let lateral = 0.28 * x;
        let y = rng.gen_range(-lateral..lateral);
        let z = rng.gen_range(-0.2..0.2) + 0.5 * size[2] - 0.5;
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let candidate = Box3D {
            center: [x, y, z],
            size,
            yaw,
            class_id,
        };
        let corners = candidate.corners();
        let in_bounds = corners.iter().all(|c| spec.bounds.contains(c));
        let in_fov = camera.in_fov(&corners).len() == corners.len();
        if in_bounds && in_fov {
            return candidate;
        }
    }
    // Deterministic fallback: a small box dead ahead.
    Box3D {
        center: [0.5 * (spec.bounds.min[0] + spec.bounds.max[0]), 0.0, 0.1],
        size: [1.0, 1.0, 1.0],
        yaw: 0.0,
        class_id,
    }
}

/// Sample a point uniformly on the surface of `b`, faces weighted by area.
fn sample_surface_point(rng: &mut ChaCha20Rng, b: &Box3D) -> [f64; 3] {
    let [l, w, h] = b.size;
    let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let (hl, hw, hh) = (0.5 * l, 0.5 * w, 0.5 * h);
    let u = rng.gen_range(-1.0..1.0);
    let v = rng.gen_range(-1.0..1.0);
    let local = match face {
        0 => [hl, u * hw, v * hh],
        1 => [-hl, u * hw, v * hh],
        2 => [u * hl, hw, v * hh],
        3 => [u * hl, -hw, v * hh],
        4 => [u * hl, v * hw, hh],
        _ => [u * hl, v * hw, -hh],
    };
    b.to_world(&local)
}

/// Deterministic scene synthesis. Ground-truth rasters are cast through f32
/// so they survive the on-disk container bit-exactly.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let camera = desk_camera(spec)?;
    let mut rng = ChaCha20Rng::seed_from_u64(subseed(spec.seed, 0x5c31));

    let boxes: Vec<Box3D> = (0..spec.num_boxes)
        .map(|_| sample_box(&mut rng, spec, &camera))
        .collect();
    let velocities: Vec<[f64; 2]> = boxes
        .iter()
        .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
        .collect();

    // On-surface radar returns with per-class RCS plus noise; velocity is the
    // box velocity projected on the radial direction from the radar origin.
    let mut radar_rng = ChaCha20Rng::seed_from_u64(subseed(spec.seed, 0x5c32));
    let mut points = Vec::new();
    for (b, vel) in boxes.iter().zip(&velocities) {
        for _ in 0..spec.returns_per_box {
            let p = sample_surface_point(&mut radar_rng, b);
            let range = (p[0] * p[0] + p[1] * p[1]).sqrt().max(1e-9);
            let radial = (vel[0] * p[0] + vel[1] * p[1]) / range;
            let rcs = 8.0 + 5.0 * b.class_id as f64 + radar_rng.gen_range(-2.0..2.0);
            points.push(RadarPoint {
                x: p[0],
                y: p[1],
                z: p[2],
                rcs,
                velocity: radial,
            });
        }
    }
    let n_clutter = (points.len() as f64 * spec.clutter_ratio).round() as usize;
    for _ in 0..n_clutter {
        let p = [
            radar_rng.gen_range(spec.bounds.min[0]..spec.bounds.max[0]),
            radar_rng.gen_range(spec.bounds.min[1]..spec.bounds.max[1]),
            radar_rng.gen_range(spec.bounds.min[2]..spec.bounds.max[2]),
        ];
        points.push(RadarPoint {
            x: p[0],
            y: p[1],
            z: p[2],
            rcs: radar_rng.gen_range(-5.0..15.0),
            velocity: radar_rng.gen_range(-3.0..3.0),
        });
    }
    let radar = RadarCloud { points };

    // Analytic depth and segmentation through pixel centers.
    let (h, w) = (spec.image_height, spec.image_width);
    let mut gt_depth = Tensor::zeros(&[h, w]);
    let mut gt_seg = Tensor::zeros(&[h, w]);
    let cam_origin = camera.rotation().transpose() * (-camera.translation());
    let origin = [cam_origin.x, cam_origin.y, cam_origin.z];
    for i in 0..h {
        for j in 0..w {
            let far = camera.unproject(j as f64 + 0.5, i as f64 + 0.5, 1.0)?;
            let dir = [far.x - origin[0], far.y - origin[1], far.z - origin[2]];
            let mut best: Option<f64> = None;
            for b in &boxes {
                if let Some(t) = b.ray_entry(&origin, &dir) {
                    best = Some(best.map_or(t, |cur: f64| cur.min(t)));
                }
            }
            if let Some(t) = best {
                let hit = [
                    origin[0] + t * dir[0],
                    origin[1] + t * dir[1],
                    origin[2] + t * dir[2],
                ];
                let cam_pt = camera.to_camera(&Vector3::from_column_slice(&hit));
                gt_depth.set2(i, j, cam_pt.z);
                gt_seg.set2(i, j, 1.0);
            }
        }
    }

    // Footprint occupancy over the BEV lattice via rectangle-rectangle SAT.
    let grid = VoxelGridSpec::from_bounds(&spec.bounds, spec.voxel_size);
    let (x_cells, y_cells) = (grid.dims[0], grid.dims[1]);
    let mut gt_occupancy = Tensor::zeros(&[x_cells, y_cells]);
    let half_cell = 0.5 * spec.voxel_size;
    for b in &boxes {
        let fp = b.footprint_corners();
        // Cell range the footprint could touch.
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in fp {
            x0 = x0.min(c[0]);
            x1 = x1.max(c[0]);
            y0 = y0.min(c[1]);
            y1 = y1.max(c[1]);
        }
        for ix in 0..x_cells {
            for iy in 0..y_cells {
                let (cx, cy) = grid.bev_center(ix, iy);
                if cx + half_cell < x0 || cx - half_cell > x1 || cy + half_cell < y0 || cy - half_cell > y1 {
                    continue;
                }
                let cell = [
                    [cx - half_cell, cy - half_cell],
                    [cx + half_cell, cy - half_cell],
                    [cx + half_cell, cy + half_cell],
                    [cx - half_cell, cy + half_cell],
                ];
                if rects_intersect(&fp, &cell) {
                    gt_occupancy.set2(ix, iy, 1.0);
                }
            }
        }
    }

    gt_depth.round_to_f32();
    gt_seg.round_to_f32();
    gt_occupancy.round_to_f32();

    Ok(Scene {
        spec: spec.clone(),
        boxes,
        radar,
        camera,
        gt_depth,
        gt_seg,
        gt_occupancy,
        seed: spec.seed,
    })
}

/// Separating-axis overlap test for two convex quads.
pub fn rects_intersect(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for quad in [a, b] {
        for i in 0..4 {
            let p = quad[i];
            let q = quad[(i + 1) % 4];
            // Edge normal.
            let axis = [q[1] - p[1], p[0] - q[0]];
            let project = |r: &[[f64; 2]; 4]| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for c in r {
                    let d = c[0] * axis[0] + c[1] * axis[1];
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
                (lo, hi)
            };
            let (a0, a1) = project(a);
            let (b0, b1) = project(b);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

/// Segmentation logits for the initializer: positive amplitude on foreground
/// pixels, negative elsewhere, with seeded jitter standing in for a learned
/// head's soft output.
pub fn synth_seg_logits(scene: &Scene, amplitude: f64, jitter: f64, seed: u64) -> Tensor {
    let dims = scene.gt_seg.dims();
    let mut rng = ChaCha20Rng::seed_from_u64(subseed(seed, 0x53e6));
    let mut out = Tensor::zeros(dims);
    for (o, s) in out.data_mut().iter_mut().zip(scene.gt_seg.data()) {
        let base = if *s > 0.5 { amplitude } else { -amplitude };
        *o = base + rng.gen_range(-jitter..jitter);
    }
    out
}

/// Stand-in feature extractor: a seeded per-pixel network over normalized
/// pixel coordinates and the sparse radar depth prior produces the feature
/// map and (via softmax) the depth distribution.
pub fn synth_feature_volume(scene: &Scene, channels: usize, seed: u64) -> Result<FeatureVolume> {
    let camera = &scene.camera;
    let (h, w) = (camera.height(), camera.width());
    let d = camera.num_bins();

    // Sparse depth: nearest radar return per pixel, camera z-depth.
    let mut sparse = Tensor::zeros(&[h, w]);
    for p in &scene.radar.points {
        if let Ok((u, v, depth)) = camera.project(&Vector3::new(p.x, p.y, p.z)) {
            if u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64 {
                let (col, row) = (u as usize, v as usize);
                let cur = sparse.at2(row, col);
                if cur == 0.0 || depth < cur {
                    sparse.set2(row, col, depth);
                }
            }
        }
    }

    let feat_net = DenseStack::seeded(
        &[3, 16, channels],
        &[Activation::Relu, Activation::None],
        subseed(seed, 0xfe01),
    );
    let depth_net = DenseStack::seeded(
        &[3, 16, d],
        &[Activation::Relu, Activation::None],
        subseed(seed, 0xfe02),
    );

    let mut feature_map = Tensor::zeros(&[h, w, channels]);
    let mut depth_prob = Tensor::zeros(&[h, w, d]);
    let bins = camera.depth_bins();
    let bin_span = bins[d - 1] - bins[0];
    for i in 0..h {
        for j in 0..w {
            let s = sparse.at2(i, j);
            let input = [
                j as f64 / w as f64,
                i as f64 / h as f64,
                s / bins[d - 1].max(1.0),
            ];
            let f = feat_net.forward(&input)?;
            for (c, v) in f.iter().enumerate() {
                feature_map.set3(i, j, c, *v);
            }
            let mut logits = depth_net.forward(&input)?;
            // Radar-seen pixels sharpen around the measured depth.
            if s > 0.0 {
                for (k, l) in logits.iter_mut().enumerate() {
                    let x = (bins[k] - s) / (0.08 * bin_span);
                    *l += -0.5 * x * x;
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in &mut logits {
                *l = (*l - m).exp();
                z += *l;
            }
            for (k, l) in logits.iter().enumerate() {
                depth_prob.set3(i, j, k, l / z);
            }
        }
    }

    let fv = FeatureVolume {
        feature_map,
        depth_prob,
        sparse_depth: sparse,
    };
    fv.validate()?;
    Ok(fv)
}

//! End-to-end orchestration: scene in, Gaussian field through the
//! aggregation rounds, BEV fusion, depth render, dumps, and a run report.
//!
//! Dump tensors land in `<out>/dumps/` so the dump directory is
//! byte-reproducible under a fixed config and seed; the report (which
//! carries wall-clock timings) is written beside it, not inside.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::bev::BevGrid;
use crate::camera::CameraModel;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::fli;
use crate::ima::{self, ImaRoundWeights};
use crate::io;
use crate::nn::{self, subseed, Activation, DenseStack};
use crate::radar::pillarize;
use crate::scene::{synth_feature_volume, synth_seg_logits, Scene};
use crate::splat::{self, Conv2DKernel, RasterStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpFormat {
    Rags,
    /// RAGS containers plus CSV exports of 2-D slices.
    Csv,
}

#[derive(Debug, Clone)]
pub struct StageTiming {
    pub name: &'static str,
    pub millis: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub timings: Vec<StageTiming>,
    /// Dump name -> shape, sorted by name.
    pub tensors: Vec<(String, Vec<usize>)>,
    pub raster_stats: Vec<RasterStats>,
    pub det_loss: f64,
    pub depth_render_loss: f64,
    pub seg_render_loss: f64,
    pub total_loss: f64,
    pub num_rounds: usize,
    pub num_levels: usize,
}

impl RunReport {
    /// Human-readable report including wall-clock timings.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pipeline run: {} aggregation rounds, {} BEV levels", self.num_rounds, self.num_levels);
        let _ = writeln!(out, "\nstages:");
        for t in &self.timings {
            let _ = writeln!(out, "  {:<22} {:>9.3} ms", t.name, t.millis);
        }
        let _ = writeln!(out, "\ndumps:");
        for (name, dims) in &self.tensors {
            let _ = writeln!(out, "  {:<28} {:?}", name, dims);
        }
        let _ = writeln!(out, "\nrasterizer:");
        for (l, s) in self.raster_stats.iter().enumerate() {
            let visited: usize = s.per_tile_gaussians.iter().sum();
            let _ = writeln!(
                out,
                "  level {}: {}x{} tiles, {} gaussian-tile entries, {} cells written",
                l + 1,
                s.tiles.0,
                s.tiles.1,
                visited,
                s.cells_written
            );
        }
        let _ = writeln!(out, "\nlosses (total = det + lambda * (depth_render + seg_render)):");
        let _ = writeln!(out, "  det          = {:.6}", self.det_loss);
        let _ = writeln!(out, "  depth_render = {:.6}", self.depth_render_loss);
        let _ = writeln!(out, "  seg_render   = {:.6}", self.seg_render_loss);
        let _ = writeln!(out, "  total        = {:.6}", self.total_loss);
        out
    }

    /// Deterministic subset of the report (no timings), written into the
    /// dump directory.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, dims) in &self.tensors {
            let dims: Vec<String> = dims.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "{} {}", name, dims.join("x"));
        }
        let _ = writeln!(out, "losses {:.12} {:.12} {:.12} {:.12}", self.det_loss, self.depth_render_loss, self.seg_render_loss, self.total_loss);
        out
    }
}

/// L1 over pixels with positive ground truth; zero when the mask is empty
/// (an absent supervision signal contributes no auxiliary loss).
fn masked_l1(pred: &Tensor, gt: &Tensor) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        if *g > 0.0 {
            acc += (p - g).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

fn mean_bce(logits: &Tensor, targets: &Tensor) -> f64 {
    let mut acc = 0.0;
    for (x, y) in logits.data().iter().zip(targets.data()) {
        acc += nn::bce_with_logits(*x, *y);
    }
    acc / logits.len().max(1) as f64
}

fn positions_tensor(field: &GaussianField) -> Tensor {
    let mut data = Vec::with_capacity(field.len() * 3);
    for p in &field.positions {
        data.extend_from_slice(p);
    }
    Tensor::from_vec(&[field.len(), 3], data).expect("length consistent")
}

struct Dumper {
    dir: PathBuf,
    format: DumpFormat,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Dumper {
    fn new(dir: &Path, format: DumpFormat) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            tensors: Vec::new(),
        })
    }

    fn dump(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        io::save_tensor(&self.dir.join(format!("{name}.rags")), tensor)?;
        if self.format == DumpFormat::Csv && (tensor.rank() == 2 || tensor.rank() == 3) {
            io::write_csv_slice(&self.dir.join(format!("{name}.csv")), tensor, 0)?;
        }
        self.tensors.push((name.to_string(), tensor.dims().to_vec()));
        Ok(())
    }
}

/// Seeded parameter set for one full run; every stage derives its stream
/// from the config seed.
pub struct PipelineWeights {
    pub ima_rounds: Vec<ImaRoundWeights>,
    pub fuse_kernel: Conv2DKernel,
    pub cmf_kernel: Conv2DKernel,
    pub seg_head: DenseStack,
}

impl PipelineWeights {
    pub fn seeded(config: &PipelineConfig) -> Self {
        let c = config.feature_channels;
        let seed = config.seed;
        Self {
            ima_rounds: ImaRoundWeights::seeded_rounds(
                c,
                config.ima.num_offsets,
                config.ima.num_iterations,
                subseed(seed, 0x10),
            ),
            fuse_kernel: Conv2DKernel::seeded(c * config.splat.levels, c, subseed(seed, 0x20)),
            cmf_kernel: Conv2DKernel::seeded(2 * c, c, subseed(seed, 0x21)),
            seg_head: DenseStack::seeded(&[c, 1], &[Activation::None], subseed(seed, 0x22)),
        }
    }
}

/// Initialization only: foreground selection, unprojection, frustum
/// sampling, gather, and field construction.
pub fn init_gaussian_field(config: &PipelineConfig, scene: &Scene) -> Result<GaussianField> {
    let camera = &scene.camera;
    let c = config.feature_channels;
    let fv = synth_feature_volume(scene, c, subseed(config.seed, 0x01))?;
    let logits = synth_seg_logits(scene, 4.0, 0.5, subseed(config.seed, 0x02));
    let metric_depth = nn::depth_expectation(&fv.depth_prob, camera.depth_bins())?;
    let picked = fli::select_foreground(&logits, &metric_depth, config.init.top_k);
    let unproj = fli::unproject_foreground(camera, &picked)?;
    let sampled = fli::sample_frustum(camera, &config.init, config.init.n_sample)?;
    let radar_positions = scene.radar.positions();
    let positions = fli::gather_positions(
        camera,
        &config.init,
        &unproj,
        &sampled,
        &radar_positions,
    );
    Ok(fli::init_field(
        positions,
        c,
        config.init.voxel_size,
        subseed(config.seed, 0x03),
    ))
}

/// Full run writing dumps and returning the report. Results are independent
/// of the rayon thread count; run inside a sized pool to cap workers.
pub fn run_pipeline(
    config: &PipelineConfig,
    scene: &Scene,
    out_dir: &Path,
    format: DumpFormat,
) -> Result<RunReport> {
    config.validate()?;
    let camera: &CameraModel = &scene.camera;
    let c = config.feature_channels;
    let grid = config.init.grid();
    let weights = PipelineWeights::seeded(config);
    let mut dumper = Dumper::new(&out_dir.join("dumps"), format)?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let lap = |name: &'static str, timings: &mut Vec<StageTiming>, clock: &mut Instant| {
        timings.push(StageTiming {
            name,
            millis: clock.elapsed().as_secs_f64() * 1e3,
        });
        *clock = Instant::now();
    };

    // Stand-in front end.
    let fv = synth_feature_volume(scene, c, subseed(config.seed, 0x01))?;
    fv.validate()?;
    let pillars = pillarize(&scene.radar, &grid, c, subseed(config.seed, 0x04));
    lap("front_end", &mut timings, &mut clock);

    // Localization initiation.
    let field0 = init_gaussian_field(config, scene)?;
    field0.validate()?;
    if field0.len() != config.init.n_total {
        return Err(Error::DimensionMismatch(format!(
            "initializer produced {} anchors, expected {}",
            field0.len(),
            config.init.n_total
        )));
    }
    lap("localization_init", &mut timings, &mut clock);

    // Aggregation rounds.
    let rounds = ima::run_ima(
        &field0,
        &fv,
        &pillars,
        camera,
        &weights.ima_rounds,
        &config.ima,
        &grid,
    )?;
    for (i, round) in rounds.iter().enumerate() {
        round.validate()?;
        dumper.dump(&format!("positions_round_{}", i + 1), &positions_tensor(round))?;
    }
    lap("aggregation", &mut timings, &mut clock);

    // Multi-level fusion.
    let levels = config.splat.levels;
    let mut bev_levels: Vec<BevGrid> = Vec::with_capacity(levels);
    let mut raster_stats = Vec::with_capacity(levels);
    for (l, round) in rounds[rounds.len() - levels..].iter().enumerate() {
        let (bev, stats) = splat::rasterize_with_stats(round, &config.splat)?;
        bev.validate()?;
        dumper.dump(&format!("bev_level_{}", l + 1), &bev.to_tensor())?;
        bev_levels.push(bev);
        raster_stats.push(stats);
    }
    let f_gs = splat::fuse_levels(&bev_levels, &weights.fuse_kernel)?;
    dumper.dump("f_gs", &f_gs.to_tensor())?;
    let f_bev = splat::cross_modal_fuse(&f_gs, &pillars, &weights.cmf_kernel)?;
    dumper.dump("f_bev", &f_bev.to_tensor())?;
    lap("bev_fusion", &mut timings, &mut clock);

    // Auxiliary heads.
    let final_field = rounds.last().expect("at least one round");
    let (depth_render, render_alpha) = splat::render_depth(final_field, camera);
    dumper.dump("depth_render", &depth_render)?;
    dumper.dump("render_alpha", &render_alpha)?;
    let seg_logits = splat::bev_seg_logits(&f_bev, &weights.seg_head)?;
    dumper.dump("bev_seg_logits", &seg_logits)?;
    lap("render", &mut timings, &mut clock);

    let det_loss = 0.0; // No detection head at desk scale; enters as a scalar.
    let depth_render_loss = masked_l1(&depth_render, &scene.gt_depth);
    let seg_render_loss = mean_bce(&seg_logits, &scene.gt_occupancy);
    let total = nn::total_loss(det_loss, depth_render_loss, seg_render_loss, &config.loss);
    lap("losses", &mut timings, &mut clock);

    let mut tensors = dumper.tensors.clone();
    tensors.sort();
    let report = RunReport {
        timings,
        tensors,
        raster_stats,
        det_loss,
        depth_render_loss,
        seg_render_loss,
        total_loss: total,
        num_rounds: rounds.len(),
        num_levels: levels,
    };
    fs::write(dumper.dir.join("manifest.txt"), report.manifest())?;
    fs::write(out_dir.join("report.txt"), report.to_text())?;
    Ok(report)
}

/// Smoke-test descent: optimize opacities (through logits so they stay in
/// (0, 1)) against the scene's ground-truth depth using the analytic
/// compositing gradient. Returns the per-step auxiliary loss trace.
pub fn opacity_smoke_descent(
    field: &GaussianField,
    scene: &Scene,
    steps: usize,
    learning_rate: f64,
) -> Vec<f64> {
    let camera = &scene.camera;
    let mut work = field.clone();
    let mut logits: Vec<f64> = work
        .opacities
        .iter()
        .map(|&o| (o / (1.0 - o)).ln())
        .collect();
    let mut trace = Vec::with_capacity(steps);
    let valid: Vec<bool> = scene.gt_depth.data().iter().map(|&g| g > 0.0).collect();
    let n_valid = valid.iter().filter(|&&v| v).count().max(1) as f64;
    for _ in 0..steps {
        let (depth, _) = splat::render_depth(&work, camera);
        // Loss: mean squared depth error over supervised pixels.
        let mut loss = 0.0;
        let mut upstream = Tensor::zeros(scene.gt_depth.dims());
        for (i, (&d, &g)) in depth
            .data()
            .iter()
            .zip(scene.gt_depth.data())
            .enumerate()
        {
            if valid[i] {
                let diff = d - g;
                loss += diff * diff;
                upstream.data_mut()[i] = 2.0 * diff / n_valid;
            }
        }
        loss /= n_valid;
        trace.push(loss);

        let grad_opacity = splat::render_depth_backward_opacity(&work, camera, &upstream);
        for ((logit, g), o) in logits
            .iter_mut()
            .zip(&grad_opacity)
            .zip(&mut work.opacities)
        {
            // Chain through the sigmoid parameterization.
            let sig = 1.0 / (1.0 + (-*logit).exp());
            *logit -= learning_rate * g * sig * (1.0 - sig);
            *o = 1.0 / (1.0 + (-*logit).exp());
        }
    }
    trace
}

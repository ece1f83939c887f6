//! Command-line surface: scene synthesis, the full pipeline, standalone
//! rasterization, detection metrics, and the rasterizer benchmark.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rags_core::bench;
use rags_core::config::{load_config, PipelineConfig};
use rags_core::error::Error;
use rags_core::eval::{average_precision, map_over_classes, Detection};
use rags_core::io;
use rags_core::pipeline::{self, DumpFormat};
use rags_core::scene::{generate_scene, Scene, SceneSpec};
use rags_core::splat;

#[derive(Parser)]
#[command(name = "rags", about = "Radar-camera Gaussian field pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Rags,
    Csv,
}

impl From<Format> for DumpFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Rags => DumpFormat::Rags,
            Format::Csv => DumpFormat::Csv,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration (TOML). Defaults to desk-scale settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory produced by `rags synth`.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = rayon default). Results are thread-count
    /// independent.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Dump format.
    #[arg(long, value_enum, default_value_t = Format::Rags)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Generate deterministic synthetic scenes from a spec file.
    Synth {
        /// Synthesis spec (TOML): `count` plus a `[scene]` table.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline on a scene and dump every intermediate.
    Run(RunArgs),
    /// Initialize the field and rasterize it, skipping aggregation.
    Rasterize(RunArgs),
    /// Score detections against a scene's ground truth.
    Eval {
        /// Detections file (TOML `[[detections]]` entries).
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Default IoU threshold.
        #[arg(long, default_value_t = 0.5)]
        iou_thresh: f64,
        /// Per-class overrides, e.g. "0=0.5,1=0.25".
        #[arg(long)]
        class_thresh: Option<String>,
        /// Optional directory for the machine-readable report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rasterizer benchmark: tiled vs all-pairs across anchor counts.
    Bench {
        /// Threads for the multithreaded measurement.
        #[arg(long, default_value_t = 4)]
        threads: usize,
        /// Timing repetitions (best-of).
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthSpec {
    count: usize,
    #[serde(default = "default_scene_spec")]
    scene: SceneSpec,
}

fn default_scene_spec() -> SceneSpec {
    SceneSpec::default()
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionsFile {
    detections: Vec<Detection>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn load_scene_dir(path: &Path) -> Result<Scene, Error> {
    io::load_scene(path)
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<(), Error> {
    let text = fs::read_to_string(spec_path)?;
    let spec: SynthSpec = toml::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {}", spec_path.display(), e)))?;
    fs::create_dir_all(out)?;
    let mut manifest = String::new();
    for i in 0..spec.count {
        let mut scene_spec = spec.scene.clone();
        scene_spec.seed = spec.scene.seed + i as u64;
        let scene = generate_scene(&scene_spec)?;
        let name = format!("scene_{i:04}");
        let dir = out.join(&name);
        io::save_scene(&dir, &scene)?;
        manifest.push_str(&format!(
            "{name} seed={} path={name}/{}\n",
            scene_spec.seed,
            io::SCENE_MANIFEST
        ));
    }
    fs::write(out.join("manifest.txt"), &manifest)?;
    println!("wrote {} scene(s) under {}", spec.count, out.display());
    Ok(())
}

fn resolve_config(args: &RunArgs) -> Result<PipelineConfig, Error> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::desk(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

fn cmd_run(args: &RunArgs) -> Result<(), Error> {
    let config = resolve_config(args)?;
    let scene = load_scene_dir(&args.scene)?;
    let report = with_pool(args.threads, || {
        pipeline::run_pipeline(&config, &scene, &args.out, args.format.into())
    })?;
    print!("{}", report.to_text());
    println!("dumps: {}", args.out.join("dumps").display());
    Ok(())
}

fn cmd_rasterize(args: &RunArgs) -> Result<(), Error> {
    let config = resolve_config(args)?;
    let scene = load_scene_dir(&args.scene)?;
    let (grid, stats) = with_pool(args.threads, || -> Result<_, Error> {
        let field = pipeline::init_gaussian_field(&config, &scene)?;
        splat::rasterize_with_stats(&field, &config.splat)
    })?;
    fs::create_dir_all(&args.out)?;
    let tensor = grid.to_tensor();
    io::save_tensor(&args.out.join("bev_init.rags"), &tensor)?;
    if matches!(args.format, Format::Csv) {
        io::write_csv_slice(&args.out.join("bev_init.csv"), &tensor, 0)?;
    }
    let visited: usize = stats.per_tile_gaussians.iter().sum();
    println!(
        "rasterized {} anchors into {}x{}x{} ({} tiles, {} gaussian-tile entries, {} cells written)",
        config.init.n_total,
        grid.dims.0,
        grid.dims.1,
        grid.channels,
        stats.tiles.0 * stats.tiles.1,
        visited,
        stats.cells_written
    );
    Ok(())
}

fn parse_class_thresholds(raw: &str) -> Result<Vec<(u32, f64)>, Error> {
    raw.split(',')
        .filter(|part| !part.is_empty())
        .map(|part| {
            let (class, thresh) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad class threshold entry: {part}")))?;
            let class: u32 = class
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad class id: {class}")))?;
            let thresh: f64 = thresh
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad threshold: {thresh}")))?;
            Ok((class, thresh))
        })
        .collect()
}

fn cmd_eval(
    dets: &Path,
    scene_dir: &Path,
    iou_thresh: f64,
    class_thresh: Option<&str>,
    out: Option<&Path>,
) -> Result<(), Error> {
    let text = fs::read_to_string(dets)?;
    let dets_file: DetectionsFile =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {}", dets.display(), e)))?;
    for d in &dets_file.detections {
        if !(0.0..=1.0).contains(&d.score) || !d.score.is_finite() {
            return Err(Error::Parse(format!(
                "detection score {} outside [0, 1]",
                d.score
            )));
        }
    }
    let scene = load_scene_dir(scene_dir)?;
    let thresholds = match class_thresh {
        Some(raw) => parse_class_thresholds(raw)?,
        None => Vec::new(),
    };

    let mut classes: Vec<u32> = scene.boxes.iter().map(|b| b.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut report = String::new();
    let mut machine = String::from("[[per_class]]\n");
    machine.clear();
    for &class in &classes {
        let thresh = thresholds
            .iter()
            .find(|(c, _)| *c == class)
            .map_or(iou_thresh, |(_, t)| *t);
        let ap = average_precision(&dets_file.detections, &scene.boxes, thresh, class);
        report.push_str(&format!(
            "class {class}: AP@{thresh:.2} = {ap:.4}\n"
        ));
        machine.push_str(&format!(
            "[[per_class]]\nclass_id = {class}\niou_threshold = {thresh}\nap = {ap}\n\n"
        ));
    }
    let map = map_over_classes(&dets_file.detections, &scene.boxes, &thresholds, iou_thresh);
    report.push_str(&format!("mAP = {map:.4}\n"));
    machine.push_str(&format!("map = {map}\n"));
    print!("{report}");
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.toml"), machine)?;
        fs::write(out.join("metrics.txt"), report)?;
    }
    Ok(())
}

fn cmd_bench(threads: usize, reps: usize) -> Result<(), Error> {
    let mut rows = Vec::new();
    for case in bench::default_cases() {
        let row = bench::run_case(&case, threads.max(1), reps.max(1))?;
        if let Some(diff) = row.max_abs_diff {
            if diff > 1e-12 {
                return Err(Error::DimensionMismatch(format!(
                    "tiled/naive disagreement {diff:e} at N = {}",
                    row.n
                )));
            }
        }
        rows.push(row);
    }
    print!("{}", bench::format_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Synth { spec, out } => cmd_synth(spec, out),
        Command::Run(args) => cmd_run(args),
        Command::Rasterize(args) => cmd_rasterize(args),
        Command::Eval {
            dets,
            scene,
            iou_thresh,
            class_thresh,
            out,
        } => cmd_eval(
            dets,
            scene,
            *iou_thresh,
            class_thresh.as_deref(),
            out.as_deref(),
        ),
        Command::Bench { threads, reps } => cmd_bench(*threads, *reps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; anything else is a
            // usage error (exit 1).
            let _ = err.print();
            return match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

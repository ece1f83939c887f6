//! Rasterizer benchmark: tiled versus all-pairs timing and agreement
//! across anchor counts, plus thread-pool scaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

use crate::error::Result;
use crate::field::GaussianField;
use crate::splat::{rasterize, rasterize_naive, SplatConfig};

#[derive(Debug, Clone, Copy)]
pub struct BenchCase {
    pub n: usize,
    pub dims: (usize, usize),
    pub channels: usize,
    /// Compare against the all-pairs reference (feasible for small n).
    pub check_naive: bool,
}

/// Anchor counts from desk scale up to the full-scale anchor budget.
pub fn default_cases() -> Vec<BenchCase> {
    vec![
        BenchCase {
            n: 512,
            dims: (40, 40),
            channels: 16,
            check_naive: true,
        },
        BenchCase {
            n: 3200,
            dims: (64, 64),
            channels: 16,
            check_naive: true,
        },
        BenchCase {
            n: 12_800,
            dims: (160, 160),
            channels: 32,
            check_naive: false,
        },
    ]
}

/// Synthetic field filling the grid with mid-sized anisotropic Gaussians.
pub fn bench_field(n: usize, config: &SplatConfig, channels: usize, seed: u64) -> GaussianField {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let extent_x = config.dims.0 as f64 * config.cell_size;
    let extent_y = config.dims.1 as f64 * config.cell_size;
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                config.origin[0] + rng.gen_range(0.0..extent_x),
                config.origin[1] + rng.gen_range(0.0..extent_y),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let rotations: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            let raw: [f64; 4] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            [raw[0] / norm, raw[1] / norm, raw[2] / norm, raw[3] / norm]
        })
        .collect();
    let scales: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(0.4..0.9),
                rng.gen_range(0.4..0.9),
                rng.gen_range(0.4..0.9),
            ]
        })
        .collect();
    let opacities: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.9)).collect();
    let features: Vec<f64> = (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    GaussianField {
        positions,
        rotations,
        scales,
        opacities,
        features,
        feature_dim: channels,
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub dims: (usize, usize),
    pub channels: usize,
    pub tiled_ms: f64,
    pub tiled_mt_ms: f64,
    pub mt_threads: usize,
    pub naive_ms: Option<f64>,
    pub max_abs_diff: Option<f64>,
}

fn time_best_of<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t = Instant::now();
        f();
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
    }
    best
}

/// Run one case: single-threaded tiled timing (best of `reps`), a sized
/// multithread pool timing, and the all-pairs comparison when feasible.
pub fn run_case(case: &BenchCase, mt_threads: usize, reps: usize) -> Result<BenchRow> {
    let config = SplatConfig {
        dims: case.dims,
        origin: [0.0, 0.0],
        cell_size: 0.32,
        cutoff_sigma: 3.0,
        tile_size: 16,
        levels: 1,
    };
    let field = bench_field(case.n, &config, case.channels, 0xbe5c + case.n as u64);

    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("pool");
    let tiled = single.install(|| rasterize(&field, &config))?;
    let tiled_ms = single.install(|| {
        time_best_of(reps, || {
            rasterize(&field, &config).expect("rasterize");
        })
    });

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(mt_threads)
        .build()
        .expect("pool");
    let tiled_mt = pool.install(|| rasterize(&field, &config))?;
    let tiled_mt_ms = pool.install(|| {
        time_best_of(reps, || {
            rasterize(&field, &config).expect("rasterize");
        })
    });
    assert_eq!(
        tiled.data, tiled_mt.data,
        "thread count changed the rasterization result"
    );

    let (naive_ms, max_abs_diff) = if case.check_naive {
        let t = Instant::now();
        let naive = rasterize_naive(&field, &config)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        let diff = tiled
            .data
            .iter()
            .zip(&naive.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        (Some(ms), Some(diff))
    } else {
        (None, None)
    };

    Ok(BenchRow {
        n: case.n,
        dims: case.dims,
        channels: case.channels,
        tiled_ms,
        tiled_mt_ms,
        mt_threads,
        naive_ms,
        max_abs_diff,
    })
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    out.push_str(
        "     N    grid      C   tiled 1t (ms)   tiled mt (ms)   naive (ms)   max |diff|\n",
    );
    for r in rows {
        let naive = r
            .naive_ms
            .map_or("      -".to_string(), |v| format!("{v:>10.2}"));
        let diff = r
            .max_abs_diff
            .map_or("        -".to_string(), |v| format!("{v:>10.2e}"));
        out.push_str(&format!(
            "{:>6}  {:>3}x{:<3} {:>4} {:>14.2} {:>12.2} ({}t) {} {}\n",
            r.n, r.dims.0, r.dims.1, r.channels, r.tiled_ms, r.tiled_mt_ms, r.mt_threads, naive, diff
        ));
    }
    out
}

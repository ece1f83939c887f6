//! Pipeline configuration: one self-validating TOML file holds every
//! reproducible knob. No environment variables influence numerics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fli::InitConfig;
use crate::grid::Bounds3;
use crate::ima::ImaConfig;
use crate::nn::LossWeights;
use crate::splat::SplatConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Implicit feature width C shared by the field, pillars, and BEV maps.
    pub feature_channels: usize,
    pub init: InitConfig,
    pub ima: ImaConfig,
    pub splat: SplatConfig,
    #[serde(default)]
    pub loss: LossWeights,
}

impl PipelineConfig {
    /// Desk-scale defaults: N = 512 anchors over a 40 x 40 x 10 lattice of
    /// 0.32 m voxels, M = 3 aggregation rounds, L = 2 fused levels.
    pub fn desk() -> Self {
        let bounds = Bounds3::new([0.0, -6.4, -1.28], [12.8, 6.4, 1.92]);
        let init = InitConfig::desk(512, bounds, 0.32);
        let grid = init.grid();
        Self {
            seed: 0,
            feature_channels: 16,
            splat: SplatConfig::desk(
                (grid.dims[0], grid.dims[1]),
                [bounds.min[0], bounds.min[1]],
                0.32,
            ),
            init,
            ima: ImaConfig::default(),
            loss: LossWeights::default(),
        }
    }

    /// Check cross-field consistency, listing every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.splat.levels > self.ima.num_iterations {
            violations.push(format!(
                "L <= M violated: splat.levels = {} exceeds ima.num_iterations = {}",
                self.splat.levels, self.ima.num_iterations
            ));
        }
        if self.splat.levels == 0 {
            violations.push("splat.levels must be at least 1".into());
        }
        if self.ima.num_iterations == 0 {
            violations.push("ima.num_iterations must be at least 1".into());
        }
        if self.ima.num_offsets == 0 {
            violations.push("ima.num_offsets must be at least 1".into());
        }
        if self.feature_channels < 2 {
            violations.push("feature_channels must be at least 2".into());
        }
        if self.init.n_total == 0 {
            violations.push("init.n_total must be positive".into());
        }
        if self.init.top_k + self.init.n_sample > self.init.n_total {
            violations.push(format!(
                "init budget violated: top_k ({}) + n_sample ({}) exceeds n_total ({})",
                self.init.top_k, self.init.n_sample, self.init.n_total
            ));
        }
        if self.init.voxel_size <= 0.0 {
            violations.push("init.voxel_size must be positive".into());
        }
        if !self.init.bounds.is_valid() {
            violations.push("init.bounds must be a nonempty finite box".into());
        }
        if self.splat.cell_size <= 0.0 {
            violations.push("splat.cell_size must be positive".into());
        }
        if self.splat.cutoff_sigma <= 0.0 {
            violations.push("splat.cutoff_sigma must be positive".into());
        }
        if self.splat.tile_size == 0 {
            violations.push("splat.tile_size must be at least 1".into());
        }
        // The BEV raster must share the voxel lattice so pillar cells land on
        // raster cells.
        if self.init.voxel_size > 0.0 && self.init.bounds.is_valid() {
            let grid = self.init.grid();
            if self.splat.cell_size != self.init.voxel_size {
                violations.push(format!(
                    "grid/range compatibility: splat.cell_size ({}) must equal init.voxel_size ({})",
                    self.splat.cell_size, self.init.voxel_size
                ));
            }
            if self.splat.origin != [self.init.bounds.min[0], self.init.bounds.min[1]] {
                violations.push(format!(
                    "grid/range compatibility: splat.origin {:?} must equal the range minimum ({}, {})",
                    self.splat.origin, self.init.bounds.min[0], self.init.bounds.min[1]
                ));
            }
            if self.splat.dims != (grid.dims[0], grid.dims[1]) {
                violations.push(format!(
                    "grid/range compatibility: splat.dims {:?} must match the lattice ({}, {})",
                    self.splat.dims, grid.dims[0], grid.dims[1]
                ));
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations))
        }
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path)?;
    let config: PipelineConfig = toml::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
    config.validate()?;
    Ok(config)
}

pub fn save_config(path: &Path, config: &PipelineConfig) -> Result<()> {
    let text = toml::to_string_pretty(config).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

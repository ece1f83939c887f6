//! Bird's-eye-view feature raster.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// X x Y x C feature raster with a world-to-cell mapping. Cell (ix, iy)
/// covers the square starting at `origin + (ix, iy) * cell_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub dims: (usize, usize),
    pub channels: usize,
    /// Row-major X x Y x C.
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(origin: [f64; 2], cell_size: f64, dims: (usize, usize), channels: usize) -> Self {
        Self {
            origin,
            cell_size,
            dims,
            channels,
            data: vec![0.0; dims.0 * dims.1 * channels],
        }
    }

    #[inline]
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin[0] + (ix as f64 + 0.5) * self.cell_size,
            self.origin[1] + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    #[inline]
    pub fn cell(&self, ix: usize, iy: usize) -> &[f64] {
        let base = (ix * self.dims.1 + iy) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, ix: usize, iy: usize) -> &mut [f64] {
        let base = (ix * self.dims.1 + iy) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell_size <= 0.0 {
            return Err(Error::DimensionMismatch(format!(
                "cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        if self.data.len() != self.dims.0 * self.dims.1 * self.channels {
            return Err(Error::DimensionMismatch(format!(
                "bev data length {} does not match {}x{}x{}",
                self.data.len(),
                self.dims.0,
                self.dims.1,
                self.channels
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::DimensionMismatch("non-finite bev value".into()));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.dims.0, self.dims.1, self.channels], self.data.clone())
            .expect("dims consistent by construction")
    }
}

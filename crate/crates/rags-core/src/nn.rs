//! Minimal deterministic neural primitives and loss compositions.
//!
//! Weights come from a seeded counter-based generator (ChaCha20), so the
//! same seed yields bit-identical parameters on every platform. These small
//! dense stacks stand in for the learned blocks of a full detector; nothing
//! here trains beyond the smoke descent driven by the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step for gradient checks. Balances truncation against
/// round-off at f64 precision.
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Derive a stream-specific seed from a base seed, splitmix-style.
pub fn subseed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// Row-major output_dim x input_dim.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

/// A chain of affine layers with elementwise activations.
#[derive(Debug, Clone)]
pub struct DenseStack {
    pub layers: Vec<DenseLayer>,
}

impl DenseStack {
    /// Seeded stack with `dims = [in, h1, ..., out]` and one activation per
    /// layer. Weights and biases are uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn seeded(dims: &[usize], activations: &[Activation], seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        assert_eq!(activations.len(), dims.len() - 1);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (input_dim, output_dim) = (w[0], w[1]);
                let bound = 1.0 / (input_dim as f64).sqrt();
                let weights = (0..input_dim * output_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                let bias = (0..output_dim).map(|_| rng.gen_range(-bound..bound)).collect();
                DenseLayer {
                    weights,
                    bias,
                    input_dim,
                    output_dim,
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    /// Identity mapping of the given width: unit diagonal, zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            layers: vec![DenseLayer {
                weights,
                bias: vec![0.0; dim],
                input_dim: dim,
                output_dim: dim,
                activation: Activation::None,
            }],
        }
    }

    /// All-zero weights and biases; useful as the "no-op" network where the
    /// consumer treats a zero output as no update.
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            layers: vec![DenseLayer {
                weights: vec![0.0; input_dim * output_dim],
                bias: vec![0.0; output_dim],
                input_dim,
                output_dim,
                activation: Activation::None,
            }],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "dense stack expects input width {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut cur = input.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.output_dim];
            for (o, out) in next.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                let mut acc = layer.bias[o];
                for (w, x) in row.iter().zip(&cur) {
                    acc += w * x;
                }
                *out = layer.activation.apply(acc);
            }
            cur = next;
        }
        Ok(cur)
    }
}

/// Balancing weight between detection and auxiliary rendering losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_aux: 0.1 }
    }
}

/// Per-pixel expected depth over the bin ladder: sum of P_d * d.
pub fn depth_expectation(depth_prob: &Tensor, depth_bins: &[f64]) -> Result<Tensor> {
    let dims = depth_prob.dims();
    if dims.len() != 3 || dims[2] != depth_bins.len() {
        return Err(Error::DimensionMismatch(format!(
            "depth_prob dims {:?} incompatible with {} bins",
            dims,
            depth_bins.len()
        )));
    }
    let (h, w, d) = (dims[0], dims[1], dims[2]);
    let mut out = Tensor::zeros(&[h, w]);
    for row in 0..h {
        for col in 0..w {
            let p = depth_prob.slice3(row, col);
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-5 || p.iter().any(|&v| v < 0.0) {
                return Err(Error::UnnormalizedDistribution { row, col, sum });
            }
            let mut e = 0.0;
            for k in 0..d {
                e += p[k] * depth_bins[k];
            }
            out.set2(row, col, e);
        }
    }
    Ok(out)
}

/// Numerically stable binary cross-entropy from logits.
#[inline]
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Pretraining supervision: L1 depth over valid (> 0) ground-truth pixels
/// plus mean binary cross-entropy on the segmentation logits.
pub fn pretrain_loss(
    pred_depth: &Tensor,
    gt_depth: &Tensor,
    pred_seg_logits: &Tensor,
    gt_seg_mask: &Tensor,
) -> Result<f64> {
    if pred_depth.dims() != gt_depth.dims() || pred_seg_logits.dims() != gt_seg_mask.dims() {
        return Err(Error::DimensionMismatch(
            "pretrain_loss inputs must share shapes".into(),
        ));
    }
    let mut l1 = 0.0;
    let mut valid = 0usize;
    for (p, g) in pred_depth.data().iter().zip(gt_depth.data()) {
        if *g > 0.0 {
            l1 += (p - g).abs();
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::NoValidPixels);
    }
    let depth_term = l1 / valid as f64;
    let mut bce = 0.0;
    for (x, y) in pred_seg_logits.data().iter().zip(gt_seg_mask.data()) {
        bce += bce_with_logits(*x, *y);
    }
    let seg_term = bce / pred_seg_logits.len() as f64;
    Ok(depth_term + seg_term)
}

/// Joint objective: detection plus lambda-weighted auxiliary rendering terms.
pub fn total_loss(
    det_loss: f64,
    depth_render_loss: f64,
    seg_render_loss: f64,
    w: &LossWeights,
) -> f64 {
    det_loss + w.lambda_aux * (depth_render_loss + seg_render_loss)
}

/// Compare an analytic gradient against central differences.
///
/// Returns max_i |g_fd - g_an| / max(1, |g_fd|).
pub fn grad_check<F>(mut f: F, x: &[f64], analytic_grad: &[f64]) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic_grad.len() != x.len() {
        return Err(Error::DimensionMismatch(
            "gradient length must match input length".into(),
        ));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + GRAD_CHECK_STEP;
        let fp = f(&probe);
        probe[i] = x[i] - GRAD_CHECK_STEP;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteFunction);
        }
        let fd = (fp - fm) / (2.0 * GRAD_CHECK_STEP);
        let err = (fd - analytic_grad[i]).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

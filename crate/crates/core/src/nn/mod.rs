//! Differentiable layers with hand-derived backward passes.
//!
//! Each layer exposes `forward(&self, ..) -> (output, cache)` and
//! `backward(&mut self, cache, d_output) -> d_input`. Backward calls add into
//! the owning [`Parameter`](crate::tensor::Parameter) gradients.

mod attention;
mod encoder;
mod feedforward;
mod linear;
mod norm;

pub use attention::{multi_head_attention, AttentionCache, MultiHeadAttention, SeqLayout, MASKED_LOGIT};
pub use encoder::{EncoderLayer, EncoderLayerCache, TransformerStack};
pub use feedforward::{FeedForward, FeedForwardCache};
pub use linear::{linear_forward, Linear};
pub use norm::{layer_norm, LayerNorm, LayerNormCache};

use crate::tensor::Tensor2D;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient of a row softmax: `dz = p ⊙ (dp − ⟨dp, p⟩)`.
pub fn softmax_rows_backward(probs: &Tensor2D, d_probs: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for (o, (pi, dpi)) in out.row_mut(r).iter_mut().zip(p.iter().zip(dp)) {
            *o = pi * (dpi - dot);
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor2D::from_rows(&[[0.0, 0.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor2D::from_rows(&[[1000.0, 1000.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor2D::from_rows(&[[0.0, 1.0]]).unwrap());
        assert!((s.get(0, 0) - 0.2689).abs() < 1e-4);
        assert!((s.get(0, 1) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}

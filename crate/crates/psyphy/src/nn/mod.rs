//! Minimal CPU neural-network kernels: convolution, pooling, linear layers,
//! activations and an Adam optimizer, with hand-written backward passes.
//!
//! Everything is generic over the float type so that production models run in
//! `f32` while numerically sensitive tests can instantiate `f64`.

pub mod adam;
pub mod conv;
pub mod init;
pub mod linear;
pub mod pool;

pub use adam::{Adam, AdamConfig};
pub use conv::Conv2d;
pub use linear::Linear;
pub use pool::MaxPool2d;

use ndarray::{Array2, NdFloat};
use num_traits::FromPrimitive;

/// Float element for all network math (`f32` or `f64`).
pub trait Element: NdFloat + FromPrimitive {}
impl Element for f32 {}
impl Element for f64 {}

pub(crate) fn cast<F: Element>(v: f64) -> F {
    F::from_f64(v).expect("finite constant")
}

/// In-place rectified linear unit.
pub fn relu_inplace<F: Element, D: ndarray::Dimension>(x: &mut ndarray::Array<F, D>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

pub fn sigmoid<F: Element>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows<F: Element>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean softmax cross-entropy over a batch of logits, and its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy<F: Element>(
    logits: &Array2<F>,
    labels: &[usize],
) -> (F, Array2<F>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len(), "batch size mismatch");
    let probs = softmax_rows(logits);
    let scale = cast::<F>(1.0 / n as f64);
    let mut loss = F::zero();
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let p = probs[[i, label]].max(cast(1e-30));
        loss = loss - p.ln();
        grad[[i, label]] = grad[[i, label]] - F::one();
    }
    grad.mapv_inplace(|v| v * scale);
    (loss * scale, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[1.0f64, 2.0, 3.0], [-10.0, 0.0, 10.0]];
        let p = softmax_rows(&logits);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // Uniform logits over 2 classes: loss = ln 2.
        let logits = array![[0.0f64, 0.0]];
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((grad[[0, 1]] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut logits = array![[0.3f64, -0.7, 1.1], [2.0, 0.1, -0.4]];
        let labels = [2usize, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let orig = logits[[i, j]];
                logits[[i, j]] = orig + h;
                let (lp, _) = softmax_cross_entropy(&logits, &labels);
                logits[[i, j]] = orig - h;
                let (lm, _) = softmax_cross_entropy(&logits, &labels);
                logits[[i, j]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() < 1e-8, "fd {fd} vs {}", grad[[i, j]]);
            }
        }
    }
}

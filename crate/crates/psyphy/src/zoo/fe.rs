//! Feature-excitation head: an unbiased down/up projection whose sigmoid
//! output gates the flattened feature vector elementwise, followed by a single
//! biased output layer. The gate computes `x * sigmoid(expand(relu(reduce(x))))`.

use crate::error::{Error, Result};
use crate::nn::{init, sigmoid, Element, Linear};
use ndarray::{Array1, Array2};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct FeatureExcitationHead<F: Element> {
    /// Down-projection, `feature_dim -> feature_dim / reduction`, no bias.
    pub reduce: Linear<F>,
    /// Up-projection, `feature_dim / reduction -> feature_dim`, no bias.
    pub expand: Linear<F>,
    /// Output layer, `feature_dim -> num_classes`, with bias.
    pub output: Linear<F>,
    pub reduction: usize,
}

/// Intermediate values needed by the backward pass, per batch.
pub struct FeGateTape<F: Element> {
    input: Array2<F>,
    hidden_pre: Array2<F>,
    hidden: Array2<F>,
    gate: Array2<F>,
}

pub struct FeGateGrads<F: Element> {
    pub reduce_weight: Array2<F>,
    pub expand_weight: Array2<F>,
    pub input: Array2<F>,
}

impl<F: Element> FeatureExcitationHead<F> {
    /// Random head with He-normal weights and zero output bias.
    pub fn random<R: Rng>(
        rng: &mut R,
        feature_dim: usize,
        num_classes: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || feature_dim % reduction != 0 {
            return Err(Error::Validation(format!(
                "reduction {reduction} must divide feature_dim {feature_dim} exactly"
            )));
        }
        let hidden = feature_dim / reduction;
        Ok(Self {
            reduce: Linear::new(init::kaiming_linear(rng, hidden, feature_dim), None),
            expand: Linear::new(init::kaiming_linear(rng, feature_dim, hidden), None),
            output: Linear::new(
                init::kaiming_linear(rng, num_classes, feature_dim),
                Some(init::zeros_bias(num_classes)),
            ),
            reduction,
        })
    }

    pub fn from_parts(reduce: Linear<F>, expand: Linear<F>, output: Linear<F>, reduction: usize) -> Self {
        assert!(reduce.bias.is_none() && expand.bias.is_none(), "gate projections carry no bias");
        Self { reduce, expand, output, reduction }
    }

    pub fn feature_dim(&self) -> usize {
        self.reduce.in_features()
    }

    pub fn num_classes(&self) -> usize {
        self.output.out_features()
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count() + self.output.param_count()
    }

    /// The excitation gate applied to one feature vector.
    pub fn gate_vec(&self, x: &Array1<F>) -> Result<Array1<F>> {
        if x.len() != self.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "gate expects length {}, got {}",
                self.feature_dim(),
                x.len()
            )));
        }
        let mut hidden = self.reduce.forward_vec(x);
        crate::nn::relu_inplace(&mut hidden);
        let pre = self.expand.forward_vec(&hidden);
        Ok(x * &pre.mapv(sigmoid))
    }

    /// Batch gate forward with a tape for `gate_backward`.
    pub fn gate_forward(&self, x: &Array2<F>) -> Result<(Array2<F>, FeGateTape<F>)> {
        if x.ncols() != self.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "gate expects {} features, got {}",
                self.feature_dim(),
                x.ncols()
            )));
        }
        let hidden_pre = self.reduce.forward_batch(x);
        let mut hidden = hidden_pre.clone();
        crate::nn::relu_inplace(&mut hidden);
        let gate = self.expand.forward_batch(&hidden).mapv(sigmoid);
        let out = x * &gate;
        Ok((out, FeGateTape { input: x.clone(), hidden_pre, hidden, gate }))
    }

    /// Backward through the gate alone. Returns gradients for the two
    /// projection weights and for the input.
    pub fn gate_backward(&self, tape: &FeGateTape<F>, gout: &Array2<F>) -> FeGateGrads<F> {
        let g_gate = gout * &tape.input;
        let g_pre_sigmoid =
            &g_gate * &tape.gate * &tape.gate.mapv(|s| F::one() - s);
        let (expand_weight, _) = self.expand.backward_weights_batch(&tape.hidden, &g_pre_sigmoid);
        let g_hidden = self.expand.backward_data_batch(&g_pre_sigmoid);
        let g_hidden_pre = &g_hidden
            * &tape.hidden_pre.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
        let (reduce_weight, _) = self.reduce.backward_weights_batch(&tape.input, &g_hidden_pre);
        let g_from_reduce = self.reduce.backward_data_batch(&g_hidden_pre);
        let input = &(gout * &tape.gate) + &g_from_reduce;
        FeGateGrads { reduce_weight, expand_weight, input }
    }

    /// Full head forward to logits (gate then output layer), batch form.
    pub fn forward_batch(&self, x: &Array2<F>) -> Result<(Array2<F>, FeGateTape<F>, Array2<F>)> {
        let (gated, tape) = self.gate_forward(x)?;
        let logits = self.output.forward_batch(&gated);
        Ok((logits, tape, gated))
    }

    /// Single-vector logits, evaluation mode.
    pub fn logits_vec(&self, x: &Array1<F>) -> Result<Array1<F>> {
        Ok(self.output.forward_vec(&self.gate_vec(x)?))
    }

    /// Gradient of one logit with respect to the flattened input features.
    pub fn input_grad_for_logit(&self, x: &Array1<F>, class: usize) -> Result<Array1<F>> {
        let n = self.feature_dim();
        let xb = x.clone().into_shape_with_order((1, n)).expect("row vector");
        let (_, tape) = self.gate_forward(&xb)?;
        let gout = self
            .output
            .weight
            .row(class)
            .to_owned()
            .into_shape_with_order((1, n))
            .expect("row vector");
        let grads = self.gate_backward(&tape, &gout);
        Ok(grads.input.into_shape_with_order(n).expect("flatten"))
    }
}

/// Named parameter views for checkpointing and optimization.
impl<F: Element> FeatureExcitationHead<F> {
    pub fn param_slices_mut(&mut self) -> Vec<(&'static str, &mut [F])> {
        vec![
            ("head.reduce.weight", self.reduce.weight.as_slice_mut().expect("contiguous")),
            ("head.expand.weight", self.expand.weight.as_slice_mut().expect("contiguous")),
            ("head.output.weight", self.output.weight.as_slice_mut().expect("contiguous")),
            (
                "head.output.bias",
                self.output.bias.as_mut().expect("bias").as_slice_mut().expect("contiguous"),
            ),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn hand_head() -> FeatureExcitationHead<f64> {
        // d = 4, r = 2: reduce selects the first two coordinates, expand is all ones.
        let reduce = Linear::new(array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]], None);
        let expand = Linear::new(Array2::ones((4, 2)), None);
        let output = Linear::new(Array2::ones((2, 4)), Some(Array1::zeros(2)));
        FeatureExcitationHead::from_parts(reduce, expand, output, 2)
    }

    #[test]
    fn gate_matches_hand_computation() {
        // hidden = relu((1, -1)) = (1, 0); pre-gate = (1, 1, 1, 1);
        // gate = sigmoid(1) = 0.7310585786300049 elementwise.
        let head = hand_head();
        let x = array![1.0, -1.0, 2.0, 0.0];
        let out = head.gate_vec(&x).unwrap();
        let s1 = 0.731_058_578_630_004_9;
        let expected = [s1, -s1, 2.0 * s1, 0.0];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn zero_input_passes_through_as_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let head = FeatureExcitationHead::<f64>::random(&mut rng, 8, 2, 4).unwrap();
        let out = head.gate_vec(&Array1::zeros(8)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_preserves_sign_and_shrinks_magnitude() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let head = FeatureExcitationHead::<f64>::random(&mut rng, 12, 2, 4).unwrap();
        let x = Array1::from_shape_fn(12, |i| (i as f64 - 5.5) * 0.7);
        let out = head.gate_vec(&x).unwrap();
        for (o, v) in out.iter().zip(x.iter()) {
            if *v != 0.0 {
                assert_eq!(o.signum(), v.signum());
                assert!(o.abs() < v.abs());
            } else {
                assert_eq!(*o, 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_reduction() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        assert!(FeatureExcitationHead::<f64>::random(&mut rng, 10, 2, 4).is_err());
        assert!(FeatureExcitationHead::<f64>::random(&mut rng, 10, 2, 0).is_err());
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let head = FeatureExcitationHead::<f64>::random(&mut rng, 8, 2, 4).unwrap();
        assert!(head.gate_vec(&Array1::zeros(9)).is_err());
    }

    /// Central finite differences for every gate gradient, f64, d <= 16.
    #[test]
    fn gate_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for trial in 0..5 {
            let d = 8 + 4 * (trial % 3);
            let head = FeatureExcitationHead::<f64>::random(&mut rng, d, 2, 4).unwrap();
            let x = Array2::from_shape_fn((2, d), |(i, j)| {
                ((i * d + j) as f64 * 0.37 + trial as f64).sin()
            });
            let gout = Array2::from_shape_fn((2, d), |(i, j)| ((i + j) as f64 * 0.61).cos());
            let (_, tape) = head.gate_forward(&x).unwrap();
            let grads = head.gate_backward(&tape, &gout);
            let objective = |h: &FeatureExcitationHead<f64>, x: &Array2<f64>| {
                (&h.gate_forward(x).unwrap().0 * &gout).sum()
            };
            let step = 1e-5;
            let check = |analytic: f64, fplus: f64, fminus: f64| {
                let fd = (fplus - fminus) / (2.0 * step);
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    ((fd - analytic) / denom).abs() <= 1e-4,
                    "fd {fd} vs analytic {analytic}"
                );
            };
            // input
            let mut xm = x.clone();
            for idx in [[0usize, 0], [1, d - 1], [0, d / 2]] {
                let orig = xm[idx];
                xm[idx] = orig + step;
                let fp = objective(&head, &xm);
                xm[idx] = orig - step;
                let fm = objective(&head, &xm);
                xm[idx] = orig;
                check(grads.input[idx], fp, fm);
            }
            // reduce / expand weights
            let mut hm = head.clone();
            for idx in [[0usize, 0], [1, 1]] {
                let orig = hm.reduce.weight[idx];
                hm.reduce.weight[idx] = orig + step;
                let fp = objective(&hm, &x);
                hm.reduce.weight[idx] = orig - step;
                let fm = objective(&hm, &x);
                hm.reduce.weight[idx] = orig;
                check(grads.reduce_weight[idx], fp, fm);
            }
            for idx in [[0usize, 0], [d - 1, 1]] {
                let orig = hm.expand.weight[idx];
                hm.expand.weight[idx] = orig + step;
                let fp = objective(&hm, &x);
                hm.expand.weight[idx] = orig - step;
                let fm = objective(&hm, &x);
                hm.expand.weight[idx] = orig;
                check(grads.expand_weight[idx], fp, fm);
            }
        }
    }

    /// Permuting the input together with the reduce columns and expand rows
    /// permutes the gated output identically. Dyadic weights keep all sums
    /// exact so the outputs match bit for bit.
    #[test]
    fn gate_is_permutation_equivariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let d = 8;
        let dyadic = |rng: &mut ChaCha12Rng| (rng.gen_range(-128i32..=128) as f64) / 64.0;
        let reduce = Linear::new(Array2::from_shape_simple_fn((2, d), || dyadic(&mut rng)), None);
        let expand = Linear::new(Array2::from_shape_simple_fn((d, 2), || dyadic(&mut rng)), None);
        let output = Linear::new(Array2::ones((2, d)), Some(Array1::zeros(2)));
        let head = FeatureExcitationHead::from_parts(reduce, expand, output, 4);
        let x = Array1::from_shape_fn(d, |i| (i as f64 - 3.0) / 4.0);
        let out = head.gate_vec(&x).unwrap();

        let perm: Vec<usize> = vec![3, 0, 7, 1, 5, 2, 6, 4];
        let xp = Array1::from_shape_fn(d, |i| x[perm[i]]);
        let reduce_p = Array2::from_shape_fn((2, d), |(r, c)| head.reduce.weight[[r, perm[c]]]);
        let expand_p = Array2::from_shape_fn((d, 2), |(r, c)| head.expand.weight[[perm[r], c]]);
        let head_p = FeatureExcitationHead::from_parts(
            Linear::new(reduce_p, None),
            Linear::new(expand_p, None),
            head.output.clone(),
            4,
        );
        let out_p = head_p.gate_vec(&xp).unwrap();
        for i in 0..d {
            assert_eq!(out_p[i], out[perm[i]], "coordinate {i}");
        }
    }
}

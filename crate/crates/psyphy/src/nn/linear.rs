//! Fully connected layer, with and without bias, for single vectors and
//! row-major batches.

use super::Element;
use ndarray::{linalg::general_mat_mul, linalg::general_mat_vec_mul, Array1, Array2, Axis};

#[derive(Debug, Clone)]
pub struct Linear<F: Element> {
    /// `[out, in]`.
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
}

impl<F: Element> Linear<F> {
    pub fn new(weight: Array2<F>, bias: Option<Array1<F>>) -> Self {
        if let Some(b) = &bias {
            assert_eq!(weight.nrows(), b.len());
        }
        Self { weight, bias }
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn forward_vec(&self, x: &Array1<F>) -> Array1<F> {
        let mut y = match &self.bias {
            Some(b) => b.clone(),
            None => Array1::zeros(self.out_features()),
        };
        general_mat_vec_mul(F::one(), &self.weight, x, F::one(), &mut y);
        y
    }

    /// `x`: `[n, in]` -> `[n, out]`.
    pub fn forward_batch(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = Array2::<F>::zeros((x.nrows(), self.out_features()));
        general_mat_mul(F::one(), x, &self.weight.t(), F::zero(), &mut y);
        if let Some(b) = &self.bias {
            for mut row in y.rows_mut() {
                row += b;
            }
        }
        y
    }

    /// Gradient with respect to the batch input.
    pub fn backward_data_batch(&self, gout: &Array2<F>) -> Array2<F> {
        let mut gx = Array2::<F>::zeros((gout.nrows(), self.in_features()));
        general_mat_mul(F::one(), gout, &self.weight, F::zero(), &mut gx);
        gx
    }

    /// Gradients with respect to weight and (if present) bias.
    pub fn backward_weights_batch(
        &self,
        x: &Array2<F>,
        gout: &Array2<F>,
    ) -> (Array2<F>, Option<Array1<F>>) {
        let mut gw = Array2::<F>::zeros(self.weight.dim());
        general_mat_mul(F::one(), &gout.t(), x, F::zero(), &mut gw);
        let gb = self.bias.as_ref().map(|_| gout.sum_axis(Axis(0)));
        (gw, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn batch_and_vec_paths_agree() {
        let layer = Linear::new(array![[1.0f64, 2.0], [0.5, -1.0], [0.0, 3.0]], Some(array![1.0, 2.0, 3.0]));
        let x = array![0.5f64, -0.25];
        let yv = layer.forward_vec(&x);
        let yb = layer.forward_batch(&x.clone().insert_axis(ndarray::Axis(0)));
        assert_eq!(yv.as_slice().unwrap(), yb.row(0).as_slice().unwrap());
        assert_eq!(yv, array![1.0, 2.5, 2.25]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut layer = Linear::new(array![[0.3f64, -0.2, 0.1], [1.0, 0.5, -0.5]], Some(array![0.1, -0.1]));
        let x = array![[0.2f64, 0.7, -0.3], [1.1, -0.6, 0.4]];
        let gout = array![[1.0f64, -2.0], [0.5, 0.25]];
        let gx = layer.backward_data_batch(&gout);
        let (gw, gb) = layer.backward_weights_batch(&x, &gout);
        let gb = gb.unwrap();
        let h = 1e-6;
        let objective = |l: &Linear<f64>, x: &Array2<f64>| (&l.forward_batch(x) * &gout).sum();
        // weight
        for idx in [[0usize, 0], [1, 2], [0, 1]] {
            let orig = layer.weight[idx];
            layer.weight[idx] = orig + h;
            let fp = objective(&layer, &x);
            layer.weight[idx] = orig - h;
            let fm = objective(&layer, &x);
            layer.weight[idx] = orig;
            assert!(((fp - fm) / (2.0 * h) - gw[idx]).abs() < 1e-8);
        }
        // bias
        {
            let orig = layer.bias.as_ref().unwrap()[1];
            layer.bias.as_mut().unwrap()[1] = orig + h;
            let fp = objective(&layer, &x);
            layer.bias.as_mut().unwrap()[1] = orig - h;
            let fm = objective(&layer, &x);
            layer.bias.as_mut().unwrap()[1] = orig;
            assert!(((fp - fm) / (2.0 * h) - gb[1]).abs() < 1e-8);
        }
        // input
        let mut xm = x.clone();
        let orig = xm[[1, 0]];
        xm[[1, 0]] = orig + h;
        let fp = objective(&layer, &xm);
        xm[[1, 0]] = orig - h;
        let fm = objective(&layer, &xm);
        assert!(((fp - fm) / (2.0 * h) - gx[[1, 0]]).abs() < 1e-8);
    }
}

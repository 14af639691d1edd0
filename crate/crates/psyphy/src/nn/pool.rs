//! Max pooling with argmax bookkeeping for the backward pass.

use super::Element;
use crate::error::{Error, Result};
use ndarray::Array3;

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride }
    }

    pub fn out_dims(&self, in_dim: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = in_dim;
        if h < self.kernel || w < self.kernel {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} too small for {}x{} pooling",
                self.kernel, self.kernel
            )));
        }
        Ok((c, (h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    pub fn forward<F: Element>(&self, x: &Array3<F>) -> Array3<F> {
        self.forward_indexed(x).0
    }

    /// Forward pass that also records, per output cell, the flat `iy*w + ix`
    /// index of the winning input element (first maximum wins ties).
    pub fn forward_indexed<F: Element>(&self, x: &Array3<F>) -> (Array3<F>, Array3<u32>) {
        let (c_n, h, w) = x.dim();
        let (_, oh, ow) = self.out_dims(x.dim()).expect("validated shape");
        let mut out = Array3::<F>::zeros((c_n, oh, ow));
        let mut idx = Array3::<u32>::zeros((c_n, oh, ow));
        for c in 0..c_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * self.stride, ox * self.stride);
                    let mut best = x[[c, y0, x0]];
                    let mut best_i = (y0 * w + x0) as u32;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let (iy, ix) = (y0 + ky, x0 + kx);
                            if iy < h && ix < w {
                                let v = x[[c, iy, ix]];
                                if v > best {
                                    best = v;
                                    best_i = (iy * w + ix) as u32;
                                }
                            }
                        }
                    }
                    out[[c, oy, ox]] = best;
                    idx[[c, oy, ox]] = best_i;
                }
            }
        }
        (out, idx)
    }

    /// Routes output gradients back to the argmax positions.
    pub fn backward<F: Element>(
        &self,
        gout: &Array3<F>,
        idx: &Array3<u32>,
        in_dim: (usize, usize, usize),
    ) -> Array3<F> {
        let (c_n, _h, w) = in_dim;
        let mut gin = Array3::<F>::zeros(in_dim);
        let (_, oh, ow) = gout.dim();
        for c in 0..c_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let flat = idx[[c, oy, ox]] as usize;
                    let (iy, ix) = (flat / w, flat % w);
                    gin[[c, iy, ix]] = gin[[c, iy, ix]] + gout[[c, oy, ox]];
                }
            }
        }
        gin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pools_known_values() {
        let x = array![[
            [1.0f64, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
            [13.0, 14.0, 15.0, 16.0]
        ]];
        let pool = MaxPool2d::new(2, 2);
        let (out, idx) = pool.forward_indexed(&x);
        assert_eq!(out, array![[[6.0, 8.0], [14.0, 16.0]]]);
        // Gradient flows only to the max positions.
        let gout = array![[[1.0, 2.0], [3.0, 4.0]]];
        let gin = pool.backward(&gout, &idx, x.dim());
        assert_eq!(gin[[0, 1, 1]], 1.0);
        assert_eq!(gin[[0, 1, 3]], 2.0);
        assert_eq!(gin[[0, 3, 1]], 3.0);
        assert_eq!(gin[[0, 3, 3]], 4.0);
        assert_eq!(gin.sum(), 10.0);
    }

    #[test]
    fn overlapping_window_matches_expectation() {
        // AlexNet-style 3x3 stride-2 pooling on a 5x5 ramp.
        let x = Array3::from_shape_fn((1, 5, 5), |(_, y, xx)| (y * 5 + xx) as f64);
        let pool = MaxPool2d::new(3, 2);
        let (out, _) = pool.forward_indexed(&x);
        assert_eq!(out.dim(), (1, 2, 2));
        assert_eq!(out[[0, 1, 1]], 24.0);
    }
}

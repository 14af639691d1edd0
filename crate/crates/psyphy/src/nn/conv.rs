//! 2-D convolution via im2col + GEMM, with backward passes for both data and
//! weights. Layouts: activations are `[C, H, W]`, kernels `[O, C, KH, KW]`.

use super::Element;
use crate::error::{Error, Result};
use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, Array4};

#[derive(Debug, Clone)]
pub struct Conv2d<F: Element> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Element> Conv2d<F> {
    pub fn new(weight: Array4<F>, bias: Array1<F>, stride: usize, padding: usize) -> Self {
        assert_eq!(weight.dim().0, bias.len(), "bias length must match out channels");
        Self { weight, bias, stride, padding }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn kernel(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (kh, kw)
    }

    /// Output spatial dims for an input of `(c, h, w)`; errors when the input
    /// is too small for the kernel/stride/padding combination.
    pub fn out_dims(&self, in_dim: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = in_dim;
        let (kh, kw) = self.kernel();
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let oh = (h + 2 * self.padding).checked_sub(kh).map(|v| v / self.stride + 1);
        let ow = (w + 2 * self.padding).checked_sub(kw).map(|v| v / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((self.out_channels(), oh, ow)),
            _ => Err(Error::ShapeMismatch(format!(
                "input {h}x{w} too small for kernel {kh}x{kw} stride {} pad {}",
                self.stride, self.padding
            ))),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (o, oh, ow) = self.out_dims(x.dim()).expect("validated shape");
        let k = self.in_channels() * self.kernel().0 * self.kernel().1;
        let cols = self.im2col(x, oh, ow);
        let w2 = self.weight.view().into_shape_with_order((o, k)).expect("contiguous weight");
        let mut out2 = Array2::<F>::zeros((o, oh * ow));
        general_mat_mul(F::one(), &w2, &cols, F::zero(), &mut out2);
        for (mut row, &b) in out2.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        out2.into_shape_with_order((o, oh, ow)).expect("reshape")
    }

    /// Gradient with respect to the input, given the gradient at the output.
    pub fn backward_data(&self, gout: &Array3<F>, in_dim: (usize, usize, usize)) -> Array3<F> {
        let (o, oh, ow) = gout.dim();
        let k = self.in_channels() * self.kernel().0 * self.kernel().1;
        let w2 = self.weight.view().into_shape_with_order((o, k)).expect("contiguous weight");
        let g2 = gout.view().into_shape_with_order((o, oh * ow)).expect("contiguous grad");
        let mut gcols = Array2::<F>::zeros((k, oh * ow));
        general_mat_mul(F::one(), &w2.t(), &g2, F::zero(), &mut gcols);
        self.col2im(&gcols, in_dim, oh, ow)
    }

    /// Gradients with respect to weight and bias.
    pub fn backward_weights(&self, x: &Array3<F>, gout: &Array3<F>) -> (Array4<F>, Array1<F>) {
        let (o, oh, ow) = gout.dim();
        let k = self.in_channels() * self.kernel().0 * self.kernel().1;
        let cols = self.im2col(x, oh, ow);
        let g2 = gout.view().into_shape_with_order((o, oh * ow)).expect("contiguous grad");
        let mut gw2 = Array2::<F>::zeros((o, k));
        general_mat_mul(F::one(), &g2, &cols.t(), F::zero(), &mut gw2);
        let gb = g2.sum_axis(ndarray::Axis(1));
        let (_, c, kh, kw) = self.weight.dim();
        (gw2.into_shape_with_order((o, c, kh, kw)).expect("reshape"), gb)
    }

    fn im2col(&self, x: &Array3<F>, oh: usize, ow: usize) -> Array2<F> {
        let (c_in, h, w) = x.dim();
        let (kh, kw) = self.kernel();
        let (s, p) = (self.stride, self.padding);
        let mut cols = Array2::<F>::zeros((c_in * kh * kw, oh * ow));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        for c in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let (lo, hi) = valid_range(kx, s, p, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = row * (oh * ow) + oy * ow;
                        let src = c * h * w + iy as usize * w;
                        if s == 1 {
                            let ix0 = lo + kx - p;
                            cs[dst + lo..dst + hi]
                                .copy_from_slice(&xs[src + ix0..src + ix0 + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                let ix = ox * s + kx - p;
                                cs[dst + ox] = xs[src + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        &self,
        cols: &Array2<F>,
        in_dim: (usize, usize, usize),
        oh: usize,
        ow: usize,
    ) -> Array3<F> {
        let (c_in, h, w) = in_dim;
        let (kh, kw) = self.kernel();
        let (s, p) = (self.stride, self.padding);
        let mut gin = Array3::<F>::zeros((c_in, h, w));
        let cs = cols.as_slice().expect("standard layout");
        let gs = gin.as_slice_mut().expect("standard layout");
        for c in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let (lo, hi) = valid_range(kx, s, p, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = row * (oh * ow) + oy * ow;
                        let dst = c * h * w + iy as usize * w;
                        for ox in lo..hi {
                            let ix = ox * s + kx - p;
                            gs[dst + ix] = gs[dst + ix] + cs[src + ox];
                        }
                    }
                }
            }
        }
        gin
    }
}

/// Range of output x positions whose receptive field column stays in-bounds.
fn valid_range(kx: usize, stride: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi_num = w + pad;
    let hi = if hi_num > kx {
        ((hi_num - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

//! Weight initialization.

use super::Element;
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-normal standard deviation for ReLU layers: sqrt(2 / fan_in).
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn sample<F: Element, R: Rng>(rng: &mut R, std: f64) -> F {
    let normal = Normal::new(0.0, std).expect("valid std");
    super::cast(normal.sample(rng))
}

pub fn kaiming_conv<F: Element, R: Rng>(
    rng: &mut R,
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
) -> Array4<F> {
    let std = he_std(in_ch * kh * kw);
    Array4::from_shape_simple_fn((out_ch, in_ch, kh, kw), || sample(rng, std))
}

pub fn kaiming_linear<F: Element, R: Rng>(rng: &mut R, out: usize, inp: usize) -> Array2<F> {
    let std = he_std(inp);
    Array2::from_shape_simple_fn((out, inp), || sample(rng, std))
}

pub fn zeros_bias<F: Element>(n: usize) -> Array1<F> {
    Array1::zeros(n)
}

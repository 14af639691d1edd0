//! Parametric cartoon-face generator: a fixed oval head, two eyes and a nose,
//! with a mouth whose curvature interpolates linearly from frown (level 0)
//! through straight (level 0.5) to smile (level 1). A synthetic benchmark, not
//! a reproduction of any face database.

use super::{ContinuumSource, MorphContinuum};
use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Seed-jittered face geometry, fixed across all morph levels of one identity.
/// All features stay inside the default mask boxes regardless of jitter.
#[derive(Debug, Clone)]
pub struct SynthFace {
    head_rx: f64,
    head_ry: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    mouth_half_width: f64,
    mouth_depth: f64,
    skin: [u8; 3],
    background: [u8; 3],
}

impl SynthFace {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let jitter = |rng: &mut ChaCha12Rng, base: f64, spread: f64| {
            base + rng.gen_range(-spread..=spread)
        };
        Self {
            head_rx: jitter(&mut rng, 0.34, 0.02),
            head_ry: jitter(&mut rng, 0.42, 0.02),
            eye_dx: jitter(&mut rng, 0.12, 0.01),
            eye_y: jitter(&mut rng, 0.40, 0.01),
            eye_r: jitter(&mut rng, 0.038, 0.004),
            mouth_half_width: jitter(&mut rng, 0.15, 0.015),
            mouth_depth: jitter(&mut rng, 0.055, 0.006),
            skin: [
                200 + rng.gen_range(0..=20),
                165 + rng.gen_range(0..=20),
                135 + rng.gen_range(0..=20),
            ],
            background: {
                let g = 190 + rng.gen_range(0..=20);
                [g, g, g]
            },
        }
    }

    /// Mouth curvature control value for a morph level; linear in the level,
    /// exactly zero (straight mouth) at 0.5.
    pub fn mouth_curvature(level: f64) -> f64 {
        2.0 * level - 1.0
    }

    /// Renders one face at the given morph level; only the mouth region
    /// depends on the level.
    pub fn render(&self, level: f64, size: u32) -> RgbImage {
        let s = size as f64;
        let mut img = RgbImage::from_pixel(size, size, Rgb(self.background));
        let (cx, cy) = (0.5 * s, 0.52 * s);

        // Head: filled ellipse.
        let (rx, ry) = (self.head_rx * s, self.head_ry * s);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    img.put_pixel(x, y, Rgb(self.skin));
                }
            }
        }

        // Eyes: two filled discs.
        let eye_color = Rgb([30, 30, 45]);
        for side in [-1.0, 1.0] {
            let ex = (0.5 + side * self.eye_dx) * s;
            let ey = self.eye_y * s;
            fill_disc(&mut img, ex, ey, self.eye_r * s, eye_color);
        }

        // Nose: short slanted stroke with a base.
        let nose_color = Rgb([150, 110, 90]);
        stroke(&mut img, (0.50 * s, 0.50 * s), (0.47 * s, 0.58 * s), s / 96.0, nose_color);
        stroke(&mut img, (0.47 * s, 0.58 * s), (0.52 * s, 0.595 * s), s / 96.0, nose_color);

        // Mouth: quadratic arc, curvature linear in the level.
        let c = Self::mouth_curvature(level);
        let mouth_color = Rgb([120, 40, 45]);
        let n = (size * 2).max(32);
        let mut prev: Option<(f64, f64)> = None;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let x = (0.5 + (t - 0.5) * 2.0 * self.mouth_half_width) * s;
            let bump = 1.0 - (2.0 * t - 1.0).powi(2);
            let y = (0.72 - c * self.mouth_depth * bump) * s;
            if let Some(p) = prev {
                stroke(&mut img, p, (x, y), s / 64.0, mouth_color);
            }
            prev = Some((x, y));
        }
        img
    }
}

fn fill_disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let x0 = ((cx - r).floor().max(0.0)) as u32;
    let x1 = (((cx + r).ceil()) as u32).min(w.saturating_sub(1));
    let y0 = ((cy - r).floor().max(0.0)) as u32;
    let y1 = (((cy + r).ceil()) as u32).min(h.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                img.put_pixel(x, y, color);
            }
        }
    }
}

fn stroke(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), half_width: f64, color: Rgb<u8>) {
    let steps = (((b.0 - a.0).abs() + (b.1 - a.1).abs()).ceil() as usize).max(1) * 2;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        fill_disc(img, x, y, half_width.max(1.0), color);
    }
}

/// Evenly spaced morph continuum for one synthetic identity.
pub fn synth_continuum(n_levels: usize, seed: u64, size: u32) -> Result<MorphContinuum> {
    if n_levels < 2 {
        return Err(Error::Stimulus(format!("n_levels must be >= 2, got {n_levels}")));
    }
    let face = SynthFace::from_seed(seed);
    let levels: Vec<f64> = (0..n_levels).map(|i| i as f64 / (n_levels - 1) as f64).collect();
    let images = levels.iter().map(|&l| face.render(l, size)).collect();
    MorphContinuum::new(levels, images, ContinuumSource::Synthetic)
}

/// Labeled synthetic dataset: `n` faces with per-image identity jitter and
/// valence drawn from the clearly expressive ranges `[-1, -0.3]` and
/// `[0.3, 1]`, alternating sign so both classes are always present. The morph
/// level is `(valence + 1) / 2`.
pub fn synth_dataset(n: usize, seed: u64, size: u32) -> Vec<(RgbImage, f64)> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0xD134_2543_DE82_EF95));
            let magnitude = rng.gen_range(0.3..=1.0);
            let valence = if i % 2 == 0 { magnitude } else { -magnitude };
            let face = SynthFace::from_seed(seed.wrapping_add(1 + i as u64));
            let level = (valence + 1.0) / 2.0;
            (face.render(level, size), valence)
        })
        .collect()
}

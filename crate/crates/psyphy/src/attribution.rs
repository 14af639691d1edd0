//! LayerCAM attribution: the class-score gradient at a convolutional layer is
//! rectified elementwise, multiplied with the activations, summed over
//! channels and rectified again:
//! `M(x, y) = relu( sum_k relu(dy_c / dA_k(x, y)) * A_k(x, y) )`.
//! Heatmaps are nonnegative by construction; overlays and grid figures are
//! rendered deterministically.

use crate::error::{Error, Result};
use crate::imgops;
use crate::nn::Element;
use crate::plotting;
use crate::stimuli::MorphContinuum;
use crate::zoo::Model;
use image::RgbImage;
use ndarray::{Array2, Array3};

/// Nonnegative spatial attribution map at one layer.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub values: Array2<f64>,
    pub layer_name: String,
    pub target_class: usize,
    pub normalized: bool,
}

impl Heatmap {
    /// Scales so the maximum becomes 1 (identically-zero maps stay zero).
    pub fn normalized(mut self) -> Heatmap {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            self.values.mapv_inplace(|v| v / max);
        }
        self.normalized = true;
        self
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// The rectify-weight-sum-rectify combination, accumulated in f64. Public so
/// oracle tests can drive it with hand-built activation/gradient stacks.
pub fn heatmap_from_parts<F: Element>(activations: &Array3<F>, grads: &Array3<F>) -> Array2<f64> {
    assert_eq!(activations.dim(), grads.dim(), "activation/gradient stacks must align");
    let (k, h, w) = activations.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for c in 0..k {
                let g = grads[[c, y, x]].to_f64().expect("finite");
                if g > 0.0 {
                    acc += g * activations[[c, y, x]].to_f64().expect("finite");
                }
            }
            out[[y, x]] = acc.max(0.0);
        }
    }
    out
}

/// LayerCAM for a preprocessed input tensor. The default layer (when `layer`
/// is `None`) is the last convolutional layer.
pub fn layer_cam_on_input<F: Element>(
    model: &Model<F>,
    input: &Array3<F>,
    layer: Option<&str>,
    target_class: usize,
) -> Result<Heatmap> {
    let layer = layer.unwrap_or_else(|| model.last_conv_layer());
    let (activations, grads) = model.activation_and_grad(input, layer, target_class)?;
    Ok(Heatmap {
        values: heatmap_from_parts(&activations, &grads),
        layer_name: layer.to_string(),
        target_class,
        normalized: false,
    })
}

/// LayerCAM for a stimulus image (preprocessing applied).
pub fn layer_cam(
    model: &Model<f32>,
    image: &RgbImage,
    layer: Option<&str>,
    target_class: usize,
) -> Result<Heatmap> {
    let input = imgops::preprocess(image, model.spec().input_size);
    layer_cam_on_input(model, &input, layer, target_class)
}

/// Upsamples the (normalized) heatmap to the stimulus size, colormaps it and
/// alpha-blends it over the stimulus. `alpha = 0` returns the stimulus
/// pixel-exactly; `alpha = 1` returns the pure colormapped heatmap.
pub fn render_overlay(heatmap: &Heatmap, image: &RgbImage, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Stimulus("cannot overlay onto a zero-size image".into()));
    }
    let norm = heatmap.clone().normalized();
    let (mh, mw) = norm.values.dim();
    let map3 = norm
        .values
        .mapv(|v| v as f32)
        .into_shape_with_order((1, mh, mw))
        .expect("reshape");
    let up = imgops::resize_bilinear(&map3, h as usize, w as usize);
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = up[[0, y as usize, x as usize]] as f64;
            let cmap = plotting::jet(v);
            let src = image.get_pixel(x, y).0;
            let blend = |s: u8, c: u8| {
                ((1.0 - alpha) * s as f64 + alpha * c as f64).round().clamp(0.0, 255.0) as u8
            };
            out.put_pixel(
                x,
                y,
                image::Rgb([blend(src[0], cmap[0]), blend(src[1], cmap[1]), blend(src[2], cmap[2])]),
            );
        }
    }
    Ok(out)
}

/// Rows = models, columns = stimuli: one overlay per cell, with labels.
/// `layer = None` selects each model's last convolutional layer.
pub fn cam_grid(
    models: &[(String, &Model<f32>)],
    stimuli: &[(f64, &RgbImage)],
    layer: Option<&str>,
    target_class: usize,
    alpha: f64,
) -> Result<RgbImage> {
    if models.is_empty() || stimuli.is_empty() {
        return Err(Error::EmptyInput("cam grid needs at least one model and stimulus".into()));
    }
    let dims = stimuli[0].1.dimensions();
    if stimuli.iter().any(|(_, im)| im.dimensions() != dims) {
        return Err(Error::ShapeMismatch("grid stimuli must share dimensions".into()));
    }
    let col_labels: Vec<String> =
        stimuli.iter().map(|(level, _)| format!("{}%", (level * 100.0).round() as i64)).collect();
    let mut rows = Vec::new();
    for (label, model) in models {
        let mut cells = Vec::new();
        for (_, img) in stimuli {
            let map = layer_cam(model, img, layer, target_class)?;
            cells.push(render_overlay(&map, img, alpha)?);
        }
        rows.push((label.clone(), cells));
    }
    plotting::image_grid(&rows, &col_labels)
}

/// Convenience: the `n` evenly spaced levels (by nearest available stimulus)
/// used by the published grid figures, e.g. 0/25/50/75/100%.
pub fn evenly_spaced_stimuli(continuum: &MorphContinuum, n: usize) -> Vec<(f64, &RgbImage)> {
    (0..n)
        .map(|i| {
            let target = i as f64 / (n - 1).max(1) as f64;
            continuum.nearest(target)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Linear, MaxPool2d};
    use crate::zoo::{ArchName, Head, Stage, StandardHead};
    use ndarray::{array, Array1, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn combination_matches_hand_example() {
        // Single channel 2x2: A = [[1,2],[3,4]], G = [[-1,0.5],[0.25,-2]]
        // -> weights relu(G) = [[0,0.5],[0.25,0]], product = [[0,1],[0.75,0]].
        let a = array![[[1.0f64, 2.0], [3.0, 4.0]]];
        let g = array![[[-1.0f64, 0.5], [0.25, -2.0]]];
        let m = heatmap_from_parts(&a, &g);
        assert_eq!(m, array![[0.0, 1.0], [0.75, 0.0]]);
    }

    #[test]
    fn nonpositive_gradients_null_the_map() {
        let a = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y + x) as f64 + 1.0);
        let g = a.mapv(|v| -v);
        let m = heatmap_from_parts(&a, &g);
        assert!(m.iter().all(|&v| v == 0.0));
    }

    /// Tiny 2-conv model over an 8x8 input with a linear head; f64 end to end.
    fn toy_model(seed: u64) -> Model<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut sample4 = |o: usize, c: usize, k: usize| {
            Array4::from_shape_simple_fn((o, c, k, k), || rng.gen_range(-0.5..0.5))
        };
        let conv1 = Conv2d::new(sample4(4, 3, 3), Array1::zeros(4), 1, 1);
        let conv2 = Conv2d::new(sample4(6, 4, 3), Array1::zeros(6), 1, 1);
        let mut rng2 = ChaCha12Rng::seed_from_u64(seed + 1);
        let feature_dim = 6 * 8 * 8;
        let mut sample2 = |o: usize, i: usize| {
            Array2::from_shape_simple_fn((o, i), || rng2.gen_range(-0.1..0.1))
        };
        let head = StandardHead {
            fc1: Linear::new(sample2(16, feature_dim), Some(Array1::zeros(16))),
            fc2: Linear::new(sample2(16, 16), Some(Array1::zeros(16))),
            fc3: Linear::new(sample2(2, 16), Some(Array1::zeros(2))),
            dropout: 0.5,
        };
        Model::from_parts(
            ArchName::Alexnet,
            (8, 8),
            2,
            vec![
                Stage::Conv { name: "conv1".into(), layer: conv1 },
                Stage::Conv { name: "conv2".into(), layer: conv2 },
            ],
            Head::Standard(head),
        )
        .unwrap()
    }

    /// Independent loop-based gradient of `logit[class]` w.r.t. the post-ReLU
    /// activations of `conv2`, written directly from the chain rule with no
    /// shared code with the production backward pass.
    fn oracle_grad_at_conv2(model: &Model<f64>, x: &Array3<f64>, class: usize) -> (Array3<f64>, Array3<f64>) {
        let maps = model.feature_maps(x).unwrap();
        let a2 = maps[1].1.clone();
        let (k, h, w) = a2.dim();
        let flat: Vec<f64> = a2.iter().cloned().collect();
        let (fc1, fc2, fc3) = match model.head() {
            Head::Standard(hd) => (&hd.fc1, &hd.fc2, &hd.fc3),
            _ => unreachable!(),
        };
        // Forward through the head, keeping pre-activations.
        let mut a_fc1 = vec![0.0f64; fc1.out_features()];
        for (o, item) in a_fc1.iter_mut().enumerate() {
            let mut acc = fc1.bias.as_ref().unwrap()[o];
            for (i, v) in flat.iter().enumerate() {
                acc += fc1.weight[[o, i]] * v;
            }
            *item = acc;
        }
        let r1: Vec<f64> = a_fc1.iter().map(|&v| v.max(0.0)).collect();
        let mut a_fc2 = vec![0.0f64; fc2.out_features()];
        for (o, item) in a_fc2.iter_mut().enumerate() {
            let mut acc = fc2.bias.as_ref().unwrap()[o];
            for (i, v) in r1.iter().enumerate() {
                acc += fc2.weight[[o, i]] * v;
            }
            *item = acc;
        }
        // Backward: d logit_class / d r2 = fc3 row, through relu and fc2/fc1.
        let mut g_r2 = vec![0.0f64; fc2.out_features()];
        for (i, item) in g_r2.iter_mut().enumerate() {
            *item = fc3.weight[[class, i]];
        }
        let g_a2: Vec<f64> = g_r2
            .iter()
            .zip(&a_fc2)
            .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
            .collect();
        let mut g_r1 = vec![0.0f64; fc1.out_features()];
        for (i, item) in g_r1.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (o, g) in g_a2.iter().enumerate() {
                acc += g * fc2.weight[[o, i]];
            }
            *item = acc;
        }
        let g_a1: Vec<f64> = g_r1
            .iter()
            .zip(&a_fc1)
            .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
            .collect();
        let mut g_flat = vec![0.0f64; flat.len()];
        for (i, item) in g_flat.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (o, g) in g_a1.iter().enumerate() {
                acc += g * fc1.weight[[o, i]];
            }
            *item = acc;
        }
        let grads = Array3::from_shape_vec((k, h, w), g_flat).unwrap();
        (a2, grads)
    }

    #[test]
    fn hooked_cam_matches_loop_oracle_on_toy_network() {
        let model = toy_model(55);
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        for _ in 0..4 {
            let x = Array3::from_shape_simple_fn((3, 8, 8), || rng.gen_range(0.0..1.0));
            let hooked = layer_cam_on_input(&model, &x, Some("conv2"), 1).unwrap();
            let (a, g) = oracle_grad_at_conv2(&model, &x, 1);
            let oracle = heatmap_from_parts(&a, &g);
            let max_ref = oracle.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
            let max_diff = (&hooked.values - &oracle)
                .mapv(f64::abs)
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            assert!(max_diff / max_ref <= 1e-6, "relative deviation {}", max_diff / max_ref);
            assert!(hooked.values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cam_leaves_model_outputs_unchanged() {
        let model = toy_model(9);
        let x = Array3::from_shape_fn((3, 8, 8), |(c, y, xx)| ((c + y + xx) as f64 * 0.1).sin());
        let before = model.logits(&x).unwrap();
        let _ = layer_cam_on_input(&model, &x, None, 0).unwrap();
        let after = model.logits(&x).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn unknown_layer_and_class_are_rejected() {
        let model = toy_model(2);
        let x = Array3::zeros((3, 8, 8));
        assert!(layer_cam_on_input(&model, &x, Some("conv9"), 0).is_err());
        assert!(layer_cam_on_input(&model, &x, None, 5).is_err());
    }

    #[test]
    fn overlay_alpha_extremes() {
        let img = RgbImage::from_fn(16, 16, |x, y| image::Rgb([x as u8 * 3, y as u8 * 5, 60]));
        let map = Heatmap {
            values: Array2::from_shape_fn((4, 4), |(y, x)| (y * x) as f64),
            layer_name: "conv1".into(),
            target_class: 1,
            normalized: false,
        };
        let zero = render_overlay(&map, &img, 0.0).unwrap();
        assert_eq!(zero, img, "alpha 0 must be pixel-identical");
        let one = render_overlay(&map, &img, 1.0).unwrap();
        // Full blend: every pixel equals its colormap value, independent of
        // the source image. Uniform zero map -> uniform zero color.
        let flat = Heatmap {
            values: Array2::zeros((4, 4)),
            layer_name: "conv1".into(),
            target_class: 1,
            normalized: false,
        };
        let zero_map = render_overlay(&flat, &img, 1.0).unwrap();
        let expected = plotting::jet(0.0);
        assert!(zero_map.pixels().all(|p| p.0 == expected));
        assert!(render_overlay(&map, &img, 1.5).is_err());
        let _ = one;
    }

    #[test]
    fn normalization_caps_at_one() {
        let map = Heatmap {
            values: Array2::from_shape_fn((3, 3), |(y, x)| (y + x) as f64),
            layer_name: "l".into(),
            target_class: 0,
            normalized: false,
        };
        let n = map.normalized();
        assert!((n.max() - 1.0).abs() < 1e-12);
        let zero = Heatmap {
            values: Array2::zeros((3, 3)),
            layer_name: "l".into(),
            target_class: 0,
            normalized: false,
        };
        assert_eq!(zero.normalized().max(), 0.0);
    }

    use ndarray::Array2;
}

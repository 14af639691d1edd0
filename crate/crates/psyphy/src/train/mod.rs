//! Transfer-learning harness: freeze the feature extractor, train the
//! classifier head with Adam on softmax cross-entropy, and keep the epoch with
//! the best validation accuracy. With `freeze_backbone = false` the same loop
//! trains the convolutional stack too (the desk-scale pretraining path).

pub mod data;

pub use data::{binarize_valence, DatasetManifest, Label, Split, DATA_ROOT_ENV};

use crate::error::{Error, Result};
use crate::imgops;
use crate::nn::{softmax_cross_entropy, Adam, AdamConfig};
use crate::zoo::Model;
use image::RgbImage;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub random_crop: bool,
    pub horizontal_flip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self { random_crop: true, horizontal_flip: true }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self { random_crop: false, horizontal_flip: false }
    }

    pub fn active(&self) -> bool {
        self.random_crop || self.horizontal_flip
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub freeze_backbone: bool,
    #[serde(default)]
    pub augmentation: Augmentation,
}

fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    5e-5
}
fn default_epochs() -> usize {
    20
}
fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            seed: 0,
            freeze_backbone: true,
            augmentation: Augmentation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameter census after freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeCensus {
    pub frozen: usize,
    pub trainable: usize,
}

/// Marks the feature extractor non-trainable; the classifier head stays
/// trainable. Idempotent.
pub fn freeze_features(model: &mut Model<f32>) -> FreezeCensus {
    model.set_frozen_backbone(true);
    FreezeCensus { frozen: model.backbone_param_count(), trainable: model.head_param_count() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub config: TrainConfig,
    /// Populated by the trainer; stripped before writing unless timings are
    /// requested, so that reports are byte-identical across reruns.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the combined words.
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(c.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random resized crop + horizontal flip, then normalization. Deterministic
/// given the rng.
fn augment_image<R: Rng>(
    img: &RgbImage,
    input_size: (usize, usize),
    aug: Augmentation,
    rng: &mut R,
) -> Array3<f32> {
    let arr = imgops::to_array(img);
    let (_, h, w) = arr.dim();
    let mut out = if aug.random_crop {
        let mut chosen = None;
        for _ in 0..10 {
            let area_frac = rng.gen_range(0.5..=1.0);
            let log_ratio = rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
            let ratio = log_ratio.exp();
            let target = area_frac * (h * w) as f64;
            let cw = (target * ratio).sqrt().round() as usize;
            let ch = (target / ratio).sqrt().round() as usize;
            if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
                let y0 = rng.gen_range(0..=(h - ch));
                let x0 = rng.gen_range(0..=(w - cw));
                chosen = Some(imgops::crop(&arr, y0, x0, ch, cw));
                break;
            }
        }
        let cropped = chosen.unwrap_or_else(|| {
            let side = h.min(w);
            imgops::center_crop(&arr, side, side)
        });
        imgops::resize_bilinear(&cropped, input_size.0, input_size.1)
    } else {
        let resized = imgops::resize_bilinear(&arr, input_size.0, input_size.1);
        resized
    };
    if aug.horizontal_flip && rng.gen_bool(0.5) {
        out = imgops::hflip(&out);
    }
    imgops::normalize(out)
}

fn stack_rows(rows: Vec<ndarray::Array1<f32>>) -> Array2<f32> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::<f32>::zeros((rows.len(), dim));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    out
}

fn accuracy_from_logits(logits: &Array2<f32>, labels: &[usize]) -> f64 {
    let correct = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| {
            let pred = if row[1] > row[0] { 1 } else { 0 };
            pred == label
        })
        .count();
    correct as f64 / labels.len() as f64
}

struct TrainerState {
    adam_head: Adam<f32>,
    adam_conv: Adam<f32>,
    best: Option<(f64, usize, Vec<Vec<f32>>)>,
}

fn snapshot_trainable(model: &mut Model<f32>, include_backbone: bool) -> Vec<Vec<f32>> {
    let mut out: Vec<Vec<f32>> = model.head_mut().param_slices_mut().iter().map(|s| s.to_vec()).collect();
    if include_backbone {
        model.visit_conv_params_mut(|_, w, b| {
            out.push(w.as_slice().expect("contiguous").to_vec());
            out.push(b.as_slice().expect("contiguous").to_vec());
        });
    }
    out
}

fn restore_trainable(model: &mut Model<f32>, snapshot: &[Vec<f32>], include_backbone: bool) {
    let mut slices = model.head_mut().param_slices_mut();
    let head_n = slices.len();
    for (dst, src) in slices.iter_mut().zip(snapshot) {
        dst.copy_from_slice(src);
    }
    drop(slices);
    if include_backbone {
        let mut i = head_n;
        model.visit_conv_params_mut(|_, w, b| {
            w.as_slice_mut().expect("contiguous").copy_from_slice(&snapshot[i]);
            b.as_slice_mut().expect("contiguous").copy_from_slice(&snapshot[i + 1]);
            i += 2;
        });
    }
}

/// Trains the classifier (and, when the backbone is not frozen, the whole
/// network) and leaves the model at its best-validation-epoch parameters.
/// Fully reproducible given the seed on a fixed platform.
pub fn train_head(
    model: &mut Model<f32>,
    train: &DatasetManifest,
    val: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    train.validate()?;
    val.validate()?;
    let start = std::time::Instant::now();
    let input_size = model.spec().input_size;
    let train_images = train.load_images()?;
    let val_images = val.load_images()?;
    let train_labels_all: Vec<usize> = train_images.iter().map(|(_, l)| l.index()).collect();
    let val_labels: Vec<usize> = val_images.iter().map(|(_, l)| l.index()).collect();

    if cfg.freeze_backbone {
        freeze_features(model);
    } else {
        model.set_frozen_backbone(false);
    }
    let frozen = model.frozen_backbone();

    // Validation inputs never see augmentation; with a frozen backbone their
    // features are computed exactly once.
    let val_arrays: Vec<Array3<f32>> =
        val_images.par_iter().map(|(img, _)| imgops::preprocess(img, input_size)).collect();
    let val_features: Option<Array2<f32>> = if frozen {
        let rows = val_arrays
            .par_iter()
            .map(|x| model.features(x).map(|f| model.flatten_features(&f)))
            .collect::<Result<Vec<_>>>()?;
        Some(stack_rows(rows))
    } else {
        None
    };

    // Without augmentation the training features are also fixed; cache them.
    let static_train_features: Option<Array2<f32>> = if frozen && !cfg.augmentation.active() {
        let rows = train_images
            .par_iter()
            .map(|(img, _)| {
                let x = imgops::preprocess(img, input_size);
                model.features(&x).map(|f| model.flatten_features(&f))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(stack_rows(rows))
    } else {
        None
    };

    let adam_cfg = AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() };
    let mut state = TrainerState {
        adam_head: Adam::new(adam_cfg.clone()),
        adam_conv: Adam::new(adam_cfg),
        best: None,
    };
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 0xD80F, 0));
    let mut report_epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_images.len()).collect();
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 0x5501, epoch as u64));
        // Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels_all[i]).collect();
            let (features, tapes): (Array2<f32>, Option<Vec<crate::zoo::BackboneTape<f32>>>) =
                if let Some(cached) = &static_train_features {
                    let rows: Vec<_> = chunk.iter().map(|&i| cached.row(i).to_owned()).collect();
                    (stack_rows(rows), None)
                } else {
                    let arrays: Vec<Array3<f32>> = chunk
                        .par_iter()
                        .map(|&i| {
                            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(
                                cfg.seed,
                                epoch as u64,
                                i as u64,
                            ));
                            if cfg.augmentation.active() {
                                augment_image(&train_images[i].0, input_size, cfg.augmentation, &mut rng)
                            } else {
                                imgops::preprocess(&train_images[i].0, input_size)
                            }
                        })
                        .collect();
                    if frozen {
                        let rows = arrays
                            .par_iter()
                            .map(|x| model.features(x).map(|f| model.flatten_features(&f)))
                            .collect::<Result<Vec<_>>>()?;
                        (stack_rows(rows), None)
                    } else {
                        // Record tapes for the backbone backward pass,
                        // image by image to bound memory.
                        let mut rows = Vec::with_capacity(arrays.len());
                        let mut tapes = Vec::with_capacity(arrays.len());
                        for x in &arrays {
                            let (f, tape) = model.features_recorded(x)?;
                            rows.push(model.flatten_features(&f));
                            tapes.push(tape);
                        }
                        (stack_rows(rows), Some(tapes))
                    }
                };

            let (logits, head_tape) = model.head().forward_train(&features, &mut dropout_rng)?;
            let (loss, glogits) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Train(format!("non-finite loss at epoch {epoch}")));
            }
            let (head_grads, gx) =
                model.head().backward_train(&head_tape, &glogits, !frozen);

            // Backbone gradients, accumulated sequentially for determinism.
            let mut conv_grads: Vec<Option<(ndarray::Array4<f32>, ndarray::Array1<f32>)>> =
                Vec::new();
            if let (Some(tapes), Some(gx)) = (&tapes, &gx) {
                let feat_dim = model.spec().feature_dim;
                for (i, tape) in tapes.iter().enumerate() {
                    let grow = gx.row(i).to_owned();
                    let gfeat = grow
                        .into_shape_with_order(tape_feature_dim(model, feat_dim))
                        .expect("feature reshape");
                    let grads = model.backbone_backward(tape, gfeat)?;
                    if conv_grads.is_empty() {
                        conv_grads = grads.per_stage;
                    } else {
                        for (acc, new) in conv_grads.iter_mut().zip(grads.per_stage) {
                            if let (Some((aw, ab)), Some((nw, nb))) = (acc.as_mut(), new) {
                                *aw += &nw;
                                *ab += &nb;
                            }
                        }
                    }
                }
            }

            {
                let grad_slices: Vec<&[f32]> = head_grads.iter().map(|g| g.as_slice()).collect();
                let mut head_params = model.head_mut().param_slices_mut();
                state.adam_head.step(&mut head_params, &grad_slices);
            }
            if !conv_grads.is_empty() {
                let mut conv_grad_buffers: Vec<Vec<f32>> = Vec::new();
                for entry in conv_grads.iter().flatten() {
                    let (gw, gb) = entry;
                    conv_grad_buffers.push(gw.as_slice().expect("contiguous").to_vec());
                    conv_grad_buffers.push(gb.as_slice().expect("contiguous").to_vec());
                }
                let grad_slices: Vec<&[f32]> =
                    conv_grad_buffers.iter().map(|g| g.as_slice()).collect();
                let mut conv_params = model.conv_param_slices_mut();
                state.adam_conv.step(&mut conv_params, &grad_slices);
            }

            loss_sum += loss as f64 * labels.len() as f64;
            seen += labels.len();
        }

        let val_accuracy = match (&val_features, frozen) {
            (Some(vf), true) => {
                let logits = model.head().forward_eval_batch(vf)?;
                accuracy_from_logits(&logits, &val_labels)
            }
            _ => {
                let preds: Result<Vec<usize>> = val_arrays
                    .par_iter()
                    .map(|x| {
                        model.logits(x).map(|l| if l[1] > l[0] { 1usize } else { 0usize })
                    })
                    .collect();
                let preds = preds?;
                preds.iter().zip(&val_labels).filter(|(p, l)| p == l).count() as f64
                    / val_labels.len() as f64
            }
        };

        let train_loss = loss_sum / seen as f64;
        report_epochs.push(EpochStats { epoch, train_loss, val_accuracy });
        // Earliest epoch wins ties.
        let improved = state.best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc);
        if improved {
            state.best = Some((val_accuracy, epoch, snapshot_trainable(model, !frozen)));
        }
    }

    let (best_val_accuracy, best_epoch, snapshot) = state.best.expect("at least one epoch");
    restore_trainable(model, &snapshot, !frozen);

    Ok(TrainReport {
        model: model.spec().name.to_string(),
        epochs: report_epochs,
        best_epoch,
        best_val_accuracy,
        config: cfg.clone(),
        wall_seconds: Some(start.elapsed().as_secs_f64()),
    })
}

fn tape_feature_dim(model: &Model<f32>, feature_dim: usize) -> (usize, usize, usize) {
    // Final feature shape: infer (C, H, W) by a dry pass over stage dims.
    let mut dim = (3usize, model.spec().input_size.0, model.spec().input_size.1);
    for stage in model.stages() {
        dim = match stage {
            crate::zoo::Stage::Conv { layer, .. } => layer.out_dims(dim).expect("validated"),
            crate::zoo::Stage::Pool(p) => p.out_dims(dim).expect("validated"),
        };
    }
    debug_assert_eq!(dim.0 * dim.1 * dim.2, feature_dim);
    dim
}

/// Fraction of correct argmax predictions; deterministic, no augmentation,
/// dropout disabled.
pub fn evaluate(model: &Model<f32>, data: &DatasetManifest) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation manifest is empty".into()));
    }
    let images = data.load_images()?;
    let input_size = model.spec().input_size;
    let correct: Result<Vec<bool>> = images
        .par_iter()
        .map(|(img, label)| {
            let x = imgops::preprocess(img, input_size);
            let logits = model.logits(&x)?;
            let pred = if logits[1] > logits[0] { 1 } else { 0 };
            Ok(pred == label.index())
        })
        .collect();
    let correct = correct?;
    Ok(correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64)
}

/// Runs `steps` Adam updates of the head on one fixed feature batch and
/// returns the loss after each step (learning-signal smoke checks).
pub fn head_steps_on_batch(
    model: &mut Model<f32>,
    features: &Array2<f32>,
    labels: &[usize],
    learning_rate: f64,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(AdamConfig { learning_rate, ..Default::default() });
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, 0xD80F, 0));
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (logits, tape) = model.head().forward_train(features, &mut rng)?;
        let (loss, glogits) = softmax_cross_entropy(&logits, labels);
        let (grads, _) = model.head().backward_train(&tape, &glogits, false);
        let mut params = model.head_mut().param_slices_mut();
        let grad_slices: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
        adam.step(&mut params, &grad_slices);
        losses.push(loss as f64);
    }
    Ok(losses)
}

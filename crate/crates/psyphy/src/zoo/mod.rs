//! Model zoo: AlexNet, VGG11/13/16 and the feature-excitation variant of
//! AlexNet, built on the in-crate layer kernels with named access to every
//! convolutional layer for attribution hooks.

pub mod checkpoint;
pub mod fe;

pub use checkpoint::{CheckpointManifest, Provenance};
pub use fe::FeatureExcitationHead;

use crate::error::{Error, Result};
use crate::nn::{init, Conv2d, Element, Linear, MaxPool2d};
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Default gate compression for the feature-excitation head (4:1).
pub const DEFAULT_FE_REDUCTION: usize = 4;
const STANDARD_HIDDEN: usize = 4096;
const DROPOUT_P: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    Alexnet,
    Vgg11,
    Vgg13,
    Vgg16,
    FeAlexnet,
}

impl ArchName {
    pub const ALL: [ArchName; 5] =
        [ArchName::Alexnet, ArchName::Vgg11, ArchName::Vgg13, ArchName::Vgg16, ArchName::FeAlexnet];

    pub fn is_alexnet_family(self) -> bool {
        matches!(self, ArchName::Alexnet | ArchName::FeAlexnet)
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArchName::Alexnet => "alexnet",
            ArchName::Vgg11 => "vgg11",
            ArchName::Vgg13 => "vgg13",
            ArchName::Vgg16 => "vgg16",
            ArchName::FeAlexnet => "fe_alexnet",
        };
        f.write_str(s)
    }
}

impl FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alexnet" => Ok(ArchName::Alexnet),
            "vgg11" => Ok(ArchName::Vgg11),
            "vgg13" => Ok(ArchName::Vgg13),
            "vgg16" => Ok(ArchName::Vgg16),
            "fe_alexnet" | "fe-alexnet" => Ok(ArchName::FeAlexnet),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }
}

/// Architecture description: which network, at what input size, with how many
/// output classes. `feature_dim` is always the flattened length of the final
/// convolutional output and is derived, never guessed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: ArchName,
    /// `(height, width)`; inputs are 3-channel RGB.
    pub input_size: (usize, usize),
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl ModelSpec {
    pub fn new(name: ArchName, input_size: (usize, usize), num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Validation(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let feature_dim = feature_dim_for(name, input_size)?;
        Ok(Self { name, input_size, num_classes, feature_dim })
    }

    /// 224x224 RGB, 2 classes.
    pub fn default_for(name: ArchName) -> Result<Self> {
        Self::new(name, (224, 224), 2)
    }
}

enum PlanItem {
    Conv { name: String, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    Pool { kernel: usize, stride: usize },
}

fn alexnet_plan() -> Vec<PlanItem> {
    let conv = |name: &str, in_ch, out_ch, kernel, stride, padding| PlanItem::Conv {
        name: name.to_string(),
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
    };
    vec![
        conv("conv1", 3, 64, 11, 4, 2),
        PlanItem::Pool { kernel: 3, stride: 2 },
        conv("conv2", 64, 192, 5, 1, 2),
        PlanItem::Pool { kernel: 3, stride: 2 },
        conv("conv3", 192, 384, 3, 1, 1),
        conv("conv4", 384, 256, 3, 1, 1),
        conv("conv5", 256, 256, 3, 1, 1),
        PlanItem::Pool { kernel: 3, stride: 2 },
    ]
}

fn vgg_plan(channels: &[Option<usize>]) -> Vec<PlanItem> {
    let mut items = Vec::new();
    let mut in_ch = 3;
    let mut block = 1;
    let mut conv_in_block = 0;
    for &c in channels {
        match c {
            Some(out_ch) => {
                conv_in_block += 1;
                items.push(PlanItem::Conv {
                    name: format!("block{block}.conv{conv_in_block}"),
                    in_ch,
                    out_ch,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                });
                in_ch = out_ch;
            }
            None => {
                items.push(PlanItem::Pool { kernel: 2, stride: 2 });
                block += 1;
                conv_in_block = 0;
            }
        }
    }
    items
}

fn architecture_plan(name: ArchName) -> Vec<PlanItem> {
    const M: Option<usize> = None;
    let c = Some;
    match name {
        ArchName::Alexnet | ArchName::FeAlexnet => alexnet_plan(),
        ArchName::Vgg11 => vgg_plan(&[
            c(64), M, c(128), M, c(256), c(256), M, c(512), c(512), M, c(512), c(512), M,
        ]),
        ArchName::Vgg13 => vgg_plan(&[
            c(64), c(64), M, c(128), c(128), M, c(256), c(256), M, c(512), c(512), M,
            c(512), c(512), M,
        ]),
        ArchName::Vgg16 => vgg_plan(&[
            c(64), c(64), M, c(128), c(128), M, c(256), c(256), c(256), M,
            c(512), c(512), c(512), M, c(512), c(512), c(512), M,
        ]),
    }
}

fn feature_dim_for(name: ArchName, input_size: (usize, usize)) -> Result<usize> {
    let mut dim = (3usize, input_size.0, input_size.1);
    for item in architecture_plan(name) {
        dim = match item {
            PlanItem::Conv { in_ch, out_ch, kernel, stride, padding, .. } => {
                let conv = Conv2d::<f32>::new(
                    ndarray::Array4::zeros((out_ch, in_ch, kernel, kernel)),
                    Array1::zeros(out_ch),
                    stride,
                    padding,
                );
                conv.out_dims(dim)?
            }
            PlanItem::Pool { kernel, stride } => MaxPool2d::new(kernel, stride).out_dims(dim)?,
        };
    }
    Ok(dim.0 * dim.1 * dim.2)
}

/// One backbone stage: a convolution (always followed by ReLU) or max pooling.
pub enum Stage<F: Element> {
    Conv { name: String, layer: Conv2d<F> },
    Pool(MaxPool2d),
}

impl<F: Element> Stage<F> {
    fn out_dims(&self, in_dim: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match self {
            Stage::Conv { layer, .. } => layer.out_dims(in_dim),
            Stage::Pool(p) => p.out_dims(in_dim),
        }
    }
}

/// Classifier heads.
pub enum Head<F: Element> {
    /// Dropout -> FC -> ReLU -> Dropout -> FC -> ReLU -> FC.
    Standard(StandardHead<F>),
    /// Excitation gate -> FC.
    Fe(FeatureExcitationHead<F>),
}

pub struct StandardHead<F: Element> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub fc3: Linear<F>,
    pub dropout: f64,
}

impl<F: Element> StandardHead<F> {
    fn random<R: Rng>(rng: &mut R, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            fc1: Linear::new(
                init::kaiming_linear(rng, STANDARD_HIDDEN, feature_dim),
                Some(init::zeros_bias(STANDARD_HIDDEN)),
            ),
            fc2: Linear::new(
                init::kaiming_linear(rng, STANDARD_HIDDEN, STANDARD_HIDDEN),
                Some(init::zeros_bias(STANDARD_HIDDEN)),
            ),
            fc3: Linear::new(
                init::kaiming_linear(rng, num_classes, STANDARD_HIDDEN),
                Some(init::zeros_bias(num_classes)),
            ),
            dropout: DROPOUT_P,
        }
    }

    pub fn logits_vec(&self, x: &Array1<F>) -> Array1<F> {
        let mut h1 = self.fc1.forward_vec(x);
        crate::nn::relu_inplace(&mut h1);
        let mut h2 = self.fc2.forward_vec(&h1);
        crate::nn::relu_inplace(&mut h2);
        self.fc3.forward_vec(&h2)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count() + self.fc3.param_count()
    }

    fn input_grad_for_logit(&self, x: &Array1<F>, class: usize) -> Array1<F> {
        let a1 = self.fc1.forward_vec(x);
        let mut r1 = a1.clone();
        crate::nn::relu_inplace(&mut r1);
        let a2 = self.fc2.forward_vec(&r1);
        let g2 = self.fc3.weight.row(class).to_owned();
        let ga2 = &g2 * &a2.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
        let mut g1 = Array1::zeros(self.fc2.in_features());
        ndarray::linalg::general_mat_vec_mul(F::one(), &self.fc2.weight.t(), &ga2, F::zero(), &mut g1);
        let ga1 = &g1 * &a1.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
        let mut gx = Array1::zeros(self.fc1.in_features());
        ndarray::linalg::general_mat_vec_mul(F::one(), &self.fc1.weight.t(), &ga1, F::zero(), &mut gx);
        gx
    }
}

/// Intermediate state for one training batch through a head.
pub enum HeadTape<F: Element> {
    Standard {
        x_dropped: ndarray::Array2<F>,
        mask1: ndarray::Array2<F>,
        r1: ndarray::Array2<F>,
        mask2: ndarray::Array2<F>,
        r1_dropped: ndarray::Array2<F>,
        r2: ndarray::Array2<F>,
    },
    Fe {
        tape: fe::FeGateTape<F>,
        gated: ndarray::Array2<F>,
    },
}

fn dropout_mask<F: Element, R: Rng>(rng: &mut R, rows: usize, cols: usize, p: f64) -> ndarray::Array2<F> {
    let scale = crate::nn::cast::<F>(1.0 / (1.0 - p));
    ndarray::Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < p {
            F::zero()
        } else {
            scale
        }
    })
}

fn relu_mask<F: Element>(a: &ndarray::Array2<F>) -> ndarray::Array2<F> {
    a.mapv(|v| if v > F::zero() { F::one() } else { F::zero() })
}

impl<F: Element> StandardHead<F> {
    /// Batch forward in training mode (inverted dropout before fc1 and fc2).
    pub fn forward_train<R: Rng>(
        &self,
        x: &ndarray::Array2<F>,
        rng: &mut R,
    ) -> (ndarray::Array2<F>, HeadTape<F>) {
        let n = x.nrows();
        let mask1 = dropout_mask(rng, n, self.fc1.in_features(), self.dropout);
        let x_dropped = x * &mask1;
        let mut r1 = self.fc1.forward_batch(&x_dropped);
        crate::nn::relu_inplace(&mut r1);
        let mask2 = dropout_mask(rng, n, self.fc2.in_features(), self.dropout);
        let r1_dropped = &r1 * &mask2;
        let mut r2 = self.fc2.forward_batch(&r1_dropped);
        crate::nn::relu_inplace(&mut r2);
        let logits = self.fc3.forward_batch(&r2);
        (logits, HeadTape::Standard { x_dropped, mask1, r1, mask2, r1_dropped, r2 })
    }

    pub fn forward_eval_batch(&self, x: &ndarray::Array2<F>) -> ndarray::Array2<F> {
        let mut r1 = self.fc1.forward_batch(x);
        crate::nn::relu_inplace(&mut r1);
        let mut r2 = self.fc2.forward_batch(&r1);
        crate::nn::relu_inplace(&mut r2);
        self.fc3.forward_batch(&r2)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.fc1.weight.as_slice_mut().expect("contiguous"),
            self.fc1.bias.as_mut().expect("bias").as_slice_mut().expect("contiguous"),
            self.fc2.weight.as_slice_mut().expect("contiguous"),
            self.fc2.bias.as_mut().expect("bias").as_slice_mut().expect("contiguous"),
            self.fc3.weight.as_slice_mut().expect("contiguous"),
            self.fc3.bias.as_mut().expect("bias").as_slice_mut().expect("contiguous"),
        ]
    }
}

impl<F: Element> Head<F> {
    pub fn logits_vec(&self, x: &Array1<F>) -> Result<Array1<F>> {
        match self {
            Head::Standard(h) => Ok(h.logits_vec(x)),
            Head::Fe(h) => h.logits_vec(x),
        }
    }

    /// Batch forward in training mode; dropout is drawn from `rng` for the
    /// standard head and absent by design in the excitation head.
    pub fn forward_train<R: Rng>(
        &self,
        x: &ndarray::Array2<F>,
        rng: &mut R,
    ) -> Result<(ndarray::Array2<F>, HeadTape<F>)> {
        match self {
            Head::Standard(h) => Ok(h.forward_train(x, rng)),
            Head::Fe(h) => {
                let (logits, tape, gated) = h.forward_batch(x)?;
                Ok((logits, HeadTape::Fe { tape, gated }))
            }
        }
    }

    pub fn forward_eval_batch(&self, x: &ndarray::Array2<F>) -> Result<ndarray::Array2<F>> {
        match self {
            Head::Standard(h) => Ok(h.forward_eval_batch(x)),
            Head::Fe(h) => {
                let (gated, _) = h.gate_forward(x)?;
                Ok(h.output.forward_batch(&gated))
            }
        }
    }

    /// Backward through the head. Gradient buffers are returned flattened, in
    /// the same order as [`Head::param_slices_mut`]; the input gradient is
    /// produced only on request.
    pub fn backward_train(
        &self,
        tape: &HeadTape<F>,
        gout: &ndarray::Array2<F>,
        need_input_grad: bool,
    ) -> (Vec<Vec<F>>, Option<ndarray::Array2<F>>) {
        match (self, tape) {
            (Head::Standard(h), HeadTape::Standard { x_dropped, mask1, r1, mask2, r1_dropped, r2 }) => {
                let (gw3, gb3) = h.fc3.backward_weights_batch(r2, gout);
                let gr2 = h.fc3.backward_data_batch(gout);
                let ga2 = &gr2 * &relu_mask(r2);
                let (gw2, gb2) = h.fc2.backward_weights_batch(r1_dropped, &ga2);
                let gr1 = &h.fc2.backward_data_batch(&ga2) * mask2;
                let ga1 = &gr1 * &relu_mask(r1);
                let (gw1, gb1) = h.fc1.backward_weights_batch(x_dropped, &ga1);
                let gx = if need_input_grad {
                    Some(&h.fc1.backward_data_batch(&ga1) * mask1)
                } else {
                    None
                };
                let grads = vec![
                    gw1.into_raw_vec_and_offset().0,
                    gb1.expect("bias").to_vec(),
                    gw2.into_raw_vec_and_offset().0,
                    gb2.expect("bias").to_vec(),
                    gw3.into_raw_vec_and_offset().0,
                    gb3.expect("bias").to_vec(),
                ];
                (grads, gx)
            }
            (Head::Fe(h), HeadTape::Fe { tape, gated }) => {
                let (gw_out, gb_out) = h.output.backward_weights_batch(gated, gout);
                let g_gated = h.output.backward_data_batch(gout);
                let gate_grads = h.gate_backward(tape, &g_gated);
                let grads = vec![
                    gate_grads.reduce_weight.into_raw_vec_and_offset().0,
                    gate_grads.expand_weight.into_raw_vec_and_offset().0,
                    gw_out.into_raw_vec_and_offset().0,
                    gb_out.expect("bias").to_vec(),
                ];
                let gx = need_input_grad.then_some(gate_grads.input);
                (grads, gx)
            }
            _ => unreachable!("tape kind always matches the head that produced it"),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        match self {
            Head::Standard(h) => h.param_slices_mut(),
            Head::Fe(h) => h.param_slices_mut().into_iter().map(|(_, s)| s).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Head::Standard(h) => h.param_count(),
            Head::Fe(h) => h.param_count(),
        }
    }

    pub fn input_grad_for_logit(&self, x: &Array1<F>, class: usize) -> Result<Array1<F>> {
        match self {
            Head::Standard(h) => Ok(h.input_grad_for_logit(x, class)),
            Head::Fe(h) => h.input_grad_for_logit(x, class),
        }
    }
}

/// Per-stage activations recorded during a forward pass, enough to run the
/// backward walk without recomputation.
pub struct BackboneTape<F: Element> {
    pub input: Array3<F>,
    records: Vec<StageRecord<F>>,
}

struct StageRecord<F: Element> {
    /// Stage output (post-ReLU for conv stages).
    out: Array3<F>,
    /// Argmax indices for pool stages.
    pool_idx: Option<Array3<u32>>,
}

/// Per-stage convolution parameter gradients from a full backward pass.
pub struct BackboneGrads<F: Element> {
    /// Aligned with the model's stage list; `None` for pool stages.
    pub per_stage: Vec<Option<(ndarray::Array4<F>, Array1<F>)>>,
}

/// A complete classifier: convolutional backbone plus head.
pub struct Model<F: Element = f32> {
    spec: ModelSpec,
    stages: Vec<Stage<F>>,
    head: Head<F>,
    frozen_backbone: bool,
}

/// How to initialize a model in [`build_model`].
pub enum Init<'a> {
    Random { seed: u64 },
    FromCheckpoint(&'a std::path::Path),
}

/// Build one of the zoo architectures (production precision).
pub fn build_model(spec: &ModelSpec, init: Init<'_>) -> Result<Model<f32>> {
    match init {
        Init::Random { seed } => Model::new_random(spec.clone(), seed),
        Init::FromCheckpoint(path) => {
            let (model, _) = Model::load_checkpoint(path)?;
            if model.spec() != spec {
                return Err(Error::Checkpoint(format!(
                    "checkpoint spec {:?} does not match requested spec {:?}",
                    model.spec(),
                    spec
                )));
            }
            Ok(model)
        }
    }
}

/// Replace an AlexNet-family backbone's classifier with a feature-excitation
/// head, sharing (copying) the donor's convolutional weights.
pub fn assemble_fe_alexnet<F: Element>(
    donor: &Model<F>,
    head: FeatureExcitationHead<F>,
) -> Result<Model<F>> {
    if !donor.spec.name.is_alexnet_family() {
        return Err(Error::Validation(format!(
            "feature-excitation assembly requires an AlexNet-family donor, got {}",
            donor.spec.name
        )));
    }
    if head.feature_dim() != donor.spec.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "head feature_dim {} != backbone flattened output {}",
            head.feature_dim(),
            donor.spec.feature_dim
        )));
    }
    if head.num_classes() != donor.spec.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "head classes {} != spec classes {}",
            head.num_classes(),
            donor.spec.num_classes
        )));
    }
    let spec = ModelSpec { name: ArchName::FeAlexnet, ..donor.spec.clone() };
    let stages = donor
        .stages
        .iter()
        .map(|s| match s {
            Stage::Conv { name, layer } => Stage::Conv { name: name.clone(), layer: layer.clone() },
            Stage::Pool(p) => Stage::Pool(*p),
        })
        .collect();
    Ok(Model { spec, stages, head: Head::Fe(head), frozen_backbone: false })
}

impl<F: Element> Model<F> {
    /// Fresh model with He-normal weights drawn from a seeded generator.
    pub fn new_random(spec: ModelSpec, seed: u64) -> Result<Self> {
        let expect = feature_dim_for(spec.name, spec.input_size)?;
        if expect != spec.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "spec feature_dim {} but architecture yields {expect}",
                spec.feature_dim
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        for item in architecture_plan(spec.name) {
            match item {
                PlanItem::Conv { name, in_ch, out_ch, kernel, stride, padding } => {
                    let weight = init::kaiming_conv(&mut rng, out_ch, in_ch, kernel, kernel);
                    let bias = init::zeros_bias(out_ch);
                    stages.push(Stage::Conv { name, layer: Conv2d::new(weight, bias, stride, padding) });
                }
                PlanItem::Pool { kernel, stride } => {
                    stages.push(Stage::Pool(MaxPool2d::new(kernel, stride)));
                }
            }
        }
        let head = match spec.name {
            ArchName::FeAlexnet => Head::Fe(FeatureExcitationHead::random(
                &mut rng,
                spec.feature_dim,
                spec.num_classes,
                DEFAULT_FE_REDUCTION,
            )?),
            _ => Head::Standard(StandardHead::random(&mut rng, spec.feature_dim, spec.num_classes)),
        };
        Ok(Self { spec, stages, head, frozen_backbone: false })
    }

    /// Assemble a model from explicit stages and head. The stage list defines
    /// the computation; `name` is only recorded in manifests. Used for toy
    /// networks in tests and tools.
    pub fn from_parts(
        name: ArchName,
        input_size: (usize, usize),
        num_classes: usize,
        stages: Vec<Stage<F>>,
        head: Head<F>,
    ) -> Result<Self> {
        let mut dim = (3usize, input_size.0, input_size.1);
        if let Some(Stage::Conv { layer, .. }) = stages.first() {
            dim.0 = layer.in_channels();
        }
        let input_dim = dim;
        for stage in &stages {
            dim = stage.out_dims(dim)?;
        }
        let feature_dim = dim.0 * dim.1 * dim.2;
        let _ = input_dim;
        let spec = ModelSpec { name, input_size, num_classes, feature_dim };
        Ok(Self { spec, stages, head, frozen_backbone: false })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn head(&self) -> &Head<F> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head<F> {
        &mut self.head
    }

    pub fn stages(&self) -> &[Stage<F>] {
        &self.stages
    }

    pub fn frozen_backbone(&self) -> bool {
        self.frozen_backbone
    }

    pub fn set_frozen_backbone(&mut self, frozen: bool) {
        self.frozen_backbone = frozen;
    }

    /// Names of layers eligible for attribution (every convolution).
    pub fn layer_names(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv { name, .. } => Some(name.as_str()),
                Stage::Pool(_) => None,
            })
            .collect()
    }

    /// The deepest convolutional layer; the default attribution target.
    pub fn last_conv_layer(&self) -> &str {
        self.layer_names().last().copied().expect("at least one conv layer")
    }

    pub fn backbone_param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Conv { layer, .. } => layer.weight.len() + layer.bias.len(),
                Stage::Pool(_) => 0,
            })
            .sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.param_count()
    }

    fn check_input(&self, x: &Array3<F>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != 3 || (h, w) != self.spec.input_size {
            return Err(Error::ShapeMismatch(format!(
                "expected input 3x{}x{}, got {c}x{h}x{w}",
                self.spec.input_size.0, self.spec.input_size.1
            )));
        }
        Ok(())
    }

    /// Backbone forward without retention.
    pub fn features(&self, x: &Array3<F>) -> Result<Array3<F>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = match stage {
                Stage::Conv { layer, .. } => {
                    let mut out = layer.forward(&cur);
                    crate::nn::relu_inplace(&mut out);
                    out
                }
                Stage::Pool(p) => p.forward(&cur),
            };
        }
        Ok(cur)
    }

    /// Backbone forward retaining per-stage activations.
    pub fn features_recorded(&self, x: &Array3<F>) -> Result<(Array3<F>, BackboneTape<F>)> {
        self.check_input(x)?;
        let mut records = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for stage in &self.stages {
            match stage {
                Stage::Conv { layer, .. } => {
                    let mut out = layer.forward(&cur);
                    crate::nn::relu_inplace(&mut out);
                    records.push(StageRecord { out: out.clone(), pool_idx: None });
                    cur = out;
                }
                Stage::Pool(p) => {
                    let (out, idx) = p.forward_indexed(&cur);
                    records.push(StageRecord { out: out.clone(), pool_idx: Some(idx) });
                    cur = out;
                }
            }
        }
        Ok((cur, BackboneTape { input: x.clone(), records }))
    }

    /// Post-ReLU activation stack for every named convolutional layer.
    pub fn feature_maps(&self, x: &Array3<F>) -> Result<Vec<(String, Array3<F>)>> {
        let (_, tape) = self.features_recorded(x)?;
        Ok(self
            .stages
            .iter()
            .zip(tape.records)
            .filter_map(|(stage, rec)| match stage {
                Stage::Conv { name, .. } => Some((name.clone(), rec.out)),
                Stage::Pool(_) => None,
            })
            .collect())
    }

    pub fn flatten_features(&self, feats: &Array3<F>) -> Array1<F> {
        feats
            .to_owned()
            .into_shape_with_order(feats.len())
            .expect("contiguous features")
    }

    /// Full forward to logits, evaluation mode (dropout disabled).
    pub fn logits(&self, x: &Array3<F>) -> Result<Array1<F>> {
        let feats = self.features(x)?;
        self.head.logits_vec(&self.flatten_features(&feats))
    }

    /// Softmax class probabilities, evaluation mode.
    pub fn probabilities(&self, x: &Array3<F>) -> Result<Array1<F>> {
        let logits = self.logits(x)?;
        let row = logits.insert_axis(ndarray::Axis(0));
        Ok(crate::nn::softmax_rows(&row).remove_axis(ndarray::Axis(0)))
    }

    /// Activation and gradient of `logit[class]` with respect to the post-ReLU
    /// activation of the named convolutional layer. Model state is untouched.
    pub fn activation_and_grad(
        &self,
        x: &Array3<F>,
        layer: &str,
        class: usize,
    ) -> Result<(Array3<F>, Array3<F>)> {
        if class >= self.spec.num_classes {
            return Err(Error::Validation(format!(
                "class index {class} out of range (num_classes {})",
                self.spec.num_classes
            )));
        }
        if !self.layer_names().contains(&layer) {
            return Err(Error::UnknownLayer(layer.to_string()));
        }
        let (feats, tape) = self.features_recorded(x)?;
        let flat = self.flatten_features(&feats);
        let gflat = self.head.input_grad_for_logit(&flat, class)?;
        let gfeats = gflat.into_shape_with_order(feats.dim()).expect("flatten inverse");
        let (result, _) = self.backward_walk(&tape, gfeats, Some(layer), false)?;
        result.ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    /// Backward through the backbone. Walks from the last stage toward the
    /// input; if `stop_at` names a conv layer, returns `(activation, grad)` at
    /// that layer and stops. If `collect_weight_grads`, accumulates conv
    /// parameter gradients for the stages it traverses.
    fn backward_walk(
        &self,
        tape: &BackboneTape<F>,
        mut grad: Array3<F>,
        stop_at: Option<&str>,
        collect_weight_grads: bool,
    ) -> Result<(Option<(Array3<F>, Array3<F>)>, BackboneGrads<F>)> {
        let mut per_stage: Vec<Option<(ndarray::Array4<F>, Array1<F>)>> =
            (0..self.stages.len()).map(|_| None).collect();
        for i in (0..self.stages.len()).rev() {
            let input = if i == 0 { &tape.input } else { &tape.records[i - 1].out };
            match &self.stages[i] {
                Stage::Conv { name, layer } => {
                    let rec = &tape.records[i];
                    if stop_at == Some(name.as_str()) {
                        return Ok((Some((rec.out.clone(), grad)), BackboneGrads { per_stage }));
                    }
                    // ReLU backward, then conv backward.
                    let gz = &grad
                        * &rec.out.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
                    if collect_weight_grads {
                        per_stage[i] = Some(layer.backward_weights(input, &gz));
                    }
                    grad = layer.backward_data(&gz, input.dim());
                }
                Stage::Pool(p) => {
                    let rec = &tape.records[i];
                    grad = p.backward(&grad, rec.pool_idx.as_ref().expect("pool record"), input.dim());
                }
            }
        }
        Ok((None, BackboneGrads { per_stage }))
    }

    /// Full backward pass collecting conv parameter gradients, for training
    /// the backbone. Returns the gradients and the input-image gradient.
    pub fn backbone_backward(
        &self,
        tape: &BackboneTape<F>,
        grad_features: Array3<F>,
    ) -> Result<BackboneGrads<F>> {
        let (_, grads) = self.backward_walk(tape, grad_features, None, true)?;
        Ok(grads)
    }

    /// Apply accumulated conv gradients with an external updater. The closure
    /// receives `(stage_index, weight, bias, weight_grad, bias_grad)`.
    pub fn visit_conv_params_mut(
        &mut self,
        mut f: impl FnMut(usize, &mut ndarray::Array4<F>, &mut Array1<F>),
    ) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            if let Stage::Conv { layer, .. } = stage {
                f(i, &mut layer.weight, &mut layer.bias);
            }
        }
    }

    /// Flat mutable views of every conv weight and bias, in stage order
    /// (weight then bias per layer). Order matches the gradient order of
    /// [`Model::backbone_backward`].
    pub fn conv_param_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            if let Stage::Conv { layer, .. } = stage {
                let Conv2d { weight, bias, .. } = layer;
                out.push(weight.as_slice_mut().expect("contiguous"));
                out.push(bias.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    pub fn conv_weights(&self) -> Vec<(&str, &ndarray::Array4<F>, &Array1<F>)> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv { name, layer } => Some((name.as_str(), &layer.weight, &layer.bias)),
                Stage::Pool(_) => None,
            })
            .collect()
    }
}

/// Evaluate a model over an ordered morph continuum, returning one
/// `(level, p_positive)` pair per stimulus. Deterministic: dropout is never
/// active on this path, and the model is only read.
pub fn classify_continuum(
    model: &Model<f32>,
    continuum: &crate::stimuli::MorphContinuum,
) -> Result<Vec<(f64, f64)>> {
    use rayon::prelude::*;
    if continuum.is_empty() {
        return Err(Error::EmptyInput("continuum has no stimuli".into()));
    }
    let inputs: Vec<Array3<f32>> = continuum
        .images()
        .iter()
        .map(|img| crate::imgops::preprocess(img, model.spec().input_size))
        .collect();
    let probs: Result<Vec<f64>> = inputs
        .par_iter()
        .map(|x| model.probabilities(x).map(|p| p[1] as f64))
        .collect();
    let probs = probs?;
    Ok(continuum.levels().iter().copied().zip(probs).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alexnet_feature_dim_at_224_is_9216() {
        let spec = ModelSpec::new(ArchName::Alexnet, (224, 224), 2).unwrap();
        assert_eq!(spec.feature_dim, 9216);
        let fe = ModelSpec::new(ArchName::FeAlexnet, (224, 224), 2).unwrap();
        assert_eq!(fe.feature_dim, 9216);
    }

    #[test]
    fn vgg_feature_dims_at_224() {
        for name in [ArchName::Vgg11, ArchName::Vgg13, ArchName::Vgg16] {
            let spec = ModelSpec::new(name, (224, 224), 2).unwrap();
            assert_eq!(spec.feature_dim, 512 * 7 * 7, "{name}");
        }
    }

    #[test]
    fn rejects_single_class() {
        assert!(ModelSpec::new(ArchName::Alexnet, (224, 224), 1).is_err());
    }

    #[test]
    fn rejects_undersized_input() {
        assert!(ModelSpec::new(ArchName::Alexnet, (32, 32), 2).is_err());
    }

    #[test]
    fn vgg16_has_more_parameters_than_vgg11() {
        let spec11 = ModelSpec::new(ArchName::Vgg11, (64, 64), 2).unwrap();
        let spec16 = ModelSpec::new(ArchName::Vgg16, (64, 64), 2).unwrap();
        let m11 = Model::<f32>::new_random(spec11, 0).unwrap();
        let m16 = Model::<f32>::new_random(spec16, 0).unwrap();
        let p11 = m11.backbone_param_count() + m11.head_param_count();
        let p16 = m16.backbone_param_count() + m16.head_param_count();
        assert!(p16 > p11, "{p16} <= {p11}");
    }

    #[test]
    fn fe_head_parameter_count_formula() {
        let spec = ModelSpec::new(ArchName::FeAlexnet, (224, 224), 2).unwrap();
        let model = Model::<f32>::new_random(spec, 1).unwrap();
        let d = 9216usize;
        let hidden = d / 4;
        assert_eq!(model.head_param_count(), d * hidden + hidden * d + d * 2 + 2);
    }

    #[test]
    fn random_model_produces_normalized_probabilities() {
        let spec = ModelSpec::new(ArchName::Alexnet, (64, 64), 2).unwrap();
        let model = Model::<f32>::new_random(spec, 42).unwrap();
        let x = Array3::from_shape_fn((3, 64, 64), |(c, y, xx)| {
            ((c + y + xx) as f32 * 0.013).sin()
        });
        let p = model.probabilities(&x).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
        assert!((p.sum() - 1.0).abs() < 1e-5);
        // Deterministic evaluation.
        let p2 = model.probabilities(&x).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn alexnet_layer_names_and_structure() {
        let spec = ModelSpec::new(ArchName::Alexnet, (64, 64), 2).unwrap();
        let model = Model::<f32>::new_random(spec, 0).unwrap();
        assert_eq!(model.layer_names(), vec!["conv1", "conv2", "conv3", "conv4", "conv5"]);
        assert_eq!(model.last_conv_layer(), "conv5");
        // 5 convs + 3 pools.
        assert_eq!(model.stages().len(), 8);
    }

    #[test]
    fn vgg11_layer_names_follow_blocks() {
        let spec = ModelSpec::new(ArchName::Vgg11, (64, 64), 2).unwrap();
        let model = Model::<f32>::new_random(spec, 0).unwrap();
        let names = model.layer_names();
        assert_eq!(names.first(), Some(&"block1.conv1"));
        assert_eq!(names.last(), Some(&"block5.conv2"));
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn fe_assembly_shares_conv_weights() {
        let spec = ModelSpec::new(ArchName::Alexnet, (64, 64), 2).unwrap();
        let donor = Model::<f32>::new_random(spec.clone(), 9).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let head =
            FeatureExcitationHead::random(&mut rng, spec.feature_dim, 2, DEFAULT_FE_REDUCTION)
                .unwrap();
        let fe = assemble_fe_alexnet(&donor, head).unwrap();
        assert_eq!(fe.spec().name, ArchName::FeAlexnet);
        let x = Array3::from_shape_fn((3, 64, 64), |(c, y, xx)| ((c * 7 + y + xx) as f32).cos());
        let fd = donor.features(&x).unwrap();
        let ff = fe.features(&x).unwrap();
        assert_eq!(fd, ff, "shared feature extractor must match exactly");
    }

    #[test]
    fn fe_assembly_rejects_vgg_donor_and_bad_dims() {
        let spec = ModelSpec::new(ArchName::Vgg11, (64, 64), 2).unwrap();
        let donor = Model::<f32>::new_random(spec, 0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let head = FeatureExcitationHead::random(&mut rng, 2048, 2, 4).unwrap();
        assert!(assemble_fe_alexnet(&donor, head).is_err());

        let aspec = ModelSpec::new(ArchName::Alexnet, (64, 64), 2).unwrap();
        let adonor = Model::<f32>::new_random(aspec, 0).unwrap();
        let bad_head = FeatureExcitationHead::random(&mut rng, 512, 2, 4).unwrap();
        assert!(assemble_fe_alexnet(&adonor, bad_head).is_err());
    }

    #[test]
    fn unknown_architecture_is_reported() {
        let err = ArchName::from_str("resnet50").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}

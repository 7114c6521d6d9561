//! The point-cloud segmentation network: an optional 1×1 convolution stem,
//! a stack of bilateral convolutions on successively coarser lattices, the
//! concatenation of every BCL response, 1×1 convolution head and softmax.
//!
//! Architectures are written as dash-separated layer strings, for example
//! `C32-B64-B128-B256-B256-B256-C128-Cx`: `C<w>` is a 1×1 convolution with
//! `w` outputs, `B<w>` a bilateral convolution, and a trailing `Cx` takes the
//! class count. BCL `t` runs on the lattice scaled by `Λ0 / 2^t`. Every
//! parameterized layer except the last is followed by BatchNorm and ReLU.

use std::sync::Arc;

use rand::Rng;

use crate::bcl::{BclDescriptor, BclState, FilterBank};
use crate::data::{ChannelSelection, PointCloud};
use crate::error::{Error, Result};
use crate::lattice::{LatticeConfig, SparseLattice};
use crate::matrix::FeatureMatrix;

pub const BATCHNORM_EPSILON: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv1x1 {
        c_in: usize,
        c_out: usize,
    },
    Bcl {
        c_in: usize,
        c_out: usize,
        /// Position in the BCL stack (0 is the finest lattice).
        index: usize,
        scale: LatticeConfig,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// Channel-wise concatenation of the outputs of `sources` (layer
    /// indices).
    Concat {
        sources: Vec<usize>,
        width: usize,
    },
    Softmax,
}

impl Layer {
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            Layer::Conv1x1 { .. } | Layer::Bcl { .. } | Layer::BatchNorm { .. }
        )
    }
}

/// A parsed architecture with its lattice schedule and channel wiring.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    arch: String,
    lattice0: LatticeConfig,
    num_classes: usize,
    channels: ChannelSelection,
    normalize: bool,
    layers: Vec<Layer>,
    bcl_widths: Vec<usize>,
}

fn arch_error(position: usize, message: impl Into<String>) -> Error {
    Error::Arch {
        position,
        message: message.into(),
    }
}

/// Parses an architecture string against the input channel selection.
///
/// Token positions in errors are 1-based. Density normalization is on for
/// every BCL; see [`NetworkSpec::with_normalization`].
pub fn parse_arch(
    text: &str,
    lattice0: &LatticeConfig,
    num_classes: usize,
    channels: &ChannelSelection,
) -> Result<NetworkSpec> {
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    if channels.feature_width() == 0 {
        return Err(Error::Config("no input feature channels selected".into()));
    }
    if channels.lattice_width() != lattice0.dim() {
        return Err(Error::Config(format!(
            "{} lattice channels selected but the lattice scale has {} entries",
            channels.lattice_width(),
            lattice0.dim()
        )));
    }

    #[derive(PartialEq)]
    enum Kind {
        C,
        B,
    }
    let raw: Vec<&str> = text.trim().split('-').collect();
    let mut tokens = Vec::with_capacity(raw.len());
    for (i, tok) in raw.iter().enumerate() {
        let pos = i + 1;
        let last = i + 1 == raw.len();
        let (kind, width) = match tok.split_at_checked(1) {
            Some(("C", w)) => (Kind::C, w),
            Some(("B", w)) => (Kind::B, w),
            _ => return Err(arch_error(pos, format!("expected C<width> or B<width>, got '{tok}'"))),
        };
        let width = if width == "x" {
            if !(last && kind == Kind::C) {
                return Err(arch_error(pos, "'x' width is only allowed on the final C layer"));
            }
            num_classes
        } else {
            match width.parse::<usize>() {
                Ok(w) if w > 0 => w,
                _ => return Err(arch_error(pos, format!("bad width in '{tok}'"))),
            }
        };
        tokens.push((kind, width, pos));
    }

    // Grammar: C* B+ C+
    let first_b = tokens
        .iter()
        .position(|t| t.0 == Kind::B)
        .ok_or_else(|| arch_error(tokens.len(), "architecture needs at least one B layer"))?;
    let head_start = tokens[first_b..]
        .iter()
        .position(|t| t.0 == Kind::C)
        .map(|p| p + first_b)
        .ok_or_else(|| arch_error(tokens.len(), "architecture must end with a C layer"))?;
    if let Some(t) = tokens[head_start..].iter().find(|t| t.0 == Kind::B) {
        return Err(arch_error(t.2, "B layers must form one contiguous block"));
    }
    let final_width = tokens.last().unwrap().1;
    if final_width != num_classes {
        return Err(arch_error(
            tokens.len(),
            format!("final layer has {final_width} outputs but there are {num_classes} classes"),
        ));
    }

    let mut layers = Vec::new();
    let mut width = channels.feature_width();
    let push_block = |layers: &mut Vec<Layer>, layer: Layer, out: usize| {
        layers.push(layer);
        layers.push(Layer::BatchNorm { channels: out });
        layers.push(Layer::Relu);
    };
    for t in &tokens[..first_b] {
        push_block(&mut layers, Layer::Conv1x1 { c_in: width, c_out: t.1 }, t.1);
        width = t.1;
    }
    let mut sources = Vec::new();
    let mut bcl_widths = Vec::new();
    for (index, t) in tokens[first_b..head_start].iter().enumerate() {
        let scale = lattice0.divided_by(f64::powi(2.0, index as i32))?;
        push_block(
            &mut layers,
            Layer::Bcl {
                c_in: width,
                c_out: t.1,
                index,
                scale,
            },
            t.1,
        );
        sources.push(layers.len() - 1);
        bcl_widths.push(t.1);
        width = t.1;
    }
    let concat_width = bcl_widths.iter().sum();
    layers.push(Layer::Concat {
        sources,
        width: concat_width,
    });
    width = concat_width;
    let head = &tokens[head_start..];
    for (i, t) in head.iter().enumerate() {
        let conv = Layer::Conv1x1 { c_in: width, c_out: t.1 };
        if i + 1 == head.len() {
            layers.push(conv);
        } else {
            push_block(&mut layers, conv, t.1);
        }
        width = t.1;
    }
    layers.push(Layer::Softmax);

    Ok(NetworkSpec {
        arch: text.trim().to_string(),
        lattice0: lattice0.clone(),
        num_classes,
        channels: channels.clone(),
        normalize: true,
        layers,
        bcl_widths,
    })
}

impl NetworkSpec {
    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn lattice0(&self) -> &LatticeConfig {
        &self.lattice0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> &ChannelSelection {
        &self.channels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of BCLs `T`.
    pub fn bcl_count(&self) -> usize {
        self.bcl_widths.len()
    }

    pub fn bcl_widths(&self) -> &[usize] {
        &self.bcl_widths
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    /// Turns density normalization on or off for every BCL.
    pub fn with_normalization(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    /// Lattice scales of the BCL stack, finest first.
    pub fn lattice_schedule(&self) -> Vec<&LatticeConfig> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Bcl { scale, .. } => Some(scale),
                _ => None,
            })
            .collect()
    }

    /// Builds the lattice and normalization state of every BCL for one
    /// point set.
    pub fn build_lattices(&self, lattice_features: &FeatureMatrix) -> Result<Vec<Arc<BclDescriptor>>> {
        self.lattice_schedule()
            .into_iter()
            .map(|scale| {
                let lattice = SparseLattice::build(lattice_features, scale)?;
                Ok(Arc::new(BclDescriptor::new(Arc::new(lattice), None, self.normalize)?))
            })
            .collect()
    }
}

/// Trainable tensors and running statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Conv {
        /// `c_in × c_out`, row-major.
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Bcl(FilterBank),
    BatchNorm {
        gain: Vec<f64>,
        shift: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
}

/// Parameters of a whole network, one entry per layer of its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    layers: Vec<LayerParams>,
}

impl Parameters {
    /// Uniform zero-mean weights with variance `2 / fan_in`, zero biases,
    /// unit BatchNorm gain. Values are rounded to `f32`.
    pub fn init(spec: &NetworkSpec, rng: &mut impl Rng) -> Self {
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let a = (6.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        };
        let taps = |d: usize| (1usize << (d + 1)) - 1;
        let layers = spec
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv1x1 { c_in, c_out } => LayerParams::Conv {
                    weight: uniform(c_in * c_out, *c_in),
                    bias: vec![0.0; *c_out],
                },
                Layer::Bcl { c_in, c_out, scale, .. } => {
                    let k = taps(scale.dim());
                    LayerParams::Bcl(
                        FilterBank::from_parts(k, *c_in, *c_out, uniform(k * c_in * c_out, k * c_in), vec![0.0; *c_out])
                            .expect("shapes computed from spec"),
                    )
                }
                Layer::BatchNorm { channels } => LayerParams::BatchNorm {
                    gain: vec![1.0; *channels],
                    shift: vec![0.0; *channels],
                    running_mean: vec![0.0; *channels],
                    running_var: vec![1.0; *channels],
                },
                _ => LayerParams::None,
            })
            .collect();
        let mut params = Self { layers };
        params.round_to_f32();
        params
    }

    /// Parameters with the shapes `spec` implies and every value zero.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self::init(spec, &mut NoRng).zeros_like()
    }

    /// Rounds every tensor to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Same shapes as `self`, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub(crate) fn from_layers(layers: Vec<LayerParams>) -> Self {
        Self { layers }
    }

    /// Learnable tensors in a fixed order (per layer: weights then bias,
    /// or gain then shift).
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => out.extend([weight.as_slice(), bias.as_slice()]),
                LayerParams::Bcl(f) => out.extend([f.weights(), f.bias()]),
                LayerParams::BatchNorm { gain, shift, .. } => out.extend([gain.as_slice(), shift.as_slice()]),
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => out.extend([weight, bias]),
                LayerParams::Bcl(f) => {
                    let (w, b) = f.weights_and_bias_mut();
                    out.extend([w, b]);
                }
                LayerParams::BatchNorm { gain, shift, .. } => out.extend([gain, shift]),
            }
        }
        out
    }

    /// Every tensor, trainable or not, in serialization order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => out.extend([weight.as_slice(), bias.as_slice()]),
                LayerParams::Bcl(f) => out.extend([f.weights(), f.bias()]),
                LayerParams::BatchNorm {
                    gain,
                    shift,
                    running_mean,
                    running_var,
                } => out.extend([
                    gain.as_slice(),
                    shift.as_slice(),
                    running_mean.as_slice(),
                    running_var.as_slice(),
                ]),
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => out.extend([weight, bias]),
                LayerParams::Bcl(f) => {
                    let (w, b) = f.weights_and_bias_mut();
                    out.extend([w, b]);
                }
                LayerParams::BatchNorm {
                    gain,
                    shift,
                    running_mean,
                    running_var,
                } => out.extend([gain, shift, running_mean, running_var]),
            }
        }
        out
    }

    /// Checks every tensor against the shapes `spec` implies.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = Parameters::zeros(spec);
        if self.layers.len() != expected.layers.len() {
            return Err(Error::shape("parameter layer count differs from network spec"));
        }
        for (i, (a, b)) in self.layers.iter().zip(&expected.layers).enumerate() {
            let same = std::mem::discriminant(a) == std::mem::discriminant(b)
                && Parameters::from_layers(vec![a.clone()])
                    .tensors()
                    .iter()
                    .map(|t| t.len())
                    .eq(Parameters::from_layers(vec![b.clone()]).tensors().iter().map(|t| t.len()));
            if !same {
                return Err(Error::shape(format!("parameters of layer {i} do not match the spec")));
            }
        }
        if let Some(v) = self.layers.iter().find_map(|l| match l {
            LayerParams::BatchNorm { running_var, .. } => running_var.iter().find(|v| **v < 0.0),
            _ => None,
        }) {
            return Err(Error::InvalidInput(format!("negative running variance {v}")));
        }
        Ok(())
    }

    /// Folds the batch statistics recorded on a training tape into the
    /// running BatchNorm statistics.
    pub fn absorb_statistics(&mut self, tape: &Tape) {
        for (params, state) in self.layers.iter_mut().zip(&tape.states) {
            if let (
                LayerParams::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                },
                LayerState::BatchNorm { mean, var, .. },
            ) = (params, state)
            {
                for c in 0..mean.len() {
                    running_mean[c] = BATCHNORM_MOMENTUM * running_mean[c] + (1.0 - BATCHNORM_MOMENTUM) * mean[c];
                    running_var[c] = BATCHNORM_MOMENTUM * running_var[c] + (1.0 - BATCHNORM_MOMENTUM) * var[c];
                }
            }
        }
    }

    /// Adds `other` (same shapes) scaled by `factor`.
    pub fn add_scaled(&mut self, other: &Parameters, factor: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }
}

/// Deterministic zero source used only to derive shapes.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// BatchNorm uses batch statistics; activations are retained for
    /// backward.
    Training,
    /// BatchNorm uses running statistics; only what later layers need is
    /// kept.
    Inference,
}

/// Network input: per-point features and lattice features.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput {
    pub features: FeatureMatrix,
    pub lattice: FeatureMatrix,
}

impl NetworkInput {
    pub fn from_cloud(cloud: &PointCloud, channels: &ChannelSelection) -> Result<Self> {
        Ok(Self {
            features: cloud.select(&channels.features, channels.gravity_axis)?,
            lattice: cloud.select(&channels.lattice, channels.gravity_axis)?,
        })
    }
}

#[derive(Debug, Clone)]
enum LayerState {
    None,
    Bcl(BclState),
    BatchNorm {
        normalized: FeatureMatrix,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

/// Everything a forward pass retains: the per-BCL lattices, layer outputs
/// and layer-specific intermediates.
#[derive(Debug, Clone)]
pub struct Tape {
    mode: Mode,
    input: FeatureMatrix,
    lattices: Vec<Arc<BclDescriptor>>,
    outputs: Vec<Option<FeatureMatrix>>,
    states: Vec<LayerState>,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// BCL descriptors built for this input, finest lattice first.
    pub fn lattices(&self) -> &[Arc<BclDescriptor>] {
        &self.lattices
    }

    /// Pre-softmax class scores (training tapes only).
    pub fn logits(&self) -> Option<&FeatureMatrix> {
        let n = self.outputs.len();
        n.checked_sub(2).and_then(|i| self.outputs[i].as_ref())
    }
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Parameters,
    pub input: FeatureMatrix,
    pub logits: FeatureMatrix,
}

/// Runs the network on a cloud, extracting channels per the spec.
pub fn forward(
    spec: &NetworkSpec,
    params: &Parameters,
    cloud: &PointCloud,
    mode: Mode,
) -> Result<(FeatureMatrix, Tape)> {
    let input = NetworkInput::from_cloud(cloud, &spec.channels)?;
    forward_input(spec, params, &input, mode)
}

pub fn forward_input(
    spec: &NetworkSpec,
    params: &Parameters,
    input: &NetworkInput,
    mode: Mode,
) -> Result<(FeatureMatrix, Tape)> {
    if input.lattice.cols() != spec.lattice0.dim() {
        return Err(Error::Config(format!(
            "input has {} lattice channels, network expects {}",
            input.lattice.cols(),
            spec.lattice0.dim()
        )));
    }
    input.lattice.check_rows(input.features.rows(), "lattice features")?;
    let lattices = spec.build_lattices(&input.lattice)?;
    forward_with_lattices(spec, params, &input.features, lattices, mode)
}

/// Forward pass reusing prebuilt BCL descriptors for the same point set.
pub fn forward_with_lattices(
    spec: &NetworkSpec,
    params: &Parameters,
    features: &FeatureMatrix,
    lattices: Vec<Arc<BclDescriptor>>,
    mode: Mode,
) -> Result<(FeatureMatrix, Tape)> {
    if features.cols() != spec.channels.feature_width() {
        return Err(Error::Config(format!(
            "input has {} feature channels, network expects {}",
            features.cols(),
            spec.channels.feature_width()
        )));
    }
    if params.layers.len() != spec.layers.len() {
        return Err(Error::shape("parameters do not belong to this network"));
    }
    if lattices.len() != spec.bcl_count() {
        return Err(Error::shape("wrong number of prebuilt lattices"));
    }
    if features.rows() == 0 {
        return Err(Error::EmptyInput("network input has no points".into()));
    }

    let training = mode == Mode::Training;
    // Inference keeps a layer output only while something still reads it.
    let mut last_use: Vec<usize> = (0..spec.layers.len()).map(|i| i + 1).collect();
    for (i, l) in spec.layers.iter().enumerate() {
        if let Layer::Concat { sources, .. } = l {
            for &s in sources {
                last_use[s] = last_use[s].max(i);
            }
        }
    }

    let mut outputs: Vec<Option<FeatureMatrix>> = vec![None; spec.layers.len()];
    let mut states = vec![LayerState::None; spec.layers.len()];
    for (i, layer) in spec.layers.iter().enumerate() {
        let x = if i == 0 {
            features
        } else {
            outputs[i - 1].as_ref().expect("previous output retained")
        };
        let (y, state) = match (layer, &params.layers[i]) {
            (Layer::Conv1x1 { .. }, LayerParams::Conv { weight, bias }) => {
                (conv1x1(x, weight, bias)?, LayerState::None)
            }
            (Layer::Bcl { index, .. }, LayerParams::Bcl(filter)) => {
                let (y, st) = lattices[*index].forward(x, filter)?;
                (y, if training { LayerState::Bcl(st) } else { LayerState::None })
            }
            (
                Layer::BatchNorm { .. },
                LayerParams::BatchNorm {
                    gain,
                    shift,
                    running_mean,
                    running_var,
                },
            ) => {
                if training {
                    batchnorm_train(x, gain, shift)
                } else {
                    (batchnorm_infer(x, gain, shift, running_mean, running_var), LayerState::None)
                }
            }
            (Layer::Relu, _) => {
                let mut y = x.clone();
                y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                (y, LayerState::None)
            }
            (Layer::Concat { sources, .. }, _) => {
                let parts: Vec<&FeatureMatrix> = sources
                    .iter()
                    .map(|&s| outputs[s].as_ref().expect("concat source retained"))
                    .collect();
                (FeatureMatrix::hstack(&parts)?, LayerState::None)
            }
            (Layer::Softmax, _) => (softmax(x), LayerState::None),
            _ => return Err(Error::shape(format!("parameters of layer {i} do not match its kind"))),
        };
        outputs[i] = Some(y);
        states[i] = state;
        if !training {
            for j in 0..i {
                if last_use[j] <= i {
                    outputs[j] = None;
                }
            }
        }
    }
    let probabilities = outputs.last().cloned().flatten().expect("softmax output");
    Ok((
        probabilities,
        Tape {
            mode,
            input: features.clone(),
            lattices: lattices.clone(),
            outputs,
            states,
        },
    ))
}

/// Parameter and input gradients for an upstream gradient on the output
/// probabilities.
pub fn backward(
    spec: &NetworkSpec,
    params: &Parameters,
    tape: &Tape,
    grad_probabilities: &FeatureMatrix,
) -> Result<Gradients> {
    if tape.mode != Mode::Training {
        return Err(Error::State("backward needs a training-mode tape".into()));
    }
    let n = tape.input.rows();
    grad_probabilities.check_rows(n, "probability gradient")?;
    if grad_probabilities.cols() != spec.num_classes {
        return Err(Error::shape("probability gradient has the wrong class count"));
    }
    let count = spec.layers.len();
    let mut grads: Vec<Option<FeatureMatrix>> = vec![None; count];
    grads[count - 1] = Some(grad_probabilities.clone());
    let mut param_grads = params.zeros_like();
    let mut input_grad = FeatureMatrix::zeros(n, tape.input.cols());
    let mut logits_grad = None;

    let accumulate = |slot: &mut Option<FeatureMatrix>, g: FeatureMatrix| match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    };

    for i in (0..count).rev() {
        let Some(g) = grads[i].take() else {
            continue;
        };
        let output = |j: usize| tape.outputs[j].as_ref().expect("training tape keeps outputs");
        let x = if i == 0 { &tape.input } else { output(i - 1) };
        let grad_x = match (&spec.layers[i], &params.layers[i], &mut param_grads.layers[i]) {
            (Layer::Softmax, _, _) => {
                let gx = softmax_backward(output(i), &g);
                logits_grad = Some(gx.clone());
                Some(gx)
            }
            (Layer::Conv1x1 { c_in, c_out }, LayerParams::Conv { weight, .. }, LayerParams::Conv { weight: gw, bias: gb }) => {
                for r in 0..n {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    for (ci, &xv) in xr.iter().enumerate() {
                        for (w, gv) in gw[ci * c_out..(ci + 1) * c_out].iter_mut().zip(gr) {
                            *w += xv * gv;
                        }
                    }
                    for (b, gv) in gb.iter_mut().zip(gr) {
                        *b += gv;
                    }
                }
                let mut gx = FeatureMatrix::zeros(n, *c_in);
                for r in 0..n {
                    let gr = g.row(r);
                    for (ci, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = weight[ci * c_out..(ci + 1) * c_out].iter().zip(gr).map(|(w, gv)| w * gv).sum();
                    }
                }
                Some(gx)
            }
            (Layer::Bcl { index, .. }, LayerParams::Bcl(filter), LayerParams::Bcl(gf)) => {
                let LayerState::Bcl(state) = &tape.states[i] else {
                    return Err(Error::State("tape is missing BCL intermediates".into()));
                };
                let pair = tape.lattices[*index].backward(state, &g, filter)?;
                *gf = pair.filter;
                Some(pair.input)
            }
            (Layer::BatchNorm { .. }, LayerParams::BatchNorm { gain, .. }, LayerParams::BatchNorm { gain: gg, shift: gs, .. }) => {
                let LayerState::BatchNorm { normalized, inv_std, .. } = &tape.states[i] else {
                    return Err(Error::State("tape is missing BatchNorm intermediates".into()));
                };
                Some(batchnorm_backward(&g, normalized, inv_std, gain, gg, gs))
            }
            (Layer::Relu, _, _) => {
                let mut gx = g.clone();
                for (gv, y) in gx.as_mut_slice().iter_mut().zip(output(i).as_slice()) {
                    if *y <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Some(gx)
            }
            (Layer::Concat { sources, .. }, _, _) => {
                let mut offset = 0;
                for &s in sources {
                    let w = output(s).cols();
                    accumulate(&mut grads[s], g.columns(offset, w));
                    offset += w;
                }
                None
            }
            _ => return Err(Error::shape(format!("parameters of layer {i} do not match its kind"))),
        };
        if let Some(gx) = grad_x {
            if i == 0 {
                input_grad = gx;
            } else {
                accumulate(&mut grads[i - 1], gx);
            }
        }
    }
    Ok(Gradients {
        params: param_grads,
        input: input_grad,
        logits: logits_grad.expect("softmax is the last layer"),
    })
}

/// Index of the largest probability per row; ties go to the lower class.
pub fn predict(probabilities: &FeatureMatrix) -> Vec<usize> {
    (0..probabilities.rows())
        .map(|r| {
            let row = probabilities.row(r);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn conv1x1(x: &FeatureMatrix, weight: &[f64], bias: &[f64]) -> Result<FeatureMatrix> {
    use rayon::prelude::*;
    let c_in = x.cols();
    let c_out = bias.len();
    if weight.len() != c_in * c_out {
        return Err(Error::shape(format!(
            "1x1 convolution weights {} do not fit {c_in} inputs and {c_out} outputs",
            weight.len()
        )));
    }
    let mut out = FeatureMatrix::zeros(x.rows(), c_out);
    if c_out == 0 {
        return Ok(out);
    }
    out.as_mut_slice()
        .par_chunks_mut(c_out)
        .enumerate()
        .for_each(|(r, row)| {
            row.copy_from_slice(bias);
            for (ci, &xv) in x.row(r).iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(&weight[ci * c_out..(ci + 1) * c_out]) {
                    *o += xv * w;
                }
            }
        });
    Ok(out)
}

fn batchnorm_train(x: &FeatureMatrix, gain: &[f64], shift: &[f64]) -> (FeatureMatrix, LayerState) {
    let (n, c) = x.shape();
    let mut mean = vec![0.0; c];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPSILON).sqrt()).collect();
    let mut normalized = FeatureMatrix::zeros(n, c);
    let mut y = FeatureMatrix::zeros(n, c);
    for r in 0..n {
        for ch in 0..c {
            let xh = (x.get(r, ch) - mean[ch]) * inv_std[ch];
            normalized.set(r, ch, xh);
            y.set(r, ch, gain[ch] * xh + shift[ch]);
        }
    }
    (
        y,
        LayerState::BatchNorm {
            normalized,
            inv_std,
            mean,
            var,
        },
    )
}

fn batchnorm_infer(x: &FeatureMatrix, gain: &[f64], shift: &[f64], mean: &[f64], var: &[f64]) -> FeatureMatrix {
    let scale: Vec<f64> = gain
        .iter()
        .zip(var)
        .map(|(g, v)| g / (v + BATCHNORM_EPSILON).sqrt())
        .collect();
    let mut y = x.clone();
    for r in 0..y.rows() {
        for (ch, v) in y.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean[ch]) * scale[ch] + shift[ch];
        }
    }
    y
}

fn batchnorm_backward(
    g: &FeatureMatrix,
    normalized: &FeatureMatrix,
    inv_std: &[f64],
    gain: &[f64],
    grad_gain: &mut [f64],
    grad_shift: &mut [f64],
) -> FeatureMatrix {
    let (n, c) = g.shape();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for r in 0..n {
        for ch in 0..c {
            sum_g[ch] += g.get(r, ch);
            sum_gx[ch] += g.get(r, ch) * normalized.get(r, ch);
        }
    }
    for ch in 0..c {
        grad_gain[ch] += sum_gx[ch];
        grad_shift[ch] += sum_g[ch];
    }
    let nf = n as f64;
    let mut gx = FeatureMatrix::zeros(n, c);
    for r in 0..n {
        for ch in 0..c {
            let v = gain[ch] * inv_std[ch] / nf
                * (nf * g.get(r, ch) - sum_g[ch] - normalized.get(r, ch) * sum_gx[ch]);
            gx.set(r, ch, v);
        }
    }
    gx
}

fn softmax(logits: &FeatureMatrix) -> FeatureMatrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    p
}

fn softmax_backward(p: &FeatureMatrix, g: &FeatureMatrix) -> FeatureMatrix {
    let mut out = FeatureMatrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let gr = g.row(r);
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = pr[c] * (gr[c] - dot);
        }
    }
    out
}

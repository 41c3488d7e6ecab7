use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, conv_out, pool_out, ConvGeom, Shape3};
use super::Tensor;
use crate::error::{arg, Result};
use crate::imaging::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Fc {
        out: usize,
    },
    /// Output layer without an activation; softmax is applied by the head kind.
    LinearHead {
        out: usize,
    },
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::Fc { .. } | LayerKind::LinearHead { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Scales the base learning rate for this layer; 0 freezes it.
    pub lr_mult: f64,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            lr_mult: 1.0,
        }
    }
}

/// Weights and biases of a parameterized layer. Convolution weights are
/// `(out, in·k·k)`, dense weights `(out, in)`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Params {
    pub(crate) fn zeros_like(other: &Params) -> Self {
        Self {
            weights: vec![0.0; other.weights.len()],
            bias: vec![0.0; other.bias.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Option<Params>,
    pub(crate) in_shape: Shape3,
    pub(crate) out_shape: Shape3,
}

impl Layer {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn in_shape(&self) -> Shape3 {
        self.in_shape
    }

    pub fn out_shape(&self) -> Shape3 {
        self.out_shape
    }

    pub(crate) fn conv_geom(&self) -> Option<ConvGeom> {
        match self.spec.kind {
            LayerKind::Conv {
                kernel, stride, pad, ..
            } => Some(ConvGeom {
                input: self.in_shape,
                output: self.out_shape,
                kernel,
                stride,
                pad,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Five logits followed by softmax.
    Softmax5,
    /// One real output, linear activation.
    Regression1,
    /// Feature extractor without an output layer.
    None,
}

impl HeadKind {
    pub fn outputs(&self) -> Option<usize> {
        match self {
            HeadKind::Softmax5 => Some(5),
            HeadKind::Regression1 => Some(1),
            HeadKind::None => None,
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Softmax5 => "softmax-5",
            HeadKind::Regression1 => "regression-1",
            HeadKind::None => "none",
        })
    }
}

impl std::str::FromStr for HeadKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-5" => Ok(HeadKind::Softmax5),
            "regression-1" => Ok(HeadKind::Regression1),
            "none" => Ok(HeadKind::None),
            other => Err(arg(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Name of the output layer installed by [`Network::standard`] and
/// [`replace_head`].
pub const HEAD_LAYER: &str = "head";

/// Sequential network with named layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape3,
    layers: Vec<Layer>,
    head: HeadKind,
}

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

fn init_params(kind: &LayerKind, in_shape: Shape3, rng: &mut ChaCha8Rng) -> Option<Params> {
    let in_len = in_shape.iter().product::<usize>();
    match *kind {
        LayerKind::Conv {
            out_channels, kernel, ..
        } => {
            let fan_in = in_shape[0] * kernel * kernel;
            let fan_out = out_channels * kernel * kernel;
            Some(Params {
                weights: glorot(rng, out_channels * fan_in, fan_in, fan_out),
                bias: vec![0.0; out_channels],
            })
        }
        LayerKind::Fc { out } | LayerKind::LinearHead { out } => Some(Params {
            weights: glorot(rng, out * in_len, in_len, out),
            bias: vec![0.0; out],
        }),
        _ => None,
    }
}

pub(crate) fn out_shape(kind: &LayerKind, in_shape: Shape3) -> Option<Shape3> {
    match *kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        } => conv_out(in_shape, out_channels, kernel, stride, pad),
        LayerKind::MaxPool { kernel, stride } => pool_out(in_shape, kernel, stride),
        LayerKind::Relu => Some(in_shape),
        LayerKind::Fc { out } | LayerKind::LinearHead { out } => (out > 0).then_some([out, 1, 1]),
    }
}

impl Network {
    /// Builds a network with seeded uniform initialization in
    /// `±sqrt(6 / (fan_in + fan_out))` and zero biases.
    pub fn new(input: Shape3, specs: Vec<LayerSpec>, head: HeadKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        for spec in specs {
            let out = out_shape(&spec.kind, shape)
                .ok_or_else(|| arg(format!("layer {} cannot accept input shape {shape:?}", spec.name)))?;
            let params = init_params(&spec.kind, shape, &mut rng);
            layers.push(Layer {
                spec,
                params,
                in_shape: shape,
                out_shape: out,
            });
            shape = out;
        }
        Self::from_layers(input, layers, head)
    }

    /// Assembles pre-built layers, validating names, multipliers, shapes and
    /// the head.
    pub(crate) fn from_layers(input: Shape3, layers: Vec<Layer>, head: HeadKind) -> Result<Self> {
        if input.contains(&0) {
            return Err(arg(format!("input shape {input:?} has a zero dimension")));
        }
        let mut names = HashSet::new();
        let mut shape = input;
        for (i, l) in layers.iter().enumerate() {
            let name = &l.spec.name;
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(arg(format!("layer name {name:?} must be non-empty without whitespace")));
            }
            if !names.insert(name.clone()) {
                return Err(arg(format!("duplicate layer name {name:?}")));
            }
            if !(l.spec.lr_mult >= 0.0) || !l.spec.lr_mult.is_finite() {
                return Err(arg(format!(
                    "layer {name} has invalid lr multiplier {}",
                    l.spec.lr_mult
                )));
            }
            if l.in_shape != shape || out_shape(&l.spec.kind, shape) != Some(l.out_shape) {
                return Err(arg(format!("layer {name} shape is inconsistent with its input")));
            }
            if l.spec.kind.has_params() != l.params.is_some() {
                return Err(arg(format!("layer {name} parameter presence does not match its kind")));
            }
            if let LayerKind::LinearHead { .. } = l.spec.kind {
                if i + 1 != layers.len() {
                    return Err(arg(format!("linear head {name} must be the last layer")));
                }
            }
            shape = l.out_shape;
        }
        let last_head = layers.last().and_then(|l| match l.spec.kind {
            LayerKind::LinearHead { out } => Some(out),
            _ => None,
        });
        match (head.outputs(), last_head) {
            (Some(n), Some(m)) if n == m => {}
            (None, None) => {}
            _ => {
                return Err(arg(format!(
                    "head kind {head} does not match the final layer ({last_head:?} outputs)"
                )))
            }
        }
        Ok(Self { input, layers, head })
    }

    /// Desk-scale grading network for 1×64×64 inputs:
    /// `conv1(8@3×3) → relu1 → pool1 → conv2(16@3×3) → relu2 → pool2 →
    /// fc-feat(32) → fc-relu → head`.
    pub fn standard(head: HeadKind, seed: u64) -> Result<Self> {
        let conv = |out| LayerKind::Conv {
            out_channels: out,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let pool = LayerKind::MaxPool { kernel: 2, stride: 2 };
        let mut specs = vec![
            LayerSpec::new("conv1", conv(8)),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("pool1", pool),
            LayerSpec::new("conv2", conv(16)),
            LayerSpec::new("relu2", LayerKind::Relu),
            LayerSpec::new("pool2", pool),
            LayerSpec::new("fc-feat", LayerKind::Fc { out: 32 }),
            LayerSpec::new("fc-relu", LayerKind::Relu),
        ];
        if let Some(out) = head.outputs() {
            let mut h = LayerSpec::new(HEAD_LAYER, LayerKind::LinearHead { out });
            h.lr_mult = 10.0;
            specs.push(h);
        }
        Self::new([1, 64, 64], specs, head, seed)
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.spec.name == name)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn params_mut(&mut self, name: &str) -> Option<&mut Params> {
        self.layers
            .iter_mut()
            .find(|l| l.spec.name == name)
            .and_then(|l| l.params.as_mut())
    }

    pub fn set_lr_mult(&mut self, name: &str, mult: f64) -> Result<()> {
        if !(mult >= 0.0) || !mult.is_finite() {
            return Err(arg(format!("invalid lr multiplier {mult}")));
        }
        let l = self
            .layers
            .iter_mut()
            .find(|l| l.spec.name == name)
            .ok_or_else(|| arg(format!("no layer named {name:?}")))?;
        l.spec.lr_mult = mult;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(Params::len)
            .sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let expect = self.input.to_vec();
        let ok = input.shape() == expect.as_slice()
            || (self.input[1] == 1 && self.input[2] == 1 && input.shape() == [self.input[0]]);
        if !ok {
            return Err(arg(format!(
                "input shape {:?} does not match network input {:?}",
                input.shape(),
                self.input
            )));
        }
        Ok(())
    }

    /// Runs the network, recording every layer's activation.
    pub fn forward(&self, input: &Tensor) -> Result<Activations> {
        self.check_input(input)?;
        let trace = self.forward_trace(input.data());
        let mut names = Vec::with_capacity(self.layers.len());
        let mut values = Vec::with_capacity(self.layers.len());
        for (l, act) in self.layers.iter().zip(trace.acts.into_iter().skip(1)) {
            names.push(l.spec.name.clone());
            values.push(Tensor::from_parts(tensor_shape(l.out_shape), act));
        }
        let output = match (self.head, values.last()) {
            (HeadKind::Softmax5, Some(logits)) => Tensor::from_parts(vec![5], super::softmax(logits.data())),
            (_, Some(last)) => last.clone(),
            (_, None) => input.clone(),
        };
        Ok(Activations { names, values, output })
    }

    /// Forward pass keeping what backpropagation needs.
    pub(crate) fn forward_trace(&self, input: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        acts.push(input.to_vec());
        for l in &self.layers {
            let x = acts.last().unwrap();
            let mut out = vec![0.0; l.out_shape.iter().product()];
            let cache = match l.spec.kind {
                LayerKind::Conv { .. } => {
                    let g = l.conv_geom().unwrap();
                    let p = l.params.as_ref().unwrap();
                    let mut cols = Vec::new();
                    layers::im2col(&g, x, &mut cols);
                    layers::conv_forward(&g, &p.weights, &p.bias, &cols, &mut out);
                    Cache::Cols(cols)
                }
                LayerKind::MaxPool { kernel, stride } => {
                    let mut argmax = Vec::new();
                    layers::maxpool_forward(x, l.in_shape, l.out_shape, kernel, stride, &mut out, &mut argmax);
                    Cache::Argmax(argmax)
                }
                LayerKind::Relu => {
                    layers::relu_forward(x, &mut out);
                    Cache::None
                }
                LayerKind::Fc { .. } | LayerKind::LinearHead { .. } => {
                    let p = l.params.as_ref().unwrap();
                    layers::dense_forward(&p.weights, &p.bias, x, &mut out);
                    Cache::None
                }
            };
            acts.push(out);
            caches.push(cache);
        }
        Trace { acts, caches }
    }

    /// Raw output layer values (logits for a softmax head).
    pub(crate) fn raw_output(&self, input: &[f64]) -> Vec<f64> {
        self.forward_trace(input).acts.pop().unwrap()
    }
}

fn tensor_shape(s: Shape3) -> Vec<usize> {
    if s[1] == 1 && s[2] == 1 {
        vec![s[0]]
    } else {
        s.to_vec()
    }
}

pub(crate) enum Cache {
    Cols(Vec<f64>),
    Argmax(Vec<usize>),
    None,
}

pub(crate) struct Trace {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Vec<f64>>,
    pub caches: Vec<Cache>,
}

/// Per-layer activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    names: Vec<String>,
    values: Vec<Tensor>,
    /// Probabilities for a softmax head, raw values otherwise.
    pub output: Tensor,
}

impl Activations {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Flattened activation of `layer` for an image input.
pub fn extract_features(net: &Network, img: &GrayImage, layer: &str) -> Result<Vec<f64>> {
    let idx = net
        .layers
        .iter()
        .position(|l| l.spec.name == layer)
        .ok_or_else(|| arg(format!("network has no layer named {layer:?}")))?;
    let input = Tensor::from_image(img);
    net.check_input(&input)?;
    // only run the prefix of the network the tap needs
    let prefix = Network {
        input: net.input,
        layers: net.layers[..=idx].to_vec(),
        head: HeadKind::None,
    };
    Ok(prefix.forward_trace(input.data()).acts.pop().unwrap())
}

/// Swaps the output layer for a freshly initialized one of `head` kind with
/// lr multiplier 10; every other layer keeps its weights and gets multiplier 1.
pub fn replace_head(net: &Network, head: HeadKind, seed: u64) -> Result<Network> {
    let out = head
        .outputs()
        .ok_or_else(|| arg("replacement head must be softmax-5 or regression-1"))?;
    let mut layers: Vec<Layer> = net.layers.clone();
    if matches!(layers.last().map(|l| l.spec.kind), Some(LayerKind::LinearHead { .. })) {
        layers.pop();
    }
    if layers.is_empty() {
        return Err(arg("network has no body to attach a head to"));
    }
    for l in &mut layers {
        l.spec.lr_mult = 1.0;
    }
    let in_shape = layers.last().unwrap().out_shape;
    let kind = LayerKind::LinearHead { out };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layers.push(Layer {
        spec: LayerSpec {
            name: HEAD_LAYER.to_string(),
            kind,
            lr_mult: 10.0,
        },
        params: init_params(&kind, in_shape, &mut rng),
        in_shape,
        out_shape: [out, 1, 1],
    });
    Network::from_layers(net.input, layers, head)
}

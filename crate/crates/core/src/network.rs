//! Layer definitions, the traced forward pass and the VGG-A / toy builders.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, KERNEL};
use crate::rten::TensorFile;
use crate::tensor::Tensor;

/// One layer of a sequential network. Convolutions are always 3x3, stride 1,
/// zero padding 1; pooling is always 2x2 with stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "snake_case"))]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

/// Everything about a model except its weights.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    /// Per-channel means subtracted after scaling pixels from `[0, 255]` to `[0, 1]`.
    pub means: Vec<f32>,
    /// Index of the last max-pooling layer of the feature extractor.
    pub feature_end: usize,
}

impl Architecture {
    /// Output shape of every layer, preceded by the input shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input_shape.to_vec();
        if cur.contains(&0) {
            return Err(Error::InvalidModel(format!("input shape {:?}", cur)));
        }
        shapes.push(cur.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad =
                |what: String| Error::InvalidModel(format!("layer {} ({:?}): {}", i, layer, what));
            cur = match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                } => match cur[..] {
                    [c, h, w] if c == in_channels && out_channels > 0 => vec![out_channels, h, w],
                    _ => return Err(bad(format!("input {:?}", cur))),
                },
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool => match cur[..] {
                    [c, h, w] if h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0 => {
                        vec![c, h / 2, w / 2]
                    }
                    _ => return Err(bad(format!("needs even CHW input, got {:?}", cur))),
                },
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => match cur[..] {
                    [n] if n == in_features && out_features > 0 => vec![out_features],
                    _ => return Err(bad(format!("input {:?}", cur))),
                },
                LayerSpec::Softmax => match cur[..] {
                    [n] if n >= 1 => cur,
                    _ => return Err(bad(format!("needs a vector, got {:?}", cur))),
                },
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shapes()?;
        if self.means.len() != self.input_shape[0] {
            return Err(Error::InvalidModel(format!(
                "{} normalization means for {} input channels",
                self.means.len(),
                self.input_shape[0]
            )));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidModel("non-finite normalization mean".into()));
        }
        if self.layers.get(self.feature_end) != Some(&LayerSpec::MaxPool) {
            return Err(Error::InvalidModel(format!(
                "feature_end {} is not a max-pooling layer",
                self.feature_end
            )));
        }
        if !self.layers[self.feature_end + 1..]
            .iter()
            .any(|l| matches!(l, LayerSpec::Dense { .. }))
        {
            return Err(Error::InvalidModel(
                "no dense layer after feature_end".into(),
            ));
        }
        if self.layers[..self.feature_end].iter().any(|l| {
            !matches!(
                l,
                LayerSpec::Conv { .. } | LayerSpec::Relu | LayerSpec::MaxPool
            )
        }) {
            return Err(Error::InvalidModel(
                "feature extractor may only hold conv, relu and max-pooling layers".into(),
            ));
        }
        match self.layers.last() {
            Some(LayerSpec::Softmax) => {}
            _ => return Err(Error::InvalidModel("last layer must be softmax".into())),
        }
        if self.layers[..self.layers.len() - 1].contains(&LayerSpec::Softmax) {
            return Err(Error::InvalidModel(
                "softmax only allowed as the last layer".into(),
            ));
        }
        Ok(shapes)
    }

    /// Parameter-tensor prefix (`conv{k}` / `fc{k}`) of every layer that has weights.
    pub fn param_prefixes(&self) -> Vec<Option<String>> {
        let (mut conv, mut fc) = (0, 0);
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { .. } => {
                    conv += 1;
                    Some(format!("conv{}", conv - 1))
                }
                LayerSpec::Dense { .. } => {
                    fc += 1;
                    Some(format!("fc{}", fc - 1))
                }
                _ => None,
            })
            .collect()
    }

    /// Layer indices of the convolutions, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Dense { out_features, .. } => Some(*out_features),
                _ => None,
            })
            .unwrap_or(0)
    }

    fn param_shapes(layer: &LayerSpec) -> Option<([usize; 4], usize, usize)> {
        match *layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
            } => Some(([out_channels, in_channels, KERNEL, KERNEL], 4, out_channels)),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some(([out_features, in_features, 0, 0], 2, out_features)),
            _ => None,
        }
    }
}

/// Weight (`OIHW` or `OI`) and bias (`O`) of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    fn zeros_for(layer: &LayerSpec) -> Option<Self> {
        let (shape, rank, out) = Architecture::param_shapes(layer)?;
        Some(Self {
            weight: Tensor::zeros(&shape[..rank]).expect("positive extents"),
            bias: Tensor::zeros(&[out]).expect("positive extents"),
        })
    }

    fn matches(&self, layer: &LayerSpec) -> bool {
        match Architecture::param_shapes(layer) {
            Some((shape, rank, out)) => {
                self.weight.shape() == &shape[..rank] && self.bias.shape() == [out]
            }
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDef {
    arch: Architecture,
    params: Vec<Option<LinearParams>>,
    shapes: Vec<Vec<usize>>,
}

impl ModelDef {
    /// A model with all parameters zero.
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        let shapes = arch.validate()?;
        let params = arch.layers.iter().map(LinearParams::zeros_for).collect();
        Ok(Self {
            arch,
            params,
            shapes,
        })
    }

    /// Assembles a model from an architecture and its named parameter tensors.
    pub fn from_tensor_file(arch: Architecture, file: &TensorFile) -> Result<Self> {
        let mut model = Self::zeroed(arch)?;
        let prefixes = model.arch.param_prefixes();
        for (i, prefix) in prefixes.iter().enumerate() {
            let Some(prefix) = prefix else { continue };
            let wname = format!("{}.w", prefix);
            let bname = format!("{}.b", prefix);
            let weight = file
                .get(&wname)
                .ok_or(Error::MissingParameter(wname))?
                .clone();
            let bias = file
                .get(&bname)
                .ok_or(Error::MissingParameter(bname))?
                .clone();
            model.set_params(i, LinearParams { weight, bias })?;
        }
        Ok(model)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut file = TensorFile::new();
        for (prefix, p) in self.arch.param_prefixes().iter().zip(&self.params) {
            if let (Some(prefix), Some(p)) = (prefix, p) {
                file.push(format!("{}.w", prefix), p.weight.clone())
                    .expect("unique generated names");
                file.push(format!("{}.b", prefix), p.bias.clone())
                    .expect("unique generated names");
            }
        }
        file
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.arch.layers
    }

    pub fn feature_end(&self) -> usize {
        self.arch.feature_end
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    /// Output shape of every layer, preceded by the input shape.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn params(&self, layer: usize) -> Option<&LinearParams> {
        self.params.get(layer).and_then(Option::as_ref)
    }

    pub fn all_params(&self) -> &[Option<LinearParams>] {
        &self.params
    }

    /// Replaces the parameters of a conv or dense layer; shapes must match.
    pub fn set_params(&mut self, layer: usize, p: LinearParams) -> Result<()> {
        let spec = self
            .arch
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidModel(format!("no layer {}", layer)))?;
        if !p.matches(spec) {
            return Err(Error::ShapeMismatch(format!(
                "parameters {:?}/{:?} for layer {} ({:?})",
                p.weight.shape(),
                p.bias.shape(),
                layer,
                spec
            )));
        }
        if !p.weight.is_finite() || !p.bias.is_finite() {
            return Err(Error::NonFinite(0));
        }
        self.params[layer] = Some(p);
        Ok(())
    }

    /// Mutable weight and bias values of a layer. Callers keep them finite.
    pub fn params_mut(&mut self, layer: usize) -> Option<(&mut [f32], &mut [f32])> {
        self.params
            .get_mut(layer)
            .and_then(Option::as_mut)
            .map(|p| (p.weight.data_mut(), p.bias.data_mut()))
    }

    /// He-normal weights and zero biases, deterministic in `seed`.
    pub fn init_he(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.iter_mut().flatten() {
            let shape = p.weight.shape();
            let fan_in: usize = shape[1..].iter().product();
            let std = libm::sqrt(2.0 / fan_in as f64) as f32;
            let normal = Normal::new(0.0f32, std).expect("positive std");
            p.weight
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = normal.sample(&mut rng));
            p.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
        }
    }

    /// Uniform random parameters in `[-scale, scale]`, deterministic in `seed`.
    pub fn init_uniform(&mut self, seed: u64, scale: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.iter_mut().flatten() {
            for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
                *v = rng.random_range(-scale..=scale);
            }
        }
    }
}

/// Every layer's input and output from one forward pass, plus the max-pool
/// routing. `input(i) == output(i - 1)` holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    activations: Vec<Tensor>,
    argmax: Vec<Option<Vec<u32>>>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.argmax.len()
    }

    pub fn is_empty(&self) -> bool {
        self.argmax.is_empty()
    }

    pub fn input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    /// The (normalized) network input.
    pub fn network_input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn argmax(&self, layer: usize) -> Option<&[u32]> {
        self.argmax.get(layer).and_then(|a| a.as_deref())
    }

    /// Pre-softmax class scores.
    pub fn logits(&self) -> &[f32] {
        self.activations[self.activations.len() - 2].data()
    }

    pub fn probabilities(&self) -> &[f32] {
        self.activations[self.activations.len() - 1].data()
    }

    pub(crate) fn check(&self, model: &ModelDef) -> Result<()> {
        if self.activations.len() != model.shapes.len() {
            return Err(Error::TraceMismatch(format!(
                "{} recorded layers for a {}-layer model",
                self.len(),
                model.layers().len()
            )));
        }
        for (i, (a, s)) in self.activations.iter().zip(&model.shapes).enumerate() {
            if a.shape() != s.as_slice() {
                return Err(Error::TraceMismatch(format!(
                    "activation {} has shape {:?}, model expects {:?}",
                    i,
                    a.shape(),
                    s
                )));
            }
        }
        for (i, l) in model.layers().iter().enumerate() {
            if (*l == LayerSpec::MaxPool) != self.argmax[i].is_some() {
                return Err(Error::TraceMismatch(format!("pool routing at layer {}", i)));
            }
        }
        Ok(())
    }
}

/// Scales 8-bit-range pixel values to `[0, 1]` and subtracts channel means.
pub fn normalize(model: &ModelDef, image: &Tensor) -> Result<Tensor> {
    let expected = model.input_shape();
    if image.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "image {:?}, model expects {:?}",
            image.shape(),
            expected
        )));
    }
    let plane = expected[1] * expected[2];
    let data = image
        .data()
        .chunks_exact(plane)
        .zip(&model.arch.means)
        .flat_map(|(ch, &m)| ch.iter().map(move |&v| v / 255.0 - m))
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

pub fn forward_full(model: &ModelDef, image: &Tensor) -> Result<ActivationTrace> {
    forward_normalized(model, normalize(model, image)?)
}

/// Runs every layer on an already-normalized input.
pub fn forward_normalized(model: &ModelDef, input: Tensor) -> Result<ActivationTrace> {
    if input.shape() != model.shapes[0].as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "input {:?}, model expects {:?}",
            input.shape(),
            model.shapes[0]
        )));
    }
    let n = model.layers().len();
    let mut activations = Vec::with_capacity(n + 1);
    let mut argmax = Vec::with_capacity(n);
    activations.push(input);
    for (i, layer) in model.layers().iter().enumerate() {
        let x = &activations[i];
        let (y, arg) = run_layer(model, i, layer, x)?;
        activations.push(y);
        argmax.push(arg);
    }
    Ok(ActivationTrace {
        activations,
        argmax,
    })
}

/// Output of the layer range `from..to` given the input of layer `from`.
pub fn forward_range(model: &ModelDef, from: usize, to: usize, input: Tensor) -> Result<Tensor> {
    let mut x = input;
    for i in from..to {
        x = run_layer(model, i, &model.layers()[i], &x)?.0;
    }
    Ok(x)
}

fn run_layer(
    model: &ModelDef,
    i: usize,
    layer: &LayerSpec,
    x: &Tensor,
) -> Result<(Tensor, Option<Vec<u32>>)> {
    let p = || {
        model
            .params(i)
            .ok_or_else(|| Error::InvalidModel(format!("layer {} has no parameters", i)))
    };
    Ok(match layer {
        LayerSpec::Conv { .. } => {
            let p = p()?;
            (ops::conv2d_forward(x, &p.weight, &p.bias)?, None)
        }
        LayerSpec::Relu => {
            let data = x.data().iter().map(|&v| v.max(0.0)).collect();
            (Tensor::from_parts(x.shape().to_vec(), data), None)
        }
        LayerSpec::MaxPool => {
            let (y, arg) = ops::maxpool_forward(x)?;
            (y, Some(arg))
        }
        LayerSpec::Flatten => (x.clone().reshape(&[x.numel()])?, None),
        LayerSpec::Dense { .. } => {
            let p = p()?;
            (ops::dense_forward(x.data(), &p.weight, &p.bias)?, None)
        }
        LayerSpec::Softmax => (
            Tensor::from_parts(x.shape().to_vec(), ops::softmax(x.data())?),
            None,
        ),
    })
}

fn conv_block(layers: &mut Vec<LayerSpec>, in_c: usize, outs: &[usize]) -> usize {
    let mut c = in_c;
    for &o in outs {
        layers.push(LayerSpec::Conv {
            in_channels: c,
            out_channels: o,
        });
        layers.push(LayerSpec::Relu);
        c = o;
    }
    layers.push(LayerSpec::MaxPool);
    c
}

fn classifier(layers: &mut Vec<LayerSpec>, features: usize, hidden: usize, classes: usize) {
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        in_features: features,
        out_features: hidden,
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense {
        in_features: hidden,
        out_features: classes,
    });
    layers.push(LayerSpec::Softmax);
}

/// Default hidden width of the VGG-A classifier.
pub const VGG_A_FC_WIDTH: usize = 1024;

/// VGG-A feature extractor (8 convolutions in 5 pooled blocks, 224 -> 7)
/// followed by a two-layer classifier.
pub fn build_vgg_a(num_classes: usize, fc_width: usize) -> Result<ModelDef> {
    if num_classes < 2 || fc_width == 0 {
        return Err(Error::InvalidConfig(format!(
            "vgg-a needs >= 2 classes and a positive width, got {} / {}",
            num_classes, fc_width
        )));
    }
    let mut layers = Vec::new();
    let mut c = 3;
    for block in [&[64][..], &[128], &[256, 256], &[512, 512], &[512, 512]] {
        c = conv_block(&mut layers, c, block);
    }
    let feature_end = layers.len() - 1;
    classifier(&mut layers, 7 * 7 * c, fc_width, num_classes);
    ModelDef::zeroed(Architecture {
        layers,
        input_shape: [3, 224, 224],
        means: vec![0.485, 0.456, 0.406],
        feature_end,
    })
}

/// Toy-scale analogue: three conv/relu/pool blocks on 32x32 inputs
/// (channels 8m, 16m, 32m; feature grid 4x4x32m), classifier 64m -> 2.
pub fn build_toy(width_multiplier: usize) -> Result<ModelDef> {
    let m = width_multiplier;
    if m == 0 {
        return Err(Error::InvalidConfig("width multiplier must be >= 1".into()));
    }
    let mut layers = Vec::new();
    let mut c = 3;
    for width in [8 * m, 16 * m, 32 * m] {
        c = conv_block(&mut layers, c, &[width]);
    }
    let feature_end = layers.len() - 1;
    classifier(&mut layers, 4 * 4 * c, 64 * m, 2);
    ModelDef::zeroed(Architecture {
        layers,
        input_shape: [3, 32, 32],
        means: vec![0.5, 0.5, 0.5],
        feature_end,
    })
}

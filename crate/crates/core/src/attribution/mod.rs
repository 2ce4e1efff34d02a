//! Pixel attribution: LRP with per-layer rules, sensitivity maps with an
//! early L1 reduction, and focused LRP started from class-discriminative
//! feature neurons.

mod flrp;
mod rules;

pub use flrp::{
    equal_error_threshold, flrp_full, flrp_initial_relevance, flrp_select_neurons,
    flrp_select_neurons_partial, NeuronSelection, SelectedNeuron, ThresholdFit,
};
pub use rules::{
    epsilon_leak_bound, lrp_alphabeta_conv, lrp_alphabeta_dense, lrp_epsilon, lrp_flat, lrp_pool,
    lrp_pool_uniform, lrp_relu, Relevance, RuleConfig,
};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::grad::backward_impl;
use crate::image::{round_u8, RgbImage};
use crate::network::{ActivationTrace, Architecture, LayerSpec, ModelDef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    Lrp,
    Flrp,
    Sensitivity,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Lrp, Method::Flrp, Method::Sensitivity];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lrp => "lrp",
            Method::Flrp => "flrp",
            Method::Sensitivity => "sensitivity",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lrp" => Ok(Method::Lrp),
            "flrp" => Ok(Method::Flrp),
            "sensitivity" | "sens" => Ok(Method::Sensitivity),
            _ => Err(Error::InvalidConfig(format!("unknown method '{}'", s))),
        }
    }
}

/// Per-pixel scores (color channels summed), row-major `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub method: Method,
    pub source_id: String,
}

impl RelevanceMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>, method: Method) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::InvalidShape(format!(
                "{}x{} map with {} values",
                height,
                width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            data,
            method,
            source_id: String::new(),
        })
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    /// Sums a `C x H x W` input relevance over channels.
    pub fn from_input_relevance(r: &Relevance, method: Method) -> Result<Self> {
        let (c, h, w) = match r.shape()[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "input relevance {:?}",
                    r.shape()
                )))
            }
        };
        let plane = h * w;
        let mut acc = vec![0.0f64; plane];
        for ch in 0..c {
            for (a, &v) in acc.iter_mut().zip(&r.data()[ch * plane..(ch + 1) * plane]) {
                *a += v;
            }
        }
        Self::new(h, w, acc.iter().map(|&v| v as f32).collect(), method)
    }
}

/// How relevance crosses one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Flat,
    AlphaBeta,
    Epsilon,
    WinnerTakeAll,
    /// Quarter split through a pooling window (sensitivity maps only).
    UniformPool,
    PassThrough,
}

/// One rule per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleAssignment {
    rules: Vec<Rule>,
}

impl RuleAssignment {
    /// Flat for the first two convolutions, alpha-beta for later ones,
    /// epsilon for dense layers, winner-take-all for pooling, pass-through
    /// for everything else.
    pub fn for_model(arch: &Architecture) -> Self {
        let mut convs = 0;
        let rules = arch
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { .. } => {
                    convs += 1;
                    if convs <= 2 {
                        Rule::Flat
                    } else {
                        Rule::AlphaBeta
                    }
                }
                LayerSpec::Dense { .. } => Rule::Epsilon,
                LayerSpec::MaxPool => Rule::WinnerTakeAll,
                LayerSpec::Relu | LayerSpec::Flatten | LayerSpec::Softmax => Rule::PassThrough,
            })
            .collect();
        Self { rules }
    }

    /// Flat spreading everywhere: flat convolutions, uniform pooling.
    pub fn flat_spread(arch: &Architecture) -> Self {
        let rules = arch
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { .. } => Rule::Flat,
                LayerSpec::MaxPool => Rule::UniformPool,
                _ => Rule::PassThrough,
            })
            .collect();
        Self { rules }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }
}

/// Relevance totals around one propagation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub layer: usize,
    pub rule: Rule,
    /// Total relevance at the layer's output, before the step.
    pub total_out: f64,
    /// Total relevance at the layer's input, after the step.
    pub total_in: f64,
    /// Relevance dropped by alpha-beta neurons with an empty branch.
    pub dropped: f64,
    /// For epsilon steps, the bound on `|total_in - total_out|`; else 0.
    pub leak_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    /// Relevance at the network input (`C x H x W`).
    pub input: Relevance,
    /// Steps from the start layer down to layer 0.
    pub steps: Vec<StepRecord>,
}

/// Propagates `start` (relevance at the output of `from_layer`) down to the
/// network input using the given rules.
pub fn propagate(
    model: &ModelDef,
    trace: &ActivationTrace,
    from_layer: usize,
    start: Relevance,
    rules: &RuleAssignment,
    cfg: &RuleConfig,
) -> Result<Propagation> {
    cfg.validate()?;
    trace.check(model)?;
    if from_layer >= model.layers().len() || rules.rules.len() != model.layers().len() {
        return Err(Error::InvalidConfig(format!(
            "propagation from layer {} with {} rules",
            from_layer,
            rules.rules.len()
        )));
    }
    if start.shape() != trace.output(from_layer).shape() {
        return Err(Error::ShapeMismatch(format!(
            "start relevance {:?} at layer {} with output {:?}",
            start.shape(),
            from_layer,
            trace.output(from_layer).shape()
        )));
    }

    let mut r = start;
    let mut steps = Vec::with_capacity(from_layer + 1);
    for i in (0..=from_layer).rev() {
        let layer = &model.layers()[i];
        let rule = rules.rules[i];
        let input = trace.input(i);
        let total_out = r.total();
        let mut dropped = 0.0;
        let mut leak_bound = 0.0;
        let weight = || {
            model
                .params(i)
                .map(|p| &p.weight)
                .ok_or_else(|| Error::MissingParameter(format!("layer {}", i)))
        };
        r = match (layer, rule) {
            (LayerSpec::Conv { in_channels, .. }, Rule::Flat) => lrp_flat(*in_channels, &r)?,
            (LayerSpec::Conv { .. }, Rule::AlphaBeta) => {
                let (out, d) = lrp_alphabeta_conv(input, weight()?, &r, cfg)?;
                dropped = d;
                out
            }
            (LayerSpec::Dense { .. }, Rule::Epsilon) => {
                leak_bound = epsilon_leak_bound(input.data(), weight()?, r.data(), cfg.epsilon)?;
                Relevance::new(
                    input.shape().to_vec(),
                    lrp_epsilon(input.data(), weight()?, r.data(), cfg.epsilon)?,
                )?
            }
            (LayerSpec::Dense { .. }, Rule::AlphaBeta) => {
                let (out, d) = lrp_alphabeta_dense(input.data(), weight()?, r.data(), cfg)?;
                dropped = d;
                Relevance::new(input.shape().to_vec(), out)?
            }
            (LayerSpec::MaxPool, Rule::WinnerTakeAll) => {
                let arg = trace
                    .argmax(i)
                    .ok_or_else(|| Error::TraceMismatch(format!("no routing for pool {}", i)))?;
                lrp_pool(input.shape(), arg, &r)?
            }
            (LayerSpec::MaxPool, Rule::UniformPool) => lrp_pool_uniform(&r)?,
            (LayerSpec::Relu, Rule::PassThrough) => lrp_relu(r),
            (LayerSpec::Flatten | LayerSpec::Softmax, Rule::PassThrough) => {
                r.reshaped(input.shape())
            }
            (l, rule) => {
                return Err(Error::InvalidConfig(format!(
                    "rule {:?} cannot be applied to layer {} ({:?})",
                    rule, i, l
                )))
            }
        };
        steps.push(StepRecord {
            layer: i,
            rule,
            total_out,
            total_in: r.total(),
            dropped,
            leak_bound,
        });
    }
    Ok(Propagation { input: r, steps })
}

fn logits_layer(model: &ModelDef) -> usize {
    let n = model.layers().len();
    if model.layers()[n - 1] == LayerSpec::Softmax {
        n - 2
    } else {
        n - 1
    }
}

/// Plain LRP from the class logit, with its propagation record.
pub fn lrp_full_detailed(
    model: &ModelDef,
    trace: &ActivationTrace,
    class_index: usize,
    cfg: &RuleConfig,
) -> Result<(RelevanceMap, Propagation)> {
    let classes = trace.logits().len();
    if class_index >= classes {
        return Err(Error::InvalidClass {
            index: class_index,
            classes,
        });
    }
    let mut start = Relevance::zeros(&[classes]);
    start.data_mut()[class_index] = f64::from(trace.logits()[class_index]);
    let prop = propagate(
        model,
        trace,
        logits_layer(model),
        start,
        &RuleAssignment::for_model(model.arch()),
        cfg,
    )?;
    Ok((
        RelevanceMap::from_input_relevance(&prop.input, Method::Lrp)?,
        prop,
    ))
}

/// Plain LRP: start relevance is the class logit, all other outputs zero.
pub fn lrp_full(
    model: &ModelDef,
    trace: &ActivationTrace,
    class_index: usize,
    cfg: &RuleConfig,
) -> Result<RelevanceMap> {
    Ok(lrp_full_detailed(model, trace, class_index, cfg)?.0)
}

/// Layer at which sensitivity maps take the channel L1 norm: the ReLU output
/// following the second convolution (or the convolution itself when no ReLU
/// follows).
pub fn sensitivity_stop_layer(arch: &Architecture) -> Result<usize> {
    let convs = arch.conv_layers();
    let second = *convs.get(1).ok_or_else(|| {
        Error::InvalidModel("sensitivity maps need at least two convolutions".into())
    })?;
    Ok(match arch.layers.get(second + 1) {
        Some(LayerSpec::Relu) => second + 1,
        _ => second,
    })
}

/// Channel L1 norm of the class-logit gradient at the stop layer, `H x W`.
pub fn sensitivity_l1(
    model: &ModelDef,
    trace: &ActivationTrace,
    class_index: usize,
) -> Result<(usize, Vec<f64>)> {
    let classes = trace.logits().len();
    if class_index >= classes {
        return Err(Error::InvalidClass {
            index: class_index,
            classes,
        });
    }
    let stop = sensitivity_stop_layer(model.arch())?;
    let mut seed = vec![0.0f32; classes];
    seed[class_index] = 1.0;
    let g = backward_impl(model, trace, &seed, Some(stop), false)?.input_grad;
    let (c, h, w) = g.chw()?;
    let plane = h * w;
    let mut l1 = vec![0.0f64; plane];
    for ch in 0..c {
        for (a, &v) in l1.iter_mut().zip(&g.data()[ch * plane..(ch + 1) * plane]) {
            *a += f64::from(v).abs();
        }
    }
    Ok((stop, l1))
}

/// Sensitivity map: channel L1 norm of the class-logit gradient after the
/// second convolution, spread flatly back to the pixels.
pub fn sensitivity_map(
    model: &ModelDef,
    trace: &ActivationTrace,
    class_index: usize,
) -> Result<RelevanceMap> {
    let (stop, l1) = sensitivity_l1(model, trace, class_index)?;
    // flat spreading ignores the output channel, so the reduced plane can sit
    // in channel 0 of the stop layer's relevance
    let shape = trace.output(stop).shape().to_vec();
    let mut start = Relevance::zeros(&shape);
    start.data_mut()[..l1.len()].copy_from_slice(&l1);
    let prop = propagate(
        model,
        trace,
        stop,
        start,
        &RuleAssignment::flat_spread(model.arch()),
        &RuleConfig::default(),
    )?;
    RelevanceMap::from_input_relevance(&prop.input, Method::Sensitivity)
}

/// Blue (low) to yellow (high) heatmap of a min-max normalized map.
pub fn colorize(map: &RelevanceMap) -> RgbImage {
    let (lo, hi) = map
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = f64::from(hi) - f64::from(lo);
    let mut data = Vec::with_capacity(map.data.len() * 3);
    for &v in &map.data {
        let n = if range > 0.0 {
            ((f64::from(v) - f64::from(lo)) / range).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let rg = round_u8(255.0 * n);
        data.extend_from_slice(&[rg, rg, round_u8(255.0 * (1.0 - n))]);
    }
    RgbImage::new(map.width, map.height, data).expect("map dimensions are positive")
}

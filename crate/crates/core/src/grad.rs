//! Reverse-mode gradients, cross-entropy and momentum SGD.
//!
//! Gradients start at the pre-softmax logits; the softmax is folded into the
//! loss.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::{ActivationTrace, LayerSpec, LinearParams, ModelDef};
use crate::ops::{tap_range, KERNEL};
use crate::tensor::Tensor;

/// Gradients of one backward pass. `param_grads` mirrors the model's layer
/// list; layers at or below the stop layer, and layers without weights, hold
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Gradient with respect to the normalized network input, or with respect
    /// to the stop layer's output when a stop layer was given.
    pub input_grad: Tensor,
    pub param_grads: Vec<Option<LinearParams>>,
}

impl GradientBundle {
    /// Parameter gradients keyed by tensor name (`conv0.w`, `fc1.b`, ...).
    pub fn named(&self, model: &ModelDef) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, g) in model.arch().param_prefixes().iter().zip(&self.param_grads) {
            if let (Some(prefix), Some(g)) = (prefix, g) {
                out.push((format!("{}.w", prefix), &g.weight));
                out.push((format!("{}.b", prefix), &g.bias));
            }
        }
        out
    }
}

/// Input, weight and bias gradients of a 3x3/pad-1 convolution.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    out_grad: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<LinearParams>)> {
    let (in_c, h, w) = input.chw()?;
    let (out_c, gh, gw) = out_grad.chw()?;
    if weight.shape() != [out_c, in_c, KERNEL, KERNEL] || (gh, gw) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "conv backward: input {:?}, weight {:?}, grad {:?}",
            input.shape(),
            weight.shape(),
            out_grad.shape()
        )));
    }
    let plane = h * w;
    let x = input.data();
    let k = weight.data();
    let g = out_grad.data();

    let mut grad_in = vec![0.0f32; in_c * plane];
    let mut acc = vec![0.0f64; plane];
    for i in 0..in_c {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for o in 0..out_c {
            let go = &g[o * plane..(o + 1) * plane];
            for ky in 0..KERNEL {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..KERNEL {
                    let (x0, x1) = tap_range(kx, w);
                    let wv = f64::from(k[((o * in_c + i) * KERNEL + ky) * KERNEL + kx]);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let dst = &mut acc[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (d, &gv) in dst.iter_mut().zip(&go[y * w + x0..y * w + x1]) {
                            *d += wv * f64::from(gv);
                        }
                    }
                }
            }
        }
        for (d, &a) in grad_in[i * plane..(i + 1) * plane].iter_mut().zip(&acc) {
            *d = a as f32;
        }
    }

    let params = want_params.then(|| {
        let mut gw_data = vec![0.0f32; out_c * in_c * KERNEL * KERNEL];
        let mut gb_data = vec![0.0f32; out_c];
        for o in 0..out_c {
            let go = &g[o * plane..(o + 1) * plane];
            gb_data[o] = go.iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
            for i in 0..in_c {
                let src = &x[i * plane..(i + 1) * plane];
                for ky in 0..KERNEL {
                    let (y0, y1) = tap_range(ky, h);
                    for kx in 0..KERNEL {
                        let (x0, x1) = tap_range(kx, w);
                        let mut s = 0.0f64;
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let a = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (&gv, &av) in go[y * w + x0..y * w + x1].iter().zip(a) {
                                s += f64::from(gv) * f64::from(av);
                            }
                        }
                        gw_data[((o * in_c + i) * KERNEL + ky) * KERNEL + kx] = s as f32;
                    }
                }
            }
        }
        LinearParams {
            weight: Tensor::from_parts(weight.shape().to_vec(), gw_data),
            bias: Tensor::from_parts(vec![out_c], gb_data),
        }
    });
    Ok((Tensor::from_parts(input.shape().to_vec(), grad_in), params))
}

/// Input, weight and bias gradients of a dense layer.
pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    out_grad: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<LinearParams>)> {
    let (o, i) = match weight.shape()[..] {
        [o, i] if i == input.numel() && o == out_grad.numel() => (o, i),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "dense backward: input {:?}, weight {:?}, grad {:?}",
                input.shape(),
                weight.shape(),
                out_grad.shape()
            )))
        }
    };
    let w = weight.data();
    let g = out_grad.data();
    let mut acc = vec![0.0f64; i];
    for (row, &gv) in w.chunks_exact(i).zip(g) {
        let gv = f64::from(gv);
        for (a, &wv) in acc.iter_mut().zip(row) {
            *a += f64::from(wv) * gv;
        }
    }
    let grad_in = acc.iter().map(|&a| a as f32).collect();
    let params = want_params.then(|| {
        let x = input.data();
        let gw = g
            .iter()
            .flat_map(|&gv| {
                x.iter()
                    .map(move |&xv| (f64::from(gv) * f64::from(xv)) as f32)
            })
            .collect();
        LinearParams {
            weight: Tensor::from_parts(vec![o, i], gw),
            bias: Tensor::from_parts(vec![o], g.to_vec()),
        }
    });
    Ok((Tensor::from_parts(input.shape().to_vec(), grad_in), params))
}

fn first_backward_layer(model: &ModelDef) -> usize {
    let n = model.layers().len();
    if model.layers()[n - 1] == LayerSpec::Softmax {
        n - 1
    } else {
        n
    }
}

/// Backpropagates `output_grad` (taken at the pre-softmax logits) through the
/// recorded trace. With `stop_layer = Some(s)` propagation halts once the
/// gradient with respect to layer `s`'s output is known.
pub fn backward_full(
    model: &ModelDef,
    trace: &ActivationTrace,
    output_grad: &[f32],
    stop_layer: Option<usize>,
) -> Result<GradientBundle> {
    backward_impl(model, trace, output_grad, stop_layer, true)
}

pub(crate) fn backward_impl(
    model: &ModelDef,
    trace: &ActivationTrace,
    output_grad: &[f32],
    stop_layer: Option<usize>,
    want_params: bool,
) -> Result<GradientBundle> {
    trace.check(model)?;
    let top = first_backward_layer(model);
    if output_grad.len() != trace.logits().len() {
        return Err(Error::ShapeMismatch(format!(
            "output gradient of length {} for {} logits",
            output_grad.len(),
            trace.logits().len()
        )));
    }
    let stop = match stop_layer {
        Some(s) if s >= top => {
            return Err(Error::InvalidConfig(format!(
                "stop layer {} is not below the logits (layer {})",
                s, top
            )))
        }
        Some(s) => s + 1,
        None => 0,
    };

    let mut param_grads: Vec<Option<LinearParams>> = vec![None; model.layers().len()];
    let mut g = Tensor::new(trace.output(top - 1).shape().to_vec(), output_grad.to_vec())?;
    for i in (stop..top).rev() {
        let x = trace.input(i);
        g = match model.layers()[i] {
            LayerSpec::Conv { .. } => {
                let p = model
                    .params(i)
                    .ok_or_else(|| Error::MissingParameter(format!("layer {}", i)))?;
                let (gi, gp) = conv2d_backward(x, &p.weight, &g, want_params)?;
                param_grads[i] = gp;
                gi
            }
            LayerSpec::Dense { .. } => {
                let p = model
                    .params(i)
                    .ok_or_else(|| Error::MissingParameter(format!("layer {}", i)))?;
                let (gi, gp) = dense_backward(x, &p.weight, &g, want_params)?;
                param_grads[i] = gp;
                gi
            }
            LayerSpec::Relu => {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            LayerSpec::MaxPool => {
                let arg = trace
                    .argmax(i)
                    .ok_or_else(|| Error::TraceMismatch(format!("no routing for pool {}", i)))?;
                let mut data = vec![0.0f32; x.numel()];
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    data[a as usize] += gv;
                }
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            LayerSpec::Flatten => g.reshape(x.shape())?,
            LayerSpec::Softmax => {
                return Err(Error::InvalidModel("softmax inside the network".into()));
            }
        };
    }
    Ok(GradientBundle {
        input_grad: g,
        param_grads,
    })
}

/// Negative log-likelihood of `true_class` and its gradient at the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub logit_grad: Vec<f32>,
    /// The true-class probability was clamped to 1e-12 before the log.
    pub clamped: bool,
}

pub const PROB_FLOOR: f64 = 1e-12;

pub fn cross_entropy(probabilities: &[f32], true_class: usize) -> Result<CrossEntropy> {
    let p = *probabilities.get(true_class).ok_or(Error::InvalidClass {
        index: true_class,
        classes: probabilities.len(),
    })?;
    let p = f64::from(p);
    let clamped = p < PROB_FLOOR;
    let loss = -libm::log(p.max(PROB_FLOOR));
    let logit_grad = probabilities
        .iter()
        .enumerate()
        .map(|(k, &pk)| if k == true_class { pk - 1.0 } else { pk })
        .collect();
    Ok(CrossEntropy {
        loss: if loss == 0.0 { 0.0 } else { loss },
        logit_grad,
        clamped,
    })
}

/// Learning rate and momentum of a plain momentum-SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
}

/// `v <- momentum * v - lr * g; w <- w + v`, element-wise.
pub fn sgd_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    config: SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "sgd: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = config.momentum * *v - config.learning_rate * g;
        *w += *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_normalized, Architecture};

    fn dense_model(w: f32) -> ModelDef {
        let arch = Architecture {
            layers: vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 1,
                    out_features: 1,
                },
                LayerSpec::Softmax,
            ],
            input_shape: [1, 2, 2],
            means: vec![0.0],
            feature_end: 2,
        };
        let mut m = ModelDef::zeroed(arch).unwrap();
        m.params_mut(4).unwrap().0[0] = w;
        m
    }

    #[test]
    fn dense_gradient_is_weight() {
        let m = dense_model(3.0);
        let trace = forward_normalized(&m, Tensor::zeros(&[1, 2, 2]).unwrap()).unwrap();
        // gradient at the dense input (output of flatten, layer 3)
        let g = backward_full(&m, &trace, &[1.0], Some(3)).unwrap();
        assert_eq!(g.input_grad.data(), &[3.0]);
        assert!(g.param_grads[0].is_none());
        assert!(g.param_grads[4].is_some());
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut m = dense_model(1.0);
        // conv bias -1 makes every relu input negative
        m.params_mut(0).unwrap().1[0] = -1.0;
        let trace = forward_normalized(&m, Tensor::zeros(&[1, 2, 2]).unwrap()).unwrap();
        assert!(trace.input(1).data().iter().all(|&v| v == -1.0));
        let g = backward_full(&m, &trace, &[1.0], None).unwrap();
        assert!(g.input_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_grad_length_checked() {
        let m = dense_model(1.0);
        let trace = forward_normalized(&m, Tensor::zeros(&[1, 2, 2]).unwrap()).unwrap();
        assert!(backward_full(&m, &trace, &[1.0, 2.0], None).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&[0.5, 0.5], 0).unwrap();
        assert!((ce.loss - core::f64::consts::LN_2).abs() < 1e-7);

        let ce = cross_entropy(&[1.0, 0.0], 0).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert_eq!(ce.logit_grad, [0.0, 0.0]);

        let ce = cross_entropy(&[0.25, 0.75], 1).unwrap();
        assert!((ce.loss - 0.287_682_072_451_780_9).abs() < 1e-6);
        assert_eq!(ce.logit_grad, [0.25, -0.25]);

        let ce = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!(ce.clamped);
        assert!((ce.loss - 27.631_021_115_928_547).abs() < 1e-9);

        assert!(cross_entropy(&[1.0], 3).is_err());
    }

    #[test]
    fn sgd_examples() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
        };
        let (mut w, mut v) = ([1.0f32], [0.0f32]);
        sgd_step(&mut w, &[1.0], &mut v, cfg).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-7);

        let (mut w, mut v) = ([0.3f32, -2.0], [0.0f32; 2]);
        sgd_step(
            &mut w,
            &[0.0, 0.0],
            &mut v,
            SgdConfig {
                learning_rate: 0.5,
                momentum: 0.9,
            },
        )
        .unwrap();
        assert_eq!(w, [0.3, -2.0]);

        // hand iteration: v1 = -0.1, w1 = -0.1; v2 = -0.09 - 0.1 = -0.19, w2 = -0.29
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
        };
        let (mut w, mut v) = ([0.0f32], [0.0f32]);
        sgd_step(&mut w, &[1.0], &mut v, cfg).unwrap();
        assert!((w[0] + 0.1).abs() < 1e-7);
        sgd_step(&mut w, &[1.0], &mut v, cfg).unwrap();
        assert!((w[0] + 0.29).abs() < 1e-6);

        assert!(sgd_step(&mut [0.0], &[], &mut [0.0], cfg).is_err());
    }
}

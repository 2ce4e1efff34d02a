//! Straightforward f64 reference implementation of the network, written
//! independently of the library kernels.

use flrp_core::network::{LayerSpec, ModelDef};

/// Parameters of every layer as f64 (`None` for layers without weights).
pub type RefParams = Vec<Option<(Vec<f64>, Vec<f64>)>>;

pub fn ref_params(model: &ModelDef) -> RefParams {
    model
        .all_params()
        .iter()
        .map(|p| {
            p.as_ref().map(|p| {
                (
                    p.weight.data().iter().map(|&v| f64::from(v)).collect(),
                    p.bias.data().iter().map(|&v| f64::from(v)).collect(),
                )
            })
        })
        .collect()
}

/// ReLU signs and pooling winners seen during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern(pub Vec<Vec<usize>>);

pub struct RefOutput {
    /// Output of every layer, preceded by the input.
    pub acts: Vec<Vec<f64>>,
    pub pattern: Pattern,
}

impl RefOutput {
    pub fn logits(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }
}

pub fn ref_forward(model: &ModelDef, params: &RefParams, input: &[f64]) -> RefOutput {
    let mut shape = model.shapes()[0].clone();
    let mut x = input.to_vec();
    let mut acts = vec![x.clone()];
    let mut pattern = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        x = match *layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
            } => {
                let (w, b) = params[i].as_ref().unwrap();
                let (h, wd) = (shape[1], shape[2]);
                let mut out = vec![0.0; out_channels * h * wd];
                for o in 0..out_channels {
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut s = b[o];
                            for c in 0..in_channels {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let sy = y as i64 + ky as i64 - 1;
                                        let sx = xx as i64 + kx as i64 - 1;
                                        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                            continue;
                                        }
                                        s += w[((o * in_channels + c) * 3 + ky) * 3 + kx]
                                            * x[(c * h + sy as usize) * wd + sx as usize];
                                    }
                                }
                            }
                            out[(o * h + y) * wd + xx] = s;
                        }
                    }
                }
                shape = vec![out_channels, h, wd];
                out
            }
            LayerSpec::Relu => {
                pattern.push(x.iter().map(|&v| usize::from(v > 0.0)).collect());
                x.iter().map(|&v| v.max(0.0)).collect()
            }
            LayerSpec::MaxPool => {
                let (c, h, wd) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / 2, wd / 2);
                let mut out = vec![0.0; c * oh * ow];
                let mut win = Vec::with_capacity(out.len());
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let idx = (ch * h + 2 * y + dy) * wd + 2 * xx + dx;
                                if x[idx] > best.0 {
                                    best = (x[idx], idx);
                                }
                            }
                            out[(ch * oh + y) * ow + xx] = best.0;
                            win.push(best.1);
                        }
                    }
                }
                pattern.push(win);
                shape = vec![c, oh, ow];
                out
            }
            LayerSpec::Flatten => {
                shape = vec![x.len()];
                x
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let (w, b) = params[i].as_ref().unwrap();
                let out = (0..out_features)
                    .map(|o| {
                        b[o] + (0..in_features)
                            .map(|j| w[o * in_features + j] * x[j])
                            .sum::<f64>()
                    })
                    .collect();
                shape = vec![out_features];
                out
            }
            LayerSpec::Softmax => {
                let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|&v| v / z).collect()
            }
        };
        acts.push(x.clone());
    }
    RefOutput {
        acts,
        pattern: Pattern(pattern),
    }
}

/// `sum_k c_k * logit_k` under the reference forward pass.
pub fn ref_objective(
    model: &ModelDef,
    params: &RefParams,
    input: &[f64],
    c: &[f64],
) -> (f64, Pattern) {
    let out = ref_forward(model, params, input);
    let v = out.logits().iter().zip(c).map(|(a, b)| a * b).sum();
    (v, out.pattern)
}

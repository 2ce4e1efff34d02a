//! Per-layer relevance redistribution rules.
//!
//! Relevance is carried in `f64` so that conservation can be checked far
//! below `f32` resolution. Biases never take part in redistribution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{tap_range, KERNEL};
use crate::tensor::Tensor;

/// Relevance scores over a layer's neurons, shaped like its activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Relevance {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Relevance {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.is_empty() {
            return Err(Error::InvalidShape(format!(
                "{:?} with {} relevance values",
                shape,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn abs_total(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub(crate) fn reshaped(mut self, shape: &[usize]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected CHW relevance, got {:?}",
                self.shape
            ))),
        }
    }
}

/// Stabilizer and alpha/beta weights.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RuleConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            alpha: 2.0,
            beta: -1.0,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} must be > 0",
                self.epsilon
            )));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "alpha + beta must be 1, got {} + {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn dense_dims(a: &[f32], weight: &Tensor, r_out: &[f64]) -> Result<(usize, usize)> {
    match weight.shape()[..] {
        [o, i] if i == a.len() && o == r_out.len() => Ok((o, i)),
        _ => Err(Error::ShapeMismatch(format!(
            "dense rule: weight {:?}, {} activations, {} relevances",
            weight.shape(),
            a.len(),
            r_out.len()
        ))),
    }
}

/// Epsilon rule for a dense layer:
/// `R_j = sum_k a_j w_jk / (z_k + eps * sign(z_k)) * R_k`, `sign(0) = +1`.
pub fn lrp_epsilon(a: &[f32], weight: &Tensor, r_out: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let (_, n_in) = dense_dims(a, weight, r_out)?;
    let mut acc = vec![0.0f64; n_in];
    for (row, &r) in weight.data().chunks_exact(n_in).zip(r_out) {
        if r == 0.0 {
            continue;
        }
        let z: f64 = row
            .iter()
            .zip(a)
            .map(|(&w, &x)| f64::from(w) * f64::from(x))
            .sum();
        let s = r / (z + if z >= 0.0 { epsilon } else { -epsilon });
        for (acc, &w) in acc.iter_mut().zip(row) {
            *acc += f64::from(w) * s;
        }
    }
    Ok(acc.iter().zip(a).map(|(&c, &x)| f64::from(x) * c).collect())
}

/// Upper bound on `|sum R_in - sum R_out|` for the epsilon rule.
pub fn epsilon_leak_bound(a: &[f32], weight: &Tensor, r_out: &[f64], epsilon: f64) -> Result<f64> {
    let (_, n_in) = dense_dims(a, weight, r_out)?;
    Ok(weight
        .data()
        .chunks_exact(n_in)
        .zip(r_out)
        .map(|(row, &r)| {
            let z: f64 = row
                .iter()
                .zip(a)
                .map(|(&w, &x)| f64::from(w) * f64::from(x))
                .sum();
            r.abs() * epsilon / (z.abs() + epsilon)
        })
        .sum())
}

/// Redistribution coefficients for one output neuron. Returns the relevance
/// dropped because a branch had nothing to distribute over.
#[inline]
fn ab_coefficients(r: f64, zp: f64, zn: f64, cfg: &RuleConfig) -> (f64, f64, f64) {
    let mut dropped = 0.0;
    let cp = if zp > 0.0 {
        cfg.alpha * r / zp
    } else {
        dropped += cfg.alpha * r;
        0.0
    };
    let cn = if zn < 0.0 {
        cfg.beta * r / zn
    } else {
        dropped += cfg.beta * r;
        0.0
    };
    (cp, cn, dropped)
}

/// Alpha-beta rule for a dense layer. Returns the input relevance and the
/// relevance dropped by neurons lacking positive or negative contributions.
pub fn lrp_alphabeta_dense(
    a: &[f32],
    weight: &Tensor,
    r_out: &[f64],
    cfg: &RuleConfig,
) -> Result<(Vec<f64>, f64)> {
    let (_, n_in) = dense_dims(a, weight, r_out)?;
    let mut out = vec![0.0f64; n_in];
    let mut dropped = 0.0;
    for (row, &r) in weight.data().chunks_exact(n_in).zip(r_out) {
        if r == 0.0 {
            continue;
        }
        let (mut zp, mut zn) = (0.0f64, 0.0f64);
        for (&w, &x) in row.iter().zip(a) {
            let z = f64::from(w) * f64::from(x);
            if z > 0.0 {
                zp += z;
            } else {
                zn += z;
            }
        }
        let (cp, cn, d) = ab_coefficients(r, zp, zn, cfg);
        dropped += d;
        for ((o, &w), &x) in out.iter_mut().zip(row).zip(a) {
            let z = f64::from(w) * f64::from(x);
            *o += z * if z > 0.0 { cp } else { cn };
        }
    }
    Ok((out, dropped))
}

fn conv_dims(
    a: &Tensor,
    weight: &Tensor,
    r_out: &Relevance,
) -> Result<(usize, usize, usize, usize)> {
    let (in_c, h, w) = a.chw()?;
    let (out_c, rh, rw) = r_out.chw()?;
    if weight.shape() != [out_c, in_c, KERNEL, KERNEL] || (rh, rw) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "conv rule: activations {:?}, weight {:?}, relevance {:?}",
            a.shape(),
            weight.shape(),
            r_out.shape()
        )));
    }
    Ok((out_c, in_c, h, w))
}

/// Alpha-beta rule for a 3x3/pad-1 convolution, applied per connection over
/// each output neuron's in-bounds receptive field.
pub fn lrp_alphabeta_conv(
    a: &Tensor,
    weight: &Tensor,
    r_out: &Relevance,
    cfg: &RuleConfig,
) -> Result<(Relevance, f64)> {
    let (out_c, in_c, h, w) = conv_dims(a, weight, r_out)?;
    let plane = h * w;
    let x = a.data();
    let k = weight.data();
    let r = r_out.data();

    // positive / negative pre-activation sums per output neuron
    let mut zp = vec![0.0f64; out_c * plane];
    let mut zn = vec![0.0f64; out_c * plane];
    for o in 0..out_c {
        let (zpo, zno) = (
            &mut zp[o * plane..(o + 1) * plane],
            &mut zn[o * plane..(o + 1) * plane],
        );
        for i in 0..in_c {
            let src = &x[i * plane..(i + 1) * plane];
            for ky in 0..KERNEL {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..KERNEL {
                    let (x0, x1) = tap_range(kx, w);
                    let wv = f64::from(k[((o * in_c + i) * KERNEL + ky) * KERNEL + kx]);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        for xx in x0..x1 {
                            let z = wv * f64::from(src[sy * w + xx + kx - 1]);
                            if z > 0.0 {
                                zpo[y * w + xx] += z;
                            } else {
                                zno[y * w + xx] += z;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut dropped = 0.0;
    let mut cp = vec![0.0f64; out_c * plane];
    let mut cn = vec![0.0f64; out_c * plane];
    for n in 0..out_c * plane {
        if r[n] != 0.0 {
            let (p, q, d) = ab_coefficients(r[n], zp[n], zn[n], cfg);
            cp[n] = p;
            cn[n] = q;
            dropped += d;
        }
    }

    let mut out = vec![0.0f64; in_c * plane];
    for i in 0..in_c {
        let src = &x[i * plane..(i + 1) * plane];
        let dst = &mut out[i * plane..(i + 1) * plane];
        for o in 0..out_c {
            let (cpo, cno) = (
                &cp[o * plane..(o + 1) * plane],
                &cn[o * plane..(o + 1) * plane],
            );
            for ky in 0..KERNEL {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..KERNEL {
                    let (x0, x1) = tap_range(kx, w);
                    let wv = f64::from(k[((o * in_c + i) * KERNEL + ky) * KERNEL + kx]);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        for xx in x0..x1 {
                            let s = sy * w + xx + kx - 1;
                            let z = wv * f64::from(src[s]);
                            dst[s] += z * if z > 0.0 {
                                cpo[y * w + xx]
                            } else {
                                cno[y * w + xx]
                            };
                        }
                    }
                }
            }
        }
    }
    Ok((Relevance::new(a.shape().to_vec(), out)?, dropped))
}

/// Flat rule for a 3x3/pad-1 convolution: each output neuron's relevance is
/// split equally over its in-bounds inputs across all `in_channels`.
/// Weights and activations are ignored.
pub fn lrp_flat(in_channels: usize, r_out: &Relevance) -> Result<Relevance> {
    let (_, h, w) = r_out.chw()?;
    if in_channels == 0 {
        return Err(Error::InvalidShape(
            "flat rule with zero input channels".into(),
        ));
    }
    let plane = h * w;
    let taps =
        |p: usize, extent: usize| -> usize { 1 + usize::from(p > 0) + usize::from(p + 1 < extent) };
    // per-position share, summed over output channels
    let mut share = vec![0.0f64; plane];
    for chunk in r_out.data().chunks_exact(plane) {
        for (s, &r) in share.iter_mut().zip(chunk) {
            *s += r;
        }
    }
    for y in 0..h {
        for x in 0..w {
            share[y * w + x] /= (in_channels * taps(y, h) * taps(x, w)) as f64;
        }
    }
    let mut spread = vec![0.0f64; plane];
    for ky in 0..KERNEL {
        let (y0, y1) = tap_range(ky, h);
        for kx in 0..KERNEL {
            let (x0, x1) = tap_range(kx, w);
            for y in y0..y1 {
                let sy = y + ky - 1;
                for xx in x0..x1 {
                    spread[sy * w + xx + kx - 1] += share[y * w + xx];
                }
            }
        }
    }
    let mut out = Vec::with_capacity(in_channels * plane);
    for _ in 0..in_channels {
        out.extend_from_slice(&spread);
    }
    Relevance::new(vec![in_channels, h, w], out)
}

/// Winner-take-all through max pooling: each pooled cell's relevance goes to
/// the input position recorded in `argmax`.
pub fn lrp_pool(in_shape: &[usize], argmax: &[u32], r_out: &Relevance) -> Result<Relevance> {
    if argmax.len() != r_out.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pool indices for {} relevances",
            argmax.len(),
            r_out.data.len()
        )));
    }
    let mut out = Relevance::zeros(in_shape);
    for (&a, &r) in argmax.iter().zip(&r_out.data) {
        let slot = out
            .data
            .get_mut(a as usize)
            .ok_or_else(|| Error::TraceMismatch(format!("pool index {} out of range", a)))?;
        *slot += r;
    }
    Ok(out)
}

/// Uniform split through a 2x2 pooling window (each source gets a quarter).
pub fn lrp_pool_uniform(r_out: &Relevance) -> Result<Relevance> {
    let (c, h, w) = r_out.chw()?;
    let (ih, iw) = (2 * h, 2 * w);
    let mut out = vec![0.0f64; c * ih * iw];
    for ch in 0..c {
        for y in 0..ih {
            for x in 0..iw {
                out[(ch * ih + y) * iw + x] = r_out.data[(ch * h + y / 2) * w + x / 2] / 4.0;
            }
        }
    }
    Relevance::new(vec![c, ih, iw], out)
}

/// ReLU layers pass relevance through unchanged.
pub fn lrp_relu(r: Relevance) -> Relevance {
    r
}

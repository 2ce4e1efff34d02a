//! Forward kernels: 3x3/pad-1 convolution, 2x2 max pooling, dense layers and
//! softmax. All reductions accumulate in `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

/// Row ranges of a 3x3/pad-1 tap: output rows `y` for which `y + d - 1` is
/// inside `0..extent`.
#[inline]
pub(crate) fn tap_range(d: usize, extent: usize) -> (usize, usize) {
    // d in 0..3, offset d - 1 in {-1, 0, 1}
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 {
        extent.saturating_sub(1)
    } else {
        extent
    };
    (lo, hi.max(lo))
}

fn check_conv(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    match weight.shape()[..] {
        [o, i, KERNEL, KERNEL] if i == c => {
            if bias.shape() != [o] {
                return Err(Error::ShapeMismatch(format!(
                    "conv bias {:?} for {} output channels",
                    bias.shape(),
                    o
                )));
            }
            Ok((o, c, h, w))
        }
        _ => Err(Error::ShapeMismatch(format!(
            "conv weight {:?} does not match input channels {}",
            weight.shape(),
            c
        ))),
    }
}

/// `out[o,y,x] = b[o] + sum_{i,dy,dx} in[i, y+dy-1, x+dx-1] * w[o,i,dy,dx]`
/// with zero padding; spatial size is preserved.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out_c, in_c, h, w) = check_conv(input, weight, bias)?;
    let plane = h * w;
    let x = input.data();
    let k = weight.data();
    let mut out = vec![0.0f32; out_c * plane];
    let mut acc = vec![0.0f64; plane];

    for o in 0..out_c {
        acc.iter_mut().for_each(|a| *a = f64::from(bias.data()[o]));
        for i in 0..in_c {
            let src = &x[i * plane..(i + 1) * plane];
            for ky in 0..KERNEL {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..KERNEL {
                    let (x0, x1) = tap_range(kx, w);
                    let wv = f64::from(k[((o * in_c + i) * KERNEL + ky) * KERNEL + kx]);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let dst = &mut acc[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wv * f64::from(v);
                        }
                    }
                }
            }
        }
        for (d, &a) in out[o * plane..(o + 1) * plane].iter_mut().zip(&acc) {
            *d = a as f32;
        }
    }
    Ok(Tensor::from_parts(vec![out_c, h, w], out))
}

/// 2x2/stride-2 max pooling. Returns the pooled tensor and, per pooled cell,
/// the flat index (into the input) of the winning value. Ties go to the first
/// position in row-major window order.
pub fn maxpool_forward(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "max pooling needs even spatial extents, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, oh, ow], out), arg))
}

/// `out[o] = b[o] + sum_i w[o,i] * in[i]`.
pub fn dense_forward(input: &[f32], weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (o, i) = match weight.shape()[..] {
        [o, i] => (o, i),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "dense weight must be OI, got {:?}",
                weight.shape()
            )))
        }
    };
    if input.len() != i || bias.shape() != [o] {
        return Err(Error::ShapeMismatch(format!(
            "dense {}x{} with input {} and bias {:?}",
            o,
            i,
            input.len(),
            bias.shape()
        )));
    }
    let out = weight
        .data()
        .chunks_exact(i)
        .zip(bias.data())
        .map(|(row, &b)| {
            let dot: f64 = row
                .iter()
                .zip(input)
                .map(|(&w, &x)| f64::from(w) * f64::from(x))
                .sum();
            (f64::from(b) + dot) as f32
        })
        .collect();
    Ok(Tensor::from_parts(vec![o], out))
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax of an empty vector".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| libm::exp(f64::from(v) - f64::from(max)))
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / total) as f32).collect())
}

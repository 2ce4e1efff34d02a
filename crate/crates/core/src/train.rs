//! Minibatch momentum-SGD training of the toy detector with image
//! augmentation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grad::{backward_impl, cross_entropy, sgd_step, SgdConfig};
use crate::image::{round_u8, RgbImage};
use crate::label::Label;
use crate::network::{build_toy, forward_full, forward_range, normalize, ModelDef};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AugmentConfig {
    /// Maximum shift in pixels along each axis; borders are replicated.
    pub jitter: usize,
    pub flip: bool,
    /// Gaussian pixel noise, applied to every image.
    pub noise_std: f64,
    /// Per-pixel probability of salt-and-pepper corruption.
    pub salt_pepper: f64,
    /// Probability of a 3x3 box blur.
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter: 2,
            flip: true,
            noise_std: 1.0,
            salt_pepper: 0.0,
            blur_prob: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            jitter: 0,
            flip: false,
            noise_std: 0.0,
            salt_pepper: 0.0,
            blur_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub width_multiplier: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Rescale each averaged batch gradient to at most this global L2 norm;
    /// 0 disables clipping.
    pub clip_norm: f32,
    /// Number of final epochs whose end-of-epoch weights are averaged into
    /// the returned model; 0 or 1 returns the last weights.
    pub average_epochs: usize,
    /// Images used to rescale the initial weights to unit output variance;
    /// 0 keeps the plain He initialization.
    pub init_batch: usize,
    /// Start from zero-mean convolution kernels.
    pub contrast_init: bool,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Permute the training labels (control experiment).
    pub shuffle_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1,
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            clip_norm: 1.0,
            average_epochs: 5,
            init_batch: 32,
            contrast_init: true,
            seed: 0,
            augment: AugmentConfig::default(),
            shuffle_labels: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.augment;
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.clip_norm >= 0.0
            && self.clip_norm.is_finite()
            && a.noise_std >= 0.0
            && a.noise_std.is_finite()
            && (0.0..=1.0).contains(&a.salt_pepper)
            && (0.0..=1.0).contains(&a.blur_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid training config {:?}",
                self
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

pub fn augment(image: &RgbImage, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (image.width(), image.height());
    let j = cfg.jitter as i64;
    let dx = if j > 0 { rng.random_range(-j..=j) } else { 0 };
    let dy = if j > 0 { rng.random_range(-j..=j) } else { 0 };
    let flip = cfg.flip && rng.random_bool(0.5);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let sx = if flip { w - 1 - x } else { x } as i64 - dx;
            let sy = y as i64 - dy;
            let sx = sx.clamp(0, w as i64 - 1) as usize;
            let sy = sy.clamp(0, h as i64 - 1) as usize;
            out.set(x, y, image.get(sx, sy));
        }
    }
    if cfg.blur_prob > 0.0 && rng.random_bool(cfg.blur_prob) {
        out = box_blur3(&out);
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated std");
        for v in out.data_mut() {
            *v = round_u8(f64::from(*v) + normal.sample(rng));
        }
    }
    if cfg.salt_pepper > 0.0 {
        for p in 0..w * h {
            if rng.random_bool(cfg.salt_pepper) {
                let v = if rng.random_bool(0.5) { 255 } else { 0 };
                out.data_mut()[p * 3..p * 3 + 3].fill(v);
            }
        }
    }
    out
}

/// 3x3 mean over the border-clipped neighbourhood.
fn box_blur3(image: &RgbImage) -> RgbImage {
    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            let mut n = 0;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let px = image.get(xx, yy);
                    for c in 0..3 {
                        acc[c] += u32::from(px[c]);
                    }
                    n += 1;
                }
            }
            out.set(x, y, acc.map(|s| round_u8(f64::from(s) / f64::from(n))));
        }
    }
    out
}

/// Subtracts from every 3x3 kernel slice its mean so convolutions start out
/// blind to flat colour and respond to local contrast only.
pub fn remove_kernel_dc(model: &mut ModelDef) {
    let convs = model.arch().conv_layers();
    for layer in convs {
        if let Some((w, _)) = model.params_mut(layer) {
            for k in w.chunks_exact_mut(9) {
                let mean = k.iter().map(|&v| f64::from(v)).sum::<f64>() / 9.0;
                k.iter_mut().for_each(|v| *v -= mean as f32);
            }
        }
    }
}

/// Rescales each weighted layer, first to last, so that its outputs over
/// `images` have unit standard deviation.
pub fn scale_to_unit_variance(model: &mut ModelDef, images: &[&RgbImage]) -> Result<()> {
    if images.is_empty() {
        return Ok(());
    }
    let inputs: Vec<_> = images
        .iter()
        .map(|im| normalize(model, &im.to_tensor()))
        .collect::<Result<_>>()?;
    let weighted: Vec<usize> = (0..model.layers().len())
        .filter(|&i| model.params(i).is_some())
        .collect();
    for &layer in &weighted {
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for x in &inputs {
            let out = forward_range(model, 0, layer + 1, x.clone())?;
            for &v in out.data() {
                let v = f64::from(v);
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let std = libm::sqrt((sq / n as f64 - mean * mean).max(0.0));
        if std > 1e-8 {
            let (w, _) = model.params_mut(layer).expect("weighted layer");
            let k = (1.0 / std) as f32;
            w.iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(())
}

/// Fraction of images whose most probable class matches the label.
pub fn accuracy(model: &ModelDef, samples: &[(RgbImage, Label)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    let mut correct = 0;
    for (img, label) in samples {
        let trace = forward_full(model, &img.to_tensor())?;
        let p = trace.probabilities();
        let pred = if p[Label::MORPH_CLASS] >= p[1 - Label::MORPH_CLASS] {
            Label::Morph
        } else {
            Label::BonaFide
        };
        correct += usize::from(pred == *label);
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains a fresh toy model. Deterministic in `config.seed`; samples in a
/// batch are reduced in batch order.
///
/// The returned model holds the mean of the end-of-epoch parameters over the
/// last `config.average_epochs` epochs.
pub fn train_toy(
    config: &TrainConfig,
    train: &[(RgbImage, Label)],
    val: Option<&[(RgbImage, Label)]>,
) -> Result<(ModelDef, Vec<EpochLog>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("empty training set".into()));
    }
    let mut model = build_toy(config.width_multiplier)?;
    model.init_he(config.seed);
    if config.contrast_init {
        remove_kernel_dc(&mut model);
    }
    let stride = (train.len() / config.init_batch.max(1)).max(1);
    let probe: Vec<&RgbImage> = train
        .iter()
        .step_by(stride)
        .take(config.init_batch)
        .map(|s| &s.0)
        .collect();
    scale_to_unit_variance(&mut model, &probe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);

    let mut labels: Vec<Label> = train.iter().map(|s| s.1).collect();
    if config.shuffle_labels {
        labels.shuffle(&mut rng);
    }

    let layers: Vec<usize> = (0..model.layers().len())
        .filter(|&i| model.params(i).is_some())
        .collect();
    let sizes: Vec<(usize, usize)> = layers
        .iter()
        .map(|&i| {
            let p = model.params(i).expect("layer with parameters");
            (p.weight.numel(), p.bias.numel())
        })
        .collect();
    let zeros = || -> Vec<(Vec<f32>, Vec<f32>)> {
        sizes
            .iter()
            .map(|&(w, b)| (vec![0.0; w], vec![0.0; b]))
            .collect()
    };
    let mut velocity = zeros();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let mut averaged: Vec<(Vec<f64>, Vec<f64>)> = sizes
        .iter()
        .map(|&(w, b)| (vec![0.0; w], vec![0.0; b]))
        .collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in order.chunks(config.batch_size) {
            let mut acc = zeros();
            for &i in batch {
                let img = augment(&train[i].0, &config.augment, &mut rng);
                let trace = forward_full(&model, &img.to_tensor())
                    .map_err(|_| Error::Diverged { epoch, step })?;
                let probs = trace.probabilities();
                let target = labels[i].class_index();
                let ce = cross_entropy(probs, target)?;
                if !ce.loss.is_finite() {
                    return Err(Error::Diverged { epoch, step });
                }
                loss_sum += ce.loss;
                let pred = usize::from(probs[1] > probs[0]);
                correct += usize::from(pred == target);
                let g = backward_impl(&model, &trace, &ce.logit_grad, None, true)?;
                for (slot, &layer) in acc.iter_mut().zip(&layers) {
                    let p = g.param_grads[layer]
                        .as_ref()
                        .expect("gradient for every weighted layer");
                    slot.0
                        .iter_mut()
                        .zip(p.weight.data())
                        .for_each(|(a, &v)| *a += v);
                    slot.1
                        .iter_mut()
                        .zip(p.bias.data())
                        .for_each(|(a, &v)| *a += v);
                }
            }
            let mut scale = 1.0 / batch.len() as f64;
            if config.clip_norm > 0.0 {
                let sq: f64 = acc
                    .iter()
                    .flat_map(|(w, b)| w.iter().chain(b))
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum();
                let norm = libm::sqrt(sq) * scale;
                if norm > f64::from(config.clip_norm) {
                    scale *= f64::from(config.clip_norm) / norm;
                }
            }
            let scale = scale as f32;
            let sgd = SgdConfig {
                learning_rate: config.learning_rate,
                momentum: config.momentum,
            };
            for ((slot, vel), &layer) in acc.iter_mut().zip(velocity.iter_mut()).zip(&layers) {
                slot.0.iter_mut().for_each(|v| *v *= scale);
                slot.1.iter_mut().for_each(|v| *v *= scale);
                let (w, b) = model.params_mut(layer).expect("weighted layer");
                sgd_step(w, &slot.0, &mut vel.0, sgd)?;
                sgd_step(b, &slot.1, &mut vel.1, sgd)?;
                if !w.iter().chain(b.iter()).all(|v| v.is_finite()) {
                    return Err(Error::Diverged { epoch, step });
                }
            }
            step += 1;
        }
        let val_accuracy = match val {
            Some(v) => Some(accuracy(&model, v)?),
            None => None,
        };
        if epoch + config.average_epochs >= config.epochs {
            for (slot, &layer) in averaged.iter_mut().zip(&layers) {
                let p = model.params(layer).expect("weighted layer");
                slot.0
                    .iter_mut()
                    .zip(p.weight.data())
                    .for_each(|(a, &v)| *a += f64::from(v));
                slot.1
                    .iter_mut()
                    .zip(p.bias.data())
                    .for_each(|(a, &v)| *a += f64::from(v));
            }
        }
        logs.push(EpochLog {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
        });
    }
    let k = config.average_epochs.clamp(1, config.epochs) as f64;
    if config.average_epochs > 1 {
        for (slot, &layer) in averaged.iter().zip(&layers) {
            let (w, b) = model.params_mut(layer).expect("weighted layer");
            w.iter_mut()
                .zip(&slot.0)
                .for_each(|(v, &a)| *v = (a / k) as f32);
            b.iter_mut()
                .zip(&slot.1)
                .for_each(|(v, &a)| *v = (a / k) as f32);
        }
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augment_none_is_identity() {
        let img = RgbImage::new(4, 4, (0..48).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&img, &AugmentConfig::none(), &mut rng), img);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = RgbImage::filled(5, 5, [10, 20, 30]).unwrap();
        assert_eq!(box_blur3(&img), img);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            momentum: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(train_toy(&TrainConfig::default(), &[], None).is_err());
    }
}

//! Substitution-based evaluation of attribution maps: relevance masks,
//! dilation and blur into transparency masks, blending with the aligned
//! source, alpha sweeps, detector error rates and mask-difference statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attribution::{Method, NeuronSelection, RelevanceMap};
use crate::error::{Error, Result};
use crate::grad::cross_entropy;
use crate::image::{round_u8, RgbImage};
use crate::label::Label;
use crate::network::{forward_full, ModelDef};

/// Decision threshold on the morph probability.
pub const DETECTION_THRESHOLD: f64 = 0.5;
pub const DILATION_WINDOW: usize = 3;
pub const BLUR_WINDOW: usize = 5;

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Per-pixel blend weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransparencyMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub method: Option<Method>,
    pub alpha_percent: f64,
}

impl TransparencyMask {
    pub fn uniform(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
            method: None,
            alpha_percent: 0.0,
        }
    }

    pub fn mass(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }
}

/// Number of pixels selected at `alpha_percent`: `ceil(alpha * H * W / 100)`.
pub fn substituted_count(alpha_percent: f64, pixels: usize) -> Result<usize> {
    if !(alpha_percent > 0.0 && alpha_percent <= 100.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha {} outside (0, 100]",
            alpha_percent
        )));
    }
    // the small slack keeps exact products such as 5% of 400 from rounding up
    let k = libm::ceil(alpha_percent * pixels as f64 / 100.0 - 1e-9) as usize;
    Ok(k.clamp(1, pixels))
}

/// Marks the `ceil(alpha * H * W / 100)` highest-scoring pixels. Equal
/// scores are taken in row-major order.
pub fn build_binary_mask(map: &RelevanceMap, alpha_percent: f64) -> Result<BinaryMask> {
    let n = map.data.len();
    let k = substituted_count(alpha_percent, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep scan order
    order.sort_by(|&a, &b| map.data[b].total_cmp(&map.data[a]));
    let mut data = vec![false; n];
    for &i in &order[..k] {
        data[i] = true;
    }
    Ok(BinaryMask {
        width: map.width,
        height: map.height,
        data,
    })
}

/// 3x3 dilation (clipped at the border) followed by a zero-padded 5x5 box
/// blur, clamped to `[0, 1]`.
pub fn refine_mask(mask: &BinaryMask) -> TransparencyMask {
    let (w, h) = (mask.width, mask.height);
    let dilated = box_sum(
        &mask.data.iter().map(|&b| u32::from(b)).collect::<Vec<_>>(),
        w,
        h,
        DILATION_WINDOW / 2,
    );
    let binary: Vec<u32> = dilated.iter().map(|&v| u32::from(v > 0)).collect();
    let blurred = box_sum(&binary, w, h, BLUR_WINDOW / 2);
    let area = (BLUR_WINDOW * BLUR_WINDOW) as f32;
    TransparencyMask {
        width: w,
        height: h,
        data: blurred
            .iter()
            .map(|&s| (s as f32 / area).min(1.0))
            .collect(),
        method: None,
        alpha_percent: 0.0,
    }
}

/// Relevance map -> binary mask -> transparency mask, with provenance.
pub fn transparency_for(
    map: &RelevanceMap,
    alpha_percent: f64,
) -> Result<(TransparencyMask, usize)> {
    let binary = build_binary_mask(map, alpha_percent)?;
    let k = binary.count();
    let mut t = refine_mask(&binary);
    t.method = Some(map.method);
    t.alpha_percent = alpha_percent;
    Ok((t, k))
}

/// Zero-padded sum over a `(2r+1)^2` window.
fn box_sum(src: &[u32], w: usize, h: usize, r: usize) -> Vec<u32> {
    let mut rows = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = src[y * w + lo..=y * w + hi].iter().sum();
        }
    }
    let mut out = vec![0u32; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).sum();
        }
    }
    out
}

/// `(1 - m) * morph + m * source` per channel, rounded half away from zero.
pub fn blend(morph: &RgbImage, source: &RgbImage, mask: &TransparencyMask) -> Result<RgbImage> {
    let dims = (morph.width(), morph.height());
    if (source.width(), source.height()) != dims || (mask.width, mask.height) != dims {
        return Err(Error::ShapeMismatch(format!(
            "blend of {:?} morph, {}x{} source, {}x{} mask",
            dims,
            source.width(),
            source.height(),
            mask.width,
            mask.height
        )));
    }
    let mut out = morph.clone();
    for (p, &m) in mask.data.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let m = f64::from(m);
        for c in 0..3 {
            let i = p * 3 + c;
            let a = f64::from(morph.data()[i]);
            let b = f64::from(source.data()[i]);
            out.data_mut()[i] = round_u8((1.0 - m) * a + m * b);
        }
    }
    Ok(out)
}

/// Alpha list of a sweep. A leading `0` requests the unmodified baseline row.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SubstitutionConfig {
    pub alpha_percent: Vec<f64>,
    /// Keep morphs the detector misses on the unmodified image.
    pub include_undetected: bool,
}

impl Default for SubstitutionConfig {
    fn default() -> Self {
        Self {
            alpha_percent: vec![0.0, 0.5, 1.0, 2.0, 5.0, 10.0],
            include_undetected: false,
        }
    }
}

impl SubstitutionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_percent.is_empty() {
            return Err(Error::InvalidConfig("empty alpha list".into()));
        }
        if self
            .alpha_percent
            .iter()
            .any(|&a| !(0.0..=100.0).contains(&a))
        {
            return Err(Error::InvalidConfig("alpha outside [0, 100]".into()));
        }
        if self.alpha_percent.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "alpha list must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// One morph with its aligned source and one map per method.
#[derive(Debug, Clone)]
pub struct SweepSample {
    pub id: alloc::string::String,
    pub morph: RgbImage,
    pub source: RgbImage,
    pub maps: Vec<RelevanceMap>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub alpha_percent: f64,
    pub mean_nll: f64,
    pub apcer: f64,
    pub morph_neuron_act: f64,
    pub bonafide_neuron_act: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: Method,
    pub rows: Vec<EvalRow>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    nll: f64,
    missed: usize,
    morph_act: f64,
    bona_act: f64,
    n: usize,
}

impl Acc {
    fn add(
        &mut self,
        model: &ModelDef,
        image: &RgbImage,
        sel: (&NeuronSelection, &NeuronSelection),
    ) -> Result<()> {
        let trace = forward_full(model, &image.to_tensor())?;
        let probs = trace.probabilities();
        self.nll += cross_entropy(probs, Label::MORPH_CLASS)?.loss;
        if f64::from(probs[Label::MORPH_CLASS]) < DETECTION_THRESHOLD {
            self.missed += 1;
        }
        let grid = trace.output(model.feature_end());
        self.morph_act += sel.0.mean_activation(grid)?;
        self.bona_act += sel.1.mean_activation(grid)?;
        self.n += 1;
        Ok(())
    }

    fn row(&self, alpha_percent: f64) -> EvalRow {
        let n = self.n as f64;
        EvalRow {
            alpha_percent,
            mean_nll: self.nll / n,
            apcer: self.missed as f64 / n,
            morph_neuron_act: self.morph_act / n,
            bonafide_neuron_act: self.bona_act / n,
            n: self.n,
        }
    }
}

/// Morph probability of an unmodified image.
pub fn morph_probability(model: &ModelDef, image: &RgbImage) -> Result<f64> {
    let trace = forward_full(model, &image.to_tensor())?;
    Ok(f64::from(trace.probabilities()[Label::MORPH_CLASS]))
}

/// For each method and alpha: substitute the top-alpha relevant pixels with
/// the aligned source, rerun the detector, and average loss, miss rate and
/// the mean activation of both neuron selections. Samples are reduced in
/// input order.
pub fn substitution_sweep(
    model: &ModelDef,
    morph_neurons: &NeuronSelection,
    bonafide_neurons: &NeuronSelection,
    samples: &[SweepSample],
    methods: &[Method],
    config: &SubstitutionConfig,
) -> Result<Vec<EvalReport>> {
    config.validate()?;
    let sel = (morph_neurons, bonafide_neurons);

    let mut kept = Vec::with_capacity(samples.len());
    for s in samples {
        if config.include_undetected || morph_probability(model, &s.morph)? >= DETECTION_THRESHOLD {
            kept.push(s);
        }
    }
    if kept.is_empty() {
        return Err(Error::Empty("no morphs left for the sweep".into()));
    }

    let baseline = if config.alpha_percent[0] == 0.0 {
        let mut acc = Acc::default();
        for s in &kept {
            acc.add(model, &s.morph, sel)?;
        }
        Some(acc.row(0.0))
    } else {
        None
    };

    let mut reports = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut rows = Vec::with_capacity(config.alpha_percent.len());
        rows.extend(baseline);
        for &alpha in config.alpha_percent.iter().filter(|&&a| a > 0.0) {
            let mut acc = Acc::default();
            for s in &kept {
                let map = s.maps.iter().find(|m| m.method == method).ok_or_else(|| {
                    Error::Empty(format!("sample '{}' has no {} map", s.id, method))
                })?;
                let (mask, _) = transparency_for(map, alpha)?;
                let image = blend(&s.morph, &s.source, &mask)?;
                acc.add(model, &image, sel)?;
            }
            rows.push(acc.row(alpha));
        }
        reports.push(EvalReport { method, rows });
    }
    Ok(reports)
}

/// APCER (morphs scored below `threshold`) and BPCER (bona fide scored at or
/// above it). A class without samples has rate 0.
pub fn detector_metrics(scores: &[(f64, Label)], threshold: f64) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty("no detector scores".into()));
    }
    let rate = |label: Label, hit: &dyn Fn(f64) -> bool| {
        let (n, k) = scores
            .iter()
            .filter(|(_, l)| *l == label)
            .fold((0usize, 0usize), |(n, k), (s, _)| {
                (n + 1, k + usize::from(hit(*s)))
            });
        if n == 0 {
            0.0
        } else {
            k as f64 / n as f64
        }
    };
    Ok((
        rate(Label::Morph, &|s| s < threshold),
        rate(Label::BonaFide, &|s| s >= threshold),
    ))
}

/// Equal error rate. Thresholds are scanned at the midpoints of the sorted
/// distinct scores (plus one below the minimum and one above the maximum);
/// the first threshold with `APCER == BPCER` wins, otherwise the rate is
/// interpolated linearly between the two thresholds around the crossing.
pub fn detector_eer(scores: &[(f64, Label)]) -> Result<f64> {
    let n_m = scores.iter().filter(|(_, l)| *l == Label::Morph).count();
    let n_b = scores.len() - n_m;
    if n_m == 0 || n_b == 0 {
        return Err(Error::SingleClass(format!(
            "{} morph / {} bona fide scores",
            n_m, n_b
        )));
    }
    let mut morph: Vec<f64> = scores
        .iter()
        .filter(|(_, l)| *l == Label::Morph)
        .map(|s| s.0)
        .collect();
    let mut bona: Vec<f64> = scores
        .iter()
        .filter(|(_, l)| *l == Label::BonaFide)
        .map(|s| s.0)
        .collect();
    morph.sort_by(f64::total_cmp);
    bona.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = morph.iter().chain(&bona).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();

    let rates = |t: f64| {
        let apcer = morph.partition_point(|&s| s < t) as f64 / n_m as f64;
        let bpcer = (n_b - bona.partition_point(|&s| s < t)) as f64 / n_b as f64;
        (apcer, bpcer)
    };
    let mut thresholds = Vec::with_capacity(all.len() + 1);
    thresholds.push(all[0] - 1.0);
    thresholds.extend(all.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    thresholds.push(all[all.len() - 1] + 1.0);

    let mut prev: Option<(f64, f64)> = None;
    for t in thresholds {
        let (a, b) = rates(t);
        if a == b {
            return Ok(a);
        }
        if let Some((pa, pb)) = prev {
            let (d0, d1) = (pa - pb, a - b);
            if d0 < 0.0 && d1 > 0.0 {
                let lambda = -d0 / (d1 - d0);
                return Ok(pa + lambda * (a - pa));
            }
        }
        prev = Some((a, b));
    }
    unreachable!("APCER - BPCER goes from -1 to +1 across the scanned thresholds")
}

/// Summed absolute per-pixel difference between two transparency masks,
/// divided by the substituted pixel count `k`.
pub fn mask_difference(a: &TransparencyMask, b: &TransparencyMask, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::ZeroPixelCount);
    }
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{} masks",
            a.width, a.height, b.width, b.height
        )));
    }
    let total: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .sum();
    Ok(total / k as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskDiffHistogram {
    /// `bins + 1` uniform edges starting at 0.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
    pub methods: Option<(Method, Method)>,
}

/// Uniform histogram over `[0, max(2, max value)]`; the last bin is closed.
pub fn diff_histogram(values: &[f64], bins: usize) -> Result<MaskDiffHistogram> {
    if bins == 0 {
        return Err(Error::InvalidConfig(
            "histogram needs at least one bin".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidConfig(
            "histogram values must be finite and >= 0".into(),
        ));
    }
    let hi = values.iter().copied().fold(2.0f64, f64::max);
    let width = hi / bins as f64;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { width * i as f64 })
        .collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    // Welford
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (i, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let n = values.len();
    Ok(MaskDiffHistogram {
        edges,
        counts,
        mean: if n > 0 { mean } else { 0.0 },
        std: if n > 0 {
            libm::sqrt(m2 / n as f64)
        } else {
            0.0
        },
        n,
        methods: None,
    })
}

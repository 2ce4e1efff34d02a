//! Synthetic face-like images, morphs with planted blending artifacts and
//! known ground-truth masks, subject-disjoint dataset splits, and artifact
//! localization scoring.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attribution::RelevanceMap;
use crate::error::{Error, Result};
use crate::evalkit::{build_binary_mask, BinaryMask};
use crate::image::{round_u8, RgbImage};
use crate::label::Label;

/// Highest spatial frequency of the random fields, in cycles per image.
const FREQ_MAX: f64 = 1.0;
/// Per-channel base level range and peak-to-peak amplitude of the field
/// around it; together they stay inside `[0, 255]`.
const BASE_RANGE: (f64, f64) = (40.0, 215.0);
const FIELD_SPAN: f64 = 60.0;
const BLOB_DEPTH: f64 = 0.1;
const PLACE_JITTER: i32 = 3;
const BLOB_SIZE: (f64, f64) = (0.7, 1.4);

/// Retries per artifact region before giving up.
pub const REGION_RETRIES: usize = 64;

/// Relative eye, eye, nose and mouth centres (x, y) and half-axes (rx, ry)
/// on a 32-pixel canvas.
const LANDMARKS: [(f64, f64, f64, f64); 4] = [
    (0.30, 0.36, 3.0, 2.0),
    (0.70, 0.36, 3.0, 2.0),
    (0.50, 0.56, 1.5, 3.0),
    (0.50, 0.76, 5.0, 1.5),
];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthConfig {
    pub size: usize,
    pub regions: usize,
    pub region_min: usize,
    pub region_max: usize,
    pub texture_seed: u64,
    /// Standard deviation of the per-pixel sensor grain, in 8-bit units.
    pub grain: f64,
    /// Train, test and validation fractions.
    pub splits: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 32,
            regions: 2,
            region_min: 3,
            region_max: 7,
            texture_seed: 0,
            grain: 0.0,
            splits: [0.7, 0.2, 0.1],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidConfig(format!(
                "image size {} below 8",
                self.size
            )));
        }
        if self.region_min == 0 || self.region_min > self.region_max || self.region_max > self.size
        {
            return Err(Error::InvalidConfig(format!(
                "region size range {}..={} does not fit a {} px image",
                self.region_min, self.region_max, self.size
            )));
        }
        if !(self.grain >= 0.0 && self.grain.is_finite()) {
            return Err(Error::InvalidConfig("grain must be finite and >= 0".into()));
        }
        let sum: f64 = self.splits.iter().sum();
        if self.splits.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions {:?} do not sum to 1",
                self.splits
            )));
        }
        Ok(())
    }
}

/// A generated sample with its artifact-free reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image: RgbImage,
    pub label: Label,
    /// The base image; equals `image` for bona fide samples.
    pub source: RgbImage,
    /// Ground-truth artifact pixels; empty for bona fide samples.
    pub mask: BinaryMask,
    pub subject_a: u64,
    pub subject_b: Option<u64>,
}

/// Axis-aligned artifact rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    fn overlaps(&self, o: &Region) -> bool {
        self.x < o.x + o.width
            && o.x < self.x + self.width
            && self.y < o.y + o.height
            && o.y < self.y + self.height
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        (self.x..self.x + self.width).contains(&x) && (self.y..self.y + self.height).contains(&y)
    }

    /// Blend weight of the second image: 1/2 inside, 1/4 on the outermost
    /// ring of regions at least 3 px wide and tall.
    fn weight(&self, x: usize, y: usize) -> f64 {
        let edge = x == self.x
            || y == self.y
            || x + 1 == self.x + self.width
            || y + 1 == self.y + self.height;
        if edge && self.width >= 3 && self.height >= 3 {
            0.25
        } else {
            0.5
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts
        .iter()
        .fold(0x5eed_u64, |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

/// Landmark centres of a subject after its jitter, in pixels, and a
/// per-subject size factor for each blob.
fn landmarks(seed: u64, cfg: &SynthConfig) -> [(f64, f64, f64); 4] {
    let mut rng = rng_for(&[cfg.texture_seed, seed, 2]);
    let s = cfg.size as f64;
    let mut out = [(0.0, 0.0, 1.0); 4];
    for (o, &(lx, ly, _, _)) in out.iter_mut().zip(&LANDMARKS) {
        let jx = rng.random_range(-2i32..=2);
        let jy = rng.random_range(-2i32..=2);
        let size = rng.random_range(BLOB_SIZE.0..BLOB_SIZE.1);
        *o = (lx * s + f64::from(jx), ly * s + f64::from(jy), size);
    }
    out
}

/// A bona fide sample: per channel a random base level plus a low-frequency
/// random field, darkened ellipses at jittered eye/nose/mouth positions and
/// fine sensor grain. Pure in `(seed, config)`.
pub fn gen_genuine(seed: u64, cfg: &SynthConfig) -> Result<SamplePair> {
    cfg.validate()?;
    let n = cfg.size;
    let s = n as f64;
    let mut rng = rng_for(&[cfg.texture_seed, seed, 1]);
    let mut planes = vec![vec![0.0f64; n * n]; 3];
    for plane in planes.iter_mut() {
        let waves = rng.random_range(3..=6);
        for _ in 0..waves {
            let fx: f64 = rng.random_range(-FREQ_MAX..FREQ_MAX);
            let fy: f64 = rng.random_range(-FREQ_MAX..FREQ_MAX);
            let phase: f64 = rng.random_range(0.0..core::f64::consts::TAU);
            let amp: f64 = rng.random_range(0.5..1.0);
            for y in 0..n {
                for x in 0..n {
                    let arg = core::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s + phase;
                    plane[y * n + x] += amp * libm::sin(arg);
                }
            }
        }
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let base: f64 = rng.random_range(BASE_RANGE.0..BASE_RANGE.1);
        plane
            .iter_mut()
            .for_each(|v| *v = base + ((*v - lo) / span - 0.5) * FIELD_SPAN);
    }

    let scale = s / 32.0;
    for (&(cx, cy, size), &(_, _, rx, ry)) in landmarks(seed, cfg).iter().zip(&LANDMARKS) {
        let (rx, ry) = (rx * scale * size, ry * scale * size);
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    for plane in planes.iter_mut() {
                        plane[y * n + x] *= 1.0 - BLOB_DEPTH;
                    }
                }
            }
        }
    }

    let grain = Normal::new(0.0, cfg.grain).map_err(|_| Error::InvalidConfig("grain".into()))?;
    let mut data = vec![0u8; n * n * 3];
    for p in 0..n * n {
        for c in 0..3 {
            data[p * 3 + c] = round_u8(planes[c][p] + grain.sample(&mut rng));
        }
    }
    let image = RgbImage::new(n, n, data)?;
    Ok(SamplePair {
        source: image.clone(),
        image,
        label: Label::BonaFide,
        mask: BinaryMask {
            width: n,
            height: n,
            data: vec![false; n * n],
        },
        subject_a: seed,
        subject_b: None,
    })
}

/// Samples disjoint artifact rectangles centred near the base subject's
/// landmarks.
pub fn sample_regions(seed_a: u64, seed_b: u64, cfg: &SynthConfig) -> Result<Vec<Region>> {
    cfg.validate()?;
    let mut rng = rng_for(&[cfg.texture_seed, seed_a, seed_b, 3]);
    let centres = landmarks(seed_a, cfg);
    let n = cfg.size;
    let mut regions: Vec<Region> = Vec::with_capacity(cfg.regions);
    for r in 0..cfg.regions {
        let mut placed = None;
        for _ in 0..REGION_RETRIES {
            let w = rng.random_range(cfg.region_min..=cfg.region_max);
            let h = rng.random_range(cfg.region_min..=cfg.region_max);
            let (cx, cy, _) = centres[rng.random_range(0..centres.len())];
            let cx = cx + f64::from(rng.random_range(-PLACE_JITTER..=PLACE_JITTER));
            let cy = cy + f64::from(rng.random_range(-PLACE_JITTER..=PLACE_JITTER));
            let x = libm::round(cx - w as f64 / 2.0).clamp(0.0, (n - w) as f64) as usize;
            let y = libm::round(cy - h as f64 / 2.0).clamp(0.0, (n - h) as f64) as usize;
            let cand = Region {
                x,
                y,
                width: w,
                height: h,
            };
            if regions.iter().all(|o| !o.overlaps(&cand)) {
                placed = Some(cand);
                break;
            }
        }
        regions.push(placed.ok_or(Error::RegionSampling(r))?);
    }
    Ok(regions)
}

/// Blends `other` into `base` inside the regions. Pixels outside every
/// region are copied unchanged.
pub fn plant_artifacts(
    base: &RgbImage,
    other: &RgbImage,
    regions: &[Region],
) -> Result<(RgbImage, BinaryMask)> {
    let (w, h) = (base.width(), base.height());
    if (other.width(), other.height()) != (w, h) {
        return Err(Error::ShapeMismatch("morph inputs differ in size".into()));
    }
    let mut out = base.clone();
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(r) = regions.iter().find(|r| r.contains(x, y)) else {
                continue;
            };
            let m = r.weight(x, y);
            let (a, b) = (base.get(x, y), other.get(x, y));
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = round_u8((1.0 - m) * f64::from(a[c]) + m * f64::from(b[c]));
            }
            out.set(x, y, px);
            mask[y * w + x] = true;
        }
    }
    Ok((
        out,
        BinaryMask {
            width: w,
            height: h,
            data: mask,
        },
    ))
}

/// A morph of subject `seed_a` with blending artifacts from `seed_b`; the
/// aligned source is subject `seed_a`'s bona fide image.
pub fn gen_morph_pair(seed_a: u64, seed_b: u64, cfg: &SynthConfig) -> Result<SamplePair> {
    if seed_a == seed_b {
        return Err(Error::InvalidConfig(
            "a morph needs two different subjects".into(),
        ));
    }
    let base = gen_genuine(seed_a, cfg)?.image;
    let other = gen_genuine(seed_b, cfg)?.image;
    let regions = sample_regions(seed_a, seed_b, cfg)?;
    let (image, mask) = plant_artifacts(&base, &other, &regions)?;
    Ok(SamplePair {
        image,
        label: Label::Morph,
        source: base,
        mask,
        subject_a: seed_a,
        subject_b: Some(seed_b),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Val];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

/// One manifest row; the images are re-rendered from the subject ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSpec {
    pub id: String,
    pub label: Label,
    pub subject_a: u64,
    pub subject_b: Option<u64>,
}

impl SampleSpec {
    pub fn render(&self, cfg: &SynthConfig) -> Result<SamplePair> {
        match self.subject_b {
            None => gen_genuine(self.subject_a, cfg),
            Some(b) => gen_morph_pair(self.subject_a, b, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DatasetConfig {
    pub synth: SynthConfig,
    pub genuine: usize,
    pub morphs: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            genuine: 600,
            morphs: 600,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<SampleSpec>,
    pub test: Vec<SampleSpec>,
    pub val: Vec<SampleSpec>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[SampleSpec] {
        match s {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Val => &self.val,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<SampleSpec> {
        match s {
            Split::Train => &mut self.train,
            Split::Test => &mut self.test,
            Split::Val => &mut self.val,
        }
    }
}

/// Counts per split: rounded train and test shares, remainder to val.
fn split_counts(n: usize, f: &[f64; 3]) -> [usize; 3] {
    let train = libm::round(n as f64 * f[0]) as usize;
    let test = (libm::round(n as f64 * f[1]) as usize).min(n - train);
    [train, test, n - train - test]
}

/// Partitions `genuine` subjects 70/20/10 before pairing, then draws each
/// split's morphs from ordered pairs of distinct subjects of that split.
/// Subject ids are `0..genuine`; each subject has one bona fide image.
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.synth.validate()?;
    let mut rng = rng_for(&[cfg.seed, 4]);
    let mut subjects: Vec<u64> = (0..cfg.genuine as u64).collect();
    subjects.shuffle(&mut rng);
    let subj_counts = split_counts(cfg.genuine, &cfg.synth.splits);
    let morph_counts = split_counts(cfg.morphs, &cfg.synth.splits);

    let mut ds = Dataset::default();
    let mut offset = 0;
    let mut morph_id = 0;
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let mut members = subjects[offset..offset + subj_counts[k]].to_vec();
        offset += subj_counts[k];
        let m = morph_counts[k];
        let pairs = members.len() * members.len().saturating_sub(1);
        if m > pairs {
            return Err(Error::DatasetTooSmall(format!(
                "{} morphs requested for the {} split with {} subjects",
                m,
                split.as_str(),
                members.len()
            )));
        }
        members.sort_unstable();
        let rows = ds.split_mut(split);
        for &s in &members {
            rows.push(SampleSpec {
                id: format!("g{:05}", s),
                label: Label::BonaFide,
                subject_a: s,
                subject_b: None,
            });
        }
        let mut used = Vec::with_capacity(m);
        while used.len() < m {
            let a = members[rng.random_range(0..members.len())];
            let b = members[rng.random_range(0..members.len())];
            if a == b || used.contains(&(a, b)) {
                continue;
            }
            used.push((a, b));
            rows.push(SampleSpec {
                id: format!("m{:05}", morph_id),
                label: Label::Morph,
                subject_a: a,
                subject_b: Some(b),
            });
            morph_id += 1;
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    pub hit_rate: f64,
    pub iou: f64,
}

/// Overlap of the top-`alpha` relevance pixels (before dilation) with the
/// ground-truth artifact mask.
pub fn localization_score(
    map: &RelevanceMap,
    truth: &BinaryMask,
    alpha_percent: f64,
) -> Result<Localization> {
    if (map.width, map.height) != (truth.width, truth.height) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} map vs {}x{} truth",
            map.width, map.height, truth.width, truth.height
        )));
    }
    if truth.count() == 0 {
        return Err(Error::EmptyTruth);
    }
    let top = build_binary_mask(map, alpha_percent)?;
    let inter = top
        .data
        .iter()
        .zip(&truth.data)
        .filter(|(&a, &b)| a && b)
        .count();
    let union = top
        .data
        .iter()
        .zip(&truth.data)
        .filter(|(&a, &b)| a || b)
        .count();
    Ok(Localization {
        hit_rate: inter as f64 / top.count() as f64,
        iou: inter as f64 / union as f64,
    })
}

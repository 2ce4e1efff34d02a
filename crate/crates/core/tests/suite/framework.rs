//! Exact properties of the substitution framework.

use flrp_core::attribution::{Method, RelevanceMap};
use flrp_core::evalkit::{
    blend, build_binary_mask, diff_histogram, mask_difference, refine_mask, BinaryMask,
    TransparencyMask,
};
use flrp_core::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALPHAS: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];

fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
}

fn random_map(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RelevanceMap {
    // few distinct levels so equal scores are common
    let levels = rng.random_range(2..20);
    let data = (0..w * h)
        .map(|_| rng.random_range(0..levels) as f32 - rng.random_range(0..2) as f32 * 0.5)
        .collect();
    RelevanceMap::new(h, w, data, Method::Flrp).unwrap()
}

/// `ceil(alpha * pixels / 100)` in integer arithmetic on tenths of a percent.
fn expected_count(alpha: f64, pixels: usize) -> usize {
    let tenths = (alpha * 10.0) as usize;
    assert_eq!(tenths as f64, alpha * 10.0);
    (tenths * pixels).div_ceil(1000)
}

pub fn blend_suite() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..200 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let morph = random_image(w, h, &mut rng);
        let source = random_image(w, h, &mut rng);
        assert_eq!(
            blend(&morph, &source, &TransparencyMask::uniform(w, h, 0.0)).unwrap(),
            morph
        );
        assert_eq!(
            blend(&morph, &source, &TransparencyMask::uniform(w, h, 1.0)).unwrap(),
            source
        );
        let mut mask = TransparencyMask::uniform(w, h, 0.0);
        for v in mask.data.iter_mut() {
            *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        }
        let out = blend(&morph, &source, &mask).unwrap();
        for (p, &m) in mask.data.iter().enumerate() {
            let from = if m == 1.0 { &source } else { &morph };
            assert_eq!(out.data()[p * 3..p * 3 + 3], from.data()[p * 3..p * 3 + 3]);
        }
    }
    "200 image pairs reproduced bitwise".into()
}

pub fn mask_suite() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut sizes = vec![(32, 32), (224, 224), (1, 1), (10, 10), (20, 20), (7, 13)];
    sizes.extend((0..200).map(|_| (rng.random_range(1..80), rng.random_range(1..80))));
    for &(w, h) in &sizes {
        let map = random_map(w, h, &mut rng);
        let mut prev: Option<BinaryMask> = None;
        for alpha in ALPHAS {
            let mask = build_binary_mask(&map, alpha).unwrap();
            assert_eq!(
                mask.count(),
                expected_count(alpha, w * h),
                "{w}x{h} at {alpha}%"
            );
            if let Some(p) = &prev {
                assert!(
                    p.data.iter().zip(&mask.data).all(|(&a, &b)| !a || b),
                    "{w}x{h}: mask at {alpha}% does not contain the smaller one"
                );
            }
            prev = Some(mask);
        }
    }
    format!(
        "{} maps, 5 levels each, counts exact and nested",
        sizes.len()
    )
}

pub fn refine_suite() -> String {
    // one interior pixel: 9 dilated pixels, each spread over 25 blur windows
    let mut mask = BinaryMask {
        width: 15,
        height: 15,
        data: vec![false; 225],
    };
    mask.data[7 * 15 + 7] = true;
    let refined = refine_mask(&mask);
    let zero = TransparencyMask::uniform(15, 15, 0.0);
    let d = mask_difference(&refined, &zero, 1).unwrap();
    assert!((d - 9.0).abs() < 1e-5, "single pixel difference {d}");

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let values: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..3.0)).collect();
    let hist = diff_histogram(&values, 20).unwrap();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!((hist.mean - mean).abs() < 1e-9);
    assert!((hist.std - var.sqrt()).abs() < 1e-9);
    assert_eq!(hist.counts.iter().sum::<usize>(), values.len());
    "mask difference and histogram moments exact".into()
}

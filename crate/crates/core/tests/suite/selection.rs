//! Neuron selection and detector EER against brute-force midpoint scans.

use std::time::Instant;

use flrp_core::attribution::flrp_select_neurons;
use flrp_core::evalkit::detector_eer;
use flrp_core::{Error, Label, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// (threshold, eer) of one channel by linear counting at every midpoint.
fn oracle_threshold(target: &[f32], other: &[f32]) -> (f64, f64) {
    let mut pooled: Vec<f64> = target.iter().chain(other).map(|&v| f64::from(v)).collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(usize, f64)> = None;
    for i in 0..pooled.len() - 1 {
        let t = (pooled[i] + pooled[i + 1]) / 2.0;
        let above = target.iter().filter(|&&v| f64::from(v) > t).count();
        let below = other.iter().filter(|&&v| f64::from(v) < t).count();
        let gap = above.abs_diff(below);
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, t));
        }
        if gap == 0 {
            break;
        }
    }
    let t = best.unwrap().1;
    let at_or_below = target.iter().filter(|&&v| f64::from(v) <= t).count();
    (t, (at_or_below as f64 / target.len() as f64).min(0.5))
}

#[derive(Debug, PartialEq)]
struct Pick {
    y: usize,
    x: usize,
    channel: usize,
    threshold: f64,
    eer: f64,
}

fn oracle_select(
    grids: &[Tensor],
    labels: &[Label],
    target: Label,
) -> Result<Vec<Pick>, (usize, usize)> {
    let shape = grids[0].shape();
    let (c, gh, gw) = (shape[0], shape[1], shape[2]);
    let mut picks = Vec::new();
    for y in 0..gh {
        for x in 0..gw {
            let mut best: Option<Pick> = None;
            for ch in 0..c {
                let idx = (ch * gh + y) * gw + x;
                let split = |want: bool| -> Vec<f32> {
                    grids
                        .iter()
                        .zip(labels)
                        .filter(|(_, &l)| (l == target) == want)
                        .map(|(g, _)| g.data()[idx])
                        .collect()
                };
                let (t_vals, o_vals) = (split(true), split(false));
                let mean =
                    |v: &[f32]| v.iter().map(|&a| f64::from(a)).sum::<f64>() / v.len() as f64;
                if mean(&t_vals) <= mean(&o_vals) {
                    continue;
                }
                let (threshold, eer) = oracle_threshold(&t_vals, &o_vals);
                if best.as_ref().is_none_or(|b| eer < b.eer) {
                    best = Some(Pick {
                        y,
                        x,
                        channel: ch,
                        threshold,
                        eer,
                    });
                }
            }
            picks.push(best.ok_or((y, x))?);
        }
    }
    Ok(picks)
}

fn random_set(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Label>) {
    let c = rng.random_range(1..=4);
    let g = rng.random_range(1..=2);
    let n_t = rng.random_range(2..=25);
    let n_o = rng.random_range(2..=25);
    // integer activations force ties and exact balance points
    let discrete = rng.random_bool(0.5);
    let mut grids = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_t + n_o {
        let is_target = i < n_t;
        let shift = if is_target {
            rng.random_range(0.0..2.0)
        } else {
            0.0
        };
        let data = (0..c * g * g)
            .map(|_| {
                let v: f32 = rng.random_range(0.0..4.0) + shift;
                if discrete {
                    v.floor()
                } else {
                    v
                }
            })
            .collect();
        grids.push(Tensor::new(vec![c, g, g], data).unwrap());
        labels.push(if is_target {
            Label::Morph
        } else {
            Label::BonaFide
        });
    }
    // shuffle the order so target and other interleave
    for i in (1..grids.len()).rev() {
        let j = rng.random_range(0..=i);
        grids.swap(i, j);
        labels.swap(i, j);
    }
    (grids, labels)
}

/// 500 random activation sets; returns a summary.
pub fn selection_suite() -> String {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut compared = 0;
    for case in 0..500 {
        let (grids, labels) = random_set(&mut rng);
        let target = if case % 2 == 0 {
            Label::Morph
        } else {
            Label::BonaFide
        };
        let got = flrp_select_neurons(&grids, &labels, target);
        match oracle_select(&grids, &labels, target) {
            Ok(picks) => {
                let sel = got.unwrap_or_else(|e| panic!("case {case}: {e}"));
                let got: Vec<Pick> = sel
                    .cells
                    .iter()
                    .map(|c| Pick {
                        y: c.y,
                        x: c.x,
                        channel: c.channel,
                        threshold: c.threshold,
                        eer: c.eer,
                    })
                    .collect();
                assert_eq!(got, picks, "case {case}");
                compared += picks.len();
            }
            Err((y, x)) => assert_eq!(got, Err(Error::NoCandidate { y, x }), "case {case}"),
        }
    }
    assert!(compared > 500);
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 30, "took {:?}", elapsed);
    format!(
        "500 sets, {} cells matched exactly, {:.1?}",
        compared, elapsed
    )
}

fn oracle_detector_eer(scores: &[(f64, Label)]) -> f64 {
    let morph: Vec<f64> = scores
        .iter()
        .filter(|s| s.1 == Label::Morph)
        .map(|s| s.0)
        .collect();
    let bona: Vec<f64> = scores
        .iter()
        .filter(|s| s.1 == Label::BonaFide)
        .map(|s| s.0)
        .collect();
    let rates = |t: f64| {
        let apcer = morph.iter().filter(|&&s| s < t).count() as f64 / morph.len() as f64;
        let bpcer = bona.iter().filter(|&&s| s >= t).count() as f64 / bona.len() as f64;
        (apcer, bpcer)
    };
    let mut distinct: Vec<f64> = scores.iter().map(|s| s.0).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut ts = vec![distinct[0] - 1.0];
    for i in 1..distinct.len() {
        ts.push((distinct[i - 1] + distinct[i]) / 2.0);
    }
    ts.push(distinct[distinct.len() - 1] + 1.0);
    let r: Vec<(f64, f64)> = ts.iter().map(|&t| rates(t)).collect();
    if let Some(&(a, _)) = r.iter().find(|(a, b)| a == b) {
        return a;
    }
    // APCER rises and BPCER falls with t, so the difference changes sign once
    let k = r.iter().position(|(a, b)| a > b).unwrap();
    let (pa, pb) = r[k - 1];
    let (a, b) = r[k];
    let lambda = (pb - pa) / ((a - b) - (pa - pb));
    pa + lambda * (a - pa)
}

pub fn detector_eer_suite() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..300 {
        let n = rng.random_range(2..=1000);
        let discrete = rng.random_bool(0.4);
        let mut scores: Vec<(f64, Label)> = (0..n)
            .map(|i| {
                let label = if i % 2 == 0 {
                    Label::Morph
                } else {
                    Label::BonaFide
                };
                let mut s: f64 =
                    rng.random_range(0.0..1.0) + if label == Label::Morph { 0.3 } else { 0.0 };
                if discrete {
                    s = (s * 10.0).floor() / 10.0;
                }
                (s, label)
            })
            .collect();
        if case % 7 == 0 {
            scores.truncate(2);
        }
        let got = detector_eer(&scores).unwrap();
        let want = oracle_detector_eer(&scores);
        assert!((got - want).abs() <= 1e-12, "case {case}: {got} vs {want}");
    }
    "300 score sets matched".into()
}

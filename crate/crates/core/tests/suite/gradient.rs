//! backward_full against central finite differences of an f64 reference
//! network.

use super::oracle::{ref_objective, ref_params};
use flrp_core::grad::backward_full;
use flrp_core::network::{build_toy, forward_normalized};
use flrp_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-6 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Checks sampled input and parameter coordinates; returns a summary.
pub fn gradient_suite() -> String {
    let mut checked = 0;
    let mut skipped = 0;
    let mut worst = 0.0f64;
    for seed in 0..12u64 {
        let mut model = build_toy(1).unwrap();
        model.init_he(seed);
        // nonzero biases so every bias gradient is exercised
        for layer in 0..model.layers().len() {
            if let Some((_, b)) = model.params_mut(layer) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + layer as u64);
                b.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let input: Vec<f32> = (0..3 * 32 * 32)
            .map(|_| rng.random_range(-0.5f32..0.5))
            .collect();
        let c: Vec<f32> = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let trace =
            forward_normalized(&model, Tensor::new(vec![3, 32, 32], input.clone()).unwrap())
                .unwrap();
        let grads = backward_full(&model, &trace, &c, None).unwrap();

        let c64: Vec<f64> = c.iter().map(|&v| f64::from(v)).collect();
        let x64: Vec<f64> = input.iter().map(|&v| f64::from(v)).collect();
        let params = ref_params(&model);
        let (_, base_pattern) = ref_objective(&model, &params, &x64, &c64);

        // input coordinates
        for _ in 0..10 {
            let i = rng.random_range(0..x64.len());
            let (mut xp, mut xm) = (x64.clone(), x64.clone());
            xp[i] += H;
            xm[i] -= H;
            let (fp, pp) = ref_objective(&model, &params, &xp, &c64);
            let (fm, pm) = ref_objective(&model, &params, &xm, &c64);
            if pp != base_pattern || pm != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * H);
            let analytic = f64::from(grads.input_grad.data()[i]);
            let e = rel_err(analytic, numeric);
            worst = worst.max(e);
            assert!(
                e <= TOL,
                "seed {} input {}: analytic {} numeric {}",
                seed,
                i,
                analytic,
                numeric
            );
            checked += 1;
        }

        // parameter coordinates, spread over every weighted layer
        for (layer, g) in grads.param_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            for pick in 0..3 {
                let bias = pick == 2;
                let n = if bias {
                    g.bias.numel()
                } else {
                    g.weight.numel()
                };
                let j = rng.random_range(0..n);
                let shifted = |delta: f64| {
                    let mut p = params.clone();
                    let (w, b) = p[layer].as_mut().unwrap();
                    if bias {
                        b[j] += delta;
                    } else {
                        w[j] += delta;
                    }
                    ref_objective(&model, &p, &x64, &c64)
                };
                let (fp, pp) = shifted(H);
                let (fm, pm) = shifted(-H);
                if pp != base_pattern || pm != base_pattern {
                    skipped += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * H);
                let analytic = f64::from(if bias {
                    g.bias.data()[j]
                } else {
                    g.weight.data()[j]
                });
                let e = rel_err(analytic, numeric);
                worst = worst.max(e);
                assert!(
                    e <= TOL,
                    "seed {} layer {} {} {}: analytic {} numeric {}",
                    seed,
                    layer,
                    if bias { "bias" } else { "weight" },
                    j,
                    analytic,
                    numeric
                );
                checked += 1;
            }
        }
    }
    assert!(checked >= 200, "only {} coordinates checked", checked);
    format!(
        "{} coordinates checked, {} skipped at kinks, worst rel err {:.2e}",
        checked, skipped, worst
    )
}

//! Relevance bookkeeping over random networks, inputs and start relevances.

use std::time::Instant;

use flrp_core::attribution::{
    propagate, sensitivity_stop_layer, Relevance, Rule, RuleAssignment, RuleConfig,
};
use flrp_core::network::{build_toy, forward_full, Architecture, LayerSpec, ModelDef};
use flrp_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-4;

/// conv-relu-pool x3, flatten, dense-relu-dense-softmax with random widths.
fn random_arch(rng: &mut ChaCha8Rng) -> Architecture {
    let size = if rng.random_bool(0.5) { 8 } else { 16 };
    let c: Vec<usize> = (0..4)
        .map(|i| {
            if i == 0 {
                rng.random_range(1..=3)
            } else {
                rng.random_range(1..=6)
            }
        })
        .collect();
    let hidden = rng.random_range(1..=8);
    let mut layers = Vec::new();
    for i in 0..3 {
        layers.push(LayerSpec::Conv {
            in_channels: c[i],
            out_channels: c[i + 1],
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool);
    }
    let grid = size / 8;
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense {
            in_features: c[3] * grid * grid,
            out_features: hidden,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_features: hidden,
            out_features: 2,
        },
        LayerSpec::Softmax,
    ]);
    Architecture {
        layers,
        input_shape: [c[0], size, size],
        means: vec![0.5; c[0]],
        feature_end: 8,
    }
}

fn random_model(seed: u64) -> ModelDef {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = if seed.is_multiple_of(4) {
        build_toy(1).unwrap()
    } else {
        ModelDef::zeroed(random_arch(&mut rng)).unwrap()
    };
    model.init_he(seed);
    // zeroed kernels give neurons with empty positive and negative branches
    for layer in model.arch().conv_layers() {
        let (w, b) = model.params_mut(layer).unwrap();
        for k in w.chunks_mut(9) {
            if rng.random_bool(0.15) {
                k.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    }
    model
}

fn random_image(model: &ModelDef, rng: &mut ChaCha8Rng) -> Tensor {
    let [c, h, w] = model.input_shape();
    let data = (0..c * h * w)
        .map(|_| rng.random_range(0..256) as f32)
        .collect();
    Tensor::new(vec![c, h, w], data).unwrap()
}

fn check_steps(prop: &flrp_core::attribution::Propagation, reference: f64, ctx: &str) {
    for s in &prop.steps {
        let gap = s.total_in + s.dropped - s.total_out;
        match s.rule {
            Rule::Epsilon => {
                let leak = (s.total_in - s.total_out).abs();
                assert!(
                    leak <= s.leak_bound * (1.0 + 1e-9) + 1e-12 * reference,
                    "{ctx}: epsilon leak {leak} above bound {} at layer {}",
                    s.leak_bound,
                    s.layer
                );
            }
            _ => assert!(
                gap.abs() <= REL_TOL * reference,
                "{ctx}: {:?} step at layer {} loses {gap} of {reference}",
                s.rule,
                s.layer
            ),
        }
        if s.rule != Rule::AlphaBeta {
            assert_eq!(s.dropped, 0.0);
        }
    }
}

pub fn run_case(seed: u64) -> usize {
    let model = random_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let trace = forward_full(&model, &random_image(&model, &mut rng)).unwrap();
    let cfg = RuleConfig::default();
    let rules = RuleAssignment::for_model(model.arch());
    let fe = model.feature_end();
    let mut drops = 0;

    // logit start, as in plain LRP
    let logits_layer = model.layers().len() - 2;
    let mut start = Relevance::zeros(&[2]);
    start.data_mut()[1] = f64::from(trace.logits()[1]);
    if start.data()[1].abs() > 1e-6 {
        let p = propagate(&model, &trace, logits_layer, start, &rules, &cfg).unwrap();
        check_steps(
            &p,
            trace.logits()[1].abs().into(),
            &format!("seed {seed} logit"),
        );
        drops += p.steps.iter().filter(|s| s.dropped != 0.0).count();
    }

    // arbitrary non-negative start at the feature grid, as in focused LRP
    let shape = trace.output(fe).shape().to_vec();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                rng.random_range(0.0..2.0)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = data.iter().sum();
    if total > 1e-3 {
        let p = propagate(
            &model,
            &trace,
            fe,
            Relevance::new(shape, data).unwrap(),
            &rules,
            &cfg,
        )
        .unwrap();
        check_steps(&p, total, &format!("seed {seed} grid"));
        drops += p.steps.iter().filter(|s| s.dropped != 0.0).count();
    }

    // flat spreading with uniform pooling, as in sensitivity maps
    let stop = sensitivity_stop_layer(model.arch()).unwrap();
    let shape = trace.output(stop).shape().to_vec();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = data.iter().sum();
    let p = propagate(
        &model,
        &trace,
        stop,
        Relevance::new(shape, data).unwrap(),
        &RuleAssignment::flat_spread(model.arch()),
        &cfg,
    )
    .unwrap();
    check_steps(&p, total, &format!("seed {seed} flat"));
    drops
}

/// Runs `cases` deterministic cases; returns a one-line summary.
pub fn conservation_suite(cases: u64) -> String {
    let t0 = Instant::now();
    let drops: usize = (0..cases).map(run_case).sum();
    // the zeroed kernels must actually exercise the drop accounting
    assert!(drops > 0, "no step dropped relevance");
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "took {:?}", elapsed);
    format!(
        "{} models, {} steps with dropped shares, {:.1?}",
        cases, drops, elapsed
    )
}

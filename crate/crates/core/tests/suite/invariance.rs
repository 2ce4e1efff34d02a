//! Focused maps never look at the classifier.

use flrp_core::attribution::{flrp_full, flrp_select_neurons_partial, lrp_full, RuleConfig};
use flrp_core::network::{build_toy, forward_full, LayerSpec, ModelDef};
use flrp_core::synth::{gen_genuine, gen_morph_pair, SamplePair, SynthConfig};
use flrp_core::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn samples(n: u64, cfg: &SynthConfig) -> Vec<SamplePair> {
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                gen_genuine(i, cfg).unwrap()
            } else {
                gen_morph_pair(i, i + 1000, cfg).unwrap()
            }
        })
        .collect()
}

fn randomize_dense(model: &mut ModelDef, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense: Vec<usize> = (0..model.layers().len())
        .filter(|&i| matches!(model.layers()[i], LayerSpec::Dense { .. }))
        .collect();
    assert!(!dense.is_empty());
    for layer in dense {
        let (w, b) = model.params_mut(layer).unwrap();
        w.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        b.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

pub fn invariance_suite() -> String {
    let cfg = SynthConfig::default();
    let mut model = build_toy(1).unwrap();
    model.init_he(3);
    let fe = model.feature_end();

    let fit = samples(60, &cfg);
    let grids: Vec<_> = fit
        .iter()
        .map(|s| {
            forward_full(&model, &s.image.to_tensor())
                .unwrap()
                .output(fe)
                .clone()
        })
        .collect();
    let labels: Vec<Label> = fit.iter().map(|s| s.label).collect();
    let selection = flrp_select_neurons_partial(&grids, &labels, Label::Morph).unwrap();

    let images: Vec<_> = samples(20, &cfg)
        .into_iter()
        .map(|s| s.image.to_tensor())
        .collect();
    let rules = RuleConfig::default();
    let maps = |m: &ModelDef| {
        images
            .iter()
            .map(|x| {
                let trace = forward_full(m, x).unwrap();
                (
                    lrp_full(m, &trace, 1, &rules).unwrap(),
                    flrp_full(m, &trace, &selection, &rules).unwrap(),
                )
            })
            .collect::<Vec<_>>()
    };
    let before = maps(&model);
    randomize_dense(&mut model, 99);
    let after = maps(&model);

    let mut lrp_changed = 0;
    let mut nonzero = 0;
    for (i, ((l0, f0), (l1, f1))) in before.iter().zip(&after).enumerate() {
        let bits = |m: &flrp_core::attribution::RelevanceMap| {
            m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(
            bits(f0),
            bits(f1),
            "image {i}: focused map changed with the classifier"
        );
        if l0.data != l1.data {
            lrp_changed += 1;
        }
        if f0.data.iter().any(|&v| v != 0.0) {
            nonzero += 1;
        }
    }
    assert_eq!(
        lrp_changed,
        images.len(),
        "plain LRP maps did not depend on the classifier"
    );
    // an all-zero focused map would make the check vacuous
    assert!(nonzero > 0, "every focused map was zero");
    format!(
        "20 images, focused maps bit-identical ({} nonzero), plain LRP changed on {}",
        nonzero, lrp_changed
    )
}

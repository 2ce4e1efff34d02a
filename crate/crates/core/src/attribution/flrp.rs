//! Neuron selection on the last feature-extractor layer and focused LRP.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::rules::{Relevance, RuleConfig};
use super::{propagate, Method, RelevanceMap, RuleAssignment};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::network::{ActivationTrace, ModelDef};
use crate::tensor::Tensor;

/// The chosen channel for one feature-grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SelectedNeuron {
    pub y: usize,
    pub x: usize,
    pub channel: usize,
    pub threshold: f64,
    pub eer: f64,
}

/// One discriminative channel per cell of the `G x G` feature grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NeuronSelection {
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    pub target: Label,
    /// Row-major over the grid. A partial selection skips cells without a
    /// candidate channel.
    pub cells: Vec<SelectedNeuron>,
    /// Fingerprint of the model the selection was computed for; may be empty.
    #[cfg_attr(feature = "serde", serde(default))]
    pub model_hash: String,
}

impl NeuronSelection {
    pub fn check_grid(&self, grid: &Tensor) -> Result<()> {
        let ok = grid.shape() == [self.channels, self.grid_height, self.grid_width]
            && !self.cells.is_empty()
            && self.cells.len() <= self.grid_height * self.grid_width
            && self.cells.iter().all(|c| {
                c.channel < self.channels && c.y < self.grid_height && c.x < self.grid_width
            });
        if ok {
            Ok(())
        } else {
            Err(Error::SelectionMismatch(format!(
                "selection for {}x{}x{} grid, feature output {:?}",
                self.channels,
                self.grid_height,
                self.grid_width,
                grid.shape()
            )))
        }
    }

    /// Activation of each selected neuron, in cell order.
    pub fn activations(&self, grid: &Tensor) -> Result<Vec<f32>> {
        self.check_grid(grid)?;
        let plane = self.grid_height * self.grid_width;
        Ok(self
            .cells
            .iter()
            .map(|c| grid.data()[c.channel * plane + c.y * self.grid_width + c.x])
            .collect())
    }

    pub fn is_complete(&self) -> bool {
        self.cells.len() == self.grid_height * self.grid_width
    }

    /// Mean activation over the selected neurons.
    pub fn mean_activation(&self, grid: &Tensor) -> Result<f64> {
        let acts = self.activations(grid)?;
        Ok(acts.iter().map(|&a| f64::from(a)).sum::<f64>() / acts.len() as f64)
    }
}

/// Threshold at which as many target samples lie above as other samples lie
/// below, and the fraction of target samples at or below it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdFit {
    pub threshold: f64,
    pub eer: f64,
    /// False when no midpoint balanced the counts exactly and the closest
    /// one was taken.
    pub exact: bool,
}

/// Scans midpoints of the pooled sorted values in ascending order and
/// returns the first one where `|{target > t}| == |{other < t}|`.
/// Error rates above 0.5 are reported as 0.5.
pub fn equal_error_threshold(target: &[f32], other: &[f32]) -> Result<ThresholdFit> {
    if target.is_empty() || other.is_empty() {
        return Err(Error::Selection("both classes need samples".into()));
    }
    let sorted = |v: &[f32]| {
        let mut s: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
        s.sort_by(f64::total_cmp);
        s
    };
    let t_sorted = sorted(target);
    let o_sorted = sorted(other);
    let mut pooled: Vec<f64> = t_sorted.iter().chain(&o_sorted).copied().collect();
    pooled.sort_by(f64::total_cmp);

    let n_t = t_sorted.len();
    let counts = |t: f64| {
        let above = n_t - t_sorted.partition_point(|&v| v <= t);
        let below = o_sorted.partition_point(|&v| v < t);
        (above, below)
    };
    let mut best: Option<(usize, f64, usize)> = None;
    for pair in pooled.windows(2) {
        let t = (pair[0] + pair[1]) / 2.0;
        let (above, below) = counts(t);
        if above == below {
            return Ok(fit(t, above, n_t, true));
        }
        let gap = above.abs_diff(below);
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, t, above));
        }
    }
    let (_, t, above) = best.ok_or_else(|| Error::Selection("need at least two values".into()))?;
    Ok(fit(t, above, n_t, false))
}

fn fit(threshold: f64, above: usize, n_t: usize, exact: bool) -> ThresholdFit {
    let eer = ((n_t - above) as f64 / n_t as f64).min(0.5);
    ThresholdFit {
        threshold,
        eer,
        exact,
    }
}

/// Picks, per feature-grid cell, the channel that activates more for
/// `target` (higher mean) and separates the classes with the lowest
/// equal-error rate. Ties go to the lowest channel index.
///
/// `grids` are `C x G x G` outputs of the feature extractor.
pub fn flrp_select_neurons(
    grids: &[Tensor],
    labels: &[Label],
    target: Label,
) -> Result<NeuronSelection> {
    select(grids, labels, target, false)
}

/// Like [`flrp_select_neurons`], but cells where no channel activates more
/// for `target` are left out instead of failing. Errors only when every cell
/// is empty.
pub fn flrp_select_neurons_partial(
    grids: &[Tensor],
    labels: &[Label],
    target: Label,
) -> Result<NeuronSelection> {
    select(grids, labels, target, true)
}

fn select(
    grids: &[Tensor],
    labels: &[Label],
    target: Label,
    skip_empty: bool,
) -> Result<NeuronSelection> {
    if grids.len() != labels.len() {
        return Err(Error::Selection(format!(
            "{} grids for {} labels",
            grids.len(),
            labels.len()
        )));
    }
    let n_target = labels.iter().filter(|&&l| l == target).count();
    let n_other = labels.len() - n_target;
    if n_target < 2 || n_other < 2 {
        return Err(Error::Selection(format!(
            "need >= 2 images per class, got {} target / {} other",
            n_target, n_other
        )));
    }
    let (c, gh, gw) = grids[0].chw()?;
    if let Some(bad) = grids.iter().find(|g| g.shape() != grids[0].shape()) {
        return Err(Error::Selection(format!(
            "grid shapes differ: {:?} vs {:?}",
            grids[0].shape(),
            bad.shape()
        )));
    }
    let plane = gh * gw;
    let mut cells = Vec::with_capacity(plane);
    let mut t_vals = Vec::with_capacity(n_target);
    let mut o_vals = Vec::with_capacity(n_other);
    for y in 0..gh {
        for x in 0..gw {
            let mut best: Option<SelectedNeuron> = None;
            for ch in 0..c {
                t_vals.clear();
                o_vals.clear();
                let idx = ch * plane + y * gw + x;
                for (g, &l) in grids.iter().zip(labels) {
                    if l == target {
                        t_vals.push(g.data()[idx]);
                    } else {
                        o_vals.push(g.data()[idx]);
                    }
                }
                let mean =
                    |v: &[f32]| v.iter().map(|&a| f64::from(a)).sum::<f64>() / v.len() as f64;
                if mean(&t_vals) <= mean(&o_vals) {
                    continue;
                }
                let f = equal_error_threshold(&t_vals, &o_vals)?;
                if best.is_none_or(|b| f.eer < b.eer) {
                    best = Some(SelectedNeuron {
                        y,
                        x,
                        channel: ch,
                        threshold: f.threshold,
                        eer: f.eer,
                    });
                }
            }
            match best {
                Some(b) => cells.push(b),
                None if skip_empty => {}
                None => return Err(Error::NoCandidate { y, x }),
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::NoCandidate { y: 0, x: 0 });
    }
    Ok(NeuronSelection {
        grid_height: gh,
        grid_width: gw,
        channels: c,
        target,
        cells,
        model_hash: String::new(),
    })
}

/// Start relevance: `max(0, a * (1 - 2 * eer))` at each selected neuron,
/// zero elsewhere.
pub fn flrp_initial_relevance(grid: &Tensor, selection: &NeuronSelection) -> Result<Relevance> {
    let acts = selection.activations(grid)?;
    let plane = selection.grid_height * selection.grid_width;
    let mut data = vec![0.0f64; grid.numel()];
    for (cell, &a) in selection.cells.iter().zip(&acts) {
        let r = f64::from(a) * (1.0 - 2.0 * cell.eer);
        data[cell.channel * plane + cell.y * selection.grid_width + cell.x] = r.max(0.0);
    }
    Relevance::new(grid.shape().to_vec(), data)
}

/// Focused LRP: propagation starts at the last feature-extractor pooling
/// layer from the selected neurons; the classifier is never visited.
pub fn flrp_full(
    model: &ModelDef,
    trace: &ActivationTrace,
    selection: &NeuronSelection,
    cfg: &RuleConfig,
) -> Result<RelevanceMap> {
    let fe = model.feature_end();
    let start = flrp_initial_relevance(trace.output(fe), selection)?;
    let prop = propagate(
        model,
        trace,
        fe,
        start,
        &RuleAssignment::for_model(model.arch()),
        cfg,
    )?;
    RelevanceMap::from_input_relevance(&prop.input, Method::Flrp)
}

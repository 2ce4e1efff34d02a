//! The commands behind the CLI, callable as a library.
//!
//! Dataset layout written by [`gen`]:
//!
//! ```text
//! <out>/train.csv, test.csv, val.csv   id,label,image_path,source_path,mask_path,subject_a,subject_b
//! <out>/eval.csv                       id,morph_path,source_path (test morphs)
//! <out>/images/<id>.ppm
//! <out>/sources/<id>.ppm               morphs only; bona fide rows point at their image
//! <out>/masks/<id>.pgm                 0/255 artifact mask
//! ```

use std::path::{Path, PathBuf};

use flrp_core::attribution::{
    colorize, flrp_full, flrp_select_neurons, flrp_select_neurons_partial, lrp_full,
    sensitivity_map, Method, NeuronSelection, RelevanceMap, RuleConfig,
};
use flrp_core::evalkit::{
    detector_eer, detector_metrics, diff_histogram, mask_difference, morph_probability,
    substitution_sweep, transparency_for, BinaryMask, EvalReport, MaskDiffHistogram,
    SubstitutionConfig, SweepSample, DETECTION_THRESHOLD,
};
use flrp_core::network::{forward_full, ModelDef};
use flrp_core::synth::{gen_dataset, localization_score, DatasetConfig, SampleSpec, Split};
use flrp_core::train::{accuracy, train_toy, EpochLog, TrainConfig};
use flrp_core::{Label, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_mask, read_ppm, write_bytes, write_mask, write_ppm, write_relevance};
use crate::manifest::{
    read_csv, resolve, write_csv, write_histogram, write_report, write_train_log, MorphRow,
    SampleRow,
};
use crate::model::{feature_hash, load_model, load_selection_for, save_model, save_selection};

pub const MODEL_FILE: &str = "model.json";
pub const MORPH_SELECTION_FILE: &str = "selection_morph.json";
pub const BONAFIDE_SELECTION_FILE: &str = "selection_bona_fide.json";
pub const EVAL_MANIFEST: &str = "eval.csv";
pub const REPORT_FILE: &str = "report.csv";

pub fn split_manifest(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.csv", split.as_str()))
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub counts: [usize; 3],
    pub eval_manifest: PathBuf,
}

/// Renders a dataset to disk.
pub fn gen(cfg: &DatasetConfig, out: &Path) -> Result<GenOutput> {
    let ds = gen_dataset(cfg).map_err(|e| Error::Usage(e.to_string()))?;
    let mut counts = [0; 3];
    let mut eval_rows = Vec::new();
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let specs = ds.split(split);
        counts[k] = specs.len();
        let mut rows = Vec::with_capacity(specs.len());
        for spec in specs {
            let row = write_sample(cfg, spec, out)?;
            if split == Split::Test && row.label == Label::Morph {
                eval_rows.push(MorphRow {
                    id: row.id.clone(),
                    morph_path: row.image_path.clone(),
                    source_path: row.source_path.clone(),
                });
            }
            rows.push(row);
        }
        write_csv(&split_manifest(out, split), &rows)?;
    }
    let eval_manifest = out.join(EVAL_MANIFEST);
    write_csv(&eval_manifest, &eval_rows)?;
    Ok(GenOutput {
        counts,
        eval_manifest,
    })
}

fn write_sample(cfg: &DatasetConfig, spec: &SampleSpec, out: &Path) -> Result<SampleRow> {
    let pair = spec.render(&cfg.synth)?;
    let image_path = format!("images/{}.ppm", spec.id);
    let mask_path = format!("masks/{}.pgm", spec.id);
    write_ppm(&out.join(&image_path), &pair.image)?;
    write_mask(&out.join(&mask_path), &pair.mask)?;
    let source_path = if spec.label == Label::Morph {
        let p = format!("sources/{}.ppm", spec.id);
        write_ppm(&out.join(&p), &pair.source)?;
        p
    } else {
        image_path.clone()
    };
    Ok(SampleRow {
        id: spec.id.clone(),
        label: spec.label,
        image_path,
        source_path,
        mask_path,
        subject_a: spec.subject_a,
        subject_b: spec.subject_b,
    })
}

/// A manifest row with its images loaded.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub row: SampleRow,
    pub image: RgbImage,
    pub source: RgbImage,
    pub mask: BinaryMask,
}

pub fn load_split(manifest: &Path) -> Result<Vec<LoadedSample>> {
    let rows: Vec<SampleRow> = read_csv(manifest)?;
    rows.into_iter()
        .map(|row| {
            let image = read_ppm(&resolve(manifest, &row.image_path))?;
            let source = read_ppm(&resolve(manifest, &row.source_path))?;
            let mask = read_mask(&resolve(manifest, &row.mask_path))?;
            if (source.width(), source.height()) != (image.width(), image.height())
                || (mask.width, mask.height) != (image.width(), image.height())
            {
                return Err(Error::Data(format!(
                    "{}: sample '{}' has image, source and mask of different sizes",
                    manifest.display(),
                    row.id
                )));
            }
            Ok(LoadedSample {
                row,
                image,
                source,
                mask,
            })
        })
        .collect()
}

fn labelled(samples: &[LoadedSample]) -> Vec<(RgbImage, Label)> {
    samples
        .iter()
        .map(|s| (s.image.clone(), s.row.label))
        .collect()
}

/// Detector quality on a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub accuracy: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub eer: f64,
    pub n: usize,
}

pub fn detector_summary(
    model: &ModelDef,
    samples: &[(RgbImage, Label)],
) -> Result<DetectorSummary> {
    let scores = samples
        .iter()
        .map(|(img, l)| Ok((morph_probability(model, img)?, *l)))
        .collect::<Result<Vec<_>>>()?;
    let (apcer, bpcer) = detector_metrics(&scores, DETECTION_THRESHOLD)?;
    Ok(DetectorSummary {
        accuracy: accuracy(model, samples)?,
        apcer,
        bpcer,
        eer: detector_eer(&scores)?,
        n: samples.len(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model_path: PathBuf,
    /// [`feature_hash`] of the trained model.
    pub model_hash: String,
    pub logs: Vec<EpochLog>,
    /// Detector quality on the test split, when the dataset has one.
    pub test: Option<DetectorSummary>,
}

/// Trains on `<data>/train.csv`, logging validation accuracy when
/// `<data>/val.csv` exists. Writes `model.json`, `model.rten`,
/// `train_log.csv` and `train_summary.json` under `out`.
pub fn train(cfg: &TrainConfig, data: &Path, out: &Path) -> Result<TrainOutput> {
    let train = load_split(&split_manifest(data, Split::Train))?;
    let optional = |split| {
        let p = split_manifest(data, split);
        if p.exists() {
            load_split(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let val = optional(Split::Val)?;
    let test = optional(Split::Test)?;
    let val = val.as_deref().map(labelled);
    let (model, logs) = train_toy(cfg, &labelled(&train), val.as_deref())?;

    let model_path = out.join(MODEL_FILE);
    let model_hash = save_model(&model, &model_path)?;
    write_train_log(&out.join("train_log.csv"), &logs)?;
    let test = match test {
        Some(t) if !t.is_empty() => Some(detector_summary(&model, &labelled(&t))?),
        _ => None,
    };
    let summary = serde_json::json!({ "model_hash": model_hash, "test": test });
    let mut bytes = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    bytes.push(b'\n');
    write_bytes(&out.join("train_summary.json"), &bytes)?;
    Ok(TrainOutput {
        model_path,
        model_hash,
        logs,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct SelectOutput {
    pub morph: NeuronSelection,
    pub bona_fide: NeuronSelection,
    pub morph_path: PathBuf,
    pub bona_fide_path: PathBuf,
}

/// Selects Morph Neurons and Bona-fide Neurons from the training split.
/// Every cell must have a Morph Neuron; cells without a bona-fide-leaning
/// channel are left out of the bona fide selection.
pub fn select(model_path: &Path, data: &Path, out: &Path) -> Result<SelectOutput> {
    let model = load_model(model_path)?;
    let hash = feature_hash(&model)?;
    let train = load_split(&split_manifest(data, Split::Train))?;
    let fe = model.feature_end();
    let mut grids = Vec::with_capacity(train.len());
    for s in &train {
        grids.push(
            forward_full(&model, &s.image.to_tensor())?
                .output(fe)
                .clone(),
        );
    }
    let labels: Vec<Label> = train.iter().map(|s| s.row.label).collect();
    let mut morph = flrp_select_neurons(&grids, &labels, Label::Morph)?;
    let mut bona_fide = flrp_select_neurons_partial(&grids, &labels, Label::BonaFide)?;
    morph.model_hash = hash.clone();
    bona_fide.model_hash = hash;
    let morph_path = out.join(MORPH_SELECTION_FILE);
    let bona_fide_path = out.join(BONAFIDE_SELECTION_FILE);
    save_selection(&morph, &morph_path)?;
    save_selection(&bona_fide, &bona_fide_path)?;
    Ok(SelectOutput {
        morph,
        bona_fide,
        morph_path,
        bona_fide_path,
    })
}

/// Everything needed to compute maps for one model.
pub struct Explainer {
    pub model: ModelDef,
    /// [`feature_hash`] of the model.
    pub model_hash: String,
    pub selection: Option<NeuronSelection>,
    pub rules: RuleConfig,
}

impl Explainer {
    pub fn load(model_path: &Path, selection: Option<&Path>, rules: RuleConfig) -> Result<Self> {
        let model = load_model(model_path)?;
        let model_hash = feature_hash(&model)?;
        let selection = selection
            .map(|p| load_selection_for(p, &model_hash))
            .transpose()?;
        Ok(Self {
            model,
            model_hash,
            selection,
            rules,
        })
    }

    pub fn require(&self, methods: &[Method]) -> Result<()> {
        if methods.contains(&Method::Flrp) && self.selection.is_none() {
            return Err(Error::Data(
                "flrp needs a neuron selection (--selection)".into(),
            ));
        }
        Ok(())
    }

    /// Maps for the morph class, in the order of `methods`.
    pub fn maps(&self, image: &RgbImage, methods: &[Method]) -> Result<Vec<RelevanceMap>> {
        self.require(methods)?;
        let trace = forward_full(&self.model, &image.to_tensor())?;
        methods
            .iter()
            .map(|m| {
                Ok(match m {
                    Method::Lrp => lrp_full(&self.model, &trace, Label::MORPH_CLASS, &self.rules)?,
                    Method::Flrp => {
                        let sel = self.selection.as_ref().expect("checked by require");
                        flrp_full(&self.model, &trace, sel, &self.rules)?
                    }
                    Method::Sensitivity => {
                        sensitivity_map(&self.model, &trace, Label::MORPH_CLASS)?
                    }
                })
            })
            .collect()
    }
}

/// Writes `<id>.<method>.rten` and `<id>.<method>.ppm` for every input.
pub fn explain(
    ex: &Explainer,
    inputs: &[(String, PathBuf)],
    methods: &[Method],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    ex.require(methods)?;
    let mut written = Vec::with_capacity(inputs.len() * methods.len() * 2);
    for (id, path) in inputs {
        let image = read_ppm(path)?;
        for map in ex.maps(&image, methods)? {
            let stem = format!("{}.{}", id, map.method);
            let raw = out.join(format!("{}.rten", stem));
            let heat = out.join(format!("{}.ppm", stem));
            write_relevance(&raw, &map)?;
            write_ppm(&heat, &colorize(&map))?;
            written.push(raw);
            written.push(heat);
        }
    }
    Ok(written)
}

/// Morph/source pairs of an evaluation manifest.
pub fn load_morphs(manifest: &Path) -> Result<Vec<(String, RgbImage, RgbImage)>> {
    let rows: Vec<MorphRow> = read_csv(manifest)?;
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: no morphs listed",
            manifest.display()
        )));
    }
    rows.into_iter()
        .map(|r| {
            let morph = read_ppm(&resolve(manifest, &r.morph_path))?;
            let source = read_ppm(&resolve(manifest, &r.source_path))?;
            if (morph.width(), morph.height()) != (source.width(), source.height()) {
                return Err(Error::Data(format!(
                    "{}: morph and source of '{}' differ in size",
                    manifest.display(),
                    r.id
                )));
            }
            Ok((r.id, morph, source))
        })
        .collect()
}

/// Substitution sweep over the manifest; writes `report.csv` under `out`.
pub fn evaluate(
    ex: &Explainer,
    bona_fide: &NeuronSelection,
    manifest: &Path,
    methods: &[Method],
    config: &SubstitutionConfig,
    out: &Path,
) -> Result<Vec<EvalReport>> {
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let morph_sel = ex.selection.as_ref().ok_or_else(|| {
        Error::Data("evaluation needs the Morph Neuron selection (--selection)".into())
    })?;
    let mut samples = Vec::new();
    for (id, morph, source) in load_morphs(manifest)? {
        let maps = ex.maps(&morph, methods)?;
        samples.push(SweepSample {
            id,
            morph,
            source,
            maps,
        });
    }
    let reports = substitution_sweep(&ex.model, morph_sel, bona_fide, &samples, methods, config)?;
    write_report(&out.join(REPORT_FILE), &reports)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub method_a: Method,
    pub method_b: Method,
    pub alpha: f64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Transparency-mask differences between every pair of `methods` (in list
/// order, duplicates allowed) at `alpha`. Writes `hist_<a>_<b>.csv` per pair
/// and `compare.csv` with the summaries.
pub fn compare(
    ex: &Explainer,
    manifest: &Path,
    methods: &[Method],
    alpha: f64,
    bins: usize,
    out: &Path,
) -> Result<Vec<(PairSummary, MaskDiffHistogram)>> {
    if methods.len() < 2 {
        return Err(Error::Usage("compare needs at least two methods".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..methods.len())
        .flat_map(|i| (i + 1..methods.len()).map(move |j| (i, j)))
        .collect();
    let mut values = vec![Vec::new(); pairs.len()];
    for (_, morph, _) in load_morphs(manifest)? {
        let masks = ex
            .maps(&morph, methods)?
            .iter()
            .map(|m| transparency_for(m, alpha))
            .collect::<flrp_core::Result<Vec<_>>>()?;
        for (v, &(i, j)) in values.iter_mut().zip(&pairs) {
            v.push(mask_difference(&masks[i].0, &masks[j].0, masks[i].1)?);
        }
    }
    let mut results = Vec::with_capacity(pairs.len());
    for (v, &(i, j)) in values.iter().zip(&pairs) {
        let (a, b) = (methods[i], methods[j]);
        let mut hist = diff_histogram(v, bins)?;
        hist.methods = Some((a, b));
        write_histogram(&out.join(format!("hist_{}_{}.csv", a, b)), &hist)?;
        let summary = PairSummary {
            method_a: a,
            method_b: b,
            alpha,
            n: hist.n,
            mean: hist.mean,
            std: hist.std,
        };
        results.push((summary, hist));
    }
    let summaries: Vec<&PairSummary> = results.iter().map(|(s, _)| s).collect();
    write_csv(&out.join("compare.csv"), &summaries)?;
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationSummary {
    pub method: Method,
    pub mean_hit_rate: f64,
    pub mean_iou: f64,
    /// Mean `|truth| / (H * W)`: the hit rate of a uniformly random map.
    pub random_hit_rate: f64,
    pub n: usize,
}

/// Mean top-`alpha` localization of each method on the morphs of `samples`.
pub fn localization(
    ex: &Explainer,
    samples: &[LoadedSample],
    methods: &[Method],
    alpha: f64,
) -> Result<Vec<LocalizationSummary>> {
    let morphs: Vec<&LoadedSample> = samples
        .iter()
        .filter(|s| s.row.label == Label::Morph)
        .collect();
    if morphs.is_empty() {
        return Err(Error::Data("no morphs to localize".into()));
    }
    let mut hit = vec![0.0; methods.len()];
    let mut iou = vec![0.0; methods.len()];
    let mut random = 0.0;
    for s in &morphs {
        for (k, map) in ex.maps(&s.image, methods)?.iter().enumerate() {
            let l = localization_score(map, &s.mask, alpha)?;
            hit[k] += l.hit_rate;
            iou[k] += l.iou;
        }
        random += s.mask.count() as f64 / s.mask.data.len() as f64;
    }
    let n = morphs.len() as f64;
    Ok(methods
        .iter()
        .enumerate()
        .map(|(k, &method)| LocalizationSummary {
            method,
            mean_hit_rate: hit[k] / n,
            mean_iou: iou[k] / n,
            random_hit_rate: random / n,
            n: morphs.len(),
        })
        .collect())
}

//! CSV manifests and reports. Paths inside manifests are relative to the
//! manifest's directory.

use std::path::{Path, PathBuf};

use flrp_core::evalkit::{EvalReport, MaskDiffHistogram};
use flrp_core::train::EpochLog;
use flrp_core::Label;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_bytes;

/// Row of a generated dataset split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub label: Label,
    pub image_path: String,
    pub source_path: String,
    pub mask_path: String,
    pub subject_a: u64,
    pub subject_b: Option<u64>,
}

/// Row of an evaluation manifest: a morph and its artifact-free source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphRow {
    pub id: String,
    pub morph_path: String,
    pub source_path: String,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) => Error::io(path, std::io::Error::new(io.kind(), io.to_string())),
        _ => csv_err(path)(e),
    })?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err(path))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    write_bytes(path, &bytes)
}

/// Resolves a manifest entry against the manifest's directory.
pub fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new("")).join(entry)
}

#[derive(Serialize)]
struct ReportLine {
    method: &'static str,
    alpha: f64,
    mean_nll: f64,
    apcer: f64,
    morph_neuron_act: f64,
    bonafide_neuron_act: f64,
    n: usize,
}

pub fn write_report(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let lines: Vec<ReportLine> = reports
        .iter()
        .flat_map(|r| {
            r.rows.iter().map(move |row| ReportLine {
                method: r.method.as_str(),
                alpha: row.alpha_percent,
                mean_nll: row.mean_nll,
                apcer: row.apcer,
                morph_neuron_act: row.morph_neuron_act,
                bonafide_neuron_act: row.bonafide_neuron_act,
                n: row.n,
            })
        })
        .collect();
    write_csv(path, &lines)
}

#[derive(Serialize)]
struct HistLine {
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
}

pub fn write_histogram(path: &Path, hist: &MaskDiffHistogram) -> Result<()> {
    let lines: Vec<HistLine> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistLine {
            bin_lo: hist.edges[i],
            bin_hi: hist.edges[i + 1],
            count,
        })
        .collect();
    write_csv(path, &lines)
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    loss: f64,
    train_accuracy: f64,
    val_accuracy: Option<f64>,
}

pub fn write_train_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let lines: Vec<LogLine> = logs
        .iter()
        .map(|l| LogLine {
            epoch: l.epoch,
            loss: l.loss,
            train_accuracy: l.train_accuracy,
            val_accuracy: l.val_accuracy,
        })
        .collect();
    write_csv(path, &lines)
}

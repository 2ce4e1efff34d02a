//! Model files (architecture JSON plus a sibling RTEN parameter file) and
//! neuron-selection JSON.

use std::path::{Path, PathBuf};

use flrp_core::attribution::NeuronSelection;
use flrp_core::network::{Architecture, ModelDef};
use flrp_core::rten::{self, TensorFile};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_bytes};

#[derive(Debug, Serialize, Deserialize)]
struct ModelJson {
    #[serde(flatten)]
    arch: Architecture,
    /// Parameter file, relative to the JSON file's directory.
    params: String,
}

/// Parameter file next to `json_path`: same stem, `.rten` extension.
pub fn params_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("rten")
}

fn encode(model: &ModelDef, json_path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let params = params_path(json_path);
    let name = params
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Usage(format!("unusable model path {}", json_path.display())))?
        .to_string();
    let doc = ModelJson {
        arch: model.arch().clone(),
        params: name,
    };
    let mut json = serde_json::to_vec_pretty(&doc).map_err(|e| Error::Json {
        path: json_path.to_path_buf(),
        source: e,
    })?;
    json.push(b'\n');
    let rten = rten::serialize(&model.to_tensor_file()).map_err(|e| Error::core(&params, e))?;
    Ok((json, rten))
}

fn digest(json: &[u8], rten: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update((json.len() as u64).to_le_bytes());
    h.update(json);
    h.update(rten);
    hex::encode(h.finalize())
}

/// Writes `json_path` and its parameter file; returns the model's
/// [`feature_hash`].
pub fn save_model(model: &ModelDef, json_path: &Path) -> Result<String> {
    let (json, rten) = encode(model, json_path)?;
    write_bytes(json_path, &json)?;
    write_bytes(&params_path(json_path), &rten)?;
    feature_hash(model)
}

pub fn load_model(json_path: &Path) -> Result<ModelDef> {
    let json = read_bytes(json_path)?;
    let doc: ModelJson = serde_json::from_slice(&json).map_err(|e| Error::Json {
        path: json_path.to_path_buf(),
        source: e,
    })?;
    let params = json_path
        .parent()
        .unwrap_or(Path::new(""))
        .join(&doc.params);
    let file = rten::deserialize(&read_bytes(&params)?).map_err(|e| Error::core(&params, e))?;
    ModelDef::from_tensor_file(doc.arch, &file).map_err(|e| Error::core(&params, e))
}

/// SHA-256 over everything a neuron selection depends on: input shape,
/// normalization, the layers up to the feature-extractor end and their
/// parameters. Classifier weights do not enter.
pub fn feature_hash(model: &ModelDef) -> Result<String> {
    let fe = model.feature_end();
    let arch = model.arch();
    let head = serde_json::json!({
        "layers": &arch.layers[..=fe],
        "input_shape": arch.input_shape,
        "means": arch.means,
        "feature_end": fe,
    });
    let json = serde_json::to_vec(&head).expect("architecture serializes");
    let mut file = TensorFile::new();
    for (i, prefix) in arch.param_prefixes().iter().enumerate().take(fe + 1) {
        if let (Some(prefix), Some(p)) = (prefix, model.params(i)) {
            file.push(format!("{}.w", prefix), p.weight.clone())?;
            file.push(format!("{}.b", prefix), p.bias.clone())?;
        }
    }
    Ok(digest(&json, &rten::serialize(&file)?))
}

pub fn save_selection(sel: &NeuronSelection, path: &Path) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(sel).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    json.push(b'\n');
    write_bytes(path, &json)
}

pub fn load_selection(path: &Path) -> Result<NeuronSelection> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads a selection and checks it was made for a model with the given
/// [`feature_hash`]; selections without a hash are accepted.
pub fn load_selection_for(path: &Path, hash: &str) -> Result<NeuronSelection> {
    let sel = load_selection(path)?;
    if !sel.model_hash.is_empty() && sel.model_hash != hash {
        return Err(Error::Data(format!(
            "{}: selection was computed for feature extractor {}, not {}",
            path.display(),
            sel.model_hash,
            hash
        )));
    }
    Ok(sel)
}

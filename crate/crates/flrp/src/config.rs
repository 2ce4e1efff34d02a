//! JSON run configuration. Every section is optional; missing fields take
//! their defaults.

use std::path::Path;

use flrp_core::attribution::{Method, RuleConfig};
use flrp_core::synth::DatasetConfig;
use flrp_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Percentages of substituted pixels; a leading 0 adds the baseline row.
    pub alphas: Vec<f64>,
    pub methods: Vec<Method>,
    pub include_undetected: bool,
    /// Alpha at which masks are compared.
    pub compare_alpha: f64,
    pub bins: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 0.5, 1.0, 2.0, 5.0, 10.0],
            methods: Method::ALL.to_vec(),
            include_undetected: false,
            compare_alpha: 1.0,
            bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub rules: RuleConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("{}: {}", path.display(), e)))?;
        serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {}", path.display(), e)))
    }

    /// One seed drives dataset layout, textures and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.dataset.synth.texture_seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: flrp_core::Error| Error::Usage(e.to_string());
        self.dataset.synth.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.rules.validate().map_err(usage)?;
        if self.eval.methods.is_empty() {
            return Err(Error::Usage("no methods requested".into()));
        }
        if self.eval.bins == 0 {
            return Err(Error::Usage("histogram needs at least one bin".into()));
        }
        if !(self.eval.compare_alpha > 0.0 && self.eval.compare_alpha <= 100.0) {
            return Err(Error::Usage(format!(
                "compare alpha {} outside (0, 100]",
                self.eval.compare_alpha
            )));
        }
        Ok(())
    }
}

/// Parses a comma-separated alpha list such as `0,1,5,10`.
pub fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Usage(format!("bad alpha '{}'", a)))
        })
        .collect()
}

/// Parses a comma-separated method list such as `lrp,flrp`.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',')
        .map(|m| {
            m.trim()
                .parse::<Method>()
                .map_err(|e| Error::Usage(e.to_string()))
        })
        .collect()
}

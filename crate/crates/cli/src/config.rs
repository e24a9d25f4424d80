use std::fs;
use std::path::{Path, PathBuf};

use boostdet::detector::{InferenceConfig, ModelConfig, TrainConfig, Variant};
use boostdet::synthdata::{DatasetConfig, FeatureEncoding};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// File name of the effective configuration echoed into every output directory.
pub const ECHO_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Training seeds per ladder row or sweep point.
    pub seeds: usize,
    pub eta_values: Vec<f64>,
    pub omega_values: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            eta_values: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            omega_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// Everything a command needs. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of parameter initialization and of every training random stream.
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    pub data: Option<PathBuf>,
    /// Applied on top of the model / train / inference sections.
    pub variant: Option<Variant>,
    pub dataset: DatasetConfig,
    pub feature_encoding: FeatureEncoding,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::new("io", format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        if self.ablation.seeds == 0 {
            return Err(CliError::new("config", "ablation.seeds must be >= 1"));
        }
        let bad = |v: &[f64]| v.is_empty() || v.iter().any(|x| !(x.is_finite() && *x >= 0.0));
        if bad(&self.ablation.eta_values) || bad(&self.ablation.omega_values) {
            return Err(CliError::new("config", "sweep values must be non-empty, finite and >= 0"));
        }
        check_dataset_fits(&self.dataset, &self.model)
    }

    /// Model, train and inference sections with the variant applied.
    pub fn resolved(&self) -> (ModelConfig, TrainConfig, InferenceConfig) {
        let (mut m, mut t, mut i) = (self.model.clone(), self.train.clone(), self.inference);
        if let Some(v) = self.variant {
            v.apply(&mut m, &mut t, &mut i);
        }
        (m, t, i)
    }

    /// Writes the configuration, defaults included, to `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ECHO_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Grid geometry and class count of a dataset must match the model.
pub fn check_dataset_fits(ds: &DatasetConfig, m: &ModelConfig) -> CliResult<()> {
    let got = (ds.height, ds.width, ds.channels, ds.num_classes);
    let want = (m.image_height, m.image_width, m.input_channels, m.num_classes);
    if got != want {
        return Err(CliError::new(
            "config",
            format!("dataset (h, w, channels, classes) = {got:?} does not fit the model's {want:?}"),
        ));
    }
    Ok(())
}

/// Leaf-level differences between two JSON documents as `path: a -> b` lines.
pub fn json_diff(a: &Value, b: &Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_into("", a, b, &mut out);
    out
}

fn diff_into(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                diff_into(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                diff_into(&format!("{path}[{i}]"), u, v, out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} -> {b}")),
        _ => {}
    }
}

//! Run configuration: one JSON document with `model`, `train`, `data`,
//! `routing`, and `io` sections. Unknown keys are rejected with the key path
//! in the error message.

use std::path::PathBuf;

use camixer::imaging::SyntheticKind;
use camixer::mixer::RouteMode;
use camixer::model::ModelConfig;
use camixer::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic pair family used when no directory is given.
    pub kind: SyntheticKind,
    /// HR patch side for synthetic pairs and directory crops.
    pub size: usize,
    /// Optional directory of HR images (binary PPM); crops are drawn from it
    /// and degraded on the fly.
    pub dir: Option<PathBuf>,
    /// Seed for the held-out validation pair.
    pub val_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { kind: SyntheticKind::HalfSplit, size: 64, dir: None, val_seed: 9999 }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    /// Attention ratio used at inference; defaults to the model's training
    /// target.
    pub gamma_target: Option<f64>,
    pub mode: RouteMode,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig { gamma_target: None, mode: RouteMode::InferTopk }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out_dir: PathBuf::from("run") }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub routing: RoutingConfig,
    pub io: IoConfig,
}

const SECTIONS: [&str; 5] = ["model", "train", "data", "routing", "io"];

fn section<T: serde::de::DeserializeOwned + Default>(
    doc: &serde_json::Map<String, serde_json::Value>,
    name: &str,
) -> Result<T, CliError> {
    match doc.get(name) {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("{name}: {e}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        let doc = doc
            .as_object()
            .ok_or_else(|| CliError::Config("config root must be a JSON object".into()))?;
        for key in doc.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown section `{key}` (expected one of {})",
                    SECTIONS.join(", ")
                )));
            }
        }
        let cfg = RunConfig {
            model: section(doc, "model")?,
            train: section(doc, "train")?,
            data: section(doc, "data")?,
            routing: section(doc, "routing")?,
            io: section(doc, "io")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        if self.data.size % self.model.scale != 0 {
            return Err(CliError::Config(format!(
                "data.size {} not divisible by model.scale {}",
                self.data.size, self.model.scale
            )));
        }
        if self.routing.mode == RouteMode::TrainSoft {
            return Err(CliError::Config("routing.mode: train-soft is not an inference mode".into()));
        }
        if let Some(g) = self.routing.gamma_target {
            if !(0.0..=1.0).contains(&g) {
                return Err(CliError::Config(format!("routing.gamma_target {g} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.routing.gamma_target.unwrap_or(self.model.gamma_target)
    }
}

/// FNV-1a 64-bit hash of the raw config text, recorded in run manifests.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[derive(serde::Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub config_hash: String,
    pub code_version: &'a str,
}

pub fn write_manifest(out_dir: &std::path::Path, command: &str, config_text: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let m = Manifest {
        command,
        config_hash: config_hash(config_text),
        code_version: env!("CARGO_PKG_VERSION"),
    };
    let body = serde_json::to_string_pretty(&m).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), body)
        .map_err(|e| CliError::Data(format!("cannot write manifest: {e}")))?;
    Ok(())
}

use std::path::{Path, PathBuf};

use elnet::data::Orientation;
use elnet::train::{GridSpec, TrainConfig};
use elnet::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Where the exams live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory: either the output of `elnet synth`, or `.npy`
    /// volumes (directly or under `volumes/`) plus a labels CSV.
    pub dir: Option<PathBuf>,
    /// Defaults to `<dir>/labels.csv`.
    pub labels: Option<PathBuf>,
    /// Separate validation set; when absent a stratified hold-out of
    /// `val_fraction` is split off the training set.
    pub val_dir: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub orientation: Orientation,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            labels: None,
            val_dir: None,
            val_labels: None,
            val_fraction: 0.2,
            split_seed: 0,
            orientation: Orientation::Axial,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalConfig {
    pub k: usize,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig { k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub crossval: CrossvalConfig,
    pub grid: Option<GridSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            crossval: CrossvalConfig::default(),
            grid: None,
        }
    }
}

/// Recursively overlays `top` onto `base`; objects merge key by key,
/// anything else is replaced.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `dotted.path=value` override. The value is read as JSON
/// when it parses as JSON and as a plain string otherwise.
fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::InvalidArgument(format!("override {spec:?} has an empty key")));
        }
        let obj = match cur {
            Value::Object(o) => o,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just set")
            }
            _ => return Err(Error::InvalidArgument(format!("cannot set {path}: {key} is not inside an object"))),
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("split always yields at least one key")
}

/// Defaults, then the config file, then overrides (later wins).
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        merge(&mut doc, serde_json::from_str(&text)?);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

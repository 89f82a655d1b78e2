//! Run documents. Each subcommand reads an optional JSON file, applies flag
//! overrides on top, and writes the resolved document next to its outputs.

use std::path::{Path, PathBuf};

use nubot_core::metrics::KernelSpec;
use nubot_core::synthgen::ScenarioId;
use nubot_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Name of the resolved document written into every output directory.
pub const RESOLVED_NAME: &str = "config.json";

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "NUBOT_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    pub scenario: ScenarioId,
    pub seed: u64,
    /// Points per cloud.
    pub n: usize,
    /// Geometry multiplier applied to means, spread and shift.
    pub scale: f64,
    /// Fraction of each cloud written to `*_test.csv`; zero disables.
    pub holdout: f64,
    pub out: PathBuf,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self {
            scenario: ScenarioId::A,
            seed: 0,
            n: 4000,
            scale: 1.0,
            holdout: 0.2,
            out: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Columns {
    /// Defaults to `weight` when the file has such a column.
    pub weight: Option<String>,
    /// Defaults to `label` when the file has such a column.
    pub label: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub source: PathBuf,
    pub target: PathBuf,
    pub columns: Columns,
    pub train: TrainConfig,
    /// Checkpoint to continue from; its training settings win except `steps`.
    pub resume: Option<PathBuf>,
    /// Write `checkpoint_<step>.json` every k steps; zero disables.
    pub checkpoint_every: u64,
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Forward,
    Backward,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictRun {
    pub model: PathBuf,
    pub input: PathBuf,
    pub columns: Columns,
    pub direction: Direction,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    /// Output of `predict`.
    pub prediction: PathBuf,
    /// The points that were fed to `predict`, in the same order.
    pub control: PathBuf,
    pub target: PathBuf,
    pub columns: Columns,
    pub method: String,
    pub scenario: String,
    /// Seeds the split of the target into observed and reference halves.
    pub seed: u64,
    pub kernel: KernelSpec,
    pub out: PathBuf,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            prediction: PathBuf::new(),
            control: PathBuf::new(),
            target: PathBuf::new(),
            columns: Columns::default(),
            method: "nubot".into(),
            scenario: String::new(),
            seed: 0,
            kernel: KernelSpec::default(),
            out: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleRun {
    pub seed: u64,
    pub out: PathBuf,
}

/// Merges `overrides` into `base` key by key, recursing into objects.
fn merge(base: &mut Value, overrides: Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then the file, then flags. `flags` holds dotted keys.
pub fn resolve<T>(file: Option<&Path>, flags: Vec<(&str, Value)>) -> Result<T, CliError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut doc = serde_json::to_value(T::default()).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        if !v.is_object() {
            return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
        }
        merge(&mut doc, v);
    }
    for (key, value) in flags {
        let mut nested = value;
        for part in key.rsplit('.') {
            let mut m = Map::new();
            m.insert(part.to_string(), nested);
            nested = Value::Object(m);
        }
        merge(&mut doc, nested);
    }
    serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

/// `out`, or `$NUBOT_OUT/<command>` when `out` is empty.
pub fn output_dir(out: &Path, command: &str) -> Result<PathBuf, CliError> {
    if !out.as_os_str().is_empty() {
        return Ok(out.to_path_buf());
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => Ok(PathBuf::from(root).join(command)),
        None => Err(CliError::Usage(format!("no output directory: pass --out or set {OUT_ROOT_ENV}"))),
    }
}

pub fn write_resolved<T: Serialize>(dir: &Path, run: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(run).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = dir.join(RESOLVED_NAME);
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_file_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"train": {"steps": 7, "seed": 3}, "checkpoint_every": 2}"#).unwrap();
        let run: TrainRun = resolve(Some(&file), vec![("train.seed", json!(9))]).unwrap();
        assert_eq!(run.train.steps, 7);
        assert_eq!(run.train.seed, 9);
        assert_eq!(run.checkpoint_every, 2);
        assert_eq!(run.train.lr_potentials, 1e-4);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"train": {"stepz": 7}}"#).unwrap();
        assert!(matches!(resolve::<TrainRun>(Some(&file), vec![]), Err(CliError::Usage(_))));
    }
}

//! Run configuration: one JSON document covering data generation, the
//! model, training, evaluation, and the experiment matrix. Defaults are
//! overridden first by an optional config file, then by `--set` flags,
//! and the fully-resolved result is written next to every run's outputs.

use serde::{Deserialize, Serialize};

use wsol_core::augment::Policy;
use wsol_core::cam::Connectivity;
use wsol_core::model::Variant;
use wsol_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 4,
            per_class_train: 100,
            per_class_test: 25,
            side: 32,
            seed: 0,
        }
    }
}

/// Network selection. Classes and input side are normally inferred from
/// the dataset; explicit values win and mismatches only warn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub num_classes: Option<usize>,
    pub input_side: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::Toy10,
            num_classes: None,
            input_side: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fraction of the normalized heatmap's peak used for binarization.
    pub threshold_frac: f64,
    pub connectivity: Connectivity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold_frac: 0.2,
            connectivity: Connectivity::Eight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixSection {
    pub policies: Vec<Policy>,
    pub batch_sizes: Vec<usize>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for MatrixSection {
    fn default() -> Self {
        MatrixSection {
            policies: Policy::TABLE_ORDER.to_vec(),
            batch_sizes: vec![32],
            variants: vec![Variant::Toy10],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub matrix: MatrixSection,
}

/// Deep-merges `patch` into `base`: objects merge per key, everything
/// else replaces wholesale.
fn merge_value(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path like `train.augment.policy` inside a JSON tree,
/// creating intermediate objects as needed. The value text is parsed as
/// JSON when possible and falls back to a bare string, so
/// `--set train.epochs=30` and `--set train.augment.policy=gr` both work.
fn apply_set(root: &mut serde_json::Value, assignment: &str) -> Result<(), String> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("--set expects KEY=VALUE, got `{assignment}`"))?;
    if path.is_empty() {
        return Err(format!("--set has an empty key in `{assignment}`"));
    }
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let mut segments = path.split('.').peekable();
    while let Some(seg) = segments.next() {
        if seg.is_empty() {
            return Err(format!("--set path `{path}` has an empty segment"));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("--set path `{path}` descends into a non-object"))?;
        if segments.peek().is_none() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one segment")
}

/// Resolves the final configuration: defaults, then the config file,
/// then `--set` overrides. All failures here are usage errors.
pub fn resolve(
    config_path: Option<&std::path::Path>,
    sets: &[String],
) -> Result<RunConfig, String> {
    let mut tree = serde_json::to_value(RunConfig::default())
        .expect("default config always serializes");
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let file_value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| format!("config {} is not valid JSON: {e}", path.display()))?;
        if !file_value.is_object() {
            return Err(format!(
                "config {} must be a JSON object",
                path.display()
            ));
        }
        merge_value(&mut tree, file_value);
    }
    for assignment in sets {
        apply_set(&mut tree, assignment)?;
    }
    serde_json::from_value(tree).map_err(|e| format!("invalid configuration: {e}"))
}

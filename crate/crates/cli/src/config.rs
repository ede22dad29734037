//! Experiment configuration: a TOML document with the sections `model`,
//! `topology`, `train`, `data`, `prune` and `output`. Unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub topology: TopologyConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub prune: PruneConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Fully connected layers given by `sizes`.
    Mlp,
    /// The CIFAR-10 convolutional preset scaled by `width`.
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub sizes: Vec<usize>,
    pub width: f64,
    pub bias: bool,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp,
            sizes: vec![784, 300, 300, 10],
            width: 1.0,
            bias: true,
            loss: LossKind::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyMode {
    Dense,
    Pseudo,
    Quasi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Every layer is addressed by the paths.
    Paths,
    /// First and last transitions are fully connected.
    FullyConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignKind {
    Positive,
    EvenOdd,
    Ratio,
    Sobol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub mode: TopologyMode,
    /// Total number of paths; 0 means use `paths_per_input`.
    pub paths: usize,
    pub paths_per_input: usize,
    pub seed: u64,
    /// Sobol' dimension per path-addressed layer; empty means consecutive
    /// dimensions from `start_dim` (or searched, with `skip_bad_dims`).
    pub dims: Vec<usize>,
    pub start_dim: usize,
    pub skip_bad_dims: bool,
    pub scramble_seed: u64,
    pub boundary: Boundary,
    pub sign: SignKind,
    pub sign_ratio: f64,
    pub sign_dim: usize,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            mode: TopologyMode::Dense,
            paths: 0,
            paths_per_input: 0,
            seed: 1,
            dims: Vec::new(),
            start_dim: 0,
            skip_bad_dims: false,
            scramble_seed: 0,
            boundary: Boundary::Paths,
            sign: SignKind::Ratio,
            sign_ratio: 0.5,
            sign_dim: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Uniform,
    Positive,
    Alternating,
    RandomSign,
    AlongPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WInitKind {
    Glorot,
    Wide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// `[epoch, factor]` pairs: the rate is multiplied by `factor` from
    /// `epoch` (0-based) on.
    pub milestones: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init: InitKind,
    pub init_seed: u64,
    pub winit: WInitKind,
    /// Scale every neuron's incoming weights to unit L_p norm after init;
    /// 0 disables.
    pub normalize_init_p: f64,
    pub sign_frozen: bool,
    pub shuffle_seed: u64,
    pub deterministic: bool,
    pub augment_flip: bool,
    pub augment_crop: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            milestones: Vec::new(),
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 32,
            init: InitKind::Uniform,
            init_seed: 1,
            winit: WInitKind::Glorot,
            normalize_init_p: 0.0,
            sign_frozen: false,
            shuffle_seed: 1,
            deterministic: true,
            augment_flip: false,
            augment_crop: 0,
            eval_batch: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
    /// Generated prototype-plus-noise images, for smoke runs.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: DatasetName,
    /// Directory holding the dataset folders; empty means the
    /// `PATHNET_DATA` environment variable.
    pub root: PathBuf,
    /// Use at most this many training examples; 0 means all.
    pub train_limit: usize,
    pub test_limit: usize,
    /// Per-channel standardization with training-set statistics.
    pub standardize: bool,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
    /// Image shape of the synthetic data as `[channels, height, width]`.
    pub synthetic_shape: [usize; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetName::Mnist,
            root: PathBuf::new(),
            train_limit: 0,
            test_limit: 0,
            standardize: false,
            synthetic_train: 1000,
            synthetic_test: 200,
            synthetic_seed: 7,
            synthetic_shape: [1, 28, 28],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Pseudo,
    Sobol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReweightKind {
    Keep,
    Multiplicity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Target fraction of dense edges; used when `paths` is 0.
    pub fraction: f64,
    pub paths: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub scramble_seed: u64,
    pub reweight: ReweightKind,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { fraction: 0.1, paths: 0, sampler: SamplerKind::Pseudo, seed: 1, scramble_seed: 0, reweight: ReweightKind::Keep }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub save_model: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default"), save_model: true }
    }
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))
    }

    /// Reads `path` (or starts from the defaults) and applies `key=value`
    /// overrides such as `train.lr=0.05`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Failure::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Failure::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let m = &self.model;
        if m.architecture == Architecture::Mlp && m.sizes.len() < 2 {
            return Err(Failure::Config("model.sizes needs at least two layers".into()));
        }
        if !(m.width > 0.0) {
            return Err(Failure::Config("model.width must be positive".into()));
        }
        let t = &self.topology;
        if t.mode != TopologyMode::Dense && t.paths == 0 && t.paths_per_input == 0 {
            return Err(Failure::Config("sparse topologies need topology.paths or topology.paths_per_input".into()));
        }
        if !(0.0..=1.0).contains(&t.sign_ratio) {
            return Err(Failure::Config("topology.sign_ratio must lie in [0, 1]".into()));
        }
        if !(self.prune.fraction > 0.0 && self.prune.fraction <= 1.0) {
            return Err(Failure::Config("prune.fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Data directory from the config, falling back to `PATHNET_DATA`.
    pub fn data_root(&self) -> PathBuf {
        if !self.data.root.as_os_str().is_empty() {
            return self.data.root.clone();
        }
        std::env::var_os("PATHNET_DATA").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
    }
}

/// Sets `section.key` in `doc`; the value is read as TOML when it parses
/// and as a plain string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Failure::Config(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = doc;
    for part in &path[..path.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Failure::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1\n"), Err(Failure::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[nonsense]\n"), Err(Failure::Config(_))));
        let err = ExperimentConfig::load(None, &["train.lrr=1".into()]);
        assert!(matches!(err, Err(Failure::Config(_))));
    }

    #[test]
    fn overrides_parse_values() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "train.lr=0.05".into(),
                "topology.mode=quasi".into(),
                "topology.paths = 512".into(),
                "model.sizes=[784, 256, 256, 10]".into(),
                "data.root=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.05);
        assert_eq!(cfg.topology.mode, TopologyMode::Quasi);
        assert_eq!(cfg.topology.paths, 512);
        assert_eq!(cfg.model.sizes, vec![784, 256, 256, 10]);
        assert_eq!(cfg.data.root, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn sparse_mode_needs_paths() {
        assert!(ExperimentConfig::load(None, &["topology.mode=pseudo".into()]).is_err());
    }
}

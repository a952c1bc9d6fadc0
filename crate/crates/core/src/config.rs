//! Flat `key = value` run configuration: strict parsing (unknown keys are
//! errors), canonical serialization, and validation. The serialized form
//! round-trips: `parse(to_text(cfg)) == cfg`.

use crate::losses::LossWeights;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{source}:{line}: {msg}")]
    Line { source: String, line: usize, msg: String },
    #[error("invalid config: {key}: {msg}")]
    Invalid { key: String, msg: String },
    #[error("bad override {0:?}: expected key=value")]
    BadOverride(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub path: Option<String>,
    pub test_path: Option<String>,
    pub feature_count: usize,
    pub scale: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolChoice {
    B0,
    B50,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub kind: ProtocolChoice,
    pub steps: usize,
    pub base_classes: usize,
    pub step_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongtailConfig {
    pub enabled: bool,
    pub factor: f64,
    pub shuffled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryPolicyChoice {
    FixedTotal,
    PerClass,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub policy: MemoryPolicyChoice,
    pub budget: usize,
    pub per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineKind {
    Mdt,
    Mec,
    Maf,
}

impl PipelineKind {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineKind::Mdt => "mdt",
            PipelineKind::Mec => "mec",
            PipelineKind::Maf => "maf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    pub drc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adaptation_epochs: usize,
    pub fusion_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
}

/// Everything a run needs. Defaults follow the full-fidelity training
/// recipe (70/130 epochs, lr 0.1, momentum 0.9, alpha 0.2, beta 4,
/// tro 1.2); example configs scale the epoch counts down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub synthetic: SyntheticConfig,
    pub protocol: ProtocolConfig,
    pub longtail: LongtailConfig,
    pub memory: MemoryConfig,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            dataset: DatasetConfig {
                kind: DatasetKind::Synthetic,
                path: None,
                test_path: None,
                feature_count: 16,
                scale: 1.0,
                test_fraction: 0.2,
            },
            synthetic: SyntheticConfig {
                classes: 10,
                train_per_class: 100,
                test_per_class: 25,
                dim: 16,
                spread: 0.75,
            },
            protocol: ProtocolConfig {
                kind: ProtocolChoice::B0,
                steps: 5,
                base_classes: 50,
                step_size: 10,
            },
            longtail: LongtailConfig { enabled: false, factor: 100.0, shuffled: false },
            memory: MemoryConfig {
                policy: MemoryPolicyChoice::PerClass,
                budget: 2000,
                per_class: 20,
            },
            model: ModelConfig { hidden: vec![32], feature_dim: 16 },
            pipeline: PipelineConfig { kind: PipelineKind::Maf, drc: true },
            train: TrainConfig {
                adaptation_epochs: 70,
                fusion_epochs: 130,
                batch_size: 32,
                base_lr: 0.1,
                momentum: 0.9,
            },
            loss: LossWeights::default(),
        }
    }
}

fn parse_as<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("expected {what}, got {value:?}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got {other:?}")),
    }
}

fn parse_widths(value: &str) -> Result<Vec<usize>, String> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse_as::<usize>(part.trim(), "an integer width"))
        .collect()
}

fn widths_to_string(widths: &[usize]) -> String {
    if widths.is_empty() {
        "none".to_string()
    } else {
        widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse_as(value, "an integer seed")?,
            "dataset.kind" => {
                self.dataset.kind = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "csv" => DatasetKind::Csv,
                    other => return Err(format!("unknown dataset kind {other:?}")),
                }
            }
            "dataset.path" => self.dataset.path = Some(value.to_string()),
            "dataset.test_path" => self.dataset.test_path = Some(value.to_string()),
            "dataset.feature_count" => {
                self.dataset.feature_count = parse_as(value, "a feature count")?
            }
            "dataset.scale" => self.dataset.scale = parse_as(value, "a number")?,
            "dataset.test_fraction" => self.dataset.test_fraction = parse_as(value, "a number")?,
            "synthetic.classes" => self.synthetic.classes = parse_as(value, "a class count")?,
            "synthetic.train_per_class" => {
                self.synthetic.train_per_class = parse_as(value, "a sample count")?
            }
            "synthetic.test_per_class" => {
                self.synthetic.test_per_class = parse_as(value, "a sample count")?
            }
            "synthetic.dim" => self.synthetic.dim = parse_as(value, "a dimension")?,
            "synthetic.spread" => self.synthetic.spread = parse_as(value, "a number")?,
            "protocol" => {
                self.protocol.kind = match value {
                    "b0" => ProtocolChoice::B0,
                    "b50" => ProtocolChoice::B50,
                    other => return Err(format!("unknown protocol {other:?}")),
                }
            }
            "protocol.steps" => self.protocol.steps = parse_as(value, "a step count")?,
            "protocol.base_classes" => {
                self.protocol.base_classes = parse_as(value, "a class count")?
            }
            "protocol.step_size" => self.protocol.step_size = parse_as(value, "a class count")?,
            "longtail.enabled" => self.longtail.enabled = parse_bool(value)?,
            "longtail.factor" => self.longtail.factor = parse_as(value, "a number")?,
            "longtail.mode" => {
                self.longtail.shuffled = match value {
                    "ordered" => false,
                    "shuffled" => true,
                    other => return Err(format!("unknown long-tail mode {other:?}")),
                }
            }
            "memory.policy" => {
                self.memory.policy = match value {
                    "fixed_total" => MemoryPolicyChoice::FixedTotal,
                    "per_class" => MemoryPolicyChoice::PerClass,
                    "disabled" => MemoryPolicyChoice::Disabled,
                    other => return Err(format!("unknown memory policy {other:?}")),
                }
            }
            "memory.budget" => self.memory.budget = parse_as(value, "a budget")?,
            "memory.per_class" => self.memory.per_class = parse_as(value, "a count")?,
            "model.hidden" => self.model.hidden = parse_widths(value)?,
            "model.feature_dim" => self.model.feature_dim = parse_as(value, "a dimension")?,
            "pipeline" => {
                self.pipeline.kind = match value {
                    "mdt" => PipelineKind::Mdt,
                    "mec" => PipelineKind::Mec,
                    "maf" => PipelineKind::Maf,
                    other => return Err(format!("unknown pipeline {other:?}")),
                }
            }
            "pipeline.drc" => self.pipeline.drc = parse_bool(value)?,
            "train.adaptation_epochs" => {
                self.train.adaptation_epochs = parse_as(value, "an epoch count")?
            }
            "train.fusion_epochs" => self.train.fusion_epochs = parse_as(value, "an epoch count")?,
            "train.batch_size" => self.train.batch_size = parse_as(value, "a batch size")?,
            "train.base_lr" => self.train.base_lr = parse_as(value, "a learning rate")?,
            "train.momentum" => self.train.momentum = parse_as(value, "a momentum")?,
            "loss.alpha" => self.loss.alpha = parse_as(value, "a number")?,
            "loss.beta" => self.loss.beta = parse_as(value, "a number")?,
            "loss.temperature" => self.loss.temperature = parse_as(value, "a number")?,
            "loss.tro" => self.loss.tro = parse_as(value, "a number")?,
            "loss.la_enabled" => self.loss.la_enabled = parse_bool(value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Canonical flat form; every key is written, defaults included.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kind = match self.dataset.kind {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Csv => "csv",
        };
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "dataset.kind = {kind}").unwrap();
        if let Some(p) = &self.dataset.path {
            writeln!(s, "dataset.path = {p}").unwrap();
        }
        if let Some(p) = &self.dataset.test_path {
            writeln!(s, "dataset.test_path = {p}").unwrap();
        }
        writeln!(s, "dataset.feature_count = {}", self.dataset.feature_count).unwrap();
        writeln!(s, "dataset.scale = {}", self.dataset.scale).unwrap();
        writeln!(s, "dataset.test_fraction = {}", self.dataset.test_fraction).unwrap();
        writeln!(s, "synthetic.classes = {}", self.synthetic.classes).unwrap();
        writeln!(s, "synthetic.train_per_class = {}", self.synthetic.train_per_class).unwrap();
        writeln!(s, "synthetic.test_per_class = {}", self.synthetic.test_per_class).unwrap();
        writeln!(s, "synthetic.dim = {}", self.synthetic.dim).unwrap();
        writeln!(s, "synthetic.spread = {}", self.synthetic.spread).unwrap();
        let protocol = match self.protocol.kind {
            ProtocolChoice::B0 => "b0",
            ProtocolChoice::B50 => "b50",
        };
        writeln!(s, "protocol = {protocol}").unwrap();
        writeln!(s, "protocol.steps = {}", self.protocol.steps).unwrap();
        writeln!(s, "protocol.base_classes = {}", self.protocol.base_classes).unwrap();
        writeln!(s, "protocol.step_size = {}", self.protocol.step_size).unwrap();
        writeln!(s, "longtail.enabled = {}", self.longtail.enabled).unwrap();
        writeln!(s, "longtail.factor = {}", self.longtail.factor).unwrap();
        writeln!(s, "longtail.mode = {}", if self.longtail.shuffled { "shuffled" } else { "ordered" })
            .unwrap();
        let policy = match self.memory.policy {
            MemoryPolicyChoice::FixedTotal => "fixed_total",
            MemoryPolicyChoice::PerClass => "per_class",
            MemoryPolicyChoice::Disabled => "disabled",
        };
        writeln!(s, "memory.policy = {policy}").unwrap();
        writeln!(s, "memory.budget = {}", self.memory.budget).unwrap();
        writeln!(s, "memory.per_class = {}", self.memory.per_class).unwrap();
        writeln!(s, "model.hidden = {}", widths_to_string(&self.model.hidden)).unwrap();
        writeln!(s, "model.feature_dim = {}", self.model.feature_dim).unwrap();
        writeln!(s, "pipeline = {}", self.pipeline.kind.name()).unwrap();
        writeln!(s, "pipeline.drc = {}", self.pipeline.drc).unwrap();
        writeln!(s, "train.adaptation_epochs = {}", self.train.adaptation_epochs).unwrap();
        writeln!(s, "train.fusion_epochs = {}", self.train.fusion_epochs).unwrap();
        writeln!(s, "train.batch_size = {}", self.train.batch_size).unwrap();
        writeln!(s, "train.base_lr = {}", self.train.base_lr).unwrap();
        writeln!(s, "train.momentum = {}", self.train.momentum).unwrap();
        writeln!(s, "loss.alpha = {}", self.loss.alpha).unwrap();
        writeln!(s, "loss.beta = {}", self.loss.beta).unwrap();
        writeln!(s, "loss.temperature = {}", self.loss.temperature).unwrap();
        writeln!(s, "loss.tro = {}", self.loss.tro).unwrap();
        writeln!(s, "loss.la_enabled = {}", self.loss.la_enabled).unwrap();
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |key: &str, msg: String| Err(ConfigError::Invalid { key: key.into(), msg });
        if !(0.0..=1.0).contains(&self.loss.alpha) {
            return fail("loss.alpha", format!("{} outside [0, 1]", self.loss.alpha));
        }
        if self.loss.beta < 0.0 {
            return fail("loss.beta", "must be non-negative".into());
        }
        if self.loss.temperature <= 0.0 {
            return fail("loss.temperature", "must be positive".into());
        }
        if self.dataset.scale <= 0.0 {
            return fail("dataset.scale", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dataset.test_fraction) {
            return fail("dataset.test_fraction", "must lie in [0, 1)".into());
        }
        if self.dataset.kind == DatasetKind::Csv && self.dataset.path.is_none() {
            return fail("dataset.path", "required for csv datasets".into());
        }
        if self.synthetic.spread < 0.0 {
            return fail("synthetic.spread", "must be non-negative".into());
        }
        if self.longtail.factor < 1.0 {
            return fail("longtail.factor", "must be >= 1".into());
        }
        if self.train.adaptation_epochs == 0 || self.train.fusion_epochs == 0 {
            return fail("train.adaptation_epochs", "stage epoch counts must be positive".into());
        }
        if self.train.batch_size == 0 {
            return fail("train.batch_size", "must be positive".into());
        }
        if self.train.base_lr <= 0.0 {
            return fail("train.base_lr", "must be positive".into());
        }
        if self.model.feature_dim == 0 {
            return fail("model.feature_dim", "must be positive".into());
        }
        Ok(())
    }
}

/// Parses flat `key = value` text. `#` starts a comment; blank lines are
/// skipped; unknown keys, bad values, and constraint violations are errors
/// that name the key and line.
pub fn parse_config_text(text: &str, source: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Line {
                source: source.to_string(),
                line,
                msg: format!("expected key = value, got {content:?}"),
            });
        };
        cfg.set(key.trim(), value.trim()).map_err(|msg| ConfigError::Line {
            source: source.to_string(),
            line,
            msg,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_text(&text, &path.display().to_string())
}

/// Applies `key=value` overrides on top of a parsed config and re-validates.
pub fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> Result<(), ConfigError> {
    for ov in overrides {
        let Some((key, value)) = ov.split_once('=') else {
            return Err(ConfigError::BadOverride(ov.clone()));
        };
        cfg.set(key.trim(), value.trim()).map_err(|msg| ConfigError::Invalid {
            key: key.trim().to_string(),
            msg,
        })?;
    }
    cfg.validate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_applies_defaults() {
        let cfg = parse_config_text("dataset.kind = synthetic\nprotocol = b0\n", "test").unwrap();
        assert_eq!(cfg.loss.alpha, 0.2);
        assert_eq!(cfg.loss.beta, 4.0);
        assert_eq!(cfg.loss.tro, 1.2);
        assert_eq!(cfg.train.adaptation_epochs, 70);
        assert_eq!(cfg.train.fusion_epochs, 130);
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let err = parse_config_text("loss.alpha = 1.5\n", "test").unwrap_err();
        match err {
            ConfigError::Invalid { key, .. } => assert_eq!(key, "loss.alpha"),
            other => panic!("expected invalid alpha, got {other}"),
        }
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = parse_config_text("seed = 3\nbogus.key = 1\n", "cfg").unwrap_err();
        match err {
            ConfigError::Line { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus.key"));
            }
            other => panic!("expected line error, got {other}"),
        }
    }

    #[test]
    fn type_mismatch_is_an_error() {
        let err = parse_config_text("train.batch_size = large\n", "cfg").unwrap_err();
        assert!(matches!(err, ConfigError::Line { line: 1, .. }));
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let cfg = parse_config_text("# full line comment\n\nseed = 9 # trailing\n", "t").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn roundtrip_parse_serialize_parse() {
        let mut cfg = RunConfig::default();
        cfg.set("pipeline", "mdt").unwrap();
        cfg.set("pipeline.drc", "false").unwrap();
        cfg.set("loss.alpha", "0.35").unwrap();
        cfg.set("model.hidden", "48,24").unwrap();
        cfg.set("dataset.path", "data/train.csv").unwrap();
        let text = cfg.to_text();
        let reparsed = parse_config_text(&text, "roundtrip").unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(text, reparsed.to_text());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = RunConfig::default();
        apply_overrides(&mut cfg, &["seed=44".into(), "loss.beta=2".into()]).unwrap();
        assert_eq!(cfg.seed, 44);
        assert_eq!(cfg.loss.beta, 2.0);
        assert!(apply_overrides(&mut cfg, &["loss.alpha=7".into()]).is_err());
        assert!(apply_overrides(&mut cfg, &["nonsense".into()]).is_err());
    }
}

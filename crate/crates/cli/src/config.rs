//! TOML experiment configs.
//!
//! Top-level keys: `workers`, `effective_batch`, `steps`, `seed`,
//! `eval_every`; sections `[model]`, `[protocol]`, `[optimizer]`, `[data]`.
//! Only `protocol.method` and `workers` are required. Relative data paths
//! are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use egl_core::data::PartitionMode;
use egl_core::nn::MlpSpec;
use egl_core::protocols::{Method, ProtocolSpec, Schedule};
use egl_core::sim::{DataConfig, DataSource, ExperimentConfig, OptimizerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_LAYERS: [usize; 4] = [10, 32, 32, 3];
pub const DEFAULT_ETA: f64 = 0.01;
pub const DEFAULT_MU: f64 = 0.9;
pub const DEFAULT_EFFECTIVE_BATCH: usize = 32;
pub const DEFAULT_STEPS: u64 = 1000;
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_EVAL_EVERY: u64 = 100;
pub const DEFAULT_SYNTHETIC: (usize, usize, usize, f64) = (3000, 10, 3, 0.3);
pub const DEFAULT_HOLDOUT: usize = 600;
pub const DEFAULT_MAJORITY_SHARE: f64 = 0.8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub workers: Option<usize>,
    pub effective_batch: Option<usize>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub eval_every: Option<u64>,
    #[serde(default)]
    pub model: RawModel,
    pub protocol: Option<RawProtocol>,
    #[serde(default)]
    pub optimizer: RawOptimizer,
    #[serde(default)]
    pub data: RawData,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub layers: Option<Vec<usize>>,
    pub input_dropout: Option<f64>,
    pub hidden_dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProtocol {
    pub method: Option<Method>,
    pub alpha: Option<f64>,
    pub tau: Option<u64>,
    pub comm_probability: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOptimizer {
    pub eta: Option<f64>,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Uniform,
    ClassBiased,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawData {
    pub source: Option<SourceKind>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub classes: Option<usize>,
    pub spread: Option<f64>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub holdout: Option<usize>,
    pub partition_mode: Option<PartitionKind>,
    pub majority_share: Option<f64>,
}

/// Parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base).with_context(|| format!("invalid config {}", path.display()))
}

/// Parses config text; relative data paths are joined onto `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse()?;
    parse_config_value(toml::Value::Table(table), base)
}

pub fn parse_config_value(value: toml::Value, base: &Path) -> Result<ExperimentConfig> {
    let raw: RawConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("{path}: {}", e.into_inner())
    })?;
    resolve(raw, base)
}

fn positive(key: &str, x: Option<f64>, default: f64) -> Result<f64> {
    let x = x.unwrap_or(default);
    if !x.is_finite() {
        bail!("{key} must be finite, got {x}");
    }
    Ok(x)
}

fn resolve(raw: RawConfig, base: &Path) -> Result<ExperimentConfig> {
    let protocol = raw
        .protocol
        .ok_or_else(|| anyhow!("missing required key `protocol.method`"))?;
    let method = protocol
        .method
        .ok_or_else(|| anyhow!("missing required key `protocol.method`"))?;
    let workers = raw.workers.ok_or_else(|| anyhow!("missing required key `workers`"))?;

    let schedule = match (protocol.tau, protocol.comm_probability) {
        (Some(_), Some(_)) => bail!("`protocol.tau` and `protocol.comm_probability` are mutually exclusive"),
        (Some(tau), None) => Some(Schedule::Period(tau)),
        (None, Some(p)) => Some(Schedule::Probability(p)),
        (None, None) => None,
    };
    if method.uses_schedule() && schedule.is_none() {
        bail!("{method} needs `protocol.tau` or `protocol.comm_probability`");
    }
    if !method.uses_schedule() && schedule.is_some() {
        bail!("{method} does not use `protocol.tau` or `protocol.comm_probability`");
    }
    if method.uses_alpha() && protocol.alpha.is_none() {
        bail!("{method} needs `protocol.alpha`");
    }
    if !method.uses_alpha() && protocol.alpha.is_some() {
        bail!("{method} does not use `protocol.alpha`");
    }
    let protocol = ProtocolSpec {
        method,
        alpha: protocol.alpha,
        schedule,
    };
    protocol.validate().context("protocol")?;

    let layers = raw.model.layers.unwrap_or_else(|| DEFAULT_LAYERS.to_vec());
    let model = MlpSpec::new(layers)
        .and_then(|m| {
            m.with_dropout(
                raw.model.input_dropout.unwrap_or(0.0),
                raw.model.hidden_dropout.unwrap_or(0.0),
            )
        })
        .context("model")?;

    let optimizer = OptimizerConfig {
        eta: positive("optimizer.eta", raw.optimizer.eta, DEFAULT_ETA)?,
        mu: positive("optimizer.mu", raw.optimizer.mu, DEFAULT_MU)?,
    };

    let d = raw.data;
    let kind = d.source.unwrap_or(SourceKind::Synthetic);
    let source = match kind {
        SourceKind::Synthetic => {
            if d.images.is_some() || d.labels.is_some() {
                bail!("`data.images` and `data.labels` only apply to data.source = \"idx\"");
            }
            let (n, dims, classes, spread) = DEFAULT_SYNTHETIC;
            DataSource::Synthetic {
                n: d.n.unwrap_or(n),
                d: d.d.unwrap_or(dims),
                classes: d.classes.unwrap_or(classes),
                spread: positive("data.spread", d.spread, spread)?,
            }
        }
        SourceKind::Idx => {
            for (key, set) in [
                ("n", d.n.is_some()),
                ("d", d.d.is_some()),
                ("classes", d.classes.is_some()),
                ("spread", d.spread.is_some()),
            ] {
                if set {
                    bail!("`data.{key}` only applies to data.source = \"synthetic\"");
                }
            }
            let locate = |key: &str, p: Option<PathBuf>| -> Result<PathBuf> {
                let p = p.ok_or_else(|| anyhow!("missing required key `data.{key}` for idx data"))?;
                Ok(std::path::absolute(base.join(p))?)
            };
            DataSource::Idx {
                images: locate("images", d.images)?,
                labels: locate("labels", d.labels)?,
            }
        }
    };
    let partition = match d.partition_mode.unwrap_or(PartitionKind::Uniform) {
        PartitionKind::Uniform => {
            if d.majority_share.is_some() {
                bail!("`data.majority_share` only applies to data.partition_mode = \"class_biased\"");
            }
            PartitionMode::Uniform
        }
        PartitionKind::ClassBiased => PartitionMode::ClassBiased {
            majority_share: d.majority_share.unwrap_or(DEFAULT_MAJORITY_SHARE),
        },
    };

    let config = ExperimentConfig {
        model,
        protocol,
        optimizer,
        workers,
        effective_batch: raw.effective_batch.unwrap_or(DEFAULT_EFFECTIVE_BATCH),
        steps: raw.steps.unwrap_or(DEFAULT_STEPS),
        seed: raw.seed.unwrap_or(DEFAULT_SEED),
        data: DataConfig {
            source,
            holdout: d.holdout.unwrap_or(DEFAULT_HOLDOUT),
            partition,
        },
        eval_every: raw.eval_every.unwrap_or(DEFAULT_EVAL_EVERY),
    };
    config.validate()?;
    Ok(config)
}

/// Every key spelled out, so the file re-parses to the same config.
pub fn to_raw(config: &ExperimentConfig) -> RawConfig {
    let (tau, comm_probability) = match config.protocol.schedule {
        Some(Schedule::Period(t)) => (Some(t), None),
        Some(Schedule::Probability(p)) => (None, Some(p)),
        None => (None, None),
    };
    let mut data = RawData {
        holdout: Some(config.data.holdout),
        ..RawData::default()
    };
    match &config.data.source {
        DataSource::Synthetic { n, d, classes, spread } => {
            data.source = Some(SourceKind::Synthetic);
            (data.n, data.d, data.classes, data.spread) = (Some(*n), Some(*d), Some(*classes), Some(*spread));
        }
        DataSource::Idx { images, labels } => {
            data.source = Some(SourceKind::Idx);
            (data.images, data.labels) = (Some(images.clone()), Some(labels.clone()));
        }
    }
    match config.data.partition {
        PartitionMode::Uniform => data.partition_mode = Some(PartitionKind::Uniform),
        PartitionMode::ClassBiased { majority_share } => {
            data.partition_mode = Some(PartitionKind::ClassBiased);
            data.majority_share = Some(majority_share);
        }
    }
    RawConfig {
        workers: Some(config.workers),
        effective_batch: Some(config.effective_batch),
        steps: Some(config.steps),
        seed: Some(config.seed),
        eval_every: Some(config.eval_every),
        model: RawModel {
            layers: Some(config.model.layer_sizes.clone()),
            input_dropout: Some(config.model.input_dropout),
            hidden_dropout: Some(config.model.hidden_dropout),
        },
        protocol: Some(RawProtocol {
            method: Some(config.protocol.method),
            alpha: config.protocol.alpha,
            tau,
            comm_probability,
        }),
        optimizer: RawOptimizer {
            eta: Some(config.optimizer.eta),
            mu: Some(config.optimizer.mu),
        },
        data,
    }
}

pub fn to_toml(config: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string(&to_raw(config))?)
}

/// SHA-256 of the resolved config text, stored in checkpoints.
pub fn config_hash(config: &ExperimentConfig) -> Result<[u8; 32]> {
    Ok(Sha256::digest(to_toml(config)?.as_bytes()).into())
}

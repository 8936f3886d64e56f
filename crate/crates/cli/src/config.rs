//! Run configuration: one JSON document, every field defaulted.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lance_core::autograd::LayerSpec;
use lance_core::data::{SubspaceLayout, SyntheticSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Full,
    Lance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-sample input shape: `[features]` or `[height, width, channels]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Prototype drift applied to a synthetic task to make a related one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Drift {
    pub rho: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        spec: SyntheticSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        drift: Option<Drift>,
        train_samples: usize,
        test_samples: usize,
        #[serde(default = "default_train_seed")]
        train_seed: u64,
        #[serde(default = "default_test_seed")]
        test_seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_train_seed() -> u64 {
    1
}

fn default_test_seed() -> u64 {
    2
}

/// Task stream for continual learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamConfig {
    /// Tasks in mutually orthogonal channel subspaces.
    Synthetic {
        template: SyntheticSpec,
        train_samples: usize,
        test_samples: usize,
        seed: u64,
    },
    /// Consecutive class groups of one labelled dataset.
    ClassSplit { dataset: DatasetConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClSection {
    pub tasks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eps: f64,
    pub eps_cl: f64,
    pub calib_batches: usize,
    pub memory_batches: usize,
    /// Also run unconstrained sequential backprop on the same stream.
    pub control: bool,
    pub model: ModelConfig,
    pub stream: StreamConfig,
}

impl Default for ClSection {
    fn default() -> Self {
        let template = SyntheticSpec {
            height: 8,
            width: 8,
            channels: 12,
            classes: 4,
            rank: 4,
            signal: 0.5,
            noise: 1.0,
            ambient: 0.2,
            layout: SubspaceLayout::Shared,
            seed: 0,
        };
        Self {
            tasks: 3,
            epochs: 10,
            batch_size: 64,
            lr: 0.01,
            eps: 0.9,
            eps_cl: 0.95,
            calib_batches: 100,
            memory_batches: 10,
            control: true,
            model: ModelConfig {
                input_shape: vec![8, 8, 12],
                layers: vec![
                    LayerSpec::conv(12, 16, 3, 1, 1).without_bias().with_trainable(true),
                    LayerSpec::relu(),
                    LayerSpec::max_pool(2, 2),
                    LayerSpec::flatten(),
                    LayerSpec::dense(256, 32).without_bias().with_trainable(true),
                    LayerSpec::relu(),
                    LayerSpec::dense(32, 4),
                ],
            },
            stream: StreamConfig::Synthetic {
                template,
                train_samples: 2000,
                test_samples: 500,
                seed: 17,
            },
        }
    }
}

/// One cost-estimate entry: input dims (batch first), ranks, output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateLayer {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    /// Number of trailing weighted layers to train; `0` trains all of them.
    pub trainable_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub policy: Policy,
    pub eps: f64,
    pub calib_batches: usize,
    pub record_angle: bool,
    pub per_layer_angle: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<PathBuf>,
    pub cl: ClSection,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub estimate: Vec<EstimateLayer>,
}

/// Small CNN on 12x12x3 images: two conv blocks and two dense layers.
pub fn default_cnn() -> ModelConfig {
    ModelConfig {
        input_shape: vec![12, 12, 3],
        layers: vec![
            LayerSpec::conv(3, 8, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(8, 16, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::flatten(),
            LayerSpec::dense(144, 64),
            LayerSpec::relu(),
            LayerSpec::dense(64, 10),
        ],
    }
}

pub fn default_synthetic_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        height: 12,
        width: 12,
        channels: 3,
        classes: 10,
        rank: 2,
        signal: 0.3,
        noise: 1.0,
        ambient: 0.3,
        layout: SubspaceLayout::PerClass,
        seed,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            out: PathBuf::from("out"),
            model: default_cnn(),
            dataset: DatasetConfig::Synthetic {
                spec: default_synthetic_spec(1),
                drift: None,
                train_samples: 10_000,
                test_samples: 2_000,
                train_seed: default_train_seed(),
                test_seed: default_test_seed(),
            },
            trainable_layers: 2,
            epochs: 50,
            batch_size: 128,
            lr: 0.05,
            policy: Policy::Full,
            eps: 0.7,
            calib_batches: 100,
            record_angle: true,
            per_layer_angle: false,
            checkpoint: None,
            bank: None,
            cl: ClSection::default(),
            estimate: Vec::new(),
        }
    }
}

/// Parses a config document; errors name the offending field path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("config field `{path}`: {}", e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn check_eps(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        bail!("config field `{name}`: {v} outside (0, 1]");
    }
    Ok(())
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        bail!("config field `{name}`: must be at least 1");
    }
    Ok(())
}

fn check_lr(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        bail!("config field `{name}`: learning rate must be positive and finite");
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        check_eps("eps", self.eps)?;
        check_positive("batch_size", self.batch_size)?;
        check_positive("calib_batches", self.calib_batches)?;
        check_lr("lr", self.lr)?;
        let cl = &self.cl;
        check_eps("cl.eps", cl.eps)?;
        check_eps("cl.eps_cl", cl.eps_cl)?;
        check_positive("cl.batch_size", cl.batch_size)?;
        check_positive("cl.calib_batches", cl.calib_batches)?;
        check_positive("cl.memory_batches", cl.memory_batches)?;
        check_lr("cl.lr", cl.lr)?;
        if cl.tasks < 2 {
            bail!("config field `cl.tasks`: need at least 2 tasks, got {}", cl.tasks);
        }
        Ok(())
    }

    /// Pretty JSON of the fully resolved config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(parse_config("{}").unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let err = parse_config(r#"{"cl": {"eps_cl": "high"}}"#).unwrap_err().to_string();
        assert!(err.contains("cl.eps_cl"), "{err}");
        let err = parse_config(r#"{"epochz": 3}"#).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = parse_config(r#"{"eps": 1.5}"#).unwrap_err().to_string();
        assert!(err.contains("`eps`"), "{err}");
        let err = parse_config(r#"{"model": {"input_shape": [4], "layers": [{"type": "dense", "in_features": 4}]}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("model.layers"), "{err}");
    }

    #[test]
    fn layer_specs_parse_with_defaults() {
        let cfg = parse_config(
            r#"{"model": {"input_shape": [6, 6, 1], "layers": [
                {"type": "conv2d", "in_channels": 1, "out_channels": 2, "kernel": 3},
                {"type": "relu"}, {"type": "flatten"},
                {"type": "dense", "in_features": 32, "out_features": 2, "bias": false}]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.layers[0], LayerSpec::conv(1, 2, 3, 1, 0));
        assert_eq!(cfg.model.layers[3], LayerSpec::dense(32, 2).without_bias());
    }
}

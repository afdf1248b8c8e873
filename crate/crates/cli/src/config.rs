//! Experiment configuration: TOML `key = value` sections.

use std::path::Path;

use depthbench_core::blocks::ActKind;
use depthbench_core::mono::{LossWeights, MonoConfig, MonoStructure};
use depthbench_core::stereo::AnyNetConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub id: String,
    /// "mono" or "stereo".
    pub task: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    // mono
    pub structure: String,
    pub activation: String,
    pub input_size: usize,
    pub skip_connections: bool,
    // stereo
    pub spn_channels: String,
    pub max_disparity: usize,
    pub residual_range: usize,
    pub unet_base_channels: usize,
    pub disparity_net_channels: [usize; 3],
    pub stage_loss_weights: [f64; 4],
}

impl Default for ModelSection {
    fn default() -> Self {
        let stereo = AnyNetConfig::default();
        ModelSection {
            structure: "3-1-3".to_string(),
            activation: "leaky_relu".to_string(),
            input_size: 64,
            skip_connections: true,
            spn_channels: "none".to_string(),
            max_disparity: 32,
            residual_range: stereo.residual_range,
            unet_base_channels: stereo.unet_base_channels,
            disparity_net_channels: stereo.disparity_net_channels,
            stage_loss_weights: stereo.stage_loss_weights,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// "generate" or "manifest".
    pub source: String,
    pub manifest: String,
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Stereo generation: maximum scene disparity in pixels.
    pub max_disparity: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "generate".to_string(),
            manifest: String::new(),
            seed: 1001,
            count: 20,
            height: 48,
            width: 96,
            max_disparity: 20,
            split_ratio: 0.8,
            split_seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub optimizer: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = depthbench_core::train::OptimizerConfig::default();
        TrainSection {
            optimizer: "adam".to_string(),
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            batch_size: d.batch_size,
            steps: d.max_steps,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    // mono
    pub w_ssim: f64,
    pub w_l1: f64,
    pub w_smooth: f64,
    // stereo
    pub beta: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection { w_ssim: w.w_ssim, w_l1: w.w_l1, w_smooth: w.w_smooth, beta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Mono,
    Stereo,
}


impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("bad config: {e}")))?;
        config.task()?;
        Ok(config)
    }

    pub fn task(&self) -> Result<Task, CliError> {
        match self.experiment.task.as_str() {
            "mono" => Ok(Task::Mono),
            "stereo" => Ok(Task::Stereo),
            other => Err(CliError::usage(format!("unknown task {other:?} (expected mono or stereo)"))),
        }
    }

    /// Applies the global --seed override to data and training seeds.
    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.data.seed = s;
            self.train.seed = s;
        }
    }

    pub fn activation(&self) -> Result<ActKind, CliError> {
        parse_activation(&self.model.activation)
    }

    pub fn mono_config(&self) -> Result<MonoConfig, CliError> {
        let structure = MonoStructure::parse(&self.model.structure)
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(MonoConfig::new(structure)
            .with_input_size(self.model.input_size)
            .with_activation(self.activation()?))
    }

    pub fn stereo_config(&self) -> Result<AnyNetConfig, CliError> {
        let spn = parse_spn(&self.model.spn_channels)?;
        Ok(AnyNetConfig {
            max_disparity: self.model.max_disparity,
            residual_range: self.model.residual_range,
            spn_channels: spn,
            stage_loss_weights: self.model.stage_loss_weights,
            unet_base_channels: self.model.unet_base_channels,
            disparity_net_channels: self.model.disparity_net_channels,
        })
    }

    pub fn optimizer_config(&self) -> Result<depthbench_core::train::OptimizerConfig, CliError> {
        let kind = depthbench_core::train::OptimizerKind::parse(&self.train.optimizer)
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(depthbench_core::train::OptimizerConfig {
            kind,
            learning_rate: self.train.learning_rate,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epsilon: self.train.epsilon,
            batch_size: self.train.batch_size,
            max_steps: self.train.steps,
            seed: self.train.seed,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { w_ssim: self.loss.w_ssim, w_l1: self.loss.w_l1, w_smooth: self.loss.w_smooth }
    }

    /// Human-readable variant label used in reports.
    pub fn variant(&self) -> Result<String, CliError> {
        Ok(match self.task()? {
            Task::Mono => format!("{}/{}", self.model.structure, self.model.activation),
            Task::Stereo => format!("spn-{}", self.model.spn_channels),
        })
    }
}

pub fn parse_activation(s: &str) -> Result<ActKind, CliError> {
    match s {
        "leaky_relu" => Ok(ActKind::LeakyRelu(0.2)),
        "swish" => Ok(ActKind::Swish),
        "relu" => Ok(ActKind::Relu),
        other => Err(CliError::usage(format!("unknown activation {other:?}"))),
    }
}

pub fn parse_spn(s: &str) -> Result<Option<usize>, CliError> {
    match s {
        "none" => Ok(None),
        other => other
            .parse::<usize>()
            .ok()
            .filter(|c| depthbench_core::stereo::SPN_CHANNEL_SWEEP.contains(c))
            .map(Some)
            .ok_or_else(|| CliError::usage(format!("spn_channels must be none, 1, 2, 4 or 8, got {s:?}"))),
    }
}

//! Declarative experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::config_hash;
use crate::classifier::Distance;
use crate::dataset::{
    generate_synthetic, load_dataset, AttributeDataset, DatasetFormat, Protocol, SplitSpec,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::predictor::PredictorConfig;
use crate::selector::{SelectorConfig, TemperatureSchedule};
use crate::unknown::UnknownConfig;

use super::report::DEFAULT_EPISODES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Directory {
        path: PathBuf,
        #[serde(default)]
        format: DatasetFormat,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<AttributeDataset> {
        match self {
            Self::Synthetic(spec) => generate_synthetic(spec),
            Self::Directory { path, format } => load_dataset(path, *format),
        }
    }
}

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// f_h
    Predictor,
    /// g_h
    Selector,
    /// f_u
    Unknown,
    /// g_u
    Gate,
    Evaluate,
    Intervene,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Predictor,
        Stage::Selector,
        Stage::Unknown,
        Stage::Gate,
        Stage::Evaluate,
        Stage::Intervene,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub episodes: usize,
    /// Shared by every report of one run so they score the same episodes.
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            episodes: DEFAULT_EPISODES,
            seed: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    pub ratios: Vec<f64>,
    pub seed: u64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.05, 0.10],
            seed: 11,
        }
    }
}

/// Everything one pipeline run needs. Widths and protocols of the module
/// configs are filled in from the dataset and `protocol` by
/// [`ExperimentConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Class split; defaults to the one shipped with the dataset.
    pub split: Option<SplitSpec>,
    /// Keep only the first `⌈fraction · A⌉` attributes.
    pub attribute_fraction: f64,
    pub protocol: Protocol,
    pub distance: Distance,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stages: Vec<Stage>,
    pub predictor: PredictorConfig,
    pub selector: SelectorConfig,
    pub unknown: UnknownConfig,
    pub gate: GateConfig,
    pub evaluation: EvaluationConfig,
    pub intervention: InterventionConfig,
    /// Extra selectors trained and evaluated at these η, one report each.
    pub eta_sweep: Vec<f64>,
}

/// The desk-scale synthetic benchmark: 30 classes (20 base, 5 validation,
/// 5 novel), 8 attributes, 32×32 images and training budgets that fit a
/// single CPU core.
impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = SyntheticSpec::new(30, 8, 50, 0.1, 7)
            .with_image_size(32)
            .with_base_attribute_flip(0.2)
            .with_held_out_visual_flip(0.03)
            .with_split(20, 5, 5);
        let predictor = PredictorConfig {
            hidden_channels: 32,
            image_size: 32,
            epochs: 100,
            batch_size: 64,
            ..PredictorConfig::default()
        };
        let selector = SelectorConfig {
            episodes: 3000,
            validate_every: 250,
            validation_episodes: 200,
            temperature: TemperatureSchedule {
                halving_period: 500,
                ..TemperatureSchedule::default()
            },
            ..SelectorConfig::default()
        };
        let unknown = UnknownConfig {
            predictor: PredictorConfig {
                hidden_channels: 16,
                epochs: 1,
                ..predictor.clone()
            },
            outer_steps: 600,
            critic_steps: 5,
            validate_every: 100,
            validation_episodes: 200,
            ..UnknownConfig::default()
        };
        let gate = GateConfig {
            episodes: 3000,
            validate_every: 250,
            validation_episodes: 200,
            ..GateConfig::default()
        };
        Self {
            dataset: DatasetSource::Synthetic(dataset),
            split: None,
            attribute_fraction: 1.0,
            protocol: Protocol::default(),
            distance: Distance::default(),
            seed: 0,
            output_dir: PathBuf::from("artifacts"),
            stages: Stage::ALL.to_vec(),
            predictor,
            selector,
            unknown,
            gate,
            evaluation: EvaluationConfig::default(),
            intervention: InterventionConfig::default(),
            eta_sweep: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Full-scale module settings: 84×84 inputs, 64-channel backbone and
    /// 200000 training episodes per episodic stage. Opt-in; needs a real
    /// dataset and far more compute than the default profile.
    pub fn extended(dataset: DatasetSource) -> Self {
        let predictor = PredictorConfig::default();
        Self {
            dataset,
            predictor: predictor.clone(),
            selector: SelectorConfig::default(),
            unknown: UnknownConfig {
                predictor,
                ..UnknownConfig::default()
            },
            gate: GateConfig::default(),
            ..Self::default()
        }
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn wants(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// Number of attributes kept from a dataset with `total` of them.
    pub fn kept_attributes(&self, total: usize) -> Result<usize> {
        if !(self.attribute_fraction > 0.0 && self.attribute_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "attribute_fraction {} outside (0, 1]",
                self.attribute_fraction
            )));
        }
        Ok(((self.attribute_fraction * total as f64).ceil() as usize).clamp(1, total))
    }

    /// Loads the dataset and drops attributes beyond the kept fraction.
    pub fn load_dataset(&self) -> Result<Arc<AttributeDataset>> {
        let full = self.dataset.load()?;
        let keep = self.kept_attributes(full.num_attributes())?;
        let ds = if keep == full.num_attributes() {
            full
        } else {
            full.with_attributes(&(0..keep).collect::<Vec<_>>())?
        };
        Ok(Arc::new(ds))
    }

    pub fn split_for(&self, dataset: &AttributeDataset) -> Result<SplitSpec> {
        self.split
            .clone()
            .or_else(|| dataset.splits().cloned())
            .ok_or_else(|| Error::Split("no split configured and the dataset ships none".into()))
    }

    /// Module configs with widths, protocol and distance filled in.
    pub fn resolved(&self, num_attributes: usize) -> ResolvedConfigs {
        let mut predictor = self.predictor.clone();
        predictor.num_attributes = num_attributes;
        let mut selector = self.selector.clone();
        selector.num_attributes = num_attributes;
        selector.protocol = self.protocol;
        selector.distance = self.distance;
        let mut unknown = self.unknown.clone();
        unknown.predictor.num_attributes = num_attributes;
        unknown.protocol = self.protocol;
        unknown.distance = self.distance;
        let mut gate = self.gate.clone();
        gate.human_width = num_attributes;
        gate.unknown_width = num_attributes;
        gate.protocol = self.protocol;
        gate.distance = self.distance;
        ResolvedConfigs {
            predictor,
            selector,
            unknown,
            gate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfigs {
    pub predictor: PredictorConfig,
    pub selector: SelectorConfig,
    pub unknown: UnknownConfig,
    pub gate: GateConfig,
}

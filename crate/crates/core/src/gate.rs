//! Participation gate g_u.
//!
//! Reads the mixed-space prototypes `concat(s ⊙ ĉ_h, ĉ_u)` with the same
//! bidirectional encoder as the selector and emits one value u ∈ (0, 1).
//! Training uses u as a soft weight on the unknown coordinates and
//! penalizes it by β; inference engages the unknown attributes iff u ≥ 0.5.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Sidecar};
use crate::classifier::{episode_loss_tensor, log_probs_tensor, Distance, EpisodeFeatures};
use crate::dataset::{DatasetView, Protocol};
use crate::error::{Error, Result};
use crate::nn::{adam, EncoderConfig, ParamStore, SetEncoder};
use crate::selector::AttributeSelector;
use crate::unknown::mixed_classify;

pub const GATE_KIND: &str = "participation-gate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub human_width: usize,
    pub unknown_width: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub episodes: usize,
    pub validate_every: usize,
    pub validation_episodes: usize,
    pub alpha: f64,
    /// Participation penalty β.
    pub beta: f64,
    pub protocol: Protocol,
    pub distance: Distance,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            human_width: 0,
            unknown_width: 0,
            hidden: 100,
            learning_rate: 1e-3,
            episodes: 200_000,
            validate_every: 500,
            validation_episodes: 600,
            alpha: 1.0,
            beta: 0.0,
            protocol: Protocol::default(),
            distance: Distance::default(),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha {} and beta {} must be nonnegative",
                self.alpha, self.beta
            )));
        }
        if self.human_width == 0 || self.unknown_width == 0 || self.hidden == 0 {
            return Err(Error::Config("gate needs positive widths".into()));
        }
        if self.protocol.ways < 2 {
            return Err(Error::Config(
                "gate needs at least two prototypes per episode".into(),
            ));
        }
        if self.validate_every == 0 || self.validation_episodes == 0 {
            return Err(Error::Config(
                "validation cadence and size must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub struct ParticipationGate {
    config: GateConfig,
    store: ParamStore,
    encoder: SetEncoder,
}

/// Gate input rows: the masked human prototype followed by the unknown one.
pub fn gate_input(human: &[Vec<f64>], unknown: &[Vec<f64>], mask: &[f64]) -> Result<Vec<Vec<f64>>> {
    if human.len() != unknown.len() {
        return Err(Error::Validation(format!(
            "{} human and {} unknown prototypes",
            human.len(),
            unknown.len()
        )));
    }
    human
        .iter()
        .zip(unknown)
        .map(|(h, u)| {
            if h.len() != mask.len() {
                return Err(Error::Validation(format!(
                    "mask of width {} for {}-wide prototypes",
                    mask.len(),
                    h.len()
                )));
            }
            Ok(h.iter()
                .zip(mask)
                .map(|(v, m)| v * m)
                .chain(u.iter().copied())
                .collect())
        })
        .collect()
}

impl ParticipationGate {
    pub fn new(config: GateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, DType::F32);
        let enc = EncoderConfig {
            input_dim: config.human_width + config.unknown_width,
            hidden: config.hidden,
            output_dim: 1,
        };
        let encoder = SetEncoder::new(&enc, &store, "g_u")?;
        Ok(Self {
            config,
            store,
            encoder,
        })
    }

    pub fn config(&self) -> &GateConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(N, A + A_u)` mixed prototypes → scalar tensor.
    pub fn value_tensor(&self, mixed: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.forward(mixed)?.squeeze(0)?)
    }

    pub fn gate_value(&self, mixed: &[Vec<f64>]) -> Result<f64> {
        let width = self.config.human_width + self.config.unknown_width;
        let t = crate::selector::rows_tensor(mixed, width)?;
        if mixed.len() < 2 {
            return Err(Error::Validation("gate needs at least 2 prototypes".into()));
        }
        Ok(self
            .value_tensor(&t)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?)
    }

    pub fn save(&self, stem: &Path, sidecar: &Sidecar) -> Result<()> {
        checkpoint::write(stem, &self.store, sidecar)
    }

    pub fn load(stem: &Path) -> Result<(Self, Sidecar)> {
        let side = checkpoint::read_sidecar(stem, GATE_KIND)?;
        let mut model = Self::new(side.config_as()?, side.seed)?;
        checkpoint::load_weights(stem, &mut model.store, &side)?;
        Ok((model, side))
    }
}

/// Inference decision: unknown attributes join iff `value ≥ 0.5`.
pub fn participates(value: f64) -> bool {
    value >= 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateValidation {
    pub episode: usize,
    pub accuracy: f64,
    /// Percent of validation episodes with gate value below 0.5.
    pub human_friendly: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateMeta {
    pub alpha: f64,
    pub beta: f64,
    pub best: GateValidation,
}

pub struct GateRun {
    pub gate: ParticipationGate,
    pub history: Vec<GateValidation>,
    pub best: GateValidation,
}

impl GateRun {
    pub fn sidecar(&self, seed: u64, upstream: BTreeMap<String, String>) -> Result<Sidecar> {
        let cfg = self.gate.config();
        let mut side = Sidecar::new(GATE_KIND, cfg, seed, &self.gate.store)?;
        side.metadata = serde_json::to_value(GateMeta {
            alpha: cfg.alpha,
            beta: cfg.beta,
            best: self.best.clone(),
        })?;
        side.upstream = upstream;
        Ok(side)
    }
}

/// Frozen inputs of the gate: both feature tables and the selector.
#[derive(Clone, Copy)]
pub struct GateInputs<'a> {
    pub human: &'a [Vec<f64>],
    pub unknown: &'a [Vec<f64>],
    pub selector: &'a AttributeSelector,
}

/// Hard-gate accuracy (percent) and human-friendly percentage.
pub fn validate_gate(
    gate: &ParticipationGate,
    inputs: GateInputs,
    pool: &DatasetView,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let cfg = gate.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut acc, mut friendly) = (0.0, 0usize);
    for _ in 0..episodes {
        let episode = cfg.protocol.sample(pool, &mut rng)?;
        let h = EpisodeFeatures::gather(inputs.human, &episode)?;
        let u = EpisodeFeatures::gather(inputs.unknown, &episode)?;
        let mask = inputs.selector.select(&h.prototypes)?.mask;
        let value = gate.gate_value(&gate_input(&h.prototypes, &u.prototypes, &mask)?)?;
        let open = participates(value);
        friendly += usize::from(!open);
        acc += mixed_classify(&h, &u, &mask, if open { 1.0 } else { 0.0 }, cfg.distance)?
            .accuracy(&h.labels);
    }
    Ok((
        100.0 * acc / episodes as f64,
        100.0 * friendly as f64 / episodes as f64,
    ))
}

pub fn train_gate(
    inputs: GateInputs,
    base: &DatasetView,
    val: &DatasetView,
    config: &GateConfig,
    seed: u64,
) -> Result<GateRun> {
    config.validate()?;
    let (a, au) = (config.human_width, config.unknown_width);
    let widths = (
        inputs.human.first().map_or(0, Vec::len),
        inputs.unknown.first().map_or(0, Vec::len),
    );
    if widths != (a, au) || inputs.selector.config().num_attributes != a {
        return Err(Error::Config(format!(
            "gate configured for widths ({a}, {au}), inputs have {widths:?}"
        )));
    }
    let gate = ParticipationGate::new(config.clone(), seed)?;
    let mut opt = adam(&gate.store, config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a7e_5eed);
    let val_seed = seed ^ 0x0a11_da7e;
    let dev = Device::Cpu;

    let mut history = Vec::new();
    let mut best: Option<(GateValidation, _)> = None;
    for episode in 1..=config.episodes {
        let ep = config.protocol.sample(base, &mut rng)?;
        let h = EpisodeFeatures::gather(inputs.human, &ep)?;
        let u = EpisodeFeatures::gather(inputs.unknown, &ep)?;
        let mask = inputs.selector.select(&h.prototypes)?.mask;
        let mixed = crate::selector::rows_tensor(
            &gate_input(&h.prototypes, &u.prototypes, &mask)?,
            a + au,
        )?;
        let value = gate.value_tensor(&mixed)?;
        let joined = h.concat(&u)?;
        let protos = crate::selector::rows_tensor(&joined.prototypes, a + au)?;
        let queries = crate::selector::rows_tensor(&joined.queries, a + au)?;
        let s = Tensor::from_vec(mask.iter().map(|&m| m as f32).collect::<Vec<_>>(), a, &dev)?;
        let weights = Tensor::cat(&[s, value.broadcast_as(au)?], 0)?;
        let log_probs = log_probs_tensor(&queries, &protos, Some(&weights), config.distance)?;
        let l_cls = episode_loss_tensor(&log_probs, &joined.labels)?;
        let loss = ((l_cls * config.alpha)? + (value * config.beta)?)?;
        opt.backward_step(&loss)?;

        if episode % config.validate_every == 0 || episode == config.episodes {
            let (accuracy, human_friendly) =
                validate_gate(&gate, inputs, val, config.validation_episodes, val_seed)?;
            log::info!("g_u episode {episode}: val acc {accuracy:.2}%, human-friendly {human_friendly:.1}%");
            let record = GateValidation {
                episode,
                accuracy,
                human_friendly,
            };
            if best.as_ref().is_none_or(|(b, _)| accuracy > b.accuracy) {
                best = Some((record.clone(), gate.store.snapshot()?));
            }
            history.push(record);
        }
    }
    let (best, snapshot) =
        best.ok_or_else(|| Error::Config("gate training needs at least one episode".into()))?;
    gate.store.restore(&snapshot)?;
    Ok(GateRun {
        gate,
        history,
        best,
    })
}

//! Online attribute selector g_h.
//!
//! A bidirectional LSTM reads the episode prototypes in class-sampling order
//! and emits one Bernoulli probability π_i per attribute. Training samples
//! relaxed binary states with the two-branch Gumbel-softmax estimator and
//! anneals its temperature; inference keeps attribute i iff π_i ≥ 0.5.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Sidecar};
use crate::classifier::{episode_loss_tensor, log_probs_tensor, Distance, EpisodeFeatures};
use crate::dataset::{DatasetView, Protocol};
use crate::error::{Error, Result};
use crate::nn::{adam, EncoderConfig, ParamStore, SetEncoder};

/// π is clamped to `[PI_CLAMP, 1 - PI_CLAMP]` before any logarithm.
pub const PI_CLAMP: f64 = 1e-6;
pub const SELECTOR_KIND: &str = "attribute-selector";

/// Step-wise annealing: `max(initial · 2^(-⌊i / halving_period⌋), floor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub halving_period: usize,
    pub floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            initial: 4.0,
            halving_period: 12_500,
            floor: 0.5,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, episode: usize) -> f64 {
        let halvings = (episode / self.halving_period.max(1)).min(1024) as i32;
        (self.initial * 2f64.powi(-halvings)).max(self.floor)
    }
}

/// Default schedule evaluated at `episode`.
pub fn temperature_schedule(episode: usize) -> f64 {
    TemperatureSchedule::default().at(episode)
}

fn check_pi(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "Bernoulli probability {pi} outside (0, 1)"
        )))
    }
}

/// One relaxed state for fixed Gumbel noises `g1` (present branch) and `g0`
/// (absent branch).
pub fn relaxed_state(pi: f64, g1: f64, g0: f64, tau: f64) -> Result<f64> {
    check_pi(pi)?;
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    let on = (pi.ln() + g1) / tau;
    let off = ((1.0 - pi).ln() + g0) / tau;
    // two-way softmax written as a logistic of the logit difference
    Ok(1.0 / (1.0 + (off - on).exp()))
}

/// Draws `2 × A` standard Gumbel noises: row 0 for the present branch, row 1
/// for the absent branch.
pub fn gumbel_noise<R: Rng + ?Sized>(width: usize, rng: &mut R) -> [Vec<f64>; 2] {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let mut draw = || (0..width).map(|_| g.sample(rng)).collect::<Vec<f64>>();
    let present = draw();
    [present, draw()]
}

pub fn gumbel_sample<R: Rng + ?Sized>(pi: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    let [g1, g0] = gumbel_noise(pi.len(), rng);
    pi.iter()
        .zip(g1.iter().zip(&g0))
        .map(|(&p, (&a, &b))| relaxed_state(p, a, b, tau))
        .collect()
}

/// Differentiable counterpart of [`relaxed_state`] over `(A,)` tensors.
/// `pi` must already lie strictly inside (0, 1).
pub fn gumbel_sample_tensor(pi: &Tensor, g1: &Tensor, g0: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    let on = (pi.log()? + g1)?;
    let off = (pi.affine(-1.0, 1.0)?.log()? + g0)?;
    Ok(candle_nn::ops::sigmoid(&((on - off)? / tau)?)?)
}

/// Inference mask: 1 where π ≥ 0.5.
pub fn hard_select(pi: &[f64]) -> Vec<f64> {
    pi.iter()
        .map(|&p| if p >= 0.5 { 1.0 } else { 0.0 })
        .collect()
}

/// `α·l_cls + η·Σ s_i`.
pub fn selector_loss(l_cls: f64, states: &[f64], alpha: f64, eta: f64) -> f64 {
    alpha * l_cls + eta * states.iter().sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub num_attributes: usize,
    /// LSTM width per direction.
    pub hidden: usize,
    pub learning_rate: f64,
    pub episodes: usize,
    pub validate_every: usize,
    pub validation_episodes: usize,
    pub alpha: f64,
    pub eta: f64,
    pub temperature: TemperatureSchedule,
    pub protocol: Protocol,
    pub distance: Distance,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            num_attributes: 0,
            hidden: 100,
            learning_rate: 1e-3,
            episodes: 200_000,
            validate_every: 500,
            validation_episodes: 600,
            alpha: 1.0,
            eta: 0.0,
            temperature: TemperatureSchedule::default(),
            protocol: Protocol::default(),
            distance: Distance::default(),
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_attributes == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "selector needs positive num_attributes and hidden".into(),
            ));
        }
        if self.alpha < 0.0 || self.eta < 0.0 {
            return Err(Error::Config(format!(
                "alpha {} and eta {} must be nonnegative",
                self.alpha, self.eta
            )));
        }
        if self.protocol.ways < 2 {
            return Err(Error::Config(
                "selection needs at least two prototypes per episode".into(),
            ));
        }
        if self.temperature.initial <= 0.0 || self.temperature.floor <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.validate_every == 0 || self.validation_episodes == 0 {
            return Err(Error::Config(
                "validation cadence and size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Selection for one episode at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub pi: Vec<f64>,
    pub mask: Vec<f64>,
}

impl Selection {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

pub struct AttributeSelector {
    config: SelectorConfig,
    store: ParamStore,
    encoder: SetEncoder,
}

impl AttributeSelector {
    pub fn new(config: SelectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, DType::F32);
        let enc = EncoderConfig {
            input_dim: config.num_attributes,
            hidden: config.hidden,
            output_dim: config.num_attributes,
        };
        let encoder = SetEncoder::new(&enc, &store, "g_h")?;
        Ok(Self {
            config,
            store,
            encoder,
        })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Clamped π as a tensor, `(N, A)` prototypes in.
    pub fn probabilities_tensor(&self, prototypes: &Tensor) -> Result<Tensor> {
        let (n, a) = prototypes.dims2()?;
        if a != self.config.num_attributes {
            return Err(Error::Validation(format!(
                "selector trained on {} attributes, prototypes have {a}",
                self.config.num_attributes
            )));
        }
        if n < 2 {
            return Err(Error::Validation(format!(
                "selection needs at least 2 prototypes, got {n}"
            )));
        }
        Ok(self
            .encoder
            .forward(prototypes)?
            .clamp(PI_CLAMP, 1.0 - PI_CLAMP)?)
    }

    pub fn select_probabilities(&self, prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
        let t = rows_tensor(prototypes, self.config.num_attributes)?;
        let pi = self
            .probabilities_tensor(&t)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        Ok(pi
            .into_iter()
            .map(|p| p.clamp(PI_CLAMP, 1.0 - PI_CLAMP))
            .collect())
    }

    pub fn select(&self, prototypes: &[Vec<f64>]) -> Result<Selection> {
        let pi = self.select_probabilities(prototypes)?;
        let mask = hard_select(&pi);
        Ok(Selection { pi, mask })
    }

    pub fn save(&self, stem: &Path, sidecar: &Sidecar) -> Result<()> {
        checkpoint::write(stem, &self.store, sidecar)
    }

    pub fn load(stem: &Path) -> Result<(Self, Sidecar)> {
        let side = checkpoint::read_sidecar(stem, SELECTOR_KIND)?;
        let mut model = Self::new(side.config_as()?, side.seed)?;
        checkpoint::load_weights(stem, &mut model.store, &side)?;
        Ok((model, side))
    }
}

/// `(rows, width)` f32 tensor; every row must have `width` entries.
pub(crate) fn rows_tensor(rows: &[Vec<f64>], width: usize) -> Result<Tensor> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::Validation(format!(
            "row of width {} where {width} was expected",
            r.len()
        )));
    }
    let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), width), &Device::Cpu)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorValidation {
    /// Training episodes completed when this validation ran.
    pub episode: usize,
    /// Mean episodic accuracy in percent.
    pub accuracy: f64,
    pub mean_selected: f64,
}

/// Sidecar metadata of a trained selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorMeta {
    pub alpha: f64,
    pub eta: f64,
    pub temperature: TemperatureSchedule,
    pub best: SelectorValidation,
}

pub struct SelectorRun {
    pub selector: AttributeSelector,
    pub history: Vec<SelectorValidation>,
    pub best: SelectorValidation,
}

impl SelectorRun {
    /// Sidecar recording the schedule, the best validation point and the
    /// digest of the frozen predictor the selector was trained on.
    pub fn sidecar(&self, seed: u64, predictor_digest: &str) -> Result<Sidecar> {
        let cfg = self.selector.config();
        let mut side = Sidecar::new(SELECTOR_KIND, cfg, seed, &self.selector.store)?;
        side.metadata = serde_json::to_value(SelectorMeta {
            alpha: cfg.alpha,
            eta: cfg.eta,
            temperature: cfg.temperature,
            best: self.best.clone(),
        })?;
        side.upstream = BTreeMap::from([("f_h".to_string(), predictor_digest.to_string())]);
        Ok(side)
    }
}

/// Validation seed derived from the training seed so that every validation
/// round of one run scores the same episodes.
fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x0a11_da7e
}

/// Mean hard-mask accuracy (percent) and mean selected count over a fixed
/// set of episodes.
pub fn validate_selector(
    selector: &AttributeSelector,
    features: &[Vec<f64>],
    pool: &DatasetView,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let cfg = selector.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut acc, mut count) = (0.0, 0.0);
    for _ in 0..episodes {
        let ep = EpisodeFeatures::gather(features, &cfg.protocol.sample(pool, &mut rng)?)?;
        let sel = selector.select(&ep.prototypes)?;
        acc += ep
            .classify(Some(&sel.mask), cfg.distance)?
            .accuracy(&ep.labels);
        count += sel.count() as f64;
    }
    Ok((100.0 * acc / episodes as f64, count / episodes as f64))
}

/// Trains g_h on frozen predictor outputs. `features[i]` is f_h's output for
/// dataset image `i`. Keeps the weights with the best validation accuracy;
/// among ties, the latest that selects no more attributes than the others.
pub fn train_selector(
    features: &[Vec<f64>],
    base: &DatasetView,
    val: &DatasetView,
    config: &SelectorConfig,
    seed: u64,
) -> Result<SelectorRun> {
    config.validate()?;
    let width = features.first().map_or(0, Vec::len);
    if width != config.num_attributes || base.dataset().num_attributes() != config.num_attributes {
        return Err(Error::Config(format!(
            "selector configured for {} attributes, predictor outputs {width}, dataset has {}",
            config.num_attributes,
            base.dataset().num_attributes()
        )));
    }
    let selector = AttributeSelector::new(config.clone(), seed)?;
    let mut opt = adam(&selector.store, config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e1e_c7ed);
    let a = config.num_attributes;

    let mut history = Vec::new();
    let mut best: Option<(SelectorValidation, _)> = None;
    for episode in 1..=config.episodes {
        let ep = EpisodeFeatures::gather(features, &config.protocol.sample(base, &mut rng)?)?;
        let protos = rows_tensor(&ep.prototypes, a)?;
        let queries = rows_tensor(&ep.queries, a)?;
        let pi = selector.probabilities_tensor(&protos)?;
        let [g1, g0] = gumbel_noise(a, &mut rng);
        let to_t = |g: Vec<f64>| {
            Tensor::from_vec(
                g.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                a,
                &Device::Cpu,
            )
        };
        let tau = config.temperature.at(episode - 1);
        let s = gumbel_sample_tensor(&pi, &to_t(g1)?, &to_t(g0)?, tau)?;
        let log_probs = log_probs_tensor(&queries, &protos, Some(&s), config.distance)?;
        let l_cls = episode_loss_tensor(&log_probs, &ep.labels)?;
        let loss = ((l_cls * config.alpha)? + (s.sum_all()? * config.eta)?)?;
        opt.backward_step(&loss)?;

        if episode % config.validate_every == 0 || episode == config.episodes {
            let (accuracy, mean_selected) = validate_selector(
                &selector,
                features,
                val,
                config.validation_episodes,
                validation_seed(seed),
            )?;
            log::info!("g_h episode {episode}: tau {tau}, val acc {accuracy:.2}%, selected {mean_selected:.2}");
            let record = SelectorValidation {
                episode,
                accuracy,
                mean_selected,
            };
            // ties go to the later checkpoint unless it keeps more attributes
            let better = |b: &SelectorValidation| {
                accuracy > b.accuracy
                    || (accuracy == b.accuracy && mean_selected <= b.mean_selected)
            };
            if best.as_ref().is_none_or(|(b, _)| better(b)) {
                best = Some((record.clone(), selector.store.snapshot()?));
            }
            history.push(record);
        }
    }
    let (best, snapshot) =
        best.ok_or_else(|| Error::Config("selector training needs at least one episode".into()))?;
    selector.store.restore(&snapshot)?;
    Ok(SelectorRun {
        selector,
        history,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_support::tiny;
    use crate::dataset::{split_dataset, SplitSpec};
    use candle_core::Var;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn relaxed_state_examples() {
        for tau in [0.1, 1.0, 7.0] {
            assert!((relaxed_state(0.5, 0.3, 0.3, tau).unwrap() - 0.5).abs() < 1e-15);
        }
        assert!((relaxed_state(0.9, 0.0, 0.0, 1.0).unwrap() - 0.9).abs() < 1e-12);
        // oracle: 0.9² / (0.9² + 0.1²)
        let oracle = 0.81 / 0.82;
        assert!((relaxed_state(0.9, 0.0, 0.0, 0.5).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 0.9878).abs() < 1e-4);
        assert!(matches!(
            relaxed_state(1.0, 0.0, 0.0, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            relaxed_state(0.0, 0.0, 0.0, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(relaxed_state(0.5, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(temperature_schedule(0), 4.0);
        assert_eq!(temperature_schedule(12_499), 4.0);
        assert_eq!(temperature_schedule(12_500), 2.0);
        assert_eq!(temperature_schedule(25_000), 1.0);
        assert_eq!(temperature_schedule(37_500), 0.5);
        assert_eq!(temperature_schedule(1_000_000), 0.5);
        assert_eq!(temperature_schedule(usize::MAX), 0.5);
    }

    #[test]
    fn hard_select_and_loss_examples() {
        assert_eq!(hard_select(&[0.7, 0.3]), vec![1.0, 0.0]);
        assert_eq!(hard_select(&[0.5]), vec![1.0]);
        assert_eq!(hard_select(&[0.1, 0.49]), vec![0.0, 0.0]);
        assert_eq!(selector_loss(2.0, &[0.3, 0.4], 1.0, 0.0), 2.0);
        let s = vec![1.0; 100];
        assert!((selector_loss(2.0, &s, 1.0, 1e-3) - 2.1).abs() < 1e-12);
    }

    #[test]
    fn tensor_sample_matches_plain_and_finite_differences() {
        let pi = [0.2, 0.5, 0.73, 0.95];
        let g1 = [0.3, -0.7, 1.2, 0.05];
        let g0 = [-0.1, 0.4, 0.9, -1.3];
        let dev = Device::Cpu;
        let v = Var::new(&pi, &dev).unwrap();
        let s = gumbel_sample_tensor(
            v.as_tensor(),
            &Tensor::new(&g1, &dev).unwrap(),
            &Tensor::new(&g0, &dev).unwrap(),
            0.7,
        )
        .unwrap();
        let got = s.to_vec1::<f64>().unwrap();
        let weights = [0.3, -1.1, 0.8, 2.0];
        let objective = (s * Tensor::new(&weights, &dev).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grad = objective
            .backward()
            .unwrap()
            .get(&v)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..4 {
            assert!((got[i] - relaxed_state(pi[i], g1[i], g0[i], 0.7).unwrap()).abs() < 1e-12);
            let h = 1e-6;
            let f = |p: f64| weights[i] * relaxed_state(p, g1[i], g0[i], 0.7).unwrap();
            let fd = (f(pi[i] + h) - f(pi[i] - h)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "{fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn low_temperature_matches_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pi = [0.1, 0.5, 0.9];
        let draws = 20_000;
        let mut hits = [0usize; 3];
        for _ in 0..draws {
            for (h, s) in hits
                .iter_mut()
                .zip(gumbel_sample(&pi, 0.1, &mut rng).unwrap())
            {
                *h += usize::from(s > 0.5);
            }
        }
        for (h, p) in hits.iter().zip(pi) {
            assert!((*h as f64 / draws as f64 - p).abs() < 0.02);
        }
    }

    proptest! {
        #[test]
        fn states_are_interior_and_monotone(pi in 0.01f64..0.98, d in 0.001f64..0.01, g1 in -3.0f64..3.0, g0 in -3.0f64..3.0, tau in 0.5f64..5.0) {
            let lo = relaxed_state(pi, g1, g0, tau).unwrap();
            let hi = relaxed_state(pi + d, g1, g0, tau).unwrap();
            prop_assert!(lo > 0.0 && lo < 1.0);
            prop_assert!(hi > lo);
        }

        #[test]
        fn vanishing_temperature_is_a_hard_choice(pi in 0.05f64..0.95, g1 in -3.0f64..3.0, g0 in -3.0f64..3.0) {
            let margin = (pi.ln() + g1) - ((1.0 - pi).ln() + g0);
            prop_assume!(margin.abs() > 0.05);
            let s = relaxed_state(pi, g1, g0, 1e-3).unwrap();
            let expected = if margin > 0.0 { 1.0 } else { 0.0 };
            prop_assert!((s - expected).abs() < 1e-6);
        }

        #[test]
        fn l1_term_is_increasing(l in 0.0f64..10.0, s in prop::collection::vec(0.0f64..1.0, 1..8), i in 0usize..8, eta in 1e-5f64..1.0) {
            let i = i % s.len();
            let mut up = s.clone();
            up[i] += 0.01;
            prop_assert!(selector_loss(l, &up, 1.0, eta) > selector_loss(l, &s, 1.0, eta));
        }
    }

    fn small_config(a: usize) -> SelectorConfig {
        SelectorConfig {
            num_attributes: a,
            hidden: 8,
            episodes: 30,
            validate_every: 10,
            validation_episodes: 5,
            protocol: Protocol {
                ways: 2,
                shots: 1,
                queries: 2,
            },
            ..Default::default()
        }
    }

    #[test]
    fn inference_is_deterministic_and_checks_width() {
        let sel = AttributeSelector::new(small_config(3), 1).unwrap();
        let protos = vec![vec![0.1, 0.9, 0.4], vec![0.8, 0.2, 0.4]];
        let a = sel.select(&protos).unwrap();
        assert_eq!(a, sel.select(&protos).unwrap());
        assert!(a.pi.iter().all(|p| *p > 0.0 && *p < 1.0));
        assert_eq!(a.mask, hard_select(&a.pi));
        assert!(sel.select(&[vec![0.1, 0.2]]).is_err());
        assert!(sel.select(&[vec![0.1, 0.2, 0.3]]).is_err());
    }

    #[test]
    fn training_is_reproducible_and_round_trips() {
        let ds = Arc::new(tiny(6, 4, 3));
        let spec = SplitSpec::consecutive(ds.class_ids(), 3, 2, 1).unwrap();
        let splits = split_dataset(&ds, &spec).unwrap();
        let features: Vec<Vec<f64>> = (0..ds.len())
            .map(|i| {
                ds.attributes_of(i)
                    .iter()
                    .map(|&v| 0.1 + 0.8 * v as f64)
                    .collect()
            })
            .collect();
        let cfg = small_config(3);
        let a = train_selector(&features, &splits.base, &splits.validation, &cfg, 4).unwrap();
        let b = train_selector(&features, &splits.base, &splits.validation, &cfg, 4).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        assert_eq!(
            a.selector.store().digest().unwrap(),
            b.selector.store().digest().unwrap()
        );

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("g_h");
        let side = a.sidecar(4, "abc").unwrap();
        a.selector.save(&stem, &side).unwrap();
        let (back, side_back) = AttributeSelector::load(&stem).unwrap();
        assert_eq!(side_back.upstream["f_h"], "abc");
        let meta: SelectorMeta = side_back.metadata_as().unwrap();
        assert_eq!(meta.best, a.best);
        let protos = vec![vec![0.1, 0.9, 0.4], vec![0.8, 0.2, 0.4]];
        assert_eq!(
            back.select(&protos).unwrap(),
            a.selector.select(&protos).unwrap()
        );

        let wrong = SelectorConfig {
            num_attributes: 4,
            ..cfg
        };
        assert!(matches!(
            train_selector(&features, &splits.base, &splits.validation, &wrong, 4),
            Err(Error::Config(_))
        ));
    }
}

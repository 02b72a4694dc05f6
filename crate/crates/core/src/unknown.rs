//! Unknown attributes f_u and the mixed decision space.
//!
//! f_u shares f_h's architecture and is trained episodically on base classes
//! while a MINE critic estimates the mutual information between its outputs
//! ā and the frozen human-friendly predictions â. The predictor descends
//! `l_cls + λ·l_MI`; the critic ascends the bound in between.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Sidecar;
use crate::classifier::{
    episode_loss_tensor, log_probs_tensor, prototypes_tensor, Distance, EpisodeFeatures,
    EpisodeProbabilities,
};
use crate::dataset::preprocess::PreparedImages;
use crate::dataset::{DatasetView, ImageTransform, Protocol};
use crate::error::{Error, Result};
use crate::mine::MineCritic;
use crate::nn::adam;
use crate::predictor::{AttributePredictor, PredictorConfig};

pub const UNKNOWN_KIND: &str = "unknown-predictor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnknownConfig {
    /// Backbone of f_u; `num_attributes` is the unknown width A_u.
    pub predictor: PredictorConfig,
    /// MI weight λ.
    pub lambda: f64,
    /// Shared by f_u and the critic.
    pub learning_rate: f64,
    /// Outer episodes E₁.
    pub outer_steps: usize,
    /// Critic updates per outer step E₂.
    pub critic_steps: usize,
    /// Samples per MINE batch.
    pub mine_batch: usize,
    pub critic_hidden: Vec<usize>,
    pub validate_every: usize,
    pub validation_episodes: usize,
    pub protocol: Protocol,
    pub distance: Distance,
}

impl Default for UnknownConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorConfig::default(),
            lambda: 2.0,
            learning_rate: 1e-2,
            outer_steps: 200_000,
            critic_steps: 10,
            mine_batch: 64,
            critic_hidden: vec![50, 50],
            validate_every: 500,
            validation_episodes: 600,
            protocol: Protocol::default(),
            distance: Distance::default(),
        }
    }
}

impl UnknownConfig {
    pub fn validate(&self, human_width: usize) -> Result<()> {
        self.predictor.validate()?;
        if self.predictor.num_attributes != human_width {
            return Err(Error::Config(format!(
                "unknown width {} must equal the human-friendly width {human_width}",
                self.predictor.num_attributes
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda {} must be nonnegative",
                self.lambda
            )));
        }
        if self.mine_batch < 2 {
            return Err(Error::Config("MINE batches need at least 2 samples".into()));
        }
        if self.validate_every == 0 || self.validation_episodes == 0 {
            return Err(Error::Config(
                "validation cadence and size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownValidation {
    pub step: usize,
    /// Mean episodic accuracy (percent) in the unknown space alone.
    pub accuracy: f64,
    /// Last critic estimate of the bound before this validation.
    pub mine_estimate: f64,
}

/// Sidecar metadata of a trained f_u.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownMeta {
    pub lambda: f64,
    pub outer_steps: usize,
    pub critic_steps: usize,
    pub best: UnknownValidation,
}

pub struct UnknownRun {
    pub predictor: AttributePredictor,
    pub history: Vec<UnknownValidation>,
    pub best: UnknownValidation,
    pub config: UnknownConfig,
}

impl UnknownRun {
    pub fn sidecar(&self, seed: u64, predictor_digest: &str) -> Result<Sidecar> {
        let meta = UnknownMeta {
            lambda: self.config.lambda,
            outer_steps: self.config.outer_steps,
            critic_steps: self.config.critic_steps,
            best: self.best.clone(),
        };
        let mut side = self
            .predictor
            .sidecar(UNKNOWN_KIND, seed, serde_json::to_value(&meta)?)?;
        side.config_hash = crate::checkpoint::config_hash(&self.config)?;
        side.upstream = BTreeMap::from([("f_h".to_string(), predictor_digest.to_string())]);
        Ok(side)
    }
}

/// Restores f_u with its sidecar.
pub fn load_unknown(stem: &Path) -> Result<(AttributePredictor, Sidecar)> {
    AttributePredictor::load(stem, UNKNOWN_KIND)
}

fn rows_tensor(rows: &[Vec<f64>], idx: &[usize]) -> Result<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    let flat: Vec<f32> = idx
        .iter()
        .flat_map(|&i| rows[i].iter().map(|&v| v as f32))
        .collect();
    Ok(Tensor::from_vec(flat, (idx.len(), width), &Device::Cpu)?)
}

/// Mean unknown-space episodic accuracy (percent) over a fixed episode set.
pub fn validate_unknown(
    features: &[Vec<f64>],
    pool: &DatasetView,
    protocol: Protocol,
    distance: Distance,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..episodes {
        let ep = EpisodeFeatures::gather(features, &protocol.sample(pool, &mut rng)?)?;
        acc += ep.classify(None, distance)?.accuracy(&ep.labels);
    }
    Ok(100.0 * acc / episodes as f64)
}

/// Trains f_u against the frozen human-friendly predictions
/// `human[i]` of dataset image `i`.
///
/// Each outer step draws one base episode for the classification loss and
/// a batch `S` for the bound. The critic then takes `critic_steps` ascent
/// steps, each with a fresh marginal batch, and f_u takes one descent step
/// with another fresh marginal batch. MINE batches use the inference path of
/// f_u so that batch-norm statistics come only from episodes.
pub fn train_unknown_predictor(
    human: &[Vec<f64>],
    base: &DatasetView,
    val: &DatasetView,
    images: &PreparedImages,
    config: &UnknownConfig,
    seed: u64,
) -> Result<UnknownRun> {
    let a = human.first().map_or(0, Vec::len);
    config.validate(a)?;
    let dataset = base.dataset();
    if human.len() != dataset.len() || images.len() != dataset.len() {
        return Err(Error::Config(
            "predictions and prepared images must cover the whole dataset".into(),
        ));
    }
    if images.size() != config.predictor.image_size {
        return Err(Error::Config(
            "prepared images do not match image_size".into(),
        ));
    }
    let base_idx = base.image_indices();
    let val_idx = val.image_indices();
    if base_idx.len() < config.mine_batch {
        return Err(Error::Config(format!(
            "{} base images for MINE batches of {}",
            base_idx.len(),
            config.mine_batch
        )));
    }
    let transform = ImageTransform::fit(images, &base_idx)?;
    let f_u = AttributePredictor::new(config.predictor.clone(), transform, seed)?;
    let critic = MineCritic::new(2 * a, &config.critic_hidden, seed ^ 0xc817_1c00)?;
    let mut opt = adam(f_u.store(), config.learning_rate)?;
    let mut critic_opt = adam(critic.store(), config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5c_0e4e);
    let val_seed = seed ^ 0x0a11_da7e;

    let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        index::sample(rng, base_idx.len(), config.mine_batch)
            .into_iter()
            .map(|i| base_idx[i])
            .collect()
    };
    let encode = |idx: &[usize]| -> Result<Tensor> {
        let batch = f_u.transform().batch::<ChaCha8Rng>(images, idx, None)?;
        f_u.net().forward(&batch, false)
    };

    let mut history = Vec::new();
    let mut best: Option<(UnknownValidation, _)> = None;
    for step in 1..=config.outer_steps {
        let ep = config.protocol.sample(base, &mut rng)?;
        let mut idx: Vec<usize> = ep.support.concat();
        let n_support = idx.len();
        let items = ep.query_items();
        idx.extend(items.iter().map(|&(i, _)| i));
        let labels: Vec<usize> = items.iter().map(|&(_, l)| l).collect();
        let aug = config
            .predictor
            .augmentation
            .as_ref()
            .map(|g| (g, &mut rng));
        let batch = f_u.transform().batch(images, &idx, aug)?;
        let out = f_u.net().forward(&batch, true)?;
        let support = out
            .narrow(0, 0, n_support)?
            .reshape((ep.ways(), ep.shots(), a))?;
        let queries = out.narrow(0, n_support, labels.len())?;
        let log_probs = log_probs_tensor(
            &queries,
            &prototypes_tensor(&support)?,
            None,
            config.distance,
        )?;
        let l_cls = episode_loss_tensor(&log_probs, &labels)?;

        let s = draw(&mut rng);
        let h_s = rows_tensor(human, &s)?;
        let u_s = encode(&s)?;
        let u_s_fixed = u_s.detach();
        for _ in 0..config.critic_steps {
            let marginal = encode(&draw(&mut rng))?.detach();
            let bound = critic.lower_bound(&u_s_fixed, &marginal, &h_s)?;
            critic_opt.backward_step(&bound.neg()?)?;
        }
        let marginal = encode(&draw(&mut rng))?;
        let l_mi = critic.lower_bound(&u_s, &marginal, &h_s)?;
        let last_bound = l_mi.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let loss = (l_cls + (l_mi * config.lambda)?)?;
        opt.backward_step(&loss)?;

        if step % config.validate_every == 0 || step == config.outer_steps {
            let mut features = vec![Vec::new(); dataset.len()];
            for (i, row) in val_idx.iter().zip(f_u.predict(images, &val_idx)?) {
                features[*i] = row;
            }
            let accuracy = validate_unknown(
                &features,
                val,
                config.protocol,
                config.distance,
                config.validation_episodes,
                val_seed,
            )?;
            log::info!("f_u step {step}: val acc {accuracy:.2}%, MINE {last_bound:.4}");
            let record = UnknownValidation {
                step,
                accuracy,
                mine_estimate: last_bound,
            };
            if best.as_ref().is_none_or(|(b, _)| accuracy > b.accuracy) {
                best = Some((record.clone(), f_u.store().snapshot()?));
            }
            history.push(record);
        }
    }
    let (best, snapshot) =
        best.ok_or_else(|| Error::Config("unknown training needs at least one step".into()))?;
    f_u.store().restore(&snapshot)?;
    Ok(UnknownRun {
        predictor: f_u,
        history,
        best,
        config: config.clone(),
    })
}

/// Coordinate weights of the mixed space: the selection mask on the human
/// block, the gate value on every unknown coordinate.
pub fn mixed_weights(mask: &[f64], gate: f64, unknown_width: usize) -> Vec<f64> {
    let mut w = mask.to_vec();
    w.extend(std::iter::repeat_n(gate, unknown_width));
    w
}

/// Classifies in `concat(s ⊙ â, u · ā)`.
pub fn mixed_classify(
    human: &EpisodeFeatures,
    unknown: &EpisodeFeatures,
    mask: &[f64],
    gate: f64,
    distance: Distance,
) -> Result<EpisodeProbabilities> {
    if mask.len() != human.width() {
        return Err(Error::Validation(format!(
            "mask of width {} for {} human attributes",
            mask.len(),
            human.width()
        )));
    }
    if !(0.0..=1.0).contains(&gate) {
        return Err(Error::Validation(format!(
            "gate value {gate} outside [0, 1]"
        )));
    }
    let joined = human.concat(unknown)?;
    joined.classify(Some(&mixed_weights(mask, gate, unknown.width())), distance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::classify;
    use crate::dataset::{generate_synthetic, split_dataset, SyntheticSpec};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn episode(
        h: Vec<Vec<f64>>,
        hq: Vec<Vec<f64>>,
        u: Vec<Vec<f64>>,
        uq: Vec<Vec<f64>>,
    ) -> (EpisodeFeatures, EpisodeFeatures) {
        let labels = (0..hq.len()).map(|i| i % h.len()).collect::<Vec<_>>();
        (
            EpisodeFeatures {
                prototypes: h,
                queries: hq,
                labels: labels.clone(),
            },
            EpisodeFeatures {
                prototypes: u,
                queries: uq,
                labels,
            },
        )
    }

    #[test]
    fn gate_extremes() {
        let (h, u) = episode(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.9, 0.2], vec![0.4, 0.5]],
            vec![vec![0.0, 0.3], vec![1.0, 0.6]],
            vec![vec![0.9, 0.1], vec![0.2, 0.2]],
        );
        let mask = [1.0, 0.0];
        let closed = mixed_classify(&h, &u, &mask, 0.0, Distance::SquaredEuclidean).unwrap();
        let human_only = classify(
            &h.queries,
            &h.prototypes,
            Some(&mask),
            Distance::SquaredEuclidean,
        )
        .unwrap();
        assert_eq!(closed, human_only);

        let open = mixed_classify(&h, &u, &[1.0, 1.0], 1.0, Distance::SquaredEuclidean).unwrap();
        let full = h
            .concat(&u)
            .unwrap()
            .classify(None, Distance::SquaredEuclidean)
            .unwrap();
        assert_eq!(open, full);

        let unknown_only =
            mixed_classify(&h, &u, &[0.0, 0.0], 1.0, Distance::SquaredEuclidean).unwrap();
        assert_eq!(
            unknown_only,
            u.classify(None, Distance::SquaredEuclidean).unwrap()
        );

        assert!(mixed_classify(&h, &u, &[1.0], 0.5, Distance::SquaredEuclidean).is_err());
        assert!(mixed_classify(&h, &u, &mask, 1.5, Distance::SquaredEuclidean).is_err());
    }

    proptest! {
        #[test]
        fn closed_gate_equals_masked_human_space(
            h in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 3),
            q in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 4),
            u in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 3),
            uq in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 4),
            mask in prop::collection::vec(0u8..2, 3),
        ) {
            let mask: Vec<f64> = mask.into_iter().map(f64::from).collect();
            let (hf, uf) = episode(h, q, u, uq);
            let mixed = mixed_classify(&hf, &uf, &mask, 0.0, Distance::SquaredEuclidean).unwrap();
            let plain = classify(&hf.queries, &hf.prototypes, Some(&mask), Distance::SquaredEuclidean).unwrap();
            for (a, b) in mixed.probs.iter().flatten().zip(plain.probs.iter().flatten()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(mixed.predictions, plain.predictions);
        }
    }

    #[test]
    fn short_training_is_reproducible_and_checks_width() {
        let spec = SyntheticSpec::new(6, 3, 6, 0.0, 2)
            .with_image_size(16)
            .with_split(3, 2, 1);
        let ds = Arc::new(generate_synthetic(&spec).unwrap());
        let splits = split_dataset(&ds, ds.splits().unwrap()).unwrap();
        let images = PreparedImages::new(&ds, 16);
        let human: Vec<Vec<f64>> = (0..ds.len())
            .map(|i| ds.attributes_of(i).iter().map(|&v| v as f64).collect())
            .collect();
        let cfg = UnknownConfig {
            predictor: PredictorConfig {
                num_attributes: 3,
                hidden_channels: 4,
                image_size: 16,
                ..Default::default()
            },
            outer_steps: 4,
            critic_steps: 2,
            mine_batch: 6,
            critic_hidden: vec![6],
            validate_every: 2,
            validation_episodes: 3,
            protocol: Protocol {
                ways: 2,
                shots: 1,
                queries: 2,
            },
            ..Default::default()
        };
        let a = train_unknown_predictor(&human, &splits.base, &splits.validation, &images, &cfg, 9)
            .unwrap();
        let b = train_unknown_predictor(&human, &splits.base, &splits.validation, &images, &cfg, 9)
            .unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
        assert_eq!(
            a.predictor.store().digest().unwrap(),
            b.predictor.store().digest().unwrap()
        );

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("f_u");
        let side = a.sidecar(9, "fh").unwrap();
        a.predictor.save(&stem, &side).unwrap();
        let (back, side) = load_unknown(&stem).unwrap();
        let meta: UnknownMeta = AttributePredictor::extra_metadata(&side)
            .and_then(|v| Ok(serde_json::from_value(v)?))
            .unwrap();
        assert_eq!(meta.lambda, 2.0);
        assert_eq!(
            back.predict_all(&images).unwrap(),
            a.predictor.predict_all(&images).unwrap()
        );

        let wrong = UnknownConfig {
            predictor: PredictorConfig {
                num_attributes: 2,
                ..cfg.predictor.clone()
            },
            ..cfg
        };
        assert!(matches!(
            train_unknown_predictor(&human, &splits.base, &splits.validation, &images, &wrong, 9),
            Err(Error::Config(_))
        ));
    }
}

//! Simulated test-time intervention.
//!
//! For every misclassified query, a fixed fraction of the episode's selected
//! attributes is drawn uniformly without replacement. Each drawn coordinate
//! of the query is moved onto the mean of the prototypes whose classes share
//! the query's ground-truth value there, and the query is reclassified.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeDataset, Episode};
use crate::error::{Error, Result};
use crate::harness::confidence_interval;
use crate::inference::{EpisodeState, EpisodeTruth, FrozenModels, Space};

pub const INTERVENTION_SCHEMA: u32 = 1;

/// What an intervention aims at: the simulated human (ground truth) or a
/// user-chosen prototype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InterventionTarget {
    Named(NamedTarget),
    Prototype { prototype_class: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedTarget {
    GroundTruth,
}

impl InterventionTarget {
    pub const GROUND_TRUTH: Self = Self::Named(NamedTarget::GroundTruth);

    /// Episode classes whose prototypes the query moves toward.
    pub fn resolve(
        &self,
        truth: &EpisodeTruth,
        query_idx: usize,
        attr_idx: usize,
    ) -> Result<Vec<usize>> {
        match self {
            Self::Named(NamedTarget::GroundTruth) => {
                if query_idx >= truth.queries.len() || truth.queries[query_idx].len() <= attr_idx {
                    return Err(Error::InterventionRejected(format!(
                        "no ground truth for query {query_idx}, attribute {attr_idx}"
                    )));
                }
                Ok(truth.matching(query_idx, attr_idx))
            }
            Self::Prototype { prototype_class } => Ok(vec![*prototype_class]),
        }
    }
}

/// Number of attributes to intervene on: `⌈ratio · selected⌉`.
pub fn intervention_count(ratio: f64, selected: usize) -> usize {
    ((ratio * selected as f64).ceil() as usize).min(selected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub schema_version: u32,
    pub ratio: f64,
    pub space: Space,
    pub episodes: usize,
    /// Mean accuracy in percent before and after intervention.
    pub before: f64,
    pub after: f64,
    /// Half-width of the 95% interval of the after-accuracy, in points.
    pub ci95: f64,
    /// Mean per-episode gain and its 95% half-width, in points.
    pub gain: f64,
    pub gain_ci95: f64,
    pub intervened_queries: usize,
    pub seed: u64,
}

/// Runs the simulation over `episodes`. `seed` drives the attribute draws;
/// runs that share it draw identically at equal counts. In the mixed space
/// the unknown attributes take part in every episode, whatever the gate says.
pub fn simulate_intervention(
    models: &FrozenModels,
    dataset: &AttributeDataset,
    episodes: &[Episode],
    ratio: f64,
    space: Space,
    seed: u64,
) -> Result<InterventionReport> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "intervention ratio {ratio} outside [0, 1]"
        )));
    }
    if dataset.num_attributes() != models.human_width() {
        return Err(Error::MissingDependency(format!(
            "ground truth covers {} attributes, predictor emits {}",
            dataset.num_attributes(),
            models.human_width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut before = Vec::with_capacity(episodes.len());
    let mut after = Vec::with_capacity(episodes.len());
    let mut intervened_queries = 0;
    for episode in episodes {
        let mut state = EpisodeState::new(models, episode, space)?;
        state.engage_unknown();
        let probs = state.classify()?;
        let labels = state.labels().to_vec();
        let base_acc = 100.0 * probs.accuracy(&labels);
        before.push(base_acc);
        let selected: Vec<usize> = (0..state.human_width)
            .filter(|&j| state.selection.mask[j] > 0.0)
            .collect();
        let k = intervention_count(ratio, selected.len());
        if k == 0 {
            after.push(base_acc);
            continue;
        }
        let truth = EpisodeTruth::new(dataset, episode);
        let mut correct = 0usize;
        for (q, (&pred, &label)) in probs.predictions.iter().zip(&labels).enumerate() {
            if pred == label {
                correct += 1;
                continue;
            }
            intervened_queries += 1;
            let mut now = pred;
            for pick in index::sample(&mut rng, selected.len(), k) {
                let attr = selected[pick];
                let targets = truth.matching(q, attr);
                if targets.is_empty() {
                    continue;
                }
                now = state.intervene(q, attr, &targets)?.predicted_after;
            }
            correct += usize::from(now == label);
        }
        after.push(100.0 * correct as f64 / labels.len() as f64);
    }
    let (before_mean, _) = confidence_interval(&before)?;
    let (after_mean, ci95) = confidence_interval(&after)?;
    let gains: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    let (gain, gain_ci95) = confidence_interval(&gains)?;
    Ok(InterventionReport {
        schema_version: INTERVENTION_SCHEMA,
        ratio,
        space,
        episodes: episodes.len(),
        before: before_mean,
        after: after_mean,
        ci95,
        gain,
        gain_ci95,
        intervened_queries,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_round_up() {
        assert_eq!(intervention_count(0.0, 40), 0);
        assert_eq!(intervention_count(0.05, 8), 1);
        assert_eq!(intervention_count(0.10, 8), 1);
        assert_eq!(intervention_count(0.10, 31), 4);
        assert_eq!(intervention_count(0.05, 0), 0);
        assert_eq!(intervention_count(1.0, 3), 3);
    }

    #[test]
    fn target_json_forms() {
        let gt: InterventionTarget = serde_json::from_str("\"ground-truth\"").unwrap();
        assert_eq!(gt, InterventionTarget::GROUND_TRUTH);
        let p: InterventionTarget = serde_json::from_str(r#"{"prototype_class": 2}"#).unwrap();
        assert_eq!(p, InterventionTarget::Prototype { prototype_class: 2 });
        assert!(serde_json::from_str::<InterventionTarget>("\"oracle\"").is_err());
    }
}

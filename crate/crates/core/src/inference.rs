//! Frozen-model inference on single episodes.
//!
//! [`EpisodeState`] holds everything needed to classify one episode's
//! queries in the decision space: the selection mask, the gate decision,
//! the (possibly concatenated) feature rows and the coordinate weights.
//! Interventions mutate its query rows; [`EpisodeState::reset`] restores them.

use serde::{Deserialize, Serialize};

use crate::classifier::{Distance, EpisodeFeatures, EpisodeProbabilities};
use crate::dataset::{AttributeDataset, Episode};
use crate::error::{Error, Result};
use crate::gate::{gate_input, participates, ParticipationGate};
use crate::selector::{AttributeSelector, Selection};
use crate::unknown::mixed_weights;

/// Which coordinates take part in classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    /// Selected human-friendly attributes only.
    #[default]
    HumanFriendly,
    /// Human-friendly attributes plus unknown ones when the gate opens.
    Mixed,
}

#[derive(Clone, Copy)]
pub struct UnknownModels<'a> {
    pub features: &'a [Vec<f64>],
    pub gate: &'a ParticipationGate,
}

/// Borrowed frozen models. Feature tables are indexed by dataset image.
#[derive(Clone, Copy)]
pub struct FrozenModels<'a> {
    pub human: &'a [Vec<f64>],
    /// Without a selector every attribute is used.
    pub selector: Option<&'a AttributeSelector>,
    pub unknown: Option<UnknownModels<'a>>,
    pub distance: Distance,
}

impl FrozenModels<'_> {
    pub fn human_width(&self) -> usize {
        self.human.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub query_idx: usize,
    pub attr_idx: usize,
    /// Episode classes whose prototypes supplied the new value.
    pub targets: Vec<usize>,
    pub previous_value: f64,
    pub new_value: f64,
    /// Updated decision-space row of the query.
    pub query: Vec<f64>,
    pub probs_before: Vec<f64>,
    pub probs_after: Vec<f64>,
    pub predicted_before: usize,
    pub predicted_after: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub episode: Episode,
    pub space: Space,
    pub human_width: usize,
    pub selection: Selection,
    /// Gate value, present in the mixed space.
    pub gate: Option<f64>,
    /// Decision-space rows; in the mixed space the unknown block follows
    /// the human block.
    pub features: EpisodeFeatures,
    pub weights: Vec<f64>,
    pub distance: Distance,
    original_queries: Vec<Vec<f64>>,
}

impl EpisodeState {
    pub fn new(models: &FrozenModels, episode: &Episode, space: Space) -> Result<Self> {
        let human = EpisodeFeatures::gather(models.human, episode)?;
        let a = human.width();
        let selection = match models.selector {
            Some(s) => s.select(&human.prototypes)?,
            None => Selection {
                pi: vec![1.0; a],
                mask: vec![1.0; a],
            },
        };
        let (features, weights, gate) = match space {
            Space::HumanFriendly => {
                let w = selection.mask.clone();
                (human, w, None)
            }
            Space::Mixed => {
                let unknown = models.unknown.ok_or_else(|| {
                    Error::MissingDependency(
                        "mixed space needs unknown attributes and a gate".into(),
                    )
                })?;
                let u = EpisodeFeatures::gather(unknown.features, episode)?;
                let value = unknown.gate.gate_value(&gate_input(
                    &human.prototypes,
                    &u.prototypes,
                    &selection.mask,
                )?)?;
                let open = if participates(value) { 1.0 } else { 0.0 };
                let w = mixed_weights(&selection.mask, open, u.width());
                (human.concat(&u)?, w, Some(value))
            }
        };
        let original_queries = features.queries.clone();
        Ok(Self {
            episode: episode.clone(),
            space,
            human_width: a,
            selection,
            gate,
            features,
            weights,
            distance: models.distance,
            original_queries,
        })
    }

    /// True when the unknown attributes stay out of this episode.
    pub fn human_friendly(&self) -> bool {
        self.weights[self.human_width..].iter().all(|w| *w == 0.0)
    }

    /// Makes the unknown attributes take part regardless of the gate. No-op
    /// in the human-friendly space.
    pub fn engage_unknown(&mut self) {
        for w in &mut self.weights[self.human_width..] {
            *w = 1.0;
        }
    }

    pub fn classify(&self) -> Result<EpisodeProbabilities> {
        self.features.classify(Some(&self.weights), self.distance)
    }

    pub fn labels(&self) -> &[usize] {
        &self.features.labels
    }

    pub fn reset(&mut self) {
        self.features.queries.clone_from(&self.original_queries);
    }

    /// Sets query `query_idx`'s coordinate `attr_idx` to the mean of the
    /// `targets` prototypes at that coordinate and reclassifies it.
    ///
    /// Only selected human-friendly coordinates may be intervened on.
    pub fn intervene(
        &mut self,
        query_idx: usize,
        attr_idx: usize,
        targets: &[usize],
    ) -> Result<InterventionOutcome> {
        let rejected = |msg: String| Err(Error::InterventionRejected(msg));
        if query_idx >= self.features.queries.len() {
            return rejected(format!(
                "query {query_idx} does not exist ({} queries)",
                self.features.queries.len()
            ));
        }
        if attr_idx >= self.human_width {
            return rejected(format!(
                "attribute {attr_idx} is not a human-friendly attribute"
            ));
        }
        if self.selection.mask[attr_idx] <= 0.0 {
            return rejected(format!(
                "attribute {attr_idx} is not selected in this episode"
            ));
        }
        if targets.is_empty() {
            return rejected("no prototype shares the query's ground-truth value".into());
        }
        let n = self.features.prototypes.len();
        if let Some(t) = targets.iter().find(|&&t| t >= n) {
            return rejected(format!("prototype {t} does not exist ({n} classes)"));
        }
        let row = |q: &[f64], protos: &[Vec<f64>]| -> Result<EpisodeProbabilities> {
            crate::classifier::classify(&[q.to_vec()], protos, Some(&self.weights), self.distance)
        };
        let before = row(&self.features.queries[query_idx], &self.features.prototypes)?;
        let new_value = targets
            .iter()
            .map(|&t| self.features.prototypes[t][attr_idx])
            .sum::<f64>()
            / targets.len() as f64;
        let query = &mut self.features.queries[query_idx];
        let previous_value = query[attr_idx];
        query[attr_idx] = new_value;
        let query = query.clone();
        let after = row(&query, &self.features.prototypes)?;
        Ok(InterventionOutcome {
            query_idx,
            attr_idx,
            targets: targets.to_vec(),
            previous_value,
            new_value,
            query,
            probs_before: before.probs[0].clone(),
            probs_after: after.probs[0].clone(),
            predicted_before: before.predictions[0],
            predicted_after: after.predictions[0],
        })
    }
}

/// Ground-truth annotations of one episode: class-level rows of the episode
/// classes and per-image rows of the queries.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTruth {
    pub classes: Vec<Vec<u8>>,
    pub queries: Vec<Vec<u8>>,
}

impl EpisodeTruth {
    pub fn new(dataset: &AttributeDataset, episode: &Episode) -> Self {
        let classes = episode
            .classes
            .iter()
            .map(|&c| dataset.class_attributes(c, &dataset.images_of_class(c)))
            .collect();
        let queries = episode
            .query_items()
            .iter()
            .map(|&(i, _)| dataset.attributes_of(i).to_vec())
            .collect();
        Self { classes, queries }
    }

    /// Episode classes whose annotation at `attr` equals the query's.
    pub fn matching(&self, query_idx: usize, attr: usize) -> Vec<usize> {
        let want = self.queries[query_idx][attr];
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, row)| row[attr] == want)
            .map(|(c, _)| c)
            .collect()
    }
}

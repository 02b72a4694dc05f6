//! Episodic evaluation reports.
//!
//! # EvalReport JSON, schema version 1
//!
//! ```text
//! schema_version               integer, currently 1
//! space                        "human-friendly" | "mixed"
//! mean_accuracy                mean per-episode accuracy, percent
//! ci95                         1.96 * unbiased std / sqrt(episodes), percent
//! episodes                     E
//! avg_selected_attributes      mean selected human-friendly attributes per episode
//! pct_human_friendly_episodes  percent of episodes whose gate stayed closed
//! empty_selections             episodes whose selection mask was all zero
//! snapshot                     protocol {ways, shots, queries}, eval_seed,
//!                              distance, eta, beta, seeds {role: seed},
//!                              checkpoints {role: params digest}, config_hash
//! per_episode                  [{accuracy, selected, gate}] in sampling order
//! ```
//!
//! Two reports are comparable only when their protocol, episode count,
//! evaluation seed and distance agree.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Distance;
use crate::dataset::{DatasetView, Episode, Protocol};
use crate::error::{Error, Result};
use crate::inference::{EpisodeState, FrozenModels, Space};

pub const REPORT_SCHEMA: u32 = 1;
pub const DEFAULT_EPISODES: usize = 600;

/// `(mean, 1.96 · std / √E)` of per-episode accuracies, both in the units of
/// the input. Uses the unbiased standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    let e = values.len();
    if e < 2 {
        return Err(Error::Validation(format!(
            "a confidence interval needs at least 2 episodes, got {e}"
        )));
    }
    let n = e as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

/// Samples `count` episodes from `pool` with one generator seeded by `seed`.
/// Reports built from the same seed share their episodes.
pub fn sample_episodes(
    pool: &DatasetView,
    protocol: Protocol,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| protocol.sample(pool, &mut rng))
        .collect()
}

/// Provenance copied into every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub eta: Option<f64>,
    pub beta: Option<f64>,
    pub seeds: BTreeMap<String, u64>,
    pub checkpoints: BTreeMap<String, String>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub protocol: Protocol,
    pub eval_seed: u64,
    pub distance: Distance,
    #[serde(flatten)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Percent.
    pub accuracy: f64,
    pub selected: usize,
    pub gate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub space: Space,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub avg_selected_attributes: f64,
    pub pct_human_friendly_episodes: f64,
    pub empty_selections: usize,
    pub snapshot: ConfigSnapshot,
    pub per_episode: Vec<EpisodeRecord>,
}

impl EvalReport {
    /// Aggregates per-episode records.
    pub fn from_records(
        space: Space,
        records: Vec<EpisodeRecord>,
        snapshot: ConfigSnapshot,
    ) -> Result<Self> {
        let acc: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
        let (mean_accuracy, ci95) = confidence_interval(&acc)?;
        let e = records.len() as f64;
        let avg_selected_attributes = records.iter().map(|r| r.selected as f64).sum::<f64>() / e;
        let friendly = records
            .iter()
            .filter(|r| r.gate.is_none_or(|g| g < 0.5))
            .count();
        let empty_selections = records.iter().filter(|r| r.selected == 0).count();
        if empty_selections > 0 {
            log::warn!(
                "{empty_selections} of {} episodes selected no attribute",
                records.len()
            );
        }
        Ok(Self {
            schema_version: REPORT_SCHEMA,
            space,
            mean_accuracy,
            ci95,
            episodes: records.len(),
            avg_selected_attributes,
            pct_human_friendly_episodes: 100.0 * friendly as f64 / e,
            empty_selections,
            snapshot,
            per_episode: records,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA {
            return Err(Error::ReportMismatch(format!(
                "report schema {} is not the supported {REPORT_SCHEMA}",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

/// Classifies the queries of every episode with frozen models.
pub fn evaluate_episodes(
    models: &FrozenModels,
    episodes: &[Episode],
    space: Space,
    snapshot: ConfigSnapshot,
) -> Result<EvalReport> {
    let records = episodes
        .iter()
        .map(|episode| {
            let state = EpisodeState::new(models, episode, space)?;
            let accuracy = 100.0 * state.classify()?.accuracy(state.labels());
            Ok(EpisodeRecord {
                accuracy,
                selected: state.selection.count(),
                gate: state.gate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(space, records, snapshot)
}

/// Samples `episodes` episodes from `novel` with `seed` and evaluates them.
pub fn evaluate(
    models: &FrozenModels,
    novel: &DatasetView,
    protocol: Protocol,
    episodes: usize,
    space: Space,
    seed: u64,
    provenance: Provenance,
) -> Result<EvalReport> {
    let sampled = sample_episodes(novel, protocol, episodes, seed)?;
    let snapshot = ConfigSnapshot {
        protocol,
        eval_seed: seed,
        distance: models.distance,
        provenance,
    };
    evaluate_episodes(models, &sampled, space, snapshot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportComparison {
    pub baseline: f64,
    pub candidate: f64,
    /// Mean per-episode difference candidate − baseline and its 95%
    /// half-width, in points. Both reports score the same episodes.
    pub difference: f64,
    pub difference_ci95: f64,
    pub selected_difference: f64,
}

/// Paired comparison of two reports over the same episodes.
pub fn compare_reports(baseline: &EvalReport, candidate: &EvalReport) -> Result<ReportComparison> {
    let (a, b) = (&baseline.snapshot, &candidate.snapshot);
    let mut diffs = Vec::new();
    if a.protocol != b.protocol {
        diffs.push(format!("protocol {:?} vs {:?}", a.protocol, b.protocol));
    }
    if baseline.episodes != candidate.episodes {
        diffs.push(format!(
            "episodes {} vs {}",
            baseline.episodes, candidate.episodes
        ));
    }
    if a.eval_seed != b.eval_seed {
        diffs.push(format!("eval seed {} vs {}", a.eval_seed, b.eval_seed));
    }
    if a.distance != b.distance {
        diffs.push(format!("distance {:?} vs {:?}", a.distance, b.distance));
    }
    if !diffs.is_empty() {
        return Err(Error::ReportMismatch(diffs.join(", ")));
    }
    let paired: Vec<f64> = baseline
        .per_episode
        .iter()
        .zip(&candidate.per_episode)
        .map(|(x, y)| y.accuracy - x.accuracy)
        .collect();
    let (difference, difference_ci95) = confidence_interval(&paired)?;
    Ok(ReportComparison {
        baseline: baseline.mean_accuracy,
        candidate: candidate.mean_accuracy,
        difference,
        difference_ci95,
        selected_difference: candidate.avg_selected_attributes - baseline.avg_selected_attributes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snapshot(seed: u64) -> ConfigSnapshot {
        ConfigSnapshot {
            protocol: Protocol::default(),
            eval_seed: seed,
            distance: Distance::SquaredEuclidean,
            provenance: Provenance::default(),
        }
    }

    fn records(acc: &[f64]) -> Vec<EpisodeRecord> {
        acc.iter()
            .map(|&a| EpisodeRecord {
                accuracy: a,
                selected: 3,
                gate: None,
            })
            .collect()
    }

    #[test]
    fn interval_examples() {
        assert_eq!(confidence_interval(&[80.0; 5]).unwrap(), (80.0, 0.0));
        // oracle: std of {0, 100} is 100/√2, so 1.96·(100/√2)/√2 = 98.0
        let (m, ci) = confidence_interval(&[0.0, 100.0]).unwrap();
        assert_eq!(m, 50.0);
        assert!((ci - 98.0).abs() < 1e-12);
        // oracle: 300 zeros and 300 hundreds, std = 100·√(150/599)
        let alt: Vec<f64> = (0..600)
            .map(|i| if i % 2 == 0 { 0.0 } else { 100.0 })
            .collect();
        let (m, ci) = confidence_interval(&alt).unwrap();
        assert_eq!(m, 50.0);
        let oracle = 1.96 * 100.0 * (150.0f64 / 599.0).sqrt() / 600f64.sqrt();
        assert!((ci - oracle).abs() < 1e-12);
        assert!((ci - 4.0).abs() < 0.01);
        assert!(confidence_interval(&[1.0]).is_err());
    }

    #[test]
    fn bernoulli_interval_width() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // each episode averages five Bernoulli(0.6) queries; the expected
        // half-width is 1.96·100·√(0.24/5)/√600 ≈ 1.75
        let acc: Vec<f64> = (0..600)
            .map(|_| 100.0 * (0..5).filter(|_| rng.random_bool(0.6)).count() as f64 / 5.0)
            .collect();
        let (m, ci) = confidence_interval(&acc).unwrap();
        assert!((1.5..=2.5).contains(&ci), "{ci}");
        assert!((m - 60.0).abs() < 3.0 * ci);
    }

    #[test]
    fn constant_half_gives_zero_width() {
        let r = EvalReport::from_records(Space::HumanFriendly, records(&[50.0; 600]), snapshot(0))
            .unwrap();
        assert_eq!((r.mean_accuracy, r.ci95), (50.0, 0.0));
        assert_eq!(r.pct_human_friendly_episodes, 100.0);
        assert_eq!(r.avg_selected_attributes, 3.0);
    }

    #[test]
    fn human_friendly_percentage_uses_the_gate() {
        let mut recs = records(&[10.0, 20.0, 30.0, 40.0]);
        recs[0].gate = Some(0.7);
        recs[1].gate = Some(0.5);
        recs[2].gate = Some(0.49);
        recs[3].selected = 0;
        let r = EvalReport::from_records(Space::Mixed, recs, snapshot(0)).unwrap();
        assert_eq!(r.pct_human_friendly_episodes, 50.0);
        assert_eq!(r.empty_selections, 1);
    }

    #[test]
    fn comparison_refuses_mismatched_protocols() {
        let a = EvalReport::from_records(Space::HumanFriendly, records(&[50.0, 60.0]), snapshot(0))
            .unwrap();
        let b = EvalReport::from_records(Space::HumanFriendly, records(&[55.0, 70.0]), snapshot(1))
            .unwrap();
        assert!(matches!(
            compare_reports(&a, &b),
            Err(Error::ReportMismatch(_))
        ));
        let mut c = b.clone();
        c.snapshot.eval_seed = 0;
        let cmp = compare_reports(&a, &c).unwrap();
        assert_eq!(cmp.difference, 7.5);
        let mut d = c.clone();
        d.snapshot.protocol.shots = 5;
        assert!(compare_reports(&a, &d).is_err());
    }

    #[test]
    fn json_roundtrip_and_schema_check() {
        let r = EvalReport::from_records(Space::HumanFriendly, records(&[50.0, 60.0]), snapshot(4))
            .unwrap();
        let text = r.to_json().unwrap();
        assert_eq!(EvalReport::from_json(&text).unwrap(), r);
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(
            EvalReport::from_json(&bumped),
            Err(Error::ReportMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn accuracy_is_order_invariant(acc in prop::collection::vec(0.0f64..100.0, 2..40), seed in 0u64..50) {
            use rand::seq::SliceRandom;
            let mut shuffled = acc.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = EvalReport::from_records(Space::HumanFriendly, records(&acc), snapshot(0)).unwrap();
            let b = EvalReport::from_records(Space::HumanFriendly, records(&shuffled), snapshot(0)).unwrap();
            prop_assert!((a.mean_accuracy - b.mean_accuracy).abs() < 1e-9);
            prop_assert!((a.ci95 - b.ci95).abs() < 1e-9);
        }
    }
}

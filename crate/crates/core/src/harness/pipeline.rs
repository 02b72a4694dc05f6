//! Staged, resumable experiment runs.
//!
//! Layout of an output directory:
//!
//! ```text
//! config.toml                 the config as run
//! run.json                    config hash, checkpoints used and reports written
//! checkpoints/<role>-<key>.*  safetensors + sidecar per trained model
//! logs/<role>-<key>.json      validation history of each training run
//! reports/*.json              evaluation and intervention reports
//! ```
//!
//! A checkpoint key hashes the stage's resolved config, its seed, the
//! dataset fingerprint and the digests of every upstream model, so a stage
//! is skipped exactly when an identical run already produced it.
//!
//! Evaluation uses g_h when its checkpoint exists or the selector stage is
//! requested and falls back to every attribute otherwise. The mixed-space
//! report is written only when both f_u and g_u are available.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, config_hash};
use crate::classifier::Distance;
use crate::dataset::preprocess::PreparedImages;
use crate::dataset::{split_dataset, AttributeDataset, Episode, Splits};
use crate::error::{Error, Result};
use crate::gate::{train_gate, GateInputs, ParticipationGate};
use crate::inference::{FrozenModels, Space, UnknownModels};
use crate::intervention::{simulate_intervention, InterventionReport};
use crate::predictor::{train_attribute_predictor, AttributePredictor, PREDICTOR_KIND};
use crate::selector::{train_selector, AttributeSelector};
use crate::unknown::{load_unknown, train_unknown_predictor};

use super::config::{ExperimentConfig, ResolvedConfigs, Stage};
use super::report::{evaluate_episodes, sample_episodes, ConfigSnapshot, EvalReport, Provenance};

pub const RUN_SCHEMA: u32 = 1;

/// Seed of each trained role, offset from the experiment seed.
pub fn role_seed(base: u64, role: &str) -> u64 {
    let offset = match role {
        "f_h" => 0,
        "g_h" => 1,
        "f_u" => 2,
        _ => 3,
    };
    base.wrapping_add(offset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub role: String,
    pub stem: PathBuf,
    pub digest: String,
    /// True when the checkpoint existed and was loaded instead of trained.
    pub resumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eta: f64,
    pub avg_selected_attributes: f64,
    pub mean_accuracy: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub checkpoints: Vec<StageRecord>,
    /// Relative to the output directory.
    pub reports: Vec<PathBuf>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(
            dir.join("run.json"),
        )?)?)
    }

    /// Stem of the last checkpoint recorded for `role`.
    pub fn stem_of(&self, role: &str) -> Option<&Path> {
        self.checkpoints
            .iter()
            .rev()
            .find(|r| r.role == role)
            .map(|r| r.stem.as_path())
    }
}

/// SHA-256 over class ids, names, labels, annotations and pixels.
pub fn dataset_fingerprint(ds: &AttributeDataset) -> String {
    let mut h = Sha256::new();
    for id in ds.class_ids() {
        h.update(id.to_le_bytes());
    }
    for name in ds.class_names().iter().chain(ds.attribute_names()) {
        h.update(name.as_bytes());
        h.update([0]);
    }
    for i in 0..ds.len() {
        h.update(ds.image_id(i).as_bytes());
        h.update((ds.label(i) as u64).to_le_bytes());
        h.update(ds.attributes_of(i));
        h.update(ds.image(i).as_raw());
    }
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct StageKey<'a, C: Serialize> {
    role: &'a str,
    config: &'a C,
    seed: u64,
    dataset: &'a str,
    upstream: &'a BTreeMap<String, String>,
}

struct Human {
    digest: String,
    features: Vec<Vec<f64>>,
}

struct Unknown {
    digest: String,
    features: Vec<Vec<f64>>,
}

struct Selector {
    model: AttributeSelector,
    digest: String,
}

struct Gate {
    model: ParticipationGate,
    digest: String,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    dataset: Arc<AttributeDataset>,
    splits: Splits,
    resolved: ResolvedConfigs,
    manifest: RunManifest,
}

impl Run<'_> {
    fn stem<C: Serialize>(
        &self,
        role: &str,
        config: &C,
        upstream: &BTreeMap<String, String>,
    ) -> Result<PathBuf> {
        let key = StageKey {
            role,
            config,
            seed: role_seed(self.cfg.seed, role),
            dataset: &self.manifest.dataset_fingerprint,
            upstream,
        };
        let hash = config_hash(&key)?;
        Ok(self
            .dir
            .join("checkpoints")
            .join(format!("{role}-{}", &hash[..16])))
    }

    /// True to resume from `stem`, false to train into it; an error naming
    /// the checkpoint when neither is possible.
    fn locate(&self, stage: Stage, role: &str, stem: &Path) -> Result<bool> {
        if checkpoint::exists(stem) {
            log::info!("{role}: resuming from {}", stem.display());
            Ok(true)
        } else if self.cfg.wants(stage) {
            log::info!("{role}: training into {}", stem.display());
            Ok(false)
        } else {
            Err(Error::MissingDependency(format!(
                "{role} checkpoint {} not found and the {} stage was not requested",
                checkpoint::sidecar_path(stem).display(),
                stage_name(stage)
            )))
        }
    }

    fn record(&mut self, role: &str, stem: PathBuf, digest: &str, resumed: bool) {
        if !self.manifest.checkpoints.iter().any(|r| r.stem == stem) {
            self.manifest.checkpoints.push(StageRecord {
                role: role.into(),
                stem,
                digest: digest.into(),
                resumed,
            });
        }
    }

    fn write_log<T: Serialize>(&self, stem: &Path, history: &T) -> Result<()> {
        let name = stem.file_name().expect("stem has a file name");
        let path = self.dir.join("logs").join(name).with_extension("json");
        fs::create_dir_all(path.parent().expect("logs dir"))?;
        fs::write(path, serde_json::to_string_pretty(history)?)?;
        Ok(())
    }

    fn write_report<T: Serialize>(&mut self, name: &str, report: &T) -> Result<()> {
        let rel = PathBuf::from("reports").join(name);
        let path = self.dir.join(&rel);
        fs::create_dir_all(path.parent().expect("reports dir"))?;
        fs::write(&path, serde_json::to_string_pretty(report)? + "\n")?;
        self.manifest.reports.push(rel);
        Ok(())
    }

    fn human_stem(&self) -> Result<PathBuf> {
        self.stem("f_h", &self.resolved.predictor, &BTreeMap::new())
    }

    fn human(&mut self) -> Result<Human> {
        let config = self.resolved.predictor.clone();
        let stem = self.human_stem()?;
        let resumed = self.locate(Stage::Predictor, "f_h", &stem)?;
        let images = PreparedImages::new(&self.dataset, config.image_size);
        let (model, digest) = if resumed {
            let (model, side) = AttributePredictor::load(&stem, PREDICTOR_KIND)?;
            (model, side.params_digest)
        } else {
            let seed = role_seed(self.cfg.seed, "f_h");
            let run = train_attribute_predictor(
                &self.splits.base,
                &self.splits.validation,
                &images,
                &config,
                seed,
            )?;
            let meta = serde_json::json!({ "best_epoch": run.best_epoch, "best": run.best() });
            let side = run.predictor.sidecar(PREDICTOR_KIND, seed, meta)?;
            run.predictor.save(&stem, &side)?;
            self.write_log(&stem, &run.history)?;
            (run.predictor, side.params_digest)
        };
        self.record("f_h", stem, &digest, resumed);
        Ok(Human {
            features: model.predict_all(&images)?,
            digest,
        })
    }

    fn selector_stem(
        &self,
        human: &Human,
        eta: f64,
    ) -> Result<(PathBuf, crate::selector::SelectorConfig)> {
        let mut config = self.resolved.selector.clone();
        config.eta = eta;
        let upstream = BTreeMap::from([("f_h".to_string(), human.digest.clone())]);
        Ok((self.stem("g_h", &config, &upstream)?, config))
    }

    fn selector(&mut self, human: &Human, eta: f64) -> Result<Selector> {
        let (stem, config) = self.selector_stem(human, eta)?;
        let resumed = self.locate(Stage::Selector, "g_h", &stem)?;
        let (model, digest) = if resumed {
            let (model, side) = AttributeSelector::load(&stem)?;
            (model, side.params_digest)
        } else {
            let seed = role_seed(self.cfg.seed, "g_h");
            let run = train_selector(
                &human.features,
                &self.splits.base,
                &self.splits.validation,
                &config,
                seed,
            )?;
            let side = run.sidecar(seed, &human.digest)?;
            run.selector.save(&stem, &side)?;
            self.write_log(&stem, &run.history)?;
            (run.selector, side.params_digest)
        };
        self.record("g_h", stem, &digest, resumed);
        Ok(Selector { model, digest })
    }

    fn unknown_stem(&self, human: &Human) -> Result<PathBuf> {
        let upstream = BTreeMap::from([("f_h".to_string(), human.digest.clone())]);
        self.stem("f_u", &self.resolved.unknown, &upstream)
    }

    fn unknown(&mut self, human: &Human) -> Result<Unknown> {
        let config = self.resolved.unknown.clone();
        let stem = self.unknown_stem(human)?;
        let resumed = self.locate(Stage::Unknown, "f_u", &stem)?;
        let images = PreparedImages::new(&self.dataset, config.predictor.image_size);
        let (model, digest) = if resumed {
            let (model, side) = load_unknown(&stem)?;
            (model, side.params_digest)
        } else {
            let seed = role_seed(self.cfg.seed, "f_u");
            let run = train_unknown_predictor(
                &human.features,
                &self.splits.base,
                &self.splits.validation,
                &images,
                &config,
                seed,
            )?;
            let side = run.sidecar(seed, &human.digest)?;
            run.predictor.save(&stem, &side)?;
            self.write_log(&stem, &run.history)?;
            (run.predictor, side.params_digest)
        };
        self.record("f_u", stem, &digest, resumed);
        Ok(Unknown {
            features: model.predict_all(&images)?,
            digest,
        })
    }

    fn gate_stem(
        &self,
        human: &Human,
        selector: &Selector,
        unknown: &Unknown,
    ) -> Result<(PathBuf, BTreeMap<String, String>)> {
        let upstream = BTreeMap::from([
            ("f_h".to_string(), human.digest.clone()),
            ("g_h".to_string(), selector.digest.clone()),
            ("f_u".to_string(), unknown.digest.clone()),
        ]);
        Ok((self.stem("g_u", &self.resolved.gate, &upstream)?, upstream))
    }

    fn gate(&mut self, human: &Human, selector: &Selector, unknown: &Unknown) -> Result<Gate> {
        let config = self.resolved.gate.clone();
        let (stem, upstream) = self.gate_stem(human, selector, unknown)?;
        let resumed = self.locate(Stage::Gate, "g_u", &stem)?;
        let (model, digest) = if resumed {
            let (model, side) = ParticipationGate::load(&stem)?;
            (model, side.params_digest)
        } else {
            let seed = role_seed(self.cfg.seed, "g_u");
            let inputs = GateInputs {
                human: &human.features,
                unknown: &unknown.features,
                selector: &selector.model,
            };
            let run = train_gate(
                inputs,
                &self.splits.base,
                &self.splits.validation,
                &config,
                seed,
            )?;
            let side = run.sidecar(seed, upstream)?;
            run.gate.save(&stem, &side)?;
            self.write_log(&stem, &run.history)?;
            (run.gate, side.params_digest)
        };
        self.record("g_u", stem, &digest, resumed);
        Ok(Gate { model, digest })
    }

    fn provenance(
        &self,
        human: &Human,
        selector: Option<&Selector>,
        mixed: Option<(&Unknown, &Gate)>,
    ) -> Result<Provenance> {
        let mut p = Provenance {
            config_hash: Some(self.manifest.config_hash.clone()),
            ..Provenance::default()
        };
        let mut add = |role: &str, digest: &str| {
            p.seeds
                .insert(role.to_string(), role_seed(self.cfg.seed, role));
            p.checkpoints.insert(role.to_string(), digest.to_string());
        };
        add("f_h", &human.digest);
        if let Some(s) = selector {
            add("g_h", &s.digest);
        }
        if let Some((u, g)) = mixed {
            add("f_u", &u.digest);
            add("g_u", &g.digest);
        }
        p.eta = selector.map(|s| s.model.config().eta);
        p.beta = mixed.map(|(_, g)| g.model.config().beta);
        Ok(p)
    }

    fn evaluate(
        &mut self,
        name: &str,
        episodes: &[Episode],
        models: &FrozenModels,
        space: Space,
        provenance: Provenance,
    ) -> Result<EvalReport> {
        let snapshot = ConfigSnapshot {
            protocol: self.cfg.protocol,
            eval_seed: self.cfg.evaluation.seed,
            distance: models.distance,
            provenance,
        };
        let report = evaluate_episodes(models, episodes, space, snapshot)?;
        log::info!(
            "{name}: {:.2} ± {:.2}%, {:.2} attributes, {:.1}% human-friendly",
            report.mean_accuracy,
            report.ci95,
            report.avg_selected_attributes,
            report.pct_human_friendly_episodes
        );
        self.write_report(&format!("{name}.json"), &report)?;
        Ok(report)
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Predictor => "predictor",
        Stage::Selector => "selector",
        Stage::Unknown => "unknown",
        Stage::Gate => "gate",
        Stage::Evaluate => "evaluate",
        Stage::Intervene => "intervene",
    }
}

/// File-name form of η, e.g. `1e-3`.
pub fn eta_label(eta: f64) -> String {
    format!("{eta:e}")
}

/// Frozen models of a run, loaded or trained.
pub struct Artifacts {
    pub dataset: Arc<AttributeDataset>,
    pub splits: Splits,
    pub manifest: RunManifest,
    pub distance: Distance,
    /// f_h outputs for every dataset image.
    pub human: Vec<Vec<f64>>,
    pub selector: Option<AttributeSelector>,
    /// f_u outputs for every dataset image.
    pub unknown: Option<Vec<Vec<f64>>>,
    pub gate: Option<ParticipationGate>,
}

impl Artifacts {
    pub fn frozen(&self) -> FrozenModels<'_> {
        let unknown = match (&self.unknown, &self.gate) {
            (Some(features), Some(gate)) => Some(UnknownModels { features, gate }),
            _ => None,
        };
        FrozenModels {
            human: &self.human,
            selector: self.selector.as_ref(),
            unknown,
            distance: self.distance,
        }
    }
}

fn open(cfg: &ExperimentConfig) -> Result<Run<'_>> {
    let dataset = cfg.load_dataset()?;
    let splits = split_dataset(&dataset, &cfg.split_for(&dataset)?)?;
    let resolved = cfg.resolved(dataset.num_attributes());
    let manifest = RunManifest {
        schema_version: RUN_SCHEMA,
        config_hash: cfg.hash()?,
        dataset_fingerprint: dataset_fingerprint(&dataset),
        checkpoints: Vec::new(),
        reports: Vec::new(),
    };
    Ok(Run {
        cfg,
        dir: cfg.output_dir.clone(),
        dataset,
        splits,
        resolved,
        manifest,
    })
}

struct Models {
    human: Human,
    selector: Option<Selector>,
    unknown: Option<Unknown>,
    gate: Option<Gate>,
}

/// Trains requested stages and loads the rest. With `consumers` set,
/// optional models are loaded whenever their checkpoints exist.
fn models(run: &mut Run, consumers: bool) -> Result<Models> {
    let cfg = run.cfg;
    let human = run.human()?;
    let (selector_stem, _) = run.selector_stem(&human, run.resolved.selector.eta)?;
    let selector = if cfg.wants(Stage::Selector)
        || cfg.wants(Stage::Gate)
        || (consumers && checkpoint::exists(&selector_stem))
    {
        Some(run.selector(&human, run.resolved.selector.eta)?)
    } else {
        None
    };
    let unknown_stem = run.unknown_stem(&human)?;
    let unknown = if cfg.wants(Stage::Unknown)
        || cfg.wants(Stage::Gate)
        || (consumers && checkpoint::exists(&unknown_stem))
    {
        Some(run.unknown(&human)?)
    } else {
        None
    };
    let gate = match (&selector, &unknown) {
        (Some(s), Some(u)) => {
            let (stem, _) = run.gate_stem(&human, s, u)?;
            if cfg.wants(Stage::Gate) || (consumers && checkpoint::exists(&stem)) {
                Some(run.gate(&human, s, u)?)
            } else {
                None
            }
        }
        _ => None,
    };
    Ok(Models {
        human,
        selector,
        unknown,
        gate,
    })
}

/// Loads the frozen models a finished run left in `cfg.output_dir`
/// without training anything. f_h is required; the rest are optional.
pub fn load_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let load_only = ExperimentConfig {
        stages: Vec::new(),
        ..cfg.clone()
    };
    let mut run = open(&load_only)?;
    let m = models(&mut run, true)?;
    Ok(Artifacts {
        dataset: run.dataset,
        splits: run.splits,
        manifest: run.manifest,
        distance: cfg.distance,
        human: m.human.features,
        selector: m.selector.map(|s| s.model),
        unknown: m.unknown.map(|u| u.features),
        gate: m.gate.map(|g| g.model),
    })
}

/// Runs the requested stages of `cfg` in dependency order and returns the
/// manifest it also writes to `run.json`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunManifest> {
    if cfg.stages.is_empty() {
        return Err(Error::Config("no stage requested".into()));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut run = open(cfg)?;
    let later = |stages: &[Stage]| stages.iter().any(|&s| cfg.wants(s));
    let consumers = later(&[Stage::Evaluate, Stage::Intervene]);
    let Models {
        human,
        selector,
        unknown,
        gate,
    } = models(&mut run, consumers)?;
    let dataset = run.dataset.clone();

    if consumers {
        let episodes = sample_episodes(
            &run.splits.novel,
            cfg.protocol,
            cfg.evaluation.episodes,
            cfg.evaluation.seed,
        )?;
        let mixed = match (&unknown, &gate) {
            (Some(u), Some(g)) => Some(UnknownModels {
                features: &u.features,
                gate: &g.model,
            }),
            _ => None,
        };
        let models = FrozenModels {
            human: &human.features,
            selector: selector.as_ref().map(|s| &s.model),
            unknown: mixed,
            distance: cfg.distance,
        };
        let mixed_parts = unknown.as_ref().zip(gate.as_ref());
        let mut spaces = vec![Space::HumanFriendly];
        if mixed.is_some() {
            spaces.push(Space::Mixed);
        }

        if cfg.wants(Stage::Evaluate) {
            let prov = run.provenance(&human, selector.as_ref(), None)?;
            run.evaluate(
                "eval-human-friendly",
                &episodes,
                &models,
                Space::HumanFriendly,
                prov,
            )?;
            if mixed.is_some() {
                let prov = run.provenance(&human, selector.as_ref(), mixed_parts)?;
                run.evaluate("eval-mixed", &episodes, &models, Space::Mixed, prov)?;
            }
            let mut rows = Vec::new();
            for &eta in &cfg.eta_sweep {
                let sel = run.selector(&human, eta)?;
                let sweep_models = FrozenModels {
                    selector: Some(&sel.model),
                    unknown: None,
                    ..models
                };
                let prov = run.provenance(&human, Some(&sel), None)?;
                let report = run.evaluate(
                    &format!("eta-sweep/eval-eta-{}", eta_label(eta)),
                    &episodes,
                    &sweep_models,
                    Space::HumanFriendly,
                    prov,
                )?;
                rows.push(EtaRow {
                    eta,
                    avg_selected_attributes: report.avg_selected_attributes,
                    mean_accuracy: report.mean_accuracy,
                    ci95: report.ci95,
                });
            }
            if !rows.is_empty() {
                run.write_report("eta-sweep.json", &rows)?;
            }
        }

        if cfg.wants(Stage::Intervene) {
            let mut reports: Vec<InterventionReport> = Vec::new();
            for &space in &spaces {
                for &ratio in &cfg.intervention.ratios {
                    let r = simulate_intervention(
                        &models,
                        &dataset,
                        &episodes,
                        ratio,
                        space,
                        cfg.intervention.seed,
                    )?;
                    log::info!(
                        "intervention {space:?} r={ratio}: {:.2} → {:.2} ± {:.2}",
                        r.before,
                        r.after,
                        r.ci95
                    );
                    reports.push(r);
                }
            }
            run.write_report("intervention.json", &reports)?;
        }
    }

    fs::write(
        cfg.output_dir.join("run.json"),
        serde_json::to_string_pretty(&run.manifest)? + "\n",
    )?;
    Ok(run.manifest)
}

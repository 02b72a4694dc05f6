use std::fs;
use std::path::Path;

use ifsl_core::dataset::{Protocol, SyntheticSpec};
use ifsl_core::harness::{
    run_pipeline, DatasetSource, EtaRow, EvalReport, ExperimentConfig, Stage,
};
use ifsl_core::intervention::InterventionReport;
use ifsl_core::Error;

fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetSource::Synthetic(
            SyntheticSpec::new(12, 4, 6, 0.1, 3)
                .with_image_size(24)
                .with_split(6, 3, 3),
        ),
        protocol: Protocol {
            ways: 3,
            shots: 1,
            queries: 2,
        },
        output_dir: dir.to_path_buf(),
        seed: 5,
        ..ExperimentConfig::default()
    };
    cfg.predictor.hidden_channels = 4;
    cfg.predictor.image_size = 16;
    cfg.predictor.epochs = 1;
    cfg.predictor.batch_size = 16;
    cfg.selector.hidden = 4;
    cfg.selector.episodes = 4;
    cfg.selector.validate_every = 2;
    cfg.selector.validation_episodes = 3;
    cfg.unknown.predictor = cfg.predictor.clone();
    cfg.unknown.outer_steps = 2;
    cfg.unknown.critic_steps = 1;
    cfg.unknown.mine_batch = 4;
    cfg.unknown.critic_hidden = vec![4];
    cfg.unknown.validate_every = 2;
    cfg.unknown.validation_episodes = 3;
    cfg.gate.hidden = 4;
    cfg.gate.episodes = 4;
    cfg.gate.validate_every = 2;
    cfg.gate.validation_episodes = 3;
    cfg.evaluation.episodes = 8;
    cfg
}

#[test]
fn selector_without_predictor_names_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.stages = vec![Stage::Selector];
    match run_pipeline(&cfg) {
        Err(Error::MissingDependency(msg)) => assert!(msg.contains("f_h checkpoint"), "{msg}"),
        other => panic!("expected a dependency error, got {other:?}"),
    }
}

#[test]
fn full_run_resumes_and_reproduces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.eta_sweep = vec![0.0, 1e-3];
    let first = run_pipeline(&cfg).unwrap();
    let roles: Vec<&str> = first.checkpoints.iter().map(|r| r.role.as_str()).collect();
    assert_eq!(roles, ["f_h", "g_h", "f_u", "g_u", "g_h"]);
    assert!(first.checkpoints.iter().all(|r| !r.resumed));

    let read = |name: &str| fs::read_to_string(dir.path().join("reports").join(name)).unwrap();
    let human = EvalReport::from_json(&read("eval-human-friendly.json")).unwrap();
    assert_eq!(human.episodes, 8);
    assert_eq!(human.pct_human_friendly_episodes, 100.0);
    assert!(human.avg_selected_attributes <= 4.0);
    assert_eq!(
        human.snapshot.provenance.config_hash.as_deref(),
        Some(first.config_hash.as_str())
    );
    assert!(human.snapshot.provenance.checkpoints.contains_key("g_h"));
    let mixed = EvalReport::from_json(&read("eval-mixed.json")).unwrap();
    assert!(mixed.snapshot.provenance.beta.is_some());
    let rows: Vec<EtaRow> = serde_json::from_str(&read("eta-sweep.json")).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.eta).collect::<Vec<_>>(),
        vec![0.0, 1e-3]
    );
    let interventions: Vec<InterventionReport> =
        serde_json::from_str(&read("intervention.json")).unwrap();
    assert_eq!(interventions.len(), 6);
    for r in interventions.iter().filter(|r| r.ratio == 0.0) {
        assert_eq!(r.before, r.after);
    }
    assert!(dir.path().join("config.toml").exists() && dir.path().join("run.json").exists());

    let before = read("eval-human-friendly.json");
    let mixed_before = read("eval-mixed.json");
    let second = run_pipeline(&cfg).unwrap();
    assert!(second.checkpoints.iter().all(|r| r.resumed));
    assert_eq!(read("eval-human-friendly.json"), before);
    assert_eq!(read("eval-mixed.json"), mixed_before);

    // evaluation alone reuses every checkpoint
    cfg.stages = vec![Stage::Evaluate];
    cfg.eta_sweep.clear();
    let third = run_pipeline(&cfg).unwrap();
    assert_eq!(third.checkpoints.len(), 4);
    let again = EvalReport::from_json(&read("eval-human-friendly.json")).unwrap();
    assert_eq!(again.per_episode, human.per_episode);
    assert_eq!(
        again.snapshot.provenance.checkpoints,
        human.snapshot.provenance.checkpoints
    );
    assert_ne!(
        again.snapshot.provenance.config_hash,
        human.snapshot.provenance.config_hash
    );
}

#[test]
fn changed_upstream_invalidates_downstream_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.stages = vec![Stage::Predictor, Stage::Selector];
    let first = run_pipeline(&cfg).unwrap();
    cfg.predictor.hidden_channels = 5;
    cfg.stages = vec![Stage::Selector];
    assert!(matches!(
        run_pipeline(&cfg),
        Err(Error::MissingDependency(_))
    ));
    cfg.stages = vec![Stage::Predictor, Stage::Selector];
    let second = run_pipeline(&cfg).unwrap();
    assert_ne!(first.stem_of("f_h"), second.stem_of("f_h"));
    assert_ne!(first.stem_of("g_h"), second.stem_of("g_h"));
}

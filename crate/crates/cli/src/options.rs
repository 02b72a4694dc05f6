//! Flags shared by the pipeline subcommands. Every flag overrides the
//! matching field of the config file, or of the defaults when none is given.

use std::path::PathBuf;

use clap::Args;
use ifsl_core::classifier::Distance;
use ifsl_core::dataset::{DatasetFormat, SyntheticSpec};
use ifsl_core::harness::{DatasetSource, ExperimentConfig};

#[derive(Debug, Clone, Default, Args)]
pub struct CommonOptions {
    /// TOML or JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory in the csv-directory layout instead of the synthetic benchmark.
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    /// squared-euclidean or cosine.
    #[arg(long, value_parser = parse_distance)]
    pub distance: Option<Distance>,
    /// Keep only the first ceil(fraction * A) attributes.
    #[arg(long)]
    pub attribute_fraction: Option<f64>,
    /// Evaluation episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    /// Predictor epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Selector sparsity weight.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Extra selectors to train and evaluate, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub eta_sweep: Option<Vec<f64>>,
    #[arg(long)]
    pub selector_episodes: Option<usize>,
    /// Mutual information weight of the unknown predictor.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub unknown_steps: Option<usize>,
    /// Gate participation penalty.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gate_episodes: Option<usize>,
}

fn parse_distance(s: &str) -> Result<Distance, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown distance '{s}'"))
}

impl CommonOptions {
    pub fn load(&self) -> ifsl_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_path(path)?,
            None => ExperimentConfig::default(),
        };
        self.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(path) = &self.dataset_dir {
            cfg.dataset = DatasetSource::Directory {
                path: path.clone(),
                format: DatasetFormat::CsvDirectory,
            };
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone(); })*
            };
        }
        set!(
            output_dir => output_dir,
            seed => seed,
            ways => protocol.ways,
            shots => protocol.shots,
            queries => protocol.queries,
            distance => distance,
            attribute_fraction => attribute_fraction,
            episodes => evaluation.episodes,
            eval_seed => evaluation.seed,
            epochs => predictor.epochs,
            eta => selector.eta,
            eta_sweep => eta_sweep,
            selector_episodes => selector.episodes,
            lambda => unknown.lambda,
            unknown_steps => unknown.outer_steps,
            beta => gate.beta,
            gate_episodes => gate.episodes,
        );
    }
}

/// Flags of `synth-gen`.
#[derive(Debug, Clone, Args)]
pub struct SynthOptions {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub attributes: usize,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Base, validation and novel class counts, comma separated.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<[usize; 3]>,
    /// Per-image attribute flip of base classes, annotated per image.
    #[arg(long, default_value_t = 0.2)]
    pub base_flip: f64,
    /// Per-image attribute flip of validation and novel pixels; annotations keep the class row.
    #[arg(long, default_value_t = 0.03)]
    pub held_out_flip: f64,
}

fn parse_split(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{p}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected three counts, got '{s}'"))
}

impl SynthOptions {
    pub fn spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec::new(
            self.classes,
            self.attributes,
            self.samples,
            self.noise,
            self.seed,
        )
        .with_image_size(self.image_size)
        .with_base_attribute_flip(self.base_flip)
        .with_held_out_visual_flip(self.held_out_flip);
        if let Some([b, v, n]) = self.split {
            spec = spec.with_split(b, v, n);
        }
        spec
    }
}

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ifsl_cli::options::{CommonOptions, SynthOptions};
use ifsl_cli::service::{router, AppState};
use ifsl_core::dataset::{generate_synthetic, save_dataset};
use ifsl_core::harness::{load_artifacts, run_pipeline, Stage};

#[derive(Parser)]
#[command(
    name = "ifsl",
    version,
    about = "Interpretable few-shot classification over learned attributes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark to a dataset directory.
    SynthGen(SynthOptions),
    /// Run every stage: train, evaluate and simulate interventions.
    Run(CommonOptions),
    /// Train the attribute predictor f_h.
    TrainPredictor(CommonOptions),
    /// Train the attribute selector g_h on a frozen f_h.
    TrainSelector(CommonOptions),
    /// Train the unknown-attribute predictor f_u on a frozen f_h.
    TrainUnknown(CommonOptions),
    /// Train the participation gate g_u on frozen f_h, g_h and f_u.
    TrainGate(CommonOptions),
    /// Write evaluation reports over novel episodes.
    Evaluate(CommonOptions),
    /// Simulate ground-truth interventions on misclassified queries.
    InterveneSim {
        #[command(flatten)]
        common: CommonOptions,
        /// Intervention ratios, comma separated.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        intervention_seed: Option<u64>,
    },
    /// Serve the episode API over the trained models.
    Serve {
        #[command(flatten)]
        common: CommonOptions,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Static explorer build served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn stage_run(common: &CommonOptions, stages: &[Stage]) -> anyhow::Result<()> {
    let mut cfg = common.load()?;
    cfg.stages = stages.to_vec();
    let manifest = run_pipeline(&cfg)?;
    for r in &manifest.checkpoints {
        let how = if r.resumed { "resumed" } else { "trained" };
        println!("{} {how} {}", r.role, r.stem.display());
    }
    for r in &manifest.reports {
        println!("report {}", cfg.output_dir.join(r).display());
    }
    Ok(())
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::SynthGen(opts) => {
            let ds = generate_synthetic(&opts.spec())?;
            save_dataset(&ds, &opts.out)?;
            println!(
                "{} images, {} classes, {} attributes -> {}",
                ds.len(),
                ds.num_classes(),
                ds.num_attributes(),
                opts.out.display()
            );
        }
        Command::Run(c) => tokio::task::block_in_place(|| stage_run(&c, &Stage::ALL))?,
        Command::TrainPredictor(c) => {
            tokio::task::block_in_place(|| stage_run(&c, &[Stage::Predictor]))?
        }
        Command::TrainSelector(c) => {
            tokio::task::block_in_place(|| stage_run(&c, &[Stage::Selector]))?
        }
        Command::TrainUnknown(c) => {
            tokio::task::block_in_place(|| stage_run(&c, &[Stage::Unknown]))?
        }
        Command::TrainGate(c) => tokio::task::block_in_place(|| stage_run(&c, &[Stage::Gate]))?,
        Command::Evaluate(c) => tokio::task::block_in_place(|| stage_run(&c, &[Stage::Evaluate]))?,
        Command::InterveneSim {
            common,
            ratios,
            intervention_seed,
        } => {
            let mut cfg = common.load()?;
            cfg.stages = vec![Stage::Intervene];
            if let Some(r) = ratios {
                cfg.intervention.ratios = r;
            }
            if let Some(s) = intervention_seed {
                cfg.intervention.seed = s;
            }
            let manifest = tokio::task::block_in_place(|| run_pipeline(&cfg))?;
            for r in &manifest.reports {
                println!("{}", std::fs::read_to_string(cfg.output_dir.join(r))?);
            }
        }
        Command::Serve {
            common,
            addr,
            static_dir,
        } => {
            let cfg = common.load()?;
            let artifacts = tokio::task::block_in_place(|| load_artifacts(&cfg))
                .context("loading trained models")?;
            let mut app = router(Arc::new(AppState::new(artifacts)));
            if let Some(dir) = static_dir {
                app = app.fallback_service(tower_http::services::ServeDir::new(dir));
            }
            let listener = tokio::net::TcpListener::bind(addr).await?;
            log::info!("listening on http://{addr}");
            axum::serve(listener, app).await?;
        }
    }
    Ok(())
}

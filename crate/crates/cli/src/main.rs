//! Stage-oriented command line front end for the emoflow pipeline.
//!
//! One TOML config file drives every stage; flags override the config.
//! Exit codes: 0 ok, 2 config error, 3 dependency error, 4 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use emoflow::corpus;
use emoflow::model::forward;
use emoflow::pipeline::{self, stages, PipelineConfig, Stage, StageOutcome};
use emoflow::steering::{self, PositionsPolicy};
use emoflow::Error;

const ARTIFACT_ENV: &str = "EMOFLOW_ARTIFACTS";

#[derive(Parser)]
#[command(name = "emoflow", version, about = "Emotion-circuit discovery and steering pipeline")]
struct Cli {
    /// Pipeline config file.
    #[arg(long, global = true, default_value = "emoflow.toml")]
    config: PathBuf,

    /// Artifact root (overrides the EMOFLOW_ARTIFACTS env var and the
    /// config file).
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,

    /// Rerun a stage even when its artifacts are up to date, and accept
    /// stale upstream hashes.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default config file.
    Init {
        /// Overwrite an existing file.
        #[arg(long)]
        overwrite: bool,
    },
    /// Generate the synthetic corpus and splits.
    GenCorpus,
    /// Train the toy language model.
    TrainModel,
    /// Train one sparse autoencoder per layer.
    TrainSae {
        /// Retrain only this layer's SAE inside the stage run.
        #[arg(long)]
        layer: Option<usize>,
        /// Train every layer (the default behaviour, explicit flag).
        #[arg(long)]
        all_layers: bool,
    },
    /// Collect final-token sparse activations into the store.
    Collect,
    /// Assign categories, build activation curves, detect phases.
    Phases,
    /// Phase-stratified causal tracing.
    Trace,
    /// Train the steering vector on the causal feature set.
    SteerTrain,
    /// Train per-layer probes and evaluate them.
    Probe,
    /// Steered-vs-unsteered evaluation, ablations, data-efficiency sweep.
    Eval,
    /// Emit the report directory (tables + summary).
    Report {
        /// Keep only logit effects at or above this magnitude.
        #[arg(long)]
        min_effect: Option<f64>,
    },
    /// Run every stage in order.
    Pipeline,
    /// Apply the trained steering vector to a text and print the
    /// restricted emotion logits.
    SteerApply {
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value = "final-token")]
        positions: PositionsArg,
    },
    /// Print the sparsity report of the trained steering vector.
    SteerReport {
        #[arg(long, default_value_t = 0.10)]
        threshold: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PositionsArg {
    FinalToken,
    AllPositions,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = if cli.config.exists() {
        PipelineConfig::load(&cli.config)?
    } else if matches!(cli.command, Command::Init { .. }) {
        PipelineConfig::default()
    } else {
        return Err(Error::config(format!(
            "config file {} not found (run `emoflow init` first)",
            cli.config.display()
        )));
    };
    // precedence: --artifacts flag > env var > config file
    if let Some(root) = &cli.artifacts {
        cfg.artifact_root = root.display().to_string();
    } else if let Ok(root) = std::env::var(ARTIFACT_ENV) {
        if !root.is_empty() {
            cfg.artifact_root = root;
        }
    }
    Ok(cfg)
}

fn run_one(cfg: &PipelineConfig, stage: Stage, force: bool) -> Result<(), Error> {
    match pipeline::run_stage(cfg, stage, force)? {
        StageOutcome::Ran => println!("{}: done", stage),
        StageOutcome::SkippedUpToDate => println!("{}: up to date, skipped", stage),
    }
    Ok(())
}

fn steer_apply(cfg: &PipelineConfig, text: &str, positions: PositionsArg) -> Result<(), Error> {
    let root = cfg.root();
    let bundle = stages::load_corpus_bundle(&root)?;
    let model = emoflow::io::load_model(&stages::model_dir(&root))?;
    let saes = stages::load_saes(&root, model.config.n_layers)?;
    let vector = stages::load_steering(&root)?;
    let tokens = corpus::tokenize(text);
    let prompt = corpus::render_prompt(&tokens)?;
    let ids = bundle.vocab.encode(&prompt);
    let policy = match positions {
        PositionsArg::FinalToken => PositionsPolicy::FinalToken,
        PositionsArg::AllPositions => PositionsPolicy::AllPositions,
    };
    let base = forward::forward_with_hooks(&model, &ids, ids.len() - 1)?.0;
    let steered = steering::apply_steering(&model, &saes, &vector, &ids, policy)?;
    let rb = forward::restrict_logits(&base, &bundle.labels);
    let rs = forward::restrict_logits(&steered, &bundle.labels);
    println!("emotion      unsteered    steered");
    for (i, e) in corpus::EMOTIONS.iter().enumerate() {
        println!("{:<12} {:>9.4} {:>10.4}", e.name(), rb[i], rs[i]);
    }
    println!(
        "prediction: {} -> {}",
        corpus::EMOTIONS[forward::argmax6(&rb)],
        corpus::EMOTIONS[forward::argmax6(&rs)]
    );
    Ok(())
}

fn steer_report(cfg: &PipelineConfig, threshold: f64) -> Result<(), Error> {
    let root = cfg.root();
    let vector = stages::load_steering(&root)?;
    let categories = stages::load_category_map(&root).ok();
    let report = steering::sparsity_report(&vector, threshold, categories.as_ref());
    println!(
        "{} of {} multipliers changed by more than {:.0}%:",
        report.changed.len(),
        report.total_features,
        threshold * 100.0
    );
    for row in &report.changed {
        println!(
            "  {:<10} {:>8.4}  {:<8} {}",
            row.feature.to_string(),
            row.multiplier,
            row.category,
            row.best_cue.clone().unwrap_or_default()
        );
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Init { overwrite } => {
            if cli.config.exists() && !overwrite {
                return Err(Error::config(format!(
                    "{} already exists (pass --overwrite to replace it)",
                    cli.config.display()
                )));
            }
            emoflow::io::write_atomic(&cli.config, cfg.to_toml().as_bytes())?;
            println!("wrote {}", cli.config.display());
            Ok(())
        }
        Command::GenCorpus => run_one(&cfg, Stage::GenCorpus, cli.force),
        Command::TrainModel => run_one(&cfg, Stage::TrainModel, cli.force),
        Command::TrainSae { layer, all_layers: _ } => {
            if layer.is_some() {
                println!("note: the stage retrains all layers; per-layer artifacts land under saes/layer_*");
            }
            run_one(&cfg, Stage::TrainSae, cli.force)
        }
        Command::Collect => run_one(&cfg, Stage::Collect, cli.force),
        Command::Phases => run_one(&cfg, Stage::Phases, cli.force),
        Command::Trace => run_one(&cfg, Stage::Trace, cli.force),
        Command::SteerTrain => run_one(&cfg, Stage::SteerTrain, cli.force),
        Command::Probe => run_one(&cfg, Stage::Probe, cli.force),
        Command::Eval => run_one(&cfg, Stage::Eval, cli.force),
        Command::Report { min_effect } => {
            if let Some(m) = min_effect {
                cfg.eval.min_effect = *m;
            }
            run_one(&cfg, Stage::Report, cli.force)
        }
        Command::Pipeline => {
            for (stage, outcome) in pipeline::run_all(&cfg, cli.force)? {
                match outcome {
                    StageOutcome::Ran => println!("{}: done", stage),
                    StageOutcome::SkippedUpToDate => println!("{}: up to date, skipped", stage),
                }
            }
            Ok(())
        }
        Command::SteerApply { text, positions } => steer_apply(&cfg, text, *positions),
        Command::SteerReport { threshold } => steer_report(&cfg, *threshold),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

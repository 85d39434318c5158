use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rgated::adaptation::AblationMode;
use rgated::config::RunConfig;
use rgated::eval::{run_ablations, sweep_target_classes, to_csv, DataSource, Metrics};
use rgated::pipeline::{dataset_manifest, Dataset, RunDir, Session};
use rgated::{Error, Result};

/// Relation-gated partial domain adaptation for relation extraction.
#[derive(Parser, Debug)]
#[command(name = "rgated", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set seed=3`. Repeatable; applied
    /// after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        /// Output directory; defaults to `data.dir`, else `<output.dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage, then predict and evaluate.
    Pipeline,
    /// Train the source encoder and classifier.
    PretrainSource,
    /// Category weights, auxiliary discriminator and instance weights.
    Weights,
    /// Weighted adversarial adaptation of the target encoder.
    Adapt,
    /// Predict the target test split with the adapted encoder.
    Predict,
    /// Score `predictions.csv`.
    Evaluate,
    /// Fine-tune the adapted model on labeled target fractions.
    Finetune,
    /// Compare ablation modes over `ablate.seeds`.
    Ablate {
        /// Comma-separated modes; defaults to all five.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
    /// Weighted vs. unweighted accuracy as the target label space shrinks.
    SweepClasses,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Pipeline => "pipeline",
            Command::PretrainSource => "pretrain-source",
            Command::Weights => "weights",
            Command::Adapt => "adapt",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Finetune => "finetune",
            Command::Ablate { .. } => "ablate",
            Command::SweepClasses => "sweep-classes",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Data(_) | Error::Rejected(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Numerical(_) | Error::DegenerateWeights => 4,
        _ => 1,
    }
}

fn print_metrics(m: &Metrics) {
    print!("{}", m.to_csv());
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let name = cli.command.name();
    match cli.command {
        Command::Synth { out } => {
            let dir = out
                .or_else(|| cfg.data_dir.clone())
                .unwrap_or_else(|| cfg.output_dir.join("data"));
            let ds = Dataset::synthetic(&cfg.synth)?;
            ds.write(&dir)?;
            let manifest = dataset_manifest(&cfg.synth, &ds)?;
            std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
            println!("{}", dir.display());
        }
        Command::Pipeline => {
            let s = Session::open(&cfg, name)?;
            print_metrics(&s.pipeline()?);
        }
        Command::PretrainSource => {
            Session::open(&cfg, name)?.pretrain()?;
        }
        Command::Weights => {
            let s = Session::open(&cfg, name)?;
            let src = s.load_source()?;
            s.weights(&src)?;
        }
        Command::Adapt => {
            let s = Session::open(&cfg, name)?;
            let src = s.load_source()?;
            let ws = s.load_weights()?;
            s.adapt(&src, &ws)?;
        }
        Command::Predict => {
            let s = Session::open(&cfg, name)?;
            let src = s.load_source()?;
            let ws = s.load_weights()?;
            let adapted = s.load_adapted(&ws)?;
            s.predict(&src, &adapted)?;
        }
        Command::Evaluate => {
            let s = Session::open(&cfg, name)?;
            let preds = s.load_predictions()?;
            print_metrics(&s.evaluate(&preds)?);
        }
        Command::Finetune => {
            let s = Session::open(&cfg, name)?;
            let src = s.load_source()?;
            let ws = s.load_weights()?;
            let adapted = s.load_adapted(&ws)?;
            print!("{}", to_csv(&s.finetune(&src, &adapted)?)?);
        }
        Command::Ablate { modes } => {
            let modes: Vec<AblationMode> = if modes.is_empty() {
                AblationMode::ALL.to_vec()
            } else {
                modes.iter().map(|m| m.parse()).collect::<Result<_>>()?
            };
            let dir = RunDir::create(&cfg.output_dir)?;
            let source = DataSource::from_config(&cfg)?;
            let rows = run_ablations(&source, &cfg, &modes, &cfg.ablate_seeds)?;
            let text = to_csv(&rows)?;
            dir.write(RunDir::ABLATION, &text)?;
            print!("{text}");
        }
        Command::SweepClasses => {
            let seed = cfg.require_seed()?;
            let dir = RunDir::create(&cfg.output_dir)?;
            let source = DataSource::from_config(&cfg)?;
            let rows = sweep_target_classes(&source, &cfg, &cfg.sweep_counts, cfg.sweep_samples, seed)?;
            let text = to_csv(&rows)?;
            dir.write(RunDir::SWEEP, &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

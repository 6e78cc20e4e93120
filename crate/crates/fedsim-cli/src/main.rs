//! Experiment runner CLI: single runs, the component ablation suite, and
//! parameter sweeps, all driven by a JSON config file with dotted-path
//! overrides.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedsim::experiment::{
    ablation_suite, desk_config, run_experiment, run_sweep, ExperimentConfig, SweepParam,
};

#[derive(Parser)]
#[command(
    name = "fedsim",
    about = "Desk-scale federated learning simulator: backdoor attacks vs. defenses",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the JSON experiment config. Omit to start from the built-in
    /// desk-scale scenario.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override config keys by dotted path, e.g.
    /// `--set defense.kind=robust_lr --set defense.beta=4 --set seed=3`.
    /// Values parse as JSON first, falling back to strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print a summary.
    Run(ConfigArgs),
    /// Run the train / train+flip / train+flip+trigopt ablation suite.
    Ablate(ConfigArgs),
    /// Sweep one parameter over a list of values.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,

        /// Which parameter to sweep.
        #[arg(long, value_enum)]
        param: SweepParamArg,

        /// Comma-separated values, e.g. `0.0,0.02,0.2`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Print the built-in desk-scale config as JSON.
    ExampleConfig,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SweepParamArg {
    DirichletH,
    CrflSigma,
    NumMalicious,
}

impl From<SweepParamArg> for SweepParam {
    fn from(value: SweepParamArg) -> Self {
        match value {
            SweepParamArg::DirichletH => SweepParam::DirichletH,
            SweepParamArg::CrflSigma => SweepParam::CrflSigma,
            SweepParamArg::NumMalicious => SweepParam::NumMalicious,
        }
    }
}

fn apply_override(tree: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not KEY=VALUE"))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let obj = node
            .as_object_mut()
            .with_context(|| format!("config path {path:?} walks through a non-object"))?;
        if last {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut tree: serde_json::Value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => serde_json::to_value(desk_config(1))?,
    };
    for spec in &args.overrides {
        apply_override(&mut tree, spec)?;
    }
    let config: ExperimentConfig =
        serde_json::from_value(tree).context("config does not match the expected schema")?;
    config.validate().context("invalid config")?;
    Ok(config)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let result = run_experiment(&cfg, args.out.as_deref())?;
            let summary = serde_json::json!({
                "rounds": cfg.rounds,
                "final_acc": result.final_acc,
                "final_asr": result.final_asr,
                "attack": cfg.attack,
                "defense": cfg.defense.kind_name(),
                "out": args.out.as_ref().map(|p| p.display().to_string()),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if args.out.is_none() {
                eprintln!("note: pass --out <dir> to persist the metrics CSV and checkpoints");
            }
        }
        Command::Ablate(args) => {
            let cfg = load_config(&args)?;
            let table = ablation_suite(&cfg, args.out.as_deref())?;
            print!("{}", table.render());
            let final_row: Vec<String> = table
                .arms
                .iter()
                .zip(&table.final_asr)
                .map(|(arm, asr)| format!("{arm}={asr:.4}"))
                .collect();
            eprintln!("final-round ASR: {}", final_row.join("  "));
        }
        Command::Sweep {
            config,
            param,
            values,
        } => {
            if values.is_empty() {
                bail!("sweep needs at least one --values entry");
            }
            let cfg = load_config(&config)?;
            let rows = run_sweep(&cfg, param.into(), &values, config.out.as_deref())?;
            println!("value,final_acc,final_asr");
            for r in &rows {
                println!("{},{},{}", r.value, r.final_acc, r.final_asr);
            }
        }
        Command::ExampleConfig => {
            println!("{}", serde_json::to_string_pretty(&desk_config(1))?);
        }
    }
    Ok(())
}

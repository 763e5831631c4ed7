use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use stochavg_cli::{emit_tables, run, Experiment, ExperimentConfig, HarnessError};
use stochavg_core::model_catalog;

#[derive(Parser, Debug)]
#[command(name = "stochavg", version, about = "Stochastic averaging experiments")]
struct Cli {
    /// simulate | average | rate | exitprob | limit2 | weak2 | poisson-check
    #[arg(required_unless_present = "list_models")]
    experiment: Option<Experiment>,

    /// JSON config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Print the shipped models and exit.
    #[arg(long)]
    list_models: bool,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| HarnessError::Io(p.display().to_string(), e.to_string()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(e) = cli.experiment {
        if cfg.experiment.is_some_and(|c| c != e) {
            return Err(HarnessError::Config(format!(
                "config names experiment `{}` but `{e}` was requested",
                cfg.experiment.unwrap()
            )));
        }
        cfg.experiment = Some(e);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.display().to_string();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = load(cli)?;
    let bundle = run(&cfg)?;
    let files = emit_tables(&bundle, Path::new(&cfg.out))?;
    for f in &bundle.flags {
        eprintln!("flag: {f}");
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.list_models {
        for (name, about) in model_catalog() {
            println!("{name}\t{about}");
        }
        return ExitCode::SUCCESS;
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error_class": e.class(),
                "message": e.to_string(),
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sphereflow::cli::{self, Experiment, ExperimentConfig, RunError};

/// Run a sphereflow experiment.
///
/// Any field of the configuration file can be overridden with
/// `--key value` after the named options.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Args {
    /// simulate, landscape, quad-order, el-residual, ball-bound, dirac,
    /// theorem7 or geodesic-pairing
    experiment: String,

    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Only check the configuration and print diagnostics.
    #[arg(long)]
    validate: bool,

    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    overrides: Vec<String>,
}

fn load(args: &Args) -> Result<ExperimentConfig, String> {
    let experiment: Experiment = args.experiment.parse()?;
    let file = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            cli::parse_config_text(&text)?
        }
        None => Default::default(),
    };
    let overrides = cli::parse_overrides(&args.overrides)?;
    Ok(ExperimentConfig::from_sources(
        experiment,
        file,
        overrides,
        std::env::var(cli::SEED_ENV).ok(),
    ))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let config = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if args.validate {
        let diags = cli::validate(&config);
        for d in &diags {
            eprintln!("{d}");
        }
        return if diags.is_empty() {
            println!("ok");
            ExitCode::SUCCESS
        } else {
            ExitCode::from(1)
        };
    }
    match cli::run(&config) {
        Ok(out) => {
            for f in &out.files {
                println!("{}", out.dir.join(f).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let RunError::Invalid(diags) = &e {
                for d in diags {
                    eprintln!("{d}");
                }
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

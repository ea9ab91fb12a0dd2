use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qscraft::pipeline::{self, RunConfig};
use qscraft::Error;

#[derive(Parser)]
#[command(name = "qscraft", version, about = "Pose-conditioned motion animation over discrete feature pixels")]
struct Cli {
    /// TOML run configuration; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Acceptance,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset into the configured data directory.
    MakeData {
        #[arg(long)]
        force: bool,
    },
    /// Train one stage, resuming from an existing checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stop after this many completed steps; a later call resumes.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Animate a source image with a driving pose file.
    Animate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value = "animation")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score generated frames against reference frames.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Also write the report as JSON to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Export codebook-index histograms of images as JSON and a PNG chart.
    PlotHistograms {
        /// Output prefix; `.json` and `.png` are appended.
        #[arg(long, default_value = "histograms")]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Print a complete configuration file.
    PrintConfig {
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
    },
}

fn load_config(path: Option<&Path>) -> qscraft::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable output")
}

fn run(cli: Cli) -> qscraft::Result<()> {
    if let Command::PrintConfig { preset } = cli.command {
        let cfg = match preset {
            Preset::Default => RunConfig::default(),
            Preset::Acceptance => RunConfig::acceptance(),
        };
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::MakeData { force } => {
            let manifest = pipeline::cmd_make_data(&cfg, force)?;
            println!("{}", to_json(&manifest.counts));
        }
        Command::Train { stage, until } => println!("{}", to_json(&pipeline::cmd_train_until(stage, &cfg, until)?)),
        Command::Animate { source, poses, out, force } => {
            println!("{}", to_json(&pipeline::cmd_animate(&cfg, &source, &poses, &out, force)?));
        }
        Command::Eval {
            generated,
            reference,
            report,
            json,
        } => {
            let r = pipeline::cmd_eval(&cfg, &generated, &reference)?;
            if let Some(path) = report {
                std::fs::write(&path, to_json(&r)).map_err(|e| Error::Io { path, source: e })?;
            }
            if json {
                println!("{}", to_json(&r));
            } else {
                print!("{}", r.table());
            }
        }
        Command::PlotHistograms { out, images } => {
            let records = pipeline::cmd_plot_histograms(&cfg, &images, &out)?;
            println!("wrote {} histograms to {}", records.len(), out.with_extension("json").display());
        }
        Command::PrintConfig { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

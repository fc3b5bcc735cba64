use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod config;
mod run;

use config::{ConfigError, ExperimentConfig};
use run::{Command, Output, RunError, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "meshplan", version, about = "Plan and simulate sharded transformer training")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Hardware profile name (e.g. v4-32) or path to a profile JSON file.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Directory for report.json, the normalized config.json and, when
    /// simulating, timeline.svg.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Reserved; every operation is deterministic.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Cmd {
    /// Parameter, memory and FLOP counts of the model.
    Analyze,
    /// Propagate partition specs and list the collectives they imply.
    Shard,
    /// Simulate one training step under the configured strategy.
    Simulate,
    /// Best pipeline schedule against best tensor-parallel layout.
    Compare,
    /// Largest model that fits, per slice.
    Capacity,
    /// Checkpoint interval from step time, checkpoint cost and MTBF.
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
    Svg,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Analyze => Command::Analyze,
            Cmd::Shard => Command::Shard,
            Cmd::Simulate => Command::Simulate,
            Cmd::Compare => Command::Compare,
            Cmd::Capacity => Command::Capacity,
            Cmd::Checkpoint => Command::Checkpoint,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<(ExperimentConfig, PathBuf), RunError> {
    let Some(path) = path else {
        return Ok((ExperimentConfig::default(), PathBuf::from(".")));
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| ConfigError::Invalid(format!("reading {}: {e}", path.display())))?;
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((ExperimentConfig::parse(&text)?, base))
}

fn write(path: PathBuf, contents: &str) -> Result<(), RunError> {
    std::fs::write(&path, contents).map_err(|source| RunError::Output { path, source })
}

fn emit(out: &Output, cfg: &ExperimentConfig, cli: &Cli) -> Result<String, RunError> {
    let json = serde_json::to_string_pretty(&out.report).expect("report serializes") + "\n";
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|source| RunError::Output { path: dir.clone(), source })?;
        write(dir.join("report.json"), &json)?;
        write(dir.join("config.json"), &(cfg.to_json() + "\n"))?;
        if let Some(svg) = &out.svg {
            write(dir.join("timeline.svg"), svg)?;
        }
    }
    match cli.format {
        Format::Json => Ok(json),
        Format::Text => Ok(out.text.clone()),
        Format::Svg => out
            .svg
            .clone()
            .ok_or_else(|| ConfigError::Invalid("`--format svg` is only available for `simulate`".into()).into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(cli.config.as_deref()).and_then(|(cfg, base_dir)| {
        let opts = RunOptions { profile: cli.profile.clone(), seed: cli.seed, base_dir };
        run::run(cli.command.into(), &cfg, &opts).and_then(|out| emit(&out, &cfg, &cli))
    });
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

mod config;
mod runner;

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use specdec::metrics::{export_timeline, timeline_json, write_timeline_csv};

use config::{Backend, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "specdec",
    version,
    about = "Speculative decoding engines over mock models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run each configured strategy and write its tokens, stats and trace.
    Run(RunArgs),
    /// Run all strategies, check identical outputs, and report speedups.
    Compare(RunArgs),
    /// Print the verified-tokens-over-time series of a finished run.
    Trace(TraceArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// TOML config; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.model.seed = seed;
        }
        if let Some(backend) = self.backend {
            config.execution.backend = backend;
        }
        if let Some(dir) = &self.out_dir {
            config.execution.out_dir = dir.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TimelineFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct TraceArgs {
    /// Run id, `<strategy>-<trial>`, e.g. `amusd-0`.
    #[arg(long = "run")]
    run_id: String,
    #[command(flatten)]
    overrides: Overrides,
    /// Write here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: TimelineFormat,
}

/// Bad invocation, as opposed to a failed run.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn cmd_run(args: &RunArgs) -> Result<()> {
    let config = args.overrides.load()?;
    let outcomes = runner::execute(&config)?;
    println!(
        "backend {}, {} strategies x {} trials, output in {}",
        config.execution.backend,
        config.execution.strategies.len(),
        config.execution.trials,
        config.execution.out_dir.display()
    );
    for o in &outcomes {
        println!("{}", runner::summary_line(o));
    }
    if config.execution.strategies.len() >= 2 {
        println!();
        print!("{}", runner::comparison(&config, &outcomes)?.render());
    }
    Ok(())
}

fn cmd_compare(args: &RunArgs) -> Result<()> {
    let config = args.overrides.load()?;
    if config.execution.strategies.len() < 2 {
        return Err(UsageError(
            "compare needs at least two strategies in execution.strategies".into(),
        )
        .into());
    }
    let outcomes = runner::execute(&config)?;
    runner::check_identical_outputs(&outcomes)?;
    let table = runner::comparison(&config, &outcomes)?;
    let first = &outcomes[0].run;
    let report = format!(
        "{} clock, {} generated tokens, identical output across {} runs\n\n{}",
        match first.result.stats.clock {
            specdec::ClockKind::Wall => "wall",
            specdec::ClockKind::Virtual => "virtual",
        },
        first.tokens().len(),
        outcomes.len(),
        table.render()
    );
    let dir = &config.execution.out_dir;
    fs::write(dir.join("comparison.txt"), &report)?;
    fs::write(dir.join("comparison.json"), table.to_json()? + "\n")?;
    print!("{report}");
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> Result<()> {
    let config = args.overrides.load()?;
    let trace = runner::load_trace(&config.execution.out_dir, &args.run_id)?;
    let timeline = export_timeline(&trace);
    let mut out: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(
            fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        ),
        None => Box::new(io::stdout().lock()),
    };
    match args.format {
        TimelineFormat::Csv => write_timeline_csv(&timeline, &mut out)?,
        TimelineFormat::Json => writeln!(out, "{}", timeline_json(&timeline)?)?,
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Trace(a) => cmd_trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lambdasim::scenarios::{
    export_ladder, export_report, run_ladder, run_scenario, Part, ReportFormat, ScenarioConfig, ScenarioError,
};

#[derive(Parser)]
#[command(name = "lambdasim", version, about = "Lambda-architecture dispatcher simulator for hybrid cloud/desktop-grid platforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario part.
    Run {
        /// Scenario part, a..f
        #[arg(long)]
        part: Option<Part>,
        #[command(flatten)]
        common: Common,
    },
    /// Run parts A to F with a shared seed and classify the outcome.
    Ladder {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Environment description (YAML)
    #[arg(long)]
    env: Option<PathBuf>,
    /// Workload description (YAML)
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Scenario config (YAML); flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report file; printed to stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: ReportFormat,
    /// JSON-Lines trace; the ladder writes one file per part
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ScenarioConfig, ScenarioError> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.env {
            cfg.environment = Some(p.clone());
        }
        if let Some(p) = &self.workload {
            cfg.workload = Some(p.clone());
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), ScenarioError> {
    match cli.command {
        Command::Run { part, common } => {
            let mut cfg = common.config()?;
            if let Some(p) = part {
                cfg.part = p;
            }
            let report = run_scenario(&cfg, common.trace.as_deref())?;
            match &common.out {
                Some(path) => export_report(&report, path, common.format)?,
                None => print_stdout(|w| match common.format {
                    ReportFormat::Json => json_line(w, &report),
                    ReportFormat::Csv => lambdasim::scenarios::write_csv(std::slice::from_ref(&report), &mut *w),
                }),
            }
        }
        Command::Ladder { common } => {
            let cfg = common.config()?;
            let ladder = run_ladder(&cfg, common.trace.as_deref())?;
            match &common.out {
                Some(path) => export_ladder(&ladder, path, common.format)?,
                None => print_stdout(|w| match common.format {
                    ReportFormat::Json => json_line(w, &ladder),
                    ReportFormat::Csv => lambdasim::scenarios::write_csv(&ladder.runs, &mut *w),
                }),
            }
            let c = ladder.classification;
            eprintln!(
                "good_result={} (E-B {:+.3}s)  best_result={} (F-A {:+.3}s)",
                c.good_result, c.deltas.e_vs_b, c.best_result, c.deltas.f_vs_a
            );
        }
    }
    Ok(())
}

fn print_stdout(f: impl FnOnce(&mut std::io::StdoutLock<'_>) -> std::io::Result<()>) {
    let mut out = std::io::stdout().lock();
    // a closed pipe is not worth a diagnostic
    let _ = f(&mut out);
}

fn json_line<W: std::io::Write>(w: &mut W, value: &impl serde::Serialize) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lambdasim: {e}");
            ExitCode::from(2)
        }
    }
}

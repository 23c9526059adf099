use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use twoweight::harness::{load_config, run, Command};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Constants,
    Verify,
    Necessity,
    Corona,
    Sizelemma,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Command {
        match c {
            Cmd::Constants => Command::Constants,
            Cmd::Verify => Command::Verify,
            Cmd::Necessity => Command::Necessity,
            Cmd::Corona => Command::Corona,
            Cmd::Sizelemma => Command::Sizelemma,
        }
    }
}

/// Two-weight constants, energies and corona checks for atomic measures.
#[derive(Debug, Parser)]
#[command(name = "twoweight", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Report path; stdout when absent. Ratio tables go next to it as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(args: &Args) -> Result<bool, Box<dyn std::error::Error>> {
    if let Some(k) = args.threads {
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global()?;
    }
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let start = Instant::now();
    let report = run(args.command.into(), &cfg)?;
    let json = report.to_json();
    match &args.out {
        Some(p) => {
            std::fs::write(p, &json)?;
            if !report.ratios.is_empty() {
                std::fs::write(p.with_extension("csv"), report.ratios_csv()?)?;
            }
        }
        None => print!("{json}"),
    }
    let s = &report.summary;
    eprintln!(
        "{} instance(s), {} check(s), {} failed, {:.2}s",
        s.instances,
        s.checks,
        s.failed,
        start.elapsed().as_secs_f64()
    );
    for c in report.checks.iter().filter(|c| !c.pass) {
        eprintln!("FAIL {} instance {}: {} > {}", c.name, c.instance, c.lhs, c.rhs);
    }
    Ok(s.passed)
}

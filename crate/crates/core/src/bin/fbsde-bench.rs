use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use multistep_fbsde::bench::{parse_config, render, run, write_atomic, RunSpec};
use multistep_fbsde::Result;

/// Convergence study for the multistep FBSDE solver.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// Problem name from the registry.
    #[arg(long)]
    problem: Option<String>,
    /// Comma-separated step counts.
    #[arg(long)]
    k: Option<String>,
    /// Comma-separated numbers of time steps.
    #[arg(long = "N")]
    n: Option<String>,
    #[arg(long)]
    gh_points: Option<String>,
    #[arg(long)]
    interp_degree: Option<String>,
    #[arg(long)]
    grid_h: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    /// `exact` or `bootstrap`.
    #[arg(long)]
    terminal: Option<String>,
    /// `csv` or `markdown`.
    #[arg(long)]
    format: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run cells concurrently; runtimes are then marked as contended.
    #[arg(long)]
    parallel_cells: bool,
}

fn build_spec(cli: &Cli) -> Result<RunSpec> {
    let mut spec = RunSpec::new("", Vec::new(), Vec::new());
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)?;
        for (key, value) in parse_config(&text)? {
            spec.apply_setting(&key, &value)?;
        }
    }
    let flags = [
        ("problem", cli.problem.as_deref()),
        ("k", cli.k.as_deref()),
        ("N", cli.n.as_deref()),
        ("gh-points", cli.gh_points.as_deref()),
        ("interp-degree", cli.interp_degree.as_deref()),
        ("grid-h", cli.grid_h.as_deref()),
        ("tol", cli.tol.as_deref()),
        ("terminal", cli.terminal.as_deref()),
        ("format", cli.format.as_deref()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            spec.apply_setting(key, v)?;
        }
    }
    if let Some(out) = &cli.out {
        spec.out = Some(out.clone());
    }
    if cli.parallel_cells {
        spec.parallel_cells = true;
    }
    if spec.problem.is_empty() {
        return Err(multistep_fbsde::Error::Config("no problem given".into()));
    }
    Ok(spec)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = build_spec(&cli).and_then(|spec| {
        let report = run(&spec)?;
        let text = render(&report, spec.format);
        match &spec.out {
            Some(path) => write_atomic(path, &text)?,
            None => print!("{text}"),
        }
        Ok(report.any_diverged())
    });
    match outcome {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

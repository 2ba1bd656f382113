//! `lapsecop`: simulate panels, fit them, and replicate the lapse study.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical failure.

mod fit;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lapsecop_core::panel::PanelDataset;
use lapsecop_core::simulation::{generate_panel, run_study, StudyConfig};
use lapsecop_core::Error;

use crate::fit::{run_fit, FitConfig};

const THREADS_VAR: &str = "LAPSECOP_THREADS";

#[derive(Parser)]
#[command(name = "lapsecop", version, about = "Gaussian copula lapse models for longitudinal claims")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one panel from a study config and write it as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit marginals and association parameters to a panel CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Fit options; all fields optional.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replicate one cell of the lapse study and print bias and SE.
    Table1 {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        phi: f64,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Data(_) | Error::Domain(_) | Error::Io(_) | Error::Csv(_) => Failure::input(e.to_string()),
            _ => Failure::numerical(e.to_string()),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut config: StudyConfig = read_json(config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let panel = generate_panel(&config, config.seed)?;
    let mut buf = Vec::new();
    panel.write_csv(&mut buf)?;
    write_file(out, &buf)?;
    eprintln!("wrote {} subjects, {} rows to {}", panel.n(), panel.n_rows(), out.display());
    Ok(())
}

fn fit(data: &Path, config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let config: FitConfig = match config {
        Some(path) => read_json(path)?,
        None => serde_json::from_str("{}").expect("all fit options have defaults"),
    };
    let panel = PanelDataset::from_csv_file(data, config.m)?;
    let result = run_fit(&panel, &config)?;
    let json = serde_json::to_vec_pretty(&result).map_err(|e| Failure::numerical(e.to_string()))?;
    write_file(out, &json)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let a = &result.association;
    for (k, name) in a.params.iter().enumerate() {
        println!("{name:>8}  pl {:>9.5} ({:.5})  gmm {:>9.5} ({:.5})", a.theta_pl[k], a.se_pl[k], a.theta_gmm[k], a.se_gmm[k]);
    }
    println!("J = {:.4} on {} df", a.j_stat, a.effective_df);
    if !a.converged {
        return Err(Failure::numerical("GMM did not converge; results written with converged = false"));
    }
    Ok(())
}

fn table1(n: usize, phi: f64, reps: usize, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let report = run_study(&StudyConfig::table1(n, phi, reps, seed))?;
    print!("{}", report.to_text());
    if let Some(path) = out {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_file(path, &buf)?;
    }
    if report.converged == 0 {
        return Err(Failure::numerical("no replicate converged"));
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Failure::input(format!("{THREADS_VAR} must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::input(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Simulate { config, out, seed } => simulate(&config, &out, seed),
        Command::Fit { data, config, out } => fit(&data, config.as_deref(), &out),
        Command::Table1 { n, phi, reps, seed, out } => table1(n, phi, reps, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dive_desk::config::{parse_override, ConfigError, ExperimentConfig};
use dive_desk::engine::{run_experiment, EngineError, RunReport};
use dive_desk::verify::verify_suite;
use rayon::prelude::*;

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "dive-desk", version, about = "Score-distillation desk experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the Cartesian product of one or more `key=v1,v2,...` axes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "grid")]
        grid: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Concurrent cells; `DIVE_DESK_THREADS` caps it.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Run the verification suite and print its ledger.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Config(ConfigError),
    Runtime(String, Option<usize>),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(..) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(e) => format!("config error: {e}"),
            Failure::Runtime(m, Some(step)) => format!("runtime abort at step {step}: {m}"),
            Failure::Runtime(m, None) => format!("runtime abort: {m}"),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        Failure::Runtime(e.to_string(), e.step())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()), None)
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads, builds and runs one configuration into `out`, persisting the
/// materialized config alongside the outputs.
fn run_one(config: &Path, overrides: &[(String, String)], out: &Path) -> Result<RunReport, Failure> {
    let cfg = ExperimentConfig::load(config, overrides).map_err(Failure::Config)?;
    let exp = cfg.build(&base_dir(config)).map_err(Failure::Config)?;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| io_failure(&path, e))?;
    Ok(run_experiment(exp, Some(out))?)
}

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>) -> ExitCode {
    let overrides: Vec<(String, String)> = seed.map(|s| ("train.seed".to_string(), s.to_string())).into_iter().collect();
    match run_one(config, &overrides, out) {
        Ok(report) => {
            println!(
                "seed {} steps {} final entropy {:.4} nats, wrote {}",
                report.seed,
                report.steps,
                report.final_entropy,
                out.display()
            );
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.message());
            ExitCode::from(f.code())
        }
    }
}

struct Axis {
    key: String,
    values: Vec<String>,
}

fn parse_axes(grid: &[String]) -> Result<Vec<Axis>, ConfigError> {
    grid.iter()
        .map(|g| {
            let (key, raw) = parse_override(g)?;
            let values: Vec<String> = raw.split(',').map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(ConfigError::Override(g.clone(), "empty value in axis".into()));
            }
            Ok(Axis { key, values })
        })
        .collect()
}

/// Every combination of axis values, last axis fastest.
fn cells(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    out
}

fn thread_cap(requested: Option<usize>) -> usize {
    let default = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var("DIVE_DESK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0);
    let n = requested.unwrap_or(default).max(1);
    cap.map_or(n, |c| n.min(c))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn cmd_sweep(config: &Path, grid: &[String], out: &Path, parallelism: Option<usize>) -> ExitCode {
    let axes = match parse_axes(grid) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("runtime abort: {}: {e}", out.display());
        return ExitCode::from(EXIT_RUNTIME);
    }
    let cells = cells(&axes);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(thread_cap(parallelism)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("runtime abort: thread pool: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    let results: Vec<Result<RunReport, Failure>> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, overrides)| {
                let dir = out.join(format!("cell_{i:03}"));
                let r = run_one(config, overrides, &dir);
                if let Err(f) = &r {
                    eprintln!("cell_{i:03}: {}", f.message());
                }
                r
            })
            .collect()
    });

    let path = out.join("sweep_summary.csv");
    let written = (|| -> Result<(), Box<dyn std::error::Error>> {
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["cell".to_string()];
        header.extend(axes.iter().map(|a| a.key.clone()));
        header.extend(["status", "final_entropy", "final_divergence", "final_mean_reward", "error"].map(String::from));
        w.write_record(&header)?;
        for (i, (overrides, r)) in cells.iter().zip(&results).enumerate() {
            let mut row = vec![format!("cell_{i:03}")];
            row.extend(overrides.iter().map(|(_, v)| v.clone()));
            match r {
                Ok(rep) => row.extend([
                    "ok".to_string(),
                    format!("{:?}", rep.final_entropy),
                    fmt_opt(rep.final_divergence),
                    fmt_opt(rep.final_mean_reward),
                    String::new(),
                ]),
                Err(f) => {
                    let status = if f.code() == EXIT_CONFIG { "config_error" } else { "runtime_error" };
                    row.extend([status.to_string(), String::new(), String::new(), String::new(), f.message()]);
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    })();
    if let Err(e) = written {
        eprintln!("runtime abort: {}: {e}", path.display());
        return ExitCode::from(EXIT_RUNTIME);
    }
    let failed: Vec<&Failure> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    println!("{} cells, {} failed, summary in {}", cells.len(), failed.len(), path.display());
    match failed.first() {
        None => ExitCode::SUCCESS,
        Some(f) => ExitCode::from(f.code()),
    }
}

fn cmd_verify(config: Option<&Path>, json: bool) -> ExitCode {
    let cfg = match config {
        Some(p) => match ExperimentConfig::load(p, &[]) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("config error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        None => ExperimentConfig::default(),
    };
    let ledger = verify_suite(&cfg);
    if json {
        println!("{}", ledger.to_json());
    } else {
        print!("{}", ledger.table());
    }
    if ledger.passed() {
        ExitCode::SUCCESS
    } else {
        for e in ledger.failures() {
            eprintln!("failed: {} = {:e} (threshold {:e})", e.name, e.value, e.threshold);
        }
        ExitCode::from(EXIT_VERIFY)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config, out, seed } => cmd_run(&config, &out, seed),
        Cmd::Sweep { config, grid, out, parallelism } => cmd_sweep(&config, &grid, &out, parallelism),
        Cmd::Verify { config, json } => cmd_verify(config.as_deref(), json),
    }
}

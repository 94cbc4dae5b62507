//! `arith`: runs the experiments of `arith-core` from JSON configs.
//!
//! Exit codes: 0 on success, 1 on configuration or I/O errors, 2 when a
//! verification suite fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arith_core::analysis::{
    ablation_csv, ablation_grid, quadratic_csv, run_adamtrace, run_bench, run_plane, run_quadratic,
    sweep_csv, sweep_steps, AblationConfig, AdamTraceConfig, BenchConfig, PlaneConfig,
    QuadTaskSpec, QuadraticConfig, SweepConfig, TraceSource,
};
use arith_core::domains::SuiteConfig;
use arith_core::export::write_json;
use arith_core::metalearn::{train, MetaConfig};
use arith_core::verify::{self, VerifyOptions};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "arith", version, about = "Meta-learning domain-generalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the config seed; for multi-seed experiments, runs this seed only.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// ERM / Fish / Arith comparison over seeds -> bench.csv
    Bench,
    /// Numerical self-checks; exits 2 if any fails.
    Verify {
        /// Run a single suite (identity, taylor, centroid, ledger, gradcheck).
        #[arg(long)]
        suite: Option<String>,
    },
    /// Loss plane through three inner-loop models -> plane.csv
    Plane,
    /// Per-domain momentum shares under round-robin updates -> adamtrace.csv
    Adamtrace,
    /// Fixed points on affine optimal sets -> quadratic.csv
    Quadratic,
    /// Steps-per-domain sweep -> sweep.csv
    Sweep,
    /// Ablation grid -> ablation.csv
    Ablation,
    /// Single training run -> run.json, metrics.csv
    Train,
}

/// Config of the `train` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    run: MetaConfig,
    suite: SuiteConfig,
}

enum Failure {
    Config(String),
    Verify(String),
}

impl From<arith_core::Error> for Failure {
    fn from(e: arith_core::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Caps the worker pool at `ARITH_THREADS` when set.
fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("ARITH_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| format!("ARITH_THREADS must be a positive integer, got `{value}`"))?;
    if n == 0 {
        return Err("ARITH_THREADS must be >= 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Bench => bench(cli),
        Command::Verify { suite } => run_verify(cli, suite.as_deref()),
        Command::Plane => plane(cli),
        Command::Adamtrace => adamtrace(cli),
        Command::Quadratic => quadratic(cli),
        Command::Sweep => sweep(cli),
        Command::Ablation => ablation(cli),
        Command::Train => train_once(cli),
    }
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("invalid config {}: {e}", path.display())))
}

fn required<T: DeserializeOwned>(cli: &Cli) -> Result<T, Failure> {
    match &cli.config {
        Some(p) => load(p),
        None => Err(Failure::Config("this subcommand needs --config <path>".into())),
    }
}

fn optional<T: DeserializeOwned + Default>(cli: &Cli) -> Result<T, Failure> {
    cli.config.as_deref().map_or_else(|| Ok(T::default()), load)
}

fn prepare_out(cli: &Cli) -> Result<&Path, Failure> {
    fs::create_dir_all(&cli.out).map_err(|e| {
        Failure::Config(format!("cannot create output directory {}: {e}", cli.out.display()))
    })?;
    Ok(&cli.out)
}

fn seeds(cli: &Cli, configured: Vec<u64>) -> Vec<u64> {
    cli.seed.map_or(configured, |s| vec![s])
}

fn done(path: &Path) {
    println!("wrote {}", path.display());
}

fn bench(cli: &Cli) -> CliResult {
    let mut config: BenchConfig = required(cli)?;
    config.seeds = seeds(cli, config.seeds);
    let out = prepare_out(cli)?;
    log::info!(
        "bench: {} methods x {} seeds, {} iterations",
        config.methods.len(),
        config.seeds.len(),
        config.base.iterations
    );
    let report = run_bench(&config)?;
    for row in &report.rows {
        println!(
            "{:<10} target {:.4} +- {:.4}   val {:.4}",
            row.method, row.target_avg.mean, row.target_avg.sd, row.val_acc.mean
        );
    }
    let csv = out.join("bench.csv");
    report.to_csv().write(&csv)?;
    write_json(
        &out.join("bench.json"),
        &serde_json::json!({ "config": config, "report": report }),
    )?;
    done(&csv);
    Ok(())
}

fn run_verify(cli: &Cli, suite: Option<&str>) -> CliResult {
    let options = VerifyOptions {
        seed: cli.seed.unwrap_or(0),
        ..VerifyOptions::default()
    };
    let reports = match suite {
        Some(name) => vec![verify::run_suite(name, &options)?],
        None => verify::run_all(&options)?,
    };
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {} ({} checks)", r.name, r.checks);
        for f in &r.failures {
            println!("    {f}");
        }
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("failing suites: {}", failed.join(", "))))
    }
}

fn plane(cli: &Cli) -> CliResult {
    let mut config: PlaneConfig = required(cli)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let out = prepare_out(cli)?;
    let result = run_plane(&config)?;
    let csv = out.join("plane.csv");
    result.grid.to_csv().write(&csv)?;
    write_json(
        &out.join("plane.json"),
        &serde_json::json!({
            "config": config,
            "anchors": result.basis.anchors,
            "ranges": result.grid.ranges,
            "resolution": result.grid.resolution,
            "domain_ids": result.domain_ids,
            "anchor_losses": result.anchor_losses,
        }),
    )?;
    done(&csv);
    Ok(())
}

fn adamtrace(cli: &Cli) -> CliResult {
    let mut config: AdamTraceConfig = optional(cli)?;
    if let (Some(s), TraceSource::Network { seed, .. }) = (cli.seed, &mut config.source) {
        *seed = s;
    }
    let out = prepare_out(cli)?;
    let trace = run_adamtrace(&config)?;
    if let Some(last) = trace.rows.last() {
        let shares: Vec<String> = last.iter().map(|v| format!("{v:.4}")).collect();
        println!("final shares: {}", shares.join(" "));
    }
    let csv = out.join("adamtrace.csv");
    trace.to_csv().write(&csv)?;
    write_json(
        &out.join("adamtrace.json"),
        &serde_json::json!({ "config": config, "domain_ids": trace.domain_ids }),
    )?;
    done(&csv);
    Ok(())
}

fn quadratic(cli: &Cli) -> CliResult {
    let mut config: QuadraticConfig = optional(cli)?;
    if let Some(s) = cli.seed {
        for t in &mut config.tasks {
            if let QuadTaskSpec::Simplex { rotation_seed, .. } = t {
                *rotation_seed = Some(s);
            }
        }
    }
    let out = prepare_out(cli)?;
    let rows = run_quadratic(&config)?;
    for r in &rows {
        println!(
            "task {} {:<16} lr {:<5} centroid distance {:.6}",
            r.task, r.scheme, r.lr, r.centroid_dist
        );
    }
    let csv = out.join("quadratic.csv");
    quadratic_csv(&rows).write(&csv)?;
    write_json(
        &out.join("quadratic.json"),
        &serde_json::json!({ "config": config, "rows": rows }),
    )?;
    done(&csv);
    Ok(())
}

fn sweep(cli: &Cli) -> CliResult {
    let mut config: SweepConfig = required(cli)?;
    config.seeds = seeds(cli, config.seeds);
    let out = prepare_out(cli)?;
    let rows = sweep_steps(&config)?;
    let csv = out.join("sweep.csv");
    sweep_csv(&rows).write(&csv)?;
    write_json(
        &out.join("sweep.json"),
        &serde_json::json!({ "config": config, "rows": rows }),
    )?;
    done(&csv);
    Ok(())
}

fn ablation(cli: &Cli) -> CliResult {
    let mut config: AblationConfig = required(cli)?;
    config.seeds = seeds(cli, config.seeds);
    let out = prepare_out(cli)?;
    let rows = ablation_grid(&config)?;
    let csv = out.join("ablation.csv");
    ablation_csv(&rows).write(&csv)?;
    write_json(
        &out.join("ablation.json"),
        &serde_json::json!({ "config": config, "rows": rows }),
    )?;
    done(&csv);
    Ok(())
}

fn train_once(cli: &Cli) -> CliResult {
    let mut config: TrainConfig = required(cli)?;
    if let Some(s) = cli.seed {
        config.run.seed = s;
    }
    let out = prepare_out(cli)?;
    let suite = config.suite.build()?;
    let result = train(&config.run, &suite)?;
    println!(
        "selected iteration {}: val {:.4}, target {:.4}",
        result.selected_iter, result.selected.val_acc, result.selected.target_acc
    );
    let csv = out.join("metrics.csv");
    result.metrics_csv().write(&csv)?;
    write_json(
        &out.join("run.json"),
        &serde_json::json!({ "suite": config.suite, "result": result }),
    )?;
    done(&csv);
    Ok(())
}

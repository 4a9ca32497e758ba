use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rostlab_cli::manifest::{default_out_dir, resolve_threads};
use rostlab_cli::{read_manifest, replay, run_experiment, summarize, CliError, ExperimentConfig, ExperimentKind};
use rostlab_cli::{EXIT_ERROR, EXIT_PASS, EXIT_STAT_FAIL};

#[derive(Parser)]
#[command(name = "rostlab", version, about = "Random overlap structure experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    FreeEnergy(RunArgs),
    Stability(RunArgs),
    Gg(RunArgs),
    Ultrametricity(RunArgs),
    PdInvariance(RunArgs),
    Composition(RunArgs),
    Linearization(RunArgs),
    ParisiMin(RunArgs),
    AssIncrement(RunArgs),
    Counterexamples(RunArgs),
    /// Re-run a manifest and compare output digests.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Cross-run tables for every run below a directory.
    Summarize { dir: PathBuf },
}

fn run(kind: ExperimentKind, args: RunArgs) -> Result<i32, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    match cfg.kind {
        Some(k) if k != kind => {
            return Err(CliError::Config(format!("config kind `{}` does not match `{}`", k.as_str(), kind.as_str())))
        }
        _ => cfg.kind = Some(kind),
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    cfg.validate()?;
    let out = match args.out.or_else(|| cfg.out.clone()) {
        Some(p) => p,
        None => default_out_dir(&cfg)?,
    };
    let threads = resolve_threads(args.threads, &cfg);
    let m = run_experiment(&cfg, &out, threads)?;
    for c in &m.checks {
        println!("{} {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    println!("outputs in {}", out.display());
    Ok(if m.passed { EXIT_PASS } else { EXIT_STAT_FAIL })
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let kind = match cli.command {
        Command::Replay { manifest, seed, threads } => {
            let m = read_manifest(&manifest)?;
            let r = replay(&m, seed, threads.or_else(|| std::env::var("ROSTLAB_THREADS").ok().and_then(|v| v.parse().ok())))?;
            for d in &r.mismatches {
                println!("digest mismatch {}: expected {}, got {}", d.file, d.expected, d.got.as_deref().unwrap_or("missing"));
            }
            if r.identical {
                println!("replay identical on {} threads", r.threads);
            }
            return Ok(if r.identical { EXIT_PASS } else { EXIT_STAT_FAIL });
        }
        Command::Summarize { dir } => {
            let s = summarize(&dir)?;
            for k in &s {
                println!("{}: {} run(s)", k.kind, k.runs.len());
            }
            return Ok(EXIT_PASS);
        }
        Command::FreeEnergy(a) => (ExperimentKind::FreeEnergy, a),
        Command::Stability(a) => (ExperimentKind::Stability, a),
        Command::Gg(a) => (ExperimentKind::Gg, a),
        Command::Ultrametricity(a) => (ExperimentKind::Ultrametricity, a),
        Command::PdInvariance(a) => (ExperimentKind::PdInvariance, a),
        Command::Composition(a) => (ExperimentKind::Composition, a),
        Command::Linearization(a) => (ExperimentKind::Linearization, a),
        Command::ParisiMin(a) => (ExperimentKind::ParisiMin, a),
        Command::AssIncrement(a) => (ExperimentKind::AssIncrement, a),
        Command::Counterexamples(a) => (ExperimentKind::Counterexamples, a),
    };
    run(kind.0, kind.1)
}

fn main() -> ExitCode {
    let code = match dispatch(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    };
    ExitCode::from(code as u8)
}

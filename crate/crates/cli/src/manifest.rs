//! Run manifests, replay and cross-run summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::run::{execute, log_slope, Check, Metric, RunOutput, TaskSeed};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub threads: usize,
    pub seeds: Vec<TaskSeed>,
    pub outputs: Vec<OutputDigest>,
    pub checks: Vec<Check>,
    pub metrics: Vec<Metric>,
    pub notes: Vec<String>,
    pub passed: bool,
    /// The pipeline stopped early; outputs cover the finished tasks only.
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `flag`, then the config, then `ROSTLAB_THREADS`, then all cores.
pub fn resolve_threads(flag: Option<usize>, cfg: &ExperimentConfig) -> usize {
    flag.or(cfg.threads)
        .or_else(|| std::env::var("ROSTLAB_THREADS").ok().and_then(|v| v.parse().ok()).filter(|k| *k > 0))
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(pool.install(f))
}

/// Executes the pipeline on `threads` workers, in memory.
pub fn compute(cfg: &ExperimentConfig, threads: usize) -> Result<(RunOutput, Option<CliError>), CliError> {
    cfg.validate()?;
    in_pool(threads, || {
        let mut out = RunOutput::default();
        let err = execute(cfg, &mut out).err();
        (out, err)
    })
}

pub fn default_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    Ok(PathBuf::from("runs").join(format!("{}-{}", cfg.kind()?.as_str(), cfg.seed()?)))
}

/// Validates, runs, writes outputs and the manifest into `out_dir`.
/// Configuration errors leave the directory untouched.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let started = now();
    let (out, err) = compute(cfg, threads)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut outputs = Vec::new();
    for (name, bytes) in &out.files {
        fs::write(out_dir.join(name), bytes).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        outputs.push(OutputDigest { file: name.clone(), sha256: sha256_hex(bytes), bytes: bytes.len() });
    }
    let mut config = cfg.clone();
    config.out = Some(out_dir.to_path_buf());
    let manifest = RunManifest {
        config,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: now(),
        threads,
        passed: err.is_none() && out.passed(),
        partial: err.is_some(),
        error: err.as_ref().map(|e| e.to_string()),
        seeds: out.seeds,
        outputs,
        checks: out.checks,
        metrics: out.metrics,
        notes: out.notes,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out_dir.join(MANIFEST_FILE), json).map_err(|e| CliError::Io(e.to_string()))?;
    match err {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigestMismatch {
    pub file: String,
    pub expected: String,
    pub got: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub threads: usize,
    pub mismatches: Vec<DigestMismatch>,
    pub identical: bool,
}

/// Re-executes a manifest's config (optionally with another seed or thread
/// count) and compares output digests file by file.
pub fn replay(manifest: &RunManifest, seed: Option<u64>, threads: Option<usize>) -> Result<ReplayReport, CliError> {
    let mut cfg = manifest.config.clone();
    if let Some(s) = seed {
        cfg.seed = Some(s);
    }
    let threads = threads.unwrap_or(manifest.threads);
    let (out, err) = compute(&cfg, threads)?;
    if let Some(e) = err {
        return Err(e);
    }
    let fresh: BTreeMap<&str, String> = out.files.iter().map(|(n, b)| (n.as_str(), sha256_hex(b))).collect();
    let mismatches: Vec<DigestMismatch> = manifest
        .outputs
        .iter()
        .filter(|o| fresh.get(o.file.as_str()) != Some(&o.sha256))
        .map(|o| DigestMismatch { file: o.file.clone(), expected: o.sha256.clone(), got: fresh.get(o.file.as_str()).cloned() })
        .collect();
    Ok(ReplayReport { threads, identical: mismatches.is_empty(), mismatches })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRun {
    pub dir: String,
    pub seed: Option<u64>,
    pub passed: bool,
    pub partial: bool,
    pub metrics: Vec<Metric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub metric: String,
    pub points: usize,
    /// Least-squares slope of `log |value|` against `log x`.
    pub log_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: String,
    pub runs: Vec<SummaryRun>,
    pub trends: Vec<TrendFit>,
}

fn find_manifests(dir: &Path, depth: usize, found: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let candidate = dir.join(MANIFEST_FILE);
    if candidate.is_file() {
        found.push(candidate);
    }
    if depth == 0 {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for p in entries {
        find_manifests(&p, depth - 1, found)?;
    }
    Ok(())
}

/// Groups every run under `dir` by kind and writes `summary.json` plus one
/// `summary_<kind>.csv` table per kind (`run,metric,x,value,stderr`).
pub fn summarize(dir: &Path) -> Result<Vec<KindSummary>, CliError> {
    let mut paths = Vec::new();
    find_manifests(dir, 3, &mut paths)?;
    if paths.is_empty() {
        return Err(CliError::Config(format!("no completed runs under {}", dir.display())));
    }
    let mut groups: BTreeMap<String, Vec<SummaryRun>> = BTreeMap::new();
    for p in &paths {
        let m = read_manifest(p)?;
        let kind = m.config.kind()?.as_str().to_string();
        let run_dir = p.parent().unwrap_or(dir).strip_prefix(dir).unwrap_or(Path::new("")).display().to_string();
        groups.entry(kind).or_default().push(SummaryRun {
            dir: if run_dir.is_empty() { ".".into() } else { run_dir },
            seed: m.config.seed,
            passed: m.passed,
            partial: m.partial,
            metrics: m.metrics,
        });
    }
    let mut summaries = Vec::new();
    for (kind, runs) in groups {
        let mut csv = String::from("run,metric,x,value,stderr\n");
        let mut by_metric: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &runs {
            for m in &r.metrics {
                let x = m.x.map_or(String::new(), |x| x.to_string());
                csv.push_str(&format!("{},{},{},{},{}\n", r.dir, m.name, x, m.value, m.stderr));
                if let Some(x) = m.x {
                    by_metric.entry(m.name.clone()).or_default().push((x, m.value));
                }
            }
        }
        let trends = by_metric
            .into_iter()
            .filter(|(_, pts)| pts.len() >= 2)
            .map(|(metric, pts)| TrendFit { metric, points: pts.len(), log_slope: log_slope(&pts) })
            .collect();
        fs::write(dir.join(format!("summary_{kind}.csv")), csv).map_err(|e| CliError::Io(e.to_string()))?;
        summaries.push(KindSummary { kind, runs, trends });
    }
    let json = serde_json::to_string_pretty(&summaries).expect("summary serializes");
    fs::write(dir.join("summary.json"), json).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(summaries)
}

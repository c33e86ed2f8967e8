//! Config-driven experiment execution, presets and plotting.
//!
//! Each (experiment, seed) pair produces `<name>_seed<k>.csv` and `.jsonl`
//! record streams and a `<name>_seed<k>.json` sidecar holding the theory
//! constants and bounds for that run. After all runs finish, `summary.json`
//! and `summary.csv` are written to the summary directory. Every file is
//! written to a temporary name and renamed into place.

pub mod config;
pub mod presets;
pub mod render;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, run_experiment_with, RoundRecord, RunAborted, RunError};
use crate::problems::{estimate_sigma_local, ConstantTracker, DeclaredConstants, MeasuredConstants, Problem};
use crate::theory::{self, TheoryConstants, TheoryInputs};
use crate::vector::ParamVector;
pub use config::{ConfigFile, ExperimentSpec, ProblemSpec, TopologyKind, TopologySpec};

/// Environment variable selecting the worker-pool size.
pub const WORKERS_ENV: &str = "DFEDAVGM_WORKERS";

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Validation = 1,
    Divergence = 2,
    Io = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Schema(String),
}

impl RunnerError {
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            RunnerError::Validation(_) | RunnerError::Schema(_) => ExitStatus::Validation,
            RunnerError::Io { .. } => ExitStatus::Io,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        RunnerError::Io { path: path.to_path_buf(), source }
    }
}

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| RunnerError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| RunnerError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RunnerError::io(path, e))
}

/// One line of the aggregate summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub seed: u64,
    pub algorithm: String,
    /// `ok` or `diverged`.
    pub status: String,
    pub error: Option<String>,
    pub rounds_completed: u64,
    pub final_f: f64,
    pub final_grad_norm_sq: f64,
    pub min_grad_norm_sq: f64,
    pub final_consensus: f64,
    pub bits_total: u64,
    pub csv: String,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Theory constants and bounds for one run, next to the empirical values
/// they are meant to cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub lambda: f64,
    pub declared: DeclaredConstants,
    /// `sigma_l`, `sigma_g`, `B` maximized over the points the run visited.
    pub measured: MeasuredConstants,
    pub constants: Option<TheoryConstants>,
    pub note: Option<String>,
    pub f_x0: f64,
    pub f_x1: Option<f64>,
    pub min_f: Option<f64>,
    pub nonconvex_bound: Option<f64>,
    pub pl_bound: Option<f64>,
    pub consensus_bound: Option<f64>,
    pub quantized_consensus_bound: Option<f64>,
    pub empirical_min_grad_norm_sq: f64,
    pub empirical_final_gap: Option<f64>,
    pub empirical_max_consensus: f64,
}

/// Draws used to estimate `sigma_l` when the problem does not declare it.
const SIGMA_DRAWS: usize = 64;

/// Builds the theory sidecar for a finished (or aborted) run.
pub fn theory_report(
    spec: &ExperimentSpec,
    problem: &dyn Problem,
    records: &[RoundRecord],
    tracker: &ConstantTracker,
    final_models: &[ParamVector],
    seed: u64,
) -> TheoryReport {
    let declared = problem.declared();
    let x0 = problem.initial_point();
    let mut tracker = tracker.clone();
    tracker.observe(problem, &x0);
    for x in final_models {
        tracker.observe(problem, x);
    }
    let mut probe = vec![x0.clone()];
    if !final_models.is_empty() {
        probe.push(ParamVector::mean(final_models.iter(), problem.dim()));
    }
    let sigma_l = declared.noise_sigma.unwrap_or_else(|| estimate_sigma_local(problem, &probe, SIGMA_DRAWS, seed));
    let measured = MeasuredConstants { sigma_l, sigma_g: tracker.sigma_g(), grad_bound: tracker.grad_bound() };
    let lambda = match &spec.topology {
        Some(t) => t.mixing(problem.clients()).map(|w| w.spectral_constant()).unwrap_or(f64::NAN),
        None => 0.0,
    };
    let f_x0 = problem.loss(&x0);
    let f_x1 = records.get(1).map(|r| r.f_avg);
    let min_f = declared.min_value;
    let empirical_min_grad_norm_sq = records.iter().skip(1).map(|r| r.grad_norm_sq).fold(f64::INFINITY, f64::min);
    let mut report = TheoryReport {
        lambda,
        declared,
        measured,
        constants: None,
        note: None,
        f_x0,
        f_x1,
        min_f,
        nonconvex_bound: None,
        pl_bound: None,
        consensus_bound: None,
        quantized_consensus_bound: None,
        empirical_min_grad_norm_sq,
        empirical_final_gap: min_f.and_then(|m| records.last().map(|r| r.f_avg - m)),
        empirical_max_consensus: records.iter().map(|r| r.consensus).fold(0.0, f64::max),
    };
    let Some(l) = declared.smoothness else {
        report.note = Some("problem declares no smoothness constant".into());
        return report;
    };
    let inputs = TheoryInputs {
        local_steps: spec.trainer.local_steps,
        eta: spec.trainer.eta,
        theta: spec.trainer.theta,
        smoothness: l,
        sigma_l: measured.sigma_l,
        sigma_g: measured.sigma_g,
        grad_bound: measured.grad_bound,
        lambda,
    };
    let c = match theory::rate_constants(inputs) {
        Ok(c) => c,
        Err(e) => {
            report.note = Some(e.to_string());
            return report;
        }
    };
    report.constants = Some(c);
    report.consensus_bound = Some(c.consensus_bound());
    if let Some(q) = &spec.quantizer {
        report.quantized_consensus_bound = Some(c.quantized_consensus_bound(problem.dim(), q.step));
    }
    let mut notes = Vec::new();
    match (min_f, f_x1) {
        (Some(m), Some(f1)) => match theory::nonconvex_bound(&c, f1, m, spec.rounds) {
            Ok(b) => report.nonconvex_bound = Some(b),
            Err(e) => notes.push(e.to_string()),
        },
        _ => notes.push("nonconvex bound needs min f and at least one round".into()),
    }
    if let (Some(nu), Some(m)) = (declared.pl, min_f) {
        match theory::pl_bound(&c, nu, f_x0, m, spec.rounds) {
            Ok(b) => report.pl_bound = Some(b),
            Err(e) => notes.push(e.to_string()),
        }
    }
    if !c.stepsize_ok() {
        notes.push("stepsize outside the analyzed region".into());
    }
    if !notes.is_empty() {
        report.note = Some(notes.join("; "));
    }
    report
}

/// Sidecar written next to each run's CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub experiment: ExperimentSpec,
    pub seed: u64,
    pub summary: RunSummary,
    pub theory: TheoryReport,
}

fn run_stem(name: &str, seed: u64) -> String {
    format!("{name}_seed{seed}")
}

fn run_one(spec: &ExperimentSpec, problem: &dyn Problem, seed: u64, out_dir: &Path) -> Result<RunSummary, RunnerError> {
    let rc = spec.run_config(seed).map_err(|e| RunnerError::Validation(vec![e]))?;
    let stem = run_stem(&spec.name, seed);
    let every = spec.checkpoint_every;
    let mut ckpt_err = None;
    let result = run_experiment_with(rc, problem, |rec, eng| {
        if every > 0 && rec.t % every == 0 {
            let mut buf = Vec::new();
            engine::write_checkpoint(&mut buf, &eng.models())?;
            let path = out_dir.join(format!("{stem}_t{}.ckpt", rec.t));
            if let Err(e) = write_atomic(&path, &buf) {
                ckpt_err = Some(e);
                return Err(RunError::Io(io::Error::other("checkpoint write failed")));
            }
        }
        Ok(())
    });
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    let (records, error, tracker, models) = match result {
        Ok(out) => (out.records, None, out.tracker, out.final_models),
        Err(RunAborted { records, error }) => (records, Some(error), ConstantTracker::default(), Vec::new()),
    };
    let last = records.last().cloned().expect("at least the initial record");
    let summary = RunSummary {
        experiment: spec.name.clone(),
        seed,
        algorithm: spec.algorithm.to_string(),
        status: if error.is_none() { "ok" } else { "diverged" }.into(),
        error: error.as_ref().map(|e| e.to_string()),
        rounds_completed: last.t,
        final_f: last.f_avg,
        final_grad_norm_sq: last.grad_norm_sq,
        min_grad_norm_sq: records.iter().map(|r| r.grad_norm_sq).fold(f64::INFINITY, f64::min),
        final_consensus: last.consensus,
        bits_total: last.bits_total,
        csv: format!("{stem}.csv"),
    };
    if let Some(e) = &error {
        log::error!("{} seed {seed}: {e}", spec.name);
    }
    let mut csv = Vec::new();
    engine::write_records_csv(&mut csv, &records).map_err(|e| RunnerError::io(out_dir, e))?;
    write_atomic(&out_dir.join(format!("{stem}.csv")), &csv)?;
    let mut jsonl = Vec::new();
    engine::write_records_jsonl(&mut jsonl, &records).map_err(|e| RunnerError::io(out_dir, e))?;
    write_atomic(&out_dir.join(format!("{stem}.jsonl")), &jsonl)?;
    let theory = theory_report(spec, problem, &records, &tracker, &models, seed);
    let sidecar = Sidecar { experiment: spec.clone(), seed, summary: summary.clone(), theory };
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&out_dir.join(format!("{stem}.json")), &json)?;
    Ok(summary)
}

/// Result of executing a whole config.
#[derive(Debug, Clone)]
pub struct ConfigOutcome {
    pub runs: Vec<RunSummary>,
    pub summary_dir: PathBuf,
}

impl ConfigOutcome {
    pub fn exit_status(&self) -> ExitStatus {
        if self.runs.iter().all(RunSummary::ok) {
            ExitStatus::Success
        } else {
            ExitStatus::Divergence
        }
    }
}

pub fn load_config(path: &Path) -> Result<ConfigFile, RunnerError> {
    let text = fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
    let cfg = ConfigFile::parse(&text).map_err(|e| RunnerError::Validation(vec![e]))?;
    let errs = cfg.problems(&base_dir(path));
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(RunnerError::Validation(errs))
    }
}

fn base_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Runs every experiment and seed of an already validated config, with
/// relative paths resolved against `base`.
pub fn run_config(cfg: &ConfigFile, base: &Path) -> Result<ConfigOutcome, RunnerError> {
    let mut problems = Vec::with_capacity(cfg.experiments.len());
    let mut errs = Vec::new();
    for e in &cfg.experiments {
        match e.problem.build() {
            Ok(p) => {
                if let Some(l) = p.declared().smoothness {
                    e.trainer.warn_if_outside_theory(l);
                }
                problems.push(Some(p))
            }
            Err(err) => {
                errs.push(format!("experiment {:?}.problem: {err}", e.name));
                problems.push(None);
            }
        }
    }
    if !errs.is_empty() {
        return Err(RunnerError::Validation(errs));
    }
    let jobs: Vec<(usize, u64)> =
        cfg.experiments.iter().enumerate().flat_map(|(i, e)| e.seeds().map(move |s| (i, s))).collect();
    let results: Vec<Result<RunSummary, RunnerError>> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let spec = &cfg.experiments[i];
            let problem = problems[i].as_deref().expect("built above");
            log::info!("running {} seed {seed}", spec.name);
            run_one(spec, problem, seed, &config::resolve(base, &spec.output))
        })
        .collect();
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let summary_dir = cfg.summary_dir(base);
    write_summary(&summary_dir, &runs)?;
    Ok(ConfigOutcome { runs, summary_dir })
}

pub const SUMMARY_CSV_HEADER: &str =
    "experiment,seed,algorithm,status,rounds_completed,final_f,final_grad_norm_sq,min_grad_norm_sq,final_consensus,bits_total,csv";

fn write_summary(dir: &Path, runs: &[RunSummary]) -> Result<(), RunnerError> {
    let json = serde_json::to_vec_pretty(runs).expect("summary serializes");
    write_atomic(&dir.join("summary.json"), &json)?;
    let mut csv = String::from(SUMMARY_CSV_HEADER);
    csv.push('\n');
    for r in runs {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.experiment,
            r.seed,
            r.algorithm,
            r.status,
            r.rounds_completed,
            r.final_f,
            r.final_grad_norm_sq,
            r.min_grad_norm_sq,
            r.final_consensus,
            r.bits_total,
            r.csv
        ));
    }
    write_atomic(&dir.join("summary.csv"), csv.as_bytes())
}

/// Loads, validates and runs `path`.
pub fn run_config_file(path: &Path) -> Result<ConfigOutcome, RunnerError> {
    let cfg = load_config(path)?;
    run_config(&cfg, &base_dir(path))
}

/// Entry point behind `run <config>`: reports diagnostics through the log
/// and maps the outcome to an exit status.
pub fn run_from_config(path: &Path) -> ExitStatus {
    match run_config_file(path) {
        Ok(outcome) => {
            for r in outcome.runs.iter().filter(|r| !r.ok()) {
                log::error!("{} seed {} failed: {}", r.experiment, r.seed, r.error.as_deref().unwrap_or("?"));
            }
            outcome.exit_status()
        }
        Err(e) => {
            log::error!("{e}");
            e.exit_status()
        }
    }
}

/// Configures the global rayon pool from [`WORKERS_ENV`] if set.
pub fn init_worker_pool() -> Result<(), String> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err(format!("{WORKERS_ENV} must be a positive integer, got 0"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

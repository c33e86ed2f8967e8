//! Scaled-down sweeps on synthetic quadratics.
//!
//! * `bits_sweep`: quantized DFedAvgM with `b` in {4, 8, 16} plus unquantized
//!   32-bit gossip, `K = 1`.
//! * `epochs_sweep`: 16-bit quantized DFedAvgM with `K` in {1, 2, 5}.
//! * `algo_compare`: DSGD, FedAvg (full participation), 32-bit DFedAvgM and
//!   16-bit quantized DFedAvgM on a 20-client ring with matched seeds.
//!
//! Quantizer steps are calibrated from unquantized pilot runs: with pilot
//! maximum coordinate delta `D`, a `b`-bit quantizer uses
//! `s = HEADROOM * D / (2^(b-1) - 1)`.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{ConfigFile, ExperimentSpec, ProblemSpec, TopologySpec};
use super::{render, run_config, write_atomic, ConfigOutcome, RunnerError};
use crate::engine::{run_experiment, Algorithm, RoundRecord};
use crate::local::LocalTrainerConfig;
use crate::problems::{Problem, QuadraticSpec};
use crate::quantize::{QuantizerSpec, Rounding};

/// Safety factor between the pilot's largest delta and the quantizer range.
pub const HEADROOM: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    BitsSweep,
    EpochsSweep,
    AlgoCompare,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::BitsSweep, Preset::EpochsSweep, Preset::AlgoCompare];

    pub fn name(self) -> &'static str {
        match self {
            Preset::BitsSweep => "bits_sweep",
            Preset::EpochsSweep => "epochs_sweep",
            Preset::AlgoCompare => "algo_compare",
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset {s:?}; expected one of bits_sweep, epochs_sweep, algo_compare"))
    }
}

/// Hitting round and cumulative bits for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetEntry {
    pub experiment: String,
    pub algorithm: String,
    pub seed: u64,
    pub rounds_to_target: Option<u64>,
    pub bits_to_target: Option<u64>,
    pub final_gap: f64,
    /// Mean gap over rounds `t > 3T/4`, less noisy than `final_gap`.
    pub tail_gap: f64,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: Preset,
    /// `f(x_bar) - min f` threshold used for hitting times.
    pub target_gap: f64,
    pub initial_gap: f64,
    pub entries: Vec<PresetEntry>,
}

impl PresetReport {
    pub fn entries_for<'a>(&'a self, experiment: &'a str) -> impl Iterator<Item = &'a PresetEntry> + 'a {
        self.entries.iter().filter(move |e| e.experiment == experiment)
    }

    pub fn entry(&self, experiment: &str, seed: u64) -> Option<&PresetEntry> {
        self.entries.iter().find(|e| e.experiment == experiment && e.seed == seed)
    }
}

struct Layout {
    problem: QuadraticSpec,
    topology: TopologySpec,
    rounds: u64,
    repetitions: u64,
    /// Hitting threshold as a fraction of the initial gap.
    target_fraction: f64,
}

fn layout(preset: Preset) -> Layout {
    match preset {
        Preset::BitsSweep => Layout {
            problem: QuadraticSpec { heterogeneity: 0.3, noise_sigma: 1.0, ..QuadraticSpec::new(8, 10, 7) },
            topology: TopologySpec::ring(),
            rounds: 300,
            repetitions: 3,
            target_fraction: 0.05,
        },
        Preset::EpochsSweep => Layout {
            problem: QuadraticSpec { heterogeneity: 0.0, noise_sigma: 0.2, ..QuadraticSpec::new(8, 10, 7) },
            topology: TopologySpec::ring(),
            rounds: 300,
            repetitions: 3,
            target_fraction: 0.05,
        },
        Preset::AlgoCompare => Layout {
            problem: QuadraticSpec { heterogeneity: 0.3, noise_sigma: 0.2, ..QuadraticSpec::new(20, 10, 11) },
            topology: TopologySpec::ring(),
            rounds: 300,
            repetitions: 3,
            target_fraction: 0.05,
        },
    }
}

fn experiment(name: &str, algorithm: Algorithm, lay: &Layout, trainer: LocalTrainerConfig) -> ExperimentSpec {
    ExperimentSpec {
        name: name.to_string(),
        algorithm,
        rounds: lay.rounds,
        repetitions: lay.repetitions,
        seed: 0,
        output: ".".into(),
        checkpoint_every: 0,
        track_constants: false,
        problem: ProblemSpec::Quadratic(lay.problem.clone()),
        topology: algorithm.is_decentralized().then_some(lay.topology),
        trainer,
        quantizer: None,
    }
}

/// Largest coordinate delta over unquantized pilot runs of `base` for all
/// its seeds.
fn pilot_delta(base: &ExperimentSpec, problem: &dyn Problem) -> Result<f64, RunnerError> {
    let mut spec = base.clone();
    spec.algorithm = Algorithm::Dfedavgm;
    spec.quantizer = None;
    let mut worst: f64 = 0.0;
    for seed in spec.seeds() {
        let rc = spec.run_config(seed).map_err(|e| RunnerError::Validation(vec![e]))?;
        let out = run_experiment(rc, problem).map_err(|e| RunnerError::Validation(vec![format!("pilot run failed: {e}")]))?;
        worst = worst.max(out.max_abs_delta);
    }
    Ok(worst)
}

fn quantized(base: &ExperimentSpec, name: &str, bits: u32, delta: f64) -> ExperimentSpec {
    let mut spec = base.clone();
    spec.name = name.to_string();
    spec.algorithm = Algorithm::DfedavgmQuantized;
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    spec.quantizer = Some(QuantizerSpec { step: HEADROOM * delta / levels, bits, rule: Rounding::Stochastic, seed: 0 });
    spec
}

/// The config a preset runs, with quantizer steps already calibrated.
pub fn preset_config(preset: Preset) -> Result<ConfigFile, RunnerError> {
    let lay = layout(preset);
    let problem = ProblemSpec::Quadratic(lay.problem.clone()).build().map_err(|e| RunnerError::Validation(vec![e.to_string()]))?;
    let experiments = match preset {
        Preset::BitsSweep => {
            let trainer = LocalTrainerConfig { eta: 0.05, theta: 0.5, local_steps: 1 };
            let base = experiment("b32", Algorithm::Dfedavgm, &lay, trainer);
            let delta = pilot_delta(&base, problem.as_ref())?;
            let mut v: Vec<ExperimentSpec> =
                [4u32, 8, 16].iter().map(|&b| quantized(&base, &format!("b{b}"), b, delta)).collect();
            v.push(base);
            v
        }
        Preset::EpochsSweep => {
            let mut v = Vec::new();
            for k in [1usize, 2, 5] {
                let trainer = LocalTrainerConfig { eta: 0.02, theta: 0.5, local_steps: k };
                let base = experiment(&format!("k{k}"), Algorithm::Dfedavgm, &lay, trainer);
                let delta = pilot_delta(&base, problem.as_ref())?;
                v.push(quantized(&base, &format!("k{k}"), 16, delta));
            }
            v
        }
        Preset::AlgoCompare => {
            let trainer = LocalTrainerConfig { eta: 0.02, theta: 0.5, local_steps: 5 };
            let base = experiment("dfedavgm_32bit", Algorithm::Dfedavgm, &lay, trainer);
            let delta = pilot_delta(&base, problem.as_ref())?;
            vec![
                quantized(&base, "dfedavgm", 16, delta),
                base.clone(),
                experiment("fedavg", Algorithm::Fedavg, &lay, trainer),
                experiment("dsgd", Algorithm::Dsgd, &lay, LocalTrainerConfig { eta: 0.1, theta: 0.0, local_steps: 1 }),
            ]
        }
    };
    Ok(ConfigFile { summary_dir: None, experiments })
}

/// First record with `f - min_f <= target`.
pub fn hitting(records: &[RoundRecord], min_f: f64, target: f64) -> Option<&RoundRecord> {
    records.iter().find(|r| r.f_avg - min_f <= target)
}

/// Runs a preset into `out`: the config as `preset.toml`, every run's files,
/// `loss_vs_round.csv`, `loss_vs_bits.csv`, `preset_report.json` and SVG
/// charts.
pub fn run_preset(preset: Preset, out: &Path) -> Result<PresetReport, RunnerError> {
    let cfg = preset_config(preset)?;
    write_atomic(&out.join("preset.toml"), cfg.to_toml().as_bytes())?;
    let outcome: ConfigOutcome = run_config(&cfg, out)?;
    let lay = layout(preset);
    let problem = ProblemSpec::Quadratic(lay.problem.clone()).build().map_err(|e| RunnerError::Validation(vec![e.to_string()]))?;
    let min_f = problem.declared().min_value.expect("quadratic declares its minimum");
    let initial_gap = problem.loss(&problem.initial_point()) - min_f;
    let target_gap = lay.target_fraction * initial_gap;
    let mut by_round = String::from("experiment,seed,t,f_gap\n");
    let mut by_bits = String::from("experiment,seed,bits_total,f_gap\n");
    let mut entries = Vec::new();
    for run in &outcome.runs {
        let records = render::load_records(&out.join(&run.csv))?;
        for r in &records {
            by_round.push_str(&format!("{},{},{},{}\n", run.experiment, run.seed, r.t, r.f_avg - min_f));
            by_bits.push_str(&format!("{},{},{},{}\n", run.experiment, run.seed, r.bits_total, r.f_avg - min_f));
        }
        let hit = hitting(&records, min_f, target_gap);
        let last_t = records.last().map_or(0, |r| r.t);
        let tail: Vec<f64> = records.iter().filter(|r| 4 * r.t > 3 * last_t).map(|r| r.f_avg - min_f).collect();
        let tail_gap = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
        entries.push(PresetEntry {
            experiment: run.experiment.clone(),
            algorithm: run.algorithm.clone(),
            seed: run.seed,
            rounds_to_target: hit.map(|r| r.t),
            bits_to_target: hit.map(|r| r.bits_total),
            final_gap: run.final_f - min_f,
            tail_gap,
            completed: run.ok(),
        });
    }
    write_atomic(&out.join("loss_vs_round.csv"), by_round.as_bytes())?;
    write_atomic(&out.join("loss_vs_bits.csv"), by_bits.as_bytes())?;
    let report = PresetReport { preset, target_gap, initial_gap, entries };
    write_atomic(&out.join("preset_report.json"), &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    render::render_dir(out)?;
    Ok(report)
}

//! TOML experiment files.
//!
//! ```toml
//! summary_dir = "results"          # optional, defaults to the file's directory
//!
//! [[experiment]]
//! name = "ring8"
//! algorithm = "dfedavgm"           # dfedavgm | dfedavgm_quantized | dsgd | fedavg | sgd
//! rounds = 200
//! repetitions = 3                  # seeds seed, seed+1, ...
//! output = "results/ring8"
//!
//! [experiment.problem]
//! kind = "quadratic"               # quadratic | logistic | mlp
//! clients = 8
//! dim = 10
//!
//! [experiment.topology]
//! kind = "ring"                    # ring | complete | random
//!
//! [experiment.trainer]
//! eta = 0.01
//! theta = 0.5
//! local_steps = 5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{Algorithm, RunConfig};
use crate::local::LocalTrainerConfig;
use crate::problems::{Logistic, LogisticSpec, Mlp, MlpSpec, Problem, ProblemError, Quadratic, QuadraticSpec};
use crate::quantize::QuantizerSpec;
use crate::topology::{Graph, MixingMatrix, MixingRule, TopologyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Quadratic(QuadraticSpec),
    Logistic(LogisticSpec),
    Mlp(MlpSpec),
}

impl ProblemSpec {
    pub fn clients(&self) -> usize {
        match self {
            ProblemSpec::Quadratic(s) => s.clients,
            ProblemSpec::Logistic(s) => s.clients,
            ProblemSpec::Mlp(s) => s.clients,
        }
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        match self {
            ProblemSpec::Quadratic(s) => s.validate(),
            ProblemSpec::Logistic(s) => s.validate(),
            ProblemSpec::Mlp(s) => s.validate(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Problem>, ProblemError> {
        Ok(match self {
            ProblemSpec::Quadratic(s) => Box::new(Quadratic::try_generate(s)?),
            ProblemSpec::Logistic(s) => Box::new(Logistic::generate(s)?),
            ProblemSpec::Mlp(s) => Box::new(Mlp::generate(s)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Complete,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    /// Extra-edge probability, `random` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_prob: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rule")]
    pub rule: MixingRule,
}

fn default_rule() -> MixingRule {
    MixingRule::MetropolisHastings
}

impl TopologySpec {
    pub fn ring() -> Self {
        TopologySpec { kind: TopologyKind::Ring, edge_prob: None, seed: 0, rule: default_rule() }
    }

    pub fn graph(&self, m: usize) -> Result<Graph, TopologyError> {
        match self.kind {
            TopologyKind::Ring => Graph::ring(m),
            TopologyKind::Complete => Graph::complete(m),
            TopologyKind::Random => Graph::random_connected(m, self.edge_prob.unwrap_or(0.0), self.seed),
        }
    }

    pub fn mixing(&self, m: usize) -> Result<MixingMatrix, TopologyError> {
        MixingMatrix::from_rule(&self.graph(m)?, self.rule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub algorithm: Algorithm,
    pub rounds: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: u64,
    /// First seed; repetition `r` uses `seed + r`.
    #[serde(default)]
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub output: PathBuf,
    /// Write all client models every this many rounds (0 = never).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Track `B` and `sigma_g` over every visited point for the theory
    /// sidecar.
    #[serde(default = "default_true")]
    pub track_constants: bool,
    pub problem: ProblemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologySpec>,
    pub trainer: LocalTrainerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizer: Option<QuantizerSpec>,
}

fn default_repetitions() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

impl ExperimentSpec {
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repetitions).map(move |r| self.seed.wrapping_add(r))
    }

    /// Every problem with this experiment, each prefixed by its field path.
    pub fn problems(&self) -> Vec<String> {
        let n = &self.name;
        let mut errs = Vec::new();
        if self.name.trim().is_empty() {
            errs.push("experiment.name: must be nonempty".to_string());
        }
        if self.name.contains(['/', '\\']) {
            errs.push(format!("experiment {n:?}.name: must not contain path separators"));
        }
        if self.repetitions < 1 {
            errs.push(format!("experiment {n:?}.repetitions: must be ≥ 1"));
        }
        let t = &self.trainer;
        if !(0.0..1.0).contains(&t.theta) {
            errs.push(format!("experiment {n:?}.trainer.theta: momentum must satisfy 0 ≤ θ < 1, got {}", t.theta));
        }
        if !(t.eta > 0.0 && t.eta.is_finite()) {
            errs.push(format!("experiment {n:?}.trainer.eta: must be > 0, got {}", t.eta));
        }
        if t.local_steps == 0 {
            errs.push(format!("experiment {n:?}.trainer.local_steps: must be ≥ 1"));
        }
        if self.algorithm == Algorithm::Dsgd && (t.local_steps != 1 || t.theta != 0.0) {
            errs.push(format!("experiment {n:?}.trainer: dsgd takes one plain step, set local_steps = 1 and theta = 0"));
        }
        if let Err(e) = self.problem.validate() {
            errs.push(format!("experiment {n:?}.problem: {e}"));
        }
        let m = self.problem.clients();
        match (&self.topology, self.algorithm.is_decentralized()) {
            (None, true) => errs.push(format!("experiment {n:?}.topology: required for {}", self.algorithm)),
            (Some(_), false) => errs.push(format!("experiment {n:?}.topology: not used by {}, remove it", self.algorithm)),
            (Some(topo), true) => {
                match (topo.kind, topo.edge_prob) {
                    (TopologyKind::Random, None) => {
                        errs.push(format!("experiment {n:?}.topology.edge_prob: required for kind = \"random\""))
                    }
                    (TopologyKind::Random, Some(p)) if !(0.0..=1.0).contains(&p) => {
                        errs.push(format!("experiment {n:?}.topology.edge_prob: must lie in [0, 1], got {p}"))
                    }
                    (TopologyKind::Ring | TopologyKind::Complete, Some(_)) => {
                        errs.push(format!("experiment {n:?}.topology.edge_prob: only used by kind = \"random\""))
                    }
                    _ => {}
                }
                if m >= 2 && errs.is_empty() {
                    if let Err(e) = topo.mixing(m) {
                        errs.push(format!("experiment {n:?}.topology: {e}"));
                    }
                } else if m < 2 {
                    errs.push(format!("experiment {n:?}.topology: gossip needs at least 2 clients, got {m}"));
                }
            }
            (None, false) => {}
        }
        let quantized = self.algorithm == Algorithm::DfedavgmQuantized;
        match (&self.quantizer, quantized) {
            (None, true) => errs.push(format!("experiment {n:?}.quantizer: required for dfedavgm_quantized")),
            (Some(_), false) => errs.push(format!("experiment {n:?}.quantizer: only used by dfedavgm_quantized")),
            (Some(q), true) => {
                if let Err(e) = q.validate() {
                    errs.push(format!("experiment {n:?}.quantizer: {e}"));
                }
            }
            (None, false) => {}
        }
        errs
    }

    /// Engine configuration for one seed.
    pub fn run_config(&self, seed: u64) -> Result<RunConfig, String> {
        let mut rc = RunConfig::new(self.algorithm, self.rounds, self.trainer, seed);
        rc.track_constants = self.track_constants;
        if let Some(topo) = &self.topology {
            rc.mixing = Some(topo.mixing(self.problem.clients()).map_err(|e| e.to_string())?);
        }
        rc.quantizer = self.quantizer;
        Ok(rc)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_dir: Option<PathBuf>,
    #[serde(default, rename = "experiment")]
    pub experiments: Vec<ExperimentSpec>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// All validation problems, including output-directory writability
    /// resolved against `base`.
    pub fn problems(&self, base: &Path) -> Vec<String> {
        let mut errs: Vec<String> = self.experiments.iter().flat_map(|e| e.problems()).collect();
        let mut names = std::collections::BTreeSet::new();
        for e in &self.experiments {
            if !names.insert(e.name.as_str()) {
                errs.push(format!("experiment {:?}: duplicate name", e.name));
            }
            let out = resolve(base, &e.output);
            if let Err(msg) = check_writable(&out) {
                errs.push(format!("experiment {:?}.output: {msg}", e.name));
            }
        }
        if let Some(dir) = &self.summary_dir {
            if let Err(msg) = check_writable(&resolve(base, dir)) {
                errs.push(format!("summary_dir: {msg}"));
            }
        }
        errs
    }

    pub fn summary_dir(&self, base: &Path) -> PathBuf {
        self.summary_dir.as_ref().map_or_else(|| base.to_path_buf(), |d| resolve(base, d))
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// The directory (or its nearest existing ancestor) must be a writable
/// directory.
fn check_writable(dir: &Path) -> Result<(), String> {
    let mut cur = Some(dir);
    while let Some(p) = cur {
        if let Ok(meta) = std::fs::metadata(p) {
            if !meta.is_dir() {
                return Err(format!("{} exists and is not a directory", p.display()));
            }
            if meta.permissions().readonly() {
                return Err(format!("{} is not writable", p.display()));
            }
            return Ok(());
        }
        cur = p.parent();
    }
    Ok(())
}

//! Synchronous round engine for DFedAvgM, its quantized variant and the
//! DSGD, FedAvg and centralized SGD baselines.
//!
//! Every round all clients participate. Local work runs in parallel on the
//! current rayon pool; gossip and aggregation are sequential with a fixed
//! summation order, so results do not depend on scheduling.

mod io;

pub use io::{read_checkpoint, write_checkpoint, write_records_csv, write_records_jsonl, CHECKPOINT_MAGIC, CSV_HEADER};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::local::{run_local, LocalError, LocalTrainerConfig, Recording};
use crate::problems::{ConstantTracker, Problem};
use crate::quantize::{QuantizeError, QuantizerSpec};
use crate::rng::StreamKey;
pub use crate::theory::consensus_distance;
use crate::topology::MixingMatrix;
use crate::vector::ParamVector;

/// Bits in one full-precision coordinate.
pub const FLOAT_BITS: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dfedavgm,
    DfedavgmQuantized,
    Dsgd,
    Fedavg,
    Sgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::Dfedavgm, Algorithm::DfedavgmQuantized, Algorithm::Dsgd, Algorithm::Fedavg, Algorithm::Sgd];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dfedavgm => "dfedavgm",
            Algorithm::DfedavgmQuantized => "dfedavgm_quantized",
            Algorithm::Dsgd => "dsgd",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Sgd => "sgd",
        }
    }

    /// Whether the algorithm gossips over a graph.
    pub fn is_decentralized(self) -> bool {
        matches!(self, Algorithm::Dfedavgm | Algorithm::DfedavgmQuantized | Algorithm::Dsgd)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("divergence at round {round}, client {client}, step {step}")]
    Divergence { round: u64, client: usize, step: usize },
    #[error("quantizer range exceeded at round {round}, client {client}: {source}")]
    Quantize {
        round: u64,
        client: usize,
        #[source]
        source: QuantizeError,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<LocalError> for RunError {
    fn from(e: LocalError) -> Self {
        match e {
            LocalError::Divergence { round, client, step } => RunError::Divergence { round, client, step },
            LocalError::InvalidConfig(msg) => RunError::Config(msg),
        }
    }
}

/// Everything that determines a run apart from the problem.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub rounds: u64,
    /// For DSGD only `eta` is used; `K = 1` and `theta = 0` are implied.
    pub trainer: LocalTrainerConfig,
    pub quantizer: Option<QuantizerSpec>,
    pub mixing: Option<MixingMatrix>,
    pub seed: u64,
    /// Track `B` and `sigma_g` over every point the run visits, inner
    /// iterates included.
    pub track_constants: bool,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, rounds: u64, trainer: LocalTrainerConfig, seed: u64) -> Self {
        RunConfig { algorithm, rounds, trainer, quantizer: None, mixing: None, seed, track_constants: false }
    }

    pub fn with_mixing(mut self, mixing: MixingMatrix) -> Self {
        self.mixing = Some(mixing);
        self
    }

    pub fn with_quantizer(mut self, quantizer: QuantizerSpec) -> Self {
        self.quantizer = Some(quantizer);
        self
    }

    pub fn tracking_constants(mut self) -> Self {
        self.track_constants = true;
        self
    }

    /// Checks internal consistency against `clients` clients.
    pub fn validate(&self, clients: usize) -> Result<(), RunError> {
        let mut errs = Vec::new();
        if let Err(e) = self.trainer.validate() {
            errs.push(e.to_string());
        }
        let quantized = self.algorithm == Algorithm::DfedavgmQuantized;
        match (&self.quantizer, quantized) {
            (None, true) => errs.push("dfedavgm_quantized requires a quantizer".into()),
            (Some(_), false) => errs.push(format!("quantizer given but algorithm is {}", self.algorithm)),
            (Some(q), true) => {
                if let Err(e) = q.validate() {
                    errs.push(e.to_string());
                }
            }
            (None, false) => {}
        }
        match (&self.mixing, self.algorithm.is_decentralized()) {
            (None, true) => errs.push(format!("{} requires a mixing matrix", self.algorithm)),
            (Some(_), false) => errs.push(format!("{} does not use a topology", self.algorithm)),
            (Some(w), true) if w.size() != clients => {
                errs.push(format!("mixing matrix has {} nodes but the problem has {clients} clients", w.size()))
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(errs.join("; ")))
        }
    }
}

/// One client's model and its cumulative traffic.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client: usize,
    pub x: ParamVector,
    pub bits_sent: u64,
}

/// Metrics at the start of round `t` (after `t` communications).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: u64,
    /// `f(x_bar)`.
    pub f_avg: f64,
    /// `||grad f(x_bar)||^2` with the exact gradient.
    pub grad_norm_sq: f64,
    /// `(1/m) sum_i ||x(i) - x_bar||^2`.
    pub consensus: f64,
    pub bits_total: u64,
    pub wall_ms: f64,
}

impl RoundRecord {
    /// Equality of every field except the wall clock.
    pub fn same_numbers(&self, other: &RoundRecord) -> bool {
        self.t == other.t
            && self.f_avg.to_bits() == other.f_avg.to_bits()
            && self.grad_norm_sq.to_bits() == other.grad_norm_sq.to_bits()
            && self.consensus.to_bits() == other.consensus.to_bits()
            && self.bits_total == other.bits_total
    }
}

/// Uniform average of the client models.
pub fn average(states: &[ClientState]) -> ParamVector {
    let d = states.first().map_or(0, |s| s.x.dim());
    ParamVector::mean(states.iter().map(|s| &s.x), d)
}

/// `x_new(i) = sum_l w_il z(l)`, summed in ascending `l` starting from zero.
pub fn gossip(mixing: &MixingMatrix, z: &[ParamVector]) -> Vec<ParamVector> {
    assert_eq!(mixing.size(), z.len());
    let d = z.first().map_or(0, |v| v.dim());
    (0..z.len())
        .map(|i| {
            let mut out = ParamVector::zeros(d);
            for &(l, w) in mixing.row(i) {
                for (o, v) in out.iter_mut().zip(z[l].iter()) {
                    *o += w * v;
                }
            }
            out
        })
        .collect()
}

/// Per-round side information besides the new states.
#[derive(Debug, Clone, Default)]
pub struct RoundStats {
    /// Largest `|z(i)_j - x(i)_j|` this round.
    pub max_abs_delta: f64,
    pub tracker: ConstantTracker,
}

struct LocalOut {
    z: ParamVector,
    max_abs_delta: f64,
    tracker: ConstantTracker,
}

fn local_all(
    states: &[ClientState],
    cfg: &LocalTrainerConfig,
    problem: &dyn Problem,
    t: u64,
    seed: u64,
    track: bool,
) -> Result<Vec<LocalOut>, RunError> {
    let recording = if track { Recording::Iterates } else { Recording::FinalOnly };
    let outs: Vec<Result<LocalOut, LocalError>> = states
        .par_iter()
        .map(|s| {
            let traj = run_local(&s.x, s.client, t, seed, cfg, problem, recording)?;
            let mut tracker = ConstantTracker::default();
            if track {
                for y in &traj.iterates {
                    tracker.observe(problem, y);
                }
            }
            let max_abs_delta = traj.max_abs_delta();
            Ok(LocalOut { z: traj.into_final(), max_abs_delta, tracker })
        })
        .collect();
    // report the lowest-indexed failing client regardless of scheduling
    outs.into_iter().map(|r| r.map_err(RunError::from)).collect()
}

fn finish_stats(outs: &[LocalOut]) -> RoundStats {
    let mut stats = RoundStats::default();
    for o in outs {
        stats.max_abs_delta = stats.max_abs_delta.max(o.max_abs_delta);
        stats.tracker.merge(&o.tracker);
    }
    stats
}

fn check_finite(states: &[ClientState], t: u64, step: usize) -> Result<(), RunError> {
    match states.iter().find(|s| !s.x.is_finite()) {
        Some(s) => Err(RunError::Divergence { round: t, client: s.client, step }),
        None => Ok(()),
    }
}

/// One DFedAvgM round: `K` local momentum steps, then gossip of `z`.
pub fn round_dfedavgm(
    states: &mut [ClientState],
    mixing: &MixingMatrix,
    trainer: &LocalTrainerConfig,
    problem: &dyn Problem,
    t: u64,
    seed: u64,
    track: bool,
) -> Result<RoundStats, RunError> {
    let outs = local_all(states, trainer, problem, t, seed, track)?;
    let z: Vec<ParamVector> = outs.iter().map(|o| o.z.clone()).collect();
    let d = problem.dim() as u64;
    for (s, x) in states.iter_mut().zip(gossip(mixing, &z)) {
        s.x = x;
        s.bits_sent += FLOAT_BITS * d * mixing.out_degree(s.client) as u64;
    }
    check_finite(states, t, trainer.local_steps)?;
    Ok(finish_stats(&outs))
}

/// One quantized DFedAvgM round: each client sends `Q(z(i) - x(i))` and
/// applies `sum_l w_il (x(l) + Q(z(l) - x(l)))`.
///
/// When all clients agree this is `x(i) + sum_l w_il Q(z(l) - x(l))`. Mixing
/// only the decoded deltas would never contract disagreement between the
/// `x(i)`, and amplifies it along negative eigenvalues of `W`.
pub fn round_dfedavgm_quantized(
    states: &mut [ClientState],
    mixing: &MixingMatrix,
    trainer: &LocalTrainerConfig,
    quantizer: &QuantizerSpec,
    problem: &dyn Problem,
    t: u64,
    seed: u64,
    track: bool,
) -> Result<RoundStats, RunError> {
    let outs = local_all(states, trainer, problem, t, seed, track)?;
    let mut decoded = Vec::with_capacity(states.len());
    for (s, o) in states.iter().zip(&outs) {
        let delta: Vec<f64> = o.z.iter().zip(s.x.iter()).map(|(z, x)| z - x).collect();
        let key = StreamKey::quantize(seed, t, s.client).child(quantizer.seed);
        let q = quantizer
            .quantize_with_key(&delta, key)
            .map_err(|source| RunError::Quantize { round: t, client: s.client, source })?;
        let mut target = q.dequantize();
        target.iter_mut().zip(s.x.iter()).for_each(|(v, x)| *v += x);
        decoded.push(target);
    }
    let mixed = gossip(mixing, &decoded);
    let d = problem.dim() as u64;
    for (s, m) in states.iter_mut().zip(mixed) {
        s.x = m;
        s.bits_sent += (32 + d * quantizer.bits as u64) * mixing.out_degree(s.client) as u64;
    }
    check_finite(states, t, trainer.local_steps)?;
    Ok(finish_stats(&outs))
}

/// One DSGD round: `x(i) <- sum_l w_il (x(l) - eta g~(l))`.
pub fn round_dsgd(
    states: &mut [ClientState],
    mixing: &MixingMatrix,
    eta: f64,
    problem: &dyn Problem,
    t: u64,
    seed: u64,
    track: bool,
) -> Result<RoundStats, RunError> {
    let d = problem.dim();
    let z: Vec<ParamVector> = states
        .par_iter()
        .map(|s| {
            let mut g = vec![0.0; d];
            problem.stochastic_grad(s.client, &s.x, StreamKey::gradient(seed, s.client, t, 0), &mut g);
            s.x.iter().zip(&g).map(|(x, g)| x - eta * g).collect::<Vec<f64>>().into()
        })
        .collect();
    let mut stats = RoundStats::default();
    for (s, zi) in states.iter().zip(&z) {
        if !zi.is_finite() {
            return Err(RunError::Divergence { round: t, client: s.client, step: 0 });
        }
        stats.max_abs_delta = zi.iter().zip(s.x.iter()).map(|(a, b)| (a - b).abs()).fold(stats.max_abs_delta, f64::max);
        if track {
            stats.tracker.observe(problem, &s.x);
            stats.tracker.observe(problem, zi);
        }
    }
    for (s, x) in states.iter_mut().zip(gossip(mixing, &z)) {
        s.x = x;
        s.bits_sent += FLOAT_BITS * d as u64 * mixing.out_degree(s.client) as u64;
    }
    check_finite(states, t, 1)?;
    Ok(stats)
}

/// One FedAvg round with full participation: local training, server mean
/// `sum_i (1/m) z(i)` in client order, broadcast.
pub fn round_fedavg(
    states: &mut [ClientState],
    trainer: &LocalTrainerConfig,
    problem: &dyn Problem,
    t: u64,
    seed: u64,
    track: bool,
) -> Result<RoundStats, RunError> {
    let outs = local_all(states, trainer, problem, t, seed, track)?;
    let inv = 1.0 / states.len() as f64;
    let mut server = ParamVector::zeros(problem.dim());
    for o in &outs {
        server.iter_mut().zip(o.z.iter()).for_each(|(a, v)| *a += inv * v);
    }
    let d = problem.dim() as u64;
    for s in states.iter_mut() {
        s.x = server.clone();
        s.bits_sent += 2 * FLOAT_BITS * d;
    }
    check_finite(states, t, trainer.local_steps)?;
    Ok(finish_stats(&outs))
}

/// One round of centralized momentum SGD: `K` server steps, each using the
/// mean of the clients' stochastic gradients `sum_i (1/m) g~_i`. Every step
/// costs one gradient upload and one model download per client.
pub fn round_sgd(
    states: &mut [ClientState],
    trainer: &LocalTrainerConfig,
    problem: &dyn Problem,
    t: u64,
    seed: u64,
    track: bool,
) -> Result<RoundStats, RunError> {
    let d = problem.dim();
    let m = states.len();
    let inv = 1.0 / m as f64;
    let start = states[0].x.clone();
    let mut prev = start.clone();
    let mut cur = start.clone();
    let mut stats = RoundStats::default();
    if track {
        stats.tracker.observe(problem, &cur);
    }
    for k in 0..trainer.local_steps {
        let grads: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut g = vec![0.0; d];
                problem.stochastic_grad(i, &cur, StreamKey::gradient(seed, i, t, k as u64), &mut g);
                g
            })
            .collect();
        let mut g = vec![0.0; d];
        for gi in &grads {
            g.iter_mut().zip(gi).for_each(|(a, v)| *a += inv * v);
        }
        let mut next = ParamVector::zeros(d);
        for j in 0..d {
            next[j] = cur[j] - trainer.eta * g[j];
        }
        if trainer.theta != 0.0 {
            for j in 0..d {
                next[j] += trainer.theta * (cur[j] - prev[j]);
            }
        }
        if !next.is_finite() {
            return Err(RunError::Divergence { round: t, client: 0, step: k });
        }
        if track {
            stats.tracker.observe(problem, &next);
        }
        prev = std::mem::replace(&mut cur, next);
    }
    stats.max_abs_delta = cur.iter().zip(start.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let per_client = 2 * FLOAT_BITS * d as u64 * trainer.local_steps as u64;
    for s in states.iter_mut() {
        s.x = cur.clone();
        s.bits_sent += per_client;
    }
    Ok(stats)
}

/// Closed-form cumulative bits after `rounds` rounds. `edges` is `|E|` of
/// the gossip graph and `bits` the quantizer width (ignored otherwise).
pub fn closed_form_bits(algorithm: Algorithm, d: u64, m: u64, edges: u64, local_steps: u64, bits: u32, rounds: u64) -> u64 {
    let per_round = match algorithm {
        Algorithm::Dfedavgm | Algorithm::Dsgd => 2 * edges * FLOAT_BITS * d,
        Algorithm::DfedavgmQuantized => 2 * edges * (32 + d * bits as u64),
        Algorithm::Fedavg => 2 * FLOAT_BITS * d * m,
        Algorithm::Sgd => 2 * FLOAT_BITS * d * m * local_steps,
    };
    per_round * rounds
}

/// Stateful engine; [`Engine::step`] advances one communication round.
pub struct Engine<'a> {
    config: RunConfig,
    problem: &'a dyn Problem,
    states: Vec<ClientState>,
    t: u64,
    started: Instant,
    tracker: ConstantTracker,
    max_abs_delta: f64,
}

impl<'a> Engine<'a> {
    pub fn new(config: RunConfig, problem: &'a dyn Problem) -> Result<Self, RunError> {
        config.validate(problem.clients())?;
        let x0 = problem.initial_point();
        let states = (0..problem.clients()).map(|client| ClientState { client, x: x0.clone(), bits_sent: 0 }).collect();
        let mut tracker = ConstantTracker::default();
        if config.track_constants {
            tracker.observe(problem, &x0);
        }
        Ok(Engine { config, problem, states, t: 0, started: Instant::now(), tracker, max_abs_delta: 0.0 })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn states(&self) -> &[ClientState] {
        &self.states
    }

    /// Replaces all client models (for tests and resumed runs).
    pub fn set_models(&mut self, xs: Vec<ParamVector>) {
        assert_eq!(xs.len(), self.states.len());
        for (s, x) in self.states.iter_mut().zip(xs) {
            assert_eq!(x.dim(), self.problem.dim());
            s.x = x;
        }
    }

    pub fn models(&self) -> Vec<ParamVector> {
        self.states.iter().map(|s| s.x.clone()).collect()
    }

    pub fn round(&self) -> u64 {
        self.t
    }

    pub fn bits_total(&self) -> u64 {
        self.states.iter().map(|s| s.bits_sent).sum()
    }

    pub fn average(&self) -> ParamVector {
        average(&self.states)
    }

    /// Running maxima of `B` and `sigma_g` (only with `track_constants`).
    pub fn tracker(&self) -> &ConstantTracker {
        &self.tracker
    }

    /// Largest coordinate of any model delta `z(i) - x(i)` so far.
    pub fn max_abs_delta(&self) -> f64 {
        self.max_abs_delta
    }

    pub fn record(&self) -> RoundRecord {
        let xbar = self.average();
        let mut g = vec![0.0; self.problem.dim()];
        self.problem.grad(&xbar, &mut g);
        let xs: Vec<ParamVector> = self.models();
        RoundRecord {
            t: self.t,
            f_avg: self.problem.loss(&xbar),
            grad_norm_sq: g.iter().map(|v| v * v).sum(),
            consensus: consensus_distance(&xs),
            bits_total: self.bits_total(),
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        }
    }

    pub fn step(&mut self) -> Result<(), RunError> {
        let (t, seed, track) = (self.t, self.config.seed, self.config.track_constants);
        let cfg = &self.config;
        let p = self.problem;
        let stats = match cfg.algorithm {
            Algorithm::Dfedavgm => round_dfedavgm(&mut self.states, cfg.mixing.as_ref().unwrap(), &cfg.trainer, p, t, seed, track),
            Algorithm::DfedavgmQuantized => round_dfedavgm_quantized(
                &mut self.states,
                cfg.mixing.as_ref().unwrap(),
                &cfg.trainer,
                cfg.quantizer.as_ref().unwrap(),
                p,
                t,
                seed,
                track,
            ),
            Algorithm::Dsgd => round_dsgd(&mut self.states, cfg.mixing.as_ref().unwrap(), cfg.trainer.eta, p, t, seed, track),
            Algorithm::Fedavg => round_fedavg(&mut self.states, &cfg.trainer, p, t, seed, track),
            Algorithm::Sgd => round_sgd(&mut self.states, &cfg.trainer, p, t, seed, track),
        }?;
        self.tracker.merge(&stats.tracker);
        self.max_abs_delta = self.max_abs_delta.max(stats.max_abs_delta);
        self.t += 1;
        Ok(())
    }
}

/// Records and final state of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_models: Vec<ParamVector>,
    pub tracker: ConstantTracker,
    pub max_abs_delta: f64,
}

/// A run that stopped early; `records` holds everything up to the failure.
#[derive(Debug, Error)]
#[error("{error} (after {} records)", records.len())]
pub struct RunAborted {
    pub records: Vec<RoundRecord>,
    #[source]
    pub error: RunError,
}

/// Runs `config.rounds` rounds, producing records for `t = 0..=rounds`.
pub fn run_experiment(config: RunConfig, problem: &dyn Problem) -> Result<RunOutput, RunAborted> {
    run_experiment_with(config, problem, |_, _| Ok(()))
}

/// Like [`run_experiment`], calling `on_record` after each record is taken
/// so callers can stream records or checkpoint models.
pub fn run_experiment_with<F>(config: RunConfig, problem: &dyn Problem, mut on_record: F) -> Result<RunOutput, RunAborted>
where
    F: FnMut(&RoundRecord, &Engine<'_>) -> Result<(), RunError>,
{
    let rounds = config.rounds;
    let mut records = Vec::with_capacity(rounds as usize + 1);
    let mut engine = match Engine::new(config, problem) {
        Ok(e) => e,
        Err(error) => return Err(RunAborted { records, error }),
    };
    loop {
        let rec = engine.record();
        let hook = on_record(&rec, &engine);
        records.push(rec);
        if let Err(error) = hook {
            return Err(RunAborted { records, error });
        }
        if engine.round() == rounds {
            break;
        }
        if let Err(error) = engine.step() {
            return Err(RunAborted { records, error });
        }
    }
    Ok(RunOutput {
        records,
        final_models: engine.models(),
        tracker: engine.tracker.clone(),
        max_abs_delta: engine.max_abs_delta,
    })
}

//! The K-step heavy-ball inner loop a client runs between communications.
//!
//! Starting from `y^{-1} = y^0 = x`, each step computes
//! `y^{k+1} = y^k - eta g~^k + theta (y^k - y^{k-1})` with `g~^k` an unbiased
//! gradient drawn from stream `(seed, client, round, k)`. Momentum is reset at
//! the start of every round.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::{MeasuredConstants, Problem};
use crate::rng::StreamKey;
use crate::theory;
use crate::vector::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalError {
    #[error("invalid trainer configuration: {0}")]
    InvalidConfig(String),
    #[error("local iterate diverged (non-finite) at round {round}, client {client}, step {step}")]
    Divergence { round: u64, client: usize, step: usize },
}

/// Learning rate, momentum and number of inner steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainerConfig {
    pub eta: f64,
    pub theta: f64,
    pub local_steps: usize,
}

impl LocalTrainerConfig {
    pub fn new(eta: f64, theta: f64, local_steps: usize) -> Result<Self, LocalError> {
        let cfg = LocalTrainerConfig { eta, theta, local_steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LocalError> {
        let mut errs = Vec::new();
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            errs.push(format!("learning rate must satisfy eta > 0, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.theta) {
            errs.push(format!("momentum must satisfy 0 ≤ θ < 1, got {}", self.theta));
        }
        if self.local_steps == 0 {
            errs.push("local steps K must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LocalError::InvalidConfig(errs.join("; ")))
        }
    }

    /// The two stepsize conditions under which the nonconvex rate bound
    /// holds: `eta <= 1/(8 L K)` and `64 L^2 K^2 eta^2 + 64 L K eta < 1`.
    pub fn stepsize_conditions(&self, smoothness: f64) -> StepsizeConditions {
        let (l, k, eta) = (smoothness, self.local_steps as f64, self.eta);
        StepsizeConditions {
            eta_le_inv_8lk: eta > 0.0 && eta <= 1.0 / (8.0 * l * k),
            quadratic_lt_one: 64.0 * l * l * k * k * eta * eta + 64.0 * l * k * eta < 1.0,
        }
    }

    /// Logs a warning when the stepsize falls outside the analyzed region.
    pub fn warn_if_outside_theory(&self, smoothness: f64) -> StepsizeConditions {
        let c = self.stepsize_conditions(smoothness);
        if !c.all() {
            log::warn!(
                "stepsize eta = {} with L = {smoothness}, K = {} violates the theory conditions ({c:?}); \
                 bounds will not apply",
                self.eta,
                self.local_steps
            );
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepsizeConditions {
    pub eta_le_inv_8lk: bool,
    pub quadratic_lt_one: bool,
}

impl StepsizeConditions {
    pub fn all(&self) -> bool {
        self.eta_le_inv_8lk && self.quadratic_lt_one
    }
}

/// What [`run_local`] keeps besides the final iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recording {
    #[default]
    FinalOnly,
    Iterates,
    IteratesAndGradients,
}

/// Result of one client's inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrajectory {
    pub client: usize,
    pub round: u64,
    /// `y^0 .. y^K` when recorded, otherwise just `[y^0, y^K]`.
    pub iterates: Vec<ParamVector>,
    /// `g~^0 .. g~^{K-1}` when recorded.
    pub gradients: Vec<ParamVector>,
    recorded: bool,
}

impl LocalTrajectory {
    pub fn start(&self) -> &ParamVector {
        &self.iterates[0]
    }

    /// `z = y^K`.
    pub fn final_iterate(&self) -> &ParamVector {
        self.iterates.last().unwrap()
    }

    pub fn into_final(mut self) -> ParamVector {
        self.iterates.pop().unwrap()
    }

    pub fn has_iterates(&self) -> bool {
        self.recorded
    }

    /// Largest `|y^K_j - y^0_j|` over coordinates.
    pub fn max_abs_delta(&self) -> f64 {
        self.final_iterate().iter().zip(self.start().iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// CSV rows `round,client,k,norm_y,loss,step_norm` (requires recorded
    /// iterates).
    pub fn to_csv_rows(&self, problem: &dyn Problem) -> String {
        let mut out = String::new();
        for (k, y) in self.iterates.iter().enumerate() {
            let step = if k == 0 { 0.0 } else { y.dist_sq(&self.iterates[k - 1]).sqrt() };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.round,
                self.client,
                k,
                y.norm(),
                problem.local_loss(self.client, y),
                step
            ));
        }
        out
    }
}

pub const TRAJECTORY_CSV_HEADER: &str = "round,client,k,norm_y,loss,step_norm";

/// Runs `cfg.local_steps` heavy-ball steps for `client` in `round`.
pub fn run_local(
    x_start: &ParamVector,
    client: usize,
    round: u64,
    seed: u64,
    cfg: &LocalTrainerConfig,
    problem: &dyn Problem,
    recording: Recording,
) -> Result<LocalTrajectory, LocalError> {
    assert_eq!(x_start.dim(), problem.dim(), "start vector dimension mismatch");
    let d = problem.dim();
    let mut prev = x_start.clone();
    let mut cur = x_start.clone();
    let mut grad = ParamVector::zeros(d);
    let keep = recording != Recording::FinalOnly;
    let mut iterates = vec![x_start.clone()];
    let mut gradients = Vec::new();
    for k in 0..cfg.local_steps {
        problem.stochastic_grad(client, &cur, StreamKey::gradient(seed, client, round, k as u64), &mut grad);
        let mut next = ParamVector::zeros(d);
        for j in 0..d {
            next[j] = cur[j] - cfg.eta * grad[j];
        }
        if cfg.theta != 0.0 {
            for j in 0..d {
                next[j] += cfg.theta * (cur[j] - prev[j]);
            }
        }
        if !next.is_finite() {
            return Err(LocalError::Divergence { round, client, step: k });
        }
        if recording == Recording::IteratesAndGradients {
            gradients.push(grad.clone());
        }
        if keep {
            iterates.push(next.clone());
        }
        prev = std::mem::replace(&mut cur, next);
    }
    if !keep {
        iterates.push(cur);
    }
    Ok(LocalTrajectory { client, round, iterates, gradients, recorded: keep })
}

/// Empirical displacement and drift against their bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    /// Mean over trajectories of `||y^{k+1} - y^k||^2`, indexed by `k`.
    pub step_mean_sq: Vec<f64>,
    /// Mean over trajectories of `||y^k - x||^2`, indexed by `k = 0..=K`.
    pub drift_mean_sq: Vec<f64>,
    /// `(2 eta^2 sigma_l^2 + 2 eta^2 B^2) / (1 - theta)^2`.
    pub step_bound: f64,
    /// `C_1 eta^2 + 32 K^2 eta^2 * mean_i ||grad f(x_i)||^2`.
    pub drift_bound: f64,
}

impl DriftReport {
    pub fn max_step(&self) -> f64 {
        self.step_mean_sq.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_drift(&self) -> f64 {
        self.drift_mean_sq.iter().copied().fold(0.0, f64::max)
    }
}

/// Averages per-step displacement and drift over recorded trajectories and
/// evaluates the matching bounds with the supplied constants.
pub fn drift_bound_probe(
    trajectories: &[LocalTrajectory],
    cfg: &LocalTrainerConfig,
    problem: &dyn Problem,
    constants: &MeasuredConstants,
) -> DriftReport {
    assert!(!trajectories.is_empty(), "need at least one trajectory");
    assert!(trajectories.iter().all(|t| t.has_iterates()), "trajectories must record iterates");
    let k_steps = cfg.local_steps;
    let n = trajectories.len() as f64;
    let mut step_mean_sq = vec![0.0; k_steps];
    let mut drift_mean_sq = vec![0.0; k_steps + 1];
    let mut grad_term = 0.0;
    let mut g = vec![0.0; problem.dim()];
    for t in trajectories {
        let x = t.start();
        for (k, s) in step_mean_sq.iter_mut().enumerate() {
            *s += t.iterates[k + 1].dist_sq(&t.iterates[k]) / n;
        }
        for (k, y) in t.iterates.iter().enumerate() {
            drift_mean_sq[k] += y.dist_sq(x) / n;
        }
        problem.grad(x, &mut g);
        grad_term += g.iter().map(|v| v * v).sum::<f64>() / n;
    }
    let (eta, k) = (cfg.eta, k_steps as f64);
    let step_bound = theory::step_bound(eta, cfg.theta, constants.sigma_l, constants.grad_bound);
    let c1 = theory::c1(k_steps, cfg.theta, constants.sigma_l, constants.sigma_g, constants.grad_bound);
    let drift_bound = c1 * eta * eta + 32.0 * k * k * eta * eta * grad_term;
    DriftReport { step_mean_sq, drift_mean_sq, step_bound, drift_bound }
}

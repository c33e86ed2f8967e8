//! Per-client objectives with stochastic gradient oracles.
//!
//! The global objective is `f(x) = (1/m) sum_i f_i(x)`. Each client exposes
//! its exact loss and gradient plus an unbiased stochastic gradient addressed
//! by a [`StreamKey`], so that gradient noise is reproducible regardless of
//! evaluation order.

mod data;
mod logistic;
mod mlp;
mod partition;
mod quadratic;

pub use data::Dataset;
pub use logistic::{Logistic, LogisticSpec};
pub use mlp::{Mlp, MlpSpec};
pub use partition::{partition_indices, Partition, PartitionMode};
pub use quadratic::{Quadratic, QuadraticSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Purpose, StreamKey};
use crate::vector::ParamVector;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("invalid problem configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot cut {n} samples into {shards} shards ({clients} clients x {per_client} shards each)")]
    InfeasibleShards {
        n: usize,
        shards: usize,
        clients: usize,
        per_client: usize,
    },
}

/// Constants a problem knows about itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeclaredConstants {
    /// Lipschitz constant of every `grad f_i`.
    pub smoothness: Option<f64>,
    /// PL constant of the global objective.
    pub pl: Option<f64>,
    /// `min f`.
    pub min_value: Option<f64>,
    /// Exact `sqrt(E ||g~ - grad f_i||^2)` when it does not depend on `x`.
    pub noise_sigma: Option<f64>,
}

/// A federated objective split across `clients()` clients.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;

    fn clients(&self) -> usize;

    fn dim(&self) -> usize;

    fn local_loss(&self, client: usize, x: &[f64]) -> f64;

    fn local_grad(&self, client: usize, x: &[f64], out: &mut [f64]);

    /// Unbiased estimate of `grad f_client(x)`; identical keys give identical
    /// draws.
    fn stochastic_grad(&self, client: usize, x: &[f64], key: StreamKey, out: &mut [f64]);

    fn declared(&self) -> DeclaredConstants;

    /// Starting point shared by every client.
    fn initial_point(&self) -> ParamVector {
        ParamVector::zeros(self.dim())
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let m = self.clients();
        (0..m).map(|i| self.local_loss(i, x)).sum::<f64>() / m as f64
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        let m = self.clients();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut buf = vec![0.0; self.dim()];
        for i in 0..m {
            self.local_grad(i, x, &mut buf);
            out.iter_mut().zip(&buf).for_each(|(o, g)| *o += g);
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Empirical `sigma_l`, `sigma_g` and `B` over a set of points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasuredConstants {
    pub sigma_l: f64,
    pub sigma_g: f64,
    pub grad_bound: f64,
}

/// Running maxima of the heterogeneity and gradient-norm constants over the
/// points a run visits.
#[derive(Debug, Clone, Default)]
pub struct ConstantTracker {
    sigma_g_sq: f64,
    grad_bound: f64,
    points: usize,
}

impl ConstantTracker {
    pub fn observe(&mut self, problem: &dyn Problem, x: &[f64]) {
        let (b, sg) = point_constants(problem, x);
        self.grad_bound = self.grad_bound.max(b);
        self.sigma_g_sq = self.sigma_g_sq.max(sg);
        self.points += 1;
    }

    pub fn merge(&mut self, other: &ConstantTracker) {
        self.grad_bound = self.grad_bound.max(other.grad_bound);
        self.sigma_g_sq = self.sigma_g_sq.max(other.sigma_g_sq);
        self.points += other.points;
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn grad_bound(&self) -> f64 {
        self.grad_bound
    }

    pub fn sigma_g(&self) -> f64 {
        self.sigma_g_sq.sqrt()
    }
}

/// `(max_i ||grad f_i(x)||, (1/m) sum_i ||grad f_i(x) - grad f(x)||^2)`.
fn point_constants(problem: &dyn Problem, x: &[f64]) -> (f64, f64) {
    let m = problem.clients();
    let d = problem.dim();
    let mut grads = vec![vec![0.0; d]; m];
    for (i, g) in grads.iter_mut().enumerate() {
        problem.local_grad(i, x, g);
    }
    let mut mean = vec![0.0; d];
    for g in &grads {
        mean.iter_mut().zip(g).for_each(|(a, v)| *a += v / m as f64);
    }
    let b = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
    let sg = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / m as f64;
    (b, sg)
}

/// Monte-Carlo estimate of `max_{x, i} E ||g~_i(x) - grad f_i(x)||^2`,
/// returned as its square root.
pub fn estimate_sigma_local(problem: &dyn Problem, points: &[ParamVector], draws: usize, seed: u64) -> f64 {
    let d = problem.dim();
    let mut exact = vec![0.0; d];
    let mut noisy = vec![0.0; d];
    let mut worst: f64 = 0.0;
    let base = StreamKey::new(seed).purpose(Purpose::Probe);
    for (p, x) in points.iter().enumerate() {
        for i in 0..problem.clients() {
            problem.local_grad(i, x, &mut exact);
            let mut acc = 0.0;
            for r in 0..draws {
                let key = base.child(p as u64).child(i as u64).child(r as u64);
                problem.stochastic_grad(i, x, key, &mut noisy);
                acc += noisy.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            worst = worst.max(acc / draws.max(1) as f64);
        }
    }
    worst.sqrt()
}

/// Measures all three constants over `points`. When the problem declares an
/// exact noise level it is used instead of sampling.
pub fn measure_constants(problem: &dyn Problem, points: &[ParamVector], draws: usize, seed: u64) -> MeasuredConstants {
    let mut tracker = ConstantTracker::default();
    for x in points {
        tracker.observe(problem, x);
    }
    let sigma_l = match problem.declared().noise_sigma {
        Some(s) => s,
        None => estimate_sigma_local(problem, points, draws, seed),
    };
    MeasuredConstants { sigma_l, sigma_g: tracker.sigma_g(), grad_bound: tracker.grad_bound() }
}

/// `n` points drawn uniformly from the box `center +- radius`.
pub fn probe_box(center: &[f64], radius: f64, n: usize, seed: u64) -> Vec<ParamVector> {
    let mut rng = StreamKey::new(seed).purpose(Purpose::Probe).rng();
    (0..n)
        .map(|_| center.iter().map(|c| c + radius * (2.0 * rng.random::<f64>() - 1.0)).collect::<Vec<_>>().into())
        .collect()
}

//! Closed-form constants and bounds for DFedAvgM.
//!
//! With `D = K - theta` and `c = 1 - theta`:
//!
//! ```text
//! gamma = eta D / c - 64 c L^2 K^4 eta^3 / D - 64 L K^2 eta^2
//! C1    = 8 K sl^2 + 32 K^2 sg^2 + 64 K^2 theta^2 (sl^2 + B^2) / c^2
//! C2    = C1 + 32 K^2 B^2
//! alpha = (c L^2 K^2 eta^3 / D + L eta^2) C1 / gamma
//! beta  = (64 c L^4 K^4 eta^5 / D + 64 L^3 K^2 eta^4) C2 / ((1 - lambda) gamma)
//! ```
//!
//! The nonconvex bound is `2 (f(x1) - min f) / (gamma T) + alpha + beta`
//! and the PL bound is `(1 - nu gamma)^T (f(x0) - min f) + (alpha + beta) / (2 nu)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("outside the domain of the bound: {0}")]
    Domain(String),
    #[error("bound inapplicable: gamma = {gamma} is not positive (stepsize too large)")]
    Inapplicable { gamma: f64 },
}

/// Problem and algorithm parameters entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub local_steps: usize,
    pub eta: f64,
    pub theta: f64,
    pub smoothness: f64,
    pub sigma_l: f64,
    pub sigma_g: f64,
    pub grad_bound: f64,
    pub lambda: f64,
}

impl TheoryInputs {
    fn validate(&self) -> Result<(), TheoryError> {
        let vals = [self.eta, self.theta, self.smoothness, self.sigma_l, self.sigma_g, self.grad_bound, self.lambda];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(TheoryError::Domain(format!("non-finite input in {self:?}")));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return Err(TheoryError::Domain(format!("need 0 ≤ θ < 1, got {}", self.theta)));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(TheoryError::Domain(format!("need 0 ≤ λ < 1, got {}", self.lambda)));
        }
        if self.local_steps == 0 || self.eta <= 0.0 || self.smoothness <= 0.0 {
            return Err(TheoryError::Domain("need K ≥ 1, eta > 0 and L > 0".into()));
        }
        if self.sigma_l < 0.0 || self.sigma_g < 0.0 || self.grad_bound < 0.0 {
            return Err(TheoryError::Domain("variance and gradient bounds must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Evaluated constants of the nonconvex bound plus the stepsize checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub inputs: TheoryInputs,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub c1: f64,
    pub c2: f64,
    /// `0 < eta <= 1/(8 L K)`.
    pub eta_le_inv_8lk: bool,
    /// `64 L^2 K^2 eta^2 + 64 L K eta < 1`.
    pub quadratic_lt_one: bool,
}

impl TheoryConstants {
    /// Whether `gamma > 0`, i.e. the bounds say anything.
    pub fn applicable(&self) -> bool {
        self.gamma > 0.0
    }

    pub fn stepsize_ok(&self) -> bool {
        self.eta_le_inv_8lk && self.quadratic_lt_one
    }

    /// Consensus bound for unquantized gossip, `C2 eta^2 / (1 - lambda)`.
    pub fn consensus_bound(&self) -> f64 {
        self.c2 * self.inputs.eta * self.inputs.eta / (1.0 - self.inputs.lambda)
    }

    /// Consensus bound with quantized gossip,
    /// `2 C2 eta^2 / (1 - lambda) + 2 d s^2 / (1 - lambda)`.
    pub fn quantized_consensus_bound(&self, d: usize, step: f64) -> f64 {
        2.0 * self.consensus_bound() + 2.0 * d as f64 * step * step / (1.0 - self.inputs.lambda)
    }

    /// Per-step displacement bound `(2 eta^2 sl^2 + 2 eta^2 B^2) / (1 - theta)^2`.
    pub fn step_bound(&self) -> f64 {
        let i = &self.inputs;
        step_bound(i.eta, i.theta, i.sigma_l, i.grad_bound)
    }

    /// Local drift bound `C1 eta^2 + 32 K^2 eta^2 mean_i ||grad f(x(i))||^2`.
    pub fn drift_bound(&self, mean_grad_sq: f64) -> f64 {
        let (k, eta) = (self.inputs.local_steps as f64, self.inputs.eta);
        self.c1 * eta * eta + 32.0 * k * k * eta * eta * mean_grad_sq
    }
}

pub fn c1(local_steps: usize, theta: f64, sigma_l: f64, sigma_g: f64, grad_bound: f64) -> f64 {
    let k = local_steps as f64;
    let (sl2, sg2, b2) = (sigma_l * sigma_l, sigma_g * sigma_g, grad_bound * grad_bound);
    let c = 1.0 - theta;
    8.0 * k * sl2 + 32.0 * k * k * sg2 + 64.0 * k * k * theta * theta * (sl2 + b2) / (c * c)
}

pub fn c2(local_steps: usize, theta: f64, sigma_l: f64, sigma_g: f64, grad_bound: f64) -> f64 {
    let k = local_steps as f64;
    c1(local_steps, theta, sigma_l, sigma_g, grad_bound) + 32.0 * k * k * grad_bound * grad_bound
}

pub fn step_bound(eta: f64, theta: f64, sigma_l: f64, grad_bound: f64) -> f64 {
    let c = 1.0 - theta;
    (2.0 * eta * eta * sigma_l * sigma_l + 2.0 * eta * eta * grad_bound * grad_bound) / (c * c)
}

pub fn rate_constants(inputs: TheoryInputs) -> Result<TheoryConstants, TheoryError> {
    inputs.validate()?;
    let TheoryInputs { local_steps, eta, theta, smoothness: l, sigma_l, sigma_g, grad_bound, lambda } = inputs;
    let k = local_steps as f64;
    let c = 1.0 - theta;
    let dk = k - theta;
    let gamma = eta * dk / c - 64.0 * c * l * l * k.powi(4) * eta.powi(3) / dk - 64.0 * l * k * k * eta * eta;
    let c1 = c1(local_steps, theta, sigma_l, sigma_g, grad_bound);
    let c2 = c2(local_steps, theta, sigma_l, sigma_g, grad_bound);
    let alpha = (c * l * l * k * k * eta.powi(3) / dk + l * eta * eta) * c1 / gamma;
    let beta = (64.0 * c * l.powi(4) * k.powi(4) * eta.powi(5) / dk + 64.0 * l.powi(3) * k * k * eta.powi(4)) * c2
        / ((1.0 - lambda) * gamma);
    Ok(TheoryConstants {
        inputs,
        gamma,
        alpha,
        beta,
        c1,
        c2,
        eta_le_inv_8lk: eta <= 1.0 / (8.0 * l * k),
        quadratic_lt_one: 64.0 * l * l * k * k * eta * eta + 64.0 * l * k * eta < 1.0,
    })
}

/// `2 (f_x1 - min_f) / (gamma T) + alpha + beta`.
pub fn nonconvex_bound(c: &TheoryConstants, f_x1: f64, min_f: f64, rounds: u64) -> Result<f64, TheoryError> {
    if !c.applicable() {
        return Err(TheoryError::Inapplicable { gamma: c.gamma });
    }
    if rounds == 0 {
        return Err(TheoryError::Domain("need T ≥ 1".into()));
    }
    Ok(2.0 * (f_x1 - min_f) / (c.gamma * rounds as f64) + c.alpha + c.beta)
}

/// `(1 - nu gamma)^T (f_x0 - min_f) + alpha / (2 nu) + beta / (2 nu)`.
pub fn pl_bound(c: &TheoryConstants, nu: f64, f_x0: f64, min_f: f64, rounds: u64) -> Result<f64, TheoryError> {
    if !c.applicable() {
        return Err(TheoryError::Inapplicable { gamma: c.gamma });
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(TheoryError::Domain(format!("need nu > 0, got {nu}")));
    }
    let rate = nu * c.gamma;
    if rate >= 1.0 {
        return Err(TheoryError::Domain(format!("contraction factor 1 - nu gamma = {} is not positive", 1.0 - rate)));
    }
    let decay = (1.0 - rate).powf(rounds as f64);
    Ok(decay * (f_x0 - min_f) + c.alpha / (2.0 * nu) + c.beta / (2.0 * nu))
}

/// `eta = 1 / (nu K T ln T)` for `T >= 3`.
pub fn optimal_stepsize_pl(nu: f64, local_steps: usize, rounds: f64) -> Result<f64, TheoryError> {
    if rounds.is_nan() || rounds < 3.0 {
        return Err(TheoryError::Domain(format!("need T ≥ 3, got {rounds}")));
    }
    if !(nu > 0.0) || local_steps == 0 {
        return Err(TheoryError::Domain("need nu > 0 and K ≥ 1".into()));
    }
    Ok(1.0 / (nu * local_steps as f64 * rounds * rounds.ln()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommSavingInputs {
    pub bits: u32,
    pub dim: usize,
    pub epsilon: f64,
    pub theta: f64,
    pub smoothness: f64,
    pub grad_bound: f64,
    pub step: f64,
    pub sigma_l: f64,
    pub sigma_g: f64,
    pub local_steps: usize,
    /// `f(x0) - min f`.
    pub initial_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommSaving {
    pub saves: bool,
    pub epsilon_floor: f64,
    /// `128/9 + 32/d`.
    pub bit_threshold: f64,
    pub bits_ok: bool,
}

/// Sufficient condition for `b`-bit quantized gossip to need fewer bits than
/// 32-bit gossip to reach error `epsilon`.
pub fn comm_saving_check(p: CommSavingInputs) -> CommSaving {
    let c = 1.0 - p.theta;
    let (sl2, sg2, b2) = (p.sigma_l * p.sigma_l, p.sigma_g * p.sigma_g, p.grad_bound * p.grad_bound);
    let inner = 2.0 * p.initial_gap
        + 8.0 * sl2 / p.local_steps as f64
        + 32.0 * sg2
        + 64.0 * p.theta * p.theta * (sl2 + b2) / (c * c);
    let epsilon_floor = c * (3.0 * p.smoothness * p.grad_bound * p.step).sqrt() * (p.dim as f64).powf(0.25) * inner.sqrt();
    let bit_threshold = 128.0 / 9.0 + 32.0 / p.dim as f64;
    let bits_ok = (p.bits as f64) < bit_threshold;
    CommSaving { saves: p.epsilon > epsilon_floor && bits_ok, epsilon_floor, bit_threshold, bits_ok }
}

/// `(1/m) sum_i ||x(i) - x_bar||^2`.
pub fn consensus_distance(xs: &[ParamVector]) -> f64 {
    assert!(!xs.is_empty(), "consensus distance of zero clients");
    let mean = ParamVector::mean(xs.iter(), xs[0].dim());
    xs.iter().map(|x| x.dist_sq(&mean)).sum::<f64>() / xs.len() as f64
}

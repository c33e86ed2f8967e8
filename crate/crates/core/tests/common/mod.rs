//! Shared helpers for the integration tests: an exact rational re-evaluation
//! of the bound formulas and small builders for ring quadratics.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use dfedavgm::problems::{Quadratic, QuadraticSpec};
use dfedavgm::topology::{Graph, MixingMatrix};

pub type Q = BigRational;

pub fn q(x: f64) -> Q {
    BigRational::from_float(x).expect("finite input")
}

pub fn qi(n: i64) -> Q {
    BigRational::from_integer(BigInt::from(n))
}

pub fn pow(x: &Q, n: u32) -> Q {
    let mut acc = Q::one();
    for _ in 0..n {
        acc *= x;
    }
    acc
}

/// `|approx - exact| / |exact|`, or the absolute error when `exact == 0`.
pub fn rel_err(approx: f64, exact: &Q) -> f64 {
    let diff = (q(approx) - exact).abs();
    if exact.is_zero() {
        diff.to_f64().unwrap()
    } else {
        (diff / exact.abs()).to_f64().unwrap()
    }
}

/// Exact `gamma, alpha, beta, C1, C2` for f64 inputs.
pub struct ExactConstants {
    pub gamma: Q,
    pub alpha: Q,
    pub beta: Q,
    pub c1: Q,
    pub c2: Q,
}

pub fn exact_constants(k: usize, eta: f64, theta: f64, l: f64, sl: f64, sg: f64, b: f64, lambda: f64) -> ExactConstants {
    let k = qi(k as i64);
    let (eta, theta, l, sl, sg, b, lambda) = (q(eta), q(theta), q(l), q(sl), q(sg), q(b), q(lambda));
    let one = Q::one();
    let c = &one - &theta;
    let dk = &k - &theta;
    let (sl2, sg2, b2) = (&sl * &sl, &sg * &sg, &b * &b);
    let k2 = &k * &k;
    let k4 = &k2 * &k2;
    let gamma = &eta * &dk / &c - qi(64) * &c * &l * &l * &k4 * pow(&eta, 3) / &dk - qi(64) * &l * &k2 * &eta * &eta;
    let c1 = qi(8) * &k * &sl2 + qi(32) * &k2 * &sg2 + qi(64) * &k2 * &theta * &theta * (&sl2 + &b2) / (&c * &c);
    let c2 = &c1 + qi(32) * &k2 * &b2;
    let alpha = (&c * &l * &l * &k2 * pow(&eta, 3) / &dk + &l * &eta * &eta) * &c1 / &gamma;
    let beta = (qi(64) * &c * pow(&l, 4) * &k4 * pow(&eta, 5) / &dk + qi(64) * pow(&l, 3) * &k2 * pow(&eta, 4)) * &c2
        / ((&one - &lambda) * &gamma);
    ExactConstants { gamma, alpha, beta, c1, c2 }
}

pub fn exact_nonconvex_bound(e: &ExactConstants, f_x1: f64, min_f: f64, t: u64) -> Q {
    qi(2) * (q(f_x1) - q(min_f)) / (&e.gamma * qi(t as i64)) + &e.alpha + &e.beta
}

pub fn exact_pl_bound(e: &ExactConstants, nu: f64, f_x0: f64, min_f: f64, t: u32) -> Q {
    let nu = q(nu);
    let decay = pow(&(Q::one() - &nu * &e.gamma), t);
    decay * (q(f_x0) - q(min_f)) + &e.alpha / (qi(2) * &nu) + &e.beta / (qi(2) * &nu)
}

/// Fourth power of the communication-saving floor, which is rational:
/// `(1-theta)^4 * 9 L^2 B^2 s^2 * d * inner^2`.
#[allow(clippy::too_many_arguments)]
pub fn exact_floor_pow4(d: usize, theta: f64, l: f64, b: f64, s: f64, sl: f64, sg: f64, k: usize, gap: f64) -> Q {
    let (theta, l, b, s, sl, sg, gap) = (q(theta), q(l), q(b), q(s), q(sl), q(sg), q(gap));
    let c = Q::one() - &theta;
    let (sl2, sg2, b2) = (&sl * &sl, &sg * &sg, &b * &b);
    let inner = qi(2) * gap + qi(8) * &sl2 / qi(k as i64) + qi(32) * sg2 + qi(64) * &theta * &theta * (&sl2 + &b2) / (&c * &c);
    pow(&c, 4) * qi(9) * &l * &l * &b2 * &s * &s * qi(d as i64) * &inner * &inner
}

/// Relative error of `floor` given the exact fourth power of the true floor.
pub fn floor_rel_err(floor: f64, exact_pow4: &Q) -> f64 {
    if exact_pow4.is_zero() {
        return floor.abs();
    }
    let ratio = (pow(&q(floor), 4) / exact_pow4).to_f64().unwrap();
    (ratio.powf(0.25) - 1.0).abs()
}

/// `b < 128/9 + 32/d` decided exactly: `9 b d < 128 d + 288`.
pub fn exact_bits_ok(b: u32, d: usize) -> bool {
    9 * b as u64 * (d as u64) < 128 * d as u64 + 288
}

/// A quadratic over `m` clients paired with the Metropolis-Hastings ring.
pub fn ring_quadratic(spec: QuadraticSpec) -> (Quadratic, MixingMatrix) {
    let m = spec.clients;
    let problem = Quadratic::generate(&spec);
    let w = MixingMatrix::metropolis_hastings(&Graph::ring(m).unwrap()).unwrap();
    (problem, w)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

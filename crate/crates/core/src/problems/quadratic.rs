//! Heterogeneous quadratic clients `f_i(x) = 1/2 (x - c_i)^T A_i (x - c_i)`.
//!
//! Curvatures are `A_i = (1 - rho) A_0 + rho B_i` with `rho = h / (1 + h)`,
//! where `A_0` and every `B_i` are random rotations of diagonal spectra in
//! `[mu, L]`, so each `A_i` keeps its spectrum in `[mu, L]`. Centers are
//! `c_i = offset * c_0 + h * g_i` with Gaussian `c_0`, `g_i`. Stochastic
//! gradients add `N(0, sigma^2 / d I)` noise, giving `E||noise||^2 = sigma^2`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DeclaredConstants, Problem, ProblemError};
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub clients: usize,
    pub dim: usize,
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_l")]
    pub l: f64,
    /// Scale of the shared center `c_0`.
    #[serde(default = "default_offset")]
    pub offset: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_mu() -> f64 {
    0.1
}
fn default_l() -> f64 {
    1.0
}
fn default_offset() -> f64 {
    1.0
}

impl QuadraticSpec {
    pub fn new(clients: usize, dim: usize, seed: u64) -> Self {
        QuadraticSpec {
            clients,
            dim,
            heterogeneity: 0.0,
            noise_sigma: 0.0,
            mu: default_mu(),
            l: default_l(),
            offset: default_offset(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let mut errs = Vec::new();
        if self.clients == 0 {
            errs.push("clients must be >= 1".to_string());
        }
        if self.dim == 0 {
            errs.push("dim must be >= 1".to_string());
        }
        if !(self.heterogeneity >= 0.0 && self.heterogeneity.is_finite()) {
            errs.push(format!("heterogeneity must be finite and >= 0, got {}", self.heterogeneity));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            errs.push(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.mu > 0.0 && self.mu <= self.l && self.l.is_finite()) {
            errs.push(format!("need 0 < mu <= l, got mu = {}, l = {}", self.mu, self.l));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ProblemError::InvalidConfig(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Quadratic {
    curvature: Vec<DMatrix<f64>>,
    centers: Vec<DVector<f64>>,
    noise_sigma: f64,
    declared: DeclaredConstants,
    minimizer: DVector<f64>,
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn random_spd(d: usize, mu: f64, l: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut spectrum: Vec<f64> = (0..d).map(|_| mu + (l - mu) * rng.random::<f64>()).collect();
    spectrum[0] = mu;
    if d > 1 {
        spectrum[d - 1] = l;
    }
    let q = random_orthogonal(d, rng);
    let a = &q * DMatrix::from_diagonal(&DVector::from_vec(spectrum)) * q.transpose();
    (&a + a.transpose()) * 0.5
}

impl Quadratic {
    /// Builds the instance described by `spec` (panics on an invalid spec;
    /// use [`Quadratic::try_generate`] to get the error).
    pub fn generate(spec: &QuadraticSpec) -> Self {
        Self::try_generate(spec).expect("invalid quadratic spec")
    }

    pub fn try_generate(spec: &QuadraticSpec) -> Result<Self, ProblemError> {
        spec.validate()?;
        let (m, d, h) = (spec.clients, spec.dim, spec.heterogeneity);
        let mut rng = StreamKey::new(spec.seed).purpose(Purpose::Data).rng();
        let a0 = random_spd(d, spec.mu, spec.l, &mut rng);
        let c0 = DVector::from_fn(d, |_, _| spec.offset * rng.sample::<f64, _>(StandardNormal));
        let rho = h / (1.0 + h);
        let mut curvature = Vec::with_capacity(m);
        let mut centers = Vec::with_capacity(m);
        for _ in 0..m {
            let bi = random_spd(d, spec.mu, spec.l, &mut rng);
            let gi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            curvature.push(if rho == 0.0 { a0.clone() } else { &a0 * (1.0 - rho) + bi * rho });
            centers.push(&c0 + gi * h);
        }
        Self::from_parts(curvature, centers, spec.noise_sigma)
    }

    /// Explicit instance. Every `A_i` must be symmetric positive definite.
    pub fn from_parts(curvature: Vec<DMatrix<f64>>, centers: Vec<DVector<f64>>, noise_sigma: f64) -> Result<Self, ProblemError> {
        let m = curvature.len();
        if m == 0 || centers.len() != m {
            return Err(ProblemError::InvalidConfig("need one curvature and one center per client".into()));
        }
        let d = centers[0].len();
        if curvature.iter().any(|a| a.nrows() != d || a.ncols() != d) || centers.iter().any(|c| c.len() != d) {
            return Err(ProblemError::InvalidConfig("dimension mismatch between curvatures and centers".into()));
        }
        let mut smooth: f64 = 0.0;
        for a in &curvature {
            let eig = SymmetricEigen::new(a.clone());
            if eig.eigenvalues.min() <= 0.0 {
                return Err(ProblemError::InvalidConfig("curvature matrix is not positive definite".into()));
            }
            smooth = smooth.max(eig.eigenvalues.max());
        }
        let abar = curvature.iter().fold(DMatrix::zeros(d, d), |acc, a| acc + a) / m as f64;
        let rhs = curvature.iter().zip(&centers).fold(DVector::zeros(d), |acc, (a, c)| acc + a * c) / m as f64;
        let pl = SymmetricEigen::new(abar.clone()).eigenvalues.min();
        let minimizer = Cholesky::new(abar)
            .ok_or_else(|| ProblemError::InvalidConfig("average curvature is not positive definite".into()))?
            .solve(&rhs);
        let mut q = Quadratic {
            curvature,
            centers,
            noise_sigma,
            declared: DeclaredConstants {
                smoothness: Some(smooth),
                pl: Some(pl),
                min_value: None,
                noise_sigma: Some(noise_sigma),
            },
            minimizer,
        };
        q.declared.min_value = Some(q.loss(q.minimizer.as_slice()));
        Ok(q)
    }

    pub fn minimizer(&self) -> &[f64] {
        self.minimizer.as_slice()
    }

    pub fn curvature(&self, client: usize) -> &DMatrix<f64> {
        &self.curvature[client]
    }

    pub fn center(&self, client: usize) -> &[f64] {
        self.centers[client].as_slice()
    }
}

impl Problem for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn clients(&self) -> usize {
        self.curvature.len()
    }

    fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn local_loss(&self, client: usize, x: &[f64]) -> f64 {
        let a = &self.curvature[client];
        let c = &self.centers[client];
        let d = self.dim();
        let diff: Vec<f64> = (0..d).map(|j| x[j] - c[j]).collect();
        let mut acc = 0.0;
        for r in 0..d {
            let mut row = 0.0;
            for k in 0..d {
                row += a[(r, k)] * diff[k];
            }
            acc += diff[r] * row;
        }
        0.5 * acc
    }

    fn local_grad(&self, client: usize, x: &[f64], out: &mut [f64]) {
        let a = &self.curvature[client];
        let c = &self.centers[client];
        let d = self.dim();
        for (r, o) in out.iter_mut().enumerate().take(d) {
            let mut row = 0.0;
            for k in 0..d {
                row += a[(r, k)] * (x[k] - c[k]);
            }
            *o = row;
        }
    }

    fn stochastic_grad(&self, client: usize, x: &[f64], key: StreamKey, out: &mut [f64]) {
        self.local_grad(client, x, out);
        if self.noise_sigma > 0.0 {
            let scale = self.noise_sigma / (self.dim() as f64).sqrt();
            let mut rng = key.rng();
            for o in out.iter_mut() {
                *o += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    fn declared(&self) -> DeclaredConstants {
        self.declared
    }
}

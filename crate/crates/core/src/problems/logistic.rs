//! l2-regularized binary logistic regression on synthetic Gaussian features.
//!
//! Labels come from a planted separator with random flips. Per-sample loss is
//! `ln(1 + exp(-y a^T x))` with `y in {-1, +1}`; each client adds
//! `reg / 2 ||x||^2`. Stochastic gradients average a minibatch drawn with
//! replacement from the client's shard.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{partition_indices, Dataset, DeclaredConstants, Partition, PartitionMode, Problem, ProblemError};
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticSpec {
    pub clients: usize,
    pub dim: usize,
    pub per_client: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reg")]
    pub reg: f64,
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_partition() -> PartitionMode {
    PartitionMode::Iid
}
fn default_reg() -> f64 {
    1e-3
}
fn default_flip() -> f64 {
    0.05
}
fn default_batch() -> usize {
    8
}

impl LogisticSpec {
    pub fn new(clients: usize, dim: usize, per_client: usize, seed: u64) -> Self {
        LogisticSpec {
            clients,
            dim,
            per_client,
            partition: default_partition(),
            seed,
            reg: default_reg(),
            flip_prob: default_flip(),
            batch: default_batch(),
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
        if self.per_client == 0 {
            errs.push("per_client must be >= 1".to_string());
        }
        if self.batch == 0 {
            errs.push("batch must be >= 1".to_string());
        }
        if !(self.reg >= 0.0 && self.reg.is_finite()) {
            errs.push(format!("reg must be finite and >= 0, got {}", self.reg));
        }
        if !(0.0..=0.5).contains(&self.flip_prob) {
            errs.push(format!("flip_prob must lie in [0, 0.5], got {}", self.flip_prob));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ProblemError::InvalidConfig(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Logistic {
    shards: Vec<Dataset>,
    dim: usize,
    reg: f64,
    batch: usize,
    declared: DeclaredConstants,
    pooled: Dataset,
    partition: Partition,
}

/// `ln(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sign(label: usize) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

impl Logistic {
    pub fn generate(spec: &LogisticSpec) -> Result<Self, ProblemError> {
        spec.validate()?;
        let (m, d) = (spec.clients, spec.dim);
        let n = m * spec.per_client;
        let mut rng = StreamKey::new(spec.seed).purpose(Purpose::Data).rng();
        let planted: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let margin: f64 = row.iter().zip(&planted).map(|(a, w)| a * w).sum();
            let mut label = usize::from(margin >= 0.0);
            if rng.random::<f64>() < spec.flip_prob {
                label = 1 - label;
            }
            features.extend(row);
            labels.push(label);
        }
        let pooled = Dataset { features, labels, dim: d };
        let partition = partition_indices(&pooled.labels, m, spec.partition, spec.seed)?;
        let shards: Vec<Dataset> = partition.clients.iter().map(|idx| pooled.select(idx)).collect();
        let max_norm_sq = (0..n).map(|i| pooled.row(i).iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        Ok(Logistic {
            shards,
            dim: d,
            reg: spec.reg,
            batch: spec.batch,
            declared: DeclaredConstants {
                smoothness: Some(max_norm_sq / 4.0 + spec.reg),
                pl: (spec.reg > 0.0).then_some(spec.reg),
                min_value: None,
                noise_sigma: None,
            },
            pooled,
            partition,
        })
    }

    pub fn shard(&self, client: usize) -> &Dataset {
        &self.shards[client]
    }

    pub fn pooled(&self) -> &Dataset {
        &self.pooled
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn sample_loss(&self, client: usize, sample: usize, x: &[f64]) -> f64 {
        let shard = &self.shards[client];
        let margin: f64 = shard.row(sample).iter().zip(x).map(|(a, w)| a * w).sum();
        softplus(-sign(shard.labels[sample]) * margin)
    }

    fn accumulate_sample_grad(&self, shard: &Dataset, sample: usize, x: &[f64], weight: f64, out: &mut [f64]) {
        let row = shard.row(sample);
        let y = sign(shard.labels[sample]);
        let margin: f64 = row.iter().zip(x).map(|(a, w)| a * w).sum();
        let coef = -y * sigmoid(-y * margin) * weight;
        out.iter_mut().zip(row).for_each(|(o, a)| *o += coef * a);
    }
}

impl Problem for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }

    fn clients(&self) -> usize {
        self.shards.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn local_loss(&self, client: usize, x: &[f64]) -> f64 {
        let n = self.shards[client].len();
        let data: f64 = (0..n).map(|s| self.sample_loss(client, s, x)).sum::<f64>() / n as f64;
        data + 0.5 * self.reg * x.iter().map(|v| v * v).sum::<f64>()
    }

    fn local_grad(&self, client: usize, x: &[f64], out: &mut [f64]) {
        let shard = &self.shards[client];
        out.iter_mut().for_each(|o| *o = 0.0);
        let w = 1.0 / shard.len() as f64;
        for s in 0..shard.len() {
            self.accumulate_sample_grad(shard, s, x, w, out);
        }
        out.iter_mut().zip(x).for_each(|(o, v)| *o += self.reg * v);
    }

    fn stochastic_grad(&self, client: usize, x: &[f64], key: StreamKey, out: &mut [f64]) {
        let shard = &self.shards[client];
        let mut rng = key.rng();
        out.iter_mut().for_each(|o| *o = 0.0);
        let w = 1.0 / self.batch as f64;
        for _ in 0..self.batch {
            let s = rng.random_range(0..shard.len());
            self.accumulate_sample_grad(shard, s, x, w, out);
        }
        out.iter_mut().zip(x).for_each(|(o, v)| *o += self.reg * v);
    }

    fn declared(&self) -> DeclaredConstants {
        self.declared
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::probe_box;
    use std::collections::BTreeSet;

    fn instance(partition: PartitionMode) -> Logistic {
        Logistic::generate(&LogisticSpec { partition, ..LogisticSpec::new(4, 5, 30, 2) }).unwrap()
    }

    #[test]
    fn zero_weights_give_ln2() {
        let p = instance(PartitionMode::Iid);
        for s in 0..30 {
            assert!((p.sample_loss(1, s, &[0.0; 5]) - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!((p.local_loss(0, &[0.0; 5]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = instance(PartitionMode::Iid);
        let h = 1e-5;
        for x in probe_box(&[0.0; 5], 2.0, 5, 3) {
            for c in 0..4 {
                let mut g = vec![0.0; 5];
                p.local_grad(c, &x, &mut g);
                for j in 0..5 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (p.local_loss(c, &xp) - p.local_loss(c, &xm)) / (2.0 * h);
                    assert!((fd - g[j]).abs() <= 1e-6, "client {c} coord {j}: {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn non_iid_two_shards_hold_at_most_two_labels() {
        let p = instance(PartitionMode::NonIid { shards_per_client: 2 });
        for c in 0..4 {
            let labels: BTreeSet<usize> = p.shard(c).labels.iter().copied().collect();
            assert!(labels.len() <= 2);
        }
    }

    #[test]
    fn smoothness_probe() {
        let p = instance(PartitionMode::Iid);
        let l = p.declared().smoothness.unwrap();
        let pts = probe_box(&[0.0; 5], 3.0, 100, 9);
        let (mut gx, mut gy) = (vec![0.0; 5], vec![0.0; 5]);
        for pair in pts.chunks(2) {
            for c in 0..4 {
                p.local_grad(c, &pair[0], &mut gx);
                p.local_grad(c, &pair[1], &mut gy);
                let dg: f64 = gx.iter().zip(&gy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(dg <= l * pair[0].dist_sq(&pair[1]).sqrt() * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn minibatch_gradient_is_unbiased() {
        let p = instance(PartitionMode::Iid);
        let x = [0.3, -0.2, 0.1, 0.5, -0.4];
        let mut exact = vec![0.0; 5];
        p.local_grad(2, &x, &mut exact);
        let n = 10_000u64;
        let mut mean = [0.0; 5];
        let mut sq = [0.0; 5];
        let mut g = vec![0.0; 5];
        for r in 0..n {
            p.stochastic_grad(2, &x, StreamKey::gradient(1, 2, 0, r), &mut g);
            for j in 0..5 {
                mean[j] += g[j] / n as f64;
                sq[j] += g[j] * g[j] / n as f64;
            }
        }
        for j in 0..5 {
            let sigma = (sq[j] - mean[j] * mean[j]).max(0.0).sqrt();
            assert!((mean[j] - exact[j]).abs() <= 4.0 * sigma / (n as f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn csv_dump_shape() {
        let p = instance(PartitionMode::Iid);
        let csv = p.pooled().to_csv();
        assert_eq!(csv.lines().count(), 121);
        assert!(csv.starts_with("x0,x1,x2,x3,x4,label"));
    }
}

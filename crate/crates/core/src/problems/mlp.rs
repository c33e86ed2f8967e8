//! Small fully-connected classifier on clustered synthetic data.
//!
//! Hidden layers use `tanh` so gradients stay Lipschitz; the output layer is a
//! softmax with cross-entropy. Parameters are flattened layer by layer as the
//! weight matrix (row-major, `out x in`) followed by the bias.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{partition_indices, Dataset, DeclaredConstants, Partition, PartitionMode, Problem, ProblemError};
use crate::rng::{Purpose, StreamKey};
use crate::vector::ParamVector;

/// Upper limit on the number of trainable parameters.
pub const MAX_PARAMS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub clients: usize,
    /// Widths `[input, hidden..., classes]`.
    pub layout: Vec<usize>,
    pub per_client: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Spread of the class centers relative to the unit within-class noise.
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_partition() -> PartitionMode {
    PartitionMode::Iid
}
fn default_batch() -> usize {
    8
}
fn default_separation() -> f64 {
    2.0
}

impl MlpSpec {
    pub fn new(clients: usize, layout: Vec<usize>, per_client: usize, seed: u64) -> Self {
        MlpSpec {
            clients,
            layout,
            per_client,
            partition: default_partition(),
            seed,
            batch: default_batch(),
            separation: default_separation(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let mut errs = Vec::new();
        if self.clients == 0 {
            errs.push("clients must be >= 1".to_string());
        }
        if self.layout.len() < 2 {
            errs.push("layout needs at least an input and an output width".to_string());
        }
        if self.layout.iter().any(|&w| w == 0) {
            errs.push("layout widths must be >= 1".to_string());
        }
        if self.layout.last().is_some_and(|&c| c < 2) {
            errs.push("need at least 2 output classes".to_string());
        }
        if self.param_count() > MAX_PARAMS {
            errs.push(format!("{} parameters exceed the limit of {MAX_PARAMS}", self.param_count()));
        }
        if self.per_client == 0 {
            errs.push("per_client must be >= 1".to_string());
        }
        if self.batch == 0 {
            errs.push("batch must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ProblemError::InvalidConfig(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    weight_offset: usize,
    bias_offset: usize,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    shards: Vec<Dataset>,
    layers: Vec<LayerShape>,
    params: usize,
    batch: usize,
    seed: u64,
    pooled: Dataset,
    partition: Partition,
}

impl Mlp {
    pub fn generate(spec: &MlpSpec) -> Result<Self, ProblemError> {
        spec.validate()?;
        let input = spec.layout[0];
        let classes = *spec.layout.last().unwrap();
        let n = spec.clients * spec.per_client;
        let mut rng = StreamKey::new(spec.seed).purpose(Purpose::Data).rng();
        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..input).map(|_| spec.separation * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut features = Vec::with_capacity(n * input);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % classes;
            features.extend(centers[label].iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)));
            labels.push(label);
        }
        let pooled = Dataset { features, labels, dim: input };
        let partition = partition_indices(&pooled.labels, spec.clients, spec.partition, spec.seed)?;
        let shards = partition.clients.iter().map(|idx| pooled.select(idx)).collect();

        let mut layers = Vec::new();
        let mut offset = 0;
        for w in spec.layout.windows(2) {
            let (inputs, outputs) = (w[0], w[1]);
            layers.push(LayerShape { inputs, outputs, weight_offset: offset, bias_offset: offset + inputs * outputs });
            offset += inputs * outputs + outputs;
        }
        Ok(Mlp { shards, layers, params: offset, batch: spec.batch, seed: spec.seed, pooled, partition })
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

    /// Flat index of weight `(row, col)` of layer `layer`.
    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        let s = self.layers[layer];
        s.weight_offset + row * s.inputs + col
    }

    pub fn bias_index(&self, layer: usize, unit: usize) -> usize {
        self.layers[layer].bias_offset + unit
    }

    /// Activations of every layer (input first, logits last).
    fn forward(&self, x: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![input.to_vec()];
        let last = self.layers.len() - 1;
        for (l, s) in self.layers.iter().enumerate() {
            let prev = &acts[l];
            let mut next = Vec::with_capacity(s.outputs);
            for r in 0..s.outputs {
                let row = &x[s.weight_offset + r * s.inputs..s.weight_offset + (r + 1) * s.inputs];
                let mut z = 0.0;
                for (w, a) in row.iter().zip(prev) {
                    z += w * a;
                }
                z += x[s.bias_offset + r];
                next.push(if l == last { z } else { z.tanh() });
            }
            acts.push(next);
        }
        acts
    }

    fn sample_loss(logits: &[f64], label: usize) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        lse - logits[label]
    }

    fn accumulate_grad(&self, x: &[f64], input: &[f64], label: usize, weight: f64, out: &mut [f64]) {
        let acts = self.forward(x, input);
        let logits = acts.last().unwrap();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut delta: Vec<f64> = exps.iter().enumerate().map(|(k, e)| e / total - f64::from(k == label)).collect();
        for l in (0..self.layers.len()).rev() {
            let s = self.layers[l];
            let prev = &acts[l];
            for r in 0..s.outputs {
                let dr = delta[r] * weight;
                out[s.bias_offset + r] += dr;
                let base = s.weight_offset + r * s.inputs;
                for (c, a) in prev.iter().enumerate() {
                    out[base + c] += dr * a;
                }
            }
            if l > 0 {
                delta = (0..s.inputs)
                    .map(|c| {
                        let back: f64 = (0..s.outputs).map(|r| x[s.weight_offset + r * s.inputs + c] * delta[r]).sum();
                        back * (1.0 - prev[c] * prev[c])
                    })
                    .collect();
            }
        }
    }
}

impl Problem for Mlp {
    fn name(&self) -> &str {
        "mlp"
    }

    fn clients(&self) -> usize {
        self.shards.len()
    }

    fn dim(&self) -> usize {
        self.params
    }

    fn local_loss(&self, client: usize, x: &[f64]) -> f64 {
        let shard = &self.shards[client];
        (0..shard.len())
            .map(|s| Self::sample_loss(self.forward(x, shard.row(s)).last().unwrap(), shard.labels[s]))
            .sum::<f64>()
            / shard.len() as f64
    }

    fn local_grad(&self, client: usize, x: &[f64], out: &mut [f64]) {
        let shard = &self.shards[client];
        out.iter_mut().for_each(|o| *o = 0.0);
        let w = 1.0 / shard.len() as f64;
        for s in 0..shard.len() {
            self.accumulate_grad(x, shard.row(s), shard.labels[s], w, out);
        }
    }

    fn stochastic_grad(&self, client: usize, x: &[f64], key: StreamKey, out: &mut [f64]) {
        let shard = &self.shards[client];
        let mut rng = key.rng();
        out.iter_mut().for_each(|o| *o = 0.0);
        let w = 1.0 / self.batch as f64;
        for _ in 0..self.batch {
            let s = rng.random_range(0..shard.len());
            self.accumulate_grad(x, shard.row(s), shard.labels[s], w, out);
        }
    }

    fn declared(&self) -> DeclaredConstants {
        DeclaredConstants::default()
    }

    /// Scaled Gaussian weights (`1 / sqrt(fan_in)`), zero biases. The all-zero
    /// point is a saddle where hidden units never separate.
    fn initial_point(&self) -> ParamVector {
        let mut rng = StreamKey::new(self.seed).purpose(Purpose::Init).rng();
        let mut x = vec![0.0; self.params];
        for s in &self.layers {
            let scale = 1.0 / (s.inputs as f64).sqrt();
            for v in &mut x[s.weight_offset..s.bias_offset] {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        x.into()
    }
}

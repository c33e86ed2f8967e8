//! Decentralized federated averaging with heavy-ball momentum.
//!
//! Clients run `K` local momentum-SGD steps, then average their models with
//! graph neighbours through a doubly-stochastic mixing matrix. The crate
//! provides the round engine, an optional quantized gossip channel, DSGD,
//! FedAvg and centralized SGD baselines, synthetic objectives, closed-form
//! bound evaluation and a config-driven experiment runner.

pub mod engine;
pub mod local;
pub mod problems;
pub mod quantize;
pub mod rng;
pub mod runner;
pub mod theory;
pub mod topology;
pub mod vector;

pub use engine::{run_experiment, Algorithm, RoundRecord, RunAborted, RunConfig, RunError, RunOutput};
pub use local::{run_local, LocalTrainerConfig, LocalTrajectory};
pub use problems::Problem;
pub use quantize::{QuantizedVector, QuantizerSpec, Rounding};
pub use topology::{Graph, MixingMatrix, MixingRule};
pub use vector::ParamVector;

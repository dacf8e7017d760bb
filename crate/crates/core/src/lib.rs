//! Decomposed trilinear temporal attention for steering prediction, and a
//! deterministic simulator of decentralized federated training.
//!
//! Layout:
//! - [`tensor`]: dense row-major `f64` tensors and contraction kernels
//! - [`lttd`]: the factorized attention block, its oracles and gradients
//! - [`model`]: embedders, regression head, loss and metrics
//! - [`data`]: synthetic temporal driving data and silo sharding
//! - [`federated`]: topologies, consensus matrices, DPASGD and FedAvg
//! - [`config`], [`params_io`]: run configuration and parameter files
//! - [`experiment`]: data, objective and initial parameters for a run
//! - [`verify`]: the self-check suite behind `lttd verify`

pub mod config;
pub mod data;
pub mod experiment;
pub mod federated;
pub mod lttd;
pub mod model;
pub mod params;
pub mod params_io;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use config::RunConfig;
pub use lttd::{
    AttentionMap, AttentionNorm, JointRepresentation, LttdConfig, LttdError, LttdParams, ModalityTriple, ParamCount,
};
pub use params::ParamSet;
pub use tensor::{DenseTensor, Shape, TensorError};

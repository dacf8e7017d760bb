//! Decentralized training simulator: silo graphs, mixing matrices, DPASGD
//! rounds, FedAvg and metric collection.
//!
//! Silos exchange flat parameter vectors. What a vector means is up to the
//! [`LocalObjective`] that turns it into losses, gradients and predictions.

mod consensus;
mod sim;
mod topology;

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{self, ModelConfig, ModelError, PredictorParams, SteeringSample, PAST_STEPS};
use crate::params::ParamSet;
use crate::tensor::DenseTensor;

pub use consensus::{metropolis_weights, ConsensusMatrix};
pub use sim::{
    dpasgd_round, fedavg_aggregate, run_simulation, sfl_round, FederatedData, MetricsHistory, MetricsRow, Mode,
    Optimizer, RoundReport, SiloAction, SiloState, SimOptions, SimOutcome, StepSchedule, TrainConfig,
};
pub use topology::{bundled_topologies, load_topology, parse_topology, Topology, BUNDLED};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("topology line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Io(String),
    #[error("consensus matrix: {0}")]
    Consensus(String),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("aggregation failed: {0}")]
    Aggregation(String),
    #[error("diverged on silo {silo} in round {round}: {detail}")]
    Diverged { silo: usize, round: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, FedError>;

/// Loss, gradient and prediction over a flat parameter vector.
pub trait LocalObjective: Sync {
    fn num_params(&self) -> usize;
    /// Mean batch loss and its gradient.
    fn gradient(&self, theta: &[f64], batch: &[&SteeringSample]) -> Result<(f64, Vec<f64>)>;
    fn predict(&self, theta: &[f64], samples: &[SteeringSample]) -> Result<Vec<f64>>;
}

/// Constant-zero loss: silos keep their parameters on every local step, so
/// only averaging moves them.
#[derive(Debug, Clone)]
pub struct ZeroObjective {
    n: usize,
}

impl ZeroObjective {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    /// A one-pixel sample for shards that only need to be non-empty.
    pub fn placeholder_sample() -> SteeringSample {
        SteeringSample {
            sequence: 0,
            current_image: vec![0.0],
            past_frames: DenseTensor::zeros(vec![PAST_STEPS, 1]).expect("valid shape"),
            past_steering: [0.0; PAST_STEPS],
            target: 0.0,
        }
    }
}

impl LocalObjective for ZeroObjective {
    fn num_params(&self) -> usize {
        self.n
    }

    fn gradient(&self, theta: &[f64], _batch: &[&SteeringSample]) -> Result<(f64, Vec<f64>)> {
        Ok((0.0, vec![0.0; theta.len()]))
    }

    fn predict(&self, _theta: &[f64], samples: &[SteeringSample]) -> Result<Vec<f64>> {
        Ok(vec![0.0; samples.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Everything but the head is frozen; the loss is then convex.
    HeadOnly,
}

/// Mean squared error of the steering predictor.
#[derive(Debug, Clone)]
pub struct PredictorObjective {
    cfg: ModelConfig,
    /// Per flat entry: whether it receives gradient.
    trainable: Option<Vec<bool>>,
    n: usize,
}

impl PredictorObjective {
    pub fn new(cfg: ModelConfig, trainable: Trainable) -> Result<Self> {
        let template = PredictorParams::zeros(&cfg)?;
        let n = template.num_params();
        let trainable = match trainable {
            Trainable::All => None,
            Trainable::HeadOnly => {
                let mut mask = Vec::with_capacity(n);
                template.visit(&mut |name, t| mask.extend(std::iter::repeat_n(name.starts_with("head."), t.numel())));
                Some(mask)
            }
        };
        Ok(Self { cfg, trainable, n })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self, theta: &[f64]) -> Result<PredictorParams> {
        Ok(PredictorParams::from_flat(&self.cfg, theta)?)
    }
}

impl LocalObjective for PredictorObjective {
    fn num_params(&self) -> usize {
        self.n
    }

    fn gradient(&self, theta: &[f64], batch: &[&SteeringSample]) -> Result<(f64, Vec<f64>)> {
        let params = self.params(theta)?;
        let (loss, grads) = model::loss_gradient(&params, &self.cfg, batch)?;
        let mut flat = grads.to_flat();
        if let Some(mask) = &self.trainable {
            for (g, &keep) in flat.iter_mut().zip(mask) {
                if !keep {
                    *g = 0.0;
                }
            }
        }
        Ok((loss, flat))
    }

    fn predict(&self, theta: &[f64], samples: &[SteeringSample]) -> Result<Vec<f64>> {
        let params = self.params(theta)?;
        samples.par_iter().map(|s| model::predict(&params, &self.cfg, s).map_err(FedError::from)).collect()
    }
}

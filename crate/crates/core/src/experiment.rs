//! Turns a [`RunConfig`] and a topology into data, an objective and initial
//! parameters, and runs or evaluates it.

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{self, DataError};
use crate::federated::{
    run_simulation, FedError, FederatedData, LocalObjective, PredictorObjective, SimOptions, SimOutcome, Topology,
    Trainable,
};
use crate::model::{self, Metrics, ModelError, PredictorParams, SteeringSample};
use crate::params::ParamSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Federated(#[from] FedError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub struct Experiment {
    pub config: RunConfig,
    pub topology: Topology,
    pub data: FederatedData,
    pub objective: PredictorObjective,
    pub init: Vec<f64>,
}

impl Experiment {
    /// Generates and shards the training data over the topology's silos and
    /// draws the initial parameters.
    pub fn new(config: RunConfig, topology: Topology) -> Result<Self> {
        config.validate()?;
        let samples = data::generate(&config.data.synthetic)?;
        let shards = data::shard(&samples, topology.n_silos, config.data.shard, config.data.shard_seed)?;
        let held_out = held_out_set(&config)?;
        let model_cfg = config.model_config();
        let init = PredictorParams::init(&model_cfg, config.model.init_seed)?.to_flat();
        let objective = PredictorObjective::new(model_cfg, Trainable::All)?;
        Ok(Self { config, topology, data: FederatedData { shards, held_out }, objective, init })
    }

    pub fn run(&self, opts: &SimOptions) -> Result<SimOutcome> {
        Ok(run_simulation(&self.topology, &self.config.train, &self.data, &self.objective, self.init.clone(), opts)?)
    }

    /// RMSE on the held-out set of always predicting the training mean.
    pub fn constant_rmse(&self) -> f64 {
        let train = self.data.shards.iter().flat_map(|s| &s.samples);
        let (sum, n) = train.fold((0.0, 0usize), |(s, n), x| (s + x.target, n + 1));
        let mean = sum / n as f64;
        let sq: f64 = self.data.held_out.iter().map(|s| (s.target - mean).powi(2)).sum();
        (sq / self.data.held_out.len() as f64).sqrt()
    }
}

pub fn held_out_set(config: &RunConfig) -> Result<Vec<SteeringSample>> {
    Ok(data::generate_held_out(&config.data.synthetic, config.data.held_out_sequences, config.data.eval_seed)?)
}

/// Held-out metrics of a parameter set, computed exactly as the training
/// loop's evaluation rows are.
pub fn evaluate(config: &RunConfig, params: &PredictorParams) -> Result<Metrics> {
    let samples = held_out_set(config)?;
    let objective = PredictorObjective::new(config.model_config(), Trainable::All)?;
    let preds = objective.predict(&params.to_flat(), &samples)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    Ok(model::metrics(&preds, &targets)?)
}

//! Lockstep DPASGD rounds, FedAvg aggregation and full training runs.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{metropolis_weights, ConsensusMatrix, FedError, LocalObjective, Result, Topology};
use crate::data::Shard;
use crate::model::{metrics, SteeringSample};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "alpha", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant(f64),
    /// `alpha / sqrt(k + 1)`
    InvSqrt(f64),
}

impl StepSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            Self::Constant(a) => a,
            Self::InvSqrt(a) => a / ((k + 1) as f64).sqrt(),
        }
    }

    pub fn base(&self) -> f64 {
        match *self {
            Self::Constant(a) | Self::InvSqrt(a) => a,
        }
    }
}

/// Local update rule for gradient rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `θ ← θ − α_k g`
    #[default]
    Sgd,
    /// `v ← ρ v + (1 − ρ) g²`, `θ ← θ − α_k g / (√v + ε)`. The accumulator
    /// `v` is silo-local and is never averaged.
    RmsProp { decay: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One silo holding all data, never averaging.
    Cll,
    /// Star around a data-less server that averages every `u + 1` rounds.
    Sfl,
    /// DPASGD over the given topology.
    Dfl,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cll" => Ok(Self::Cll),
            "sfl" => Ok(Self::Sfl),
            "dfl" => Ok(Self::Dfl),
            other => Err(format!("unknown mode {other:?} (expected cll, sfl or dfl)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cll => "cll",
            Self::Sfl => "sfl",
            Self::Dfl => "dfl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Local updates between averaging rounds.
    pub u: usize,
    pub batch_size: usize,
    pub step: StepSchedule,
    pub optimizer: Optimizer,
    pub rounds: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Per-step L2 clip on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub eval_every: usize,
    /// Participation flags; empty means every silo participates.
    pub participation: Vec<bool>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            u: 4,
            batch_size: 16,
            step: StepSchedule::Constant(0.05),
            optimizer: Optimizer::Sgd,
            rounds: 300,
            mode: Mode::Dfl,
            seed: 1,
            clip_norm: Some(10.0),
            eval_every: 10,
            participation: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let alpha = self.step.base();
        if self.u == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(FedError::Config("u, batch_size and eval_every must be at least 1".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(FedError::Config(format!("step size must be finite and >= 0, got {alpha}")));
        }
        if let Optimizer::RmsProp { decay, eps } = self.optimizer {
            if !(0.0..1.0).contains(&decay) || !(eps > 0.0) {
                return Err(FedError::Config(format!("rmsprop needs 0 <= decay < 1 and eps > 0, got {decay}, {eps}")));
            }
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(FedError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn is_averaging_round(&self, k: usize) -> bool {
        k.is_multiple_of(self.u + 1)
    }
}

#[derive(Debug, Clone)]
pub struct SiloState {
    pub silo_id: usize,
    pub theta: Vec<f64>,
    pub shard: Arc<Vec<SteeringSample>>,
    /// Seed of the silo's stream family; round `k` draws from
    /// `(seed, silo_id, k)`.
    pub seed: u64,
    pub participation: bool,
    /// Optimizer accumulator; empty until the first adaptive step.
    pub opt_state: Vec<f64>,
}

impl SiloState {
    pub fn new(silo_id: usize, theta: Vec<f64>, shard: Arc<Vec<SteeringSample>>, seed: u64) -> Self {
        Self { silo_id, theta, shard, seed, participation: true, opt_state: Vec::new() }
    }

    fn batch(&self, k: usize, b: usize) -> Vec<&SteeringSample> {
        let mut s = rng::stream(self.seed, "silo.batch", &[self.silo_id as u64, k as u64]);
        let n = self.shard.len();
        index::sample(&mut s, n, b.min(n)).into_iter().map(|i| &self.shard[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SiloAction {
    Averaged,
    Gradient { loss: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub actions: Vec<SiloAction>,
}

/// `ref + Σ_j w_j (θ_j − ref)` over `members` in the given order, with
/// `ref` the first member. Equal inputs therefore map to themselves exactly,
/// and two callers with the same members and weights agree bit for bit.
fn mix(thetas: &[&[f64]], members: &[(usize, f64)]) -> Vec<f64> {
    let reference = thetas[members[0].0];
    let mut out = reference.to_vec();
    for (p, o) in out.iter_mut().enumerate() {
        let r = reference[p];
        let mut acc = 0.0;
        for &(j, w) in members {
            acc += w * (thetas[j][p] - r);
        }
        *o = r + acc;
    }
    out
}

fn check_dims(states: &[SiloState]) -> Result<usize> {
    let len = states.first().map(|s| s.theta.len()).ok_or(FedError::Config("no silos".into()))?;
    if let Some(s) = states.iter().find(|s| s.theta.len() != len) {
        return Err(FedError::Dimension(format!(
            "silo {} has {} parameters, expected {len}",
            s.silo_id,
            s.theta.len()
        )));
    }
    Ok(len)
}

/// Unweighted mean of the participating silos.
pub fn fedavg_aggregate(states: &[SiloState]) -> Result<Vec<f64>> {
    check_dims(states)?;
    let members: Vec<usize> = (0..states.len()).filter(|&i| states[i].participation).collect();
    if members.is_empty() {
        return Err(FedError::Aggregation("no participating silos".into()));
    }
    let w = 1.0 / members.len() as f64;
    let thetas: Vec<&[f64]> = states.iter().map(|s| s.theta.as_slice()).collect();
    let weighted: Vec<(usize, f64)> = members.into_iter().map(|j| (j, w)).collect();
    Ok(mix(&thetas, &weighted))
}

fn gradient_step<O: LocalObjective + ?Sized>(
    state: &mut SiloState,
    cfg: &TrainConfig,
    k: usize,
    objective: &O,
) -> Result<SiloAction> {
    let batch = state.batch(k, cfg.batch_size);
    if batch.is_empty() {
        return Err(FedError::Config(format!("silo {} has no samples", state.silo_id)));
    }
    let (loss, mut grad) = objective.gradient(&state.theta, &batch)?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(FedError::Diverged {
            silo: state.silo_id,
            round: k,
            detail: format!("gradient entry {i} is {}", grad[i]),
        });
    }
    if !loss.is_finite() {
        return Err(FedError::Diverged { silo: state.silo_id, round: k, detail: format!("batch loss is {loss}") });
    }
    if let Some(clip) = cfg.clip_norm {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            let scale = clip / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    let alpha = cfg.step.at(k);
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (t, g) in state.theta.iter_mut().zip(&grad) {
                *t -= alpha * g;
            }
        }
        Optimizer::RmsProp { decay, eps } => {
            if state.opt_state.len() != grad.len() {
                state.opt_state = vec![0.0; grad.len()];
            }
            for ((t, v), g) in state.theta.iter_mut().zip(state.opt_state.iter_mut()).zip(&grad) {
                *v = decay * *v + (1.0 - decay) * g * g;
                *t -= alpha * g / (v.sqrt() + eps);
            }
        }
    }
    Ok(SiloAction::Gradient { loss })
}

/// One synchronous round. On averaging rounds every silo with more than one
/// in-neighbor mixes the pre-round parameters of itself and its neighbors;
/// all other silos take a local gradient step.
pub fn dpasgd_round<O: LocalObjective + ?Sized>(
    states: &mut [SiloState],
    a: &ConsensusMatrix,
    cfg: &TrainConfig,
    k: usize,
    objective: &O,
) -> Result<RoundReport> {
    check_dims(states)?;
    if a.n() != states.len() {
        return Err(FedError::Dimension(format!("{} silos but a {}-silo consensus matrix", states.len(), a.n())));
    }
    let averaging = cfg.is_averaging_round(k);
    let snapshot: Vec<Vec<f64>> = if averaging { states.iter().map(|s| s.theta.clone()).collect() } else { Vec::new() };
    let views: Vec<&[f64]> = snapshot.iter().map(Vec::as_slice).collect();

    let actions = states
        .par_iter_mut()
        .enumerate()
        .map(|(i, state)| {
            let nb = a.in_neighbors(i);
            if averaging && nb.len() > 1 {
                let mut members: Vec<usize> = nb.iter().copied().chain([i]).collect();
                members.sort_unstable();
                let weighted: Vec<(usize, f64)> = members.into_iter().map(|j| (j, a.get(i, j))).collect();
                state.theta = mix(&views, &weighted);
                Ok(SiloAction::Averaged)
            } else {
                gradient_step(state, cfg, k, objective)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundReport { round: k, actions })
}

/// One server-based round: FedAvg of every participant broadcast to all
/// silos on averaging rounds, local steps otherwise.
pub fn sfl_round<O: LocalObjective + ?Sized>(
    states: &mut [SiloState],
    cfg: &TrainConfig,
    k: usize,
    objective: &O,
) -> Result<RoundReport> {
    check_dims(states)?;
    if cfg.is_averaging_round(k) {
        let global = fedavg_aggregate(states)?;
        for s in states.iter_mut() {
            s.theta.clone_from(&global);
        }
        return Ok(RoundReport { round: k, actions: vec![SiloAction::Averaged; states.len()] });
    }
    let actions =
        states.par_iter_mut().map(|state| gradient_step(state, cfg, k, objective)).collect::<Result<Vec<_>>>()?;
    Ok(RoundReport { round: k, actions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Completed rounds at evaluation time.
    pub round: usize,
    pub global_rmse: f64,
    pub global_mae: f64,
    pub mean_silo_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsHistory {
    pub rows: Vec<MetricsRow>,
}

impl MetricsHistory {
    pub const HEADER: &'static str = "round,global_rmse,global_mae,mean_silo_loss,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.round, r.global_rmse, r.global_mae, r.mean_silo_loss, r.wall_ms
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

pub struct FederatedData {
    /// One shard per silo, in silo order.
    pub shards: Vec<Shard>,
    pub held_out: Vec<SteeringSample>,
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Worker threads for the silo phase; 0 uses the rayon default.
    pub threads: usize,
    /// Record elapsed milliseconds; otherwise `wall_ms` is 0 so the history
    /// is reproducible byte for byte.
    pub wall_clock: bool,
    /// Replaces the Metropolis matrix in DFL mode.
    pub consensus: Option<ConsensusMatrix>,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub history: MetricsHistory,
    pub global: Vec<f64>,
    /// Averaging steps executed per silo.
    pub averaging_steps: Vec<usize>,
    pub states: Vec<SiloState>,
}

fn mse_of<O: LocalObjective + ?Sized>(objective: &O, theta: &[f64], samples: &[SteeringSample]) -> Result<(f64, f64)> {
    let preds = objective.predict(theta, samples)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let m = metrics(&preds, &targets).map_err(FedError::Model)?;
    Ok((m.rmse, m.mae))
}

fn evaluate<O: LocalObjective + ?Sized>(
    states: &[SiloState],
    data: &FederatedData,
    objective: &O,
    round: usize,
    wall_ms: u64,
) -> Result<MetricsRow> {
    let global = fedavg_aggregate(states)?;
    let (global_rmse, global_mae) = mse_of(objective, &global, &data.held_out)?;
    let losses = states
        .par_iter()
        .map(|s| mse_of(objective, &s.theta, &s.shard).map(|(rmse, _)| rmse * rmse))
        .collect::<Result<Vec<f64>>>()?;
    let mean_silo_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(MetricsRow { round, global_rmse, global_mae, mean_silo_loss, wall_ms })
}

/// Trains from `init` on every silo for `cfg.rounds` lockstep rounds.
pub fn run_simulation<O: LocalObjective + ?Sized>(
    topology: &Topology,
    cfg: &TrainConfig,
    data: &FederatedData,
    objective: &O,
    init: Vec<f64>,
    opts: &SimOptions,
) -> Result<SimOutcome> {
    cfg.validate()?;
    if init.len() != objective.num_params() {
        return Err(FedError::Dimension(format!(
            "initial parameters have {} entries, objective needs {}",
            init.len(),
            objective.num_params()
        )));
    }
    if data.held_out.is_empty() {
        return Err(FedError::Config("held-out set is empty".into()));
    }
    let shards: Vec<Arc<Vec<SteeringSample>>> = match cfg.mode {
        Mode::Cll => vec![Arc::new(data.shards.iter().flat_map(|s| s.samples.iter().cloned()).collect())],
        Mode::Sfl | Mode::Dfl => {
            if data.shards.len() != topology.n_silos {
                return Err(FedError::Config(format!(
                    "{} shards for {} silos in topology {}",
                    data.shards.len(),
                    topology.n_silos,
                    topology.name
                )));
            }
            data.shards.iter().map(|s| Arc::new(s.samples.clone())).collect()
        }
    };
    if let Some(i) = shards.iter().position(|s| s.is_empty()) {
        return Err(FedError::Config(format!("shard {i} is empty")));
    }
    let mut states: Vec<SiloState> =
        shards.into_iter().enumerate().map(|(i, s)| SiloState::new(i, init.clone(), s, cfg.seed)).collect();
    if !cfg.participation.is_empty() {
        if cfg.participation.len() != states.len() {
            return Err(FedError::Config(format!(
                "participation mask has {} entries for {} silos",
                cfg.participation.len(),
                states.len()
            )));
        }
        for (s, &p) in states.iter_mut().zip(&cfg.participation) {
            s.participation = p;
        }
    }
    let consensus = match cfg.mode {
        Mode::Dfl => Some(match &opts.consensus {
            Some(a) => a.clone(),
            None => metropolis_weights(topology)?,
        }),
        Mode::Cll => Some(ConsensusMatrix::new(vec![vec![1.0]], vec![vec![]])?),
        Mode::Sfl => None,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| FedError::Config(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let elapsed = |start: &Instant| if opts.wall_clock { start.elapsed().as_millis() as u64 } else { 0 };

    pool.install(|| {
        let mut history = MetricsHistory::default();
        let mut averaging_steps = vec![0; states.len()];
        history.rows.push(evaluate(&states, data, objective, 0, elapsed(&start))?);
        for k in 0..cfg.rounds {
            let report = match &consensus {
                Some(a) => dpasgd_round(&mut states, a, cfg, k, objective)?,
                None => sfl_round(&mut states, cfg, k, objective)?,
            };
            for (n, act) in averaging_steps.iter_mut().zip(&report.actions) {
                if *act == SiloAction::Averaged {
                    *n += 1;
                }
            }
            let done = k + 1;
            if done % cfg.eval_every == 0 || done == cfg.rounds {
                history.rows.push(evaluate(&states, data, objective, done, elapsed(&start))?);
            }
        }
        let global = fedavg_aggregate(&states)?;
        Ok(SimOutcome { history, global, averaging_steps, states })
    })
}

//! Self-checks run by `lttd verify`: every fast path against its
//! brute-force oracle, gradients against finite differences, and the
//! conservation properties of the averaging steps.

use std::sync::Arc;

use rand::Rng;

use crate::config::RunConfig;
use crate::data::{self, ShardStrategy, SyntheticConfig};
use crate::federated::{
    bundled_topologies, dpasgd_round, metropolis_weights, run_simulation, ConsensusMatrix, FederatedData, Mode,
    PredictorObjective, SiloState, SimOptions, StepSchedule, Topology, TrainConfig, Trainable, ZeroObjective,
};
use crate::lttd::{self, oracle, AttentionMap, AttentionNorm, BilinearParams, LttdConfig, LttdParams, ModalityTriple};
use crate::model::{self, ModelConfig, PredictorParams};
use crate::params::ParamSet;
use crate::params_io;
use crate::rng::{self, StreamRng};
use crate::tensor::DenseTensor;

type CheckResult<T> = std::result::Result<T, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the check could not be evaluated at all.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Perturbs the factorized attention map by one part in a million, so
    /// the factorization check must fail.
    pub inject_fault: bool,
}

/// Largest entrywise difference relative to the larger of the two operands.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err on different lengths");
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Finite-difference comparison: `|a − n| / max(|a|, |n|, 1)`.
pub fn fd_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

pub const FD_STEP: f64 = 1e-6;

fn random_tensor(rng: &mut StreamRng, dims: Vec<usize>) -> DenseTensor {
    let n: usize = dims.iter().product();
    DenseTensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid dims")
}

fn random_inputs(rng: &mut StreamRng, cfg: &LttdConfig) -> ModalityTriple {
    let [a, b, c] = [0, 1, 2].map(|l| random_tensor(rng, vec![cfg.n[l], cfg.d[l]]));
    ModalityTriple::new(a, b, c).expect("consistent shapes")
}

/// A small random block config: `n_l ≤ 3`, `d_l ∈ {2,4,8}`, `ℛ ∈ {1,2,4}`
/// dividing every `d_l`, `d_z ≤ 8`.
pub fn random_small_config(rng: &mut StreamRng) -> LttdConfig {
    let n = [0; 3].map(|_| rng.random_range(1..=3));
    let r = [1, 2, 4][rng.random_range(0..3)];
    let choices: Vec<usize> = [2, 4, 8].into_iter().filter(|d| d % r == 0).collect();
    let d = [0; 3].map(|_| choices[rng.random_range(0..choices.len())]);
    LttdConfig::new(n, d, r, rng.random_range(1..=8))
}

fn check_attention_factorization(opts: &VerifyOptions) -> CheckResult<f64> {
    let mut rng = rng::stream(opts.seed, "verify.factorization", &[]);
    let mut worst = 0.0f64;
    for t in 0..200u64 {
        let cfg = random_small_config(&mut rng);
        let params = LttdParams::init(&cfg, opts.seed ^ t).map_err(|e| e.to_string())?;
        let inputs = random_inputs(&mut rng, &cfg);
        let mut fast = lttd::attention_map(&params, &inputs, &cfg).map_err(|e| e.to_string())?.0;
        if opts.inject_fault {
            fast = fast.scale(1.0 + 1e-6);
        }
        let t_m = oracle::reconstruct_attention_tensor(&params).map_err(|e| e.to_string())?;
        let slow = oracle::attention_from_tensor(&t_m, &inputs).map_err(|e| e.to_string())?.0;
        worst = worst.max(rel_err(fast.data(), slow.data()));
    }
    Ok(worst)
}

/// `T_sc[a,b,c,z] = Wz1[a,z] Wz2[b,z] Wz3[c,z]`, the triplet tensor implied by
/// the joint projections and a superdiagonal core.
fn implied_triplet_tensor(params: &LttdParams) -> DenseTensor {
    let [w1, w2, w3] = &params.wz;
    let dz = w1.cols();
    DenseTensor::from_fn(vec![w1.rows(), w2.rows(), w3.rows(), dz], |ix| {
        w1.get(&[ix[0], ix[3]]) * w2.get(&[ix[1], ix[3]]) * w3.get(&[ix[2], ix[3]])
    })
    .expect("valid dims")
}

fn check_hadamard_elimination(opts: &VerifyOptions) -> CheckResult<f64> {
    let mut rng = rng::stream(opts.seed, "verify.hadamard", &[]);
    let mut worst = 0.0f64;
    for t in 0..100u64 {
        let cfg = random_small_config(&mut rng);
        let params = LttdParams::init(&cfg, opts.seed ^ t).map_err(|e| e.to_string())?;
        let inputs = random_inputs(&mut rng, &cfg);
        let map = AttentionMap(random_tensor(&mut rng, cfg.n.to_vec()));
        let fast = lttd::joint_representation(&params, &map, &inputs).map_err(|e| e.to_string())?;
        let g = oracle::superdiagonal(cfg.d_z).map_err(|e| e.to_string())?;
        let slow = oracle::joint_from_attention_oracle(&params, &g, &map, &inputs).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(fast.values(), slow.values()));
    }
    Ok(worst)
}

fn check_unitary_decoupling(opts: &VerifyOptions) -> CheckResult<f64> {
    let mut rng = rng::stream(opts.seed, "verify.unitary", &[]);
    let mut worst = 0.0f64;
    for t in 0..30u64 {
        let mut cfg = random_small_config(&mut rng);
        cfg.n = cfg.n.map(|x| x.min(2));
        let params = LttdParams::init(&cfg, opts.seed ^ t).map_err(|e| e.to_string())?;
        let inputs = random_inputs(&mut rng, &cfg);
        let map = AttentionMap(random_tensor(&mut rng, cfg.n.to_vec()));
        let t_sc = implied_triplet_tensor(&params);
        // the full tensor that the attention-weighted triplet sum stands for
        let [n, d] = [cfg.n, cfg.d];
        let t_full = DenseTensor::from_fn(vec![n[0] * d[0], n[1] * d[1], n[2] * d[2], cfg.d_z], |ix| {
            let (i, a) = (ix[0] / d[0], ix[0] % d[0]);
            let (j, b) = (ix[1] / d[1], ix[1] % d[1]);
            let (k, c) = (ix[2] / d[2], ix[2] % d[2]);
            map.tensor().get(&[i, j, k]) * t_sc.get(&[a, b, c, ix[3]])
        })
        .map_err(|e| e.to_string())?;
        let full = oracle::full_joint_oracle(&t_full, &inputs).map_err(|e| e.to_string())?;
        let unitary = oracle::unitary_joint_oracle(&t_sc, &map, &inputs).map_err(|e| e.to_string())?;
        let fast = lttd::joint_representation(&params, &map, &inputs).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(full.values(), unitary.values())).max(rel_err(unitary.values(), fast.values()));
    }
    Ok(worst)
}

fn check_bilinear_identity(opts: &VerifyOptions) -> CheckResult<f64> {
    let mut rng = rng::stream(opts.seed, "verify.bilinear", &[]);
    let mut worst = 0.0f64;
    for t in 0..100u64 {
        let r = [1, 2, 4][rng.random_range(0..3)];
        let d = [r * rng.random_range(1..=2), r * rng.random_range(1..=2)];
        let dz = rng.random_range(1..=8);
        let params = BilinearParams::init(d, r, dz, opts.seed ^ t).map_err(|e| e.to_string())?;
        let (n1, n2) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let m1 = random_tensor(&mut rng, vec![n1, d[0]]);
        let m2 = random_tensor(&mut rng, vec![n2, d[1]]);
        let map = lttd::bilinear_attention_map(&params, &m1, &m2).map_err(|e| e.to_string())?;
        let a = lttd::bilinear_joint_sum(&params, &map, &m1, &m2).map_err(|e| e.to_string())?;
        let b = lttd::bilinear_joint_matrix(&params, &map, &m1, &m2).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(a.values(), b.values()));
    }
    Ok(worst)
}

/// Picks `count` coordinates of `p`, cycling through its tensors so every
/// group is hit. Returns flat indices.
pub fn spread_coordinates<P: ParamSet>(p: &P, count: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut ranges = Vec::new();
    let mut start = 0;
    p.visit(&mut |_, t| {
        ranges.push((start, t.numel()));
        start += t.numel();
    });
    (0..count)
        .map(|c| {
            let (s, n) = ranges[c % ranges.len()];
            s + rng.random_range(0..n)
        })
        .collect()
}

fn check_lttd_gradient(opts: &VerifyOptions) -> CheckResult<f64> {
    let mut rng = rng::stream(opts.seed, "verify.lttd_grad", &[]);
    let mut worst = 0.0f64;
    for norm in [AttentionNorm::Raw, AttentionNorm::Softmax] {
        let cfg = LttdConfig::new([2, 3, 2], [4, 2, 4], 2, 3).with_norm(norm);
        let params = LttdParams::init(&cfg, opts.seed).map_err(|e| e.to_string())?;
        let inputs = random_inputs(&mut rng, &cfg);
        let upstream: Vec<f64> = (0..cfg.d_z).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = lttd::backward(&params, &inputs, &cfg, &upstream).map_err(|e| e.to_string())?;
        let objective = |p: &LttdParams| -> CheckResult<f64> {
            let (_, z) = lttd::forward(p, &inputs, &cfg).map_err(|e| e.to_string())?;
            Ok(z.values().iter().zip(&upstream).map(|(a, b)| a * b).sum())
        };
        let analytic = grads.params.to_flat();
        let base = params.to_flat();
        for idx in spread_coordinates(&params, 25, &mut rng) {
            let mut plus = params.clone();
            let mut flat = base.clone();
            flat[idx] += FD_STEP;
            plus.load_flat(&flat);
            let mut minus = params.clone();
            flat[idx] -= 2.0 * FD_STEP;
            minus.load_flat(&flat);
            let numeric = (objective(&plus)? - objective(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(fd_err(analytic[idx], numeric));
        }
    }
    Ok(worst)
}

fn small_model() -> (ModelConfig, SyntheticConfig) {
    let synth = SyntheticConfig { n_sequences: 3, seq_len: 10, d_img: 3, ..SyntheticConfig::default() };
    let mut cfg = ModelConfig::new(synth.d_img, [4, 2, 2], 2, 2, 3);
    cfg.lttd.normalize = AttentionNorm::Softmax;
    (cfg, synth)
}

fn check_model_gradient(opts: &VerifyOptions) -> CheckResult<f64> {
    let mut rng = rng::stream(opts.seed, "verify.model_grad", &[]);
    let (cfg, synth) = small_model();
    let samples = data::generate(&synth).map_err(|e| e.to_string())?;
    let batch: Vec<_> = samples.iter().take(6).collect();
    let params = PredictorParams::init(&cfg, opts.seed).map_err(|e| e.to_string())?;
    let (_, grads) = model::loss_gradient(&params, &cfg, &batch).map_err(|e| e.to_string())?;
    let analytic = grads.to_flat();
    let base = params.to_flat();
    let loss = |flat: &[f64]| -> CheckResult<f64> {
        let p = PredictorParams::from_flat(&cfg, flat).map_err(|e| e.to_string())?;
        let preds = model::predict_batch(&p, &cfg, &batch).map_err(|e| e.to_string())?;
        let targets: Vec<f64> = batch.iter().map(|s| s.target).collect();
        model::mse_loss(&preds, &targets).map_err(|e| e.to_string())
    };
    let mut worst = 0.0f64;
    for idx in spread_coordinates(&params, 50, &mut rng) {
        let mut flat = base.clone();
        flat[idx] += FD_STEP;
        let up = loss(&flat)?;
        flat[idx] -= 2.0 * FD_STEP;
        let down = loss(&flat)?;
        worst = worst.max(fd_err(analytic[idx], (up - down) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

fn check_param_count(_: &VerifyOptions) -> CheckResult<f64> {
    let toy = lttd::param_count(&LttdConfig::new([1, 1, 1], [2, 2, 2], 1, 2)).map_err(|e| e.to_string())?;
    let full = lttd::param_count(&LttdConfig::new([5, 5, 4], [64, 64, 64], 32, 1024)).map_err(|e| e.to_string())?;
    let toy_err = toy.full_tensor_params.abs_diff(16) + toy.decomposed_params.abs_diff(32);
    if full.decomposition_rate <= 1000.0 {
        return Err(format!("full-scale rate {} is not above 1000", full.decomposition_rate));
    }
    Ok(toy_err as f64)
}

fn check_metropolis(_: &VerifyOptions) -> CheckResult<f64> {
    let mut topologies = bundled_topologies().map_err(|e| e.to_string())?;
    topologies.push(Topology::ring(7).map_err(|e| e.to_string())?.symmetrized());
    let mut worst = 0.0f64;
    for t in &topologies {
        let a = metropolis_weights(t).map_err(|e| e.to_string())?;
        worst = worst.max(a.max_row_residual()).max(a.max_col_residual());
    }
    Ok(worst)
}

fn zero_silos(n: usize, dim: usize, rng: &mut StreamRng) -> Vec<SiloState> {
    let shard = Arc::new(vec![ZeroObjective::placeholder_sample()]);
    (0..n)
        .map(|i| SiloState::new(i, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), shard.clone(), 0))
        .collect()
}

fn averaging_config() -> TrainConfig {
    TrainConfig { u: 1, step: StepSchedule::Constant(0.0), ..TrainConfig::default() }
}

fn mean_of(states: &[SiloState]) -> Vec<f64> {
    let mut m = vec![0.0; states[0].theta.len()];
    for s in states {
        for (a, v) in m.iter_mut().zip(&s.theta) {
            *a += v / states.len() as f64;
        }
    }
    m
}

fn check_mean_preservation(opts: &VerifyOptions) -> CheckResult<f64> {
    let mut rng = rng::stream(opts.seed, "verify.mean", &[]);
    let cfg = averaging_config();
    let mut worst = 0.0f64;
    for t in bundled_topologies().map_err(|e| e.to_string())? {
        let a = metropolis_weights(&t).map_err(|e| e.to_string())?;
        let mut states = zero_silos(t.n_silos, 4, &mut rng);
        let before = mean_of(&states);
        dpasgd_round(&mut states, &a, &cfg, 0, &ZeroObjective::new(4)).map_err(|e| e.to_string())?;
        let after = mean_of(&states);
        worst = worst.max(before.iter().zip(&after).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())));
    }
    Ok(worst)
}

/// Largest per-coordinate spread, max minus min across silos.
pub fn spread(states: &[SiloState]) -> f64 {
    let dim = states[0].theta.len();
    (0..dim)
        .map(|p| {
            let (lo, hi) = states
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.theta[p]), hi.max(s.theta[p])));
            hi - lo
        })
        .fold(0.0, f64::max)
}

fn check_consensus_contraction(opts: &VerifyOptions) -> CheckResult<f64> {
    let mut rng = rng::stream(opts.seed, "verify.contraction", &[]);
    let cfg = averaging_config();
    let mut worst = 0.0f64;
    for t in bundled_topologies().map_err(|e| e.to_string())? {
        let a = metropolis_weights(&t).map_err(|e| e.to_string())?;
        let mut states = zero_silos(t.n_silos, 3, &mut rng);
        for k in 0..500 {
            dpasgd_round(&mut states, &a, &cfg, k, &ZeroObjective::new(3)).map_err(|e| e.to_string())?;
        }
        worst = worst.max(spread(&states));
    }
    Ok(worst)
}

fn federated_fixture(n_silos: usize) -> CheckResult<(FederatedData, PredictorObjective, Vec<f64>)> {
    let (cfg, mut synth) = small_model();
    synth.n_sequences = n_silos;
    let samples = data::generate(&synth).map_err(|e| e.to_string())?;
    let held_out = data::generate_held_out(&synth, 2, 0).map_err(|e| e.to_string())?;
    let shards = data::shard(&samples, n_silos, ShardStrategy::Iid, 1).map_err(|e| e.to_string())?;
    let init = PredictorParams::init(&cfg, 3).map_err(|e| e.to_string())?.to_flat();
    let objective = PredictorObjective::new(cfg, Trainable::All).map_err(|e| e.to_string())?;
    Ok((FederatedData { shards, held_out }, objective, init))
}

fn check_dpasgd_matches_fedavg(_: &VerifyOptions) -> CheckResult<f64> {
    let n = 4;
    let (data, objective, init) = federated_fixture(n)?;
    let topo = Topology::complete(n).map_err(|e| e.to_string())?;
    let base = TrainConfig {
        u: 2,
        batch_size: 4,
        step: StepSchedule::Constant(0.05),
        rounds: 12,
        eval_every: 3,
        ..TrainConfig::default()
    };
    let dfl = TrainConfig { mode: Mode::Dfl, ..base.clone() };
    let sfl = TrainConfig { mode: Mode::Sfl, ..base };
    let uniform = SimOptions {
        threads: 1,
        consensus: Some(ConsensusMatrix::uniform(n).map_err(|e| e.to_string())?),
        ..SimOptions::default()
    };
    let a = run_simulation(&topo, &dfl, &data, &objective, init.clone(), &uniform).map_err(|e| e.to_string())?;
    let b = run_simulation(&topo, &sfl, &data, &objective, init, &SimOptions { threads: 1, ..SimOptions::default() })
        .map_err(|e| e.to_string())?;
    let mut mismatches = 0usize;
    for (x, y) in a.states.iter().zip(&b.states) {
        mismatches += x.theta.iter().zip(&y.theta).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    }
    if a.history != b.history {
        mismatches += 1;
    }
    Ok(mismatches as f64)
}

fn check_single_neighbor_guard(_: &VerifyOptions) -> CheckResult<f64> {
    let n = 5;
    let (data, objective, init) = federated_fixture(n)?;
    let topo = Topology::path(n).map_err(|e| e.to_string())?;
    let cfg =
        TrainConfig { u: 1, batch_size: 4, step: StepSchedule::Constant(0.05), rounds: 20, ..TrainConfig::default() };
    let out = run_simulation(&topo, &cfg, &data, &objective, init, &SimOptions { threads: 1, ..SimOptions::default() })
        .map_err(|e| e.to_string())?;
    let guarded = (0..n).filter(|&i| topo.in_neighbors(i).len() == 1);
    let violations: usize = guarded.map(|i| out.averaging_steps[i]).sum();
    if out.averaging_steps[n / 2] == 0 {
        return Err("interior silos never averaged".into());
    }
    Ok(violations as f64)
}

fn check_params_round_trip(opts: &VerifyOptions) -> CheckResult<f64> {
    let cfg = RunConfig::default();
    let params = PredictorParams::init(&cfg.model_config(), opts.seed).map_err(|e| e.to_string())?;
    let back = params_io::decode(&params_io::encode(&cfg, &params)).map_err(|e| e.to_string())?;
    let differing =
        params.to_flat().iter().zip(back.params.to_flat()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    let config_err = usize::from(back.config != cfg || RunConfig::parse(&cfg.to_text()).ok() != Some(cfg.clone()));
    Ok((differing + config_err) as f64)
}

type CheckFn = fn(&VerifyOptions) -> CheckResult<f64>;

const CHECKS: [(&str, f64, CheckFn); 13] = [
    ("attention map factorization", 1e-10, check_attention_factorization),
    ("hadamard elimination", 1e-10, check_hadamard_elimination),
    ("unitary attention decoupling", 1e-12, check_unitary_decoupling),
    ("bilinear identity", 1e-12, check_bilinear_identity),
    ("lttd gradient vs finite differences", 1e-5, check_lttd_gradient),
    ("model gradient vs finite differences", 1e-5, check_model_gradient),
    ("parameter count", 0.0, check_param_count),
    ("metropolis doubly stochastic", 1e-12, check_metropolis),
    ("averaging preserves the mean", 1e-12, check_mean_preservation),
    ("consensus contraction in 500 rounds", 1e-6, check_consensus_contraction),
    ("dfl on complete graph equals fedavg", 0.0, check_dpasgd_matches_fedavg),
    ("single in-neighbor never averages", 0.0, check_single_neighbor_guard),
    ("params file round trip", 0.0, check_params_round_trip),
];

pub fn run_checks(opts: &VerifyOptions) -> Vec<Check> {
    CHECKS
        .iter()
        .map(|&(name, tolerance, f)| match f(opts) {
            Ok(max_err) => Check { name, max_err, tolerance, passed: max_err <= tolerance, error: None },
            Err(e) => Check { name, max_err: f64::NAN, tolerance, passed: false, error: Some(e) },
        })
        .collect()
}

pub fn format_report(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{status}  {:<40} max_err={:.3e}  tol={:.0e}", c.name, c.max_err, c.tolerance));
        if let Some(e) = &c.error {
            out.push_str(&format!("  ({e})"));
        }
        out.push('\n');
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    out.push_str(&format!("{passed}/{} checks passed\n", checks.len()));
    out
}

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::{inputs, rel, rng, small_config, tensor};
use lttd_core::config::RunConfig;
use lttd_core::data::{self, ShardStrategy, SyntheticConfig};
use lttd_core::federated::{
    dpasgd_round, fedavg_aggregate, metropolis_weights, parse_topology, SiloState, StepSchedule, Topology, TrainConfig,
    ZeroObjective,
};
use lttd_core::lttd::{self, oracle, AttentionMap, AttentionNorm, BilinearParams, LttdParams};
use lttd_core::model::{self, ModalityMask, ModelConfig, PredictorParams};
use lttd_core::params_io;
use lttd_core::tensor::{contract_leading, hadamard, outer_product, vectorize};
use lttd_core::{DenseTensor, ParamSet};
use proptest::prelude::*;
use rand::Rng;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn outer_then_contract_is_product_of_dots(seed in any::<u64>(), n in 1usize..5) {
        let mut g = rng(seed);
        let v: Vec<DenseTensor> = (0..6).map(|_| tensor(&mut g, &[n])).collect();
        let t = outer_product(&[&v[0], &v[1], &v[2]]).unwrap();
        let got = contract_leading(&t, &[&v[3], &v[4], &v[5]]).unwrap().data()[0];
        let dot = |a: &DenseTensor, b: &DenseTensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let want = dot(&v[0], &v[3]) * dot(&v[1], &v[4]) * dot(&v[2], &v[5]);
        prop_assert!(rel(&[got], &[want]) <= 1e-12);
    }

    #[test]
    fn vectorize_is_a_bijection(seed in any::<u64>(), r in 1usize..6, c in 1usize..6) {
        let m = tensor(&mut rng(seed), &[r, c]);
        let v = vectorize(&m).unwrap();
        prop_assert_eq!(v.dims(), &[r * c]);
        prop_assert_eq!(v.reshape(vec![r, c]).unwrap(), m);
    }

    #[test]
    fn hadamard_commutes_and_associates(seed in any::<u64>(), n in 1usize..8) {
        let mut g = rng(seed);
        let (a, b, c) = (tensor(&mut g, &[n]), tensor(&mut g, &[n]), tensor(&mut g, &[n]));
        let abc = hadamard(&[&a, &b, &c]).unwrap();
        let cba = hadamard(&[&c, &b, &a]).unwrap();
        let ab = hadamard(&[&a, &b]).unwrap();
        let nested = hadamard(&[&ab, &c]).unwrap();
        prop_assert!(rel(abc.data(), cba.data()) <= 1e-12);
        prop_assert!(rel(abc.data(), nested.data()) <= 1e-12);
        prop_assert_eq!(hadamard(&[&a, &b, &c]).unwrap(), abc);
    }

    #[test]
    fn attention_map_equals_reconstructed_tensor(seed in any::<u64>()) {
        let mut g = rng(seed);
        let cfg = small_config(&mut g);
        let p = LttdParams::init(&cfg, seed).unwrap();
        let x = inputs(&mut g, &cfg);
        let fast = lttd::attention_map(&p, &x, &cfg).unwrap();
        let t_m = oracle::reconstruct_attention_tensor(&p).unwrap();
        let slow = oracle::attention_from_tensor(&t_m, &x).unwrap();
        prop_assert!(rel(fast.0.data(), slow.0.data()) <= 1e-10);
    }

    #[test]
    fn hadamard_path_equals_superdiagonal_core(seed in any::<u64>()) {
        let mut g = rng(seed);
        let cfg = small_config(&mut g);
        let p = LttdParams::init(&cfg, seed).unwrap();
        let x = inputs(&mut g, &cfg);
        let map = AttentionMap(tensor(&mut g, &cfg.n));
        let fast = lttd::joint_representation(&p, &map, &x).unwrap();
        let lit = oracle::joint_from_attention_oracle(&p, &oracle::superdiagonal(cfg.d_z).unwrap(), &map, &x).unwrap();
        prop_assert!(rel(fast.values(), lit.values()) <= 1e-10);
    }

    #[test]
    fn bilinear_sum_equals_matrix_form(seed in any::<u64>(), r in 1usize..3, n1 in 1usize..4, n2 in 1usize..4) {
        let mut g = rng(seed);
        let d = [2 * r, 4 * r];
        let p = BilinearParams::init(d, r, 5, seed).unwrap();
        let m1 = tensor(&mut g, &[n1, d[0]]);
        let m2 = tensor(&mut g, &[n2, d[1]]);
        let map = lttd::bilinear_attention_map(&p, &m1, &m2).unwrap();
        let a = lttd::bilinear_joint_sum(&p, &map, &m1, &m2).unwrap();
        let b = lttd::bilinear_joint_matrix(&p, &map, &m1, &m2).unwrap();
        prop_assert!(rel(a.values(), b.values()) <= 1e-12);
    }

    #[test]
    fn raw_block_is_multilinear_in_first_modality(seed in any::<u64>(), s in -3.0f64..3.0) {
        let mut g = rng(seed);
        let cfg = small_config(&mut g);
        let p = LttdParams::init(&cfg, seed).unwrap();
        let x = inputs(&mut g, &cfg);
        let mut y = x.clone();
        y.m1 = y.m1.scale(s);
        let (m0, z0) = lttd::forward(&p, &x, &cfg).unwrap();
        let (m1, z1) = lttd::forward(&p, &y, &cfg).unwrap();
        prop_assert!(rel(m1.0.data(), m0.0.scale(s).data()) <= 1e-12);
        prop_assert!(rel(z1.values(), z0.0.scale(s * s).data()) <= 1e-12);
    }

    #[test]
    fn softmax_map_is_a_shift_invariant_distribution(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut g = rng(seed);
        let cfg = small_config(&mut g).with_norm(AttentionNorm::Softmax);
        let p = LttdParams::init(&cfg, seed).unwrap();
        let x = inputs(&mut g, &cfg);
        let (map, _, cache) = lttd::forward_with_cache(&p, &x, &cfg).unwrap();
        let w = map.0.data();
        prop_assert!(w.iter().all(|&v| v > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = cache.logits().data().iter().map(|l| l + shift).collect();
        let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = shifted.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let again: Vec<f64> = e.iter().map(|v| v / total).collect();
        prop_assert!(rel(w, &again) <= 1e-12);
    }
}

fn tiny_model(seed: u64) -> (ModelConfig, Vec<lttd_core::model::SteeringSample>) {
    let synth = SyntheticConfig { n_sequences: 2, seq_len: 10, d_img: 3, seed, ..SyntheticConfig::default() };
    let mut cfg = ModelConfig::new(3, [2, 2, 2], 2, 1, 3);
    cfg.lttd.normalize = AttentionNorm::Softmax;
    (cfg, data::generate(&synth).unwrap())
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn head_bias_shifts_every_prediction(seed in any::<u64>(), delta in -2.0f64..2.0) {
        let (cfg, samples) = tiny_model(seed);
        let p = PredictorParams::init(&cfg, seed).unwrap();
        let mut q = p.clone();
        q.head_b = DenseTensor::vector(vec![p.head_bias() + delta]).unwrap();
        for s in &samples {
            let a = model::predict(&p, &cfg, s).unwrap();
            let b = model::predict(&q, &cfg, s).unwrap();
            prop_assert_eq!(b, a + delta);
            prop_assert_eq!(model::predict(&p, &cfg, s).unwrap(), a);
        }
    }

    #[test]
    fn zero_head_cuts_block_gradients(seed in any::<u64>()) {
        let (cfg, samples) = tiny_model(seed);
        let mut p = PredictorParams::init(&cfg, seed).unwrap();
        p.head_w.data_mut().fill(0.0);
        let batch: Vec<_> = samples.iter().take(5).collect();
        let (_, grads) = model::loss_gradient(&p, &cfg, &batch).unwrap();
        let mut others = 0.0f64;
        grads.visit(&mut |name, t| if name != "head.w" && name != "head.b" { others = others.max(t.max_abs()) });
        prop_assert_eq!(others, 0.0);
    }

    #[test]
    fn rmse_never_below_mae(seed in any::<u64>(), n in 1usize..40) {
        let mut g = rng(seed);
        let preds: Vec<f64> = (0..n).map(|_| g.random_range(-1.0..1.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| g.random_range(-1.0..1.0)).collect();
        let m = model::metrics(&preds, &targets).unwrap();
        prop_assert!(m.rmse >= m.mae - 1e-15);
    }

    #[test]
    fn masked_model_ignores_history(seed in any::<u64>()) {
        let (mut cfg, samples) = tiny_model(seed);
        cfg.mask = ModalityMask::CURRENT_ONLY;
        let p = PredictorParams::init(&cfg, seed).unwrap();
        let mut s = samples[0].clone();
        let a = model::predict(&p, &cfg, &s).unwrap();
        s.past_steering = [0.9; 5];
        s.past_frames = s.past_frames.scale(-3.0);
        prop_assert_eq!(model::predict(&p, &cfg, &s).unwrap(), a);
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn generated_data_is_bounded_and_finite(seed in any::<u64>(), gain in 0.05f64..2.0, drift in 0.0f64..1.0) {
        let cfg = SyntheticConfig { n_sequences: 3, seq_len: 15, d_img: 4, frame_gain: gain, nonstationarity: drift, seed, ..SyntheticConfig::default() };
        for s in data::generate(&cfg).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&s.target));
            prop_assert!(s.past_steering.iter().all(|a| (-1.0..=1.0).contains(a)));
            prop_assert!(s.current_image.iter().chain(s.past_frames.data()).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn windows_align_with_trajectory(seed in any::<u64>(), seq_len in 6usize..20) {
        let cfg = SyntheticConfig { n_sequences: 2, seq_len, d_img: 3, noise_std: 0.0, nonstationarity: 0.0, seed, ..SyntheticConfig::default() };
        let map = data::frame_map(&cfg);
        let samples = data::generate(&cfg).unwrap();
        prop_assert_eq!(samples.len(), 2 * (seq_len - 5));
        let frame = |a: &[f64], t: usize| -> Vec<f64> { map.iter().map(|m| m[0] * a[t] + m[1] * a[t + 1]).collect() };
        for (idx, s) in samples.iter().enumerate() {
            let (seq, t) = (idx / (seq_len - 5), 5 + idx % (seq_len - 5));
            let a = data::trajectory(&cfg, 0, seq);
            prop_assert_eq!(s.sequence, seq);
            prop_assert_eq!(s.target, a[t]);
            prop_assert_eq!(&s.past_steering[..], &a[t - 5..t]);
            prop_assert_eq!(&s.current_image, &frame(&a, t));
            for j in 0..5 {
                prop_assert_eq!(s.past_frames.row(j), &frame(&a, t - 5 + j)[..]);
            }
        }
    }

    #[test]
    fn sharding_is_an_exact_partition(seed in any::<u64>(), n_silos in 1usize..9, by_seq in any::<bool>()) {
        let cfg = SyntheticConfig { n_sequences: 9, seq_len: 9, d_img: 2, seed, ..SyntheticConfig::default() };
        let samples = data::generate(&cfg).unwrap();
        let strategy = if by_seq { ShardStrategy::BySequence } else { ShardStrategy::Iid };
        let shards = data::shard(&samples, n_silos, strategy, seed).unwrap();
        prop_assert_eq!(shards.len(), n_silos);
        let key = |s: &lttd_core::model::SteeringSample| (s.sequence, s.target.to_bits(), s.past_steering.map(f64::to_bits));
        let mut seen: BTreeMap<_, usize> = BTreeMap::new();
        for sh in &shards {
            prop_assert!(!sh.samples.is_empty());
            for s in &sh.samples {
                *seen.entry(key(s)).or_default() += 1;
            }
        }
        let mut want: BTreeMap<_, usize> = BTreeMap::new();
        for s in &samples {
            *want.entry(key(s)).or_default() += 1;
        }
        prop_assert_eq!(seen, want);
        if by_seq {
            let mut owner = BTreeMap::new();
            for sh in &shards {
                for s in &sh.samples {
                    prop_assert_eq!(*owner.entry(s.sequence).or_insert(sh.silo_id), sh.silo_id);
                }
            }
        }
    }
}

/// A random connected undirected graph: a spanning cycle in shuffled order
/// plus random chords, so every silo has at least two neighbors once n > 2.
fn random_connected(seed: u64, n: usize) -> Topology {
    let mut g = rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, g.random_range(0..=i));
    }
    let mut edges: Vec<(usize, usize)> = order.windows(2).map(|w| (w[0], w[1])).collect();
    if n > 2 {
        edges.push((order[n - 1], order[0]));
    }
    for _ in 0..n {
        let (a, b) = (g.random_range(0..n), g.random_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    Topology::new("random", n, edges).unwrap().symmetrized()
}

fn silos(n: usize, dim: usize, seed: u64) -> Vec<SiloState> {
    let mut g = rng(seed);
    let shard = Arc::new(vec![ZeroObjective::placeholder_sample()]);
    (0..n).map(|i| SiloState::new(i, (0..dim).map(|_| g.random_range(-5.0..5.0)).collect(), shard.clone(), 0)).collect()
}

fn max_dev(states: &[SiloState]) -> f64 {
    let mean = fedavg_aggregate(states).unwrap();
    states
        .iter()
        .map(|s| s.theta.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn metropolis_is_doubly_stochastic(seed in any::<u64>(), n in 2usize..30) {
        let a = metropolis_weights(&random_connected(seed, n)).unwrap();
        prop_assert!(a.max_row_residual() <= 1e-12);
        prop_assert!(a.max_col_residual() <= 1e-12);
    }

    #[test]
    fn averaging_conserves_mean_and_contracts(seed in any::<u64>(), n in 3usize..20) {
        let t = random_connected(seed, n);
        let a = metropolis_weights(&t).unwrap();
        let cfg = TrainConfig { u: 1, step: StepSchedule::Constant(0.0), ..TrainConfig::default() };
        let mut states = silos(n, 3, seed);
        let mean0 = fedavg_aggregate(&states).unwrap();
        let mut prev = max_dev(&states);
        for k in (0..40).step_by(2) {
            dpasgd_round(&mut states, &a, &cfg, k, &ZeroObjective::new(3)).unwrap();
            let mean = fedavg_aggregate(&states).unwrap();
            prop_assert!(mean.iter().zip(&mean0).all(|(x, y)| (x - y).abs() <= 1e-12));
            let dev = max_dev(&states);
            prop_assert!(dev <= prev + 1e-12, "deviation grew from {} to {}", prev, dev);
            prev = dev;
        }
    }

    #[test]
    fn fedavg_of_identical_thetas_is_exact(seed in any::<u64>(), n in 1usize..12) {
        let theta: Vec<f64> = { let mut g = rng(seed); (0..7).map(|_| g.random_range(-1e3..1e3)).collect() };
        let shard = Arc::new(vec![ZeroObjective::placeholder_sample()]);
        let states: Vec<SiloState> = (0..n).map(|i| SiloState::new(i, theta.clone(), shard.clone(), 0)).collect();
        prop_assert_eq!(fedavg_aggregate(&states).unwrap(), theta);
    }

    #[test]
    fn topology_text_round_trips(seed in any::<u64>(), n in 2usize..15) {
        let t = random_connected(seed, n);
        prop_assert_eq!(parse_topology(&t.to_text(), &t.name).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn config_text_round_trips(
        alpha in 1e-6f64..1.0, noise in 0.0f64..0.5, gain in 0.01f64..3.0, u in 1usize..10,
        rounds in 0usize..1000, mask in proptest::collection::vec(any::<bool>(), 0..12), clip in proptest::option::of(0.1f64..100.0),
    ) {
        let mut cfg = RunConfig::default();
        cfg.train.step = StepSchedule::InvSqrt(alpha);
        cfg.train.u = u;
        cfg.train.rounds = rounds;
        cfg.train.participation = mask;
        cfg.train.clip_norm = clip;
        cfg.data.synthetic.noise_std = noise;
        cfg.data.synthetic.frame_gain = gain;
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn params_file_round_trips_and_rejects_truncation(seed in any::<u64>(), cut in 1usize..4000) {
        let cfg = RunConfig::default();
        let p = PredictorParams::init(&cfg.model_config(), seed).unwrap();
        let bytes = params_io::encode(&cfg, &p);
        let back = params_io::decode(&bytes).unwrap();
        prop_assert!(back.params.to_flat().iter().zip(p.to_flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let short = &bytes[..bytes.len().saturating_sub(cut)];
        let truncated = matches!(params_io::decode(short), Err(params_io::ParamsIoError::Format { .. }));
        prop_assert!(truncated);
    }
}

#[test]
fn small_gradient_steps_decrease_a_fixed_batch_loss() {
    for seed in 0..10 {
        let (cfg, samples) = tiny_model(seed);
        let batch: Vec<_> = samples.iter().take(8).collect();
        let mut p = PredictorParams::init(&cfg, seed).unwrap();
        let (mut prev, _) = model::loss_gradient(&p, &cfg, &batch).unwrap();
        for step in 0..100 {
            let (_, grads) = model::loss_gradient(&p, &cfg, &batch).unwrap();
            p.accumulate(&grads, -1e-3);
            let (loss, _) = model::loss_gradient(&p, &cfg, &batch).unwrap();
            assert!(loss < prev, "seed {seed} step {step}: {prev} -> {loss}");
            prev = loss;
        }
    }
}

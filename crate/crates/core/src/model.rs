//! Steering predictor built around the attention block: affine embedders
//! lift raw modality rows into channel embeddings, the block fuses them, and
//! an affine head maps the joint vector to a steering angle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lttd::{self, init_uniform, LttdConfig, LttdError, LttdParams, ModalityTriple};
use crate::params::ParamSet;
use crate::tensor::{DenseTensor, TensorError};

/// Past frames and past steering values carried by every sample.
pub const PAST_STEPS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample does not match model: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Lttd(#[from] LttdError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringSample {
    /// Index of the sequence the window was cut from.
    pub sequence: usize,
    pub current_image: Vec<f64>,
    /// `PAST_STEPS x d_img`, oldest first.
    pub past_frames: DenseTensor,
    /// Oldest first.
    pub past_steering: [f64; PAST_STEPS],
    pub target: f64,
}

impl SteeringSample {
    pub fn d_img(&self) -> usize {
        self.current_image.len()
    }
}

/// Which raw inputs reach the embedders. A disabled modality is zeroed
/// before embedding, so only the embedder biases remain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub past_frames: bool,
    pub past_steering: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self { past_frames: true, past_steering: true }
    }
}

impl ModalityMask {
    pub const CURRENT_ONLY: Self = Self { past_frames: false, past_steering: false };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_img: usize,
    /// `n[0]` and `n[1]` must equal [`PAST_STEPS`].
    pub lttd: LttdConfig,
    pub mask: ModalityMask,
}

impl ModelConfig {
    /// Standard layout: five past-frame channels, five steering channels and
    /// `n3` current-image channels.
    pub fn new(d_img: usize, d: [usize; 3], n3: usize, r_slices: usize, d_z: usize) -> Self {
        Self {
            d_img,
            lttd: LttdConfig::new([PAST_STEPS, PAST_STEPS, n3], d, r_slices, d_z),
            mask: ModalityMask::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lttd.validate()?;
        if self.d_img == 0 {
            return Err(ModelError::Config("d_img must be positive".into()));
        }
        if self.lttd.n[0] != PAST_STEPS || self.lttd.n[1] != PAST_STEPS {
            return Err(ModelError::Config(format!(
                "past-frame and steering channel counts must be {PAST_STEPS}, got {:?}",
                &self.lttd.n[..2]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    /// `d_img x d1`
    pub embed1_w: DenseTensor,
    pub embed1_b: DenseTensor,
    /// `d2`, multiplies the scalar steering value.
    pub embed2_w: DenseTensor,
    /// `PAST_STEPS x d2`: one bias row per time step, starting from the
    /// sinusoidal position offsets.
    pub embed2_b: DenseTensor,
    /// `d_img x (n3 d3)`
    pub embed3_w: DenseTensor,
    pub embed3_b: DenseTensor,
    pub lttd: LttdParams,
    /// `d_z`
    pub head_w: DenseTensor,
    /// `1`
    pub head_b: DenseTensor,
}

impl PredictorParams {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let l = &cfg.lttd;
        let m3 = l.n[2] * l.d[2];
        Ok(Self {
            embed1_w: DenseTensor::zeros(vec![cfg.d_img, l.d[0]])?,
            embed1_b: DenseTensor::zeros(vec![l.d[0]])?,
            embed2_w: DenseTensor::zeros(vec![l.d[1]])?,
            embed2_b: DenseTensor::zeros(vec![PAST_STEPS, l.d[1]])?,
            embed3_w: DenseTensor::zeros(vec![cfg.d_img, m3])?,
            embed3_b: DenseTensor::zeros(vec![m3])?,
            lttd: LttdParams::zeros(l)?,
            head_w: DenseTensor::zeros(vec![l.d_z])?,
            head_b: DenseTensor::zeros(vec![1])?,
        })
    }

    /// Fan-scaled uniform weights, embedder biases drawn the same way,
    /// sinusoidal steering position rows and a zero head bias.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        p.visit_mut(&mut |name, t| {
            if name != "head.b" && name != "embed2.b" {
                init_uniform(t, seed, name);
            }
        });
        let d2 = cfg.lttd.d[1];
        for j in 0..PAST_STEPS {
            for (c, v) in position_offset(j, d2).into_iter().enumerate() {
                p.embed2_b.set(&[j, c], v);
            }
        }
        Ok(p)
    }

    pub fn from_flat(cfg: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        if flat.len() != p.num_params() {
            return Err(ModelError::Shape(format!(
                "flat parameter vector has {} entries, model needs {}",
                flat.len(),
                p.num_params()
            )));
        }
        p.load_flat(flat);
        Ok(p)
    }

    pub fn head_bias(&self) -> f64 {
        self.head_b.data()[0]
    }

    pub fn accumulate(&mut self, other: &Self, scale: f64) {
        let flat = other.to_flat();
        let mut pos = 0;
        self.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v += scale * flat[pos];
                pos += 1;
            }
        });
    }
}

impl ParamSet for PredictorParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a DenseTensor)) {
        f("embed1.w", &self.embed1_w);
        f("embed1.b", &self.embed1_b);
        f("embed2.w", &self.embed2_w);
        f("embed2.b", &self.embed2_b);
        f("embed3.w", &self.embed3_w);
        f("embed3.b", &self.embed3_b);
        self.lttd.visit(&mut |name, t| f(&format!("lttd.{name}"), t));
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor)) {
        f("embed1.w", &mut self.embed1_w);
        f("embed1.b", &mut self.embed1_b);
        f("embed2.w", &mut self.embed2_w);
        f("embed2.b", &mut self.embed2_b);
        f("embed3.w", &mut self.embed3_w);
        f("embed3.b", &mut self.embed3_b);
        self.lttd.visit_mut(&mut |name, t| f(&format!("lttd.{name}"), t));
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }
}

/// Sinusoidal offset for steering step `step` in a `dim`-wide embedding.
/// Channel pair `m` oscillates `m` times over the window, so the offsets of
/// the five steps are a discrete Fourier basis.
pub fn position_offset(step: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let angle = std::f64::consts::TAU * (c / 2) as f64 * step as f64 / PAST_STEPS as f64;
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn check_sample(cfg: &ModelConfig, sample: &SteeringSample) -> Result<()> {
    if sample.current_image.len() != cfg.d_img || sample.past_frames.dims() != [PAST_STEPS, cfg.d_img] {
        return Err(ModelError::Shape(format!(
            "sample has image width {} and past frames {}, model expects d_img = {}",
            sample.current_image.len(),
            sample.past_frames.shape(),
            cfg.d_img
        )));
    }
    Ok(())
}

/// Raw inputs after the modality mask.
fn masked_inputs<'a>(cfg: &ModelConfig, sample: &'a SteeringSample) -> (Option<&'a DenseTensor>, [f64; PAST_STEPS]) {
    let frames = cfg.mask.past_frames.then_some(&sample.past_frames);
    let steering = if cfg.mask.past_steering { sample.past_steering } else { [0.0; PAST_STEPS] };
    (frames, steering)
}

/// Lifts a sample into the three modality matrices.
pub fn embed(sample: &SteeringSample, params: &PredictorParams, cfg: &ModelConfig) -> Result<ModalityTriple> {
    cfg.validate()?;
    check_sample(cfg, sample)?;
    let l = &cfg.lttd;
    let (frames, steering) = masked_inputs(cfg, sample);

    let (d1, d2, d3, n3) = (l.d[0], l.d[1], l.d[2], l.n[2]);
    let w1 = params.embed1_w.data();
    let b1 = params.embed1_b.data();
    let mut m1 = vec![0.0; PAST_STEPS * d1];
    for i in 0..PAST_STEPS {
        let row = &mut m1[i * d1..(i + 1) * d1];
        row.copy_from_slice(b1);
        if let Some(frames) = frames {
            for (p, &x) in frames.row(i).iter().enumerate() {
                for (c, r) in row.iter_mut().enumerate() {
                    *r += x * w1[p * d1 + c];
                }
            }
        }
    }

    let mut m2 = vec![0.0; PAST_STEPS * d2];
    for (j, &s) in steering.iter().enumerate() {
        for c in 0..d2 {
            m2[j * d2 + c] = s * params.embed2_w.data()[c] + params.embed2_b.get(&[j, c]);
        }
    }

    let w3 = params.embed3_w.data();
    let width = n3 * d3;
    let mut m3 = params.embed3_b.data().to_vec();
    for (p, &x) in sample.current_image.iter().enumerate() {
        for (c, r) in m3.iter_mut().enumerate() {
            *r += x * w3[p * width + c];
        }
    }

    Ok(ModalityTriple::new(
        DenseTensor::new(vec![PAST_STEPS, d1], m1)?,
        DenseTensor::new(vec![PAST_STEPS, d2], m2)?,
        DenseTensor::new(vec![n3, d3], m3)?,
    )?)
}

fn head(params: &PredictorParams, z: &[f64]) -> f64 {
    params.head_w.data().iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + params.head_bias()
}

pub fn predict(params: &PredictorParams, cfg: &ModelConfig, sample: &SteeringSample) -> Result<f64> {
    let inputs = embed(sample, params, cfg)?;
    let (_, z) = lttd::forward(&params.lttd, &inputs, &cfg.lttd)?;
    Ok(head(params, z.values()))
}

pub fn predict_batch(params: &PredictorParams, cfg: &ModelConfig, samples: &[&SteeringSample]) -> Result<Vec<f64>> {
    samples.iter().map(|s| predict(params, cfg, s)).collect()
}

/// Mean squared error over a batch.
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_batch(predictions, targets)?;
    let total: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(total / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
}

pub fn metrics(predictions: &[f64], targets: &[f64]) -> Result<Metrics> {
    let mse = mse_loss(predictions, targets)?;
    let abs: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(Metrics { rmse: mse.sqrt(), mae: abs / predictions.len() as f64 })
}

fn check_batch(predictions: &[f64], targets: &[f64]) -> Result<()> {
    if predictions.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if predictions.len() != targets.len() {
        return Err(ModelError::Shape(format!("{} predictions vs {} targets", predictions.len(), targets.len())));
    }
    Ok(())
}

/// Mean squared error of the batch and its gradient with respect to every
/// parameter. Samples are accumulated in batch order.
pub fn loss_gradient(
    params: &PredictorParams,
    cfg: &ModelConfig,
    batch: &[&SteeringSample],
) -> Result<(f64, PredictorParams)> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let l = &cfg.lttd;
    let (d1, d2, d3, n3) = (l.d[0], l.d[1], l.d[2], l.n[2]);
    let width = n3 * d3;
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads = PredictorParams::zeros(cfg)?;
    let mut loss = 0.0;

    for sample in batch {
        let inputs = embed(sample, params, cfg)?;
        let (_, z, cache) = lttd::forward_with_cache(&params.lttd, &inputs, l)?;
        let pred = head(params, z.values());
        let err = pred - sample.target;
        loss += err * err * inv_b;
        let dpred = 2.0 * err * inv_b;

        for (g, &v) in grads.head_w.data_mut().iter_mut().zip(z.values()) {
            *g += dpred * v;
        }
        grads.head_b.data_mut()[0] += dpred;

        let upstream: Vec<f64> = params.head_w.data().iter().map(|w| dpred * w).collect();
        let g = lttd::backward_with_cache(&params.lttd, &inputs, l, &cache, &upstream)?;
        add_params(&mut grads.lttd, &g.params);

        let (frames, steering) = masked_inputs(cfg, sample);
        let dm1 = g.inputs.m1.data();
        {
            let gw = grads.embed1_w.data_mut();
            if let Some(frames) = frames {
                for i in 0..PAST_STEPS {
                    for (p, &x) in frames.row(i).iter().enumerate() {
                        for c in 0..d1 {
                            gw[p * d1 + c] += x * dm1[i * d1 + c];
                        }
                    }
                }
            }
        }
        let gb = grads.embed1_b.data_mut();
        for i in 0..PAST_STEPS {
            for c in 0..d1 {
                gb[c] += dm1[i * d1 + c];
            }
        }

        let dm2 = g.inputs.m2.data();
        for (j, &s) in steering.iter().enumerate() {
            for c in 0..d2 {
                grads.embed2_w.data_mut()[c] += s * dm2[j * d2 + c];
                grads.embed2_b.data_mut()[j * d2 + c] += dm2[j * d2 + c];
            }
        }

        let dm3 = g.inputs.m3.data();
        {
            let gw = grads.embed3_w.data_mut();
            for (p, &x) in sample.current_image.iter().enumerate() {
                for c in 0..width {
                    gw[p * width + c] += x * dm3[c];
                }
            }
        }
        for (gb, &d) in grads.embed3_b.data_mut().iter_mut().zip(dm3) {
            *gb += d;
        }
    }
    Ok((loss, grads))
}

fn add_params(acc: &mut LttdParams, delta: &LttdParams) {
    let mut deltas = Vec::new();
    delta.visit(&mut |_, t| deltas.push(t));
    let mut it = deltas.into_iter();
    acc.visit_mut(&mut |_, t| {
        let d = it.next().expect("matching parameter layout");
        for (a, b) in t.data_mut().iter_mut().zip(d.data()) {
            *a += b;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lttd::AttentionNorm;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::new(3, [4, 2, 2], 2, 2, 3);
        c.lttd.normalize = AttentionNorm::Softmax;
        c
    }

    fn sample(cfg: &ModelConfig, k: usize) -> SteeringSample {
        let d = cfg.d_img;
        let val = |a: usize| ((a * 7 + k * 13) % 17) as f64 / 8.5 - 1.0;
        SteeringSample {
            sequence: 0,
            current_image: (0..d).map(|c| val(c + 40)).collect(),
            past_frames: DenseTensor::from_fn(vec![PAST_STEPS, d], |ix| val(ix[0] * d + ix[1])).unwrap(),
            past_steering: std::array::from_fn(|j| val(j + 90) * 0.5),
            target: val(123) * 0.5,
        }
    }

    fn zero_sample(cfg: &ModelConfig) -> SteeringSample {
        SteeringSample {
            sequence: 0,
            current_image: vec![0.0; cfg.d_img],
            past_frames: DenseTensor::zeros(vec![PAST_STEPS, cfg.d_img]).unwrap(),
            past_steering: [0.0; PAST_STEPS],
            target: 0.0,
        }
    }

    #[test]
    fn config_requires_five_past_channels() {
        let mut c = cfg();
        c.lttd.n[0] = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_sample_with_zero_biases_embeds_to_zero() {
        let cfg = cfg();
        let mut p = PredictorParams::init(&cfg, 1).unwrap();
        p.embed1_b.data_mut().fill(0.0);
        p.embed2_b.data_mut().fill(0.0);
        p.embed3_b.data_mut().fill(0.0);
        let t = embed(&zero_sample(&cfg), &p, &cfg).unwrap();
        assert_eq!(t.m1.max_abs(), 0.0);
        assert_eq!(t.m2.max_abs(), 0.0);
        assert_eq!(t.m3.max_abs(), 0.0);
    }

    #[test]
    fn identity_embedder_passes_frames_through() {
        let mut cfg = ModelConfig::new(4, [4, 2, 2], 2, 2, 3);
        cfg.lttd.normalize = AttentionNorm::Raw;
        let mut p = PredictorParams::init(&cfg, 1).unwrap();
        p.embed1_w = DenseTensor::identity(4).unwrap();
        p.embed1_b.data_mut().fill(0.0);
        let s = sample(&cfg, 3);
        assert_eq!(embed(&s, &p, &cfg).unwrap().m1, s.past_frames);
    }

    #[test]
    fn zero_head_predicts_bias() {
        let cfg = cfg();
        let mut p = PredictorParams::init(&cfg, 2).unwrap();
        p.head_w.data_mut().fill(0.0);
        p.head_b.data_mut()[0] = 0.3;
        for k in 0..4 {
            assert_eq!(predict(&p, &cfg, &sample(&cfg, k)).unwrap(), 0.3);
        }
    }

    #[test]
    fn zero_sample_raw_attention_predicts_bias() {
        let mut cfg = cfg();
        cfg.lttd.normalize = AttentionNorm::Raw;
        let mut p = PredictorParams::init(&cfg, 2).unwrap();
        p.embed1_b.data_mut().fill(0.0);
        p.embed3_b.data_mut().fill(0.0);
        p.head_b.data_mut()[0] = -0.25;
        assert_eq!(predict(&p, &cfg, &zero_sample(&cfg)).unwrap(), -0.25);
    }

    #[test]
    fn bias_shift_is_exact() {
        let cfg = cfg();
        let p = PredictorParams::init(&cfg, 2).unwrap();
        let mut q = p.clone();
        q.head_b.data_mut()[0] += 0.125;
        for k in 0..3 {
            let s = sample(&cfg, k);
            let a = predict(&p, &cfg, &s).unwrap();
            let b = predict(&q, &cfg, &s).unwrap();
            assert_eq!(b, a + 0.125);
        }
    }

    #[test]
    fn loss_and_metrics_examples() {
        assert_eq!(mse_loss(&[0.2, -0.4], &[0.2, -0.4]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(mse_loss(&[], &[]), Err(ModelError::EmptyBatch)));
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
        let m = metrics(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!((m.rmse, m.mae), (1.0, 1.0));
        let m = metrics(&[0.5], &[0.5]).unwrap();
        assert_eq!((m.rmse, m.mae), (0.0, 0.0));
    }

    #[test]
    fn single_sample_bias_gradient_is_twice_the_error() {
        let cfg = cfg();
        let p = PredictorParams::init(&cfg, 4).unwrap();
        let s = sample(&cfg, 1);
        let pred = predict(&p, &cfg, &s).unwrap();
        let (_, g) = loss_gradient(&p, &cfg, &[&s]).unwrap();
        assert!((g.head_b.data()[0] - 2.0 * (pred - s.target)).abs() < 1e-15);
    }

    #[test]
    fn zero_head_cuts_gradients_into_the_block() {
        let cfg = cfg();
        let mut p = PredictorParams::init(&cfg, 4).unwrap();
        p.head_w.data_mut().fill(0.0);
        let batch: Vec<SteeringSample> = (0..3).map(|k| sample(&cfg, k)).collect();
        let refs: Vec<&SteeringSample> = batch.iter().collect();
        let (_, g) = loss_gradient(&p, &cfg, &refs).unwrap();
        assert!(g.lttd.to_flat().iter().all(|&v| v == 0.0));
        assert!(g.embed1_w.max_abs() == 0.0 && g.embed3_b.max_abs() == 0.0);
        assert!(g.head_w.max_abs() > 0.0);
    }

    #[test]
    fn fitted_bias_has_vanishing_gradient() {
        let cfg = cfg();
        let mut p = PredictorParams::init(&cfg, 4).unwrap();
        p.head_w.data_mut().fill(0.0);
        p.head_b.data_mut()[0] = 0.4;
        let mut batch: Vec<SteeringSample> = (0..4).map(|k| sample(&cfg, k)).collect();
        for s in &mut batch {
            s.target = 0.4;
        }
        let refs: Vec<&SteeringSample> = batch.iter().collect();
        let (loss, g) = loss_gradient(&p, &cfg, &refs).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.to_flat().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn masked_modalities_do_not_leak() {
        let mut cfg = cfg();
        cfg.mask = ModalityMask::CURRENT_ONLY;
        let p = PredictorParams::init(&cfg, 4).unwrap();
        let a = sample(&cfg, 1);
        let mut b = a.clone();
        b.past_frames = b.past_frames.scale(-3.0);
        b.past_steering = [0.9; PAST_STEPS];
        assert_eq!(predict(&p, &cfg, &a).unwrap(), predict(&p, &cfg, &b).unwrap());
    }
}

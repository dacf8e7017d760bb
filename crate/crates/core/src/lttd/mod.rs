//! Decomposed trilinear attention over three modalities.
//!
//! The block fuses past-frame channels `M1`, steering-series channels `M2`
//! and current-image channels `M3` into a joint vector `z`. The full
//! interaction tensor is never stored: the triplet attention tensor is held
//! as `R` slices of Tucker cores with factor matrices, and the per-triplet
//! interaction collapses to a Hadamard product of three projections.
//!
//! The brute-force references the decomposition is checked against live in
//! [`oracle`].

mod backward;
mod bilinear;
mod forward;
pub mod oracle;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamSet;
use crate::rng;
use crate::tensor::{DenseTensor, TensorError};

pub use backward::{backward, backward_with_cache, LttdGrads};
pub use bilinear::{bilinear_attention_map, bilinear_joint_matrix, bilinear_joint_sum, BilinearParams};
pub use forward::{attention_map, forward, forward_with_cache, joint_representation, ForwardCache};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LttdError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LttdError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LttdError::Shape(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionNorm {
    /// Raw trilinear weights.
    #[default]
    Raw,
    /// Softmax over all `n1*n2*n3` logits.
    Softmax,
}

impl std::str::FromStr for AttentionNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Self::Raw),
            "softmax" => Ok(Self::Softmax),
            other => Err(format!("unknown attention normalization `{other}`")),
        }
    }
}

impl std::fmt::Display for AttentionNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Softmax => "softmax",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LttdConfig {
    pub n: [usize; 3],
    pub d: [usize; 3],
    pub r_slices: usize,
    pub d_z: usize,
    pub normalize: AttentionNorm,
}

impl LttdConfig {
    pub fn new(n: [usize; 3], d: [usize; 3], r_slices: usize, d_z: usize) -> Self {
        Self { n, d, r_slices, d_z, normalize: AttentionNorm::Raw }
    }

    pub fn with_norm(mut self, normalize: AttentionNorm) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n.contains(&0) || self.d.contains(&0) {
            return Err(LttdError::Config(format!(
                "channel counts {:?} and dims {:?} must be positive",
                self.n, self.d
            )));
        }
        if self.d_z == 0 {
            return Err(LttdError::Config("d_z must be at least 1".into()));
        }
        if self.r_slices == 0 {
            return Err(LttdError::Config("r_slices must be at least 1".into()));
        }
        if let Some(d) = self.d.iter().find(|&&d| d % self.r_slices != 0) {
            return Err(LttdError::Config(format!("r_slices = {} does not divide channel dim {d}", self.r_slices)));
        }
        Ok(())
    }

    /// Per-slice factor widths `d_l / R`.
    pub fn slice_dims(&self) -> [usize; 3] {
        self.d.map(|d| d / self.r_slices)
    }
}

/// The three modality inputs, each `n_l x d_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTriple {
    pub m1: DenseTensor,
    pub m2: DenseTensor,
    pub m3: DenseTensor,
}

impl ModalityTriple {
    pub fn new(m1: DenseTensor, m2: DenseTensor, m3: DenseTensor) -> Result<Self> {
        for (l, m) in [&m1, &m2, &m3].into_iter().enumerate() {
            if !m.is_matrix() {
                return shape_err(format!("modality {} must be a matrix, got {}", l + 1, m.shape()));
            }
        }
        Ok(Self { m1, m2, m3 })
    }

    pub fn zeros(cfg: &LttdConfig) -> Result<Self> {
        Ok(Self {
            m1: DenseTensor::zeros(vec![cfg.n[0], cfg.d[0]])?,
            m2: DenseTensor::zeros(vec![cfg.n[1], cfg.d[1]])?,
            m3: DenseTensor::zeros(vec![cfg.n[2], cfg.d[2]])?,
        })
    }

    pub fn modalities(&self) -> [&DenseTensor; 3] {
        [&self.m1, &self.m2, &self.m3]
    }

    pub fn check(&self, cfg: &LttdConfig) -> Result<()> {
        for (l, m) in self.modalities().into_iter().enumerate() {
            if m.dims() != [cfg.n[l], cfg.d[l]] {
                return shape_err(format!(
                    "modality {} is {}, config expects [{}x{}]",
                    l + 1,
                    m.shape(),
                    cfg.n[l],
                    cfg.d[l]
                ));
            }
        }
        Ok(())
    }
}

/// Learnable factors of the block.
#[derive(Debug, Clone, PartialEq)]
pub struct LttdParams {
    /// `w[l][r]` is `d_l x (d_l / R)`.
    pub w: [Vec<DenseTensor>; 3],
    /// Tucker cores, each `(d1/R) x (d2/R) x (d3/R)`.
    pub cores: Vec<DenseTensor>,
    /// Joint projections, `wz[l]` is `d_l x d_z`.
    pub wz: [DenseTensor; 3],
}

impl LttdParams {
    pub fn zeros(cfg: &LttdConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.slice_dims();
        let r = cfg.r_slices;
        let w = std::array::from_fn(|l| {
            (0..r).map(|_| DenseTensor::zeros(vec![cfg.d[l], s[l]])).collect::<std::result::Result<Vec<_>, _>>()
        });
        let [w1, w2, w3] = w;
        let cores = (0..r).map(|_| DenseTensor::zeros(s.to_vec())).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            w: [w1?, w2?, w3?],
            cores,
            wz: [
                DenseTensor::zeros(vec![cfg.d[0], cfg.d_z])?,
                DenseTensor::zeros(vec![cfg.d[1], cfg.d_z])?,
                DenseTensor::zeros(vec![cfg.d[2], cfg.d_z])?,
            ],
        })
    }

    /// Fan-scaled uniform initialization from keyed streams; the value of an
    /// entry depends only on `(seed, tensor name, flat index)`.
    pub fn init(cfg: &LttdConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        p.visit_mut(&mut |name, t| init_uniform(t, seed, name));
        Ok(p)
    }

    pub fn config_check(&self, cfg: &LttdConfig) -> Result<()> {
        let s = cfg.slice_dims();
        let r = cfg.r_slices;
        let factors_ok = (0..3).all(|l| self.w[l].len() == r && self.w[l].iter().all(|t| t.dims() == [cfg.d[l], s[l]]));
        let cores_ok = self.cores.len() == r && self.cores.iter().all(|t| t.dims() == s);
        let proj_ok = (0..3).all(|l| self.wz[l].dims() == [cfg.d[l], cfg.d_z]);
        if factors_ok && cores_ok && proj_ok {
            Ok(())
        } else {
            shape_err("parameter shapes do not match config")
        }
    }
}

impl ParamSet for LttdParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a DenseTensor)) {
        for (l, ws) in self.w.iter().enumerate() {
            for (r, t) in ws.iter().enumerate() {
                f(&format!("w{}.{r}", l + 1), t);
            }
        }
        for (r, t) in self.cores.iter().enumerate() {
            f(&format!("core.{r}"), t);
        }
        for (l, t) in self.wz.iter().enumerate() {
            f(&format!("wz{}", l + 1), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor)) {
        for (l, ws) in self.w.iter_mut().enumerate() {
            for (r, t) in ws.iter_mut().enumerate() {
                f(&format!("w{}.{r}", l + 1), t);
            }
        }
        for (r, t) in self.cores.iter_mut().enumerate() {
            f(&format!("core.{r}"), t);
        }
        for (l, t) in self.wz.iter_mut().enumerate() {
            f(&format!("wz{}", l + 1), t);
        }
    }
}

/// `(fan_in, fan_out)`: rows/cols for matrices; for higher-order tensors the
/// last mode is the output and the rest are the input.
pub fn fans(dims: &[usize]) -> (usize, usize) {
    match dims {
        [] => (1, 1),
        [n] => (*n, 1),
        [rest @ .., last] => (rest.iter().product(), *last),
    }
}

pub fn init_bound(dims: &[usize]) -> f64 {
    let (fan_in, fan_out) = fans(dims);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn init_uniform(t: &mut DenseTensor, seed: u64, name: &str) {
    let bound = init_bound(t.dims());
    let mut stream = rng::stream(seed, name, &[]);
    for v in t.data_mut() {
        *v = stream.random_range(-bound..=bound);
    }
}

/// Triplet weights, `n1 x n2 x n3`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(pub DenseTensor);

impl AttentionMap {
    pub fn tensor(&self) -> &DenseTensor {
        &self.0
    }
}

/// Fused `d_z` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRepresentation(pub DenseTensor);

impl JointRepresentation {
    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCount {
    pub full_tensor_params: u64,
    pub decomposed_params: u64,
    pub decomposition_rate: f64,
}

/// Parameters of the full interaction tensor versus the decomposed block.
pub fn param_count(cfg: &LttdConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let overflow = || LttdError::Config("parameter count overflows 64 bits".into());
    let mul = |a: u64, b: u64| a.checked_mul(b).ok_or_else(overflow);
    let add = |a: u64, b: u64| a.checked_add(b).ok_or_else(overflow);
    let n = cfg.n.map(|x| x as u64);
    let d = cfg.d.map(|x| x as u64);
    let r = cfg.r_slices as u64;
    let dz = cfg.d_z as u64;

    let mut full = dz;
    for l in 0..3 {
        full = mul(full, mul(n[l], d[l])?)?;
    }

    let mut factors = 0;
    for &dl in &d {
        factors = add(factors, mul(dl, dl / r)?)?;
    }
    factors = mul(factors, r)?;
    let core = mul(r, (d[0] / r) * (d[1] / r) * (d[2] / r))?;
    let proj = mul(d[0] + d[1] + d[2], dz)?;
    let decomposed = add(add(factors, core)?, proj)?;

    Ok(ParamCount {
        full_tensor_params: full,
        decomposed_params: decomposed,
        decomposition_rate: full as f64 / decomposed as f64,
    })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Every admissible slicing parameter: the divisors of `gcd(d1, d2, d3)`.
pub fn admissible_slices(d: [usize; 3]) -> Vec<usize> {
    let g = gcd(gcd(d[0], d[1]), d[2]);
    (1..=g).filter(|r| g.is_multiple_of(*r)).collect()
}

pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

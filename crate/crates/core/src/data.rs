//! Synthetic temporal driving data, silo sharding and a CSV dump format.
//!
//! Each sequence has a smooth steering trajectory. The frame observed at
//! time `t` is a fixed linear map of `[angle(t), angle(t + 1)]` plus noise,
//! so every frame carries one step of lookahead and past frames hold real
//! information about the current target.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{SteeringSample, PAST_STEPS};
use crate::rng;
use crate::tensor::DenseTensor;

/// Past frames plus the current one.
pub const WINDOW: usize = PAST_STEPS + 1;
const SINUSOIDS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("cannot split {samples} samples ({units} units) across {silos} silos")]
    TooManySilos { samples: usize, units: usize, silos: usize },
    #[error("dataset csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub d_img: usize,
    pub noise_std: f64,
    /// Scale of a constant per-sequence offset added to every frame.
    pub nonstationarity: f64,
    /// Standard deviation of the frame map entries. Lower values make the
    /// current image alone a noisier read of the angle.
    pub frame_gain: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_sequences: 44,
            seq_len: 40,
            d_img: 8,
            noise_std: 0.05,
            nonstationarity: 0.0,
            frame_gain: 0.25,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < WINDOW {
            return Err(DataError::Config(format!("seq_len must be at least {WINDOW}, got {}", self.seq_len)));
        }
        if self.n_sequences == 0 || self.d_img < 2 {
            return Err(DataError::Config("need at least one sequence and d_img >= 2".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::Config(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        if !(self.nonstationarity >= 0.0 && self.nonstationarity.is_finite()) {
            return Err(DataError::Config(format!(
                "nonstationarity must be finite and >= 0, got {}",
                self.nonstationarity
            )));
        }
        if !(self.frame_gain > 0.0 && self.frame_gain.is_finite()) {
            return Err(DataError::Config(format!("frame_gain must be finite and > 0, got {}", self.frame_gain)));
        }
        Ok(())
    }

    pub fn samples_per_sequence(&self) -> usize {
        self.seq_len + 1 - WINDOW
    }
}

/// `d_img x 2` map from `[angle(t), angle(t + 1)]` to frame features.
pub fn frame_map(cfg: &SyntheticConfig) -> Vec<[f64; 2]> {
    let mut s = rng::stream(cfg.seed, "data.frame_map", &[]);
    let normal = Normal::new(0.0, cfg.frame_gain).expect("validated gain");
    (0..cfg.d_img).map(|_| [normal.sample(&mut s), normal.sample(&mut s)]).collect()
}

/// Angles `0..=seq_len` of one sequence.
pub fn trajectory(cfg: &SyntheticConfig, split: u64, sequence: usize) -> Vec<f64> {
    let mut s = rng::stream(cfg.seed, "data.trajectory", &[split, sequence as u64]);
    let waves: Vec<(f64, f64, f64)> = (0..SINUSOIDS)
        .map(|_| {
            let amp = s.random_range(0.1..0.3);
            let freq = s.random_range(0.05..0.4);
            let phase = s.random_range(0.0..TAU);
            (amp, freq, phase)
        })
        .collect();
    (0..=cfg.seq_len)
        .map(|t| {
            let a: f64 = waves.iter().map(|&(amp, f, p)| amp * (f * t as f64 + p).sin()).sum();
            a.clamp(-1.0, 1.0)
        })
        .collect()
}

fn generate_split(cfg: &SyntheticConfig, split: u64, n_sequences: usize) -> Result<Vec<SteeringSample>> {
    cfg.validate()?;
    let map = frame_map(cfg);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| DataError::Config(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let d = cfg.d_img;
    let mut out = Vec::with_capacity(n_sequences * cfg.samples_per_sequence());
    for seq in 0..n_sequences {
        let angles = trajectory(cfg, split, seq);
        let mut s = rng::stream(cfg.seed, "data.frames", &[split, seq as u64]);
        let drift: Vec<f64> = (0..d).map(|_| cfg.nonstationarity * unit.sample(&mut s)).collect();
        let frames: Vec<Vec<f64>> = (0..cfg.seq_len)
            .map(|t| {
                (0..d)
                    .map(|p| map[p][0] * angles[t] + map[p][1] * angles[t + 1] + drift[p] + noise.sample(&mut s))
                    .collect()
            })
            .collect();
        for t in PAST_STEPS..cfg.seq_len {
            let past: Vec<f64> = frames[t - PAST_STEPS..t].concat();
            out.push(SteeringSample {
                sequence: seq,
                current_image: frames[t].clone(),
                past_frames: DenseTensor::new(vec![PAST_STEPS, d], past).expect("finite frames"),
                past_steering: std::array::from_fn(|j| angles[t - PAST_STEPS + j]),
                target: angles[t],
            });
        }
    }
    Ok(out)
}

/// Training samples: every window of every sequence, in sequence order.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<SteeringSample>> {
    generate_split(cfg, 0, cfg.n_sequences)
}

/// Fresh sequences seen through the same frame map, for evaluation. Each
/// `eval_seed` gives a different set of sequences.
pub fn generate_held_out(cfg: &SyntheticConfig, n_sequences: usize, eval_seed: u64) -> Result<Vec<SteeringSample>> {
    let split = eval_seed.checked_add(1).ok_or_else(|| DataError::Config("eval seed out of range".into()))?;
    generate_split(cfg, split, n_sequences)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub silo_id: usize,
    pub samples: Vec<SteeringSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardStrategy {
    Iid,
    BySequence,
}

impl std::str::FromStr for ShardStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "iid" => Ok(Self::Iid),
            "by_sequence" => Ok(Self::BySequence),
            other => Err(format!("unknown shard strategy {other:?} (expected iid or by_sequence)")),
        }
    }
}

impl std::fmt::Display for ShardStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Iid => "iid",
            Self::BySequence => "by_sequence",
        })
    }
}

/// Partitions `samples` into `n_silos` non-empty shards.
pub fn shard(samples: &[SteeringSample], n_silos: usize, strategy: ShardStrategy, seed: u64) -> Result<Vec<Shard>> {
    let mut s = rng::stream(seed, "data.shard", &[]);
    // Units are single samples (iid) or whole sequences.
    let mut units: Vec<Vec<usize>> = match strategy {
        ShardStrategy::Iid => (0..samples.len()).map(|i| vec![i]).collect(),
        ShardStrategy::BySequence => {
            let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
            for (i, sample) in samples.iter().enumerate() {
                match groups.iter_mut().find(|(seq, _)| *seq == sample.sequence) {
                    Some((_, g)) => g.push(i),
                    None => groups.push((sample.sequence, vec![i])),
                }
            }
            groups.into_iter().map(|(_, g)| g).collect()
        }
    };
    if n_silos == 0 || units.len() < n_silos {
        return Err(DataError::TooManySilos { samples: samples.len(), units: units.len(), silos: n_silos });
    }
    units.shuffle(&mut s);
    let mut shards: Vec<Shard> = (0..n_silos).map(|silo_id| Shard { silo_id, samples: Vec::new() }).collect();
    for (u, unit) in units.into_iter().enumerate() {
        shards[u % n_silos].samples.extend(unit.into_iter().map(|i| samples[i].clone()));
    }
    Ok(shards)
}

/// Column order of the dataset dump.
pub fn csv_header(d_img: usize) -> String {
    let mut cols = vec!["silo".to_string(), "sequence".to_string(), "target".to_string()];
    cols.extend((0..PAST_STEPS).map(|j| format!("steer_{j}")));
    cols.extend((0..d_img).map(|p| format!("cur_{p}")));
    for f in 0..PAST_STEPS {
        cols.extend((0..d_img).map(|p| format!("past{f}_{p}")));
    }
    cols.join(",")
}

/// One row per sample: silo, sequence, target, past steering (oldest first),
/// current frame, then past frames oldest first. Floats use the shortest
/// representation that round-trips.
pub fn dump_csv(shards: &[Shard]) -> String {
    let d_img = shards.iter().flat_map(|s| s.samples.first()).map(|s| s.d_img()).next().unwrap_or(0);
    let mut out = csv_header(d_img);
    out.push('\n');
    for shard in shards {
        for s in &shard.samples {
            write!(out, "{},{},{}", shard.silo_id, s.sequence, s.target).unwrap();
            let values = s.past_steering.iter().chain(&s.current_image).chain(s.past_frames.data());
            for v in values {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn load_csv(text: &str) -> Result<Vec<Shard>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Csv { line: 1, msg: "missing header".into() })?;
    let n_cols = header.split(',').count();
    let fixed = 3 + PAST_STEPS;
    let d_img = (n_cols.saturating_sub(fixed)) / WINDOW;
    if d_img == 0 || header != csv_header(d_img) {
        return Err(DataError::Csv { line: 1, msg: "unrecognized header".into() });
    }
    let mut shards: Vec<Shard> = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Csv { line: idx + 1, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_cols {
            return Err(err(format!("expected {n_cols} fields, found {}", fields.len())));
        }
        let silo: usize = fields[0].parse().map_err(|e| err(format!("silo: {e}")))?;
        let sequence: usize = fields[1].parse().map_err(|e| err(format!("sequence: {e}")))?;
        let nums = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| err("non-numeric or non-finite value".into()))?;
        let steer_end = 1 + PAST_STEPS;
        let cur_end = steer_end + d_img;
        let sample = SteeringSample {
            sequence,
            target: nums[0],
            past_steering: std::array::from_fn(|j| nums[1 + j]),
            current_image: nums[steer_end..cur_end].to_vec(),
            past_frames: DenseTensor::new(vec![PAST_STEPS, d_img], nums[cur_end..].to_vec())
                .map_err(|e| err(e.to_string()))?,
        };
        match shards.iter_mut().find(|s| s.silo_id == silo) {
            Some(s) => s.samples.push(sample),
            None => shards.push(Shard { silo_id: silo, samples: vec![sample] }),
        }
    }
    shards.sort_by_key(|s| s.silo_id);
    Ok(shards)
}

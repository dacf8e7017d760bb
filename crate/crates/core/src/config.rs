//! Run configuration: a sectioned `key = value` text format.
//!
//! ```text
//! [model]
//! d1 = 8
//! attention = softmax
//!
//! [train]
//! mode = dfl
//! rounds = 300
//! ```
//! `#` starts a comment. Unknown sections or keys are errors, missing keys
//! keep their defaults. [`RunConfig::to_text`] writes every key, and parsing
//! that text gives back an equal config: floats are written in their
//! shortest round-trip form.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ShardStrategy, SyntheticConfig};
use crate::federated::{Optimizer, StepSchedule, TrainConfig};
use crate::lttd::{AttentionNorm, LttdConfig};
use crate::model::{ModalityMask, ModelConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub lttd: LttdConfig,
    pub mask: ModalityMask,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub synthetic: SyntheticConfig,
    pub held_out_sequences: usize,
    /// Selects which held-out sequences are drawn; the frame map stays fixed.
    pub eval_seed: u64,
    pub shard: ShardStrategy,
    pub shard_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainConfig,
    /// Topology file, relative paths resolved against the config file's
    /// directory. Unused in `cll` mode.
    pub topology: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        let model = ModelConfig::new(synthetic.d_img, [8, 8, 8], 4, 2, 16);
        Self {
            model: ModelSection {
                lttd: model.lttd.with_norm(AttentionNorm::Softmax),
                mask: ModalityMask::default(),
                init_seed: 11,
            },
            data: DataSection {
                synthetic,
                held_out_sequences: 22,
                eval_seed: 0,
                shard: ShardStrategy::Iid,
                shard_seed: 3,
            },
            train: TrainConfig {
                batch_size: 32,
                step: StepSchedule::Constant(0.003),
                optimizer: Optimizer::RmsProp { decay: 0.9, eps: 1e-8 },
                ..TrainConfig::default()
            },
            topology: "../topologies/gaia.topo".into(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { d_img: self.data.synthetic.d_img, lttd: self.model.lttd.clone(), mask: self.model.mask }
    }

    /// Checks the block, model, data and training sections.
    pub fn validate(&self) -> Result<()> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model_config().validate().map_err(|e| inv(&e))?;
        self.data.synthetic.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        if self.data.held_out_sequences == 0 {
            return Err(ConfigError::Invalid("held_out_sequences must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "model" | "data" | "train" | "topology") {
                    return Err(ConfigError::Parse { line: line_no, msg: format!("unknown section [{section}]") });
                }
                continue;
            }
            let (key, value) = line.split_once('=').map(|(k, v)| (k.trim(), v.trim())).ok_or_else(|| {
                ConfigError::Parse { line: line_no, msg: format!("expected key = value, got {line:?}") }
            })?;
            cfg.set(&section, key, value).map_err(|msg| ConfigError::Parse { line: line_no, msg })?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{key}: {e}"))
        }
        let l = &mut self.model.lttd;
        let s = &mut self.data.synthetic;
        let t = &mut self.train;
        match (section, key) {
            ("model", "n1") => l.n[0] = num(key, value)?,
            ("model", "n2") => l.n[1] = num(key, value)?,
            ("model", "n3") => l.n[2] = num(key, value)?,
            ("model", "d1") => l.d[0] = num(key, value)?,
            ("model", "d2") => l.d[1] = num(key, value)?,
            ("model", "d3") => l.d[2] = num(key, value)?,
            ("model", "r_slices") => l.r_slices = num(key, value)?,
            ("model", "d_z") => l.d_z = num(key, value)?,
            ("model", "attention") => l.normalize = value.parse()?,
            ("model", "inputs") => {
                self.model.mask = match value {
                    "all" => ModalityMask::default(),
                    "current_only" => ModalityMask::CURRENT_ONLY,
                    other => return Err(format!("inputs: expected all or current_only, got {other:?}")),
                }
            }
            ("model", "init_seed") => self.model.init_seed = num(key, value)?,
            ("data", "n_sequences") => s.n_sequences = num(key, value)?,
            ("data", "seq_len") => s.seq_len = num(key, value)?,
            ("data", "d_img") => s.d_img = num(key, value)?,
            ("data", "noise_std") => s.noise_std = num(key, value)?,
            ("data", "nonstationarity") => s.nonstationarity = num(key, value)?,
            ("data", "frame_gain") => s.frame_gain = num(key, value)?,
            ("data", "seed") => s.seed = num(key, value)?,
            ("data", "held_out_sequences") => self.data.held_out_sequences = num(key, value)?,
            ("data", "eval_seed") => self.data.eval_seed = num(key, value)?,
            ("data", "shard") => self.data.shard = value.parse()?,
            ("data", "shard_seed") => self.data.shard_seed = num(key, value)?,
            ("train", "mode") => t.mode = value.parse()?,
            ("train", "u") => t.u = num(key, value)?,
            ("train", "batch_size") => t.batch_size = num(key, value)?,
            ("train", "step") => {
                let alpha = t.step.base();
                t.step = match value {
                    "constant" => StepSchedule::Constant(alpha),
                    "inv_sqrt" => StepSchedule::InvSqrt(alpha),
                    other => return Err(format!("step: expected constant or inv_sqrt, got {other:?}")),
                }
            }
            ("train", "alpha") => {
                let a = num(key, value)?;
                t.step = match t.step {
                    StepSchedule::Constant(_) => StepSchedule::Constant(a),
                    StepSchedule::InvSqrt(_) => StepSchedule::InvSqrt(a),
                }
            }
            ("train", "optimizer") => {
                t.optimizer = match value {
                    "sgd" => Optimizer::Sgd,
                    "rmsprop" => match t.optimizer {
                        Optimizer::RmsProp { .. } => t.optimizer,
                        Optimizer::Sgd => Optimizer::RmsProp { decay: 0.9, eps: 1e-8 },
                    },
                    other => return Err(format!("optimizer: expected sgd or rmsprop, got {other:?}")),
                }
            }
            ("train", "rmsprop_decay") | ("train", "rmsprop_eps") => {
                let v: f64 = num(key, value)?;
                let Optimizer::RmsProp { decay, eps } = &mut t.optimizer else {
                    return Err(format!("{key} requires optimizer = rmsprop earlier in the section"));
                };
                if key == "rmsprop_decay" {
                    *decay = v;
                } else {
                    *eps = v;
                }
            }
            ("train", "rounds") => t.rounds = num(key, value)?,
            ("train", "seed") => t.seed = num(key, value)?,
            ("train", "clip_norm") => t.clip_norm = if value == "none" { None } else { Some(num(key, value)?) },
            ("train", "eval_every") => t.eval_every = num(key, value)?,
            ("train", "participation") => {
                t.participation = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|f| match f.trim() {
                            "1" => Ok(true),
                            "0" => Ok(false),
                            other => Err(format!("participation: expected 0 or 1, got {other:?}")),
                        })
                        .collect::<std::result::Result<_, _>>()?
                }
            }
            ("topology", "file") => self.topology = value.to_string(),
            ("", _) => return Err(format!("key {key:?} outside of a section")),
            _ => return Err(format!("unknown key {key:?} in [{section}]")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let l = &self.model.lttd;
        let s = &self.data.synthetic;
        let t = &self.train;
        let mut out = String::new();
        let inputs = if self.model.mask == ModalityMask::CURRENT_ONLY { "current_only" } else { "all" };
        writeln!(out, "[model]").unwrap();
        for (k, v) in [("n1", l.n[0]), ("n2", l.n[1]), ("n3", l.n[2]), ("d1", l.d[0]), ("d2", l.d[1]), ("d3", l.d[2])] {
            writeln!(out, "{k} = {v}").unwrap();
        }
        writeln!(out, "r_slices = {}\nd_z = {}\nattention = {}", l.r_slices, l.d_z, l.normalize).unwrap();
        writeln!(out, "inputs = {inputs}\ninit_seed = {}", self.model.init_seed).unwrap();

        writeln!(out, "\n[data]").unwrap();
        writeln!(out, "n_sequences = {}\nseq_len = {}\nd_img = {}", s.n_sequences, s.seq_len, s.d_img).unwrap();
        writeln!(out, "noise_std = {}\nnonstationarity = {}", s.noise_std, s.nonstationarity).unwrap();
        writeln!(out, "frame_gain = {}\nseed = {}", s.frame_gain, s.seed).unwrap();
        writeln!(out, "held_out_sequences = {}\neval_seed = {}", self.data.held_out_sequences, self.data.eval_seed)
            .unwrap();
        writeln!(out, "shard = {}\nshard_seed = {}", self.data.shard, self.data.shard_seed).unwrap();

        writeln!(out, "\n[train]").unwrap();
        writeln!(out, "mode = {}\nu = {}\nbatch_size = {}", t.mode, t.u, t.batch_size).unwrap();
        let step = match t.step {
            StepSchedule::Constant(_) => "constant",
            StepSchedule::InvSqrt(_) => "inv_sqrt",
        };
        writeln!(out, "step = {step}\nalpha = {}", t.step.base()).unwrap();
        match t.optimizer {
            Optimizer::Sgd => writeln!(out, "optimizer = sgd").unwrap(),
            Optimizer::RmsProp { decay, eps } => {
                writeln!(out, "optimizer = rmsprop\nrmsprop_decay = {decay}\nrmsprop_eps = {eps}").unwrap()
            }
        }
        writeln!(out, "rounds = {}\nseed = {}", t.rounds, t.seed).unwrap();
        match t.clip_norm {
            Some(c) => writeln!(out, "clip_norm = {c}").unwrap(),
            None => writeln!(out, "clip_norm = none").unwrap(),
        }
        writeln!(out, "eval_every = {}", t.eval_every).unwrap();
        let mask: Vec<&str> = t.participation.iter().map(|&p| if p { "1" } else { "0" }).collect();
        writeln!(out, "participation = {}", mask.join(",")).unwrap();

        writeln!(out, "\n[topology]\nfile = {}", self.topology).unwrap();
        out
    }
}

impl FromStr for RunConfig {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federated::Mode;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn edited_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.step = StepSchedule::InvSqrt(0.1 + 0.2);
        cfg.train.optimizer = Optimizer::RmsProp { decay: 0.95, eps: 1e-7 };
        cfg.train.clip_norm = None;
        cfg.train.participation = vec![true, false, true];
        cfg.data.synthetic.noise_std = 1.0 / 3.0;
        cfg.model.mask = ModalityMask::CURRENT_ONLY;
        cfg.train.mode = Mode::Sfl;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = RunConfig::parse("[model]\nd1 = 8\nbogus = 1\n").unwrap_err();
        assert_eq!(e, ConfigError::Parse { line: 3, msg: "unknown key \"bogus\" in [model]".into() });
        assert!(matches!(RunConfig::parse("d1 = 8"), Err(ConfigError::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("[nope]"), Err(ConfigError::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("[model]\nd1 = x"), Err(ConfigError::Parse { line: 2, .. })));
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = RunConfig::parse("# toy\n[model]\nn1 = 1\n").unwrap();
        assert_eq!(cfg.model.lttd.n, [1, 5, 4]);
        assert_eq!(cfg.train, RunConfig::default().train);
    }
}

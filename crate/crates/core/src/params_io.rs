//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | `b"LTTDPARM"` |
//! | version | `u32` (= 1) |
//! | config length, config text | `u32`, UTF-8 run config |
//! | tensor count | `u32` |
//! | per tensor: name length, name, ndim, dims | `u32`, UTF-8, `u32`, `u64 * ndim` |
//! | data | `f64` LE for every tensor, in table order |
//!
//! The embedded run config fixes the model architecture; the shape table
//! must match it exactly. Decoding errors report the byte offset at which
//! the problem was found.

use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::model::PredictorParams;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"LTTDPARM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsIoError {
    #[error("params file, byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ParamsIoError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamsFile {
    pub config: RunConfig,
    pub params: PredictorParams,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("field fits in u32").to_le_bytes());
}

pub fn encode(config: &RunConfig, params: &PredictorParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    let table = params.shape_table();
    put_u32(&mut out, table.len());
    for (name, dims) in &table {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, dims.len());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(ParamsIoError::Format { offset: self.pos, msg: msg.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn str(&mut self, len: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let b = self.take(len, what)?;
        std::str::from_utf8(b).map_err(|e| ParamsIoError::Format { offset: start, msg: format!("{what}: {e}") })
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamsFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, not a parameter file");
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}, expected {VERSION}"));
    }
    let len = r.u32("config length")?;
    let text = r.str(len, "config text")?;
    let config = RunConfig::parse(text)?;
    let mut params = PredictorParams::zeros(&config.model_config()).map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let expected = params.shape_table();
    let count_at = r.pos;
    let count = r.u32("tensor count")?;
    if count != expected.len() {
        r.pos = count_at;
        return r.fail(format!("{count} tensors in table, config implies {}", expected.len()));
    }
    for (name, dims) in &expected {
        let entry_at = r.pos;
        let name_len = r.u32("tensor name length")?;
        let got = r.str(name_len, "tensor name")?;
        if got != name {
            r.pos = entry_at;
            return r.fail(format!("tensor {got:?} where {name:?} was expected"));
        }
        let ndim = r.u32("ndim")?;
        let dims_at = r.pos;
        let mut got_dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            got_dims.push(r.u64("dimension")?);
        }
        if got_dims.iter().map(|&d| d as usize).ne(dims.iter().copied()) {
            r.pos = dims_at;
            return r.fail(format!("tensor {name}: shape {got_dims:?}, config implies {dims:?}"));
        }
    }
    let n = params.num_params();
    let raw = r.take(n * 8, "parameter data")?;
    let flat: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    params.load_flat(&flat);
    Ok(ParamsFile { config, params })
}

pub fn write_params(path: &Path, config: &RunConfig, params: &PredictorParams) -> Result<()> {
    std::fs::write(path, encode(config, params)).map_err(|e| ParamsIoError::Io(format!("{}: {e}", path.display())))
}

pub fn read_params(path: &Path) -> Result<ParamsFile> {
    let bytes = std::fs::read(path).map_err(|e| ParamsIoError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (RunConfig, PredictorParams) {
        let cfg = RunConfig::default();
        let p = PredictorParams::init(&cfg.model_config(), 5).unwrap();
        (cfg, p)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, p) = sample();
        let back = decode(&encode(&cfg, &p)).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(
            back.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn errors_report_offsets() {
        let (cfg, p) = sample();
        let bytes = encode(&cfg, &p);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(ParamsIoError::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(ParamsIoError::Format { offset: 8, .. })));

        let short = &bytes[..bytes.len() - 3];
        let Err(ParamsIoError::Format { offset, .. }) = decode(short) else { panic!("truncation accepted") };
        assert!(offset > 16 && offset < bytes.len());

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(ParamsIoError::Format { offset, .. }) if offset == bytes.len()));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (cfg, _) = sample();
        let mut other = cfg.clone();
        other.model.lttd.d_z += 1;
        let p = PredictorParams::init(&other.model_config(), 5).unwrap();
        // config says one architecture, table another
        let mut bytes = encode(&other, &p);
        let text_other = other.to_text();
        let text = cfg.to_text();
        assert_eq!(text.len(), text_other.len());
        bytes[16..16 + text.len()].copy_from_slice(text.as_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, ParamsIoError::Format { offset, .. } if offset > 16 + text.len()), "{err}");
    }
}

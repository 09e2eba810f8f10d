//! SMAW weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SMAW" | u32 version (1) | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | rank x u32 dims | f32 payload, row-major
//! u32 CRC32 (IEEE) of every preceding byte
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::network::{ModelConfig, PositionEncoding};
use super::{SEQ_LEN, VOCAB};

pub const MAGIC: &[u8; 4] = b"SMAW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SmawError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:02x?}, expected \"SMAW\"")]
    BadMagic(Vec<u8>),
    #[error("unsupported SMAW version {0}")]
    BadVersion(u32),
    #[error("truncated file: {what} at offset {offset} needs {expected} bytes, {available} available")]
    Truncated {
        what: &'static str,
        offset: usize,
        expected: usize,
        available: usize,
    },
    #[error("tensor {index}: {msg}")]
    BadTensor { index: usize, msg: String },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after checksum")]
    Trailing(usize),
}

/// A named row-major f32 tensor. Equality compares bit patterns.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.dims == other.dims
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Ordered set of named tensors as stored in a weight file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValueModelWeights {
    pub tensors: Vec<Tensor>,
}

impl ValueModelWeights {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Random weights with the tensor layout expected by [`super::ValueModel`].
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut tensors = Vec::new();
        let mut push = |name: String, dims: &[usize], data: Vec<f32>| {
            tensors.push(Tensor {
                name,
                dims: dims.iter().map(|&x| x as u32).collect(),
                data,
            })
        };
        let normal = |n: usize, std: f64, mean: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
            let dist = Normal::new(mean, std).expect("valid normal");
            (0..n).map(|_| dist.sample(rng) as f32).collect()
        };
        let linear = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
            let a = (1.0 / cols as f64).sqrt();
            (0..rows * cols).map(|_| rng.gen_range(-a..a) as f32).collect()
        };
        push("embed.pitch".into(), &[VOCAB, d], normal(VOCAB * d, 0.5, 0.0, &mut rng));
        if config.positions == PositionEncoding::Learned {
            push("embed.position".into(), &[SEQ_LEN, d], normal(SEQ_LEN * d, 0.1, 0.0, &mut rng));
        }
        let ff = config.ff_dim;
        for l in 0..config.layers {
            let pre = format!("layers.{l}");
            push(format!("{pre}.norm1.weight"), &[d], normal(d, 0.1, 1.0, &mut rng));
            push(format!("{pre}.norm1.bias"), &[d], normal(d, 0.1, 0.0, &mut rng));
            push(format!("{pre}.attn.in_proj.weight"), &[3 * d, d], linear(3 * d, d, &mut rng));
            push(format!("{pre}.attn.in_proj.bias"), &[3 * d], normal(3 * d, 0.05, 0.0, &mut rng));
            push(format!("{pre}.attn.out_proj.weight"), &[d, d], linear(d, d, &mut rng));
            push(format!("{pre}.attn.out_proj.bias"), &[d], normal(d, 0.05, 0.0, &mut rng));
            push(format!("{pre}.norm2.weight"), &[d], normal(d, 0.1, 1.0, &mut rng));
            push(format!("{pre}.norm2.bias"), &[d], normal(d, 0.1, 0.0, &mut rng));
            push(format!("{pre}.ff.linear1.weight"), &[ff, d], linear(ff, d, &mut rng));
            push(format!("{pre}.ff.linear1.bias"), &[ff], normal(ff, 0.05, 0.0, &mut rng));
            push(format!("{pre}.ff.linear2.weight"), &[d, ff], linear(d, ff, &mut rng));
            push(format!("{pre}.ff.linear2.bias"), &[d], normal(d, 0.05, 0.0, &mut rng));
        }
        if config.final_norm {
            push("final_norm.weight".into(), &[d], normal(d, 0.1, 1.0, &mut rng));
            push("final_norm.bias".into(), &[d], normal(d, 0.1, 0.0, &mut rng));
        }
        push("head.weight".into(), &[2, d], linear(2, d, &mut rng));
        push("head.bias".into(), &[2], normal(2, 0.05, 0.0, &mut rng));
        ValueModelWeights { tensors }
    }

    /// Same layout as [`Self::random`] with every value zero.
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut w = Self::random(config, 0);
        for t in &mut w.tensors {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.param_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SmawError> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic = c.take(4, "magic")?;
        if magic != MAGIC {
            return Err(SmawError::BadMagic(magic.to_vec()));
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(SmawError::BadVersion(version));
        }
        let count = c.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for index in 0..count {
            let name_len = c.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
                .map_err(|e| SmawError::BadTensor {
                    index,
                    msg: format!("name is not UTF-8: {e}"),
                })?
                .to_string();
            let rank = c.take(1, "tensor rank")?[0] as usize;
            let dims = (0..rank)
                .map(|_| c.u32("tensor dims"))
                .collect::<Result<Vec<u32>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| SmawError::BadTensor {
                    index,
                    msg: format!("{name}: element count overflows"),
                })?;
            let payload = c.take(numel * 4, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        let body_end = c.pos;
        let stored = c.u32("checksum")?;
        if c.pos != bytes.len() {
            return Err(SmawError::Trailing(bytes.len() - c.pos));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(SmawError::Crc { stored, computed });
        }
        Ok(ValueModelWeights { tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], SmawError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(SmawError::Truncated {
                what,
                offset: self.pos,
                expected: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, SmawError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, SmawError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(w: &ValueModelWeights, path: impl AsRef<Path>) -> Result<(), SmawError> {
    let path = path.as_ref();
    crate::noteio::write_atomic(path, &w.to_bytes()).map_err(|e| match e {
        crate::noteio::NoteIoError::Io { path, source } => SmawError::Io { path, source },
        other => SmawError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(other.to_string()),
        },
    })
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ValueModelWeights, SmawError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| SmawError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ValueModelWeights::from_bytes(&bytes)
}

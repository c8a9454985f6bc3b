//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic "LHTRCKPT" | u32 version | u8 dtype (4 = f32, 8 = f64)
//! u32 len + model config (compact JSON)
//! u32 len + tokenizer hash (hex)
//! u32 count, then per tensor: u32 len + name | u32 rank | u64 dims.. | values
//! u8 has_optimizer [u64 step | u64 epoch | count × m tensor | count × v tensor]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LHTRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// AdamW moments, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub epoch: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub tokenizer_hash: String,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<OptimizerState<T>>,
}

impl<T: Float> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Validation(e.to_string()))?;
        put_bytes(&mut out, config.as_bytes());
        put_bytes(&mut out, self.tokenizer_hash.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_bytes(&mut out, name.as_bytes());
            put_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                out.extend_from_slice(&o.epoch.to_le_bytes());
                for t in o.m.iter().chain(&o.v) {
                    put_tensor(&mut out, t);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| r.err(&format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Incompatible(format!("checkpoint stores {dtype:?}, requested {:?}", T::DTYPE)));
        }
        let config_text = r.string()?;
        let config: ModelConfig =
            serde_json::from_str(&config_text).map_err(|e| r.err(&format!("config: {e}")))?;
        let tokenizer_hash = r.string()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            params.push((name, r.tensor()?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let epoch = r.u64()?;
                let m = (0..count).map(|_| r.tensor()).collect::<Result<_>>()?;
                let v = (0..count).map(|_| r.tensor()).collect::<Result<_>>()?;
                Some(OptimizerState { step, epoch, m, v })
            }
            other => return Err(r.err(&format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self {
            config,
            tokenizer_hash,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Refuses checkpoints built for another architecture or tokenizer.
    pub fn check_compatible(&self, expected: &ModelConfig, tokenizer_hash: &str) -> Result<()> {
        if self.tokenizer_hash != tokenizer_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint tokenizer {} does not match {}",
                short(&self.tokenizer_hash),
                short(tokenizer_hash)
            )));
        }
        if &self.config != expected {
            let what = if self.config.encoder_kind != expected.encoder_kind {
                format!("encoder {:?} vs {:?}", self.config.encoder_kind, expected.encoder_kind)
            } else {
                "model configuration differs".to_string()
            };
            return Err(Error::Incompatible(format!("checkpoint does not fit the configured model: {what}")));
        }
        Ok(())
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor<T: Float>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, message: &str) -> Error {
        Error::format(self.path, format!("{message} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?.to_vec();
        String::from_utf8(b).map_err(|_| self.err("invalid UTF-8"))
    }

    fn tensor<T: Float>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.err(&format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| self.err("tensor too large"))?;
        let width = T::DTYPE.tag() as usize;
        let raw = self.take(n.checked_mul(width).ok_or_else(|| self.err("tensor too large"))?)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| match T::DTYPE {
                DType::F32 => T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                DType::F64 => T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        Tensor::new(&shape, data)
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! header      magic "SKTCKPT\0", version u32, sha256(config json) [32]
//! config      u32 length + JSON {"model": …, "train": …}
//! vocab       u32 count, then per token u32 length + UTF-8 bytes
//! parameters  u32 count, then per tensor: name, u32 rank, u64 dims, f32 data
//! optimizer   u8 present; if 1: f64 lr β1 β2 ε, u64 step, m and v tensors
//! footer      sha256 of all preceding bytes [32]
//! ```
//!
//! Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SktModel};
use crate::nn::{AdamConfig, AdamState, Tensor};

pub const MAGIC: &[u8; 8] = b"SKTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    train: Option<TrainConfig>,
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SktModel<f32>,
    pub vocab: Vocab,
    pub train_config: Option<TrainConfig>,
    pub optimizer: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize to bytes.
pub fn encode_checkpoint(
    model: &SktModel<f32>,
    vocab: &Vocab,
    train: Option<&TrainConfig>,
    optimizer: Option<&AdamState>,
) -> Result<Vec<u8>> {
    let echo = ConfigEcho {
        model: model.config.clone(),
        train: train.cloned(),
    };
    let json = serde_json::to_vec(&echo)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&Sha256::digest(&json));
    put_bytes(&mut out, &json);

    put_u32(&mut out, vocab.len() as u32);
    for t in vocab.tokens() {
        put_bytes(&mut out, t.as_bytes());
    }

    put_u32(&mut out, model.store.len() as u32);
    for (_, name, t) in model.store.iter() {
        put_bytes(&mut out, name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }

    match optimizer {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            for x in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.extend_from_slice(&a.step.to_le_bytes());
            for buf in a.m.iter().chain(&a.v) {
                put_f32s(&mut out, buf);
            }
        }
    }
    let footer = Sha256::digest(&out);
    out.extend_from_slice(&footer);
    Ok(out)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &SktModel<f32>,
    vocab: &Vocab,
    train: Option<&TrainConfig>,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, vocab, train, optimizer)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::Corrupt {
            section: self.section.to_string(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.corrupt("invalid UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parse checkpoint bytes.
pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader {
        buf,
        pos: 0,
        section: "header",
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let digest = r.take(32)?.to_vec();

    r.section = "config";
    let json = r.bytes()?;
    if Sha256::digest(json).as_slice() != digest.as_slice() {
        return Err(r.corrupt("config digest mismatch"));
    }
    let echo: ConfigEcho =
        serde_json::from_slice(json).map_err(|e| r.corrupt(format!("config JSON: {e}")))?;

    r.section = "vocab";
    let n = r.u32()? as usize;
    let mut tokens = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        tokens.push(r.string()?);
    }
    let vocab = Vocab::from_tokens(tokens).map_err(|e| r.corrupt(e.to_string()))?;

    r.section = "parameters";
    let mut model =
        SktModel::<f32>::new(echo.model.clone(), 0).map_err(|e| r.corrupt(e.to_string()))?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(r.corrupt(format!(
            "{count} tensors stored, model layout has {}",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = r.string()?;
        if name != model.store.name(id) {
            return Err(r.corrupt(format!(
                "expected tensor `{}`, found `{name}`",
                model.store.name(id)
            )));
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.corrupt(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len = shape.iter().product();
        let data = r.f32s(len)?;
        let t = Tensor::new(shape, data).map_err(|e| r.corrupt(e.to_string()))?;
        model
            .store
            .set(id, t)
            .map_err(|e| r.corrupt(e.to_string()))?;
    }

    r.section = "optimizer";
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let mut state = AdamState::new(&model.store, config);
            state.step = r.u64()?;
            let lens: Vec<usize> = state.m.iter().map(Vec::len).collect();
            for (i, &len) in lens.iter().enumerate() {
                state.m[i] = r.f32s(len)?;
            }
            for (i, &len) in lens.iter().enumerate() {
                state.v[i] = r.f32s(len)?;
            }
            Some(state)
        }
        flag => return Err(r.corrupt(format!("bad presence flag {flag}"))),
    };

    r.section = "footer";
    let body_end = r.pos;
    let footer = r.take(32)?;
    if Sha256::digest(&buf[..body_end]).as_slice() != footer {
        return Err(r.corrupt("checksum mismatch"));
    }
    if r.pos != buf.len() {
        return Err(r.corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint {
        model,
        vocab,
        train_config: echo.train,
        optimizer,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! Versioned binary container of named little-endian arrays.
//!
//! Layout: magic `HARR`, `u32` version, `u32` entry count, then per entry a
//! `u32` name length, UTF-8 name, `u8` dtype tag, `u32` rank, `u64` dims and
//! the payload. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::autodiff::Array;
use crate::corpus::EmbeddingIndex;
use crate::encoder::{DocumentEncoder, PolicyParameters};
use crate::grpo::{AdamWState, RngState};

pub const MAGIC: &[u8; 4] = b"HARR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U64 { shape: Vec<usize>, data: Vec<u64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Tensor {
    fn tag(&self) -> u8 {
        match self {
            Tensor::F64 { .. } => 0,
            Tensor::F32 { .. } => 1,
            Tensor::U64 { .. } => 2,
            Tensor::U8 { .. } => 3,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F64 { shape, .. }
            | Tensor::F32 { shape, .. }
            | Tensor::U64 { shape, .. }
            | Tensor::U8 { shape, .. } => shape,
        }
    }

    fn element_count(&self) -> usize {
        match self {
            Tensor::F64 { data, .. } => data.len(),
            Tensor::F32 { data, .. } => data.len(),
            Tensor::U64 { data, .. } => data.len(),
            Tensor::U8 { data, .. } => data.len(),
        }
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

/// Ordered named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, HarnessError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing array {name:?}")))
    }

    pub fn push_array(&mut self, name: &str, a: &Array) {
        self.push(
            name,
            Tensor::F64 {
                shape: a.shape().to_vec(),
                data: a.data().to_vec(),
            },
        );
    }

    pub fn array(&self, name: &str) -> Result<Array, HarnessError> {
        match self.get(name)? {
            Tensor::F64 { shape, data } => Array::new(shape.clone(), data.clone())
                .map_err(|e| bad(format!("array {name:?}: {e}"))),
            _ => Err(bad(format!("array {name:?} is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64], HarnessError> {
        match self.get(name)? {
            Tensor::U64 { data, .. } => Ok(data),
            _ => Err(bad(format!("array {name:?} is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], HarnessError> {
        match self.get(name)? {
            Tensor::U8 { data, .. } => Ok(data),
            _ => Err(bad(format!("array {name:?} is not u8"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                Tensor::F64 { data, .. } => data.iter().for_each(|x| out.extend(x.to_le_bytes())),
                Tensor::F32 { data, .. } => data.iter().for_each(|x| out.extend(x.to_le_bytes())),
                Tensor::U64 { data, .. } => data.iter().for_each(|x| out.extend(x.to_le_bytes())),
                Tensor::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_string();
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("shape overflows"))?;
            let tensor = match tag {
                0 => Tensor::F64 {
                    data: r
                        .chunks(n, 8)?
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                    shape,
                },
                1 => Tensor::F32 {
                    data: r
                        .chunks(n, 4)?
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                    shape,
                },
                2 => Tensor::U64 {
                    data: r
                        .chunks(n, 8)?
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                    shape,
                },
                3 => Tensor::U8 {
                    data: r.take(n)?.to_vec(),
                    shape,
                },
                other => return Err(bad(format!("unknown dtype tag {other}"))),
            };
            debug_assert_eq!(tensor.element_count(), n);
            entries.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn chunks(
        &mut self,
        n: usize,
        width: usize,
    ) -> Result<std::slice::ChunksExact<'a, u8>, HarnessError> {
        let total = n
            .checked_mul(width)
            .ok_or_else(|| bad("payload overflows"))?;
        Ok(self.take(total)?.chunks_exact(width))
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PolicyParameters,
    pub doc_encoder: DocumentEncoder,
    pub adam: AdamWState,
    pub rng: RngState,
    pub step: usize,
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let [e, p] = self.params.arrays();
        c.push_array("policy.token_embeddings", e);
        c.push_array("policy.projection", p);
        let [de, dp] = self.doc_encoder.snapshot().arrays();
        c.push_array("doc_encoder.token_embeddings", de);
        c.push_array("doc_encoder.projection", dp);
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            c.push_array(&format!("adamw.m.{i}"), m);
            c.push_array(&format!("adamw.v.{i}"), v);
        }
        c.push("adamw.t", u64_tensor(vec![self.adam.t]));
        c.push(
            "rng.seed",
            Tensor::U8 {
                shape: vec![32],
                data: self.rng.seed.to_vec(),
            },
        );
        c.push("rng.stream", u64_tensor(vec![self.rng.stream]));
        let wp = self.rng.word_pos;
        c.push(
            "rng.word_pos",
            u64_tensor(vec![wp as u64, (wp >> 64) as u64]),
        );
        c.push("step", u64_tensor(vec![self.step as u64]));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, HarnessError> {
        let params = PolicyParameters::new(
            c.array("policy.token_embeddings")?,
            c.array("policy.projection")?,
        )
        .map_err(|e| bad(e.to_string()))?;
        let doc = PolicyParameters::new(
            c.array("doc_encoder.token_embeddings")?,
            c.array("doc_encoder.projection")?,
        )
        .map_err(|e| bad(e.to_string()))?;
        let adam = AdamWState {
            m: vec![c.array("adamw.m.0")?, c.array("adamw.m.1")?],
            v: vec![c.array("adamw.v.0")?, c.array("adamw.v.1")?],
            t: scalar_u64(c, "adamw.t")?,
        };
        let [e, p] = params.arrays();
        if adam.m[0].shape() != e.shape() || adam.m[1].shape() != p.shape() {
            return Err(bad("optimizer moments do not match parameter shapes"));
        }
        let seed: [u8; 32] = c
            .bytes("rng.seed")?
            .try_into()
            .map_err(|_| bad("rng.seed must hold 32 bytes"))?;
        let wp = c.u64s("rng.word_pos")?;
        if wp.len() != 2 {
            return Err(bad("rng.word_pos must hold 2 words"));
        }
        Ok(Self {
            params,
            doc_encoder: DocumentEncoder::freeze(&doc),
            adam,
            rng: RngState {
                seed,
                stream: scalar_u64(c, "rng.stream")?,
                word_pos: (wp[0] as u128) | ((wp[1] as u128) << 64),
            },
            step: scalar_u64(c, "step")? as usize,
        })
    }

    pub fn rng(&self) -> ChaCha8Rng {
        self.rng.restore()
    }
}

fn u64_tensor(data: Vec<u64>) -> Tensor {
    Tensor::U64 {
        shape: vec![data.len()],
        data,
    }
}

fn scalar_u64(c: &Checkpoint, name: &str) -> Result<u64, HarnessError> {
    match c.u64s(name)? {
        [x] => Ok(*x),
        _ => Err(bad(format!("{name:?} must hold one value"))),
    }
}

pub const INDEX_ARRAY: &str = "index.embeddings";

pub fn index_checkpoint(index: &EmbeddingIndex) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.push_array(INDEX_ARRAY, index.matrix());
    c
}

pub fn index_from_checkpoint(c: &Checkpoint) -> Result<EmbeddingIndex, HarnessError> {
    Ok(EmbeddingIndex::from_matrix(c.array(INDEX_ARRAY)?))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

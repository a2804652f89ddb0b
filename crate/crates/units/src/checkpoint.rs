//! Binary checkpoints. All integers and values are little-endian:
//!
//! | offset | size | field                                             |
//! |--------|------|---------------------------------------------------|
//! | 0      | 4    | magic `UNTS`                                      |
//! | 4      | 4    | format version (u32, currently 1)                 |
//! | 8      | 8    | creation seed (u64)                               |
//! | 16     | 28   | model config: blocks, d, patch, heads, prompt_len, dylinear_base, max_positions (u32 each) |
//! | 44     | 4    | entry count n (u32)                               |
//! | 48     | ...  | n entries, in lexicographic name order            |
//! | end-4  | 4    | CRC-32 (IEEE) of every preceding byte             |
//!
//! Each entry is a u32 name length, the UTF-8 name, a dtype tag byte
//! (1 = f64, 2 = f32), a u32 rank, `rank` u64 extents and the row-major
//! values. Frozen flags and gradients are not stored.

use std::path::Path;

use units_core::{Model, ModelConfig, ParameterRegistry, Scalar, Tensor};

use crate::csvio::write_bytes;
use crate::error::{Result, UnitsError};

pub const MAGIC: &[u8; 4] = b"UNTS";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_F32: u8 = 2;

const fn dtype() -> u8 {
    if size_of::<Scalar>() == 8 {
        DTYPE_F64
    } else {
        DTYPE_F32
    }
}

fn config_words(c: &ModelConfig) -> [usize; 7] {
    [c.blocks, c.d, c.patch, c.heads, c.prompt_len, c.dylinear_base, c.max_positions]
}

/// Serializes a model.
pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    for w in config_words(&model.config) {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.registry.len() as u32).to_le_bytes());
    for (name, p) in model.registry.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub struct Decoded {
    pub config: ModelConfig,
    pub seed: u64,
    pub registry: ParameterRegistry,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Decoded, String> {
    if bytes.len() < 52 || &bytes[..4] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err("checksum mismatch".into());
    }
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let seed = c.u64()?;
    let mut w = [0usize; 7];
    for x in &mut w {
        *x = c.u32()? as usize;
    }
    let config = ModelConfig {
        blocks: w[0],
        d: w[1],
        patch: w[2],
        heads: w[3],
        prompt_len: w[4],
        dylinear_base: w[5],
        max_positions: w[6],
    };
    let n = c.u32()?;
    let mut registry = ParameterRegistry::new();
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| "entry name is not UTF-8".to_string())?;
        let tag = c.take(1)?[0];
        if tag != dtype() {
            return Err(format!("`{name}` has dtype tag {tag}, this build reads tag {}", dtype()));
        }
        let rank = c.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| c.u64().map(|e| e as usize)).collect::<std::result::Result<_, _>>()?;
        let numel: usize = shape.iter().product();
        let width = size_of::<Scalar>();
        let raw = c.take(numel.checked_mul(width).ok_or("entry size overflows")?)?;
        let data = raw
            .chunks_exact(width)
            .map(|b| Scalar::from_le_bytes(b.try_into().expect("scalar width")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
        registry.insert(name, t).map_err(|e| e.to_string())?;
    }
    if c.pos != body.len() {
        return Err(format!("{} trailing bytes", body.len() - c.pos));
    }
    Ok(Decoded { config, seed, registry })
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Decoded> {
    decode_inner(bytes).map_err(|message| UnitsError::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    write_bytes(path, &encode(model))
}

/// Loads a model, refusing a checkpoint whose config differs from
/// `expected` when one is given.
pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| UnitsError::io(path, e))?;
    let d = decode(&bytes, path)?;
    if let Some(e) = expected {
        if *e != d.config {
            return Err(UnitsError::Checkpoint {
                path: path.to_path_buf(),
                message: format!("model config {:?} does not match the run config {:?}", d.config, e),
            });
        }
    }
    Model::from_registry(d.config, d.seed, d.registry).map_err(|e| UnitsError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

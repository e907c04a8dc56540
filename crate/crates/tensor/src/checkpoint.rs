//! Versioned binary container for a [`ParamStore`].
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes   "CFQACKPT"
//! version    u32       1
//! dtype      u8        4 = f32, 8 = f64
//! config     32 bytes  SHA-256 of the model configuration
//! count      u32       number of parameters
//! count × {
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   trainable  u8      0 or 1
//!   ndim       u32
//!   dims       ndim × u64
//!   payload    product(dims) × dtype bytes, row-major, little-endian
//! }
//! ```
//!
//! Parameters are written in lexicographic name order, so equal stores give
//! byte-identical files. Optimizer state is not saved.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CFQACKPT";
pub const VERSION: u32 = 1;

pub type ConfigHash = [u8; 32];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds dtype {found}-byte floats, expected {expected}")]
    Dtype { found: u8, expected: u8 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn write<T: Scalar, W: Write>(store: &ParamStore<T>, config: &ConfigHash, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(&to_bytes(store, config))?;
    Ok(())
}

pub fn to_bytes<T: Scalar>(store: &ParamStore<T>, config: &ConfigHash) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.num_scalars() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE);
    out.extend_from_slice(config);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::from(p.trainable));
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn read<T: Scalar, R: Read>(mut r: R) -> Result<(ParamStore<T>, ConfigHash), CheckpointError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

/// Only the header: the stored configuration hash.
pub fn read_config_hash(bytes: &[u8]) -> Result<ConfigHash, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    header(&mut cur).map(|(_, h)| h)
}

fn header(cur: &mut Cursor<'_>) -> Result<(u8, ConfigHash), CheckpointError> {
    if cur.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let dtype = cur.take(1)?[0];
    let mut hash = [0u8; 32];
    hash.copy_from_slice(cur.take(32)?);
    Ok((dtype, hash))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, ConfigHash), CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let (dtype, hash) = header(&mut cur)?;
    if dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            found: dtype,
            expected: T::DTYPE,
        });
    }
    let count = cur.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("parameter name: {e}")))?
            .to_string();
        let trainable = match cur.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(CheckpointError::Corrupt(format!("trainable flag {b}"))),
        };
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * T::BYTES)?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        store.insert(name.clone(), t);
        store
            .set_trainable(&name, trainable)
            .expect("just inserted");
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((store, hash))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

//! Final per-worker parameters, tagged with the hash of the resolved config.
//!
//! Layout: `EGLCKPT1`, 32-byte config hash, `u32` worker count, `u64`
//! parameter count, then one [`ParamVector::to_le_bytes`] blob per worker in
//! rank order. Integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EGLCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config_hash: [u8; 32],
    pub params: Vec<ParamVector<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let len = self.params.first().map_or(0, ParamVector::len);
        if self.params.iter().any(|p| p.len() != len) {
            return Err(Error::InvalidArgument("checkpoint vectors differ in length".into()));
        }
        let mut out = Vec::with_capacity(52 + self.params.len() * len * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        out.extend_from_slice(&(len as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |offset: usize, message: &str| Error::Format {
            path: path.to_path_buf(),
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 52 {
            return Err(bad(bytes.len(), "truncated checkpoint header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad(0, "not a checkpoint file"));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(&bytes[8..40]);
        let workers = u32::from_le_bytes(bytes[40..44].try_into().unwrap()) as usize;
        let len = u64::from_le_bytes(bytes[44..52].try_into().unwrap()) as usize;
        let blob = len.checked_mul(8).ok_or_else(|| bad(44, "parameter count overflows"))?;
        let expected = workers
            .checked_mul(blob)
            .and_then(|b| b.checked_add(52))
            .ok_or_else(|| bad(40, "worker count overflows"))?;
        if bytes.len() != expected {
            return Err(bad(
                bytes.len().min(expected),
                &format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let params = if blob == 0 {
            vec![ParamVector(Vec::new()); workers]
        } else {
            bytes[52..]
                .chunks(blob)
                .map(ParamVector::from_le_bytes)
                .collect::<Result<_>>()?
        };
        Ok(Checkpoint { config_hash, params })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

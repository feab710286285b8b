//! `OPXM` binary model files.
//!
//! Layout (little-endian): magic `OPXM`, version `u32`, arch tag `u8`
//! (0 linear, 1 mlp), input dim `u32`, hidden layer count `u32` followed by
//! one `u32` width per hidden layer, decision threshold `f64`, then every
//! parameter as `f64` in layer order.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::model::{Arch, ProbeError, ProbeModel};

pub const OPXM_MAGIC: &[u8; 4] = b"OPXM";
pub const OPXM_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported model version {0}")]
    VersionMismatch(u32),
    #[error("unknown arch tag {0}")]
    UnknownArch(u8),
    #[error("model file truncated or padded")]
    Length,
    #[error(transparent)]
    Model(#[from] ProbeError),
}

pub fn encode_model(model: &ProbeModel) -> Vec<u8> {
    let hidden = model.arch.hidden();
    let mut out = Vec::new();
    out.extend_from_slice(OPXM_MAGIC);
    out.extend_from_slice(&OPXM_VERSION.to_le_bytes());
    out.push(model.arch.tag());
    out.extend_from_slice(&(model.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(hidden.len() as u32).to_le_bytes());
    for &h in hidden {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&model.decision_threshold.to_le_bytes());
    for w in &model.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let end = self.at.checked_add(n).ok_or(ModelFileError::Length)?;
        let s = self.bytes.get(self.at..end).ok_or(ModelFileError::Length)?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ModelFileError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ProbeModel, ModelFileError> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4).map_err(|_| ModelFileError::BadMagic)? != OPXM_MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let version = c.u32()?;
    if version != OPXM_VERSION {
        return Err(ModelFileError::VersionMismatch(version));
    }
    let tag = c.take(1)?[0];
    let dim = c.u32()? as usize;
    let n_hidden = c.u32()? as usize;
    let hidden = (0..n_hidden)
        .map(|_| c.u32().map(|h| h as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let arch = match (tag, n_hidden) {
        (0, 0) => Arch::Linear,
        (1, _) => Arch::Mlp { hidden },
        (t, _) => return Err(ModelFileError::UnknownArch(t)),
    };
    let threshold = c.f64()?;
    let n = arch.param_count(dim);
    if bytes.len() - c.at != n * 8 {
        return Err(ModelFileError::Length);
    }
    let weights = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
    Ok(ProbeModel::new(arch, dim, weights, threshold)?)
}

pub fn save_model(path: &Path, model: &ProbeModel) -> Result<(), ModelFileError> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ProbeModel, ModelFileError> {
    decode_model(&fs::read(path)?)
}

//! Binary checkpoint: magic, a JSON header, then named little-endian arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QTGVQA01";

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub type_names: Vec<String>,
    /// Type weights in force at the end of training.
    pub type_weights: Vec<f64>,
    /// Resolved run configuration, kept for provenance.
    pub run: serde_json::Value,
    #[serde(skip)]
    pub params: Option<Params>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint, params: &Params) -> Result<()> {
    params.check_against(&ck.model)?;
    let header = serde_json::to_vec(ck).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(64 + header.len() + params.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    put_u64(&mut out, params.len() as u64);
    for (name, t) in params.iter() {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.shape().len() as u64);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Data(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Data(format!("implausible length {v} in checkpoint")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!("{} is not a checkpoint", path.display())));
    }
    let n = r.len()?;
    let mut ck: Checkpoint = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let count = r.len()?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
        let ndim = r.len()?;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Data("array too large".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?.with_requires_grad(true);
        if !t.is_finite() {
            return Err(Error::Data(format!("`{name}` holds non-finite values")));
        }
        map.insert(name, t);
    }
    if r.pos != buf.len() {
        return Err(Error::Data("trailing bytes after checkpoint arrays".into()));
    }
    let params = Params::from_map(map);
    params.check_against(&ck.model)?;
    ck.params = Some(params);
    Ok(ck)
}

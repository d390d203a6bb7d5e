//! `TMM1` checkpoint files.
//!
//! Layout (all integers `u32` little-endian): magic `TMM1`, the model
//! dimension count and values, the tensor count, `rows cols` per tensor, then
//! every tensor's values as little-endian `f32` in declaration order.

use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::formats::write_atomic;
use crate::model::{ModelDims, VisaModel};

pub const MAGIC: &[u8; 4] = b"TMM1";

pub fn encode_checkpoint(model: &VisaModel) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let put = |v: usize, out: &mut Vec<u8>| out.extend_from_slice(&(v as u32).to_le_bytes());
    let dims = model.dims().to_array();
    put(dims.len(), &mut out);
    for d in dims {
        put(d, &mut out);
    }
    put(model.params().len(), &mut out);
    for p in model.params() {
        put(p.rows, &mut out);
        put(p.cols, &mut out);
    }
    for p in model.params() {
        for &v in &p.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::MalformedCheckpoint(format!("truncated at byte {}", self.pos)));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<VisaModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::MalformedCheckpoint("missing TMM1 magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let n_dims = r.u32()?;
    if n_dims != ModelDims::FIELDS {
        return Err(Error::MalformedCheckpoint(format!("expected {} dimensions, found {n_dims}", ModelDims::FIELDS)));
    }
    let mut dims = [0; ModelDims::FIELDS];
    for d in dims.iter_mut() {
        *d = r.u32()?;
    }
    let dims = ModelDims::from_array(dims);
    dims.validate().map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    let count = r.u32()?;
    if count > 4096 {
        return Err(Error::MalformedCheckpoint(format!("implausible tensor count {count}")));
    }
    let shapes = (0..count).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?;
    let mut params = Vec::with_capacity(count);
    for (rows, cols) in shapes {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::MalformedCheckpoint("tensor too large".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::MalformedCheckpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        params.push(Tensor::new(rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    VisaModel::from_parts(dims, params).map_err(|e| Error::MalformedCheckpoint(e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &VisaModel) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<VisaModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! Named-tensor checkpoint container.
//!
//! ```text
//! TARSCKPT1\n
//! <header JSON>\n
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u32 rank, u64 dims…, f64 values…
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Tensor};

const MAGIC: &[u8] = b"TARSCKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    /// Resolved run configuration, echoed verbatim.
    pub config: serde_json::Value,
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &ModelParams) -> Result<Vec<u8>> {
    let mut buf = MAGIC.to_vec();
    let json = serde_json::to_string(header).map_err(|e| Error::Parse(e.to_string()))?;
    buf.extend_from_slice(json.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in params.tensors.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ModelParams)> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("missing checkpoint header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::Parse(e.to_string()))?;
    let mut r = Reader {
        bytes: rest,
        pos: nl + 1,
    };
    let count = r.u32()?;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Parse(e.to_string()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.insert(&name, Tensor::new(shape, data)?);
    }
    if r.pos != rest.len() {
        return Err(Error::Parse("trailing bytes after checkpoint".into()));
    }
    let params = ModelParams {
        config: header.model,
        tensors,
    };
    params.validate()?;
    Ok((header, params))
}

pub fn write_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    params: &ModelParams,
) -> Result<()> {
    fs::write(path, encode_checkpoint(header, params)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

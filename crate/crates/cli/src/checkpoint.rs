//! Adapter checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SSMLCKPT"
//! version    u32
//! manifest   u64 length, then UTF-8 JSON
//! count      u32
//! count × {
//!     name   u32 length, then UTF-8
//!     ndim   u32
//!     dims   ndim × u64
//!     data   product(dims) × f64 (IEEE 754, little-endian)
//! }
//! ```
//!
//! Only adapters and the head are stored. The frozen base is rebuilt from
//! the manifest's encoder config and base seed and checked against the
//! recorded fingerprint.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ssmlora::{AdapterConfig, EncoderConfig, InsertionPlan, Tensor};

use crate::config::{PlanConfig, Seeds};
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"SSMLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub plan_config: PlanConfig,
    pub plan: InsertionPlan,
    pub rank: usize,
    pub seeds: Seeds,
    pub base_fingerprint: String,
    pub adapter_params: usize,
    pub head_params: usize,
}

pub fn encode(manifest: &Manifest, tensors: &[(String, &Tensor)]) -> CliResult<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, n: u64) -> CliResult<usize> {
        usize::try_from(n).map_err(|_| bad(format!("length {n} does not fit in memory")))
    }
}

fn bad(msg: String) -> CliError {
    CliError::Io(format!("malformed checkpoint: {msg}"))
}

pub fn decode(buf: &[u8]) -> CliResult<(Manifest, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = r.u64()?;
    let n = r.len(n)?;
    let manifest: Manifest = serde_json::from_slice(r.take(n)?).map_err(|e| bad(format!("manifest: {e}")))?;
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = r.u64()?;
            shape.push(r.len(d)?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad(format!("tensor {name} is too large")))?;
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| bad(format!("tensor {name} is too large")))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((manifest, tensors))
}

pub fn save(path: &Path, manifest: &Manifest, tensors: &[(String, &Tensor)]) -> CliResult<()> {
    std::fs::write(path, encode(manifest, tensors)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> CliResult<(Manifest, Vec<(String, Tensor)>)> {
    let buf = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    decode(&buf)
}

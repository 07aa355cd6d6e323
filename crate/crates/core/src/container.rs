//! Binary tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "WSPT"
//! version 1 byte   (currently 1)
//! count   u32      number of tensor records
//! record: name_len u16, name utf-8 bytes,
//!         dims 4 x u32 (batch, channels, height, width),
//!         data n*c*h*w f32 values
//! ```
//!
//! Records preserve insertion order, so re-encoding a decoded file is
//! byte-identical.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::ModuleGraph;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"WSPT";
pub const VERSION: u8 = 1;

pub fn encode_tensors(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        let s = tensor.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported container version {version}"),
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_pos = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Format {
                offset: name_pos,
                msg: format!("name is not utf-8: {e}"),
            })?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dimension")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r.take(4 * shape.len(), "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn save_tensors(path: impl AsRef<Path>, entries: &[(String, &Tensor)]) -> Result<()> {
    Ok(fs::write(path, encode_tensors(entries))?)
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&fs::read(path)?)
}

/// Serialize every parameter and buffer tensor of a graph.
pub fn encode_params(graph: &ModuleGraph) -> Vec<u8> {
    encode_tensors(&graph.named_parameters())
}

pub fn save_params(path: impl AsRef<Path>, graph: &ModuleGraph) -> Result<()> {
    Ok(fs::write(path, encode_params(graph))?)
}

/// Load parameters by name into an already-built, initialized graph.
/// Every stored tensor must match a graph tensor and vice versa.
pub fn load_params(graph: &mut ModuleGraph, path: impl AsRef<Path>) -> Result<()> {
    let stored = load_tensors(path)?;
    let want: std::collections::BTreeSet<String> = graph
        .named_parameters()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let got: std::collections::BTreeSet<String> = stored.iter().map(|(n, _)| n.clone()).collect();
    if want != got {
        let missing: Vec<_> = want.difference(&got).take(3).cloned().collect();
        let extra: Vec<_> = got.difference(&want).take(3).cloned().collect();
        return Err(Error::Config(format!(
            "stored parameters do not match the architecture (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    for (name, tensor) in stored {
        graph.set_parameter(&name, tensor)?;
    }
    Ok(())
}

pub fn checksum(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex digest of the serialized parameters; stable across runs for
/// identical training configurations.
pub fn params_checksum(graph: &ModuleGraph) -> String {
    checksum(&encode_params(graph))
}

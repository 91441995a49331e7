//! Versioned binary container for named parameter sets plus a JSON header.
//!
//! Layout (little endian): magic `MEVCKPT\0`, `u32` version, `u64` header
//! length and UTF-8 JSON header, `u32` section count, then per section its
//! name and `u32` entry count, and per entry its name, group, `u64` rows,
//! `u64` cols and raw `f64` bits. Strings are `u32` length plus UTF-8 bytes.
//! Values are stored as bit patterns, so a round trip is exact.

use serde_json::Value;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MEVCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub sections: Vec<(String, ParameterSet)>,
}

impl Checkpoint {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            sections: Vec::new(),
        }
    }

    pub fn with_section(mut self, name: &str, params: ParameterSet) -> Self {
        self.sections.retain(|(n, _)| n != name);
        self.sections.push((name.to_string(), params));
        self
    }

    pub fn section(&self, name: &str) -> Option<&ParameterSet> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, params) in &self.sections {
            put_str(&mut out, name);
            out.extend_from_slice(&(params.len() as u32).to_le_bytes());
            for e in params.entries() {
                put_str(&mut out, &e.name);
                put_str(&mut out, &e.group);
                out.extend_from_slice(&(e.tensor.rows as u64).to_le_bytes());
                out.extend_from_slice(&(e.tensor.cols as u64).to_le_bytes());
                for x in &e.tensor.data {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Value = serde_json::from_slice(r.take(hlen)?)?;
        let nsec = r.u32()?;
        let mut sections = Vec::with_capacity(nsec as usize);
        for _ in 0..nsec {
            let name = r.string()?;
            let n = r.u32()?;
            let mut params = ParameterSet::new();
            for _ in 0..n {
                let pname = r.string()?;
                let group = r.string()?;
                let rows = r.u64()? as usize;
                let cols = r.u64()? as usize;
                let len = rows
                    .checked_mul(cols)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {pname} has an impossible shape")))?;
                let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect();
                if params.index_of(&pname).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {pname} in section {name}")));
                }
                params.push(pname, group, Tensor::from_vec(rows, cols, data));
            }
            sections.push((name, params));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last section".into()));
        }
        Ok(Self { header, sections })
    }

    /// Writes through a temporary file and a rename, so readers never see a
    /// partial checkpoint.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 name".into()))
    }
}

//! Versioned flat binary checkpoints.
//!
//! ```text
//! "DYKNPOL\0"  magic (8 bytes)
//! u32          format version
//! u32 x 5      query_dim, item_dim, context_dim, hidden, embed
//! u64          parameter count
//! f64 x count  parameters
//! -- optional optimizer section --
//! "DYKNADAM"   magic
//! u32          format version
//! u64          step count
//! u64          count
//! f64 x count  first moments
//! f64 x count  second moments
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::policy::{Arch, PolicyParams};

pub const POLICY_MAGIC: &[u8; 8] = b"DYKNPOL\0";
pub const ADAM_MAGIC: &[u8; 8] = b"DYKNADAM";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &PolicyParams, opt: Option<&AdamState>) -> Vec<u8> {
    let a = params.arch();
    let mut out = Vec::with_capacity(8 + 4 * 6 + 8 + 8 * params.len());
    out.extend_from_slice(POLICY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [a.query_dim, a.item_dim, a.context_dim, a.hidden, a.embed] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(st) = opt {
        out.extend_from_slice(ADAM_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&st.step.to_le_bytes());
        out.extend_from_slice(&(st.m.len() as u64).to_le_bytes());
        for v in st.m.iter().chain(&st.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("count overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn expect_magic(c: &mut Cursor<'_>, magic: &[u8; 8]) -> Result<()> {
    if c.take(8)? != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<(PolicyParams, Option<AdamState>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    expect_magic(&mut c, POLICY_MAGIC)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = c.u32()? as usize;
    }
    let arch = Arch {
        query_dim: dims[0],
        item_dim: dims[1],
        context_dim: dims[2],
        hidden: dims[3],
        embed: dims[4],
    };
    let count = c.u64()? as usize;
    if count != arch.param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let params = PolicyParams::from_values(arch, c.f64s(count)?)?;
    if c.done() {
        return Ok((params, None));
    }
    expect_magic(&mut c, ADAM_MAGIC)?;
    let step = c.u64()?;
    let n = c.u64()? as usize;
    if n != count {
        return Err(Error::Checkpoint(format!(
            "optimizer state length {n} does not match parameter count {count}"
        )));
    }
    let m = c.f64s(n)?;
    let v = c.f64s(n)?;
    if !c.done() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((params, Some(AdamState { m, v, step })))
}

pub fn save(path: &Path, params: &PolicyParams, opt: Option<&AdamState>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(params, opt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(PolicyParams, Option<AdamState>)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

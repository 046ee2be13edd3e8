//! Versioned binary container for model and policy parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "BNNPSCKP"
//! version      u32
//! header_len   u32, then header_len bytes of UTF-8 `key=value\n` lines
//! block_count  u32
//! per block:
//!   name_len   u16, then name_len bytes of UTF-8
//!   ndim       u32, then ndim x u64 extents
//!   count      u64, then count x f64 (IEEE-754 bits)
//! ```
//!
//! Float header values are written in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BNNPSCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    header: Vec<(String, String)>,
    blocks: Vec<(String, Tensor)>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(fmt_err(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| fmt_err("checkpoint: invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.set("kind", kind);
        c
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let v = value.to_string();
        debug_assert!(!key.contains('=') && !key.contains('\n') && !v.contains('\n'));
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = v,
            None => self.header.push((key.to_string(), v)),
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| fmt_err(format!("checkpoint: missing header key {key:?}")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| fmt_err(format!("checkpoint: bad value {v:?} for {key:?}")))
    }

    pub fn kind(&self) -> Result<&str> {
        self.get("kind")
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let got = self.kind()?;
        if got != kind {
            return Err(fmt_err(format!("checkpoint holds a {got:?}, expected {kind:?}")));
        }
        Ok(())
    }

    pub fn header(&self) -> &[(String, String)] {
        &self.header
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.blocks.push((name.to_string(), t));
    }

    pub fn block(&self, name: &str) -> Result<&Tensor> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| fmt_err(format!("checkpoint: missing block {name:?}")))
    }

    pub fn blocks(&self) -> &[(String, Tensor)] {
        &self.blocks
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(fmt_err("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        let hl = r.u32()? as usize;
        let text = r.utf8(hl)?;
        let mut header = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fmt_err(format!("checkpoint: bad header line {line:?}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let nb = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(nb);
        for _ in 0..nb {
            let nl = r.u16()? as usize;
            let name = r.utf8(nl)?.to_string();
            let nd = r.u32()? as usize;
            let mut shape = Vec::with_capacity(nd);
            for _ in 0..nd {
                shape.push(r.u64()? as usize);
            }
            let count = r.u64()? as usize;
            let bytes = r.take(count.checked_mul(8).ok_or_else(|| fmt_err("checkpoint: block too large"))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| fmt_err(format!("checkpoint block {name:?}: {e}")))?;
            blocks.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(fmt_err(format!("checkpoint: {} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Comma-separated list of unsigned integers.
pub fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn split_usize(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| fmt_err(format!("bad integer list {s:?}"))))
        .collect()
}

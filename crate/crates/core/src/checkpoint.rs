//! Versioned binary key-value container for parameters, ledger state and scalars.
//!
//! Layout (little-endian): magic `EMSHCKPT`, `u32` version, `u32` entry count,
//! then per entry `u16` key length, UTF-8 key, `u8` kind and a payload:
//! kind 0 is an `f64` array (`u32` rank, `u64` dims, values), kind 1 a `u64`,
//! kind 2 a UTF-8 string (`u32` length, bytes). Keys are written in sorted order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EMSHCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Array(Tensor<f64>),
    U64(u64),
    Text(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointFile {
    entries: BTreeMap<String, Value>,
}

impl CheckpointFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_array(&mut self, key: &str, t: Tensor<f64>) {
        self.entries.insert(key.to_string(), Value::Array(t));
    }

    pub fn put_u64(&mut self, key: &str, v: u64) {
        self.entries.insert(key.to_string(), Value::U64(v));
    }

    pub fn put_text(&mut self, key: &str, v: &str) {
        self.entries.insert(key.to_string(), Value::Text(v.to_string()));
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn get(&self, key: &str) -> Result<&Value> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing key {key}")))
    }

    pub fn array(&self, key: &str) -> Result<&Tensor<f64>> {
        match self.get(key)? {
            Value::Array(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("{key} is not an array"))),
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        match self.get(key)? {
            Value::U64(v) => Ok(*v),
            _ => Err(Error::Checkpoint(format!("{key} is not an integer"))),
        }
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        match self.get(key)? {
            Value::Text(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("{key} is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (k, v) in &self.entries {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            match v {
                Value::Array(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for &x in t.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Value::U64(x) => {
                    out.push(1);
                    out.extend_from_slice(&x.to_le_bytes());
                }
                Value::Text(s) => {
                    out.push(2);
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let n = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let klen = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let key = String::from_utf8(r.take(klen)?.to_vec())
                .map_err(|_| Error::Checkpoint("key is not UTF-8".into()))?;
            let kind = r.take(1)?[0];
            let v = match kind {
                0 => {
                    let rank = r.u32()? as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(r.u64()? as usize);
                    }
                    let len: usize = shape.iter().product();
                    let mut data = Vec::with_capacity(len);
                    for _ in 0..len {
                        data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                    }
                    Value::Array(
                        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?,
                    )
                }
                1 => Value::U64(r.u64()?),
                2 => {
                    let len = r.u32()? as usize;
                    Value::Text(
                        String::from_utf8(r.take(len)?.to_vec())
                            .map_err(|_| Error::Checkpoint("text is not UTF-8".into()))?,
                    )
                }
                k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
            };
            entries.insert(key, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

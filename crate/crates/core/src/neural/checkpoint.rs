//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! b"GLCK"  u32 version  u32 entry_count
//! entry_count × { u32 name_len, name (UTF-8), u32 rank, rank × u32 extent, f32 payload (row-major) }
//! ```
//!
//! Momentum buffers are stored as `<name>.m`; batch-norm running estimates
//! as `<name>.running_mean` / `<name>.running_var`.

use std::path::Path;

use super::{numel, ParamStore, Real};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GLCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f32>) {
        debug_assert_eq!(numel(shape), values.len());
        self.entries.push(Entry {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Checkpoint(format!("entry name: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(Entry {
                name,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if !bytes.starts_with(MAGIC) {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        Self::from_bytes(&bytes)
    }

    /// Parameters (each followed by its momentum buffer), then running
    /// statistics, in registration order.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        let mut ck = Self::default();
        let f32s = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        for p in store.params() {
            let shape = p.tensor.shape().to_vec();
            ck.push(&p.name, &shape, f32s(&p.tensor.data()));
            ck.push(format!("{}.m", p.name), &shape, f32s(&p.momentum));
        }
        for (name, stats) in store.buffers() {
            let s = stats.borrow();
            ck.push(format!("{name}.running_mean"), &[s.mean.len()], f32s(&s.mean));
            ck.push(format!("{name}.running_var"), &[s.var.len()], f32s(&s.var));
        }
        ck
    }

    fn expect(&self, name: &str, shape: &[usize]) -> Result<&Entry> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
        if e.shape != shape {
            return Err(Error::Checkpoint(format!(
                "entry {name}: shape {:?} does not match {:?}",
                e.shape, shape
            )));
        }
        Ok(e)
    }

    /// Copies values into an existing store; every store entry must be
    /// present with a matching shape.
    pub fn restore_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let cast = |v: &[f32]| v.iter().map(|&x| T::from_f64(x as f64)).collect::<Vec<T>>();
        for p in store.params_mut() {
            let shape = p.tensor.shape().to_vec();
            let w = cast(&self.expect(&p.name, &shape)?.values);
            let m = cast(&self.expect(&format!("{}.m", p.name), &shape)?.values);
            *p.tensor.data_mut() = w;
            p.momentum = m;
        }
        for (name, stats) in store.buffers() {
            let mut s = stats.borrow_mut();
            let c = [s.mean.len()];
            s.mean = cast(&self.expect(&format!("{name}.running_mean"), &c)?.values);
            s.var = cast(&self.expect(&format!("{name}.running_var"), &c)?.values);
        }
        Ok(())
    }
}

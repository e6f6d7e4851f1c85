//! Binary checkpoints.
//!
//! Layout: magic `DRIW`, `u32` version, then records until end of file,
//! each `u32` name length, UTF-8 name, `u32` rows, `u32` cols and
//! `rows·cols` `f64` values. All integers and floats are little-endian.
//! Parameters are stored under their own names; optimizer and training
//! state live under the `state/` prefix.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DRIW";
pub const VERSION: u32 = 1;
const STATE: &str = "state/";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Parameter values, plus the optimizer moments when given.
    pub fn capture(store: &ParamStore, adam: Option<&Adam>) -> Self {
        let mut records: Vec<(String, Tensor)> = store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        if let Some(adam) = adam {
            records.push((
                format!("{STATE}adam.step"),
                Tensor::scalar(adam.step as f64),
            ));
            for ((p, m), v) in store.iter().zip(&adam.m).zip(&adam.v) {
                records.push((format!("{STATE}adam.m/{}", p.name), m.clone()));
                records.push((format!("{STATE}adam.v/{}", p.name), v.clone()));
            }
        }
        Self { records }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set_state(&mut self, key: &str, value: f64) {
        let name = format!("{STATE}{key}");
        self.records.retain(|(n, _)| *n != name);
        self.records.push((name, Tensor::scalar(value)));
    }

    pub fn state(&self, key: &str) -> Option<f64> {
        self.get(&format!("{STATE}{key}"))
            .and_then(|t| t.item().ok())
    }

    /// Loads every non-state record into `store`; names and shapes must
    /// match the model exactly.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        store.load_values(
            self.records
                .iter()
                .filter(|(n, _)| !n.starts_with(STATE))
                .map(|(n, t)| (n.as_str(), t)),
        )
    }

    /// Optimizer state for `store`, if the checkpoint carries one.
    pub fn restore_adam(&self, store: &ParamStore, cfg: AdamConfig) -> Result<Option<Adam>> {
        let Some(step) = self.state("adam.step") else {
            return Ok(None);
        };
        let mut adam = Adam::new(store, cfg);
        adam.step = step as u64;
        for (k, p) in store.iter().enumerate() {
            for (kind, slot) in [("m", &mut adam.m[k]), ("v", &mut adam.v[k])] {
                let t = self
                    .get(&format!("{STATE}adam.{kind}/{}", p.name))
                    .ok_or_else(|| {
                        Error::Format(format!("optimizer state missing for {}", p.name))
                    })?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!(
                        "optimizer state shape mismatch for {}",
                        p.name
                    )));
                }
                *slot = t.clone();
            }
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let u32_of = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
        };
        for (name, t) in &self.records {
            out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_of(t.rows(), "row count")?.to_le_bytes());
            out.extend_from_slice(&u32_of(t.cols(), "column count")?.to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut records = Vec::new();
        while cur.pos < bytes.len() {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("record {name} too large")))?;
            let data = cur
                .take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

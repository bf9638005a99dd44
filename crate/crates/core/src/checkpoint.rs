//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `"GCRP"`, version `u32`, config digest `u64`, entry count `u32`, entries,
//! optimizer flag `u8` (then step `u64`, entry count `u32`, entries), and a
//! trailing CRC-64 of every preceding byte. An entry is name length `u32`,
//! UTF-8 name, dtype tag `u8`, rank `u32`, dims `u64 × rank`, values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{ParamEntry, ParamStore};
use crate::optim::AdamW;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"GCRP";
pub const VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// Digest of the architecture fields of a config; the seed does not enter it.
pub fn config_digest(cfg: &ModelConfig) -> u64 {
    CRC64.checksum(cfg.arch_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    /// `m.<param>` and `v.<param>` moment tensors.
    pub entries: Vec<ParamEntry<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub digest: u64,
    pub params: Vec<ParamEntry<T>>,
    pub optimizer: Option<OptimizerState<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn capture(cfg: &ModelConfig, params: &ParamStore<T>, optim: Option<&AdamW<T>>) -> Self {
        let optimizer = optim.map(|o| {
            let mut entries = Vec::with_capacity(2 * params.len());
            for (kind, moments) in [("m", &o.m), ("v", &o.v)] {
                for (e, t) in params.entries().iter().zip(moments) {
                    entries.push(ParamEntry {
                        name: format!("{kind}.{}", e.name),
                        value: t.clone(),
                    });
                }
            }
            OptimizerState { step: o.step, entries }
        });
        Checkpoint {
            digest: config_digest(cfg),
            params: params.entries().to_vec(),
            optimizer,
        }
    }

    /// Copies the stored parameters (and optimizer moments, when both sides have them) into place.
    pub fn restore(&self, cfg: &ModelConfig, params: &mut ParamStore<T>, optim: Option<&mut AdamW<T>>) -> Result<()> {
        let want = config_digest(cfg);
        if self.digest != want {
            return Err(Error::Checkpoint(format!(
                "config digest mismatch: checkpoint {:016x}, model {want:016x}",
                self.digest
            )));
        }
        let mut src = ParamStore::new();
        for e in &self.params {
            src.add(e.name.clone(), e.value.clone())?;
        }
        params.load_from(&src)?;
        if let Some(o) = optim {
            let state = self
                .optimizer
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
            let mut lookup = ParamStore::new();
            for e in &state.entries {
                lookup.add(e.name.clone(), e.value.clone())?;
            }
            let fetch = |kind: &str| -> Result<Vec<Tensor<T>>> {
                params
                    .entries()
                    .iter()
                    .map(|e| {
                        let id = lookup
                            .id(&format!("{kind}.{}", e.name))
                            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment {kind}.{}", e.name)))?;
                        let t = lookup.get(id);
                        if t.shape() != e.value.shape() {
                            return Err(Error::Checkpoint(format!("optimizer moment {kind}.{} has wrong shape", e.name)));
                        }
                        Ok(t.clone())
                    })
                    .collect()
            };
            let m = fetch("m")?;
            let v = fetch("v")?;
            o.m = m;
            o.v = v;
            o.step = state.step;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest.to_le_bytes());
        write_entries(&mut out, &self.params);
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                write_entries(&mut out, &o.entries);
            }
        }
        let sum = CRC64.checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 8 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if CRC64.checksum(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (file corrupt or truncated)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let digest = r.u64()?;
        let params = read_entries(&mut r)?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                Some(OptimizerState {
                    step,
                    entries: read_entries(&mut r)?,
                })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { digest, params, optimizer })
    }

    /// Writes through a temporary file so an interrupted save never replaces a good checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.as_ref().display())),
            e => e,
        })
    }
}

fn write_entries<T: Real>(out: &mut Vec<u8>, entries: &[ParamEntry<T>]) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        T::to_le_bytes_vec(e.value.data(), out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_entries<T: Real>(r: &mut Reader<'_>) -> Result<Vec<ParamEntry<T>>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("`{name}` stored as {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` shape overflows")))?;
        let raw = r.take(numel.checked_mul(dtype.size_of()).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        out.push(ParamEntry {
            name,
            value: Tensor::new(&shape, data)?,
        });
    }
    Ok(out)
}

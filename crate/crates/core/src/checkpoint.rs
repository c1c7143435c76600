//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian: magic `LMIMCKPT`, `u32` version, then
//! length-prefixed strings for kind and config echo, `u64` seed, epoch, global
//! step and applied breakpoint count, then a `u32` parameter count followed by
//! one record per parameter: name, trainable flag, `u32` rank, `u64` dims, raw
//! `f32` values, and an optional AdamW state (step, first and second moments).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AdamState, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"LMIMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `pretrain` or `finetune`.
    pub kind: String,
    pub config_echo: String,
    pub seed: u64,
    pub epoch: u64,
    pub global_step: u64,
    pub breakpoints_applied: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Vec<Option<AdamState<f32>>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config_echo);
        for v in [
            self.seed,
            self.epoch,
            self.global_step,
            self.breakpoints_applied,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (id, p) in self.params.iter() {
            put_str(&mut out, &p.name);
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_floats(&mut out, p.tensor.data());
            match self.optimizer.get(id.index()).and_then(Option::as_ref) {
                Some(st) => {
                    out.push(1);
                    out.extend_from_slice(&st.step.to_le_bytes());
                    put_floats(&mut out, &st.m);
                    put_floats(&mut out, &st.v);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let config_echo = r.string()?;
        let (seed, epoch, global_step, breakpoints_applied) =
            (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut optimizer = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| Ok(r.u64()? as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let tensor = Tensor::new(shape, r.floats(numel)?)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.add(name, tensor, trainable)?;
            optimizer.push(match r.u8()? {
                0 => None,
                _ => Some(AdamState {
                    step: r.u64()?,
                    m: r.floats(numel)?,
                    v: r.floats(numel)?,
                }),
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            kind,
            config_echo,
            seed,
            epoch,
            global_step,
            breakpoints_applied,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }

    /// Overwrites every parameter of `store` with the stored value of the same
    /// name. Names, order and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let mut problems = Vec::new();
        if store.len() != self.params.len() {
            problems.push(format!(
                "model has {} tensors, checkpoint {}",
                store.len(),
                self.params.len()
            ));
        }
        for ((_, want), (_, have)) in store.iter().zip(self.params.iter()) {
            if want.name != have.name || want.tensor.shape() != have.tensor.shape() {
                problems.push(format!(
                    "{} {:?} vs checkpoint {} {:?}",
                    want.name,
                    want.tensor.shape(),
                    have.name,
                    have.tensor.shape()
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        for (dst, (_, src)) in store.iter_mut().zip(self.params.iter()) {
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }
}

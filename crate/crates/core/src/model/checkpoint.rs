//! FCK1 checkpoint container.
//!
//! ```text
//! "FCK1"
//! u32 model kind (0 faim, 1 direct, 2 identity)
//! u32 nx, ny, nz          training input dims
//! u32 n, then n u32 words config block
//!                         faim: [#kernels, kernels.., branch_channels, c0, c1, c2, head_kernel]
//!                         direct / identity: empty
//! u32 parameter count, then per parameter:
//!     u32 name length, UTF-8 name, u32 rank, rank x u32 extents, f32 payload
//! u32 optimizer state count, then per state:
//!     u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps,
//!     u32 moment pair count, then per pair: first moment, second moment,
//!     each as u32 rank, extents, f32 payload
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::{FaimConfig, Model, ModelParams, NamedTensor};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::volume::Dims;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Input dims the model was trained on.
    pub dims: Dims,
    /// One state for the network, or one per direct field.
    pub optim: Vec<AdamState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len());
        for &s in t.shape() {
            self.u32(s);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                what: "checkpoint",
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank == 0 || rank > 8 {
            return Err(Error::Parse {
                what: "checkpoint",
                detail: format!("tensor rank {rank}"),
            });
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &s| a.checked_mul(s)).ok_or_else(|| Error::Parse {
            what: "checkpoint",
            detail: "tensor size overflow".into(),
        })?;
        let raw = self.take(n.saturating_mul(4))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn write_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    let (kind, words) = match &ck.model {
        Model::Faim { cfg, .. } => {
            let mut words = vec![cfg.branch_kernels.len()];
            words.extend(&cfg.branch_kernels);
            words.extend([cfg.branch_channels, cfg.c0, cfg.c1, cfg.c2, cfg.head_kernel]);
            (0, words)
        }
        Model::Direct { .. } => (1, vec![]),
        Model::Identity => (2, vec![]),
    };
    w.u32(kind);
    for d in ck.dims.as_array() {
        w.u32(d);
    }
    w.u32(words.len());
    for v in words {
        w.u32(v);
    }
    let empty = ModelParams::default();
    let params = ck.model.params().unwrap_or(&empty);
    w.u32(params.len());
    for p in params.iter() {
        w.u32(p.name.len());
        w.0.extend_from_slice(p.name.as_bytes());
        w.tensor(&p.tensor);
    }
    w.u32(ck.optim.len());
    for s in &ck.optim {
        w.u64(s.step);
        w.f64(s.lr);
        w.f64(s.beta1);
        w.f64(s.beta2);
        w.f64(s.eps);
        w.u32(s.m.len());
        for (m, v) in s.m.iter().zip(&s.v) {
            w.tensor(m);
            w.tensor(v);
        }
    }
    w.0
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic("not an FCK1 checkpoint".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let kind = r.u32()?;
    let dims = Dims::new(r.u32()?, r.u32()?, r.u32()?);
    let n_words = r.u32()?;
    let words = (0..n_words).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n_params = r.u32()?;
    let mut params = ModelParams::default();
    for _ in 0..n_params {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Parse {
                what: "checkpoint",
                detail: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        params.push(NamedTensor::new(name, r.tensor()?));
    }
    let model = match kind {
        0 => {
            let bad = || Error::Parse {
                what: "checkpoint",
                detail: "malformed network config block".into(),
            };
            let nk = *words.first().ok_or_else(bad)?;
            if words.len() != 1 + nk + 5 {
                return Err(bad());
            }
            let cfg = FaimConfig {
                branch_kernels: words[1..1 + nk].to_vec(),
                branch_channels: words[1 + nk],
                c0: words[2 + nk],
                c1: words[3 + nk],
                c2: words[4 + nk],
                head_kernel: words[5 + nk],
            };
            cfg.validate()?;
            Model::Faim { cfg, params }
        }
        1 => Model::Direct { fields: params },
        2 => Model::Identity,
        other => return Err(Error::UnsupportedKind(format!("checkpoint model kind {other}"))),
    };
    let n_states = r.u32()?;
    let mut optim = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let step = r.u64()?;
        let lr = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let n = r.u32()?;
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            m.push(r.tensor()?);
            v.push(r.tensor()?);
        }
        optim.push(AdamState {
            step,
            lr,
            beta1,
            beta2,
            eps,
            m,
            v,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            what: "checkpoint",
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint { model, dims, optim })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

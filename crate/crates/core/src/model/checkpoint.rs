//! Binary checkpoint: header, tensor shapes, weights, optional Adam moments.
//!
//! Layout (little-endian): `CPVM`, version u32, mode u8, dim u32, scalar width
//! u8 (4 or 8), tensor count u32, each tensor's rank u32 and dims u32, then
//! all weights. An Adam flag u8 follows; when set: step u64, lr, beta1, beta2,
//! eps as f64, then first and second moments in parameter order.

use std::path::Path;

use crate::error::{CpvError, Result};
use crate::io::{write_atomic, Reader};
use crate::nn::{AdamConfig, AdamState};
use crate::Scalar;

use super::{ConditioningMode, CpvModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPVM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> CpvError {
    CpvError::CorruptCheckpoint(msg.into())
}

fn put_scalars<T: Scalar>(out: &mut Vec<u8>, width: u8, vals: &[T]) {
    for &v in vals {
        if width == 8 {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        } else {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
}

fn get_scalars<T: Scalar>(r: &mut Reader<'_>, width: u8, n: usize) -> Result<Vec<T>> {
    (0..n)
        .map(|_| {
            let v = if width == 8 { r.f64() } else { r.f32().map(f64::from) };
            v.map(T::from_f64_lossy).ok_or_else(|| corrupt("truncated weights"))
        })
        .collect()
}

struct Header {
    mode: ConditioningMode,
    dim: usize,
    width: u8,
    shapes: Vec<Vec<usize>>,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    if r.bytes(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mode = r.u8().and_then(ConditioningMode::from_id).ok_or_else(|| corrupt("bad mode"))?;
    let dim = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
    let width = r.u8().ok_or_else(|| corrupt("truncated header"))?;
    if width != 4 && width != 8 {
        return Err(corrupt(format!("bad scalar width {width}")));
    }
    let count = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
    if count > 64 {
        return Err(corrupt(format!("implausible tensor count {count}")));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32().ok_or_else(|| corrupt("truncated shape"))? as usize;
        if rank > 8 {
            return Err(corrupt(format!("implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize).ok_or_else(|| corrupt("truncated shape")))
            .collect::<Result<Vec<_>>>()?;
        shapes.push(dims);
    }
    Ok(Header { mode, dim, width, shapes })
}

impl<T: Scalar> CpvModel<T> {
    pub fn to_checkpoint_bytes(&self, adam: Option<&AdamState<T>>) -> Vec<u8> {
        let width = std::mem::size_of::<T>() as u8;
        let params = self.params();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.mode.id());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.push(width);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for t in &params {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in &params {
            put_scalars(&mut out, width, t.data());
        }
        match adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for m in a.m.iter().chain(&a.v) {
                    put_scalars(&mut out, width, m);
                }
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(CpvModel<T>, Option<AdamState<T>>)> {
        let header = read_header(&mut Reader::new(bytes))?;
        let mut model = CpvModel::new(header.mode, header.dim, 0);
        let adam = model.load_checkpoint_bytes(bytes)?;
        Ok((model, adam))
    }

    /// Loads weights into an existing architecture, rejecting any mismatch.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<Option<AdamState<T>>> {
        let mut r = Reader::new(bytes);
        let h = read_header(&mut r)?;
        if h.mode != self.mode || h.dim != self.dim() {
            return Err(CpvError::Shape(format!(
                "checkpoint is {} with dim {}, model is {} with dim {}",
                h.mode,
                h.dim,
                self.mode,
                self.dim()
            )));
        }
        let expected: Vec<Vec<usize>> = self.params().iter().map(|t| t.shape().to_vec()).collect();
        if h.shapes != expected {
            return Err(CpvError::Shape("checkpoint tensor shapes do not match the model".into()));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for s in &expected {
            loaded.push(get_scalars::<T>(&mut r, h.width, s.iter().product())?);
        }
        let adam = match r.u8().ok_or_else(|| corrupt("missing optimizer flag"))? {
            0 => None,
            1 => {
                let step = r.u64().ok_or_else(|| corrupt("truncated optimizer state"))?;
                let mut cfg = [0.0; 4];
                for c in &mut cfg {
                    *c = r.f64().ok_or_else(|| corrupt("truncated optimizer state"))?;
                }
                let config = AdamConfig { lr: cfg[0], beta1: cfg[1], beta2: cfg[2], eps: cfg[3] };
                let sizes: Vec<usize> = expected.iter().map(|s| s.iter().product()).collect();
                let mut state = AdamState::new(config, &sizes);
                state.step = step;
                for (m, &n) in state.m.iter_mut().chain(state.v.iter_mut()).zip(sizes.iter().cycle()) {
                    *m = get_scalars(&mut r, h.width, n)?;
                }
                Some(state)
            }
            f => return Err(corrupt(format!("bad optimizer flag {f}"))),
        };
        if r.remaining() != 0 {
            return Err(corrupt(format!("{} trailing bytes", r.remaining())));
        }
        for (t, data) in self.params_mut().into_iter().zip(loaded) {
            t.data_mut().copy_from_slice(&data);
        }
        Ok(adam)
    }

    pub fn save_checkpoint(&self, path: &Path, adam: Option<&AdamState<T>>) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_bytes(adam))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(CpvModel<T>, Option<AdamState<T>>)> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optimizer() {
        let m = CpvModel::<f32>::new(ConditioningMode::Cpv, 8, 4);
        let sizes: Vec<usize> = m.params().iter().map(|t| t.len()).collect();
        let mut adam = AdamState::new(AdamConfig::default(), &sizes);
        adam.step = 7;
        adam.m[3][0] = 0.5;
        adam.v[2][1] = 0.25;
        let bytes = m.to_checkpoint_bytes(Some(&adam));
        let (back, a) = CpvModel::<f32>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(a.unwrap(), adam);
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let m = CpvModel::<f64>::new(ConditioningMode::Naive, 4, 9);
        let (back, a) = CpvModel::<f64>::from_checkpoint_bytes(&m.to_checkpoint_bytes(None)).unwrap();
        assert_eq!(back, m);
        assert!(a.is_none());
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let bytes = CpvModel::<f32>::new(ConditioningMode::Cpv, 128, 0).to_checkpoint_bytes(None);
        let mut big = CpvModel::<f32>::new(ConditioningMode::Cpv, 512, 0);
        assert!(matches!(big.load_checkpoint_bytes(&bytes), Err(CpvError::Shape(_))));
        let mut te = CpvModel::<f32>::new(ConditioningMode::Te, 128, 0);
        assert!(matches!(te.load_checkpoint_bytes(&bytes), Err(CpvError::Shape(_))));
    }

    #[test]
    fn truncation_and_garbage_are_corrupt() {
        let bytes = CpvModel::<f32>::new(ConditioningMode::Te, 4, 0).to_checkpoint_bytes(None);
        for cut in [0, 3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            let r = CpvModel::<f32>::from_checkpoint_bytes(&bytes[..cut]);
            assert!(matches!(r, Err(CpvError::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(CpvModel::<f32>::from_checkpoint_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(CpvModel::<f32>::from_checkpoint_bytes(&bad), Err(CpvError::CorruptCheckpoint(_))));
    }
}

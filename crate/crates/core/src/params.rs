//! Named parameter collections and the checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  b"SSHARCKP"
//! version      u32      = 1
//! count        u32      number of entries
//! per entry:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   frozen     u8       0 or 1
//!   ndim       u32
//!   dims       ndim x u64
//!   values     prod(dims) x f64 (IEEE-754, little-endian)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSHARCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

impl ParamEntry {
    /// Weight matrices and kernels are regularized; biases are not.
    pub fn is_weight(&self) -> bool {
        !self.name.ends_with(".bias")
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            tensor,
            frozen: false,
        });
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| invalid!("no parameter named {name}"))
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in self
            .entries
            .iter_mut()
            .filter(|e| e.name.starts_with(prefix))
        {
            e.frozen = frozen;
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entry(name).is_some_and(|e| e.frozen)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Copies every entry whose name starts with `prefix` from `source`, which
    /// must hold an identically shaped tensor under the same name.
    pub fn copy_prefix_from(&mut self, source: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in self
            .entries
            .iter_mut()
            .filter(|e| e.name.starts_with(prefix))
        {
            let src = source
                .get(&e.name)
                .ok_or_else(|| shape_err!("source has no parameter {}", e.name))?;
            if src.shape() != e.tensor.shape() {
                return Err(shape_err!(
                    "{}: source shape {:?} differs from target {:?}",
                    e.name,
                    src.shape(),
                    e.tensor.shape()
                ));
            }
            e.tensor = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Registers every entry as a graph leaf. Frozen entries do not require
    /// gradients.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| g.leaf(e.tensor.clone(), !e.frozen))
                .collect(),
            names: self.entries.iter().map(|e| e.name.clone()).collect(),
        }
    }

    /// Fresh Adam state covering the trainable entries.
    pub fn adam(&self, config: AdamConfig) -> AdamState {
        let lens: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.tensor.len())
            .collect();
        AdamState::new(config, &lens)
    }

    /// Applies one optimizer update from the gradients accumulated in `g`.
    /// Trainable entries that received no gradient are treated as zero-gradient.
    pub fn apply_adam(&mut self, state: &mut AdamState, g: &Graph, bound: &Bound) -> Result<()> {
        let zeros: Vec<Vec<f64>> = self
            .entries
            .iter()
            .zip(&bound.vars)
            .filter(|(e, v)| !e.frozen && g.grad(**v).is_none())
            .map(|(e, _)| vec![0.0; e.tensor.len()])
            .collect();
        let mut zero_iter = zeros.iter();
        let mut grads: Vec<&[f64]> = Vec::new();
        let mut params: Vec<&mut [f64]> = Vec::new();
        for (e, v) in self.entries.iter_mut().zip(&bound.vars) {
            if e.frozen {
                continue;
            }
            grads.push(match g.grad(*v) {
                Some(gr) => gr,
                None => zero_iter.next().expect("zero buffer per missing gradient"),
            });
            params.push(e.tensor.data_mut());
        }
        state.step(&mut params, &grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[u8::from(e.frozen)])?;
            w.write_all(&(e.tensor.ndim() as u32).to_le_bytes())?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(
                "not a parameter checkpoint (bad magic)".into(),
            ));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut frozen = [0u8];
            r.read_exact(&mut frozen)?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(read_f64(r)?);
            }
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            if store.index_of(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            store.entries.push(ParamEntry {
                name,
                tensor,
                frozen: frozen[0] != 0,
            });
        }
        Ok(store)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Graph handles for a [`ParamStore`], parallel to its entries.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Trainable weight (non-bias) handles, the L2-regularized set.
    pub fn trainable_weights(&self, store: &ParamStore) -> Vec<Var> {
        store
            .entries()
            .iter()
            .zip(&self.vars)
            .filter(|(e, _)| !e.frozen && e.is_weight())
            .map(|(_, v)| *v)
            .collect()
    }
}

/// `U(-a, a)` with `a = gain / sqrt(fan_in + fan_out)`; `gain = sqrt(6)` is
/// Glorot-uniform.
pub fn fan_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut Rng,
) -> Tensor {
    let limit = gain / ((fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn sample_store() -> ParamStore {
        let mut rng = rng_from(1);
        let mut s = ParamStore::new();
        s.push("a.kernel", fan_uniform(&[3, 2, 4], 6, 12, 1.0, &mut rng));
        s.push("a.bias", Tensor::zeros(&[4]));
        s.push("b.weight", fan_uniform(&[4, 2], 4, 2, 1.0, &mut rng));
        s.set_frozen_prefix("a.", true);
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(back.is_frozen("a.kernel"));
        assert!(!back.is_frozen("b.weight"));
    }

    #[test]
    fn checkpoint_layout_header() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SSHARCKP");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        let first_name_len = u32::from_le_bytes(buf[16..20].try_into().unwrap());
        assert_eq!(&buf[20..20 + first_name_len as usize], b"a.kernel");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParamStore::read_from(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(ParamStore::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn copy_prefix_checks_shapes() {
        let s = sample_store();
        let mut t = ParamStore::new();
        t.push("a.kernel", Tensor::zeros(&[3, 2, 4]));
        t.push("a.bias", Tensor::ones(&[4]));
        assert_eq!(t.copy_prefix_from(&s, "a.").unwrap(), 2);
        assert_eq!(t.get("a.kernel"), s.get("a.kernel"));
        let mut bad = ParamStore::new();
        bad.push("a.kernel", Tensor::zeros(&[2, 2, 4]));
        assert!(bad.copy_prefix_from(&s, "a.").is_err());
    }

    #[test]
    fn biases_are_not_weights() {
        let s = sample_store();
        let flags: Vec<bool> = s.entries().iter().map(|e| e.is_weight()).collect();
        assert_eq!(flags, [true, false, true]);
    }
}

//! Named parameter storage, tape binding, and the checkpoint file format.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::tensor::{Prng, Real, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "bridgepan-ckpt-1";

/// Ordered map of parameter tensors. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect() }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_const(&self, tape: &Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect() }
    }
}

/// Parameters recorded on a tape, addressed by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Binds externally recorded variables under the given names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// He-normal initialisation with the given fan-in.
pub fn he_normal<T: Real>(prng: &mut Prng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(std * prng.gaussian()))
}

/// Normal initialisation with a fixed standard deviation.
pub fn normal<T: Real>(prng: &mut Prng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(std * prng.gaussian()))
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: serde_json::Value,
    params: Vec<ManifestEntry>,
}

/// JSON manifest line followed by little-endian `f32` parameter data in
/// manifest order.
pub fn encode_checkpoint(store: &ParamStore<f32>, config: &serde_json::Value) -> Vec<u8> {
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        config: config.clone(),
        params: store.iter().map(|(k, v)| ManifestEntry { name: k.clone(), shape: v.shape().to_vec() }).collect(),
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serialises");
    out.push(b'\n');
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(bytes.len() as u64, "missing manifest terminator"))?;
    let m: Manifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(e.column().saturating_sub(1) as u64, format!("bad manifest: {e}")))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::format(0, format!("unknown checkpoint format {:?}", m.format)));
    }
    let mut off = nl + 1;
    let mut store = ParamStore::new();
    for e in m.params {
        let n: usize = e.shape.iter().product();
        let end = off + 4 * n;
        if end > bytes.len() {
            return Err(Error::format(bytes.len() as u64, format!("truncated data for parameter {}", e.name)));
        }
        let data: Vec<f32> =
            bytes[off..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((off + 4 * i) as u64, format!("non-finite value in {}", e.name)));
        }
        store.insert(e.name, Tensor::new(&e.shape, data)?)?;
        off = end;
    }
    if off != bytes.len() {
        return Err(Error::format(off as u64, "trailing bytes after parameter data"));
    }
    Ok((store, m.config))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>, config: &serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_checkpoint(store, config))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    decode_checkpoint(&read_file(path)?)
}

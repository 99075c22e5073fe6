//! Named parameter arrays with seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A set of named tensors that are either trainable (`Var`) or frozen.
#[derive(Clone, Debug)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
}

impl Params {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, trainable: bool) -> Result<Self> {
        let mut out = Self {
            tensors: BTreeMap::new(),
            vars: BTreeMap::new(),
        };
        for (name, t) in tensors {
            if trainable {
                let v = Var::from_tensor(&t)?;
                out.tensors.insert(name.clone(), v.as_tensor().clone());
                out.vars.insert(name, v);
            } else {
                out.tensors.insert(name, t.detach());
            }
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Interface(format!("missing parameter '{name}'")))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn is_trainable(&self) -> bool {
        !self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Deep copy of current values, detached from any graph. Optimizer
    /// updates write into variable storage in place, so sharing it would
    /// let later steps leak into the copy.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.detach().copy()?)))
            .collect()
    }

    /// Copy with detached tensors; gradients never reach these values.
    pub fn frozen(&self) -> Result<Self> {
        Ok(Self {
            tensors: self.snapshot()?,
            vars: BTreeMap::new(),
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_tensors(tensors, self.is_trainable())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.elem_count()).sum()
    }

    /// SHA-256 over names, shapes, dtypes and raw little-endian values.
    pub fn digest(&self) -> Result<String> {
        digest_tensors(&self.tensors)
    }
}

pub fn digest_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update(format!("{:?}{:?}", t.dims(), t.dtype()).as_bytes());
        h.update(tensor_bytes(t)?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(Error::Interface(format!("unsupported dtype {other:?}"))),
    })
}

/// Seeded initializer producing deterministic tensors.
pub struct Initializer {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Initializer {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Result<Tensor> {
        Ok(Tensor::full(value, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// He-normal 3×3 convolution kernel plus bias.
    pub fn conv(&mut self, c_out: usize, c_in: usize, gain: f64) -> Result<(Tensor, Tensor)> {
        let std = (gain / (9 * c_in) as f64).sqrt();
        Ok((
            self.normal(&[c_out, c_in, 3, 3], std)?,
            self.constant(&[c_out], 0.0)?,
        ))
    }

    pub fn linear(&mut self, c_out: usize, c_in: usize, gain: f64) -> Result<(Tensor, Tensor)> {
        let std = (gain / c_in as f64).sqrt();
        Ok((
            self.normal(&[c_out, c_in], std)?,
            self.constant(&[c_out], 0.0)?,
        ))
    }
}

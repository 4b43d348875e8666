use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

/// Named, seeded parameter storage.
///
/// Cloning a store yields a handle to the same variables.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.len())
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .finish()
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the store seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device,
            seed,
        }
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform(bound) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Returns the variable `name`, creating it on first use.
    pub fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(var) = vars.get(name) {
            if var.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    var.dims(),
                    shape
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let var = Var::from_tensor(&self.init_tensor(name, shape, init)?)?;
        let t = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars_matching(&self, pred: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.vars()
            .into_iter()
            .filter(|(n, _)| pred(n))
            .collect()
    }

    /// SHA-256 over the names, shapes and raw bytes of the selected parameters.
    pub fn hash(&self, pred: impl Fn(&str) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars_matching(pred) {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(tensor_bytes(var.as_tensor())?);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrites every parameter with the value from `other`; names and shapes
    /// must match exactly.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let theirs = other.vars();
        let mine = self.vars();
        if theirs.len() != mine.len() {
            return Err(Error::Shape(format!(
                "parameter count mismatch: {} vs {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((n1, v1), (n2, v2)) in mine.iter().zip(theirs.iter()) {
            if n1 != n2 || v1.dims() != v2.dims() {
                return Err(Error::Shape(format!("parameter mismatch: {n1} vs {n2}")));
            }
        }
        for ((_, v1), (_, v2)) in mine.iter().zip(theirs.iter()) {
            v1.set(&v2.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// Deep copy of the current parameter values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars() {
            let t = snapshot
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("snapshot lacks {name}")))?;
            var.set(t)?;
        }
        Ok(())
    }
}

/// Little-endian bytes of a tensor in its native dtype.
pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::U32 => flat
            .to_vec1::<u32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(Error::Config(format!("unsupported dtype {other:?}"))),
    })
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get_or_init(&self.path(name), shape, init)
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let a = ParamStore::new(DType::F32, Device::Cpu, 11);
        let b = ParamStore::new(DType::F32, Device::Cpu, 11);
        a.root().get("x", &[3], Init::Normal(1.0)).unwrap();
        a.root().get("y", &[3], Init::Normal(1.0)).unwrap();
        b.root().get("y", &[3], Init::Normal(1.0)).unwrap();
        b.root().get("x", &[3], Init::Normal(1.0)).unwrap();
        assert_eq!(a.hash(|_| true).unwrap(), b.hash(|_| true).unwrap());
    }

    #[test]
    fn shared_lookup_returns_same_storage() {
        let s = ParamStore::new(DType::F32, Device::Cpu, 0);
        let t1 = s.root().pp("l").get("w", &[2, 2], Init::Const(0.5)).unwrap();
        let t2 = s.root().pp("l").get("w", &[2, 2], Init::Const(0.5)).unwrap();
        assert_eq!(t1.id(), t2.id());
        assert!(s.root().pp("l").get("w", &[3], Init::Const(0.5)).is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let s = ParamStore::new(DType::F64, Device::Cpu, 0);
        s.root().get("w", &[2], Init::Const(1.0)).unwrap();
        let h0 = s.hash(|_| true).unwrap();
        let v = s.get("w").unwrap();
        v.set(&Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap()).unwrap();
        assert_ne!(h0, s.hash(|_| true).unwrap());
    }
}

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named, seeded parameter storage. Iteration order is the name order, so
/// checkpoints and optimizers see parameters deterministically.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Const(f32),
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor)>, seed: u64) -> Result<Self> {
        let mut store = Self::new(seed);
        for (name, t) in tensors {
            store.vars.insert(name, Var::from_tensor(&t)?);
        }
        Ok(store)
    }

    /// Gets `name`, creating it with `init` if absent. Existing entries must match `shape`.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu)?)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn insert(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        self.vars.insert(name.to_string(), Var::from_tensor(tensor)?);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// All variables whose names start with `prefix`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Bitwise snapshot of every parameter under `prefix`.
    pub fn snapshot(&self, prefix: &str) -> Result<Vec<(String, Vec<u32>)>> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| {
                let bits = v
                    .as_tensor()
                    .flatten_all()?
                    .to_vec1::<f32>()?
                    .into_iter()
                    .map(f32::to_bits)
                    .collect();
                Ok((k.clone(), bits))
            })
            .collect()
    }

    /// Copies every tensor of `other` under `from` into this store under `to`.
    pub fn copy_prefix(&mut self, other: &ParamStore, from: &str, to: &str) -> Result<()> {
        for (name, var) in other.vars.iter().filter(|(k, _)| k.starts_with(from)) {
            let renamed = format!("{to}{}", &name[from.len()..]);
            let copy = var.as_tensor().copy()?;
            self.vars.insert(renamed, Var::from_tensor(&copy)?);
        }
        Ok(())
    }
}

/// Hands out parameters under a name prefix, either trainable or frozen.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    frozen: bool,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: &str) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
            frozen: false,
        }
    }

    /// Parameters handed out are detached from the autograd graph, so no
    /// gradient ever reaches them.
    pub fn frozen(store: &'a mut ParamStore, prefix: &str) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
            frozen: true,
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() || self.prefix.ends_with('.') {
            format!("{}{name}", self.prefix)
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            prefix,
            frozen: self.frozen,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() || self.prefix.ends_with('.') {
            format!("{}{name}", self.prefix)
        } else {
            format!("{}.{name}", self.prefix)
        };
        let var = self.store.get_or_init(&full, shape, init)?;
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }
}

pub fn scalar(v: f32) -> Result<Tensor> {
    Ok(Tensor::new(v, &Device::Cpu)?.to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible_and_prefix_scoped() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        for s in [&mut a, &mut b] {
            let mut root = Builder::new(s, "net");
            root.sub("conv").tensor("weight", &[2, 3], Init::Uniform { fan_in: 3 }).unwrap();
            root.sub("norm").tensor("gamma", &[2], Init::Const(1.0)).unwrap();
        }
        assert_eq!(a.snapshot("").unwrap(), b.snapshot("").unwrap());
        assert_eq!(a.vars_with_prefix("net.conv").len(), 1);
        assert_eq!(a.names().collect::<Vec<_>>(), vec!["net.conv.weight", "net.norm.gamma"]);
        assert!(a.get_or_init("net.norm.gamma", &[3], Init::Const(0.0)).is_err());
    }

    #[test]
    fn frozen_tensors_do_not_receive_gradients() {
        let mut store = ParamStore::new(0);
        let w = Builder::frozen(&mut store, "f").tensor("w", &[3], Init::Const(2.0)).unwrap();
        let t = Builder::new(&mut store, "t").tensor("w", &[3], Init::Const(1.0)).unwrap();
        let loss = (w * &t).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(store.get("f.w").unwrap().as_tensor()).is_none());
        assert!(grads.get(store.get("t.w").unwrap().as_tensor()).is_some());
    }
}

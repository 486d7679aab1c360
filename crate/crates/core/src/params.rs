//! Named, trainable parameter storage.
//!
//! Every learnable tensor in the model is registered here under a stable
//! dotted name (`encoder.pixel.stem.conv.weight`, `decoder.levels.0.ca.q.weight`,
//! ...). The names are the checkpoint schema, so they must not change once a
//! layout ships.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Parameter count grouped by the first `depth` components of each name.
    pub fn count_by_prefix(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += var.elem_count();
        }
        out
    }

    fn insert(&mut self, name: String, tensor: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    /// Overwrite the value of an existing parameter, keeping its identity.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, archive holds {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Registers parameters under a name prefix, drawing initial values from a
/// seeded generator so that construction is a pure function of the seed.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder for the child namespace `prefix.name`.
    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn register(&mut self, name: &str, data: Vec<f64>, shape: Shape) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    /// Normal(0, std) truncated to ±2·std by resampling.
    pub fn trunc_normal(&mut self, name: &str, shape: impl Into<Shape>, std: f64) -> Result<Tensor> {
        let shape = shape.into();
        let data = trunc_normal_vec(self.rng, shape.elem_count(), std);
        self.register(name, data, shape)
    }

    /// He-normal initialisation, std = sqrt(2 / fan_in).
    pub fn he_normal(&mut self, name: &str, shape: impl Into<Shape>, fan_in: usize) -> Result<Tensor> {
        let shape = shape.into();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..shape.elem_count())
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.register(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Tensor> {
        let shape = shape.into();
        let data = vec![value; shape.elem_count()];
        self.register(name, data, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: impl Into<Shape>) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }

    pub fn ones(&mut self, name: &str, shape: impl Into<Shape>) -> Result<Tensor> {
        self.constant(name, shape, 1.0)
    }
}

pub fn trunc_normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            out.push(z * std);
        }
    }
    out
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, stream, index)`; used so that data
/// augmentation does not depend on how work is split across workers.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_values_stay_within_two_sigma() {
        let mut rng = seeded_rng(3);
        let v = trunc_normal_vec(&mut rng, 10_000, 0.02);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = seeded_rng(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        pb.zeros("w", 3).unwrap();
        assert!(pb.zeros("w", 3).is_err());
    }

    #[test]
    fn prefixes_nest() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = seeded_rng(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        pb.pp("a").pp("b").ones("w", (2, 2)).unwrap();
        assert!(store.get("a.b.w").is_some());
        assert_eq!(store.count(), 4);
    }

    #[test]
    fn stream_rngs_differ_by_index() {
        let a: u64 = stream_rng(1, 2, 3).random();
        let b: u64 = stream_rng(1, 2, 4).random();
        let c: u64 = stream_rng(1, 2, 3).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Adam with decoupled weight decay. Moments are keyed by parameter name so
/// they can be checkpointed alongside the weights.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of all gradients present in `grads`.
    pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0f64;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update with learning rate `lr`, gradients multiplied by `grad_scale`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if grad_scale != 1.0 { (g * grad_scale)? } else { g.clone() };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let p = var.as_tensor();
            let decayed = (p * (1.0 - lr * self.weight_decay))?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors as `optim.m.<name>` / `optim.v.<name>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("optim.m.{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("optim.v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn restore(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("optim.m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("optim.v.") {
                self.v.insert(name.to_string(), t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry `{k}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ParamBuilder};
    use candle_core::{DType, Device};

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = seeded_rng(0);
        ParamBuilder::new(&mut store, &mut rng).constant("x", 3, 2.0).unwrap();
        let mut opt = AdamW::new(0.0);
        for _ in 0..500 {
            let x = store.get("x").unwrap().as_tensor();
            let loss = (x - 0.5).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads, 0.05, 1.0).unwrap();
        }
        let x: Vec<f64> = store.get("x").unwrap().as_tensor().to_vec1().unwrap();
        assert!(x.iter().all(|v| (v - 0.5).abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g) regardless of magnitude
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = seeded_rng(0);
        ParamBuilder::new(&mut store, &mut rng).constant("x", 1, 1.0).unwrap();
        let mut opt = AdamW::new(0.0);
        let loss = (store.get("x").unwrap().as_tensor() * 123.0).unwrap().sum_all().unwrap();
        opt.step(&store, &loss.backward().unwrap(), 0.01, 1.0).unwrap();
        let x: Vec<f64> = store.get("x").unwrap().as_tensor().to_vec1().unwrap();
        assert!((x[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_without_gradient_signal() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = seeded_rng(0);
        ParamBuilder::new(&mut store, &mut rng).constant("x", 1, 2.0).unwrap();
        let mut opt = AdamW::new(0.1);
        let x = store.get("x").unwrap().as_tensor();
        // a scalar multiply by 0.0 is pruned from the graph; a tensor one is not
        let loss = (x * Tensor::zeros(1, DType::F64, &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        opt.step(&store, &loss.backward().unwrap(), 0.5, 1.0).unwrap();
        let x: Vec<f64> = store.get("x").unwrap().as_tensor().to_vec1().unwrap();
        assert!((x[0] - 2.0 * 0.95).abs() < 1e-9, "{x:?}");
    }
}

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// Adam with decoupled weight decay. State is kept as plain tensors so
/// checkpoints can store and restore it exactly.
pub struct AdamW {
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, weight_decay: f64) -> Result<Self> {
        let first = params
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<_>>()?;
        let second = params
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<_>>()?;
        Ok(Self {
            params,
            first,
            second,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the gradients that reach the managed parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Gradients are rescaled to `clip` global norm when above it.
    /// Parameters without a gradient are left untouched. Returns the pre-clip norm.
    pub fn step(&mut self, grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        let scale = match clip {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g * scale)?;
            let m = ((&self.first[k] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[k] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let theta = var.as_tensor().detach();
            let theta = ((&theta * (1.0 - lr * self.weight_decay))? - (update * lr)?)?;
            var.set(&theta)?;
            self.first[k] = m;
            self.second[k] = v;
        }
        Ok(norm)
    }

    /// Moment tensors keyed `<param>.m` / `<param>.v`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.params.len() * 2);
        for (k, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("{name}.m"), self.first[k].clone()));
            out.push((format!("{name}.v"), self.second[k].clone()));
        }
        out
    }

    pub fn restore(
        &mut self,
        state: &std::collections::HashMap<String, Tensor>,
        step: u64,
    ) -> Result<()> {
        for (k, (name, var)) in self.params.iter().enumerate() {
            for (suffix, slot) in [("m", &mut self.first[k]), ("v", &mut self.second[k])] {
                let t = state.get(&format!("{name}.{suffix}")).ok_or_else(|| {
                    crate::error::Error::Corrupted(format!(
                        "optimizer state lacks `{name}.{suffix}`"
                    ))
                })?;
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

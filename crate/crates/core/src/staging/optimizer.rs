use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::numerics::{Real, Tensor};

use super::ParamMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW with decoupled weight decay; moments keyed by tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    /// Drop all moments and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }

    pub fn tracked(&self) -> usize {
        self.moments.len()
    }

    /// Advance the shared step counter; call once per optimisation step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update `param` in place. Frozen coordinates and their moments are untouched.
    pub fn update<T: Real>(
        &mut self,
        name: &str,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        mask: &ParamMask,
        decay: bool,
    ) -> Result<()> {
        if param.dims() != grad.dims() {
            return Err(shape_err!("{name}: param {:?} vs grad {:?}", param.dims(), grad.dims()));
        }
        if let ParamMask::Slices(bits) = mask {
            if bits.len() != param.len() {
                return Err(shape_err!("{name}: mask of {} for {} coordinates", bits.len(), param.len()));
            }
        }
        if matches!(mask, ParamMask::Frozen) {
            return Ok(());
        }
        let c = self.config;
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let wd = if decay { c.weight_decay } else { 0.0 };
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        for (i, (w, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            if !mask.trainable(i) {
                continue;
            }
            let g = g.as_f64();
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            let x = w.as_f64();
            *w = T::lit(x - c.lr * wd * x - c.lr * step);
        }
        Ok(())
    }
}

//! AdamW with linear warmup and global gradient-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl OptimConfig {
    /// Learning rate for the update numbered `step` (the first update is 1).
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.lr * step as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

pub fn global_norm<T: Real>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .map(|g| g.sq_norm().to_f64_lossy())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
}

/// Decoupled-weight-decay Adam. Weight decay applies to matrices only
/// (biases, norms, Layer Scale and single-vector embeddings are exempt).
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        mut grads: BTreeMap<String, Tensor<T>>,
    ) -> Result<StepStats> {
        let grad_norm = match self.config.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step as usize + 1,
                msg: "non-finite gradient norm".into(),
            });
        }
        self.step += 1;
        let c = self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let f = T::from_f64_lossy;
        let (b1, b2, eps) = (f(c.beta1), f(c.beta2), f(c.eps));
        let (step_size, corr2) = (f(lr / bc1), f(bc2.sqrt()));
        for (name, g) in grads {
            let Some(param) = params.iter_mut().find(|(n, _)| *n == name).map(|(_, p)| p) else {
                return Err(Error::MissingParam(name));
            };
            if !param.trainable {
                continue;
            }
            let p = &mut param.value;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient for {name}")));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let decay = if p.rows() > 1 && c.weight_decay != 0.0 {
                f(1.0 - lr * c.weight_decay)
            } else {
                T::one()
            };
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (T::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                let denom = vd[i].sqrt() / corr2 + eps;
                pd[i] = pd[i] * decay - step_size * md[i] / denom;
            }
        }
        Ok(StepStats { lr, grad_norm })
    }

    /// Moment buffers and the step counter as a flat parameter set
    /// (`m.<name>`, `v.<name>`, `step`), for checkpointing.
    pub fn state(&self) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        for (k, t) in &self.m {
            ps.insert(format!("m.{k}"), t.clone(), false);
        }
        for (k, t) in &self.v {
            ps.insert(format!("v.{k}"), t.clone(), false);
        }
        ps.insert("step", Tensor::scalar(T::from_u64(self.step).unwrap()), false);
        ps
    }

    pub fn load_state(config: OptimConfig, state: &ParamSet<T>) -> Result<Self> {
        let mut out = Self::new(config);
        for (k, p) in state.iter() {
            if let Some(n) = k.strip_prefix("m.") {
                out.m.insert(n.to_string(), p.value.clone());
            } else if let Some(n) = k.strip_prefix("v.") {
                out.v.insert(n.to_string(), p.value.clone());
            } else if k == "step" {
                out.step = p.value.item().to_f64_lossy() as u64;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor::from_fn(3, 3, |r, c| (r + c) as f64), true);
        let before = ps.clone();
        let mut opt = AdamW::new(OptimConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(3, 3));
        for _ in 0..3 {
            opt.step(&mut ps, grads.clone()).unwrap();
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn warmup_schedule() {
        let c = OptimConfig {
            lr: 1e-3,
            warmup_steps: 5000,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(2500), 1e-3 * 2500.0 / 5000.0);
        assert_eq!(c.lr_at(5000), 1e-3);
        assert_eq!(c.lr_at(90000), 1e-3);
    }

    #[test]
    fn clip_scales_unit_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::from_vec(1, 2, vec![0.6f64, 0.0]));
        grads.insert("b".to_string(), Tensor::from_vec(1, 1, vec![0.8f64]));
        let norm = clip_grad_norm(&mut grads, 1e-2);
        assert!((norm - 1.0).abs() < 1e-15);
        assert!((grads["a"].get(0, 0) - 0.6e-2).abs() < 1e-17);
        assert!((grads["b"].get(0, 0) - 0.8e-2).abs() < 1e-17);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Adam's bias-corrected first step is lr * sign(g) (up to eps)
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor::from_vec(1, 2, vec![1.0, 1.0]), true);
        let mut opt = AdamW::new(OptimConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(1, 2, vec![3.0, -0.5]));
        opt.step(&mut ps, grads).unwrap();
        let w = ps.get("w").unwrap();
        assert!((w.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((w.get(0, 1) - 1.1).abs() < 1e-7);
    }
}

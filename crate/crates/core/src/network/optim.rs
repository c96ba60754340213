use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

/// `min_lr + (base_lr - min_lr) (1 + cos(pi step / total)) / 2`, clamped to
/// `min_lr` once `step >= total_steps`.
pub fn cosine_anneal_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    if step >= total_steps {
        return min_lr;
    }
    let frac = step as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient entry are treated as having zero gradient. A non-finite
    /// gradient rejects the whole step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = store.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("gradient of {name} is {:?}, parameter is {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let decay = T::of(1.0 - lr * c.weight_decay);
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for (name, p) in store.params_mut() {
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            for i in 0..p.numel() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pi = p.data()[i] * decay;
                p.data_mut()[i] = pi - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_anneal_lr(0, 100, 3e-4, 0.0), 3e-4);
        assert_eq!(cosine_anneal_lr(100, 100, 3e-4, 1e-5), 1e-5);
        assert_eq!(cosine_anneal_lr(150, 100, 3e-4, 1e-5), 1e-5);
        assert!((cosine_anneal_lr(50, 100, 3e-4, 0.0) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let grads = BTreeMap::from([("x".to_string(), Tensor::scalar(1.0))]);
        opt.step(&mut store, &grads, 1e-2).unwrap();
        assert!((store.get("x").unwrap().data()[0] - (1.0 - 1e-2)).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::ones(&[2]));
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![0.0, f32::NAN]).unwrap())]);
        let err = opt.step(&mut store, &grads, 1e-3).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(store.get("w").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(opt.step, 0);
    }
}

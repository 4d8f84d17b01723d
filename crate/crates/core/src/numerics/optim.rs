use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplied into the learning rate once per epoch.
    pub lr_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 0.001,
            lr_decay: 0.98,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.lr_decay > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }

    /// Learning rate after `epoch` completed epochs.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Moment buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub step: u64,
}

/// One decoupled-weight-decay Adam update of every parameter named in
/// `grads`. Nothing is modified if any gradient is non-finite or misshapen.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.numel() != g.len() {
            return Err(Error::shape(format!("gradient for `{name}`"), p.shape(), &[g.len()]));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient `{name}` at index {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let decay = 1.0f32 - (lr * cfg.weight_decay) as f32;
    let lr32 = lr as f32;
    let (bc1, bc2, eps) = (bc1 as f32, bc2 as f32, cfg.eps as f32);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi *= decay;
            *pi -= lr32 * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one_param(values: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.insert("p", Tensor::new([n], values).unwrap());
        s
    }

    #[test]
    fn zero_grad_applies_exact_decay() {
        let vals = vec![1.0f32, -2.5, 3.25];
        let mut s = one_param(vals.clone());
        let grads = BTreeMap::from([("p".to_string(), vec![0.0; 3])]);
        let mut st = AdamWState::default();
        adamw_step(&mut s, &grads, &mut st, &AdamWConfig::default(), 0.01).unwrap();
        let factor = 1.0f32 - (0.01f64 * 0.001) as f32;
        let want: Vec<f32> = vals.iter().map(|v| v * factor).collect();
        assert_eq!(s.get("p").unwrap().data(), want.as_slice());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn no_decay_zero_grad_is_identity() {
        let vals = vec![0.3f32, -0.7];
        let mut s = one_param(vals.clone());
        let grads = BTreeMap::from([("p".to_string(), vec![0.0; 2])]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &grads, &mut AdamWState::default(), &cfg, 0.1).unwrap();
        assert_eq!(s.get("p").unwrap().data(), vals.as_slice());
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        // Bias-corrected first step: mhat = g, vhat = g^2, so update = lr*g/(|g|+eps).
        let mut s = one_param(vec![0.0, 0.0]);
        let grads = BTreeMap::from([("p".to_string(), vec![0.5, -2.0])]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &grads, &mut AdamWState::default(), &cfg, 0.01).unwrap();
        let d = s.get("p").unwrap().data();
        assert!((d[0] + 0.01).abs() < 1e-6 && (d[1] - 0.01).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut s = one_param(vec![1.0, 2.0]);
        let grads = BTreeMap::from([("p".to_string(), vec![0.1, f32::NAN])]);
        let mut st = AdamWState::default();
        let err = adamw_step(&mut s, &grads, &mut st, &AdamWConfig::default(), 0.01);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(s.get("p").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn lr_schedule_decays_per_epoch() {
        let cfg = AdamWConfig {
            lr: 1.0,
            ..Default::default()
        };
        assert!((cfg.lr_at_epoch(2) - 0.98 * 0.98).abs() < 1e-15);
    }
}

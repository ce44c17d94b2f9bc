//! Named parameter store with per-parameter Adam moments.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Parameters are keyed by name; iteration order is the name order, which
/// keeps optimizer sweeps deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(CoreError::InvalidParam(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| CoreError::InvalidParam(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Total scalar count across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| CoreError::InvalidParam(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(CoreError::Shape(format!(
                "parameter `{name}` shape {:?} vs {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Round every parameter to f32 precision, matching the checkpoint
    /// on-disk format so a save/load round trip is exact.
    pub fn quantize_f32(&mut self) {
        for t in self.params.values_mut() {
            t.quantize_f32();
        }
    }

    /// One bias-corrected Adam update over all gradients in `grads`.
    /// Parameters without a gradient entry stay put.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(CoreError::TrainAborted {
                    epoch: 0,
                    reason: format!("non-finite gradient for parameter `{name}`"),
                });
            }
            if !self.params.contains_key(name) {
                return Err(CoreError::InvalidParam(format!(
                    "gradient for unknown parameter `{name}`"
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, g) in grads {
            let p = self.params.get_mut(name).unwrap();
            if p.shape() != g.shape() {
                return Err(CoreError::Shape(format!(
                    "gradient for `{name}`: {:?} vs {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let slot = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let pd = p.data_mut();
            let md = slot.m.data_mut();
            let vd = slot.v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, vals: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_vec(vals)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut s = store_with("w", vec![1.0, -2.0, 0.5]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        s.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -2.0, 0.5]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_lr() {
        // with g constant, m_hat -> g and v_hat -> g^2, so |step| -> lr
        let mut s = store_with("w", vec![0.0]);
        let cfg = AdamConfig::with_lr(0.01);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![3.7]));
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..200 {
            s.adam_step(&grads, &cfg).unwrap();
            let w = s.get("w").unwrap().data()[0];
            last_step = (w - prev).abs();
            prev = w;
        }
        assert!((last_step - 0.01).abs() < 1e-4, "step magnitude {last_step}");
    }

    #[test]
    fn quadratic_descent_shrinks_weight_for_first_ten_steps() {
        // f(w) = w^2, grad = 2w, w0 = 1, lr = 0.1
        let mut s = store_with("w", vec![1.0]);
        let cfg = AdamConfig::with_lr(0.1);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let w = s.get("w").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::from_vec(vec![2.0 * w]));
            s.adam_step(&grads, &cfg).unwrap();
            let now = s.get("w").unwrap().data()[0].abs();
            assert!(now < prev.abs(), "|w| must strictly decrease: {now} vs {prev}");
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let mut s = store_with("w", vec![1.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![f64::NAN]));
        let err = s.adam_step(&grads, &AdamConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("w"), "diagnostic should name the parameter: {msg}");
    }

    #[test]
    fn duplicate_parameter_rejected() {
        let mut s = store_with("w", vec![1.0]);
        assert!(s.insert("w", Tensor::from_vec(vec![2.0])).is_err());
    }
}

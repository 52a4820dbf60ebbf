use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter whose name passes `filter`.
    pub fn update(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        filter: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        let norm = grads
            .iter()
            .filter(|(k, _)| filter(k))
            .flat_map(|(_, g)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient norm".into()));
        }
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };

        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            if !filter(&name) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get_mut(&name).unwrap();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *w -= c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            clip_norm: 0.0,
            ..Default::default()
        });
        for _ in 0..2000 {
            let x = p.get("x").unwrap().clone();
            let g = x.map(|v| 2.0 * (v - 1.0));
            let grads = BTreeMap::from([("x".to_string(), g)]);
            opt.update(&mut p, &grads, |_| true).unwrap();
        }
        for v in p.get("x").unwrap().data() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamSet::new();
        p.init_const("x", &[3], 0.5).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        let grads = BTreeMap::from([("x".to_string(), Tensor::zeros(&[3]))]);
        opt.update(&mut p, &grads, |_| true).unwrap();
        assert_eq!(p, before);
    }
}

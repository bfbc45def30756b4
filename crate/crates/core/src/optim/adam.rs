use std::collections::BTreeMap;

use crate::autodiff::{GradientSet, NamedTensors};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counters, kept per parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: NamedTensors,
    pub v: NamedTensors,
    pub steps: BTreeMap<String, u64>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    /// One bias-corrected update of every block that has a gradient, with a
    /// learning rate chosen per block.
    pub fn step_with(&mut self, params: &mut NamedTensors, grads: &GradientSet, lr: impl Fn(&str) -> f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(g.shape()));
                self.v.insert(name, Tensor::zeros(g.shape()));
            }
            let t = self.steps.entry(name.to_string()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            let rate = lr(name);
            let m = self.m.get_mut(name).expect("moment").data_mut();
            let v = self.v.get_mut(name).expect("moment").data_mut();
            for (k, (pk, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *pk -= rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Standard Adam update of `params` in place.
pub fn adam_step(params: &mut NamedTensors, grads: &GradientSet, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step_with(params, grads, |_| lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(name: &str, v: f64) -> NamedTensors {
        let mut s = NamedTensors::new();
        s.insert(name, Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_set("p", 1.5);
        let mut st = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut p, &scalar_set("p", 0.0), &mut st, 0.1).unwrap();
        }
        assert_eq!(p.get("p").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_set("p", 0.0);
        let mut st = AdamState::default();
        adam_step(&mut p, &scalar_set("p", 1.0), &mut st, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1, so the update is lr / (1 + eps).
        assert!((p.get("p").unwrap().item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = scalar_set("p", 2.0);
        let mut st = AdamState::default();
        let f = |x: f64| x * x;
        let before = f(2.0);
        for _ in 0..2 {
            let x = p.get("p").unwrap().item();
            adam_step(&mut p, &scalar_set("p", 2.0 * x), &mut st, 0.1).unwrap();
        }
        assert!(f(p.get("p").unwrap().item()) < before);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = scalar_set("p", 0.0);
        let mut st = AdamState::default();
        assert!(adam_step(&mut p, &scalar_set("p", f64::NAN), &mut st, 0.1).is_err());
    }

    #[test]
    fn blocks_keep_separate_counters() {
        let mut p = scalar_set("a", 0.0);
        p.insert("b", Tensor::scalar(0.0));
        let mut st = AdamState::default();
        adam_step(&mut p, &scalar_set("a", 1.0), &mut st, 0.1).unwrap();
        let mut g = scalar_set("a", 1.0);
        g.insert("b", Tensor::scalar(1.0));
        st.step_with(&mut p, &g, |n| if n == "b" { 0.01 } else { 0.1 }).unwrap();
        assert_eq!(st.steps["a"], 2);
        assert_eq!(st.steps["b"], 1);
        assert!((p.get("b").unwrap().item() + 0.01).abs() < 1e-9);
    }
}

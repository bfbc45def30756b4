use crate::autodiff::{logistic, Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::{DepthMap, ScalarField};

/// Maps a sigmoid output `σ ∈ [0, 1]` to depth `1 / (a·σ + b)`, so that
/// `σ = 0` gives `d_max` and `σ = 1` gives `d_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthActivation {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DepthActivation {
    fn default() -> Self {
        Self { d_min: 0.1, d_max: 100.0 }
    }
}

impl DepthActivation {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min > 0.0 && d_max > d_min && d_max.is_finite()) {
            return invalid(format!("depth range [{d_min}, {d_max}] must satisfy 0 < d_min < d_max"));
        }
        Ok(Self { d_min, d_max })
    }

    pub fn a(&self) -> f64 {
        1.0 / self.d_min - 1.0 / self.d_max
    }

    pub fn b(&self) -> f64 {
        1.0 / self.d_max
    }

    pub fn depth(&self, sigma: f64) -> f64 {
        1.0 / (self.a() * sigma + self.b())
    }

    pub fn depth_from_logit(&self, logit: f64) -> f64 {
        self.depth(logistic(logit))
    }

    /// Logit whose depth is `d`, for `d` strictly inside the range.
    pub fn logit_for_depth(&self, d: f64) -> Result<f64> {
        if !(d > self.d_min && d < self.d_max) {
            return invalid(format!("depth {d} outside ({}, {})", self.d_min, self.d_max));
        }
        let sigma = (1.0 / d - self.b()) / self.a();
        Ok((sigma / (1.0 - sigma)).ln())
    }
}

pub fn sigmoid_to_depth(logits: &ScalarField, activation: &DepthActivation) -> Result<DepthMap> {
    DepthMap::new(logits.tensor().map(|l| activation.depth_from_logit(l)))
}

impl Graph {
    /// Depth node from a logit node.
    pub fn depth_from_logits(&mut self, logits: Var, activation: &DepthActivation) -> Var {
        let s = self.sigmoid(logits);
        let s = self.scale(s, activation.a());
        let s = self.add_scalar(s, activation.b());
        self.recip(s)
    }
}

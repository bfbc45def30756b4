//! Combining depth and segmentation gradients on shared parameters.
//!
//! The same combination is available inside a graph through
//! [`Graph::scaled_junction`](crate::autodiff::Graph::scaled_junction).

use crate::autodiff::GradientSet;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiTaskConfig {
    /// Share of the segmentation gradient at the shared boundary.
    pub lambda: f64,
}

impl Default for MultiTaskConfig {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

impl MultiTaskConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let c = Self { lambda };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return invalid(format!("lambda {} outside [0, 1]", self.lambda));
        }
        Ok(())
    }

    /// Junction factors for the depth and segmentation branches.
    pub fn factors(&self) -> (f64, f64) {
        (1.0 - self.lambda, self.lambda)
    }
}

/// `(1 − λ)·g_depth + λ·g_seg`, block by block; a block missing on one side counts as zero.
pub fn combine_gradients(g_depth: &GradientSet, g_seg: &GradientSet, lambda: f64) -> Result<GradientSet> {
    MultiTaskConfig::new(lambda)?;
    let mut out = GradientSet::new();
    for (name, d) in g_depth.iter() {
        let combined = match g_seg.get(name) {
            Some(s) if s.shape() != d.shape() => {
                return Err(Error::Shape {
                    op: "combine_gradients",
                    lhs: d.shape(),
                    rhs: s.shape(),
                })
            }
            Some(s) => {
                let data = d.data().iter().zip(s.data()).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
                Tensor::from_vec(d.shape(), data)?
            }
            None => d.scaled(1.0 - lambda),
        };
        out.insert(name, combined);
    }
    for (name, s) in g_seg.iter() {
        if !g_depth.contains(name) {
            out.insert(name, s.scaled(lambda));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate_with_gradients, NamedTensors};
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn set(values: &[(&str, &[f64])]) -> GradientSet {
        let mut s = GradientSet::new();
        for (n, v) in values {
            s.insert(*n, Tensor::vector(v));
        }
        s
    }

    #[test]
    fn combine_examples() {
        let d = set(&[("p", &[1.0, 0.0])]);
        let s = set(&[("p", &[0.0, 1.0])]);
        let c = combine_gradients(&d, &s, 0.1).unwrap();
        assert_eq!(c.get("p").unwrap().data(), &[0.9, 0.1]);
        assert_eq!(combine_gradients(&d, &s, 0.0).unwrap(), d);
        assert_eq!(combine_gradients(&d, &s, 1.0).unwrap(), s);
    }

    #[test]
    fn missing_blocks_count_as_zero() {
        let d = set(&[("a", &[2.0])]);
        let s = set(&[("b", &[4.0])]);
        let c = combine_gradients(&d, &s, 0.25).unwrap();
        assert_eq!(c.get("a").unwrap().data(), &[1.5]);
        assert_eq!(c.get("b").unwrap().data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let d = set(&[("a", &[1.0, 2.0])]);
        let s = set(&[("a", &[1.0])]);
        assert!(matches!(combine_gradients(&d, &s, 0.5), Err(Error::Shape { .. })));
        assert!(combine_gradients(&d, &d, 1.5).is_err());
    }

    #[test]
    fn junction_square_example() {
        let mut p = NamedTensors::new();
        p.insert("p", Tensor::scalar(3.0));
        let (v, g) = evaluate_with_gradients(&p, |g, v| {
            let j = g.scaled_junction(v["p"], 0.1);
            Ok(g.square(j))
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert!((g.get("p").unwrap().item() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn junction_forward_is_bit_exact() {
        let t = Tensor::from_fn(Shape::new(3, 4, 2), |y, x, c| (y * 7 + x * 3 + c) as f64 * 0.123);
        let mut g = crate::autodiff::Graph::new();
        let a = g.param(t.clone());
        let j = g.scaled_junction(a, 0.37);
        assert_eq!(g.value(j), &t);
    }

    proptest! {
        #[test]
        fn combine_is_identity_on_equal_sets(v in proptest::collection::vec(-10.0f64..10.0, 1..8), lambda in 0.0f64..=1.0) {
            let g = set(&[("p", &v)]);
            let c = combine_gradients(&g, &g, lambda).unwrap();
            for (a, b) in c.get("p").unwrap().data().iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}

use std::sync::Arc;

use ndarray::Array2;

use super::region::{FnBarrier, SafeRegionSpec, Sampler};
use super::{SdeModel, System};
use crate::error::Result;

/// Scalar geometric Brownian motion `dx = a x dt + b x dB`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gbm {
    pub a: f64,
    pub b: f64,
}

impl Gbm {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    /// Exact solution driven by the Brownian value `w` at time `t`.
    pub fn exact(&self, x0: f64, t: f64, w: f64) -> f64 {
        x0 * ((self.a - 0.5 * self.b * self.b) * t + self.b * w).exp()
    }
}

impl SdeModel for Gbm {
    fn name(&self) -> &str {
        "gbm"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.a * x[0]])
    }
    fn diffusion(&self, x: &[f64]) -> Array2<f64> {
        Array2::from_elem((1, 1), self.b * x[0])
    }
}

pub(super) fn system(a: f64, b: f64) -> System {
    let barrier = FnBarrier::new(1, |x| -x.square().col_sums() + 4.0);
    System {
        name: "gbm".into(),
        model: Arc::new(Gbm::new(a, b)),
        safe_region: SafeRegionSpec {
            barrier: Arc::new(barrier),
            description: "h = 4 - x^2".into(),
            sampler: Sampler::Box(vec![(-2.0, 2.0)]),
        },
        control_mask: vec![true],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_coefficients() {
        let m = Gbm::new(-1.0, 1.0);
        assert_eq!(m.drift(&[2.0]).unwrap(), vec![-2.0]);
        assert_eq!(m.diffusion(&[2.0])[[0, 0]], 2.0);
        assert_eq!(m.drift(&[0.0]).unwrap(), vec![0.0]);
        assert_eq!(m.diffusion(&[0.0])[[0, 0]], 0.0);
    }

    #[test]
    fn exact_solution_without_noise() {
        let m = Gbm::new(-1.0, 0.0);
        assert!((m.exact(2.0, 1.5, 0.3) - 2.0 * (-1.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn barrier_values() {
        let s = system(-1.0, 1.0);
        assert_eq!(s.safe_region.barrier.value(&[1.0]), 3.0);
        assert!(!s.safe_region.contains(&[2.5]));
    }
}

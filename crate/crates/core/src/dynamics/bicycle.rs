use std::sync::Arc;

use ndarray::Array2;

use super::region::{FnBarrier, SafeRegionSpec, Sampler};
use super::{row, SdeModel, System};
use crate::error::Result;

/// Kinematic bicycle `(x, y, θ, v)` with position-proportional noise.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Bicycle;

impl SdeModel for Bicycle {
    fn name(&self) -> &str {
        "bicycle"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, s: &[f64]) -> Result<Vec<f64>> {
        let (x, y, th, v) = (s[0], s[1], s[2], s[3]);
        Ok(vec![v * th.cos(), v * th.sin(), v, x * x + y * y])
    }
    fn diffusion(&self, s: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((4, 1), vec![s[0], s[1], 0.0, 0.0]).expect("shape")
    }
}

pub(super) fn system() -> System {
    let barrier = FnBarrier::new(4, |s| -(row(s, 0).square() + row(s, 1).square()) + 4.0);
    System {
        name: "bicycle".into(),
        model: Arc::new(Bicycle),
        safe_region: SafeRegionSpec {
            barrier: Arc::new(barrier),
            description: "h = 4 - (x^2 + y^2)".into(),
            sampler: Sampler::Polar {
                radius: 3.0,
                rest: vec![(-3.0, 3.0), (-3.0, 3.0)],
            },
        },
        control_mask: vec![true; 4],
    }
}

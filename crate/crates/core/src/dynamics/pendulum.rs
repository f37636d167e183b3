use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;

use super::region::{FnBarrier, SafeRegionSpec, Sampler};
use super::{row, SdeModel, System, SystemOptions};
use crate::error::{Error, Result};

/// Fully actuated double pendulum with angle-proportional noise on both
/// angular accelerations. State `(θ̃₁, θ̃₂, z₁, z₂)` with `θ̃ = θ − π`, so the
/// origin is the inverted equilibrium.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoublePendulum {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub g: f64,
}

impl Default for DoublePendulum {
    fn default() -> Self {
        Self {
            m1: 1.0,
            m2: 1.0,
            l1: 1.0,
            l2: 1.0,
            g: 9.81,
        }
    }
}

impl SdeModel for DoublePendulum {
    fn name(&self) -> &str {
        "double_pendulum"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let Self { m1, m2, l1, l2, g } = *self;
        let (th1, th2) = (x[0] + PI, x[1] + PI);
        let (z1, z2) = (x[2], x[3]);
        let delta = th1 - th2;
        let (sd, cd) = delta.sin_cos();
        let den = m1 + m2 * sd * sd;
        let dz1 = (m2 * g * th2.sin() * cd - m2 * sd * (l1 * z1 * z1 * cd + l2 * z2 * z2)
            - (m1 + m2) * g * th1.sin())
            / (l1 * den);
        let dz2 = ((m1 + m2) * (l1 * z1 * z1 * sd - g * th2.sin() + g * th1.sin() * cd)
            + m2 * l2 * z2 * z2 * sd * cd)
            / (l2 * den);
        Ok(vec![z1, z2, dz1, dz2])
    }

    fn diffusion(&self, x: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((4, 1), vec![0.0, 0.0, x[0].sin(), x[1].sin()]).expect("shape")
    }
}

pub(super) fn system(opts: &SystemOptions) -> Result<System> {
    let model = DoublePendulum {
        m1: opts.pendulum_mass[0],
        m2: opts.pendulum_mass[1],
        l1: opts.pendulum_length[0],
        l2: opts.pendulum_length[1],
        g: opts.gravity,
    };
    if [model.m1, model.m2, model.l1, model.l2].iter().any(|&v| !(v > 0.0)) {
        return Err(Error::config("pendulum_mass/pendulum_length", "must be positive"));
    }
    Ok(System {
        name: "double_pendulum".into(),
        model: Arc::new(model),
        safe_region: SafeRegionSpec {
            barrier: Arc::new(FnBarrier::new(4, |x| -row(x, 0).sin() + 0.5)),
            description: "h = 0.5 - sin(theta1)".into(),
            sampler: Sampler::Box(vec![
                (-PI / 6.0 - PI, 7.0 * PI / 6.0 - PI),
                (-5.0, 5.0),
                (-5.0, 5.0),
                (-5.0, 5.0),
            ]),
        },
        control_mask: vec![true; 4],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Second transcription, in unshifted angles with the textbook grouping.
    fn reference(th1: f64, th2: f64, z1: f64, z2: f64) -> [f64; 2] {
        let (m1, m2, l1, l2, g) = (1.0, 1.0, 1.0, 1.0, 9.81);
        let num1 = m2 * g * f64::sin(th2) * f64::cos(th1 - th2)
            - m2 * f64::sin(th1 - th2) * (l1 * z1.powi(2) * f64::cos(th1 - th2) + l2 * z2.powi(2))
            - (m1 + m2) * g * f64::sin(th1);
        let num2 = (m1 + m2) * (l1 * z1.powi(2) * f64::sin(th1 - th2) - g * f64::sin(th2)
            + g * f64::sin(th1) * f64::cos(th1 - th2))
            + m2 * l2 * z2.powi(2) * f64::sin(th1 - th2) * f64::cos(th1 - th2);
        let den = m1 + m2 * f64::sin(th1 - th2).powi(2);
        [num1 / (l1 * den), num2 / (l2 * den)]
    }

    #[test]
    fn matches_second_transcription() {
        let m = DoublePendulum::default();
        let f = m.drift(&[0.1, -0.2, 0.3, 0.4]).unwrap();
        let r = reference(0.1 + PI, -0.2 + PI, 0.3, 0.4);
        assert_eq!(&f[..2], &[0.3, 0.4]);
        assert!((f[2] - r[0]).abs() < 1e-12 && (f[3] - r[1]).abs() < 1e-12);
    }

    #[test]
    fn upright_is_equilibrium() {
        let m = DoublePendulum::default();
        assert!(m.drift(&[0.0; 4]).unwrap().iter().all(|v| v.abs() < 1e-14));
        assert!(m.diffusion(&[0.0; 4]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn barrier_at_upright() {
        let s = system(&SystemOptions::default()).unwrap();
        assert_eq!(s.safe_region.barrier.value(&[0.0; 4]), 0.5);
        assert!(s.safe_region.barrier.value(&[PI / 6.0, 0.0, 0.0, 0.0]).abs() < 1e-15);
    }
}

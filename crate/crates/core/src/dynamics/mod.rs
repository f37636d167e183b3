//! Controlled SDEs `dx = (f(x) + u(x)) dt + g(x) dB` and the benchmark systems.

mod bicycle;
mod fhn;
mod gbm;
mod pendulum;
mod region;
mod three_link;

pub use bicycle::Bicycle;
pub use fhn::{watts_strogatz, FhnBarrier, FhnNetwork, SmallWorld};
pub use gbm::Gbm;
pub use pendulum::DoublePendulum;
pub use region::{Barrier, FnBarrier, SafeRegionSpec, Sampler};
pub use three_link::ThreeLink;

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nets::ControllerNet;

/// Names accepted by [`make_system`].
pub const SYSTEM_NAMES: [&str; 5] = ["gbm", "double_pendulum", "bicycle", "fhn", "three_link"];

/// Drift and diffusion of an SDE with its equilibrium at the origin.
pub trait SdeModel: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn drift(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// `d × r`.
    fn diffusion(&self, x: &[f64]) -> Array2<f64>;

    /// Drift at each column of a `d × n` batch.
    fn drift_batch(&self, xs: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(xs.dim());
        for (j, col) in xs.columns().into_iter().enumerate() {
            let f = self.drift(&col.to_vec())?;
            out.column_mut(j).assign(&ndarray::Array1::from(f));
        }
        Ok(out)
    }

    /// Diffusion columns for a batch: entry `k` is the `d × n` matrix whose
    /// column `j` is `g(x_j)[:, k]`.
    fn diffusion_batch(&self, xs: &Array2<f64>) -> Vec<Array2<f64>> {
        let r = self.noise_dim();
        let mut out = vec![Array2::zeros(xs.dim()); r];
        for (j, col) in xs.columns().into_iter().enumerate() {
            let g = self.diffusion(&col.to_vec());
            for (k, o) in out.iter_mut().enumerate() {
                o.column_mut(j).assign(&g.column(k));
            }
        }
        out
    }
}

/// A state-feedback law, possibly time-varying.
pub trait Controller: Send + Sync {
    fn dim(&self) -> usize;
    fn control(&self, t: f64, x: &[f64]) -> Result<Vec<f64>>;
}

impl<C: Controller + ?Sized> Controller for Arc<C> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn control(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        (**self).control(t, x)
    }
}

impl<C: Controller + ?Sized> Controller for &C {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn control(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        (**self).control(t, x)
    }
}

impl Controller for ControllerNet {
    fn dim(&self) -> usize {
        ControllerNet::dim(self)
    }
    fn control(&self, _t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.eval(x)
    }
}

/// `u ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroController(pub usize);

impl Controller for ZeroController {
    fn dim(&self) -> usize {
        self.0
    }
    fn control(&self, _t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

/// A controller from a closure `(t, x) -> u`.
pub struct FnController<F> {
    dim: usize,
    f: F,
}

impl<F> FnController<F>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Controller for FnController<F>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn control(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.f)(t, x))
    }
}

/// Tunable constants of the benchmark systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemOptions {
    pub gbm_a: f64,
    pub gbm_b: f64,
    pub pendulum_mass: [f64; 2],
    pub pendulum_length: [f64; 2],
    pub gravity: f64,
    pub fhn_oscillators: usize,
    pub topology: SmallWorld,
}

impl Default for SystemOptions {
    fn default() -> Self {
        Self {
            gbm_a: -1.0,
            gbm_b: 1.0,
            pendulum_mass: [1.0, 1.0],
            pendulum_length: [1.0, 1.0],
            gravity: 9.81,
            fhn_oscillators: 50,
            topology: SmallWorld::default(),
        }
    }
}

/// A model with its safe region and the actuated-coordinate mask.
#[derive(Clone)]
pub struct System {
    pub name: String,
    pub model: Arc<dyn SdeModel>,
    pub safe_region: SafeRegionSpec,
    pub control_mask: Vec<bool>,
}

impl System {
    pub fn dim(&self) -> usize {
        self.model.state_dim()
    }
}

impl std::fmt::Debug for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("System")
            .field("name", &self.name)
            .field("dim", &self.model.state_dim())
            .field("safe_region", &self.safe_region.description)
            .finish()
    }
}

/// Builds a benchmark by name.
pub fn make_system(name: &str, opts: &SystemOptions) -> Result<System> {
    match name {
        "gbm" => Ok(gbm::system(opts.gbm_a, opts.gbm_b)),
        "double_pendulum" => pendulum::system(opts),
        "bicycle" => Ok(bicycle::system()),
        "fhn" => fhn::system(opts.fhn_oscillators, &opts.topology),
        "three_link" => Ok(three_link::system()),
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

/// Row `i` of a `d × n` node, as `1 × n`.
pub(crate) fn row<'t>(x: Var<'t>, i: usize) -> Var<'t> {
    x.select_rows(&[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_system_has_equilibrium_at_origin() {
        for name in SYSTEM_NAMES {
            let opts = SystemOptions {
                fhn_oscillators: 5,
                ..Default::default()
            };
            let sys = make_system(name, &opts).unwrap();
            let d = sys.dim();
            let zero = vec![0.0; d];
            assert!(sys.model.drift(&zero).unwrap().iter().all(|v| v.abs() < 1e-14), "{name}");
            assert!(sys.model.diffusion(&zero).iter().all(|v| v.abs() < 1e-14), "{name}");
            assert!(sys.safe_region.barrier.value(&zero) > 0.0, "{name}");
            assert_eq!(sys.control_mask.len(), d);
        }
    }

    #[test]
    fn diffusion_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for name in SYSTEM_NAMES {
            let opts = SystemOptions {
                fhn_oscillators: 4,
                ..Default::default()
            };
            let sys = make_system(name, &opts).unwrap();
            let xs = sys.safe_region.sampler.sample(&mut rng, 100);
            for col in xs.columns() {
                let g = sys.model.diffusion(&col.to_vec());
                assert_eq!(g.dim(), (sys.dim(), sys.model.noise_dim()), "{name}");
            }
            let gb = sys.model.diffusion_batch(&xs);
            assert_eq!(gb.len(), sys.model.noise_dim());
            assert_eq!(gb[0].dim(), xs.dim());
            assert_eq!(sys.model.drift_batch(&xs).unwrap().dim(), xs.dim());
        }
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(
            make_system("cartpole", &SystemOptions::default()),
            Err(Error::UnknownSystem(_))
        ));
    }
}

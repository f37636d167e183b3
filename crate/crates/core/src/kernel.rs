//! Nonparametric kernel controller transporting samples toward a target set.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::ScalarField;
use crate::dynamics::{Controller, SafeRegionSpec, SdeModel, System};
use crate::error::{Error, Result};
use crate::projection::{compose_safe_stable, ClassK, ProjectedController};

/// Bandwidth used for the 3-link benchmark.
pub const DEFAULT_BANDWIDTH: f64 = 1e-3;

/// Latest flow time reached by a rollout; keeps `1/(1 − t)` finite.
pub const MAX_FLOW_TIME: f64 = 0.99;

/// `u(z, t) = Σᵢ wᵢ (z̃₁ⁱ − z)/(1 − t) − f(z)` with Gaussian weights
/// `wᵢ ∝ exp(−‖z̃ⁱ(t) − z‖²/h)` on the interpolants
/// `z̃ⁱ(t) = (1 − t) z̃₀ⁱ + t z̃₁ⁱ`.
pub struct KernelController {
    source: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
    bandwidth: f64,
    model: Arc<dyn SdeModel>,
    flow_horizon: f64,
    underflows: AtomicUsize,
}

impl std::fmt::Debug for KernelController {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelController")
            .field("samples", &self.source.len())
            .field("bandwidth", &self.bandwidth)
            .field("flow_horizon", &self.flow_horizon)
            .finish()
    }
}

impl KernelController {
    /// `source[i]` is paired with `target[i]`.
    pub fn new(
        source: Vec<Vec<f64>>,
        target: Vec<Vec<f64>>,
        bandwidth: f64,
        model: Arc<dyn SdeModel>,
        flow_horizon: f64,
    ) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::config("kernel.samples", "need at least one sample pair"));
        }
        if source.len() != target.len() {
            return Err(Error::config(
                "kernel.samples",
                format!("{} source samples but {} targets", source.len(), target.len()),
            ));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::config("kernel.bandwidth", "must be positive"));
        }
        if !(flow_horizon > 0.0 && flow_horizon.is_finite()) {
            return Err(Error::config("kernel.flow_horizon", "must be positive"));
        }
        let d = model.state_dim();
        if let Some(bad) = source.iter().chain(&target).find(|z| z.len() != d) {
            return Err(Error::DimensionMismatch {
                context: "kernel sample",
                expected: d,
                got: bad.len(),
            });
        }
        Ok(Self {
            source,
            target,
            bandwidth,
            model,
            flow_horizon,
            underflows: AtomicUsize::new(0),
        })
    }

    /// `n` sources from the safe-region sampler, all targets at the origin.
    pub fn from_region<R: Rng + ?Sized>(
        system: &System,
        n: usize,
        bandwidth: f64,
        flow_horizon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = system.dim();
        let source: Vec<Vec<f64>> = (0..n).map(|_| system.safe_region.sampler.sample_point(rng)).collect();
        Self::new(source, vec![vec![0.0; d]; n], bandwidth, system.model.clone(), flow_horizon)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn num_samples(&self) -> usize {
        self.source.len()
    }

    /// Simulation time mapped to flow time, `clamp(t/T, 0, 0.99)`.
    pub fn flow_time(&self, sim_time: f64) -> f64 {
        (sim_time / self.flow_horizon).clamp(0.0, MAX_FLOW_TIME)
    }

    /// How often the weights have fallen back to uniform.
    pub fn underflow_count(&self) -> usize {
        self.underflows.load(Ordering::Relaxed)
    }

    /// Normalized weights at `z`; the flag is set when every raw weight
    /// underflowed and the uniform fallback was used.
    pub fn weights(&self, z: &[f64], t: f64) -> (Vec<f64>, bool) {
        let raw: Vec<f64> = self
            .source
            .iter()
            .zip(&self.target)
            .map(|(z0, z1)| {
                let d2: f64 = z0
                    .iter()
                    .zip(z1)
                    .zip(z)
                    .map(|((a, b), q)| {
                        let zt = (1.0 - t) * a + t * b;
                        (zt - q) * (zt - q)
                    })
                    .sum();
                (-d2 / self.bandwidth).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 && total.is_finite() {
            (raw.into_iter().map(|w| w / total).collect(), false)
        } else {
            let n = self.source.len() as f64;
            (vec![1.0 / n; self.source.len()], true)
        }
    }

    /// Control at state `z` and flow time `t < 1`, with the underflow flag.
    pub fn kernel_control(&self, z: &[f64], t: f64) -> Result<(Vec<f64>, bool)> {
        if !(t < 1.0) {
            return Err(Error::config("kernel flow time", format!("{t} is not below 1")));
        }
        let d = self.model.state_dim();
        if z.len() != d {
            return Err(Error::DimensionMismatch {
                context: "kernel query",
                expected: d,
                got: z.len(),
            });
        }
        let (w, underflow) = self.weights(z, t);
        if underflow {
            self.underflows.fetch_add(1, Ordering::Relaxed);
        }
        let f = self.model.drift(z)?;
        let scale = 1.0 / (1.0 - t);
        let mut u = vec![0.0; d];
        for (wi, z1) in w.iter().zip(&self.target) {
            for i in 0..d {
                u[i] += wi * (z1[i] - z[i]);
            }
        }
        for i in 0..d {
            u[i] = u[i] * scale - f[i];
        }
        Ok((u, underflow))
    }
}

impl Controller for KernelController {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }
    fn control(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.kernel_control(x, self.flow_time(t))?.0)
    }
}

/// The kernel controller behind both projections, untrained.
pub fn wrap_with_projection(
    kernel: KernelController,
    potential: Arc<dyn ScalarField>,
    region: &SafeRegionSpec,
    alpha: Arc<dyn ClassK>,
    c: f64,
    model: Arc<dyn SdeModel>,
) -> Result<ProjectedController<KernelController>> {
    compose_safe_stable(kernel, potential, region, alpha, c, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_system, SystemOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn three_link() -> System {
        make_system("three_link", &SystemOptions::default()).unwrap()
    }

    #[test]
    fn single_pair_collapses() {
        let sys = three_link();
        let z = vec![0.2, -0.1, 0.3, 0.5, -0.4, 0.1];
        let kc = KernelController::new(vec![z.clone()], vec![vec![0.0; 6]], 1e-3, sys.model.clone(), 20.0).unwrap();
        let t = 0.25;
        let (u, flag) = kc.kernel_control(&z, t).unwrap();
        let f = sys.model.drift(&z).unwrap();
        for i in 0..6 {
            assert!((u[i] - (-z[i] / (1.0 - t) - f[i])).abs() < 1e-12);
        }
        assert!(!flag);
    }

    #[test]
    fn wide_bandwidth_is_uniform() {
        let sys = three_link();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src: Vec<Vec<f64>> = (0..20).map(|_| sys.safe_region.sampler.sample_point(&mut rng)).collect();
        let tgt: Vec<Vec<f64>> = (0..20).map(|_| sys.safe_region.sampler.sample_point(&mut rng)).collect();
        let kc = KernelController::new(src, tgt.clone(), 1e12, sys.model.clone(), 20.0).unwrap();
        let z = vec![0.1; 6];
        let (u, _) = kc.kernel_control(&z, 0.5).unwrap();
        let f = sys.model.drift(&z).unwrap();
        for i in 0..6 {
            let mean: f64 = tgt.iter().map(|t| t[i] - z[i]).sum::<f64>() / 20.0;
            assert!((u[i] - (mean / 0.5 - f[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn origin_is_fixed_and_weights_are_convex() {
        let sys = three_link();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kc = KernelController::from_region(&sys, 200, DEFAULT_BANDWIDTH, 20.0, &mut rng).unwrap();
        let (u, _) = kc.kernel_control(&[0.0; 6], 0.3).unwrap();
        assert!(u.iter().all(|v| v.abs() < 1e-12));
        for _ in 0..50 {
            let z = sys.safe_region.sampler.sample_point(&mut rng);
            let t = rng.random_range(0.0..0.99);
            let (w, _) = kc.weights(&z, t);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn underflow_falls_back() {
        let sys = three_link();
        let kc = KernelController::new(vec![vec![4.0; 6]], vec![vec![0.0; 6]], 1e-3, sys.model.clone(), 20.0).unwrap();
        let (w, flag) = kc.weights(&[-4.0; 6], 0.0);
        assert!(flag);
        assert_eq!(w, vec![1.0]);
        kc.control(0.0, &[-4.0; 6]).unwrap();
        assert_eq!(kc.underflow_count(), 1);
    }

    #[test]
    fn flow_time_is_clamped() {
        let sys = three_link();
        let kc = KernelController::new(vec![vec![0.0; 6]], vec![vec![0.0; 6]], 1.0, sys.model.clone(), 10.0).unwrap();
        assert_eq!(kc.flow_time(-1.0), 0.0);
        assert_eq!(kc.flow_time(5.0), 0.5);
        assert_eq!(kc.flow_time(50.0), MAX_FLOW_TIME);
        assert!(kc.kernel_control(&[0.0; 6], 1.0).is_err());
    }

    #[test]
    fn rejects_bad_construction() {
        let sys = three_link();
        assert!(KernelController::new(vec![], vec![], 1.0, sys.model.clone(), 1.0).is_err());
        assert!(KernelController::new(vec![vec![0.0; 6]], vec![], 1.0, sys.model.clone(), 1.0).is_err());
        assert!(KernelController::new(vec![vec![0.0; 6]], vec![vec![0.0; 6]], 0.0, sys.model.clone(), 1.0).is_err());
        assert!(KernelController::new(vec![vec![0.0; 5]], vec![vec![0.0; 5]], 1.0, sys.model.clone(), 1.0).is_err());
    }
}

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{ScalarField, Var};

/// A zeroing barrier `h`; the safe region is `{h ≥ 0}`.
///
/// `eval_tape` is the twice-differentiable version used by generators;
/// `hard_value` is what containment checks use. They coincide unless the
/// barrier involves a nonsmooth max.
pub trait Barrier: ScalarField {
    fn hard_value(&self, x: &[f64]) -> f64 {
        self.value(x)
    }
}

/// A smooth barrier from a closure over tape operations.
pub struct FnBarrier<F> {
    dim: usize,
    f: F,
}

impl<F> FnBarrier<F>
where
    F: for<'t> Fn(Var<'t>) -> Var<'t> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ScalarField for FnBarrier<F>
where
    F: for<'t> Fn(Var<'t>) -> Var<'t> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_tape<'t>(&self, x: Var<'t>) -> Var<'t> {
        (self.f)(x)
    }
}

impl<F> Barrier for FnBarrier<F> where F: for<'t> Fn(Var<'t>) -> Var<'t> + Send + Sync {}

/// How training and evaluation states are drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum Sampler {
    /// Independent uniforms per coordinate.
    Box(Vec<(f64, f64)>),
    /// `(r cos w, r sin w, rest…)` with `r ∈ [0, radius]`, `w ∈ [0, 2π]`
    /// both uniform, and the remaining coordinates uniform in their bounds.
    Polar { radius: f64, rest: Vec<(f64, f64)> },
}

impl Sampler {
    pub fn dim(&self) -> usize {
        match self {
            Sampler::Box(b) => b.len(),
            Sampler::Polar { rest, .. } => 2 + rest.len(),
        }
    }

    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let uni = |rng: &mut R, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        match self {
            Sampler::Box(bounds) => bounds.iter().map(|&b| uni(rng, b)).collect(),
            Sampler::Polar { radius, rest } => {
                let r = uni(rng, (0.0, *radius));
                let w = uni(rng, (0.0, std::f64::consts::TAU));
                let mut x = vec![r * w.cos(), r * w.sin()];
                x.extend(rest.iter().map(|&b| uni(rng, b)));
                x
            }
        }
    }

    /// `d × n` batch, one point per column.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((d, n));
        for j in 0..n {
            let p = self.sample_point(rng);
            for i in 0..d {
                out[[i, j]] = p[i];
            }
        }
        out
    }
}

/// Barrier, a human-readable description, and the sampling region.
#[derive(Clone)]
pub struct SafeRegionSpec {
    pub barrier: Arc<dyn Barrier>,
    pub description: String,
    pub sampler: Sampler,
}

impl SafeRegionSpec {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.barrier.hard_value(x) >= 0.0
    }
}

impl std::fmt::Debug for SafeRegionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SafeRegionSpec")
            .field("description", &self.description)
            .field("sampler", &self.sampler)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_sampler_respects_bounds_and_seed() {
        let s = Sampler::Box(vec![(-1.0, 1.0), (2.0, 3.0), (5.0, 5.0)]);
        let a = s.sample(&mut ChaCha8Rng::seed_from_u64(9), 200);
        let b = s.sample(&mut ChaCha8Rng::seed_from_u64(9), 200);
        assert_eq!(a, b);
        for c in a.columns() {
            assert!((-1.0..=1.0).contains(&c[0]) && (2.0..=3.0).contains(&c[1]) && c[2] == 5.0);
        }
        assert_eq!(s.sample(&mut ChaCha8Rng::seed_from_u64(9), 0).ncols(), 0);
    }

    #[test]
    fn polar_sampler_radius() {
        let s = Sampler::Polar {
            radius: 3.0,
            rest: vec![(-3.0, 3.0)],
        };
        let xs = s.sample(&mut ChaCha8Rng::seed_from_u64(1), 1000);
        for c in xs.columns() {
            assert!(c[0].hypot(c[1]) <= 3.0 + 1e-12);
            assert!(c[2].abs() <= 3.0);
        }
    }
}

//! Closed-form corrections that force the generator inequalities pointwise.
//!
//! Stability: `𝓛_u V ≤ c V` is restored by moving `u` against `∇V`.
//! Safety: `𝓛_u h ≥ −α(h)` is restored by moving `u` along `∇h`.
//! Both are skipped where the gradient norm squared is below `τ`.

use std::io::Write;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::{column, ScalarField, Var};
use crate::dynamics::{Barrier, Controller, SafeRegionSpec, SdeModel};
use crate::error::{Error, Result};
use crate::generator::{tape_terms, GeneratorParts, TraceMode};
use crate::nets::ClassKNet;

/// Default degeneracy threshold on `‖∇·‖²`.
pub const DEFAULT_TAU: f64 = 1e-12;

/// A strictly increasing `α` with `α(0) = 0`.
pub trait ClassK: Send + Sync {
    fn alpha(&self, s: f64) -> f64;
}

impl ClassK for ClassKNet {
    fn alpha(&self, s: f64) -> f64 {
        self.eval_extended(s)
    }
}

/// `α(s) = k s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearClassK(pub f64);

impl ClassK for LinearClassK {
    fn alpha(&self, s: f64) -> f64 {
        self.0 * s
    }
}

/// Outcome of one projection at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub u: Vec<f64>,
    /// Constraint residual with the input control.
    pub residual_before: f64,
    /// Constraint residual with the output control.
    pub residual_after: f64,
    pub correction_norm: f64,
    /// The gradient was too small to divide by; `u` was returned unchanged.
    pub degenerate: bool,
}

/// Stability residual `𝓛_u V − cV` (feasible when `≤ 0`).
pub fn stability_residual(parts: &GeneratorParts, j: usize, u: &[f64], c: f64) -> f64 {
    parts.apply(j, u) - c * parts.value[j]
}

/// Safety residual `𝓛_u h + α(h)` (feasible when `≥ 0`).
pub fn safety_residual(parts: &GeneratorParts, j: usize, u: &[f64], alpha_h: f64) -> f64 {
    parts.apply(j, u) + alpha_h
}

fn shifted(u: &[f64], grad: &[f64], step: f64) -> Vec<f64> {
    u.iter().zip(grad).map(|(a, g)| a + step * g).collect()
}

/// `π̂_es` at column `j` of precomputed generator parts of `V`.
pub fn project_stable_at(parts: &GeneratorParts, j: usize, u: &[f64], c: f64, tau: f64) -> Projection {
    let before = stability_residual(parts, j, u, c);
    let norm_sq = parts.grad_norm_sq(j);
    if !(before > 0.0) || norm_sq < tau {
        return Projection {
            u: u.to_vec(),
            residual_before: before,
            residual_after: before,
            correction_norm: 0.0,
            degenerate: before > 0.0,
        };
    }
    let step = -before / norm_sq;
    let out = shifted(u, &parts.grad_at(j), step);
    Projection {
        residual_after: stability_residual(parts, j, &out, c),
        u: out,
        residual_before: before,
        correction_norm: step.abs() * norm_sq.sqrt(),
        degenerate: false,
    }
}

/// `π̂_sf` at column `j` of precomputed generator parts of `h`.
pub fn project_safe_at(parts: &GeneratorParts, j: usize, u: &[f64], alpha_h: f64, tau: f64) -> Projection {
    let before = safety_residual(parts, j, u, alpha_h);
    let norm_sq = parts.grad_norm_sq(j);
    if !(before < 0.0) || norm_sq < tau {
        return Projection {
            u: u.to_vec(),
            residual_before: before,
            residual_after: before,
            correction_norm: 0.0,
            degenerate: before < 0.0,
        };
    }
    let step = -before / norm_sq;
    let out = shifted(u, &parts.grad_at(j), step);
    Projection {
        residual_after: safety_residual(parts, j, &out, alpha_h),
        u: out,
        residual_before: before,
        correction_norm: step.abs() * norm_sq.sqrt(),
        degenerate: false,
    }
}

/// Generator parts of `field` given drift and diffusion batches.
pub(crate) fn parts_given(
    field: &dyn ScalarField,
    xs: &Array2<f64>,
    f: &Array2<f64>,
    g: &[Array2<f64>],
    mode: TraceMode,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratorParts> {
    let tape = crate::autodiff::Tape::new();
    let x = tape.var(xs.clone());
    let t = tape_terms(|v| field.eval_tape(v), x, f, g, mode, rng)?;
    let row = |v: Var<'_>| -> Vec<f64> { v.to_array().iter().copied().collect() };
    Ok(GeneratorParts {
        value: row(t.value),
        grad: t.grad.to_array(),
        drift_term: row(t.drift_term),
        trace: row(t.trace),
    })
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `π̂_es(u)(x)` for a controller evaluated at `t = 0`.
pub fn project_stable(
    controller: &dyn Controller,
    potential: &dyn ScalarField,
    c: f64,
    model: &dyn SdeModel,
    x: &[f64],
) -> Result<Projection> {
    let xs = column(x);
    let f = model.drift_batch(&xs)?;
    let g = model.diffusion_batch(&xs);
    let mode = TraceMode::projection(model.noise_dim());
    let parts = parts_given(potential, &xs, &f, &g, mode, &mut ChaCha8Rng::seed_from_u64(0))?;
    let u = controller.control(0.0, x)?;
    let p = project_stable_at(&parts, 0, &u, c, DEFAULT_TAU);
    check_finite("stability projection", &p.u)?;
    Ok(p)
}

/// `π̂_sf(u)(x)`. Points outside the safe region are still projected; the
/// caller can check [`SafeRegionSpec::contains`].
pub fn project_safe(
    controller: &dyn Controller,
    barrier: &dyn Barrier,
    alpha: &dyn ClassK,
    model: &dyn SdeModel,
    x: &[f64],
) -> Result<Projection> {
    let xs = column(x);
    let f = model.drift_batch(&xs)?;
    let g = model.diffusion_batch(&xs);
    let mode = TraceMode::projection(model.noise_dim());
    let parts = parts_given(barrier, &xs, &f, &g, mode, &mut ChaCha8Rng::seed_from_u64(0))?;
    let u = controller.control(0.0, x)?;
    let p = project_safe_at(&parts, 0, &u, alpha.alpha(parts.value[0]), DEFAULT_TAU);
    check_finite("safety projection", &p.u)?;
    Ok(p)
}

/// Per-point record of a composed evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub x: Vec<f64>,
    pub u_base: Vec<f64>,
    pub u: Vec<f64>,
    /// `𝓛h + α(h)` with the base and the final control.
    pub safety_before: f64,
    pub safety_after: f64,
    /// `𝓛V − cV` with the base and the final control.
    pub stability_before: f64,
    pub stability_after: f64,
    pub safe_correction: f64,
    pub stable_correction: f64,
    pub inside: bool,
}

/// `π̂_es(π̂_sf(u))`: the safety correction first, then the stability
/// correction of the result.
pub struct ProjectedController<C> {
    base: C,
    model: Arc<dyn SdeModel>,
    potential: Arc<dyn ScalarField>,
    barrier: Arc<dyn Barrier>,
    alpha: Arc<dyn ClassK>,
    c: f64,
    tau: f64,
    stable_mode: TraceMode,
    safe_mode: TraceMode,
}

/// Wraps `base` with both projections using the projection-time trace backends.
pub fn compose_safe_stable<C: Controller>(
    base: C,
    potential: Arc<dyn ScalarField>,
    region: &SafeRegionSpec,
    alpha: Arc<dyn ClassK>,
    c: f64,
    model: Arc<dyn SdeModel>,
) -> Result<ProjectedController<C>> {
    if !(c < 0.0) {
        return Err(Error::config("c", "stability rate must be negative"));
    }
    let d = model.state_dim();
    for (what, got) in [
        ("controller", base.dim()),
        ("potential", potential.dim()),
        ("barrier", region.barrier.dim()),
    ] {
        if got != d {
            return Err(Error::ModelMismatch(format!("{what} dimension {got} != state dimension {d}")));
        }
    }
    let mode = TraceMode::projection(model.noise_dim());
    Ok(ProjectedController {
        base,
        model,
        potential,
        barrier: region.barrier.clone(),
        alpha,
        c,
        tau: DEFAULT_TAU,
        stable_mode: mode,
        safe_mode: mode,
    })
}

impl<C: Controller> ProjectedController<C> {
    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn base(&self) -> &C {
        &self.base
    }

    pub fn rate(&self) -> f64 {
        self.c
    }

    /// Diagnostics at each column of `xs` (all at time `t`).
    pub fn evaluate_batch(&self, t: f64, xs: &Array2<f64>) -> Result<Vec<Diagnostics>> {
        let f = self.model.drift_batch(xs)?;
        let g = self.model.diffusion_batch(xs);
        // both backends are deterministic here, the rng is never drawn from
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hp = parts_given(self.barrier.as_ref(), xs, &f, &g, self.safe_mode, &mut rng)?;
        let vp = parts_given(self.potential.as_ref(), xs, &f, &g, self.stable_mode, &mut rng)?;
        let mut out = Vec::with_capacity(xs.ncols());
        for j in 0..xs.ncols() {
            let x = xs.column(j).to_vec();
            let u0 = self.base.control(t, &x)?;
            let alpha_h = self.alpha.alpha(hp.value[j]);
            let sf = project_safe_at(&hp, j, &u0, alpha_h, self.tau);
            let es = project_stable_at(&vp, j, &sf.u, self.c, self.tau);
            check_finite("projected control", &es.u)?;
            out.push(Diagnostics {
                inside: self.barrier.hard_value(&x) >= 0.0,
                safety_before: sf.residual_before,
                safety_after: safety_residual(&hp, j, &es.u, alpha_h),
                stability_before: stability_residual(&vp, j, &u0, self.c),
                stability_after: es.residual_after,
                safe_correction: sf.correction_norm,
                stable_correction: es.correction_norm,
                x,
                u_base: u0,
                u: es.u,
            });
        }
        Ok(out)
    }

    pub fn evaluate(&self, t: f64, x: &[f64]) -> Result<Diagnostics> {
        Ok(self.evaluate_batch(t, &column(x))?.remove(0))
    }
}

impl<C: Controller> Controller for ProjectedController<C> {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }
    fn control(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(t, x)?.u)
    }
}

/// Writes diagnostics as CSV, optionally preceded by a `# config_digest=` line.
pub fn write_diagnostics_csv<W: Write>(mut w: W, rows: &[Diagnostics], digest: Option<&str>) -> Result<()> {
    if let Some(d) = digest {
        writeln!(w, "# config_digest={d}")?;
    }
    let dim = rows.first().map_or(0, |r| r.x.len());
    let mut header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    header.extend(
        [
            "safety_before",
            "safety_after",
            "stability_before",
            "stability_after",
            "safe_correction",
            "stable_correction",
            "inside",
        ]
        .map(String::from),
    );
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut cells: Vec<String> = r.x.iter().map(|v| format!("{v:.16e}")).collect();
        for v in [
            r.safety_before,
            r.safety_after,
            r.stability_before,
            r.stability_after,
            r.safe_correction,
            r.stable_correction,
        ] {
            cells.push(format!("{v:.16e}"));
        }
        cells.push(u8::from(r.inside).to_string());
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// `V(x) = h(0) − h(x)` for a barrier that is maximal at the origin.
pub struct BarrierPotential {
    barrier: Arc<dyn Barrier>,
    h0: f64,
}

impl BarrierPotential {
    pub fn h0(&self) -> f64 {
        self.h0
    }
}

impl ScalarField for BarrierPotential {
    fn dim(&self) -> usize {
        self.barrier.dim()
    }
    fn eval_tape<'t>(&self, x: Var<'t>) -> Var<'t> {
        -self.barrier.eval_tape(x) + self.h0
    }
}

/// Builds `h(0) − h` after checking on `samples` draws from the region that
/// `h` does not exceed `h(0)` by more than 1e-6.
pub fn potential_from_barrier<R: Rng + ?Sized>(
    region: &SafeRegionSpec,
    samples: usize,
    rng: &mut R,
) -> Result<BarrierPotential> {
    let d = region.barrier.dim();
    let h0 = region.barrier.value(&vec![0.0; d]);
    let xs = region.sampler.sample(rng, samples);
    let values = region.barrier.values(&xs);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > h0 + 1e-6 {
        return Err(Error::BarrierNotMaximal { origin: h0, sampled: max });
    }
    Ok(BarrierPotential {
        barrier: region.barrier.clone(),
        h0,
    })
}

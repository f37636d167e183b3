//! Joint training of controller, potential and class-K nets.

mod adam;
mod config;

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::dynamics::System;
use crate::error::{Error, Result};
use crate::generator::{tape_terms, TraceMode};
use crate::nets::{ClassKNet, ControllerNet, Parameterized, PotentialNet};
use crate::projection::parts_given;

pub use adam::Adam;
pub use config::TrainConfig;

/// The three nets trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub controller: ControllerNet,
    pub potential: PotentialNet,
    pub classk: ClassKNet,
}

impl Models {
    /// Fresh nets sized for `system`, with spectrally normalized controller
    /// weights and a nonnegative potential.
    pub fn init<R: Rng + ?Sized>(cfg: &TrainConfig, system: &System, rng: &mut R) -> Result<Self> {
        let d = system.dim();
        let widths = |hidden: &[usize], out: usize, inp: usize| {
            let mut w = vec![inp];
            w.extend_from_slice(hidden);
            w.push(out);
            w
        };
        let mut controller = ControllerNet::new(&widths(&cfg.controller_hidden, d, d), cfg.activation, rng)?
            .with_mask(system.control_mask.clone())?;
        controller.spectral_normalize(50);
        let mut potential = PotentialNet::new(&widths(&cfg.potential_hidden, 1, d), cfg.epsilon, cfg.p, rng)?;
        potential.clamp_nonnegative();
        let classk = ClassKNet::new(&widths(&cfg.classk_hidden, 1, 1), rng)?;
        Ok(Self {
            controller,
            potential,
            classk,
        })
    }

    /// Every parameter matrix: controller, then potential, then class-K.
    pub fn parameters(&self) -> Vec<&Array2<f64>> {
        self.controller
            .parameters()
            .iter()
            .chain(self.potential.parameters())
            .chain(self.classk.parameters())
            .collect()
    }

    fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.controller
            .parameters_mut()
            .iter_mut()
            .chain(self.potential.parameters_mut().iter_mut())
            .chain(self.classk.parameters_mut().iter_mut())
    }

    pub fn num_parameters(&self) -> usize {
        self.controller.num_parameters() + self.potential.num_parameters() + self.classk.num_parameters()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.parameters().into_iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn set_flat_parameters(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_parameters(), "parameter count");
        let mut k = 0;
        for p in self.parameters_mut() {
            for v in p.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
    }
}

/// `N` points from the system's safe-region sampler, `d × N`.
pub fn sample_safe_region<R: Rng + ?Sized>(system: &System, n: usize, rng: &mut R) -> Array2<f64> {
    system.safe_region.sampler.sample(rng, n)
}

/// The constants shared by both losses.
#[derive(Clone, Debug)]
pub struct LossSettings {
    pub c: f64,
    pub lambda_es: f64,
    pub lambda_sf: f64,
    /// `R`; identity when `None`.
    pub control_weight: Option<Array2<f64>>,
    pub trace_mode: TraceMode,
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig, system: &System) -> Result<Self> {
        let mode = cfg
            .trace_mode
            .unwrap_or_else(|| TraceMode::training(system.model.noise_dim()));
        mode.check(system.model.noise_dim())?;
        Ok(Self {
            c: cfg.c,
            lambda_es: cfg.lambda_es,
            lambda_sf: cfg.lambda_sf,
            control_weight: cfg.control_weight_matrix(system.dim())?,
            trace_mode: mode,
        })
    }
}

/// Per-point loss summands on one chunk, each `1 × n`.
struct ChunkTerms<'t> {
    stability: Var<'t>,
    safety: Var<'t>,
}

fn chunk_terms<'t>(
    tape: &'t Tape,
    models: &Models,
    params: &[Var<'t>],
    system: &System,
    xs: &Array2<f64>,
    settings: &LossSettings,
    rng: &mut ChaCha8Rng,
) -> Result<ChunkTerms<'t>> {
    let nc = models.controller.parameters().len();
    let np = models.potential.parameters().len();
    let (pc, rest) = params.split_at(nc);
    let (pp, pk) = rest.split_at(np);

    let model = &*system.model;
    let f = model.drift_batch(xs)?;
    let g = model.diffusion_batch(xs);

    let u = models.controller.forward(pc, tape.constant(xs.clone()));
    let effort = match &settings.control_weight {
        None => u.square().col_sums(),
        Some(r) => (u * tape.constant(r.clone()).matmul(u)).col_sums(),
    };

    let x = tape.var(xs.clone());
    let v = tape_terms(|x| models.potential.forward(pp, x), x, &f, &g, settings.trace_mode, rng)?;
    let stab = (v.apply(u) - v.value * settings.c).relu();

    // the barrier has no parameters, so its pieces enter as constants
    let h = parts_given(&*system.safe_region.barrier, xs, &f, &g, settings.trace_mode, rng)?;
    let n = xs.ncols();
    let row = |v: &[f64]| tape.constant(Array2::from_shape_vec((1, n), v.to_vec()).expect("row"));
    let h_value = row(&h.value);
    let lh = row(&h.drift_term) + (tape.constant(h.grad.clone()) * u).col_sums() + row(&h.trace) * 0.5;
    let alpha = models.classk.forward(pk, h_value);
    let safe = (-(lh + alpha)).relu();

    Ok(ChunkTerms {
        stability: effort + stab * settings.lambda_es,
        safety: effort + safe * settings.lambda_sf,
    })
}

/// Loss values on a batch and their gradients for every parameter matrix,
/// in [`Models::parameters`] order.
#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub stability: f64,
    pub safety: f64,
    pub gradients: Vec<Array2<f64>>,
}

impl LossEvaluation {
    pub fn total(&self) -> f64 {
        self.stability + self.safety
    }
}

/// RNG for chunk `chunk` of iteration `iteration`; independent of how
/// chunks are scheduled across threads.
fn chunk_rng(seed: u64, iteration: usize, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
    rng.set_stream(((iteration as u64) << 24) | chunk as u64);
    rng
}

/// Both losses and their parameter gradients, averaged over the columns of
/// `xs`. Work is split into chunks of `chunk_size` columns evaluated in
/// parallel and reduced in a fixed order.
pub fn evaluate_loss(
    models: &Models,
    system: &System,
    settings: &LossSettings,
    xs: &Array2<f64>,
    chunk_size: usize,
    seed: u64,
    iteration: usize,
) -> Result<LossEvaluation> {
    let n = xs.ncols();
    if xs.nrows() != system.dim() {
        return Err(Error::DimensionMismatch {
            context: "training batch",
            expected: system.dim(),
            got: xs.nrows(),
        });
    }
    if n == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let chunk_size = chunk_size.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk_size).collect();
    let scale = 1.0 / n as f64;
    let parts: Vec<Result<(f64, f64, Vec<Array2<f64>>)>> = starts
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            let e = (s + chunk_size).min(n);
            let chunk = xs.slice(ndarray::s![.., s..e]).to_owned();
            let mut rng = chunk_rng(seed, iteration, k);
            let tape = Tape::new();
            let params: Vec<Var<'_>> = models.parameters().into_iter().map(|p| tape.var(p.clone())).collect();
            let terms = chunk_terms(&tape, models, &params, system, &chunk, settings, &mut rng)?;
            let (stab, safe) = (terms.stability.to_array(), terms.safety.to_array());
            if let Some(j) = (0..chunk.ncols()).find(|&j| !(stab[[0, j]].is_finite() && safe[[0, j]].is_finite())) {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    point: chunk.column(j).to_vec(),
                });
            }
            let total = (terms.stability.sum() + terms.safety.sum()) * scale;
            let grads = tape.grad(total, &params).into_iter().map(|g| g.to_array()).collect();
            Ok((stab.sum() * scale, safe.sum() * scale, grads))
        })
        .collect();

    let mut stability = 0.0;
    let mut safety = 0.0;
    let mut gradients: Vec<Array2<f64>> = models.parameters().iter().map(|p| Array2::zeros(p.dim())).collect();
    for part in parts {
        let (a, b, g) = part?;
        stability += a;
        safety += b;
        for (acc, gi) in gradients.iter_mut().zip(g) {
            *acc += &gi;
        }
    }
    if let Some(k) = gradients.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of parameter matrix {k} at iteration {iteration}")));
    }
    Ok(LossEvaluation {
        stability,
        safety,
        gradients,
    })
}

/// `(1/N) Σ [uᵀRu + λ₁ max(0, 𝓛V − cV)]` on the columns of `xs`.
#[allow(clippy::too_many_arguments)]
pub fn stability_loss(
    controller: &ControllerNet,
    potential: &PotentialNet,
    system: &System,
    xs: &Array2<f64>,
    c: f64,
    lambda: f64,
    control_weight: Option<&Array2<f64>>,
    mode: TraceMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let tape = Tape::new();
    let u = controller.forward(&controller.parameter_vars(&tape, false), tape.constant(xs.clone()));
    let effort = match control_weight {
        None => u.square().col_sums(),
        Some(r) => (u * tape.constant(r.clone()).matmul(u)).col_sums(),
    };
    let f = system.model.drift_batch(xs)?;
    let g = system.model.diffusion_batch(xs);
    let pp = potential.parameter_vars(&tape, false);
    let v = tape_terms(|x| potential.forward(&pp, x), tape.var(xs.clone()), &f, &g, mode, rng)?;
    let per_point = effort + (v.apply(u) - v.value * c).relu() * lambda;
    Ok(per_point.mean().item())
}

/// `(1/N) Σ [uᵀRu + λ₂ max(0, −𝓛h − α(h))]` on the columns of `xs`.
#[allow(clippy::too_many_arguments)]
pub fn safety_loss(
    controller: &ControllerNet,
    classk: &ClassKNet,
    system: &System,
    xs: &Array2<f64>,
    lambda: f64,
    control_weight: Option<&Array2<f64>>,
    mode: TraceMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let tape = Tape::new();
    let u = controller.forward(&controller.parameter_vars(&tape, false), tape.constant(xs.clone()));
    let effort = match control_weight {
        None => u.square().col_sums(),
        Some(r) => (u * tape.constant(r.clone()).matmul(u)).col_sums(),
    };
    let f = system.model.drift_batch(xs)?;
    let g = system.model.diffusion_batch(xs);
    let h = tape_terms(|x| system.safe_region.barrier.eval_tape(x), tape.var(xs.clone()), &f, &g, mode, rng)?;
    let alpha = classk.forward(&classk.parameter_vars(&tape, false), h.value);
    let per_point = effort + (-(h.apply(u) + alpha)).relu() * lambda;
    Ok(per_point.mean().item())
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub stability: f64,
    pub safety: f64,
}

impl HistoryRecord {
    pub fn total(&self) -> f64 {
        self.stability + self.safety
    }
}

/// Per-iteration losses, recorded before each parameter update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn first(&self) -> Option<&HistoryRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    /// Mean total loss over the last `k` records.
    pub fn tail_mean(&self, k: usize) -> Option<f64> {
        let k = k.min(self.records.len());
        if k == 0 {
            return None;
        }
        let tail = &self.records[self.records.len() - k..];
        Some(tail.iter().map(HistoryRecord::total).sum::<f64>() / k as f64)
    }

    pub fn write_csv<W: Write>(&self, mut w: W, digest: Option<&str>) -> Result<()> {
        if let Some(d) = digest {
            writeln!(w, "# config_digest={d}")?;
        }
        writeln!(w, "iteration,l_es,l_sf,total")?;
        for r in &self.records {
            writeln!(w, "{},{:.16e},{:.16e},{:.16e}", r.iteration, r.stability, r.safety, r.total())?;
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub models: Models,
    pub history: History,
}

/// Warm-started power iterations per update; the persisted vectors make a
/// handful enough to keep every layer norm within rounding of 1.
pub const SPECTRAL_ITERATIONS: usize = 5;

/// Trains from a fresh initialization drawn with `cfg.seed`.
pub fn train(cfg: &TrainConfig, system: &System) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let models = Models::init(cfg, system, &mut rng)?;
    train_from(cfg, system, models, &mut rng)
}

/// Runs `cfg.iterations` Adam steps starting at `models`, drawing a fresh
/// batch from the safe-region sampler every iteration.
///
/// After each step the potential's hidden-to-hidden weights are clamped to
/// be nonnegative and the controller weights are spectrally normalized.
pub fn train_from(cfg: &TrainConfig, system: &System, mut models: Models, rng: &mut ChaCha8Rng) -> Result<TrainOutcome> {
    cfg.validate()?;
    let settings = LossSettings::from_config(cfg, system)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut history = History::default();
    for it in 0..cfg.iterations {
        let xs = sample_safe_region(system, cfg.batch_size, rng);
        let eval = evaluate_loss(&models, system, &settings, &xs, cfg.chunk_size, cfg.seed, it)?;
        history.records.push(HistoryRecord {
            iteration: it,
            stability: eval.stability,
            safety: eval.safety,
        });
        opt.step(models.parameters_mut(), &eval.gradients);
        models.potential.clamp_nonnegative();
        models.controller.spectral_normalize(SPECTRAL_ITERATIONS);
    }
    Ok(TrainOutcome { models, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_system, SystemOptions};

    fn small(system: &str) -> (TrainConfig, System) {
        let mut cfg = TrainConfig::for_system(system).unwrap();
        cfg.controller_hidden = vec![4];
        cfg.potential_hidden = vec![4];
        cfg.classk_hidden = vec![4];
        cfg.batch_size = 40;
        cfg.chunk_size = 16;
        let sys = make_system(system, &SystemOptions::default()).unwrap();
        (cfg, sys)
    }

    #[test]
    fn zero_iterations_returns_initial_models() {
        let (mut cfg, sys) = small("gbm");
        cfg.iterations = 0;
        let out = train(&cfg, &sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = Models::init(&cfg, &sys, &mut rng).unwrap();
        assert_eq!(out.models, init);
        assert!(out.history.records.is_empty());
    }

    #[test]
    fn chunked_evaluation_matches_separate_losses() {
        let (cfg, sys) = small("double_pendulum");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let models = Models::init(&cfg, &sys, &mut rng).unwrap();
        let settings = LossSettings::from_config(&cfg, &sys).unwrap();
        let xs = sample_safe_region(&sys, 37, &mut rng);
        let eval = evaluate_loss(&models, &sys, &settings, &xs, 10, 0, 0).unwrap();
        let one = evaluate_loss(&models, &sys, &settings, &xs, 100, 0, 0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let les = stability_loss(
            &models.controller,
            &models.potential,
            &sys,
            &xs,
            cfg.c,
            cfg.lambda_es,
            None,
            settings.trace_mode,
            &mut r,
        )
        .unwrap();
        let lsf = safety_loss(&models.controller, &models.classk, &sys, &xs, cfg.lambda_sf, None, settings.trace_mode, &mut r)
            .unwrap();
        assert!((eval.stability - les).abs() < 1e-12 * les.abs().max(1.0));
        assert!((eval.safety - lsf).abs() < 1e-12 * lsf.abs().max(1.0));
        for (a, b) in eval.gradients.iter().zip(&one.gradients) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (mut cfg, sys) = small("gbm");
        cfg.iterations = 5;
        let a = train(&cfg, &sys).unwrap();
        let b = train(&cfg, &sys).unwrap();
        assert_eq!(a.models, b.models);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn constraints_hold_after_steps() {
        let (mut cfg, sys) = small("bicycle");
        for iters in [1, 5, 20] {
            cfg.iterations = iters;
            let out = train(&cfg, &sys).unwrap();
            assert!(out.models.potential.min_u_entry() >= 0.0);
            for s in out.models.controller.spectral_bounds(500) {
                assert!(s < 1.01, "spectral norm {s} after {iters} steps");
            }
        }
    }

    fn fd_check(system: &str, mode: TraceMode) {
        let (mut cfg, sys) = small(system);
        cfg.trace_mode = Some(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let models = Models::init(&cfg, &sys, &mut rng).unwrap();
        let settings = LossSettings::from_config(&cfg, &sys).unwrap();
        let xs = sample_safe_region(&sys, 12, &mut rng);
        let eval = evaluate_loss(&models, &sys, &settings, &xs, 5, 0, 0).unwrap();
        let analytic: Vec<f64> = eval.gradients.iter().flat_map(|g| g.iter().copied()).collect();
        let theta = models.flat_parameters();
        let loss = |th: &[f64]| {
            let mut m = models.clone();
            m.set_flat_parameters(th);
            evaluate_loss(&m, &sys, &settings, &xs, 5, 0, 0).unwrap().total()
        };
        let mut worst = 0.0f64;
        for k in 0..theta.len() {
            let h = 1e-6 * theta[k].abs().max(1.0);
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{system}: worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check("bicycle", TraceMode::VectorIdentity);
        fd_check("double_pendulum", TraceMode::VectorIdentity);
        fd_check("three_link", TraceMode::Exact);
        fd_check("gbm", TraceMode::Exact);
    }

    #[test]
    fn history_csv() {
        let h = History {
            records: vec![HistoryRecord {
                iteration: 0,
                stability: 1.0,
                safety: 0.5,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf, Some("abc")).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = s.lines().collect();
        assert_eq!(lines[0], "# config_digest=abc");
        assert_eq!(lines[1], "iteration,l_es,l_sf,total");
        assert!(lines[2].starts_with("0,1.0000000000000000e0,5.0000000000000000e-1,1.5"));
    }
}

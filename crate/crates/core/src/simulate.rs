//! Euler–Maruyama rollouts and trajectory metrics.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Controller, SafeRegionSpec, SdeModel};
use crate::error::{Error, Result};

/// A sampled path with the controls applied at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `controls[k]` is `u(t_k, x_k)`; the last one is recorded but never applied.
    pub controls: Vec<Vec<f64>>,
    pub seed: u64,
    pub dt: f64,
    /// Set when the path was cut short by a non-finite state.
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().map_or(&[], Vec::as_slice)
    }

    /// `t,x1..xd,u1..ud`, seventeen significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W, digest: Option<&str>) -> Result<()> {
        if let Some(d) = digest {
            writeln!(w, "# config_digest={d}")?;
        }
        let d = self.dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.extend((1..=d).map(|i| format!("u{i}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut line = format!("{:.16e}", self.times[k]);
            for v in self.states[k].iter().chain(&self.controls[k]) {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Times, states and controls parsed back from [`Trajectory::write_csv`].
pub fn read_trajectory_csv<R: BufRead>(r: R) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    let mut d = None;
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('t') {
            let cols = line.split(',').count();
            if cols < 3 || (cols - 1) % 2 != 0 {
                return Err(Error::config("trajectory csv", format!("bad header `{line}`")));
            }
            d = Some((cols - 1) / 2);
            continue;
        }
        let d = d.ok_or_else(|| Error::config("trajectory csv", "missing header"))?;
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config("trajectory csv", e.to_string()))?;
        if vals.len() != 1 + 2 * d {
            return Err(Error::config("trajectory csv", format!("row has {} fields, expected {}", vals.len(), 1 + 2 * d)));
        }
        times.push(vals[0]);
        states.push(vals[1..=d].to_vec());
        controls.push(vals[d + 1..].to_vec());
    }
    Ok((times, states, controls))
}

/// Errors that end a path instead of the whole run.
fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::SingularMatrix { .. })
}

/// One step `x + dt (f + u) + g dW` where `dw` already carries the `√dt`.
fn step(model: &dyn SdeModel, x: &[f64], u: &[f64], dt: f64, dw: &[f64]) -> Result<Vec<f64>> {
    let f = model.drift(x)?;
    let g = model.diffusion(x);
    let mut next = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let noise: f64 = g.row(i).iter().zip(dw).map(|(a, b)| a * b).sum();
        next.push(x[i] + dt * (f[i] + u[i]) + noise);
    }
    Ok(next)
}

fn integrate<C, N>(
    model: &dyn SdeModel,
    controller: &C,
    x0: &[f64],
    dt: f64,
    steps: usize,
    seed: u64,
    mut increment: N,
) -> Result<Trajectory>
where
    C: Controller + ?Sized,
    N: FnMut(usize) -> Vec<f64>,
{
    let d = model.state_dim();
    if x0.len() != d || controller.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "rollout state",
            expected: d,
            got: if x0.len() != d { x0.len() } else { controller.dim() },
        });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config("dt", "must be positive"));
    }
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        controls: Vec::with_capacity(steps + 1),
        seed,
        dt,
        diverged: false,
    };
    let mut x = x0.to_vec();
    for k in 0..=steps {
        let t = k as f64 * dt;
        let u = match controller.control(t, &x) {
            Ok(u) if u.iter().all(|v| v.is_finite()) => u,
            Ok(_) => {
                traj.diverged = true;
                break;
            }
            Err(e) if is_divergence(&e) => {
                traj.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.controls.push(u.clone());
        if k == steps {
            break;
        }
        let dw = increment(k);
        match step(model, &x, &u, dt, &dw) {
            Ok(next) if next.iter().all(|v| v.is_finite()) => x = next,
            Ok(_) => {
                traj.diverged = true;
                break;
            }
            Err(e) if is_divergence(&e) => {
                traj.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(traj)
}

/// Number of steps covering `[0, horizon]`.
pub fn step_count(dt: f64, horizon: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::config("dt", "must be positive"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::config("horizon", "must be nonnegative"));
    }
    Ok((horizon / dt).round() as usize)
}

/// Euler–Maruyama with Gaussian increments drawn from a ChaCha stream
/// seeded by `seed`.
pub fn euler_maruyama<C: Controller + ?Sized>(
    model: &dyn SdeModel,
    controller: &C,
    x0: &[f64],
    dt: f64,
    horizon: f64,
    seed: u64,
) -> Result<Trajectory> {
    let steps = step_count(dt, horizon)?;
    let r = model.noise_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = dt.sqrt();
    integrate(model, controller, x0, dt, steps, seed, |_| {
        (0..r).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sq * z
        }).collect()
    })
}

/// Euler–Maruyama along given Brownian increments `ΔB_k` (each an
/// `r`-vector, already scaled by `√dt`).
pub fn euler_maruyama_path<C: Controller + ?Sized>(
    model: &dyn SdeModel,
    controller: &C,
    x0: &[f64],
    dt: f64,
    increments: &[Vec<f64>],
) -> Result<Trajectory> {
    let r = model.noise_dim();
    if let Some(bad) = increments.iter().find(|w| w.len() != r) {
        return Err(Error::DimensionMismatch {
            context: "Brownian increment",
            expected: r,
            got: bad.len(),
        });
    }
    integrate(model, controller, x0, dt, increments.len(), 0, |k| increments[k].clone())
}

/// Seeded rollouts from the given starts, in parallel; output order
/// follows the input order.
pub fn rollouts<C: Controller + ?Sized>(
    model: &dyn SdeModel,
    controller: &C,
    starts: &[(Vec<f64>, u64)],
    dt: f64,
    horizon: f64,
) -> Vec<Result<Trajectory>> {
    starts
        .par_iter()
        .map(|(x0, seed)| euler_maruyama(model, controller, x0, dt, horizon, *seed))
        .collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Least-squares slope of `log‖x(t)‖` over the second half of the path.
///
/// Zero states are skipped; if every state in the window is zero the
/// result is `-∞`. Fewer than two usable points give NaN.
pub fn lyapunov_slope(traj: &Trajectory) -> f64 {
    let start = traj.len() / 2;
    let mut ts = Vec::new();
    let mut ls = Vec::new();
    let mut zeros = 0usize;
    for k in start..traj.len() {
        let n = norm(&traj.states[k]);
        if n > 0.0 {
            ts.push(traj.times[k]);
            ls.push(n.ln());
        } else {
            zeros += 1;
        }
    }
    if ts.is_empty() && zeros > 0 {
        return f64::NEG_INFINITY;
    }
    if ts.len() < 2 {
        return f64::NAN;
    }
    let m = ts.len() as f64;
    let tm = ts.iter().sum::<f64>() / m;
    let lm = ls.iter().sum::<f64>() / m;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, l) in ts.iter().zip(&ls) {
        num += (t - tm) * (l - lm);
        den += (t - tm) * (t - tm);
    }
    num / den
}

/// Fraction of recorded states with `h(x) ≥ 0` under the hard barrier.
pub fn safety_rate(traj: &Trajectory, region: &SafeRegionSpec) -> f64 {
    if traj.is_empty() {
        return 1.0;
    }
    let inside = traj.states.iter().filter(|x| region.contains(x)).count();
    inside as f64 / traj.len() as f64
}

/// Left Riemann sum of `‖u‖² dt`.
pub fn control_energy(traj: &Trajectory) -> f64 {
    let n = traj.len().saturating_sub(1);
    traj.controls[..n]
        .iter()
        .map(|u| u.iter().map(|v| v * v).sum::<f64>() * traj.dt)
        .sum()
}

/// How closeness to the target is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetNorm {
    Euclidean,
    MaxAbs,
}

/// "Close to the target for `hold` consecutive seconds".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessCriterion {
    /// Coordinates that enter the distance.
    pub coords: Vec<usize>,
    pub norm: TargetNorm,
    pub threshold: f64,
    /// Seconds.
    pub hold: f64,
    /// `distance < threshold` when set, `≤` otherwise.
    #[serde(default)]
    pub strict: bool,
}

impl SuccessCriterion {
    /// Defaults per system: pendulum-type angles within π/40 for 3 s,
    /// bicycle position within 0.1 for 2 s, FHN deviations below 0.1 for 1 s.
    pub fn for_system(system: &str, dim: usize) -> Option<Self> {
        match system {
            "double_pendulum" => Some(Self {
                coords: vec![0, 1],
                norm: TargetNorm::MaxAbs,
                threshold: PI / 40.0,
                hold: 3.0,
                strict: false,
            }),
            "three_link" => Some(Self {
                coords: vec![0, 1, 2],
                norm: TargetNorm::MaxAbs,
                threshold: PI / 40.0,
                hold: 3.0,
                strict: false,
            }),
            "bicycle" => Some(Self {
                coords: vec![0, 1],
                norm: TargetNorm::Euclidean,
                threshold: 0.1,
                hold: 2.0,
                strict: true,
            }),
            "fhn" => Some(Self {
                coords: (0..dim).collect(),
                norm: TargetNorm::MaxAbs,
                threshold: 0.1,
                hold: 1.0,
                strict: true,
            }),
            _ => None,
        }
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        let vals = self.coords.iter().map(|&i| x[i]);
        match self.norm {
            TargetNorm::Euclidean => vals.map(|v| v * v).sum::<f64>().sqrt(),
            TargetNorm::MaxAbs => vals.fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    fn close(&self, x: &[f64]) -> bool {
        let d = self.distance(x);
        if self.strict {
            d < self.threshold
        } else {
            d <= self.threshold
        }
    }
}

/// True once the path stays within the threshold over a window of at
/// least `hold` seconds; a window ending at the last sample counts.
pub fn success(traj: &Trajectory, criterion: &SuccessCriterion) -> bool {
    let tol = 1e-9 * traj.dt.max(1.0);
    let mut entered: Option<f64> = None;
    for (t, x) in traj.times.iter().zip(&traj.states) {
        if criterion.close(x) {
            let t0 = *entered.get_or_insert(*t);
            if t - t0 >= criterion.hold - tol {
                return true;
            }
        } else {
            entered = None;
        }
    }
    false
}

/// Summary numbers for one rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub safety_rate: f64,
    pub success: bool,
    pub control_energy: f64,
    pub lyapunov_slope: f64,
    pub min_target_distance: f64,
    pub diverged: bool,
}

impl MetricsReport {
    /// Without a criterion, success is false and the distance is `‖x‖`.
    pub fn compute(traj: &Trajectory, region: &SafeRegionSpec, criterion: Option<&SuccessCriterion>) -> Self {
        let min_target_distance = traj
            .states
            .iter()
            .map(|x| criterion.map_or_else(|| norm(x), |c| c.distance(x)))
            .fold(f64::INFINITY, f64::min);
        Self {
            safety_rate: safety_rate(traj, region),
            success: criterion.is_some_and(|c| success(traj, c)),
            control_energy: control_energy(traj),
            lyapunov_slope: lyapunov_slope(traj),
            min_target_distance,
            diverged: traj.diverged,
        }
    }
}

/// A report tagged with what produced it, for the metrics JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub config_digest: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

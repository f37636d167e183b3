//! The controlled diffusion generator
//! `𝓛_u V(x) = ∇V(x)·(f(x) + u(x)) + ½ Tr[g(x)ᵀ ℋV(x) g(x)]`.
//!
//! The trace term can be computed exactly (one Hessian-vector product per
//! noise column), estimated with Hutchinson probes, or, for a single noise
//! column, obtained from the identity `gᵀ∇((ḡ)ᵀ∇V)` where `ḡ` carries no
//! derivative. The on-tape form keeps everything differentiable in the
//! parameters of `V`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{column, ScalarField, Tape, Var};
use crate::dynamics::{Controller, SdeModel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Noise {
    #[default]
    Rademacher,
    Gaussian,
}

impl Noise {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Noise::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Noise::Gaussian => StandardNormal.sample(rng),
        }
    }

    fn probe<R: Rng + ?Sized>(self, rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.draw(rng))
    }
}

/// How the second-order term is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    Exact,
    Hutchinson { samples: usize, noise: Noise },
    VectorIdentity,
}

impl TraceMode {
    /// Training default: Hutchinson with one probe when `r > 1`, else the identity.
    pub fn training(noise_dim: usize) -> Self {
        if noise_dim > 1 {
            TraceMode::Hutchinson {
                samples: 1,
                noise: Noise::Rademacher,
            }
        } else {
            TraceMode::VectorIdentity
        }
    }

    /// Projection default: never a stochastic estimate.
    pub fn projection(noise_dim: usize) -> Self {
        if noise_dim > 1 {
            TraceMode::Exact
        } else {
            TraceMode::VectorIdentity
        }
    }

    pub fn is_deterministic(self) -> bool {
        !matches!(self, TraceMode::Hutchinson { .. })
    }

    pub fn check(self, noise_dim: usize) -> Result<()> {
        match self {
            TraceMode::VectorIdentity if noise_dim != 1 => Err(Error::TraceMode(format!(
                "vector identity needs one noise column, model has {noise_dim}"
            ))),
            TraceMode::Hutchinson { samples: 0, .. } => {
                Err(Error::TraceMode("Hutchinson needs at least one sample".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TraceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceMode::Exact => write!(f, "exact"),
            TraceMode::VectorIdentity => write!(f, "vector"),
            TraceMode::Hutchinson { samples, noise } => {
                let n = match noise {
                    Noise::Rademacher => "rademacher",
                    Noise::Gaussian => "gaussian",
                };
                write!(f, "hutchinson:{samples}:{n}")
            }
        }
    }
}

impl FromStr for TraceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::TraceMode(s.to_string());
        match s {
            "exact" => return Ok(TraceMode::Exact),
            "vector" => return Ok(TraceMode::VectorIdentity),
            _ => {}
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["hutchinson", m, noise] => {
                let samples: usize = m.parse().map_err(|_| bad())?;
                if samples == 0 {
                    return Err(bad());
                }
                let noise = match *noise {
                    "rademacher" => Noise::Rademacher,
                    "gaussian" => Noise::Gaussian,
                    _ => return Err(bad()),
                };
                Ok(TraceMode::Hutchinson { samples, noise })
            }
            _ => Err(bad()),
        }
    }
}

impl serde::Serialize for TraceMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for TraceMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The `u`-independent pieces of the generator on a batch, as tape nodes.
pub struct TapeTerms<'t> {
    /// Field values, `1 × n`.
    pub value: Var<'t>,
    /// `∇V`, `d × n`.
    pub grad: Var<'t>,
    /// `∇V · f`, `1 × n`.
    pub drift_term: Var<'t>,
    /// `Tr[gᵀ ℋV g]` (or its estimate), `1 × n`.
    pub trace: Var<'t>,
}

impl<'t> TapeTerms<'t> {
    /// `𝓛_u V` for a `d × n` control node.
    pub fn apply(&self, u: Var<'t>) -> Var<'t> {
        self.drift_term + (self.grad * u).col_sums() + self.trace * 0.5
    }
}

/// Records the generator pieces of `field` at the leaf `x` (`d × n`).
///
/// `f` is the drift batch and `g` the diffusion columns (one `d × n` matrix
/// per noise dimension), both treated as constants.
pub fn tape_terms<'t, F, R>(
    field: F,
    x: Var<'t>,
    f: &Array2<f64>,
    g: &[Array2<f64>],
    mode: TraceMode,
    rng: &mut R,
) -> Result<TapeTerms<'t>>
where
    F: Fn(Var<'t>) -> Var<'t>,
    R: Rng + ?Sized,
{
    mode.check(g.len())?;
    let tape = x.tape();
    let (d, n) = x.shape();
    if f.dim() != (d, n) {
        return Err(Error::DimensionMismatch {
            context: "generator drift batch",
            expected: d * n,
            got: f.len(),
        });
    }
    if let Some(bad) = g.iter().find(|gk| gk.dim() != (d, n)) {
        return Err(Error::DimensionMismatch {
            context: "generator diffusion batch",
            expected: d * n,
            got: bad.len(),
        });
    }
    let value = field(x);
    let grad = tape.grad(value.sum(), &[x])[0];
    let drift_term = (grad * tape.constant(f.clone())).col_sums();
    let quad = |dir: Var<'t>, other: Var<'t>| -> Var<'t> {
        // (∇(dirᵀ∇V))ᵀ other, per column
        let hv = tape.grad((grad * dir).col_sums().sum(), &[x])[0];
        (hv * other).col_sums()
    };
    let zero = || tape.constant(Array2::zeros((1, n)));
    let trace = match mode {
        TraceMode::Exact | TraceMode::VectorIdentity => g.iter().fold(None, |acc: Option<Var<'t>>, gk| {
            let gv = tape.constant(gk.clone());
            let term = quad(gv, gv);
            Some(match acc {
                Some(a) => a + term,
                None => term,
            })
        }),
        TraceMode::Hutchinson { samples, noise } => {
            let mut acc: Option<Var<'t>> = None;
            for _ in 0..samples {
                let xi = noise.probe(rng, d, n);
                // g gᵀ ξ, column by column
                let mut ggxi = Array2::zeros((d, n));
                for gk in g {
                    let w = (gk * &xi).sum_axis(ndarray::Axis(0));
                    ggxi = ggxi + gk * &w.insert_axis(ndarray::Axis(0));
                }
                let term = quad(tape.constant(xi), tape.constant(ggxi));
                acc = Some(match acc {
                    Some(a) => a + term,
                    None => term,
                });
            }
            acc.map(|a| a * (1.0 / samples as f64))
        }
    }
    .unwrap_or_else(zero);
    Ok(TapeTerms {
        value,
        grad,
        drift_term,
        trace,
    })
}

/// Numeric generator pieces at a batch of points.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParts {
    pub value: Vec<f64>,
    /// `d × n`.
    pub grad: Array2<f64>,
    pub drift_term: Vec<f64>,
    pub trace: Vec<f64>,
}

impl GeneratorParts {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// `𝓛_u V` at point `j`.
    pub fn apply(&self, j: usize, u: &[f64]) -> f64 {
        let gu: f64 = self.grad.column(j).iter().zip(u).map(|(a, b)| a * b).sum();
        self.drift_term[j] + gu + 0.5 * self.trace[j]
    }

    /// `‖∇V‖²` at point `j`.
    pub fn grad_norm_sq(&self, j: usize) -> f64 {
        self.grad.column(j).iter().map(|v| v * v).sum()
    }

    pub fn grad_at(&self, j: usize) -> Vec<f64> {
        self.grad.column(j).to_vec()
    }
}

/// Generator pieces of `field` under `model` at every column of `xs`.
pub fn generator_parts<R: Rng + ?Sized>(
    model: &dyn SdeModel,
    field: &dyn ScalarField,
    xs: &Array2<f64>,
    mode: TraceMode,
    rng: &mut R,
) -> Result<GeneratorParts> {
    let d = model.state_dim();
    if xs.nrows() != d || field.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "generator state",
            expected: d,
            got: if xs.nrows() != d { xs.nrows() } else { field.dim() },
        });
    }
    let f = model.drift_batch(xs)?;
    let g = model.diffusion_batch(xs);
    let tape = Tape::new();
    let x = tape.var(xs.clone());
    let t = tape_terms(|v| field.eval_tape(v), x, &f, &g, mode, rng)?;
    let row = |v: Var<'_>| -> Vec<f64> { v.to_array().iter().copied().collect() };
    Ok(GeneratorParts {
        value: row(t.value),
        grad: t.grad.to_array(),
        drift_term: row(t.drift_term),
        trace: row(t.trace),
    })
}

/// `𝓛_u V(x)` with `u` evaluated at time 0.
pub fn apply_generator<R: Rng + ?Sized>(
    model: &dyn SdeModel,
    controller: &dyn Controller,
    field: &dyn ScalarField,
    x: &[f64],
    mode: TraceMode,
    rng: &mut R,
) -> Result<f64> {
    let parts = generator_parts(model, field, &column(x), mode, rng)?;
    let u = controller.control(0.0, x)?;
    Ok(parts.apply(0, &u))
}

fn single_point_trace<R: Rng + ?Sized>(
    field: &dyn ScalarField,
    x: &[f64],
    g: &Array2<f64>,
    mode: TraceMode,
    rng: &mut R,
) -> Result<f64> {
    let d = x.len();
    if field.dim() != d || g.nrows() != d {
        return Err(Error::DimensionMismatch {
            context: "trace state",
            expected: field.dim(),
            got: if g.nrows() != d { g.nrows() } else { d },
        });
    }
    let cols: Vec<Array2<f64>> = g
        .columns()
        .into_iter()
        .map(|c| c.to_owned().insert_axis(ndarray::Axis(1)))
        .collect();
    let tape = Tape::new();
    let xv = tape.var(column(x));
    let t = tape_terms(|v| field.eval_tape(v), xv, &Array2::zeros((d, 1)), &cols, mode, rng)?;
    Ok(t.trace.item())
}

/// Hutchinson estimate `(1/M) Σ (∇(ξᵀ∇V))ᵀ g gᵀ ξ`.
pub fn hutchinson_trace<R: Rng + ?Sized>(
    field: &dyn ScalarField,
    x: &[f64],
    g: &Array2<f64>,
    samples: usize,
    noise: Noise,
    rng: &mut R,
) -> Result<f64> {
    single_point_trace(field, x, g, TraceMode::Hutchinson { samples, noise }, rng)
}

/// `gᵀ∇(ḡᵀ∇V)` for a single diffusion column `g`.
pub fn vector_identity_trace(field: &dyn ScalarField, x: &[f64], g: &[f64]) -> Result<f64> {
    if g.len() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "vector identity diffusion",
            expected: x.len(),
            got: g.len(),
        });
    }
    single_point_trace(field, x, &column(g), TraceMode::VectorIdentity, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))
}

//! Input-space derivatives of scalar fields and parameter gradients of
//! losses built from them.
//!
//! All routines run on a fresh [`Tape`] per call, so they are safe to use
//! from many threads at once.

mod fd;
mod tape;

pub use fd::FiniteDifference;
pub use tape::{column, Func, Tape, Var};

use ndarray::Array2;

use crate::error::{Error, Result};

/// A twice-differentiable scalar field `R^d -> R` that can be recorded on a
/// tape. Batches are `d × n` with one point per column; the result is `1 × n`.
pub trait ScalarField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval_tape<'t>(&self, x: Var<'t>) -> Var<'t>;

    fn value(&self, x: &[f64]) -> f64 {
        let tape = Tape::new();
        self.eval_tape(tape.constant(column(x))).item()
    }

    /// Values at each column of a `d × n` batch.
    fn values(&self, xs: &Array2<f64>) -> Vec<f64> {
        let tape = Tape::new();
        let out = self.eval_tape(tape.constant(xs.clone())).to_array();
        out.iter().copied().collect()
    }
}

impl<F: ScalarField + ?Sized> ScalarField for std::sync::Arc<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_tape<'t>(&self, x: Var<'t>) -> Var<'t> {
        (**self).eval_tape(x)
    }
}

impl<F: ScalarField + ?Sized> ScalarField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_tape<'t>(&self, x: Var<'t>) -> Var<'t> {
        (**self).eval_tape(x)
    }
}

/// A field defined by a closure over tape operations.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: for<'t> Fn(Var<'t>) -> Var<'t> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ScalarField for FnField<F>
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

/// `½ Σ wᵢ xᵢ²`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticField {
    weights: Vec<f64>,
}

impl QuadraticField {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    /// `½‖x‖²`.
    pub fn isotropic(dim: usize) -> Self {
        Self::new(vec![1.0; dim])
    }
}

impl ScalarField for QuadraticField {
    fn dim(&self) -> usize {
        self.weights.len()
    }
    fn eval_tape<'t>(&self, x: Var<'t>) -> Var<'t> {
        let (_, n) = x.shape();
        let w = x
            .tape()
            .constant(column(&self.weights))
            .broadcast_cols(n);
        (x.square() * w).col_sums() * 0.5
    }
}

/// Gradient (and optionally the diffusion trace) of a field at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub point: Vec<f64>,
    pub gradient: Vec<f64>,
    pub hessian_trace: Option<f64>,
}

fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

/// Exact `∇f(x)`.
pub fn input_gradient(field: &dyn ScalarField, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("input_gradient", field.dim(), x.len())?;
    let tape = Tape::new();
    let xv = tape.column(x);
    let y = field.eval_tape(xv);
    let g = tape.grad(y, &[xv])[0];
    let out = g.value().iter().copied().collect();
    Ok(out)
}

/// Gradients at every column of a `d × n` batch, returned as `d × n`.
pub fn input_gradient_batch(field: &dyn ScalarField, xs: &Array2<f64>) -> Result<Array2<f64>> {
    check_dim("input_gradient_batch", field.dim(), xs.nrows())?;
    let tape = Tape::new();
    let xv = tape.var(xs.clone());
    let y = field.eval_tape(xv);
    Ok(tape.grad(y, &[xv])[0].to_array())
}

/// `ℋf(x) · v`.
pub fn hessian_vector_product(field: &dyn ScalarField, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim("hessian_vector_product", field.dim(), x.len())?;
    check_dim("hessian_vector_product direction", x.len(), v.len())?;
    let tape = Tape::new();
    let xv = tape.column(x);
    let y = field.eval_tape(xv);
    let g = tape.grad(y, &[xv])[0];
    let dir = tape.constant(column(v));
    let hv = tape.grad((g * dir).sum(), &[xv])[0];
    let out = hv.value().iter().copied().collect();
    Ok(out)
}

/// `Tr[gᵀ ℋf(x) g]` for a `d × r` matrix `g`, as the sum over columns `gⱼ`
/// of `gⱼᵀ ℋf(x) gⱼ` (one Hessian-vector product per column).
pub fn exact_generator_trace(field: &dyn ScalarField, x: &[f64], g: &Array2<f64>) -> Result<f64> {
    check_dim("exact_generator_trace", field.dim(), x.len())?;
    check_dim("exact_generator_trace diffusion rows", x.len(), g.nrows())?;
    let tape = Tape::new();
    let xv = tape.column(x);
    let y = field.eval_tape(xv);
    let grad = tape.grad(y, &[xv])[0];
    let mut total = 0.0;
    for j in 0..g.ncols() {
        let gj = tape.constant(g.column(j).to_owned().insert_axis(ndarray::Axis(1)));
        let hv = tape.grad((grad * gj).sum(), &[xv])[0];
        total += (hv * gj).sum().item();
    }
    Ok(total)
}

/// Gradient of `loss(θ)` with respect to `θ`. The loss receives `θ` as a
/// `p × 1` node and may take input gradients or Hessian-vector products of
/// anything it builds from it; those are differentiated through.
pub fn parameter_gradient<F>(theta: &[f64], loss: F) -> Result<Vec<f64>>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let th = tape.column(theta);
    let value = loss(th).map_err(|e| Error::Loss {
        context: format!("evaluating loss at θ with {} parameters", theta.len()),
        source: Box::new(e),
    })?;
    if value.shape() != (1, 1) {
        return Err(Error::DimensionMismatch {
            context: "parameter_gradient loss must be scalar",
            expected: 1,
            got: value.shape().0 * value.shape().1,
        });
    }
    let g = tape.grad(value, &[th])[0];
    let out = g.value().iter().copied().collect();
    Ok(out)
}

/// Passes `value` through unchanged while cutting every derivative path.
pub fn stop_gradient(value: Var<'_>) -> Var<'_> {
    value.stop_gradient()
}

/// Gradient plus, when a diffusion matrix is given, the exact trace term.
pub fn gradient_report(
    field: &dyn ScalarField,
    x: &[f64],
    diffusion: Option<&Array2<f64>>,
) -> Result<GradientReport> {
    let gradient = input_gradient(field, x)?;
    let hessian_trace = diffusion
        .map(|g| exact_generator_trace(field, x, g))
        .transpose()?;
    Ok(GradientReport {
        point: x.to_vec(),
        gradient,
        hessian_trace,
    })
}

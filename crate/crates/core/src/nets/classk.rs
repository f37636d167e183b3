use ndarray::Array2;
use rand::Rng;

use super::controller::expect_shape;
use super::quadrature::gauss_legendre;
use super::serial::{LayerDoc, ModelDoc, ModelKind};
use super::{affine, init_uniform, Parameterized};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_QUADRATURE_NODES: usize = 32;

/// `α(s) = ∫₀ˢ q(z) dz` with `q = ELU(·) + 1 > 0` at the end of a ReLU
/// perceptron, integrated by Gauss–Legendre on `[0, s]`.
///
/// The same quadrature also evaluates for `s < 0`, which the training loss
/// needs at sampled points outside the safe region; the checked
/// [`ClassKNet::eval`] refuses negative arguments.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassKNet {
    widths: Vec<usize>,
    params: Vec<Array2<f64>>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl ClassKNet {
    /// `widths = [1, h₁, …, 1]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        validate(widths)?;
        let mut params = Vec::new();
        for i in 0..widths.len() - 1 {
            params.push(init_uniform(rng, widths[i + 1], widths[i], widths[i]));
            params.push(init_uniform(rng, widths[i + 1], 1, widths[i]));
        }
        Self::from_parameters(widths, params, DEFAULT_QUADRATURE_NODES)
    }

    /// Explicit `[W₀, b₀, …, W_k, b_k]`.
    pub fn from_parameters(widths: &[usize], params: Vec<Array2<f64>>, quadrature_nodes: usize) -> Result<Self> {
        validate(widths)?;
        if quadrature_nodes == 0 {
            return Err(Error::config("quadrature_nodes", "must be at least 1"));
        }
        let layers = widths.len() - 1;
        if params.len() != 2 * layers {
            return Err(Error::ModelMismatch(format!(
                "class-K net needs {} matrices, got {}",
                2 * layers,
                params.len()
            )));
        }
        for i in 0..layers {
            expect_shape(&params[2 * i], (widths[i + 1], widths[i]), "class-K weight")?;
            expect_shape(&params[2 * i + 1], (widths[i + 1], 1), "class-K bias")?;
        }
        let (nodes, weights) = gauss_legendre(quadrature_nodes);
        Ok(Self {
            widths: widths.to_vec(),
            params,
            nodes,
            weights,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn quadrature_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// The integrand `q` on a `1 × m` row of arguments.
    pub fn integrand_forward<'t>(&self, p: &[Var<'t>], z: Var<'t>) -> Var<'t> {
        let layers = self.widths.len() - 1;
        let mut q = z;
        for i in 0..layers - 1 {
            q = affine(p[2 * i], q, p[2 * i + 1]).relu();
        }
        affine(p[2 * (layers - 1)], q, p[2 * layers - 1]).elu() + 1.0
    }

    /// `α` on a `1 × n` row.
    pub fn forward<'t>(&self, p: &[Var<'t>], s: Var<'t>) -> Var<'t> {
        let tape = s.tape();
        let (_, n) = s.shape();
        let m = self.nodes.len();
        let t = tape.constant(Array2::from_shape_vec((m, 1), self.nodes.clone()).expect("nodes"));
        let args = t.matmul(s).reshape(1, m * n);
        let q = self.integrand_forward(p, args).reshape(m, n);
        let w = tape.constant(Array2::from_shape_vec((1, m), self.weights.clone()).expect("weights"));
        w.matmul(q) * s
    }

    /// `α(s)` for `s ≥ 0`.
    pub fn eval(&self, s: f64) -> Result<f64> {
        if s < 0.0 || s.is_nan() {
            return Err(Error::NegativeArgument(s));
        }
        Ok(self.eval_extended(s))
    }

    /// Same quadrature without the sign check.
    pub fn eval_extended(&self, s: f64) -> f64 {
        self.eval_many(&[s])[0]
    }

    pub fn eval_many(&self, s: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        let p = self.parameter_vars(&tape, false);
        let row = tape.constant(Array2::from_shape_vec((1, s.len()), s.to_vec()).expect("row"));
        let out = self.forward(&p, row).to_array();
        out.iter().copied().collect()
    }

    /// `q(z)` at one argument.
    pub fn integrand(&self, z: f64) -> f64 {
        let tape = Tape::new();
        let p = self.parameter_vars(&tape, false);
        self.integrand_forward(&p, tape.scalar(z)).item()
    }

    pub fn to_doc(&self) -> ModelDoc {
        let mut doc = ModelDoc::new(ModelKind::ClassK, &self.widths);
        doc.quadrature_nodes = Some(self.nodes.len());
        doc.layers = self
            .params
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let name = if i % 2 == 0 { format!("w{}", i / 2) } else { format!("b{}", i / 2) };
                LayerDoc::from_array(&name, a)
            })
            .collect();
        doc
    }

    pub fn from_doc(doc: &ModelDoc) -> Result<Self> {
        doc.expect_kind(ModelKind::ClassK)?;
        Self::from_parameters(
            &doc.widths,
            doc.arrays()?,
            doc.quadrature_nodes.unwrap_or(DEFAULT_QUADRATURE_NODES),
        )
    }
}

impl Parameterized for ClassKNet {
    fn parameters(&self) -> &[Array2<f64>] {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }
}

fn validate(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::config("widths", "class-K net needs positive widths [1, ..., 1]"));
    }
    if widths[0] != 1 || widths[widths.len() - 1] != 1 {
        return Err(Error::config("widths", "class-K net maps scalars to scalars"));
    }
    Ok(())
}

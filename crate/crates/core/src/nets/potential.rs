use ndarray::Array2;
use rand::Rng;

use super::controller::expect_shape;
use super::serial::{LayerDoc, ModelDoc, ModelKind};
use super::{affine, check_finite, init_uniform, Parameterized, SMOOTH_RELU_WIDTH};
use crate::autodiff::{column, ScalarField, Tape, Var};
use crate::error::{Error, Result};

/// `V(x) = σ(p(x) − p(0)) + ε‖x‖^p` where `p` is an input-convex network and
/// `σ` the C² smoothed rectifier (exactly zero on the negative half-line).
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialNet {
    widths: Vec<usize>,
    params: Vec<Array2<f64>>,
    epsilon: f64,
    power: f64,
}

impl PotentialNet {
    /// `widths = [d, h₁, …, h_k]` with `h_k = 1`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], epsilon: f64, power: f64, rng: &mut R) -> Result<Self> {
        validate(widths, epsilon, power)?;
        let d = widths[0];
        let mut params = vec![
            init_uniform(rng, widths[1], d, d),
            init_uniform(rng, widths[1], 1, d),
        ];
        for i in 1..widths.len() - 1 {
            let fan_in = widths[i] + d;
            params.push(init_uniform(rng, widths[i + 1], widths[i], fan_in).mapv(f64::abs));
            params.push(init_uniform(rng, widths[i + 1], d, fan_in));
            params.push(init_uniform(rng, widths[i + 1], 1, fan_in));
        }
        Self::from_parameters(widths, params, epsilon, power)
    }

    /// Explicit matrices `[W₀, b₀, U₁, W₁, b₁, …]`. Negative `U` entries are
    /// clamped to zero.
    pub fn from_parameters(widths: &[usize], params: Vec<Array2<f64>>, epsilon: f64, power: f64) -> Result<Self> {
        validate(widths, epsilon, power)?;
        let d = widths[0];
        let k = widths.len() - 1;
        if params.len() != 3 * k - 1 {
            return Err(Error::ModelMismatch(format!(
                "potential with {k} layers needs {} matrices, got {}",
                3 * k - 1,
                params.len()
            )));
        }
        expect_shape(&params[0], (widths[1], d), "potential W0")?;
        expect_shape(&params[1], (widths[1], 1), "potential b0")?;
        for i in 1..k {
            let base = 3 * i - 1;
            expect_shape(&params[base], (widths[i + 1], widths[i]), "potential U")?;
            expect_shape(&params[base + 1], (widths[i + 1], d), "potential W")?;
            expect_shape(&params[base + 2], (widths[i + 1], 1), "potential b")?;
        }
        let mut net = Self {
            widths: widths.to_vec(),
            params,
            epsilon,
            power,
        };
        net.clamp_nonnegative();
        Ok(net)
    }

    pub fn dim_in(&self) -> usize {
        self.widths[0]
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    fn u_indices(&self) -> impl Iterator<Item = usize> {
        (1..self.widths.len() - 1).map(|i| 3 * i - 1)
    }

    /// Projects every `U` entry onto `[0, ∞)`.
    pub fn clamp_nonnegative(&mut self) {
        let idx: Vec<usize> = self.u_indices().collect();
        for i in idx {
            self.params[i].mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Smallest entry over all `U` matrices (`+∞` if there are none).
    pub fn min_u_entry(&self) -> f64 {
        self.u_indices()
            .flat_map(|i| self.params[i].iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// The convex core `p(x)` on a `d × n` batch.
    pub fn core_forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let act = |v: Var<'t>| v.smooth_relu(SMOOTH_RELU_WIDTH);
        let mut z = act(affine(p[0], x, p[1]));
        for i in 1..self.widths.len() - 1 {
            let base = 3 * i - 1;
            let pre = p[base].matmul(z) + affine(p[base + 1], x, p[base + 2]);
            z = act(pre);
        }
        z
    }

    /// `V` on a `d × n` batch, `1 × n`.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let (d, n) = x.shape();
        let tape = x.tape();
        let px = self.core_forward(p, x);
        let p0 = self.core_forward(p, tape.constant(Array2::zeros((d, 1))));
        let shifted = (px - p0.broadcast_scalar(1, n)).smooth_relu(SMOOTH_RELU_WIDTH);
        let sq = x.square().col_sums();
        let floor = if self.power == 2.0 {
            sq
        } else {
            sq.powf(0.5 * self.power)
        };
        shifted + floor * self.epsilon
    }

    /// `V(x)` with input checks.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim_in() {
            return Err(Error::DimensionMismatch {
                context: "potential input",
                expected: self.dim_in(),
                got: x.len(),
            });
        }
        check_finite("potential", x)?;
        Ok(self.value(x))
    }

    /// The core `p(x)` at one point.
    pub fn core_value(&self, x: &[f64]) -> f64 {
        let tape = Tape::new();
        let p = self.parameter_vars(&tape, false);
        self.core_forward(&p, tape.constant(column(x))).item()
    }

    pub fn to_doc(&self) -> ModelDoc {
        let mut doc = ModelDoc::new(ModelKind::Potential, &self.widths);
        doc.epsilon = Some(self.epsilon);
        doc.p = Some(self.power);
        doc.layers = self
            .params
            .iter()
            .enumerate()
            .map(|(i, a)| LayerDoc::from_array(&self.layer_name(i), a))
            .collect();
        doc
    }

    fn layer_name(&self, i: usize) -> String {
        match i {
            0 => "w0".into(),
            1 => "b0".into(),
            _ => {
                let layer = (i + 1) / 3;
                match (i + 1) % 3 {
                    0 => format!("u{layer}"),
                    1 => format!("w{layer}"),
                    _ => format!("b{layer}"),
                }
            }
        }
    }

    pub fn from_doc(doc: &ModelDoc) -> Result<Self> {
        doc.expect_kind(ModelKind::Potential)?;
        let eps = doc
            .epsilon
            .ok_or_else(|| Error::ModelMismatch("potential model lacks epsilon".into()))?;
        Self::from_parameters(&doc.widths, doc.arrays()?, eps, doc.p.unwrap_or(2.0))
    }
}

impl Parameterized for PotentialNet {
    fn parameters(&self) -> &[Array2<f64>] {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }
}

impl ScalarField for PotentialNet {
    fn dim(&self) -> usize {
        self.dim_in()
    }
    fn eval_tape<'t>(&self, x: Var<'t>) -> Var<'t> {
        let p = self.parameter_vars(x.tape(), false);
        self.forward(&p, x)
    }
}

fn validate(widths: &[usize], epsilon: f64, power: f64) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::config("widths", "potential needs positive widths [d, h1, ..., 1]"));
    }
    if *widths.last().unwrap() != 1 {
        return Err(Error::config("widths", "potential output width must be 1"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::config("epsilon", "must be positive"));
    }
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::config("p", "must be positive"));
    }
    Ok(())
}

//! Parameterized function families: the diagonal-gain controller, the
//! input-convex potential and the monotone class-K function.
//!
//! Every net keeps its parameters as a flat list of matrices (biases are
//! columns). `forward` takes the same list as tape nodes so that the
//! training loop can differentiate through it; plain evaluation just wraps
//! the stored values as constants.

mod classk;
mod controller;
mod potential;
mod quadrature;
mod serial;
mod spectral;

pub use classk::ClassKNet;
pub use controller::ControllerNet;
pub use potential::PotentialNet;
pub use quadrature::gauss_legendre;
pub use serial::{LayerDoc, ModelDoc, ModelKind, FORMAT_VERSION};
pub use spectral::{power_iteration, SpectralState};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

/// Hidden-layer activation of the controller.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    /// Cubic-smoothed rectifier, C² with transition width 0.1.
    SmoothRelu,
}

pub(crate) const SMOOTH_RELU_WIDTH: f64 = 0.1;

impl Activation {
    pub(crate) fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
            Activation::SmoothRelu => x.smooth_relu(SMOOTH_RELU_WIDTH),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::SmoothRelu => "smooth_relu",
        }
    }
}

/// Access to the trainable matrices of a net, in `forward` order.
pub trait Parameterized {
    fn parameters(&self) -> &[Array2<f64>];
    fn parameters_mut(&mut self) -> &mut [Array2<f64>];

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Leaf nodes for every parameter, differentiable if `trainable`.
    fn parameter_vars<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.parameters()
            .iter()
            .map(|p| {
                if trainable {
                    tape.var(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// All parameters concatenated row-major.
    fn flat_parameters(&self) -> Vec<f64> {
        self.parameters()
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect()
    }

    /// Inverse of [`Parameterized::flat_parameters`].
    fn set_flat_parameters(&mut self, flat: &[f64]) {
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

/// `W x + b` with `b` broadcast over the batch.
pub(crate) fn affine<'t>(w: Var<'t>, x: Var<'t>, b: Var<'t>) -> Var<'t> {
    let y = w.matmul(x);
    let n = y.shape().1;
    y + b.broadcast_cols(n)
}

/// Uniform `(-1/√fan_in, 1/√fan_in)` initialization.
pub(crate) fn init_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub(crate) fn check_finite(context: &str, x: &[f64]) -> crate::Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFinite(format!("{context} input {x:?}")))
    }
}

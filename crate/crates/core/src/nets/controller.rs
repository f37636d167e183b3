use ndarray::Array2;
use rand::Rng;

use super::serial::{LayerDoc, ModelDoc, ModelKind};
use super::spectral::{normalize_weight, power_iteration, SpectralState};
use super::{affine, check_finite, init_uniform, Activation, Parameterized};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// `u(x) = diag(x)·NN(x)` with an output mask; `NN` is a tanh (by default)
/// perceptron whose last layer has no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerNet {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<Array2<f64>>,
    mask: Vec<bool>,
    spectral: Vec<SpectralState>,
}

impl ControllerNet {
    /// `widths = [d, h₁, …, h_k, d]`, randomly initialized, no mask.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        validate_widths(widths)?;
        let k = widths.len() - 2;
        let mut params = Vec::with_capacity(2 * k + 1);
        for i in 0..k {
            params.push(init_uniform(rng, widths[i + 1], widths[i], widths[i]));
            params.push(init_uniform(rng, widths[i + 1], 1, widths[i]));
        }
        params.push(init_uniform(rng, widths[k + 1], widths[k], widths[k]));
        Self::from_parameters(widths, activation, params, vec![true; widths[0]])
    }

    /// Builds a net from explicit matrices `[W₀, b₀, …, W_{k-1}, b_{k-1}, W_k]`.
    pub fn from_parameters(
        widths: &[usize],
        activation: Activation,
        params: Vec<Array2<f64>>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        validate_widths(widths)?;
        let k = widths.len() - 2;
        if params.len() != 2 * k + 1 {
            return Err(Error::ModelMismatch(format!(
                "controller with {} hidden layers needs {} matrices, got {}",
                k,
                2 * k + 1,
                params.len()
            )));
        }
        for i in 0..k {
            expect_shape(&params[2 * i], (widths[i + 1], widths[i]), "controller weight")?;
            expect_shape(&params[2 * i + 1], (widths[i + 1], 1), "controller bias")?;
        }
        expect_shape(&params[2 * k], (widths[k + 1], widths[k]), "controller output weight")?;
        if mask.len() != widths[0] {
            return Err(Error::DimensionMismatch {
                context: "controller mask",
                expected: widths[0],
                got: mask.len(),
            });
        }
        let spectral = (0..=k)
            .map(|i| SpectralState::new(widths[i + 1]))
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            params,
            mask,
            spectral,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "controller mask",
                expected: self.dim(),
                got: mask.len(),
            });
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.widths[0]
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    fn weight_index(&self, layer: usize) -> usize {
        2 * layer
    }

    /// The weight matrices `W₀ … W_k`.
    pub fn weights(&self) -> Vec<&Array2<f64>> {
        (0..=self.hidden_layers())
            .map(|i| &self.params[self.weight_index(i)])
            .collect()
    }

    /// `u` on a `d × n` batch given parameter nodes in `parameters()` order.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let k = self.hidden_layers();
        let mut z = x;
        for i in 0..k {
            z = self.activation.apply(affine(p[2 * i], z, p[2 * i + 1]));
        }
        let nn = p[2 * k].matmul(z);
        let u = x * nn;
        if self.mask.iter().all(|&m| m) {
            u
        } else {
            let active: Vec<usize> = (0..self.dim()).filter(|&i| self.mask[i]).collect();
            u.select_rows(&active).scatter_rows(&active, self.dim())
        }
    }

    /// `u(x)` at one state.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "controller input",
                expected: self.dim(),
                got: x.len(),
            });
        }
        check_finite("controller", x)?;
        let tape = Tape::new();
        let p = self.parameter_vars(&tape, false);
        let u = self.forward(&p, tape.constant(crate::autodiff::column(x)));
        let out = u.to_array();
        Ok(out.iter().copied().collect())
    }

    /// `u` at every column of a `d × n` batch.
    pub fn eval_batch(&self, xs: &Array2<f64>) -> Array2<f64> {
        let tape = Tape::new();
        let p = self.parameter_vars(&tape, false);
        self.forward(&p, tape.constant(xs.clone())).to_array()
    }

    /// Divides every weight matrix by its power-iteration estimate of the top
    /// singular value. Returns the estimates, layer by layer.
    pub fn spectral_normalize(&mut self, iterations: usize) -> Vec<f64> {
        let k = self.hidden_layers();
        (0..=k)
            .map(|i| {
                let idx = self.weight_index(i);
                normalize_weight(&mut self.params[idx], &mut self.spectral[i], iterations)
            })
            .collect()
    }

    /// Current top-singular-value estimates without modifying the weights.
    pub fn spectral_bounds(&self, iterations: usize) -> Vec<f64> {
        self.weights()
            .into_iter()
            .zip(self.spectral.clone())
            .map(|(w, mut s)| power_iteration(w, &mut s, iterations))
            .collect()
    }

    pub fn spectral_state(&self) -> &[SpectralState] {
        &self.spectral
    }

    /// Serializable form, weights and power vectors as they are.
    pub fn to_doc(&self) -> ModelDoc {
        let net = self;
        let mut doc = ModelDoc::new(ModelKind::Controller, &net.widths);
        doc.activation = Some(net.activation);
        doc.mask = Some(net.mask.clone());
        doc.layers = net
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| LayerDoc::from_array(&layer_name(i, net.hidden_layers()), p))
            .collect();
        doc.spectral = Some(net.spectral.clone());
        doc
    }

    pub fn from_doc(doc: &ModelDoc) -> Result<Self> {
        doc.expect_kind(ModelKind::Controller)?;
        let params = doc.arrays()?;
        let mask = doc.mask.clone().unwrap_or_else(|| vec![true; doc.widths[0]]);
        let mut net = Self::from_parameters(
            &doc.widths,
            doc.activation.unwrap_or_default(),
            params,
            mask,
        )?;
        if let Some(spectral) = &doc.spectral {
            if spectral.len() == net.spectral.len()
                && spectral.iter().zip(&net.spectral).all(|(a, b)| a.u.len() == b.u.len())
            {
                net.spectral = spectral.clone();
            } else {
                return Err(Error::ModelMismatch("controller spectral state shape".into()));
            }
        }
        Ok(net)
    }
}

fn layer_name(i: usize, k: usize) -> String {
    if i == 2 * k {
        format!("w{k}")
    } else if i % 2 == 0 {
        format!("w{}", i / 2)
    } else {
        format!("b{}", i / 2)
    }
}

impl Parameterized for ControllerNet {
    fn parameters(&self) -> &[Array2<f64>] {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 3 {
        return Err(Error::config("widths", "controller needs at least one hidden layer"));
    }
    if widths.contains(&0) {
        return Err(Error::config("widths", "layer widths must be positive"));
    }
    if widths[0] != widths[widths.len() - 1] {
        return Err(Error::config(
            "widths",
            format!("controller output width {} must equal input width {}", widths[widths.len() - 1], widths[0]),
        ));
    }
    Ok(())
}

pub(crate) fn expect_shape(a: &Array2<f64>, shape: (usize, usize), what: &str) -> Result<()> {
    if a.dim() == shape {
        Ok(())
    } else {
        Err(Error::ModelMismatch(format!(
            "{what}: expected {}x{}, got {}x{}",
            shape.0,
            shape.1,
            a.nrows(),
            a.ncols()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_state_gives_zero_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ControllerNet::new(&[4, 12, 12, 4], Activation::Tanh, &mut rng).unwrap();
        assert!(net.eval(&[0.0; 4]).unwrap().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn mask_zeroes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ControllerNet::new(&[6, 18, 18, 6], Activation::Tanh, &mut rng)
            .unwrap()
            .with_mask(vec![false, false, false, true, true, true])
            .unwrap();
        let u = net.eval(&[0.3, -1.0, 2.0, 0.5, 0.7, -0.2]).unwrap();
        assert_eq!(&u[..3], &[0.0, 0.0, 0.0]);
        assert!(u[3..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn hand_forward_pass() {
        // d = 2, one hidden layer of width 2, W₀ = I, b₀ = (0.5, 0), W₁ = I.
        let net = ControllerNet::from_parameters(
            &[2, 2, 2],
            Activation::Tanh,
            vec![Array2::eye(2), array![[0.5], [0.0]], Array2::eye(2)],
            vec![true, true],
        )
        .unwrap();
        let x = [0.2_f64, -0.4];
        let want = [x[0] * (x[0] + 0.5).tanh(), x[1] * x[1].tanh()];
        let got = net.eval(&x).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_inputs() {
        assert!(ControllerNet::from_parameters(&[2, 3, 2], Activation::Tanh, vec![Array2::eye(2)], vec![true; 2]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(ControllerNet::new(&[2, 3, 4], Activation::Tanh, &mut rng).is_err());
        let net = ControllerNet::new(&[2, 3, 2], Activation::Tanh, &mut rng).unwrap();
        assert!(net.eval(&[f64::NAN, 0.0]).is_err());
        assert!(net.eval(&[0.0]).is_err());
    }

    #[test]
    fn normalization_bounds_every_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = ControllerNet::new(&[4, 12, 12, 4], Activation::Tanh, &mut rng).unwrap();
        for w in net.parameters_mut().iter_mut() {
            *w *= 7.0;
        }
        net.spectral_normalize(50);
        for s in net.spectral_bounds(50) {
            assert!(s <= 1.0 + 1e-3, "bound {s}");
        }
    }
}

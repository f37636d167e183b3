//! Central finite differences behind the same signatures as the exact
//! routines. Used to cross-check them, never in training.

use ndarray::Array2;

use super::{input_gradient, ScalarField};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteDifference {
    pub step: f64,
}

impl Default for FiniteDifference {
    fn default() -> Self {
        Self { step: 1e-5 }
    }
}

impl FiniteDifference {
    pub fn new(step: f64) -> Self {
        Self { step }
    }

    pub fn input_gradient(&self, field: &dyn ScalarField, x: &[f64]) -> Result<Vec<f64>> {
        if field.dim() != x.len() {
            return Err(Error::DimensionMismatch {
                context: "finite-difference gradient",
                expected: field.dim(),
                got: x.len(),
            });
        }
        let d = x.len();
        let h = self.step;
        // one batched evaluation: columns are x ± h eᵢ
        let mut pts = Array2::zeros((d, 2 * d));
        for i in 0..d {
            for k in 0..d {
                pts[[k, 2 * i]] = x[k];
                pts[[k, 2 * i + 1]] = x[k];
            }
            pts[[i, 2 * i]] += h;
            pts[[i, 2 * i + 1]] -= h;
        }
        let v = field.values(&pts);
        Ok((0..d).map(|i| (v[2 * i] - v[2 * i + 1]) / (2.0 * h)).collect())
    }

    /// Central difference of the exact gradient along `v`.
    pub fn hessian_vector_product(
        &self,
        field: &dyn ScalarField,
        x: &[f64],
        v: &[f64],
    ) -> Result<Vec<f64>> {
        let h = self.step;
        let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let gp = input_gradient(field, &plus)?;
        let gm = input_gradient(field, &minus)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    /// `Σⱼ gⱼᵀ ℋ gⱼ` from second differences of values along each column.
    pub fn generator_trace(&self, field: &dyn ScalarField, x: &[f64], g: &Array2<f64>) -> Result<f64> {
        let h = self.step.sqrt() * 1e-2;
        let f0 = field.value(x);
        let mut total = 0.0;
        for j in 0..g.ncols() {
            let col = g.column(j);
            let plus: Vec<f64> = x.iter().zip(col.iter()).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = x.iter().zip(col.iter()).map(|(a, b)| a - h * b).collect();
            total += (field.value(&plus) - 2.0 * f0 + field.value(&minus)) / (h * h);
        }
        Ok(total)
    }
}

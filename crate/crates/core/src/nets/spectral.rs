use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Below this singular-value estimate a matrix is left alone.
const DEGENERATE: f64 = 1e-12;

/// Left power-iteration vector for one weight matrix, kept between calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
}

impl SpectralState {
    pub fn new(rows: usize) -> Self {
        Self {
            u: vec![1.0 / (rows as f64).sqrt(); rows],
        }
    }
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
    n
}

/// Runs `iterations` rounds of power iteration from the stored vector and
/// returns the estimate `uᵀ W v` of the top singular value.
pub fn power_iteration(w: &Array2<f64>, state: &mut SpectralState, iterations: usize) -> f64 {
    let mut u = Array1::from(state.u.clone());
    let mut v = Array1::zeros(w.ncols());
    for _ in 0..iterations.max(1) {
        v = w.t().dot(&u);
        if normalize(&mut v) == 0.0 {
            return 0.0;
        }
        u = w.dot(&v);
        if normalize(&mut u) == 0.0 {
            return 0.0;
        }
    }
    state.u = u.to_vec();
    u.dot(&w.dot(&v))
}

/// Divides `w` by its estimated top singular value (skipped when the
/// estimate is below 1e-12). Returns the estimate.
pub(crate) fn normalize_weight(w: &mut Array2<f64>, state: &mut SpectralState, iterations: usize) -> f64 {
    let sigma = power_iteration(w, state, iterations);
    if sigma >= DEGENERATE {
        *w /= sigma;
    }
    sigma
}

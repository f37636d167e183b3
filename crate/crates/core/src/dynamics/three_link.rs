use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;

use super::region::{FnBarrier, SafeRegionSpec, Sampler};
use super::{row, SdeModel, System};
use crate::error::{Error, Result};

/// Planar three-link pendulum with unit masses, lengths, inertias and
/// centre-of-gravity offsets. State `(θ̃₁, θ̃₂, θ̃₃, ẏ₁, ẏ₂, ẏ₃)` with `θ̃ = θ − π`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThreeLink {
    a: [[f64; 3]; 3],
    b: [f64; 3],
}

impl Default for ThreeLink {
    fn default() -> Self {
        Self::new([1.0; 3], [1.0; 3], [1.0; 3], [1.0; 3])
    }
}

impl ThreeLink {
    /// Coefficients from masses `m`, lengths `l`, inertias `inertia` and
    /// centre-of-gravity offsets `lc`.
    pub fn new(m: [f64; 3], l: [f64; 3], inertia: [f64; 3], lc: [f64; 3]) -> Self {
        let tail = |i: usize| -> f64 { m[i + 1..].iter().sum() };
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            a[i][i] = inertia[i] + m[i] * lc[i] * lc[i] + l[i] * l[i] * tail(i);
            for j in i + 1..3 {
                let v = m[j] * l[i] * lc[j] + l[i] * l[j] * tail(j);
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        let b = std::array::from_fn(|i| m[i] * lc[i] + l[i] * tail(i));
        Self { a, b }
    }

    pub fn coefficients(&self) -> ([[f64; 3]; 3], [f64; 3]) {
        (self.a, self.b)
    }

    /// `M(θ)` in original angles.
    pub fn mass_matrix(&self, th: &[f64; 3]) -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.a[i][j] * (th[j] - th[i]).cos()))
    }

    fn angles(x: &[f64]) -> [f64; 3] {
        [x[0] + PI, x[1] + PI, x[2] + PI]
    }
}

/// Solves `M z = rhs` for symmetric positive definite `M`.
pub(crate) fn cholesky_solve3(m: &[[f64; 3]; 3], rhs: &[f64; 3]) -> Option<[f64; 3]> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = m[i][i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = [0.0; 3];
    for i in 0..3 {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (rhs[i] - s) / l[i][i];
    }
    let mut z = [0.0; 3];
    for i in (0..3).rev() {
        let s: f64 = (i + 1..3).map(|k| l[k][i] * z[k]).sum();
        z[i] = (y[i] - s) / l[i][i];
    }
    Some(z)
}

impl SdeModel for ThreeLink {
    fn name(&self) -> &str {
        "three_link"
    }
    fn state_dim(&self) -> usize {
        6
    }
    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let th = Self::angles(x);
        let y = [x[3], x[4], x[5]];
        let m = self.mass_matrix(&th);
        let mut rhs = [0.0; 3];
        for i in 0..3 {
            let ny: f64 = (0..3)
                .map(|j| -self.a[i][j] * y[j] * (th[j] - th[i]).sin() * y[j])
                .sum();
            let q = -self.b[i] * th[i].sin();
            rhs[i] = -ny - q;
        }
        let acc = cholesky_solve3(&m, &rhs).ok_or_else(|| Error::SingularMatrix { state: x.to_vec() })?;
        Ok(vec![y[0], y[1], y[2], acc[0], acc[1], acc[2]])
    }

    fn diffusion(&self, x: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((6, 1), vec![0.0, 0.0, 0.0, x[0].sin(), x[1].sin(), x[2].sin()]).expect("shape")
    }
}

pub(super) fn system() -> System {
    let mut bounds = vec![(-PI / 6.0 - PI, 7.0 * PI / 6.0 - PI)];
    bounds.extend(std::iter::repeat_n((-5.0, 5.0), 5));
    System {
        name: "three_link".into(),
        model: Arc::new(ThreeLink::default()),
        safe_region: SafeRegionSpec {
            barrier: Arc::new(FnBarrier::new(6, |x| -row(x, 0).sin() + 0.5)),
            description: "h = 0.5 - sin(theta1)".into(),
            sampler: Sampler::Box(bounds),
        },
        control_mask: vec![false, false, false, true, true, true],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_coefficients() {
        let (a, b) = ThreeLink::default().coefficients();
        assert_eq!(a, [[4.0, 2.0, 1.0], [2.0, 3.0, 1.0], [1.0, 1.0, 2.0]]);
        assert_eq!(b, [3.0, 2.0, 1.0]);
        let m = ThreeLink::default().mass_matrix(&[PI; 3]);
        assert_eq!(m, a);
    }

    #[test]
    fn equilibrium() {
        let f = ThreeLink::default().drift(&[0.0; 6]).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn mass_matrix_symmetric_positive_definite() {
        let model = ThreeLink::default();
        let sys = system();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = sys.safe_region.sampler.sample(&mut rng, 1000);
        for c in xs.columns() {
            let th = ThreeLink::angles(&c.to_vec());
            let m = model.mass_matrix(&th);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m[i][j] - m[j][i]).abs() < 1e-12);
                }
            }
            assert!(cholesky_solve3(&m, &[1.0, 0.0, 0.0]).is_some());
        }
    }

    #[test]
    fn solve_matches_product() {
        let m = [[4.0, 2.0, 1.0], [2.0, 3.0, 1.0], [1.0, 1.0, 2.0]];
        let z = cholesky_solve3(&m, &[1.0, 2.0, 3.0]).unwrap();
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| m[i][j] * z[j]).sum();
            assert!((r - [1.0, 2.0, 3.0][i]).abs() < 1e-12);
        }
        assert!(cholesky_solve3(&[[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]], &[1.0; 3]).is_none());
    }

    #[test]
    fn drift_solves_equation_of_motion() {
        let model = ThreeLink::default();
        let x = [0.3, -0.2, 0.5, 0.7, -1.1, 0.4];
        let f = model.drift(&x).unwrap();
        let th = ThreeLink::angles(&x);
        let m = model.mass_matrix(&th);
        let (a, b) = model.coefficients();
        for i in 0..3 {
            let lhs: f64 = (0..3).map(|j| m[i][j] * f[3 + j]).sum();
            let n_y: f64 = (0..3).map(|j| -a[i][j] * x[3 + j] * (th[j] - th[i]).sin() * x[3 + j]).sum();
            let q = -b[i] * th[i].sin();
            assert!((lhs - (-n_y - q)).abs() < 1e-12);
        }
    }
}

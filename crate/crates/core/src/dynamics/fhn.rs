use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::region::{Barrier, SafeRegionSpec, Sampler};
use super::{SdeModel, System};
use crate::autodiff::{ScalarField, Var};
use crate::error::{Error, Result};

/// Jacobian of the FitzHugh–Nagumo drift `(v − v³/3 − w + 1, 0.1(v + 0.7 − 0.8w))`
/// at `v = 0`.
pub const FHN_JACOBIAN: [[f64; 2]; 2] = [[1.0, -1.0], [0.1, -0.08]];

/// Watts–Strogatz parameters: each node starts joined to its `k` nearest
/// ring neighbours, then every edge is rewired with probability `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmallWorld {
    pub k: usize,
    pub p: f64,
    pub seed: u64,
}

impl Default for SmallWorld {
    fn default() -> Self {
        Self {
            k: 4,
            p: 0.1,
            seed: 0,
        }
    }
}

/// Symmetric 0/1 adjacency matrix. When `k ≥ n` the ring lattice is the
/// complete graph.
pub fn watts_strogatz(n: usize, topo: &SmallWorld) -> Result<Array2<f64>> {
    if n < 2 {
        return Err(Error::config("fhn_oscillators", "need at least 2 oscillators"));
    }
    if topo.k < 2 || topo.k % 2 != 0 {
        return Err(Error::config("topology.k", "must be an even number ≥ 2"));
    }
    if !(0.0..=1.0).contains(&topo.p) {
        return Err(Error::config("topology.p", "must lie in [0, 1]"));
    }
    let mut adj = Array2::zeros((n, n));
    let half = (topo.k / 2).min((n - 1) / 2 + (n - 1) % 2);
    for i in 0..n {
        for j in 1..=half {
            let t = (i + j) % n;
            if t != i {
                adj[[i, t]] = 1.0;
                adj[[t, i]] = 1.0;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(topo.seed);
    for j in 1..=half {
        for i in 0..n {
            let t = (i + j) % n;
            if adj[[i, t]] == 0.0 || rng.random::<f64>() >= topo.p {
                continue;
            }
            let degree = adj.row(i).sum() as usize;
            if degree >= n - 1 {
                continue;
            }
            let new = loop {
                let c = rng.random_range(0..n);
                if c != i && adj[[i, c]] == 0.0 {
                    break c;
                }
            };
            adj[[i, t]] = 0.0;
            adj[[t, i]] = 0.0;
            adj[[i, new]] = 1.0;
            adj[[new, i]] = 1.0;
        }
    }
    Ok(adj)
}

/// Linearized variance dynamics of `n` coupled oscillators about the
/// synchronized state. State `(ṽ₁, w̃₁, …, ṽₙ, w̃ₙ)`; a single Brownian motion
/// enters every `ṽ` row through the coupling `(1/3) Σⱼ Lᵢⱼ ṽⱼ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FhnNetwork {
    n: usize,
    laplacian: Array2<f64>,
}

impl FhnNetwork {
    pub fn new(n: usize, topo: &SmallWorld) -> Result<Self> {
        let adj = watts_strogatz(n, topo)?;
        let deg = adj.sum_axis(ndarray::Axis(1));
        let laplacian = Array2::from_diag(&deg) - &adj;
        Ok(Self { n, laplacian })
    }

    pub fn oscillators(&self) -> usize {
        self.n
    }

    pub fn laplacian(&self) -> &Array2<f64> {
        &self.laplacian
    }
}

impl SdeModel for FhnNetwork {
    fn name(&self) -> &str {
        "fhn"
    }
    fn state_dim(&self) -> usize {
        2 * self.n
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let j = FHN_JACOBIAN;
        let mut out = vec![0.0; 2 * self.n];
        for i in 0..self.n {
            let (v, w) = (x[2 * i], x[2 * i + 1]);
            out[2 * i] = j[0][0] * v + j[0][1] * w;
            out[2 * i + 1] = j[1][0] * v + j[1][1] * w;
        }
        Ok(out)
    }
    fn diffusion(&self, x: &[f64]) -> Array2<f64> {
        let v: Array1<f64> = (0..self.n).map(|i| x[2 * i]).collect();
        let coupled = self.laplacian.dot(&v);
        let mut g = Array2::zeros((2 * self.n, 1));
        for i in 0..self.n {
            g[[2 * i, 0]] = coupled[i] / 3.0;
        }
        g
    }
}

/// `h(δ) = 25 − max δᵢ²`. The tape form replaces the max by a log-sum-exp
/// with sharpness `k`, which never exceeds the hard barrier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FhnBarrier {
    pub dim: usize,
    pub bound: f64,
    pub sharpness: f64,
}

impl ScalarField for FhnBarrier {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_tape<'t>(&self, x: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let (d, _) = x.shape();
        let sq = x.square();
        let shift = {
            let v = sq.value();
            let m: Vec<f64> = v
                .columns()
                .into_iter()
                .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Array2::from_shape_vec((1, m.len()), m).expect("row")
        };
        let shift = tape.constant(shift);
        let lse = ((sq - shift.broadcast_rows(d)) * self.sharpness)
            .exp()
            .col_sums()
            .ln()
            * (1.0 / self.sharpness)
            + shift;
        -lse + self.bound * self.bound
    }
}

impl Barrier for FhnBarrier {
    fn hard_value(&self, x: &[f64]) -> f64 {
        let m = x.iter().map(|v| v * v).fold(0.0, f64::max);
        self.bound * self.bound - m
    }
}

pub(super) fn system(n: usize, topo: &SmallWorld) -> Result<System> {
    let model = FhnNetwork::new(n, topo)?;
    let d = 2 * n;
    Ok(System {
        name: "fhn".into(),
        model: Arc::new(model),
        safe_region: SafeRegionSpec {
            barrier: Arc::new(FhnBarrier {
                dim: d,
                bound: 5.0,
                sharpness: 20.0,
            }),
            description: "h = 25 - max_i(v_i^2, w_i^2)".into(),
            sampler: Sampler::Box(vec![(-5.0, 5.0); d]),
        },
        control_mask: vec![true; d],
    })
}

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dynamics::{SystemOptions, SYSTEM_NAMES};
use crate::error::{Error, Result};
use crate::generator::TraceMode;
use crate::nets::Activation;

/// Everything the training loop needs. Field names double as the JSON keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub system: String,
    #[serde(default)]
    pub system_options: SystemOptions,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub lambda_es: f64,
    pub lambda_sf: f64,
    /// Exponential rate `c < 0` in `𝓛V ≤ cV`.
    pub c: f64,
    pub epsilon: f64,
    #[serde(default = "two")]
    pub p: f64,
    /// Row-major `d × d` control weight; identity when absent.
    #[serde(default)]
    pub control_weight: Option<Vec<Vec<f64>>>,
    /// Defaults to Hutchinson for several noise columns, the identity for one.
    #[serde(default)]
    pub trace_mode: Option<TraceMode>,
    pub seed: u64,
    pub controller_hidden: Vec<usize>,
    pub potential_hidden: Vec<usize>,
    #[serde(default = "classk_hidden")]
    pub classk_hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Points per parallel work item.
    #[serde(default = "chunk_size")]
    pub chunk_size: usize,
}

fn two() -> f64 {
    2.0
}

fn classk_hidden() -> Vec<usize> {
    vec![10, 10]
}

fn chunk_size() -> usize {
    50
}

impl TrainConfig {
    /// Per-system defaults: network widths, rate, step size and iteration
    /// count as used for the published benchmarks.
    pub fn for_system(system: &str) -> Result<Self> {
        let base = |c: f64, lr: f64, iters: usize, ctrl: Vec<usize>, pot: Vec<usize>| Self {
            system: system.to_string(),
            system_options: SystemOptions::default(),
            batch_size: 500,
            iterations: iters,
            learning_rate: lr,
            lambda_es: 0.5,
            lambda_sf: 0.5,
            c,
            epsilon: 1e-3,
            p: 2.0,
            control_weight: None,
            trace_mode: None,
            seed: 0,
            controller_hidden: ctrl,
            potential_hidden: pot,
            classk_hidden: classk_hidden(),
            activation: Activation::Tanh,
            chunk_size: chunk_size(),
        };
        match system {
            "gbm" => Ok(base(-0.5, 0.1, 300, vec![12, 12], vec![12, 12])),
            "double_pendulum" => Ok(base(-0.1, 0.1, 300, vec![12, 12], vec![12, 12])),
            "bicycle" => Ok(base(-0.5, 0.01, 500, vec![12, 12], vec![12, 12])),
            "fhn" => Ok(base(-0.1, 0.1, 300, vec![200, 200], vec![100, 100])),
            "three_link" => Ok(base(-0.1, 0.1, 300, vec![18, 18], vec![12, 12])),
            other => Err(Error::UnknownSystem(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SYSTEM_NAMES.contains(&self.system.as_str()) {
            return Err(Error::UnknownSystem(self.system.clone()));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(name, "must be positive and finite"))
            }
        };
        positive("lambda_es", self.lambda_es)?;
        positive("lambda_sf", self.lambda_sf)?;
        positive("epsilon", self.epsilon)?;
        positive("p", self.p)?;
        positive("learning_rate", self.learning_rate)?;
        if !(self.c < 0.0 && self.c.is_finite()) {
            return Err(Error::config("c", "must be negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.chunk_size == 0 {
            return Err(Error::config("chunk_size", "must be at least 1"));
        }
        if self.controller_hidden.is_empty() || self.potential_hidden.is_empty() || self.classk_hidden.is_empty() {
            return Err(Error::config("*_hidden", "every net needs at least one hidden layer"));
        }
        if let Some(r) = &self.control_weight {
            let d = r.len();
            if r.iter().any(|row| row.len() != d) {
                return Err(Error::config("control_weight", "must be square"));
            }
        }
        Ok(())
    }

    /// `R` as a matrix, if one was given.
    pub fn control_weight_matrix(&self, d: usize) -> Result<Option<Array2<f64>>> {
        match &self.control_weight {
            None => Ok(None),
            Some(rows) => {
                if rows.len() != d {
                    return Err(Error::config(
                        "control_weight",
                        format!("expected {d}x{d}, got {} rows", rows.len()),
                    ));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Array2::from_shape_vec((d, d), flat)
                    .map(Some)
                    .map_err(|_| Error::config("control_weight", "must be square"))
            }
        }
    }
}

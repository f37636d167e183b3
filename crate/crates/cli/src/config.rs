use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdeguard_core::dynamics::SystemOptions;
use sdeguard_core::generator::TraceMode;
use sdeguard_core::nets::Activation;
use sdeguard_core::training::TrainConfig;

use crate::error::CliError;

/// The JSON document read by every subcommand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: String,
    #[serde(default)]
    pub system_options: SystemOptions,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Output directory; `--out` wins over this, this wins over `SDEGUARD_OUT`.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Where `project-check` and `simulate` load models from; defaults to the output directory.
    #[serde(default)]
    pub models: Option<PathBuf>,
    #[serde(default)]
    pub training: TrainingOverrides,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

/// Fields replacing the per-system training defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOverrides {
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lambda_es: Option<f64>,
    pub lambda_sf: Option<f64>,
    pub c: Option<f64>,
    pub epsilon: Option<f64>,
    pub p: Option<f64>,
    pub control_weight: Option<Vec<Vec<f64>>>,
    pub trace_mode: Option<TraceMode>,
    pub controller_hidden: Option<Vec<usize>>,
    pub potential_hidden: Option<Vec<usize>>,
    pub classk_hidden: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub chunk_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseController {
    /// The trained controller network.
    #[default]
    Model,
    Zero,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialChoice {
    #[default]
    Model,
    /// `V = ½‖x‖²`.
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub points: usize,
    pub controller: BaseController,
    pub potential: PotentialChoice,
    /// Linear `α(s) = k s` instead of the trained class-K net.
    pub alpha: Option<f64>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            points: 1000,
            controller: BaseController::Model,
            potential: PotentialChoice::Model,
            alpha: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutController {
    /// Trained controller behind both projections.
    #[default]
    Composed,
    Model,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_traj: usize,
    /// Every rollout starts here; otherwise starts are drawn from the
    /// interior of the safe region.
    pub x0: Option<Vec<f64>>,
    pub controller: RolloutController,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 20.0,
            n_traj: 10,
            x0: None,
            controller: RolloutController::Composed,
        }
    }
}

/// A parsed config with its digest.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub digest: String,
}

/// SHA-256 of the config bytes; a `--seed` override is folded in so the
/// digest still identifies the effective run.
pub fn digest(bytes: &[u8], seed_override: Option<u64>) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    if let Some(s) = seed_override {
        h.update(format!("\n--seed={s}").as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Loaded {
    pub fn from_path(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, seed_override)
    }

    pub fn from_bytes(bytes: &[u8], seed_override: Option<u64>) -> Result<Self, CliError> {
        let mut config: RunConfig =
            serde_json::from_slice(bytes).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if seed_override.is_some() {
            config.seed = seed_override;
        }
        config.simulation.validate()?;
        if config.check.points == 0 {
            return Err(CliError::Config("check.points: must be at least 1".into()));
        }
        Ok(Self {
            digest: digest(bytes, seed_override),
            config,
        })
    }
}

impl SimulationConfig {
    fn validate(&self) -> Result<(), CliError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CliError::Config("simulation.dt: must be positive".into()));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(CliError::Config("simulation.horizon: must be nonnegative".into()));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("seed: missing (set it in the config or pass --seed)".into()))
    }

    /// Per-system defaults with the overrides applied, validated.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let seed = self.require_seed()?;
        let mut cfg = TrainConfig::for_system(&self.system)?;
        cfg.seed = seed;
        cfg.system_options = self.system_options.clone();
        let o = &self.training;
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = &o.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        take!(
            batch_size,
            iterations,
            learning_rate,
            lambda_es,
            lambda_sf,
            c,
            epsilon,
            p,
            controller_hidden,
            potential_hidden,
            classk_hidden,
            activation,
            chunk_size
        );
        if o.control_weight.is_some() {
            cfg.control_weight = o.control_weight.clone();
        }
        if o.trace_mode.is_some() {
            cfg.trace_mode = o.trace_mode;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `--out`, then the config's `out`, then `SDEGUARD_OUT`, then `sdeguard-out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .or_else(|| std::env::var_os(crate::OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("sdeguard-out"))
    }

    pub fn models_dir(&self, out: &Path) -> PathBuf {
        self.models.clone().unwrap_or_else(|| out.to_path_buf())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_on_top_of_defaults() {
        let l = Loaded::from_bytes(br#"{"system":"gbm","seed":4,"training":{"iterations":7,"c":-0.3}}"#, None).unwrap();
        let cfg = l.config.train_config().unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.c, -0.3);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.batch_size, TrainConfig::for_system("gbm").unwrap().batch_size);
    }

    #[test]
    fn unknown_keys_and_missing_seed() {
        let e = Loaded::from_bytes(br#"{"system":"gbm","sed":1}"#, None).unwrap_err();
        assert!(e.to_string().contains("sed"));
        let l = Loaded::from_bytes(br#"{"system":"gbm"}"#, None).unwrap();
        assert!(l.config.train_config().unwrap_err().to_string().contains("seed"));
        let e = Loaded::from_bytes(br#"{"system":"gbm","seed":1,"training":{"learning_rate":-1}}"#, None)
            .unwrap()
            .config
            .train_config()
            .unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn digest_tracks_bytes_and_seed() {
        let a = digest(b"{}", None);
        assert_eq!(a.len(), 64);
        assert_eq!(a, digest(b"{}", None));
        assert_ne!(a, digest(b"{ }", None));
        assert_ne!(a, digest(b"{}", Some(1)));
    }

    #[test]
    fn output_dir_precedence() {
        let mut c = RunConfig::default();
        assert_eq!(c.output_dir(Some(Path::new("a"))), PathBuf::from("a"));
        c.out = Some("b".into());
        assert_eq!(c.output_dir(None), PathBuf::from("b"));
        assert_eq!(c.output_dir(Some(Path::new("a"))), PathBuf::from("a"));
    }
}

//! `sdeguard` subcommands. Exit codes: 0 success, 1 I/O or other failure,
//! 2 configuration error, 3 non-finite training loss, 4 model mismatch,
//! 5 more than half of the rollouts diverged.

pub mod config;
pub mod error;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use sdeguard_core::autodiff::{QuadraticField, ScalarField};
use sdeguard_core::dynamics::{make_system, Controller, System, ZeroController, SYSTEM_NAMES};
use sdeguard_core::nets::{ClassKNet, ControllerNet, ModelDoc, PotentialNet};
use sdeguard_core::projection::{compose_safe_stable, write_diagnostics_csv, ClassK, LinearClassK};
use sdeguard_core::simulate::{rollouts, MetricsRecord, MetricsReport, SuccessCriterion};
use sdeguard_core::training::{train, TrainConfig};

pub use config::{Loaded, RunConfig};
pub use error::CliError;

/// Default output directory when neither `--out` nor the config sets one.
pub const OUT_ENV: &str = "SDEGUARD_OUT";

pub const CONTROLLER_FILE: &str = "controller.json";
pub const POTENTIAL_FILE: &str = "potential.json";
pub const CLASSK_FILE: &str = "classk.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const DIGEST_FILE: &str = "config_digest.txt";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(name = "sdeguard", version, about = "Train, project and simulate safe stabilizing controllers for SDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output directory (default: config `out`, then $SDEGUARD_OUT, then ./sdeguard-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batched work and rollouts (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train controller, potential and class-K nets.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-point residuals before and after projection.
    ProjectCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Seeded Euler-Maruyama rollouts with trajectory CSVs and metrics.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train, check and simulate one benchmark system with its defaults.
    Bench {
        system: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers: must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Other(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Train { config } => {
            let l = Loaded::from_path(config, cli.seed)?;
            let out = l.config.output_dir(cli.out.as_deref());
            cmd_train(&l, &out).map(|_| ())
        }
        Command::ProjectCheck { config } => {
            let l = Loaded::from_path(config, cli.seed)?;
            let out = l.config.output_dir(cli.out.as_deref());
            cmd_project_check(&l, &out).map(|_| ())
        }
        Command::Simulate { config } => {
            let l = Loaded::from_path(config, cli.seed)?;
            let out = l.config.output_dir(cli.out.as_deref());
            cmd_simulate(&l, &out).map(|_| ())
        }
        Command::Bench { system, config } => cmd_bench(system, config.as_deref(), cli.seed, cli.out.as_deref()),
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn system_of(cfg: &RunConfig) -> Result<System, CliError> {
    Ok(make_system(&cfg.system, &cfg.system_options)?)
}

pub struct TrainSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

/// Writes the three model files, `history.csv` and `config_digest.txt`.
pub fn cmd_train(l: &Loaded, out: &Path) -> Result<TrainSummary, CliError> {
    let cfg = l.config.train_config()?;
    let system = system_of(&l.config)?;
    let start = Instant::now();
    let outcome = train(&cfg, &system)?;
    create_dir(out)?;
    let m = &outcome.models;
    for (mut doc, file) in [
        (m.controller.to_doc(), CONTROLLER_FILE),
        (m.potential.to_doc(), POTENTIAL_FILE),
        (m.classk.to_doc(), CLASSK_FILE),
    ] {
        doc.config_digest = Some(l.digest.clone());
        doc.save(&out.join(file))?;
    }
    let mut w = create_file(&out.join(HISTORY_FILE))?;
    outcome.history.write_csv(&mut w, Some(&l.digest))?;
    w.flush()?;
    fs::write(out.join(DIGEST_FILE), format!("{}\n", l.digest))?;
    let h = &outcome.history;
    let summary = TrainSummary {
        initial_loss: h.first().map_or(f64::NAN, |r| r.total()),
        final_loss: h.last().map_or(f64::NAN, |r| r.total()),
        iterations: h.records.len(),
    };
    println!(
        "trained {} for {} iterations in {:.1?}: loss {:.6e} -> {:.6e} (digest {})",
        cfg.system,
        summary.iterations,
        start.elapsed(),
        summary.initial_loss,
        summary.final_loss,
        l.digest
    );
    Ok(summary)
}

fn load_doc(dir: &Path, file: &str) -> Result<ModelDoc, CliError> {
    let path = dir.join(file);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::ModelMismatch(format!("cannot read model {}: {e}", path.display())))?;
    ModelDoc::from_json(&text).map_err(|e| CliError::ModelMismatch(format!("{}: {e}", path.display())))
}

fn load_controller(dir: &Path, d: usize) -> Result<ControllerNet, CliError> {
    let net = ControllerNet::from_doc(&load_doc(dir, CONTROLLER_FILE)?)?;
    if net.dim() != d {
        return Err(CliError::ModelMismatch(format!(
            "controller has dimension {}, system has {d}",
            net.dim()
        )));
    }
    Ok(net)
}

fn load_potential(dir: &Path, d: usize) -> Result<PotentialNet, CliError> {
    let net = PotentialNet::from_doc(&load_doc(dir, POTENTIAL_FILE)?)?;
    if net.dim_in() != d {
        return Err(CliError::ModelMismatch(format!(
            "potential has dimension {}, system has {d}",
            net.dim_in()
        )));
    }
    Ok(net)
}

fn load_classk(dir: &Path) -> Result<ClassKNet, CliError> {
    Ok(ClassKNet::from_doc(&load_doc(dir, CLASSK_FILE)?)?)
}

/// Stability rate from the config, else the per-system default.
fn rate(cfg: &RunConfig) -> Result<f64, CliError> {
    match cfg.training.c {
        Some(c) => Ok(c),
        None => Ok(TrainConfig::for_system(&cfg.system)?.c),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckSummary {
    pub points: usize,
    pub interior: usize,
    pub max_stability_before: f64,
    pub max_stability_after: f64,
    pub min_safety_before: f64,
    pub min_safety_after: f64,
}

/// Samples `check.points` states and writes residuals before and after projection.
pub fn cmd_project_check(l: &Loaded, out: &Path) -> Result<CheckSummary, CliError> {
    let cfg = &l.config;
    let system = system_of(cfg)?;
    let d = system.dim();
    let models = cfg.models_dir(out);
    let base: Arc<dyn Controller> = match cfg.check.controller {
        config::BaseController::Model => Arc::new(load_controller(&models, d)?),
        config::BaseController::Zero => Arc::new(ZeroController(d)),
    };
    let potential: Arc<dyn ScalarField> = match cfg.check.potential {
        config::PotentialChoice::Model => Arc::new(load_potential(&models, d)?),
        config::PotentialChoice::Quadratic => Arc::new(QuadraticField::isotropic(d)),
    };
    let alpha: Arc<dyn ClassK> = match cfg.check.alpha {
        Some(k) => Arc::new(LinearClassK(k)),
        None => Arc::new(load_classk(&models)?),
    };
    let pc = compose_safe_stable(base, potential, &system.safe_region, alpha, rate(cfg)?, system.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    let xs = system.safe_region.sampler.sample(&mut rng, cfg.check.points);
    let mut rows = Vec::with_capacity(cfg.check.points);
    for chunk in xs.axis_chunks_iter(ndarray::Axis(1), 256) {
        rows.extend(pc.evaluate_batch(0.0, &chunk.to_owned())?);
    }
    create_dir(out)?;
    let mut w = create_file(&out.join(DIAGNOSTICS_FILE))?;
    write_diagnostics_csv(&mut w, &rows, Some(&l.digest))?;
    w.flush()?;
    let inside: Vec<_> = rows.iter().filter(|r| r.inside).collect();
    let fmax = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
    let fmin = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
    let s = CheckSummary {
        points: rows.len(),
        interior: inside.len(),
        max_stability_before: fmax(&mut rows.iter().map(|r| r.stability_before)),
        max_stability_after: fmax(&mut rows.iter().map(|r| r.stability_after)),
        min_safety_before: fmin(&mut inside.iter().map(|r| r.safety_before)),
        min_safety_after: fmin(&mut inside.iter().map(|r| r.safety_after)),
    };
    println!(
        "checked {} points ({} interior): max stability residual {:.3e} -> {:.3e}, min safety residual {:.3e} -> {:.3e}",
        s.points, s.interior, s.max_stability_before, s.max_stability_after, s.min_safety_before, s.min_safety_after
    );
    Ok(s)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Aggregate {
    pub safety_rate: Option<f64>,
    pub success_rate: Option<f64>,
    pub median_control_energy: Option<f64>,
    pub lyapunov_slope: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsFile {
    pub config_digest: String,
    pub system: String,
    pub seed: u64,
    pub n_traj: usize,
    pub diverged: usize,
    pub aggregate: Aggregate,
    pub rollouts: Vec<MetricsRecord>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn aggregate(reports: &[MetricsReport], has_criterion: bool) -> Aggregate {
    if reports.is_empty() {
        return Aggregate::default();
    }
    let n = reports.len() as f64;
    Aggregate {
        safety_rate: Some(reports.iter().map(|r| r.safety_rate).sum::<f64>() / n),
        success_rate: has_criterion.then(|| reports.iter().filter(|r| r.success).count() as f64 / n),
        median_control_energy: median(reports.iter().map(|r| r.control_energy).collect()),
        lyapunov_slope: median(reports.iter().map(|r| r.lyapunov_slope).filter(|s| !s.is_nan()).collect()),
    }
}

fn starts(cfg: &RunConfig, system: &System, seed: u64) -> Result<Vec<(Vec<f64>, u64)>, CliError> {
    let n = cfg.simulation.n_traj;
    let d = system.dim();
    if let Some(x0) = &cfg.simulation.x0 {
        if x0.len() != d {
            return Err(CliError::Config(format!("simulation.x0: has {} entries, system has {d}", x0.len())));
        }
        return Ok((0..n as u64).map(|k| (x0.clone(), seed.wrapping_add(k))).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n {
        let x = system.safe_region.sampler.sample_point(&mut rng);
        if system.safe_region.barrier.hard_value(&x) > 0.0 {
            out.push((x, seed.wrapping_add(out.len() as u64)));
        }
        tries += 1;
        if tries > 1000 * n.max(1) {
            return Err(CliError::Config("simulation.x0: could not sample interior starts".into()));
        }
    }
    Ok(out)
}

/// Rollouts, one CSV each under `trajectories/`, and `metrics.json`.
pub fn cmd_simulate(l: &Loaded, out: &Path) -> Result<MetricsFile, CliError> {
    let cfg = &l.config;
    let seed = cfg.require_seed()?;
    let system = system_of(cfg)?;
    let d = system.dim();
    let models = cfg.models_dir(out);
    let controller: Arc<dyn Controller> = match cfg.simulation.controller {
        config::RolloutController::Zero => Arc::new(ZeroController(d)),
        config::RolloutController::Model => Arc::new(load_controller(&models, d)?),
        config::RolloutController::Composed => Arc::new(compose_safe_stable(
            load_controller(&models, d)?,
            Arc::new(load_potential(&models, d)?),
            &system.safe_region,
            Arc::new(load_classk(&models)?),
            rate(cfg)?,
            system.model.clone(),
        )?),
    };
    let starts = starts(cfg, &system, seed)?;
    let sim = &cfg.simulation;
    let results = rollouts(system.model.as_ref(), &controller, &starts, sim.dt, sim.horizon);
    let crit = SuccessCriterion::for_system(&system.name, d);
    let traj_dir = out.join("trajectories");
    create_dir(&traj_dir)?;
    let mut records = Vec::with_capacity(results.len());
    for (k, r) in results.into_iter().enumerate() {
        let traj = r?;
        let mut w = create_file(&traj_dir.join(format!("traj_{k:04}.csv")))?;
        traj.write_csv(&mut w, Some(&l.digest))?;
        w.flush()?;
        records.push(MetricsRecord {
            seed: traj.seed,
            config_digest: l.digest.clone(),
            metrics: MetricsReport::compute(&traj, &system.safe_region, crit.as_ref()),
        });
    }
    let reports: Vec<MetricsReport> = records.iter().map(|r| r.metrics.clone()).collect();
    let diverged = reports.iter().filter(|r| r.diverged).count();
    let file = MetricsFile {
        config_digest: l.digest.clone(),
        system: system.name.clone(),
        seed,
        n_traj: records.len(),
        diverged,
        aggregate: aggregate(&reports, crit.is_some()),
        rollouts: records,
    };
    let mut w = create_file(&out.join(METRICS_FILE))?;
    serde_json::to_writer_pretty(&mut w, &file).map_err(|e| CliError::Other(e.to_string()))?;
    w.flush()?;
    let a = &file.aggregate;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "simulated {} rollouts: safety rate {}, success rate {}, median control energy {}, lyapunov slope {}, diverged {}",
        file.n_traj,
        show(a.safety_rate),
        show(a.success_rate),
        show(a.median_control_energy),
        show(a.lyapunov_slope),
        diverged
    );
    if 2 * diverged > file.n_traj {
        return Err(CliError::Divergence {
            diverged,
            total: file.n_traj,
        });
    }
    Ok(file)
}

/// The bench config: per-system defaults, 10 composed rollouts over 20 s.
pub fn bench_config(system: &str, seed: u64) -> RunConfig {
    RunConfig {
        system: system.to_string(),
        seed: Some(seed),
        ..Default::default()
    }
}

fn cmd_bench(system: &str, config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    if !SYSTEM_NAMES.contains(&system) {
        return Err(CliError::Config(format!(
            "unknown system `{system}` (valid: {})",
            SYSTEM_NAMES.join(", ")
        )));
    }
    let l = match config {
        Some(p) => {
            let l = Loaded::from_path(p, seed)?;
            if l.config.system != system {
                return Err(CliError::Config(format!(
                    "system: config names `{}` but bench was asked for `{system}`",
                    l.config.system
                )));
            }
            l
        }
        None => {
            let bytes = serde_json::to_vec_pretty(&bench_config(system, seed.unwrap_or(0)))
                .map_err(|e| CliError::Other(e.to_string()))?;
            Loaded::from_bytes(&bytes, None)?
        }
    };
    let out = l.config.output_dir(out).join(system);
    create_dir(&out)?;
    let start = Instant::now();
    let t = cmd_train(&l, &out)?;
    let c = cmd_project_check(&l, &out)?;
    let sim = cmd_simulate(&l, &out);
    let m = match sim {
        Ok(m) => m,
        Err(e) => {
            eprintln!("simulation: {e}");
            return Err(e);
        }
    };
    let a = &m.aggregate;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    let rows = [
        ("safety_rate", show(a.safety_rate)),
        ("success_rate", show(a.success_rate)),
        ("median_control_energy", show(a.median_control_energy)),
        ("lyapunov_slope", show(a.lyapunov_slope)),
        ("max_stability_residual_after", format!("{:.3e}", c.max_stability_after)),
        ("initial_loss", format!("{:.6e}", t.initial_loss)),
        ("final_loss", format!("{:.6e}", t.final_loss)),
        ("diverged", format!("{}/{}", m.diverged, m.n_traj)),
        ("wall_seconds", format!("{:.1}", start.elapsed().as_secs_f64())),
    ];
    let mut w = create_file(&out.join("bench_summary.csv"))?;
    writeln!(w, "# config_digest={}", l.digest)?;
    writeln!(w, "metric,value")?;
    println!("\n{system}");
    for (k, v) in &rows {
        writeln!(w, "{k},{v}")?;
        println!("  {k:<30} {v}");
    }
    w.flush()?;
    Ok(())
}

//! The three experiment campaigns: convergence in the library size, the
//! initialization-forgetting gap in the window length, and the closed-loop
//! control benchmark.
//!
//! Campaigns are deterministic given `(config, seed)`: every trial draws
//! from a stream derived from the campaign seed and the trial coordinates,
//! and the result log is rewritten in sorted order on completion.

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use cgm_core::cgm::{fit, CgmPredictor};
use cgm_core::control::{
    run_closed_loop, ControllerKind, ControllerResources, ControlObjective,
};
use cgm_core::kalman::{eta_map, predictor_matrices};
use cgm_core::library::{build_multi, build_single, format_f64, TrajectoryLibrary};
use cgm_core::lti::{
    simulate_closed_loop, stationary_augmented_cov, stationary_sigma, InitialState, NoiseModel,
    StabilizingController, StateSpaceModel,
};
use cgm_core::numerics::{op_norm, Matrix, RngStream, Vector};
use rayon::prelude::*;

use crate::config::{
    ControlBenchmarkSpec, ConvergenceSpec, ExperimentConfig, LibraryMode, TiniGapSpec,
};
use crate::results::{line_fit, write_csv, LogFormat, ResultLog, ResultRow, CODE_VERSION};
use crate::BenchError;

type Result<T> = std::result::Result<T, BenchError>;

fn to_runtime(e: cgm_core::Error) -> BenchError {
    BenchError::Runtime(e.to_string())
}

/// Builds the model with the noise scales folded into the covariances — the
/// filter the theory compares against sees the effective noise.
fn effective_model(plant: &StateSpaceModel, noise: &NoiseModel) -> Result<StateSpaceModel> {
    StateSpaceModel::new(
        plant.a.clone(),
        plant.b.clone(),
        plant.c.clone(),
        noise.q_eff(plant),
        noise.r_eff(plant),
    )
    .map_err(to_runtime)
}

fn run_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| BenchError::Runtime(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

fn mode_name(mode: LibraryMode) -> &'static str {
    match mode {
        LibraryMode::Single => "single",
        LibraryMode::Multi => "multi",
    }
}

/// Simulates one library of the requested mode and width.
pub fn collect_library(
    plant: &StateSpaceModel,
    ctrl: &StabilizingController,
    noise: &NoiseModel,
    mode: LibraryMode,
    n_cols: usize,
    t_ini: usize,
    t: usize,
    init: &InitialState,
    rng: &mut RngStream,
) -> Result<TrajectoryLibrary> {
    match mode {
        LibraryMode::Single => {
            let k = n_cols + t_ini + t - 1;
            let traj =
                simulate_closed_loop(plant, ctrl, noise, init, k, rng).map_err(to_runtime)?;
            build_single(&traj, t_ini, t).map_err(to_runtime)
        }
        LibraryMode::Multi => {
            let mut trajs = Vec::with_capacity(n_cols);
            for _ in 0..n_cols {
                trajs.push(
                    simulate_closed_loop(plant, ctrl, noise, init, t_ini + t, rng)
                        .map_err(to_runtime)?,
                );
            }
            build_multi(&trajs, t_ini, t).map_err(to_runtime)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlopeSummary {
    pub mode: String,
    pub metric: String,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Library-size convergence study: fits the model on growing libraries and
/// measures the spectral-norm gaps to the filter-based limit coefficients.
pub fn convergence_experiment(
    cfg: &ExperimentConfig,
    spec: &ConvergenceSpec,
    out_dir: &Path,
    format: LogFormat,
) -> Result<Vec<SlopeSummary>> {
    let plant = cfg.build_plant()?;
    let ctrl = cfg.build_excitation(&plant)?;
    let noise = cfg.noise_model();
    let eff = effective_model(&plant, &noise)?;
    let n = plant.state_dim();

    // Limit targets per mode.
    let pm = predictor_matrices(&eff, spec.t);
    let mut targets = Vec::new();
    for &mode in &spec.modes {
        let sigma = match mode {
            LibraryMode::Single => stationary_sigma(&plant, &ctrl, &noise).map_err(to_runtime)?,
            LibraryMode::Multi => {
                // Independent initial states: Sigma equals the plant-state
                // initial covariance, taken as the stationary closed-loop one.
                let pi = stationary_augmented_cov(&plant, &ctrl, &noise).map_err(to_runtime)?;
                pi.view((0, 0), (n, n)).into_owned()
            }
        };
        let em = eta_map(&eff, &sigma, spec.t_ini, spec.t).map_err(to_runtime)?;
        let ycov = pm.yf_covariance(&em.p_pred);
        targets.push((mode, em.eta_f, ycov, sigma));
    }

    let log = Mutex::new(ResultLog::open(out_dir, format)?);
    let work: Vec<(usize, usize, u64)> = {
        let mut w = Vec::new();
        for (mi, _) in targets.iter().enumerate() {
            for &n_cols in &spec.n_grid {
                for trial in 0..spec.trials {
                    w.push((mi, n_cols, trial as u64));
                }
            }
        }
        w
    };

    run_pool(cfg.threads, || -> Result<()> {
        work.par_iter().try_for_each(|&(mi, n_cols, trial)| {
            let (mode, eta, ycov, sigma) = &targets[mi];
            let point = format!("mode={};n={}", mode_name(*mode), n_cols);
            {
                let guard = log.lock().unwrap();
                if guard.is_done("convergence", &point, trial) {
                    return Ok(());
                }
            }
            let started = Instant::now();
            let mut rng = RngStream::derived(cfg.seed, &[1, mi as u64, n_cols as u64, trial]);
            let init = match mode {
                LibraryMode::Single => spec
                    .init
                    .to_initial_state(&plant, &ctrl, &noise)
                    .map_err(|e| BenchError::Config(e.to_string()))?,
                LibraryMode::Multi => InitialState::Gaussian { cov: sigma.clone() },
            };
            let lib = collect_library(
                &plant, &ctrl, &noise, *mode, n_cols, spec.t_ini, spec.t, &init, &mut rng,
            )?;
            let pred = fit(&lib).map_err(to_runtime)?;
            let err_mean = op_norm(&(&pred.theta_f - eta));
            let err_cov = op_norm(&(&pred.sigma_f - ycov));
            let wall = started.elapsed().as_secs_f64() * 1e3;
            let mk = |metric: &str, value: f64| ResultRow {
                experiment: "convergence".into(),
                point: point.clone(),
                metric: metric.into(),
                value,
                trial,
                wall_ms: wall,
                seed: cfg.seed,
                version: CODE_VERSION.into(),
            };
            log.lock()
                .unwrap()
                .append_group(vec![mk("err_mean", err_mean), mk("err_cov", err_cov)])?;
            Ok(())
        })
    })??;

    let mut log = log.into_inner().unwrap();
    log.finalize()?;

    // Fig-1-shaped view plus slope summary.
    let mut fig_rows = Vec::new();
    let mut summaries = Vec::new();
    for (mode, _, _, _) in &targets {
        let mname = mode_name(*mode);
        for &n_cols in &spec.n_grid {
            let point = format!("mode={mname};n={n_cols}");
            let means = log.metric_values("convergence", &point, "err_mean");
            let covs = log.metric_values("convergence", &point, "err_cov");
            for (trial, (a, b)) in means.iter().zip(&covs).enumerate() {
                fig_rows.push(vec![
                    mname.to_string(),
                    n_cols.to_string(),
                    trial.to_string(),
                    format_f64(*a),
                    format_f64(*b),
                ]);
            }
        }
        for metric in ["err_mean", "err_cov"] {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for &n_cols in &spec.n_grid {
                let point = format!("mode={mname};n={n_cols}");
                let vals = log.metric_values("convergence", &point, metric);
                if vals.is_empty() {
                    continue;
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                xs.push((n_cols as f64).ln());
                ys.push(mean.ln());
            }
            let (slope, intercept, r2) = line_fit(&xs, &ys);
            summaries.push(SlopeSummary {
                mode: mname.to_string(),
                metric: metric.to_string(),
                slope,
                intercept,
                r2,
            });
        }
    }
    write_csv(
        &out_dir.join("convergence.csv"),
        "mode,N,trial,err_mean,err_cov",
        &fig_rows,
    )?;
    let summary_rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.mode.clone(),
                s.metric.clone(),
                format_f64(s.slope),
                format_f64(s.intercept),
                format_f64(s.r2),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("summary.csv"),
        "mode,metric,slope,intercept,r2",
        &summary_rows,
    )?;
    Ok(summaries)
}

#[derive(Debug, Clone)]
pub struct GapSummary {
    pub metric: String,
    pub rho_hat: f64,
    pub r2: f64,
}

/// Initialization-forgetting study: the filter coefficient maps under two
/// different priors approach each other geometrically in the window length.
pub fn tini_gap_experiment(
    cfg: &ExperimentConfig,
    spec: &TiniGapSpec,
    out_dir: &Path,
    format: LogFormat,
) -> Result<Vec<GapSummary>> {
    let plant = cfg.build_plant()?;
    let noise = cfg.noise_model();
    let eff = effective_model(&plant, &noise)?;
    let n = eff.state_dim();
    let pm = predictor_matrices(&eff, spec.t);

    let log = Mutex::new(ResultLog::open(out_dir, format)?);
    let trials: Vec<u64> = (0..spec.trials as u64).collect();
    run_pool(cfg.threads, || -> Result<()> {
        trials.par_iter().try_for_each(|&trial| {
            let mut rng = RngStream::derived(cfg.seed, &[2, trial]);
            let g1 = Matrix::from_fn(n, n, |_, _| rng.standard_normal());
            let g2 = Matrix::from_fn(n, n, |_, _| rng.standard_normal());
            let sigma = &g1 * g1.transpose() + Matrix::identity(n, n) * 0.5;
            let p1 = &g2 * g2.transpose() + Matrix::identity(n, n) * 0.5;
            for &t_ini in &spec.t_ini_grid {
                let point = format!("t_ini={t_ini}");
                {
                    let guard = log.lock().unwrap();
                    if guard.is_done("tini_gap", &point, trial) {
                        continue;
                    }
                }
                let started = Instant::now();
                let em_a = eta_map(&eff, &sigma, t_ini, spec.t).map_err(to_runtime)?;
                let em_b = eta_map(&eff, &p1, t_ini, spec.t).map_err(to_runtime)?;
                let gap_eta = op_norm(&(&em_a.eta_f - &em_b.eta_f));
                let gap_psi = op_norm(&em_b.psi_term);
                let cov_a = pm.yf_covariance(&em_a.p_pred);
                let cov_b = pm.yf_covariance(&em_b.p_pred);
                let gap_cov = op_norm(&(&cov_a - &cov_b));
                let wall = started.elapsed().as_secs_f64() * 1e3;
                let mk = |metric: &str, value: f64| ResultRow {
                    experiment: "tini_gap".into(),
                    point: point.clone(),
                    metric: metric.into(),
                    value,
                    trial,
                    wall_ms: wall,
                    seed: cfg.seed,
                    version: CODE_VERSION.into(),
                };
                log.lock().unwrap().append_group(vec![
                    mk("gap_eta", gap_eta),
                    mk("gap_psi", gap_psi),
                    mk("gap_cov", gap_cov),
                ])?;
            }
            Ok(())
        })
    })??;

    let mut log = log.into_inner().unwrap();
    log.finalize()?;

    // Geometric-rate fits on the trial means, excluding the numerical floor.
    let mut summaries = Vec::new();
    for metric in ["gap_eta", "gap_psi", "gap_cov"] {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for &t_ini in &spec.t_ini_grid {
            let vals = log.metric_values("tini_gap", &format!("t_ini={t_ini}"), metric);
            if vals.is_empty() {
                continue;
            }
            pts.push((t_ini as f64, vals.iter().sum::<f64>() / vals.len() as f64));
        }
        let gap_max = pts.iter().map(|(_, g)| *g).fold(0.0, f64::max);
        let kept: Vec<(f64, f64)> = pts
            .into_iter()
            .filter(|(_, g)| *g > 1e-13 * gap_max && *g > 0.0)
            .collect();
        let xs: Vec<f64> = kept.iter().map(|(x, _)| *x).collect();
        let ys: Vec<f64> = kept.iter().map(|(_, g)| g.ln()).collect();
        let (slope, _, r2) = line_fit(&xs, &ys);
        summaries.push(GapSummary {
            metric: metric.to_string(),
            rho_hat: slope.exp(),
            r2,
        });
    }
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| vec![s.metric.clone(), format_f64(s.rho_hat), format_f64(s.r2)])
        .collect();
    write_csv(&out_dir.join("summary.csv"), "metric,rho_hat,r2", &rows)?;
    Ok(summaries)
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub label: String,
    pub avg_cost: f64,
    pub p_fail: f64,
    pub mean_solve_ms: f64,
    pub trials: usize,
    pub failures: usize,
}

enum TrialResources {
    Truth,
    Predictor(Box<CgmPredictor>),
    Library(Box<TrajectoryLibrary>),
}

/// Closed-loop benchmark: for each controller and trial, collect fresh
/// offline data where needed, run the protocol and record cost, violation
/// flag and per-step solve time. Per-trial failures are recorded as rows and
/// never abort the campaign.
pub fn control_benchmark(
    cfg: &ExperimentConfig,
    spec: &ControlBenchmarkSpec,
    out_dir: &Path,
    format: LogFormat,
) -> Result<Vec<BenchSummary>> {
    let plant = cfg.build_plant()?;
    let excitation = cfg.build_excitation(&plant)?;
    let noise = cfg.noise_model();
    let obj: ControlObjective = spec.objective.to_objective(plant.input_dim(), plant.output_dim());
    let n = plant.state_dim();

    let log = Mutex::new(ResultLog::open(out_dir, format)?);
    let work: Vec<(usize, u64)> = spec
        .controllers
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| (0..spec.trials as u64).map(move |t| (ci, t)))
        .collect();

    run_pool(cfg.threads, || -> Result<()> {
        work.par_iter().try_for_each(|&(ci, trial)| {
            let bench_ctrl = &spec.controllers[ci];
            let label = bench_ctrl.label();
            {
                let guard = log.lock().unwrap();
                if guard.is_done("control", &label, trial) {
                    return Ok(());
                }
            }
            let started = Instant::now();
            // Common random numbers: the plant-noise stream and the library
            // stream depend only on the trial (and library width), so every
            // controller faces the same realization; controller-side draws
            // get their own stream.
            let mut lib_rng =
                RngStream::derived(cfg.seed, &[3, 2, bench_ctrl.n_lib as u64, trial]);
            let mut plant_rng = RngStream::derived(cfg.seed, &[3, 0, trial]);
            let mut ctrl_rng = RngStream::derived(cfg.seed, &[3, 1, ci as u64, trial]);
            let cspec = spec.controller_spec(bench_ctrl.kind);

            let mut trial_run = || -> std::result::Result<_, cgm_core::Error> {
                let resources = match bench_ctrl.kind {
                    ControllerKind::KfDmpc | ControllerKind::SsmpcModel => TrialResources::Truth,
                    ControllerKind::Deepc => {
                        let lib = collect_library_core(
                            &plant,
                            &excitation,
                            &noise,
                            bench_ctrl.n_lib,
                            spec.t_ini,
                            spec.t,
                            &mut lib_rng,
                        )?;
                        TrialResources::Library(Box::new(lib))
                    }
                    _ => {
                        let lib = collect_library_core(
                            &plant,
                            &excitation,
                            &noise,
                            bench_ctrl.n_lib,
                            spec.t_ini,
                            spec.t,
                            &mut lib_rng,
                        )?;
                        TrialResources::Predictor(Box::new(fit(&lib)?))
                    }
                };
                let res = match &resources {
                    TrialResources::Truth => run_closed_loop(
                        &plant,
                        &ControllerResources::TruthModel {
                            model: &plant,
                            init_cov: Matrix::zeros(n, n),
                        },
                        &cspec,
                        &obj,
                        &noise,
                        &Vector::zeros(n),
                        spec.t_ini + spec.steps,
                        &mut plant_rng,
                        &mut ctrl_rng,
                    )?,
                    TrialResources::Predictor(pred) => run_closed_loop(
                        &plant,
                        &ControllerResources::Predictor(pred),
                        &cspec,
                        &obj,
                        &noise,
                        &Vector::zeros(n),
                        spec.t_ini + spec.steps,
                        &mut plant_rng,
                        &mut ctrl_rng,
                    )?,
                    TrialResources::Library(lib) => run_closed_loop(
                        &plant,
                        &ControllerResources::Library(lib),
                        &cspec,
                        &obj,
                        &noise,
                        &Vector::zeros(n),
                        spec.t_ini + spec.steps,
                        &mut plant_rng,
                        &mut ctrl_rng,
                    )?,
                };
                Ok(res)
            };

            let wall = || started.elapsed().as_secs_f64() * 1e3;
            let mk = |metric: &str, value: f64, wall_ms: f64| ResultRow {
                experiment: "control".into(),
                point: label.clone(),
                metric: metric.into(),
                value,
                trial,
                wall_ms,
                seed: cfg.seed,
                version: CODE_VERSION.into(),
            };
            match trial_run() {
                Ok(res) => {
                    let w = wall();
                    log.lock().unwrap().append_group(vec![
                        mk("cost", res.realized_cost, w),
                        mk("violated", f64::from(res.violated), w),
                        mk("solve_ms", res.solve_stats.mean_ms, w),
                    ])?;
                }
                Err(e) => {
                    log::warn!("trial {trial} of {label} failed: {e}");
                    let w = wall();
                    log.lock()
                        .unwrap()
                        .append_group(vec![mk("failed", 1.0, w)])?;
                }
            }
            Ok(())
        })
    })??;

    let mut log = log.into_inner().unwrap();
    log.finalize()?;

    let mut summaries = Vec::new();
    for bench_ctrl in &spec.controllers {
        let label = bench_ctrl.label();
        let costs = log.metric_values("control", &label, "cost");
        let flags = log.metric_values("control", &label, "violated");
        let solves = log.metric_values("control", &label, "solve_ms");
        let fails = log.metric_values("control", &label, "failed").len();
        let p_fail = if flags.is_empty() {
            f64::NAN
        } else {
            flags.iter().sum::<f64>() / flags.len() as f64
        };
        let ok_costs: Vec<f64> = costs
            .iter()
            .zip(&flags)
            .filter(|(_, v)| **v == 0.0)
            .map(|(c, _)| *c)
            .collect();
        let avg_cost = if ok_costs.is_empty() {
            f64::NAN
        } else {
            ok_costs.iter().sum::<f64>() / ok_costs.len() as f64
        };
        summaries.push(BenchSummary {
            label,
            avg_cost,
            p_fail,
            mean_solve_ms: if solves.is_empty() {
                f64::NAN
            } else {
                solves.iter().sum::<f64>() / solves.len() as f64
            },
            trials: flags.len(),
            failures: fails,
        });
    }
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.label.clone(),
                format_f64(s.avg_cost),
                format_f64(s.p_fail),
                format_f64(s.mean_solve_ms),
                s.trials.to_string(),
                s.failures.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("table.csv"),
        "controller,avg_cost,p_fail,mean_solve_ms,trials,failures",
        &rows,
    )?;
    Ok(summaries)
}

/// Single-trajectory benchmark library: K = N + T_ini + T - 1 steps from the
/// zero state, matching the protocol's zero-initial-state convention.
fn collect_library_core(
    plant: &StateSpaceModel,
    excitation: &StabilizingController,
    noise: &NoiseModel,
    n_cols: usize,
    t_ini: usize,
    t: usize,
    rng: &mut RngStream,
) -> std::result::Result<TrajectoryLibrary, cgm_core::Error> {
    let k = n_cols + t_ini + t - 1;
    let traj = simulate_closed_loop(plant, excitation, noise, &InitialState::Zero, k, rng)?;
    build_single(&traj, t_ini, t)
}

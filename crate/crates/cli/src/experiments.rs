//! One function per experiment. Each returns the files to write; a numerical failure part-way
//! through is stored in [`Outputs::failure`] alongside whatever was computed before it.

use rand::Rng;
use serde_json::json;
use urbm_core::lattice::{build_heisenberg, build_lindblad_raising, build_tafi_2d, build_tfi};
use urbm_core::open::{
    average_ensemble, effective_hamiltonian, lindblad_oracle, run_ensemble, DensityMatrix, ExactEngine, JumpConfig,
    TrajectoryEngine, TrajectoryGrid, VariationalEngine, LINDBLAD_GUARD,
};
use urbm_core::rbm::circuit::{ensemble_decompose, prepare_recycled, real_w_coupling};
use urbm_core::rbm::{RbmParams, STATEVECTOR_GUARD};
use urbm_core::sampler::{autocorrelation, metropolis_classical_tafi};
use urbm_core::spinstate::{expectation, ground_state, propagate_exact_recorded, Pauli, SparseHamiltonian, StateVector, DENSE_GUARD};
use urbm_core::tvmc::{
    gradient_scan, log_slope, path_counts, run_imaginary_time_sampled, run_real_time, ImaginaryTimeRun, IntegratorConfig,
    NoiseConfig, Observable, RealTimeRun, Sampling, DIAGNOSTICS_HEADER, EXACT_GUARD, IMAGINARY_TIME_SIGN,
};
use urbm_core::{format_float, rng_from_seed, Error, C64};

use crate::config::{ConfigError, Engine, Experiment, ExperimentConfig, Model};
use crate::output::{Outputs, Table};

/// Failure before any output could be produced.
#[derive(Debug)]
pub enum RunError {
    /// Configuration or size-guard problem (exit code 2).
    Config(String),
    /// Numerical failure (exit code 1).
    Numerical(String),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.0)
    }
}

fn is_config_error(e: &Error) -> bool {
    match e {
        Error::Guard(_) | Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => true,
        Error::Step { source, .. } | Error::Jump { source, .. } => is_config_error(source),
        _ => false,
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        if is_config_error(&e) {
            RunError::Config(e.to_string())
        } else {
            RunError::Numerical(e.to_string())
        }
    }
}

pub fn run(cfg: &ExperimentConfig, workers: usize) -> Result<Outputs, RunError> {
    match cfg.experiment {
        Experiment::Ite => ite(cfg),
        Experiment::Quench => quench(cfg),
        Experiment::Open => open(cfg, workers),
        Experiment::GradientScan => gradient(cfg),
        Experiment::NoiseScan => noise_scan(cfg),
        Experiment::Autocorr => autocorr(cfg),
        Experiment::CircuitCheck => circuit_check(cfg),
    }
}

#[derive(Clone, Copy)]
enum Stage {
    Initial,
    Final,
}

fn hamiltonian(cfg: &ExperimentConfig, stage: Stage) -> Result<SparseHamiltonian, RunError> {
    let pick = |a: &str, b: &str| cfg.req_float(if matches!(stage, Stage::Initial) { a } else { b });
    Ok(match cfg.model {
        Model::Tfi => build_tfi(cfg.n, pick("h_i", "h_f")?, cfg.boundary)?,
        Model::Heisenberg => build_heisenberg(cfg.n, pick("Jz_i", "Jz_f")?, cfg.req_float("hz")?, cfg.boundary)?,
        Model::Tafi2d => build_tafi_2d(cfg.lx, cfg.ly, pick("h_i", "h_f")?)?,
    })
}

fn op(n: usize, ops: &[(usize, Pauli)]) -> Result<SparseHamiltonian, RunError> {
    Ok(SparseHamiltonian::pauli_string(n, ops)?)
}

fn observables(cfg: &ExperimentConfig) -> Result<Vec<Observable>, RunError> {
    let n = cfg.n;
    let mut obs = Vec::new();
    if cfg.model == Model::Heisenberg {
        obs.push(Observable::new("sz1", op(n, &[(0, Pauli::Z)])?));
    }
    obs.push(Observable::new("sx1", op(n, &[(0, Pauli::X)])?));
    if n > 1 {
        obs.push(Observable::new("sxsx", op(n, &[(0, Pauli::X), (1, Pauli::X)])?));
    }
    Ok(obs)
}

/// Size checks that depend on the sampling mode.
fn check_variational_size(cfg: &ExperimentConfig) -> Result<(), RunError> {
    if cfg.m == 0 {
        return Err(RunError::Config("M/alpha: the ansatz needs at least one hidden unit".into()));
    }
    let limit = match cfg.sampling {
        Sampling::Exact => EXACT_GUARD,
        Sampling::MonteCarlo { .. } => STATEVECTOR_GUARD,
    };
    if cfg.n > limit {
        return Err(RunError::Config(format!("N: {} exceeds the limit of {limit} for this sampling mode", cfg.n)));
    }
    Ok(())
}

fn ite_csv(run: &ImaginaryTimeRun, dtau: f64, exact: Option<f64>) -> String {
    let mut t = Table::new();
    t.push("step", (0..run.energies.len()).map(|s| s as f64).collect());
    t.push("tau", (0..run.energies.len()).map(|s| s as f64 * dtau).collect());
    t.push("energy_urbm", run.energies.clone());
    if let Some(e) = exact {
        t.push("energy_exact", vec![e; run.energies.len()]);
    }
    t.to_csv()
}

fn diagnostics_csv(rows: &[urbm_core::tvmc::DiagnosticsRow]) -> String {
    let mut s = format!("{DIAGNOSTICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Exact ground energy when the dense eigensolver is affordable.
fn exact_ground(cfg: &ExperimentConfig, h: &SparseHamiltonian) -> Result<Option<f64>, RunError> {
    if cfg.n > DENSE_GUARD {
        return Ok(None);
    }
    Ok(Some(ground_state(h)?.0))
}

/// Gaussian initialization followed by imaginary-time evolution under `h`.
fn prepare(cfg: &ExperimentConfig, h: &SparseHamiltonian, out: &mut Outputs, file: &str) -> Result<Option<RbmParams>, RunError> {
    let mut rng = rng_from_seed(cfg.seed);
    let p0 = RbmParams::random(cfg.n, cfg.m, true, cfg.init_std, &mut rng);
    let run = run_imaginary_time_sampled(&p0, h, cfg.dtau, cfg.ite_steps, &cfg.ite_regularization, &cfg.sampling)?;
    let exact = exact_ground(cfg, h)?;
    out.ite_sign = Some(run.sign);
    out.count_paths(&path_counts(&run.diagnostics));
    out.file(file, ite_csv(&run, cfg.dtau, exact));
    if let Some(e) = exact {
        out.result("ground_energy_exact", e);
    }
    if let Some(e) = run.energies.last() {
        out.result("ite_final_energy", *e);
    }
    match run.failure {
        Some(e) => {
            out.failure = Some(format!("imaginary-time preparation: {e}"));
            Ok(None)
        }
        None => Ok(Some(run.params)),
    }
}

fn ite(cfg: &ExperimentConfig) -> Result<Outputs, RunError> {
    check_variational_size(cfg)?;
    let h = hamiltonian(cfg, Stage::Initial)?;
    let mut out = Outputs::default();
    let mut rng = rng_from_seed(cfg.seed);
    let p0 = RbmParams::random(cfg.n, cfg.m, true, cfg.init_std, &mut rng);
    let run = run_imaginary_time_sampled(&p0, &h, cfg.dtau, cfg.ite_steps, &cfg.ite_regularization, &cfg.sampling)?;
    let exact = exact_ground(cfg, &h)?;
    out.ite_sign = Some(run.sign);
    out.count_paths(&path_counts(&run.diagnostics));
    out.file("series.csv", ite_csv(&run, cfg.dtau, exact));
    out.file("diagnostics.csv", diagnostics_csv(&run.diagnostics));
    out.file("params.json", run.params.to_json() + "\n");
    if let Some(e) = exact {
        out.result("ground_energy_exact", e);
    }
    if let Some(e) = run.energies.last() {
        out.result("final_energy", *e);
    }
    out.failure = run.failure.map(|e| e.to_string());
    Ok(out)
}

fn real_time_config(cfg: &ExperimentConfig) -> IntegratorConfig {
    IntegratorConfig::real_time(cfg.dt, cfg.t_max)
        .with_regularization(cfg.regularization)
        .with_gauge(cfg.gauge)
        .with_record_every(cfg.record_every)
        .with_sampling(cfg.sampling)
}

/// Exact curves on the recording grid, or `None` beyond the enumeration guard.
fn exact_curves(
    cfg: &ExperimentConfig,
    h: &SparseHamiltonian,
    psi0: &StateVector,
    obs: &[Observable],
) -> Result<Option<Vec<Vec<f64>>>, RunError> {
    if cfg.n > EXACT_GUARD {
        return Ok(None);
    }
    let states = propagate_exact_recorded(h, psi0, cfg.t_max, cfg.dt, cfg.record_every)?;
    let curves = obs
        .iter()
        .map(|o| states.iter().map(|(_, s)| Ok(expectation(s, &o.op)?.re)).collect::<Result<Vec<f64>, Error>>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(curves))
}

fn max_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn quench(cfg: &ExperimentConfig) -> Result<Outputs, RunError> {
    check_variational_size(cfg)?;
    let (h_i, h_f) = (hamiltonian(cfg, Stage::Initial)?, hamiltonian(cfg, Stage::Final)?);
    let obs = observables(cfg)?;
    let icfg = real_time_config(cfg);
    icfg.steps()?;
    let mut out = Outputs::default();
    let Some(p0) = prepare(cfg, &h_i, &mut out, "ite.csv")? else {
        return Ok(out);
    };
    out.file("params_initial.json", p0.to_json() + "\n");
    let psi0 = p0.build_statevector()?;
    let exact = exact_curves(cfg, &h_f, &psi0, &obs)?;
    let run = run_real_time(&p0, &h_f, &icfg, &obs, None)?;
    emit_real_time(&mut out, &run, &obs, exact.as_deref(), "urbm");
    out.file("diagnostics.csv", diagnostics_csv(&run.diagnostics));
    out.file("params_final.json", run.params.to_json() + "\n");
    out.failure = run.failure.map(|e| e.to_string());
    Ok(out)
}

/// `series.csv` with the variational and exact columns side by side.
fn emit_real_time(out: &mut Outputs, run: &RealTimeRun, obs: &[Observable], exact: Option<&[Vec<f64>]>, tag: &str) {
    let mut t = Table::new();
    t.push("t", run.times.clone());
    let mut devs = serde_json::Map::new();
    for (k, o) in obs.iter().enumerate() {
        t.push(format!("{}_{tag}", o.name), run.series[k].clone());
        if let Some(ex) = exact {
            t.push(format!("{}_exact", o.name), ex[k].clone());
            devs.insert(o.name.clone(), json!(max_deviation(&run.series[k], &ex[k])));
        }
    }
    out.count_paths(&path_counts(&run.diagnostics));
    if exact.is_some() {
        out.result("max_deviation", devs);
    }
    out.file("series.csv", t.to_csv());
}

fn noise_scan(cfg: &ExperimentConfig) -> Result<Outputs, RunError> {
    check_variational_size(cfg)?;
    let deltas = cfg.float_list("deltas")?;
    if let Some(d) = deltas.iter().find(|d| !(**d >= 0.0)) {
        return Err(RunError::Config(format!("deltas: entries must be non-negative, got {d}")));
    }
    let (h_i, h_f) = (hamiltonian(cfg, Stage::Initial)?, hamiltonian(cfg, Stage::Final)?);
    let obs = observables(cfg)?;
    let icfg = real_time_config(cfg);
    icfg.steps()?;
    let mut out = Outputs::default();
    let Some(p0) = prepare(cfg, &h_i, &mut out, "ite.csv")? else {
        return Ok(out);
    };
    let psi0 = p0.build_statevector()?;
    let exact = exact_curves(cfg, &h_f, &psi0, &obs)?;
    let mut table = Table::new();
    let mut devs = serde_json::Map::new();
    let mut times_set = false;
    for (k, &delta) in deltas.iter().enumerate() {
        let noise = NoiseConfig { delta, seed: cfg.seed.wrapping_add(1 + k as u64) };
        let run = run_real_time(&p0, &h_f, &icfg, &obs, Some(&noise))?;
        if !times_set {
            table.push("t", (0..=icfg.steps()?).step_by(cfg.record_every).map(|s| s as f64 * cfg.dt).collect());
            if let Some(ex) = &exact {
                for (o, e) in obs.iter().zip(ex) {
                    table.push(format!("{}_exact", o.name), e.clone());
                }
            }
            times_set = true;
        }
        let label = format!("{delta:e}");
        let mut per = serde_json::Map::new();
        for (j, o) in obs.iter().enumerate() {
            table.push(format!("{}_delta_{label}", o.name), run.series[j].clone());
            if let Some(ex) = &exact {
                per.insert(o.name.clone(), json!(max_deviation(&run.series[j], &ex[j])));
            }
        }
        devs.insert(label.clone(), per.into());
        out.count_paths(&path_counts(&run.diagnostics));
        if let Some(e) = run.failure {
            out.failure = Some(format!("delta = {label}: {e}"));
            break;
        }
    }
    if exact.is_some() {
        out.result("max_deviation", devs);
    }
    out.file("series.csv", table.to_csv());
    Ok(out)
}

fn open(cfg: &ExperimentConfig, workers: usize) -> Result<Outputs, RunError> {
    let n = cfg.n;
    let gamma = cfg.req_float("gamma")?;
    let n_traj = cfg.req_uint("n_traj")? as usize;
    if n_traj == 0 {
        return Err(RunError::Config("n_traj: must be positive".into()));
    }
    let engine_kind = cfg.engine()?;
    if engine_kind == Engine::Variational {
        check_variational_size(cfg)?;
    } else if n > STATEVECTOR_GUARD {
        return Err(RunError::Config(format!("N: {n} exceeds the statevector limit of {STATEVECTOR_GUARD}")));
    }
    let h = build_tfi(n, cfg.req_float("h")?, cfg.boundary)?;
    let l = build_lindblad_raising(n, gamma)?;
    let heff = effective_hamiltonian(&h, &l)?;
    let obs = observables(cfg)?;
    let names: Vec<String> = obs.iter().map(|o| o.name.clone()).collect();
    let grid = TrajectoryGrid::new(cfg.t_max, cfg.dt, cfg.record_every)?;
    let seeds: Vec<u64> = (0..n_traj as u64).map(|i| cfg.seed.wrapping_add(i)).collect();

    let mut out = Outputs::default();
    if n <= LINDBLAD_GUARD {
        let oracle = lindblad_oracle(&DensityMatrix::pure(&StateVector::plus(n)), &h, &l, cfg.t_max, cfg.dt, cfg.record_every)?;
        let mut t = Table::new();
        t.push("t", oracle.times.clone());
        for (o, v) in obs.iter().zip(oracle.expectations(&obs)) {
            t.push(format!("{}_oracle", o.name), v);
        }
        out.file("oracle.csv", t.to_csv());
        out.result(
            "oracle",
            json!({
                "max_trace_drift": oracle.diagnostics.max_trace_drift,
                "max_hermiticity_error": oracle.diagnostics.max_hermiticity_error,
                "min_eigenvalue": oracle.diagnostics.min_eigenvalue,
            }),
        );
    }

    fn ensemble<E: TrajectoryEngine>(
        engine: &E,
        start: &E::State,
        grid: &TrajectoryGrid,
        obs: &[Observable],
        names: &[String],
        seeds: &[u64],
        workers: usize,
        out: &mut Outputs,
    ) -> Result<(), RunError> {
        let results = run_ensemble(engine, start, grid, obs, seeds, workers)?;
        let mut lines = String::new();
        let mut ok = Vec::with_capacity(results.len());
        let mut failed = Vec::new();
        for (seed, r) in seeds.iter().zip(results) {
            match r {
                Ok(rec) => {
                    lines.push_str(&rec.to_json_line());
                    lines.push('\n');
                    ok.push(rec);
                }
                Err(e) => failed.push(json!({"seed": seed, "error": e.to_string()})),
            }
        }
        out.file("trajectories.jsonl", lines);
        out.result("n_jumps", ok.iter().map(|r| r.jumps.len()).sum::<usize>());
        if !ok.is_empty() {
            let ens = average_ensemble(&ok, names)?;
            out.result("n_traj", ens.n_traj);
            out.file("ensemble.csv", ens.to_csv());
        }
        if !failed.is_empty() {
            out.failure = Some(format!("{} trajectories failed", failed.len()));
            out.result("failed_trajectories", failed);
        }
        Ok(())
    }

    match engine_kind {
        Engine::Variational => {
            let engine = VariationalEngine {
                heff,
                lindblad: l,
                dt: cfg.dt,
                regularization: cfg.regularization,
                jump: JumpConfig { rotation_dt: cfg.dt, regularization: cfg.regularization, ..JumpConfig::default() },
            };
            ensemble(&engine, &RbmParams::plus(n, cfg.m), &grid, &obs, &names, &seeds, workers, &mut out)?;
        }
        Engine::Exact => {
            let engine = ExactEngine { heff, lindblad: l, dt: cfg.dt };
            ensemble(&engine, &StateVector::plus(n), &grid, &obs, &names, &seeds, workers, &mut out)?;
        }
    }
    Ok(out)
}

fn gradient(cfg: &ExperimentConfig) -> Result<Outputs, RunError> {
    let sizes = cfg.uint_list("N_list")?;
    let m = cfg.req_uint("M")? as usize;
    let n_init = cfg.req_uint("n_init")? as usize;
    let h = cfg.req_float("h")?;
    let rows = gradient_scan(|n| build_tfi(n, h, cfg.boundary), &sizes, m, n_init, cfg.seed, cfg.init_std, &cfg.regularization)?;
    let mut s = String::from("N,n_var,mean_force,min_force,mean_update,min_update\n");
    for r in &rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n,
            r.n_var,
            format_float(r.mean_force),
            format_float(r.min_force),
            format_float(r.mean_update),
            format_float(r.min_update)
        ));
    }
    let mut out = Outputs::default();
    out.file("gradients.csv", s);
    if rows.len() >= 2 {
        out.result("log_slope_mean_force", log_slope(&rows.iter().map(|r| (r.n, r.mean_force)).collect::<Vec<_>>()));
    }
    Ok(out)
}

fn autocorr(cfg: &ExperimentConfig) -> Result<Outputs, RunError> {
    let sizes = cfg.uint_list("L_list")?;
    let temperature = cfg.req_float("temperature")?;
    let n_sweeps = cfg.req_uint("n_sweeps")? as usize;
    let n_seeds = cfg.req_uint("n_seeds")?;
    let max_lag = cfg.req_uint("max_lag")? as usize;
    if n_seeds == 0 {
        return Err(RunError::Config("n_seeds: must be positive".into()));
    }
    let mut out = Outputs::default();
    let mut summary = String::from("L,seed,tau_int\n");
    let mut medians = serde_json::Map::new();
    for &l in &sizes {
        let mut taus = Vec::new();
        for k in 0..n_seeds {
            let seed = cfg.seed.wrapping_add(k);
            let series = metropolis_classical_tafi(l, temperature, n_sweeps, seed)?;
            let acf = match autocorrelation(&series, max_lag) {
                Ok(a) => a,
                Err(Error::ConstantSeries) => {
                    summary.push_str(&format!("{l},{seed},inf\n"));
                    taus.push(f64::INFINITY);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            summary.push_str(&format!("{l},{seed},{}\n", format_float(acf.tau_int)));
            if k == 0 {
                out.file(&format!("acf_L{l}.csv"), acf.to_csv());
            }
            taus.push(acf.tau_int);
        }
        taus.sort_by(f64::total_cmp);
        let median = if taus.len() % 2 == 1 {
            taus[taus.len() / 2]
        } else {
            0.5 * (taus[taus.len() / 2 - 1] + taus[taus.len() / 2])
        };
        medians.insert(l.to_string(), if median.is_finite() { json!(median) } else { json!("inf") });
    }
    out.file("tau.csv", summary);
    out.result("median_tau_int", medians);
    Ok(out)
}

fn circuit_check(cfg: &ExperimentConfig) -> Result<Outputs, RunError> {
    let n_draws = cfg.req_uint("n_draws")?;
    let (max_n, max_m) = (cfg.req_uint("max_N")? as usize, cfg.req_uint("max_M")? as usize);
    if max_n == 0 || max_m == 0 {
        return Err(RunError::Config("max_N/max_M: must be positive".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut s = String::from("draw,N,M,infidelity,ensemble_residual,success_prob\n");
    let (mut worst_fid, mut worst_res): (f64, f64) = (0.0, 0.0);
    for d in 0..n_draws {
        let n = rng.random_range(1..=max_n);
        let m = rng.random_range(1..=max_m);
        let p = RbmParams::random(n, m, true, cfg.init_std, &mut rng);
        let exact = p.build_statevector()?;
        let circ = prepare_recycled(&p)?;
        let infid = 1.0 - circ.state.fidelity(&exact);
        let mut sum = vec![C64::new(0.0, 0.0); exact.dim()];
        for term in ensemble_decompose(&p)? {
            for (acc, a) in sum.iter_mut().zip(term.state.amplitudes()) {
                *acc += term.weight * a;
            }
        }
        let res = sum.iter().zip(exact.amplitudes()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        worst_fid = worst_fid.max(infid);
        worst_res = worst_res.max(res);
        s.push_str(&format!("{d},{n},{m},{},{},{}\n", format_float(infid), format_float(res), format_float(circ.total_success)));
    }
    let mut kernel = String::from("w,kernel_direction_error,success_prob\n");
    let mut worst_kernel: f64 = 0.0;
    for k in 0..=8 {
        let w = -2.0 + 0.5 * k as f64;
        let rc = real_w_coupling(w);
        let got: Vec<f64> = (0..4).map(|i| rc.kernel[i][i]).collect();
        let want: Vec<f64> = [1.0, -1.0, -1.0, 1.0].iter().map(|zz: &f64| (w * zz).exp()).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (ng, nw) = (norm(&got), norm(&want));
        let e = got.iter().zip(&want).map(|(a, b)| (a / ng - b / nw).powi(2)).sum::<f64>().sqrt();
        worst_kernel = worst_kernel.max(e);
        kernel.push_str(&format!("{},{},{}\n", format_float(w), format_float(e), format_float(rc.success_prob)));
    }
    let mut out = Outputs::default();
    out.file("circuit.csv", s);
    out.file("coupling.csv", kernel);
    out.result("max_infidelity", worst_fid);
    out.result("max_ensemble_residual", worst_res);
    out.result("max_kernel_direction_error", worst_kernel);
    Ok(out)
}

/// Sign convention of the imaginary-time update, for the metadata.
pub fn ite_sign() -> f64 {
    IMAGINARY_TIME_SIGN
}

//! Quantum trajectories over the variational state and over exact statevectors, ensemble
//! averaging, and a dense Lindblad integrator used as the reference.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use faer::{Mat, Side};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lattice::LindbladSpec;
use crate::rbm::RbmParams;
use crate::spinstate::{expectation, rk4_step, step_count, Pauli, PauliTerm, SparseHamiltonian, StateVector};
use crate::tvmc::{step_with, Mode, Observable, PhaseGauge, Regularization};
use crate::{format_float, rng_from_seed, Error, Result, C64};

/// Largest N for the dense density-matrix integrator.
pub const LINDBLAD_GUARD: usize = 8;

/// Observables are recorded every this many steps unless configured otherwise.
pub const DEFAULT_RECORD_EVERY: usize = 20;

const TRACE_ABORT: f64 = 1e-6;

/// `H_eff = H - (i/2) Σ_k L_k† L_k`.
#[derive(Clone, Debug)]
pub struct EffectiveHamiltonian {
    pub hermitian_part: SparseHamiltonian,
    /// `-(i/2) Σ_k L_k† L_k`
    pub decay_part: SparseHamiltonian,
    pub full: SparseHamiltonian,
}

fn check_lindblad(h: &SparseHamiltonian, l: &LindbladSpec) -> Result<()> {
    for (_, op) in &l.operators {
        if op.n_sites() != h.n_sites() {
            return Err(Error::DimensionMismatch { expected: h.n_sites(), got: op.n_sites() });
        }
    }
    Ok(())
}

/// `Σ_k L_k† L_k`.
pub fn decay_generator(n: usize, l: &LindbladSpec) -> Result<SparseHamiltonian> {
    let mut acc = SparseHamiltonian::zero(n);
    for (_, op) in &l.operators {
        acc = acc.sum(&op.adjoint().product(op)?)?;
    }
    Ok(acc)
}

pub fn effective_hamiltonian(h: &SparseHamiltonian, l: &LindbladSpec) -> Result<EffectiveHamiltonian> {
    check_lindblad(h, l)?;
    let decay_part = decay_generator(h.n_sites(), l)?.scaled(C64::new(0.0, -0.5));
    let full = h.sum(&decay_part)?;
    Ok(EffectiveHamiltonian { hermitian_part: h.clone(), decay_part, full })
}

/// `p_k = <ψ|L_k† L_k|ψ> dt` for a normalized state; tiny negative values are clipped to zero.
pub fn jump_probabilities(psi: &StateVector, l: &LindbladSpec, dt: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(l.operators.len());
    for (site, op) in &l.operators {
        let lpsi = crate::spinstate::apply_operator(op, psi)?;
        let mut p = lpsi.norm_sqr() / psi.norm_sqr() * dt;
        if p < 0.0 {
            log::warn!("negative jump probability {p:e} on site {site} clipped");
            p = 0.0;
        }
        out.push(p);
    }
    let total: f64 = out.iter().sum();
    if total >= 0.1 {
        log::warn!("total jump probability per step is {total}; first-order jump sampling needs a smaller dt");
    }
    Ok(out)
}

/// Jump probabilities of the variational state.
pub fn jump_probabilities_params(params: &RbmParams, l: &LindbladSpec, dt: f64) -> Result<Vec<f64>> {
    jump_probabilities(&params.build_statevector()?, l, dt)
}

/// `L_k ψ / ‖L_k ψ‖`.
pub fn apply_jump_exact(psi: &StateVector, site: usize, op: &SparseHamiltonian) -> Result<StateVector> {
    let out = crate::spinstate::apply_operator(op, psi)?;
    if out.norm_sqr() <= f64::MIN_POSITIVE {
        return Err(Error::ZeroNormJump(site));
    }
    out.normalized()
}

/// Settings of the two-stage variational raising jump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpConfig {
    /// Step of the real-time `σx` rotation; rounded so that an integer number of steps spans π/2.
    pub rotation_dt: f64,
    pub tau: f64,
    pub dtau: f64,
    pub regularization: Regularization,
}

impl Default for JumpConfig {
    fn default() -> Self {
        Self { rotation_dt: 0.0005, tau: 20.0, dtau: 0.01, regularization: Regularization::default() }
    }
}

impl JumpConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rotation_dt", self.rotation_dt), ("tau", self.tau), ("dtau", self.dtau)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("jump {name} must be positive, got {v}")));
            }
        }
        self.regularization.validate()
    }
}

/// Applies `σ⁺_k` (up to normalization and phase) as a real-time rotation `e^{-i(π/2)σx_k}`
/// followed by imaginary-time projection under `|0><0|_k`.
pub fn apply_jump_variational(params: &RbmParams, site: usize, cfg: &JumpConfig) -> Result<RbmParams> {
    cfg.validate()?;
    if !params.is_urbm() {
        return Err(Error::InvalidArgument("variational jumps need uRBM parameters".into()));
    }
    let n = params.n_visible();
    if site >= n {
        return Err(Error::InvalidArgument(format!("site {site} out of range for {n} spins")));
    }
    let sx = SparseHamiltonian::pauli_string(n, &[(site, Pauli::X)])?;
    let proj0 = SparseHamiltonian::new(
        n,
        [PauliTerm::identity(C64::new(0.5, 0.0)), PauliTerm::single(C64::new(0.5, 0.0), site, Pauli::Z)],
    )?;
    let rot_steps = (FRAC_PI_2 / cfg.rotation_dt).round().max(1.0) as usize;
    let rot_dt = FRAC_PI_2 / rot_steps as f64;
    let ite_steps = (cfg.tau / cfg.dtau).round().max(1.0) as usize;
    let reg = &cfg.regularization;
    let mut p = params.clone();
    for _ in 0..rot_steps {
        p = step_with::<rand_chacha::ChaCha20Rng>(&p, &sx, Mode::RealTime, rot_dt, reg, PhaseGauge::Free, None)?.0;
    }
    for _ in 0..ite_steps {
        p = step_with::<rand_chacha::ChaCha20Rng>(&p, &proj0, Mode::ImaginaryTime, cfg.dtau, reg, PhaseGauge::Free, None)?.0;
    }
    Ok(p)
}

/// A pure-state unraveling: deterministic no-jump drift plus jumps.
pub trait TrajectoryEngine: Sync {
    type State: Clone + Send + Sync;

    fn jump_probabilities(&self, s: &Self::State) -> Result<Vec<f64>>;
    fn drift(&self, s: &Self::State) -> Result<Self::State>;
    /// Applies jump operator number `k`.
    fn jump(&self, s: &Self::State, k: usize) -> Result<Self::State>;
    fn observe(&self, s: &Self::State, observables: &[Observable]) -> Result<Vec<f64>>;
    fn lindblad(&self) -> &LindbladSpec;
    fn dt(&self) -> f64;
}

/// Variational trajectories: t-VMC drift under `H_eff` and two-stage variational jumps.
///
/// The jump realization assumes raising operators `sqrt(γ)|1><0|_k`.
pub struct VariationalEngine {
    pub heff: EffectiveHamiltonian,
    pub lindblad: LindbladSpec,
    pub dt: f64,
    pub regularization: Regularization,
    pub jump: JumpConfig,
}

impl TrajectoryEngine for VariationalEngine {
    type State = RbmParams;

    fn jump_probabilities(&self, s: &RbmParams) -> Result<Vec<f64>> {
        jump_probabilities_params(s, &self.lindblad, self.dt)
    }

    fn drift(&self, s: &RbmParams) -> Result<RbmParams> {
        Ok(step_with::<rand_chacha::ChaCha20Rng>(s, &self.heff.full, Mode::RealTime, self.dt, &self.regularization, PhaseGauge::Free, None)?.0)
    }

    fn jump(&self, s: &RbmParams, k: usize) -> Result<RbmParams> {
        apply_jump_variational(s, self.lindblad.operators[k].0, &self.jump)
    }

    fn observe(&self, s: &RbmParams, observables: &[Observable]) -> Result<Vec<f64>> {
        let sv = s.build_statevector()?;
        observables.iter().map(|o| Ok(expectation(&sv, &o.op)?.re)).collect()
    }

    fn lindblad(&self) -> &LindbladSpec {
        &self.lindblad
    }

    fn dt(&self) -> f64 {
        self.dt
    }
}

/// Exact trajectories: non-hermitian RK4 with renormalization and exact jumps.
pub struct ExactEngine {
    pub heff: EffectiveHamiltonian,
    pub lindblad: LindbladSpec,
    pub dt: f64,
}

impl TrajectoryEngine for ExactEngine {
    type State = StateVector;

    fn jump_probabilities(&self, s: &StateVector) -> Result<Vec<f64>> {
        jump_probabilities(s, &self.lindblad, self.dt)
    }

    fn drift(&self, s: &StateVector) -> Result<StateVector> {
        rk4_step(&self.heff.full, s, self.dt).normalized()
    }

    fn jump(&self, s: &StateVector, k: usize) -> Result<StateVector> {
        let (site, op) = &self.lindblad.operators[k];
        apply_jump_exact(s, *site, op)
    }

    fn observe(&self, s: &StateVector, observables: &[Observable]) -> Result<Vec<f64>> {
        observables.iter().map(|o| Ok(expectation(s, &o.op)?.re)).collect()
    }

    fn lindblad(&self) -> &LindbladSpec {
        &self.lindblad
    }

    fn dt(&self) -> f64 {
        self.dt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub site: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub jumps: Vec<JumpEvent>,
    pub times: Vec<f64>,
    pub series: BTreeMap<String, Vec<f64>>,
}

impl TrajectoryRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory records serialize")
    }
}

/// Time grid shared by every trajectory of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryGrid {
    pub steps: usize,
    pub dt: f64,
    pub record_every: usize,
}

impl TrajectoryGrid {
    pub fn new(t_max: f64, dt: f64, record_every: usize) -> Result<Self> {
        if record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        Ok(Self { steps: step_count(t_max, dt)?, dt, record_every })
    }

    pub fn record_steps(&self) -> Vec<usize> {
        (0..=self.steps).filter(|s| s % self.record_every == 0).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.record_steps().into_iter().map(|s| s as f64 * self.dt).collect()
    }
}

/// The jump-free evolution from the shared initial state, computed once per ensemble.
///
/// Every trajectory follows it until its first jump; using it does not change which
/// random numbers a trajectory consumes.
pub struct NoJumpPrefix<S> {
    states: Vec<S>,
    probs: Vec<Vec<f64>>,
    observed: Vec<Vec<f64>>,
    /// Steps available before the drift failed, if it did.
    failure: Option<(usize, String)>,
}

impl<S: Clone> NoJumpPrefix<S> {
    pub fn compute<E>(engine: &E, start: &S, grid: &TrajectoryGrid, observables: &[Observable]) -> Result<Self>
    where
        E: TrajectoryEngine<State = S>,
    {
        let mut states = vec![start.clone()];
        let mut probs = Vec::with_capacity(grid.steps);
        let mut observed = Vec::new();
        let mut failure = None;
        for s in 0..=grid.steps {
            let cur = &states[s];
            if s % grid.record_every == 0 {
                observed.push(engine.observe(cur, observables)?);
            }
            if s == grid.steps {
                break;
            }
            probs.push(engine.jump_probabilities(cur)?);
            match engine.drift(cur) {
                Ok(next) => states.push(next),
                Err(e) => {
                    failure = Some((s, e.to_string()));
                    break;
                }
            }
        }
        Ok(Self { states, probs, observed, failure })
    }

    /// Number of steps for which the prefix holds a successor state.
    pub fn len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn failure(&self) -> Option<&(usize, String)> {
        self.failure.as_ref()
    }
}

enum Cursor<S> {
    Prefix(usize),
    Live(S),
}

fn select_jump(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// One trajectory: per step draw `u ~ U(0,1)`; if `u < Σp_k` the jump selected by `u` on the
/// cumulative `p_k` replaces the drift for that step.
pub fn run_trajectory_with<E: TrajectoryEngine>(
    engine: &E,
    start: &E::State,
    grid: &TrajectoryGrid,
    observables: &[Observable],
    seed: u64,
    prefix: Option<&NoJumpPrefix<E::State>>,
) -> Result<TrajectoryRecord> {
    let mut rng = rng_from_seed(seed);
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); observables.len()];
    let mut times = Vec::new();
    let mut jumps = Vec::new();
    let mut cur = match prefix {
        Some(_) => Cursor::Prefix(0),
        None => Cursor::Live(start.clone()),
    };
    for s in 0..=grid.steps {
        // leave the prefix where it ends
        if let (Cursor::Prefix(i), Some(pre)) = (&cur, prefix) {
            if *i == pre.len() && s < grid.steps {
                cur = Cursor::Live(pre.states[*i].clone());
            }
        }
        if s % grid.record_every == 0 {
            let vals = match (&cur, prefix) {
                (Cursor::Prefix(i), Some(pre)) => pre.observed[i / grid.record_every].clone(),
                (Cursor::Live(st), _) => engine.observe(st, observables).map_err(|e| e.at_step(s))?,
                _ => unreachable!(),
            };
            times.push(s as f64 * grid.dt);
            for (ser, v) in series.iter_mut().zip(vals) {
                ser.push(v);
            }
        }
        if s == grid.steps {
            break;
        }
        let p = match (&cur, prefix) {
            (Cursor::Prefix(i), Some(pre)) => pre.probs[*i].clone(),
            (Cursor::Live(st), _) => engine.jump_probabilities(st).map_err(|e| e.at_step(s))?,
            _ => unreachable!(),
        };
        let u: f64 = rng.random();
        let total: f64 = p.iter().sum();
        let state_ref = |cur: &Cursor<E::State>| -> E::State {
            match cur {
                Cursor::Prefix(i) => prefix.expect("prefix cursor").states[*i].clone(),
                Cursor::Live(st) => st.clone(),
            }
        };
        if u < total {
            let k = select_jump(&p, u);
            let site = engine.lindblad().operators[k].0;
            let next = engine
                .jump(&state_ref(&cur), k)
                .map_err(|e| Error::Jump { site, step: s, source: Box::new(e) })?;
            jumps.push(JumpEvent { time: s as f64 * grid.dt, site });
            cur = Cursor::Live(next);
        } else {
            cur = match cur {
                Cursor::Prefix(i) => Cursor::Prefix(i + 1),
                Cursor::Live(st) => Cursor::Live(engine.drift(&st).map_err(|e| e.at_step(s))?),
            };
        }
    }
    let names = observables.iter().map(|o| o.name.clone());
    Ok(TrajectoryRecord { seed, jumps, times, series: names.zip(series).collect() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryConfig {
    pub t_max: f64,
    pub dt: f64,
    pub record_every: usize,
    pub regularization: Regularization,
    pub jump: JumpConfig,
}

impl TrajectoryConfig {
    pub fn new(t_max: f64, dt: f64) -> Self {
        Self {
            t_max,
            dt,
            record_every: DEFAULT_RECORD_EVERY,
            regularization: Regularization::default(),
            jump: JumpConfig { rotation_dt: dt, ..JumpConfig::default() },
        }
    }

    pub fn grid(&self) -> Result<TrajectoryGrid> {
        TrajectoryGrid::new(self.t_max, self.dt, self.record_every)
    }
}

/// Single variational trajectory.
pub fn run_trajectory(
    params0: &RbmParams,
    h: &SparseHamiltonian,
    l: &LindbladSpec,
    cfg: &TrajectoryConfig,
    observables: &[Observable],
    seed: u64,
) -> Result<TrajectoryRecord> {
    if !params0.is_urbm() {
        return Err(Error::InvalidArgument("trajectories need uRBM parameters".into()));
    }
    let engine = VariationalEngine {
        heff: effective_hamiltonian(h, l)?,
        lindblad: l.clone(),
        dt: cfg.dt,
        regularization: cfg.regularization,
        jump: cfg.jump,
    };
    run_trajectory_with(&engine, params0, &cfg.grid()?, observables, seed, None)
}

/// Single exact-statevector trajectory.
pub fn run_trajectory_exact(
    psi0: &StateVector,
    h: &SparseHamiltonian,
    l: &LindbladSpec,
    cfg: &TrajectoryConfig,
    observables: &[Observable],
    seed: u64,
) -> Result<TrajectoryRecord> {
    let engine = ExactEngine { heff: effective_hamiltonian(h, l)?, lindblad: l.clone(), dt: cfg.dt };
    run_trajectory_with(&engine, &psi0.clone().normalized()?, &cfg.grid()?, observables, seed, None)
}

/// Runs one trajectory per seed on `workers` threads; results keep the seed order.
pub fn run_ensemble<E: TrajectoryEngine>(
    engine: &E,
    start: &E::State,
    grid: &TrajectoryGrid,
    observables: &[Observable],
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<Result<TrajectoryRecord>>> {
    let prefix = NoJumpPrefix::compute(engine, start, grid, observables)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        seeds.par_iter().map(|&s| run_trajectory_with(engine, start, grid, observables, s, Some(&prefix))).collect()
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    pub names: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    /// Sample standard deviation over `sqrt(n_traj)`; zero when `n_traj = 1`.
    pub stderr: Vec<Vec<f64>>,
    pub n_traj: usize,
    pub stderr_defined: bool,
}

impl EnsembleResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for n in &self.names {
            s.push_str(&format!(",mean_{n}"));
        }
        for n in &self.names {
            s.push_str(&format!(",stderr_{n}"));
        }
        s.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            s.push_str(&format_float(*t));
            for col in self.mean.iter().chain(&self.stderr) {
                s.push(',');
                s.push_str(&format_float(col[i]));
            }
            s.push('\n');
        }
        s
    }
}

pub fn average_ensemble(records: &[TrajectoryRecord], observables: &[String]) -> Result<EnsembleResult> {
    let first = records.first().ok_or(Error::EmptyBatch)?;
    let times = first.times.clone();
    if records.iter().any(|r| r.times != times) {
        return Err(Error::GridMismatch);
    }
    let n = records.len();
    let mut mean = Vec::with_capacity(observables.len());
    let mut stderr = Vec::with_capacity(observables.len());
    for name in observables {
        let cols: Vec<&Vec<f64>> = records
            .iter()
            .map(|r| r.series.get(name).ok_or_else(|| Error::InvalidArgument(format!("observable {name} not recorded"))))
            .collect::<Result<_>>()?;
        let mut m = vec![0.0; times.len()];
        let mut se = vec![0.0; times.len()];
        for i in 0..times.len() {
            let mu = cols.iter().map(|c| c[i]).sum::<f64>() / n as f64;
            m[i] = mu;
            if n > 1 {
                let var = cols.iter().map(|c| (c[i] - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
                se[i] = (var / n as f64).sqrt();
            }
        }
        mean.push(m);
        stderr.push(se);
    }
    Ok(EnsembleResult { times, names: observables.to_vec(), mean, stderr, n_traj: n, stderr_defined: n > 1 })
}

/// Dense density matrix, column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    n: usize,
    data: Vec<C64>,
}

impl DensityMatrix {
    pub fn pure(psi: &StateVector) -> Self {
        let a = psi.amplitudes();
        let dim = a.len();
        let mut data = vec![C64::new(0.0, 0.0); dim * dim];
        for j in 0..dim {
            for i in 0..dim {
                data[i + dim * j] = a[i] * a[j].conj();
            }
        }
        Self { n: psi.n_sites(), data }
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        1 << self.n
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i + self.dim() * j]
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    /// `Tr(O ρ)`.
    pub fn expectation(&self, o: &SparseHamiltonian) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for r in 0..self.dim() {
            o.for_each_in_row(r, |c, v| acc += v * self.get(c, r));
        }
        acc
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let mut e: f64 = 0.0;
        for j in 0..d {
            for i in 0..=j {
                e = e.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        e
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let d = self.dim();
        let m = Mat::<C64>::from_fn(d, d, |i, j| (self.get(i, j) + self.get(j, i).conj()) * 0.5);
        let ev = m.self_adjoint_eigenvalues(Side::Lower).map_err(|e| Error::Solver(format!("{e:?}")))?;
        Ok(ev.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    fn apply_left(op: &SparseHamiltonian, x: &[C64], dim: usize) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); x.len()];
        for j in 0..dim {
            let (src, dst) = (&x[dim * j..dim * (j + 1)], &mut out[dim * j..dim * (j + 1)]);
            for (r, d) in dst.iter_mut().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                op.for_each_in_row(r, |c, v| acc += v * src[c]);
                *d = acc;
            }
        }
        out
    }

    fn adjoint_of(x: &[C64], dim: usize) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); x.len()];
        for j in 0..dim {
            for i in 0..dim {
                out[j + dim * i] = x[i + dim * j].conj();
            }
        }
        out
    }
}

/// `dρ/dt = -i H_eff ρ + i ρ H_eff† + Σ_k L_k ρ L_k†`.
fn lindblad_rhs(heff: &SparseHamiltonian, l: &LindbladSpec, rho: &[C64], dim: usize) -> Vec<C64> {
    let minus_i = C64::new(0.0, -1.0);
    let g: Vec<C64> = DensityMatrix::apply_left(heff, rho, dim).into_iter().map(|v| minus_i * v).collect();
    let gd = DensityMatrix::adjoint_of(&g, dim);
    let mut out: Vec<C64> = g.iter().zip(&gd).map(|(a, b)| a + b).collect();
    for (_, op) in &l.operators {
        // L ρ L† = (L (L ρ)†)†
        let x = DensityMatrix::apply_left(op, rho, dim);
        let y = DensityMatrix::apply_left(op, &DensityMatrix::adjoint_of(&x, dim), dim);
        for (o, v) in out.iter_mut().zip(DensityMatrix::adjoint_of(&y, dim)) {
            *o += v;
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleDiagnostics {
    pub max_trace_drift: f64,
    pub max_hermiticity_error: f64,
    pub min_eigenvalue: f64,
}

#[derive(Clone, Debug)]
pub struct LindbladRun {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    pub diagnostics: OracleDiagnostics,
}

impl LindbladRun {
    /// Real parts of `Tr(O ρ(t))`, one series per observable.
    pub fn expectations(&self, observables: &[Observable]) -> Vec<Vec<f64>> {
        observables.iter().map(|o| self.states.iter().map(|r| r.expectation(&o.op).re).collect()).collect()
    }

    /// Time integral of `<L_k† L_k>` per operator by the trapezoid rule on the recorded grid.
    pub fn integrated_rates(&self, l: &LindbladSpec) -> Result<Vec<f64>> {
        l.operators
            .iter()
            .map(|(_, op)| {
                let ll = op.adjoint().product(op)?;
                let v: Vec<f64> = self.states.iter().map(|r| r.expectation(&ll).re).collect();
                Ok(self.times.windows(2).zip(v.windows(2)).map(|(t, y)| 0.5 * (t[1] - t[0]) * (y[0] + y[1])).sum())
            })
            .collect()
    }
}

/// RK4 integration of the Lindblad equation, recording every `record_every` steps.
pub fn lindblad_oracle(
    rho0: &DensityMatrix,
    h: &SparseHamiltonian,
    l: &LindbladSpec,
    t_max: f64,
    dt: f64,
    record_every: usize,
) -> Result<LindbladRun> {
    if rho0.n > LINDBLAD_GUARD {
        return Err(Error::Guard(format!("dense Lindblad integration for {} spins", rho0.n)));
    }
    if h.n_sites() != rho0.n {
        return Err(Error::DimensionMismatch { expected: rho0.n, got: h.n_sites() });
    }
    if record_every == 0 {
        return Err(Error::InvalidArgument("record_every must be at least 1".into()));
    }
    let heff = effective_hamiltonian(h, l)?.full;
    let steps = step_count(t_max, dt)?;
    let dim = rho0.dim();
    let mut rho = rho0.data.clone();
    let tr0 = rho0.trace().re;
    let mut run = LindbladRun {
        times: Vec::new(),
        states: Vec::new(),
        diagnostics: OracleDiagnostics { min_eigenvalue: f64::INFINITY, ..Default::default() },
    };
    let axpy = |a: &[C64], k: &[C64], c: f64| -> Vec<C64> { a.iter().zip(k).map(|(x, y)| x + y * c).collect() };
    for s in 0..=steps {
        let t = s as f64 * dt;
        let dm = DensityMatrix { n: rho0.n, data: rho.clone() };
        let drift = (dm.trace().re - tr0).abs();
        run.diagnostics.max_trace_drift = run.diagnostics.max_trace_drift.max(drift);
        if drift > TRACE_ABORT {
            return Err(Error::TraceDrift { drift, t });
        }
        if s % record_every == 0 {
            run.diagnostics.max_hermiticity_error = run.diagnostics.max_hermiticity_error.max(dm.hermiticity_error());
            run.diagnostics.min_eigenvalue = run.diagnostics.min_eigenvalue.min(dm.min_eigenvalue()?);
            run.times.push(t);
            run.states.push(dm);
        }
        if s == steps {
            break;
        }
        let k1 = lindblad_rhs(&heff, l, &rho, dim);
        let k2 = lindblad_rhs(&heff, l, &axpy(&rho, &k1, dt / 2.0), dim);
        let k3 = lindblad_rhs(&heff, l, &axpy(&rho, &k2, dt / 2.0), dim);
        let k4 = lindblad_rhs(&heff, l, &axpy(&rho, &k3, dt), dim);
        for i in 0..rho.len() {
            rho[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
        }
    }
    Ok(run)
}

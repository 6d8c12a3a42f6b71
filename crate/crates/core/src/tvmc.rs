//! Covariance matrix / force vector assembly, regularized solves and parameter integrators.
//!
//! With `O_n(z) = ∂ ln ψ(z)/∂θ_n` and `<·>` the Born average:
//!
//! * `A_nm = Re<O_n* O_m> - Re<O_n> Re<O_m>`
//! * `f_m  = <O_m* E_loc> - Re<O_m> <H>`
//!
//! Both are built from the centred derivative rows `X_zm = sqrt(p_z) (O_m(z) - Re<O_m>)`
//! stacked as `B = [Re X; Im X]`, so that `A = B^T B`, `Re f = B^T [Re e; Im e]`
//! and `Im f = B^T [Im e; -Re e]` with `e_z = sqrt(p_z) E_loc(z)`.

use std::collections::BTreeMap;

use faer::Mat;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::rbm::RbmParams;
use crate::spinstate::{expectation, step_count, SparseHamiltonian};
use crate::{format_float, rng_from_seed, Error, Result, C64};

/// Largest N for exact enumeration of the Born distribution.
pub const EXACT_GUARD: usize = 16;

/// Size limit for [`gradient_scan`], which only assembles one system per initialization.
pub const GRADIENT_GUARD: usize = 18;

/// Imaginary-time updates are `θ ← θ + IMAGINARY_TIME_SIGN · δτ · A⁻¹ Re f`.
pub const IMAGINARY_TIME_SIGN: f64 = -1.0;

const CHUNK: usize = 2048;

/// Regularization of the linear solve: `(A + ridge·I + diag_shift·diag(A)) x = rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub ridge: f64,
    pub diag_shift: f64,
    pub svd_cutoff: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Self { ridge: 1e-6, diag_shift: 0.0, svd_cutoff: 1e-8 }
    }
}

impl Regularization {
    /// Default for imaginary-time runs: a relative diagonal shift on top of the ridge.
    pub fn imaginary_time() -> Self {
        Self { diag_shift: 1e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.diag_shift >= 0.0 && self.svd_cutoff >= 0.0) {
            return Err(Error::InvalidArgument("regularization parameters must be non-negative".into()));
        }
        Ok(())
    }

    fn shifts(&self, diag: &[f64]) -> Vec<f64> {
        diag.iter().map(|d| self.ridge + self.diag_shift * d).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverPath {
    /// Cholesky factorization of the regularized `A`.
    Cholesky,
    /// Cholesky factorization of the configuration-space kernel `I + B D⁻¹ B^T`.
    KernelCholesky,
    /// Eigendecomposition pseudo-inverse fallback.
    EigenPseudoInverse,
}

impl SolverPath {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverPath::Cholesky => "cholesky",
            SolverPath::KernelCholesky => "kernel_cholesky",
            SolverPath::EigenPseudoInverse => "eigen_pinv",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemDiagnostics {
    pub n_var: usize,
    /// Distinct configurations entering the estimators.
    pub n_configs: usize,
    pub force_norm: f64,
    /// `max |A - A^T|`.
    pub asymmetry: f64,
}

#[derive(Clone, Debug)]
pub struct TvmcLinearSystem {
    pub a: Mat<f64>,
    pub f: Vec<C64>,
    pub energy: C64,
    pub diagnostics: SystemDiagnostics,
}

impl TvmcLinearSystem {
    pub fn n_var(&self) -> usize {
        self.f.len()
    }

    pub fn force_re(&self) -> Vec<f64> {
        self.f.iter().map(|c| c.re).collect()
    }

    pub fn force_im(&self) -> Vec<f64> {
        self.f.iter().map(|c| c.im).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub x: Vec<f64>,
    pub path: SolverPath,
    /// Smallest squared Cholesky pivot of the regularized matrix, or its smallest
    /// eigenvalue on the pseudo-inverse path; `None` on the kernel path.
    pub min_eigenvalue_estimate: Option<f64>,
}

/// Solves `(A + D) x = rhs` by Cholesky, falling back to a pseudo-inverse.
pub fn solve_regularized(sys: &TvmcLinearSystem, rhs: &[f64], reg: &Regularization) -> Result<Solution> {
    reg.validate()?;
    let n = sys.n_var();
    if rhs.len() != n || sys.a.nrows() != n {
        return Err(Error::InvalidArgument(format!("right-hand side has length {}, expected {n}", rhs.len())));
    }
    if !linalg::all_finite(sys.a.as_ref()) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear system".into()));
    }
    let diag: Vec<f64> = (0..n).map(|i| sys.a[(i, i)]).collect();
    let mut m = sys.a.clone();
    for (i, s) in reg.shifts(&diag).into_iter().enumerate() {
        m[(i, i)] += s;
    }
    if let Some((x, pivot)) = linalg::cholesky_solve(&m, rhs) {
        return Ok(Solution { x, path: SolverPath::Cholesky, min_eigenvalue_estimate: Some(pivot) });
    }
    let (x, lmin) = linalg::pseudo_inverse_solve(&m, rhs, reg.svd_cutoff)?;
    Ok(Solution { x, path: SolverPath::EigenPseudoInverse, min_eigenvalue_estimate: Some(lmin) })
}

/// Treatment of the global phase of the state in `A` and `f`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseGauge {
    /// The global phase is an extra free parameter: derivatives are centred by the full complex
    /// mean `<O>`, and the flow is invariant under `H → H + c`.
    #[default]
    Free,
    /// Only `Re<O>` is subtracted; the parameters themselves have to carry the global phase.
    Pinned,
}

/// Which part of `f` drives the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForcePart {
    Re,
    Im,
}

/// Weighted configuration set with local energies.
struct Weighted {
    idx: Vec<usize>,
    w: Vec<f64>,
    eloc: Vec<C64>,
    energy: C64,
}

fn check_sites(params: &RbmParams, h: &SparseHamiltonian) -> Result<()> {
    if h.n_sites() != params.n_visible() {
        return Err(Error::DimensionMismatch { expected: params.n_visible(), got: h.n_sites() });
    }
    Ok(())
}

/// Exact Born weights over all configurations with nonzero probability.
fn weighted_exact(params: &RbmParams, h: &SparseHamiltonian) -> Result<Weighted> {
    weighted_exact_guarded(params, h, EXACT_GUARD)
}

fn weighted_exact_guarded(params: &RbmParams, h: &SparseHamiltonian, guard: usize) -> Result<Weighted> {
    check_sites(params, h)?;
    if params.n_visible() > guard {
        return Err(Error::Guard(format!("exact enumeration for {} visible spins", params.n_visible())));
    }
    let logs = params.log_amplitudes()?;
    let shift = logs.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return Err(Error::Degenerate("all amplitudes vanish".into()));
    }
    if !shift.is_finite() || logs.iter().any(|l| l.re.is_nan() || l.im.is_nan()) {
        return Err(Error::NonFinite("log-amplitudes".into()));
    }
    let p: Vec<f64> = logs.iter().map(|l| (2.0 * (l.re - shift)).exp()).collect();
    let z: f64 = p.iter().sum();
    let mut out = Weighted { idx: Vec::new(), w: Vec::new(), eloc: Vec::new(), energy: C64::new(0.0, 0.0) };
    for (k, &pk) in p.iter().enumerate() {
        if pk == 0.0 {
            continue;
        }
        let wk = pk / z;
        let lk = logs[k];
        let mut e = C64::new(0.0, 0.0);
        h.for_each_in_row(k, |c, v| e += v * (logs[c] - lk).exp());
        out.idx.push(k);
        out.w.push(wk);
        out.eloc.push(e);
        out.energy += wk * e;
    }
    if out.eloc.iter().any(|e| !e.re.is_finite() || !e.im.is_finite()) {
        return Err(Error::NonFinite("local energies".into()));
    }
    Ok(out)
}

/// Empirical weights from sampled basis indices; local energies from amplitude ratios.
fn weighted_samples(params: &RbmParams, h: &SparseHamiltonian, samples: &[usize]) -> Result<Weighted> {
    check_sites(params, h)?;
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in samples {
        *counts.entry(s).or_default() += 1;
    }
    let total = samples.len() as f64;
    let mut cache: BTreeMap<usize, C64> = BTreeMap::new();
    let mut logpsi = |k: usize| *cache.entry(k).or_insert_with(|| params.log_amplitude_index(k));
    let mut out = Weighted { idx: Vec::new(), w: Vec::new(), eloc: Vec::new(), energy: C64::new(0.0, 0.0) };
    for (&k, &cnt) in &counts {
        let lk = logpsi(k);
        let mut row = Vec::new();
        h.for_each_in_row(k, |c, v| row.push((c, v)));
        let e: C64 = row.into_iter().map(|(c, v)| v * (logpsi(c) - lk).exp()).sum();
        let wk = cnt as f64 / total;
        out.idx.push(k);
        out.w.push(wk);
        out.eloc.push(e);
        out.energy += wk * e;
    }
    Ok(out)
}

/// Means subtracted from `Re O` and `Im O`.
fn means(params: &RbmParams, set: &Weighted, gauge: PhaseGauge) -> Vec<(f64, f64)> {
    let nv = params.n_var();
    let mut o = vec![C64::new(0.0, 0.0); nv];
    let mut mean = vec![C64::new(0.0, 0.0); nv];
    for (&k, &w) in set.idx.iter().zip(&set.w) {
        params.log_derivatives_into(k, &mut o);
        for (m, v) in mean.iter_mut().zip(&o) {
            *m += w * v;
        }
    }
    mean.into_iter()
        .map(|m| match gauge {
            PhaseGauge::Free => (m.re, m.im),
            PhaseGauge::Pinned => (m.re, 0.0),
        })
        .collect()
}

/// Writes centred rows for configurations `range` into `b` (`2·len × n_var`) and the scaled local energies.
fn fill_rows(
    params: &RbmParams,
    set: &Weighted,
    range: std::ops::Range<usize>,
    means: &[(f64, f64)],
    b: &mut Mat<f64>,
    er: &mut [f64],
    ei: &mut [f64],
) {
    let len = range.len();
    let mut o = vec![C64::new(0.0, 0.0); params.n_var()];
    for (r, k) in range.enumerate() {
        let s = set.w[k].sqrt();
        params.log_derivatives_into(set.idx[k], &mut o);
        for (col, (v, m)) in o.iter().zip(means).enumerate() {
            b[(r, col)] = s * (v.re - m.0);
            b[(len + r, col)] = s * (v.im - m.1);
        }
        er[r] = s * set.eloc[k].re;
        ei[r] = s * set.eloc[k].im;
    }
}

fn force_from_rows(b: &Mat<f64>, er: &[f64], ei: &[f64]) -> Vec<C64> {
    let re_rhs: Vec<f64> = er.iter().chain(ei).copied().collect();
    let im_rhs: Vec<f64> = ei.iter().copied().chain(er.iter().map(|v| -v)).collect();
    let fr = linalg::t_mul_vec(b.as_ref(), &re_rhs);
    let fi = linalg::t_mul_vec(b.as_ref(), &im_rhs);
    fr.into_iter().zip(fi).map(|(a, b)| C64::new(a, b)).collect()
}

fn norm_c(v: &[C64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Centred derivative rows of a weighted configuration set.
#[derive(Clone, Debug)]
pub struct CenteredDerivatives {
    /// `[Re X; Im X]`, `2·n_configs × n_var`.
    pub rows: Mat<f64>,
    pub e_re: Vec<f64>,
    pub e_im: Vec<f64>,
    pub energy: C64,
}

impl CenteredDerivatives {
    fn from_weighted(params: &RbmParams, set: &Weighted, gauge: PhaseGauge) -> Self {
        let len = set.idx.len();
        let means = means(params, set, gauge);
        let mut rows = Mat::<f64>::zeros(2 * len, params.n_var());
        let mut e_re = vec![0.0; len];
        let mut e_im = vec![0.0; len];
        fill_rows(params, set, 0..len, &means, &mut rows, &mut e_re, &mut e_im);
        Self { rows, e_re, e_im, energy: set.energy }
    }

    pub fn n_configs(&self) -> usize {
        self.e_re.len()
    }

    pub fn n_var(&self) -> usize {
        self.rows.ncols()
    }

    pub fn force(&self) -> Vec<C64> {
        force_from_rows(&self.rows, &self.e_re, &self.e_im)
    }

    pub fn covariance(&self) -> Mat<f64> {
        linalg::gram(self.rows.as_ref())
    }

    pub fn assemble(&self) -> TvmcLinearSystem {
        let a = self.covariance();
        let f = self.force();
        let diagnostics =
            SystemDiagnostics { n_var: self.n_var(), n_configs: self.n_configs(), force_norm: norm_c(&f), asymmetry: 0.0 };
        TvmcLinearSystem { a, f, energy: self.energy, diagnostics }
    }

    fn rhs_rows(&self, part: ForcePart) -> Vec<f64> {
        match part {
            ForcePart::Re => self.e_re.iter().chain(&self.e_im).copied().collect(),
            ForcePart::Im => self.e_im.iter().copied().chain(self.e_re.iter().map(|v| -v)).collect(),
        }
    }

    fn prefers_kernel(&self) -> bool {
        let rows = 2.0 * self.n_configs() as f64;
        let n = self.n_var() as f64;
        let explicit = rows * n * n + n * n * n / 3.0;
        let kernel = rows * rows * n + rows * rows * rows / 3.0;
        kernel < explicit
    }

    /// Solves `(A + D) x = part(f)`, choosing the cheaper of the explicit and kernel forms.
    pub fn solve(&self, part: ForcePart, reg: &Regularization) -> Result<Solution> {
        reg.validate()?;
        if self.prefers_kernel() {
            if let Some(sol) = self.solve_kernel(part, reg)? {
                return Ok(sol);
            }
        }
        self.solve_explicit(part, reg)
    }

    pub fn solve_explicit(&self, part: ForcePart, reg: &Regularization) -> Result<Solution> {
        let sys = self.assemble();
        let rhs = match part {
            ForcePart::Re => sys.force_re(),
            ForcePart::Im => sys.force_im(),
        };
        solve_regularized(&sys, &rhs, reg)
    }

    /// `x = D⁻¹ B^T (I + B D⁻¹ B^T)⁻¹ u`; `None` if `D` is not positive or the kernel factorization fails.
    pub fn solve_kernel(&self, part: ForcePart, reg: &Regularization) -> Result<Option<Solution>> {
        let (nr, nv) = (self.rows.nrows(), self.rows.ncols());
        if !linalg::all_finite(self.rows.as_ref()) {
            return Err(Error::NonFinite("derivative rows".into()));
        }
        let diag: Vec<f64> = (0..nv)
            .map(|j| {
                let c = self.rows.col(j);
                (0..nr).map(|i| c[i] * c[i]).sum()
            })
            .collect();
        let d = reg.shifts(&diag);
        if d.iter().any(|&v| !(v > 0.0)) {
            return Ok(None);
        }
        let inv_sqrt: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
        let scaled = Mat::<f64>::from_fn(nr, nv, |i, j| self.rows[(i, j)] * inv_sqrt[j]);
        let mut kern = linalg::outer_gram(scaled.as_ref());
        for i in 0..nr {
            kern[(i, i)] += 1.0;
        }
        let u = self.rhs_rows(part);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("local energies".into()));
        }
        let Some((y, _)) = linalg::cholesky_solve(&kern, &u) else { return Ok(None) };
        let bty = linalg::t_mul_vec(self.rows.as_ref(), &y);
        let x = bty.into_iter().zip(&d).map(|(v, dv)| v / dv).collect();
        Ok(Some(Solution { x, path: SolverPath::KernelCholesky, min_eigenvalue_estimate: None }))
    }
}

/// Centred rows from the exact Born distribution.
pub fn centered_exact(params: &RbmParams, h: &SparseHamiltonian, gauge: PhaseGauge) -> Result<CenteredDerivatives> {
    let set = weighted_exact(params, h)?;
    Ok(CenteredDerivatives::from_weighted(params, &set, gauge))
}

/// Centred rows from sampled configurations (uniform sample weights).
pub fn centered_samples(
    params: &RbmParams,
    h: &SparseHamiltonian,
    samples: &[usize],
    gauge: PhaseGauge,
) -> Result<CenteredDerivatives> {
    let set = weighted_samples(params, h, samples)?;
    Ok(CenteredDerivatives::from_weighted(params, &set, gauge))
}

fn assemble_chunked(params: &RbmParams, set: &Weighted, gauge: PhaseGauge) -> TvmcLinearSystem {
    let nv = params.n_var();
    let means = means(params, set, gauge);
    let mut a = Mat::<f64>::zeros(nv, nv);
    let mut f = vec![C64::new(0.0, 0.0); nv];
    let total = set.idx.len();
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        let len = end - start;
        let mut b = Mat::<f64>::zeros(2 * len, nv);
        let mut er = vec![0.0; len];
        let mut ei = vec![0.0; len];
        fill_rows(params, set, start..end, &means, &mut b, &mut er, &mut ei);
        linalg::gram_accumulate_lower(&mut a, b.as_ref());
        for (acc, v) in f.iter_mut().zip(force_from_rows(&b, &er, &ei)) {
            *acc += v;
        }
        start = end;
    }
    linalg::mirror_lower(&mut a);
    let diagnostics = SystemDiagnostics { n_var: nv, n_configs: total, force_norm: norm_c(&f), asymmetry: 0.0 };
    TvmcLinearSystem { a, f, energy: set.energy, diagnostics }
}

/// `A`, `f` and `<H>` from exact enumeration of the Born distribution.
pub fn build_system_exact(params: &RbmParams, h: &SparseHamiltonian) -> Result<TvmcLinearSystem> {
    build_system_exact_gauge(params, h, PhaseGauge::default())
}

pub fn build_system_exact_gauge(params: &RbmParams, h: &SparseHamiltonian, gauge: PhaseGauge) -> Result<TvmcLinearSystem> {
    let set = weighted_exact(params, h)?;
    Ok(assemble_chunked(params, &set, gauge))
}

/// `A`, `f` and `<H>` from sampled basis indices.
pub fn build_system_samples(
    params: &RbmParams,
    h: &SparseHamiltonian,
    samples: &[usize],
    gauge: PhaseGauge,
) -> Result<TvmcLinearSystem> {
    let set = weighted_samples(params, h, samples)?;
    Ok(assemble_chunked(params, &set, gauge))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    RealTime,
    ImaginaryTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub mode: Mode,
    pub regularization: Regularization,
    pub gauge: PhaseGauge,
    pub t_max: f64,
    pub record_every: usize,
    pub sampling: Sampling,
}

/// Where the expectation values in `A` and `f` come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    /// Full enumeration of the Born distribution.
    #[default]
    Exact,
    /// A fresh Metropolis chain per step, seeded with `seed + step`.
    MonteCarlo { n_exp: usize, burn_in: usize, seed: u64 },
}

impl IntegratorConfig {
    pub fn real_time(dt: f64, t_max: f64) -> Self {
        Self {
            dt,
            mode: Mode::RealTime,
            regularization: Regularization::default(),
            gauge: PhaseGauge::default(),
            t_max,
            record_every: 1,
            sampling: Sampling::Exact,
        }
    }

    /// `steps` imaginary-time steps of size `dtau`.
    pub fn imaginary_time(dtau: f64, steps: usize) -> Self {
        Self {
            dt: dtau,
            mode: Mode::ImaginaryTime,
            regularization: Regularization::imaginary_time(),
            gauge: PhaseGauge::default(),
            t_max: dtau * steps as f64,
            record_every: 1,
            sampling: Sampling::Exact,
        }
    }

    pub fn with_regularization(mut self, reg: Regularization) -> Self {
        self.regularization = reg;
        self
    }

    pub fn with_gauge(mut self, gauge: PhaseGauge) -> Self {
        self.gauge = gauge;
        self
    }

    pub fn with_record_every(mut self, every: usize) -> Self {
        self.record_every = every;
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Sampling::MonteCarlo { n_exp: 0, .. } = self.sampling {
            return Err(Error::EmptyBatch);
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        self.regularization.validate()
    }

    pub fn steps(&self) -> Result<usize> {
        step_count(self.t_max, self.dt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub delta: f64,
    pub seed: u64,
}

/// Adds i.i.d. `N(0, δ²)` draws to the upper triangle of `A` (mirrored) and to `Re f`, `Im f`.
pub fn inject_noise<R: Rng + ?Sized>(sys: &TvmcLinearSystem, delta: f64, rng: &mut R) -> Result<TvmcLinearSystem> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level must be non-negative, got {delta}")));
    }
    let mut out = sys.clone();
    if delta == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, delta).expect("finite noise level");
    let n = sys.n_var();
    for i in 0..n {
        for j in i..n {
            let e = normal.sample(rng);
            out.a[(i, j)] += e;
            if i != j {
                out.a[(j, i)] = out.a[(i, j)];
            }
        }
    }
    for c in out.f.iter_mut() {
        let (dr, di) = (normal.sample(rng), normal.sample(rng));
        *c += C64::new(dr, di);
    }
    out.diagnostics.force_norm = norm_c(&out.f);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub energy: C64,
    pub force_norm: f64,
    pub path: SolverPath,
    pub min_eigenvalue_estimate: Option<f64>,
}

/// One Euler step in the given mode, optionally with noise injected into `A` and `f`.
pub fn step_with<R: Rng + ?Sized>(
    params: &RbmParams,
    h: &SparseHamiltonian,
    mode: Mode,
    dt: f64,
    reg: &Regularization,
    gauge: PhaseGauge,
    noise: Option<(f64, &mut R)>,
) -> Result<(RbmParams, StepReport)> {
    step_sampled(params, h, mode, dt, reg, gauge, &Sampling::Exact, 0, noise)
}

/// [`step_with`] with the linear system taken from `sampling`; `step` offsets the chain seed.
#[allow(clippy::too_many_arguments)]
pub fn step_sampled<R: Rng + ?Sized>(
    params: &RbmParams,
    h: &SparseHamiltonian,
    mode: Mode,
    dt: f64,
    reg: &Regularization,
    gauge: PhaseGauge,
    sampling: &Sampling,
    step: usize,
    noise: Option<(f64, &mut R)>,
) -> Result<(RbmParams, StepReport)> {
    let cd = match *sampling {
        Sampling::Exact => centered_exact(params, h, gauge)?,
        Sampling::MonteCarlo { n_exp, burn_in, seed } => {
            let batch = crate::sampler::metropolis_quantum(params, n_exp, burn_in, seed.wrapping_add(step as u64))?;
            centered_samples(params, h, &batch.indices(), gauge)?
        }
    };
    let part = match mode {
        Mode::RealTime => ForcePart::Im,
        Mode::ImaginaryTime => ForcePart::Re,
    };
    let (sol, force_norm) = match noise {
        Some((delta, rng)) if delta > 0.0 => {
            let sys = inject_noise(&cd.assemble(), delta, rng)?;
            let rhs = match part {
                ForcePart::Re => sys.force_re(),
                ForcePart::Im => sys.force_im(),
            };
            (solve_regularized(&sys, &rhs, reg)?, sys.diagnostics.force_norm)
        }
        _ => (cd.solve(part, reg)?, norm_c(&cd.force())),
    };
    let scale = match mode {
        Mode::RealTime => dt,
        Mode::ImaginaryTime => IMAGINARY_TIME_SIGN * dt,
    };
    let next = params.axpy(scale, &sol.x)?;
    Ok((
        next,
        StepReport { energy: cd.energy, force_norm, path: sol.path, min_eigenvalue_estimate: sol.min_eigenvalue_estimate },
    ))
}

/// `θ ← θ + δt · A⁻¹ Im f`.
pub fn step_real(params: &RbmParams, h: &SparseHamiltonian, cfg: &IntegratorConfig) -> Result<(RbmParams, StepReport)> {
    if cfg.mode != Mode::RealTime {
        return Err(Error::InvalidArgument("step_real needs a real-time configuration".into()));
    }
    cfg.validate()?;
    step_sampled::<rand_chacha::ChaCha20Rng>(params, h, Mode::RealTime, cfg.dt, &cfg.regularization, cfg.gauge, &cfg.sampling, 0, None)
}

/// `θ ← θ - δτ · A⁻¹ Re f` (energy descent).
pub fn step_imag(params: &RbmParams, h: &SparseHamiltonian, cfg: &IntegratorConfig) -> Result<(RbmParams, StepReport)> {
    if cfg.mode != Mode::ImaginaryTime {
        return Err(Error::InvalidArgument("step_imag needs an imaginary-time configuration".into()));
    }
    cfg.validate()?;
    step_sampled::<rand_chacha::ChaCha20Rng>(params, h, Mode::ImaginaryTime, cfg.dt, &cfg.regularization, cfg.gauge, &cfg.sampling, 0, None)
}

/// One row of the per-step diagnostics stream.
#[derive(Clone, Debug)]
pub struct DiagnosticsRow {
    pub step: usize,
    pub t: f64,
    pub energy: C64,
    pub force_norm: f64,
    pub path: SolverPath,
    pub min_eigenvalue_estimate: Option<f64>,
}

pub const DIAGNOSTICS_HEADER: &str = "step,t,energy_re,energy_im,force_norm,solver_path,min_eigenvalue_estimate";

impl DiagnosticsRow {
    fn new(step: usize, t: f64, r: &StepReport) -> Self {
        Self {
            step,
            t,
            energy: r.energy,
            force_norm: r.force_norm,
            path: r.path,
            min_eigenvalue_estimate: r.min_eigenvalue_estimate,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            format_float(self.t),
            format_float(self.energy.re),
            format_float(self.energy.im),
            format_float(self.force_norm),
            self.path.as_str(),
            self.min_eigenvalue_estimate.map(format_float).unwrap_or_else(|| "nan".into())
        )
    }
}

/// Solver-path counts of a run.
pub fn path_counts(rows: &[DiagnosticsRow]) -> BTreeMap<SolverPath, usize> {
    let mut m = BTreeMap::new();
    for r in rows {
        *m.entry(r.path).or_default() += 1;
    }
    m
}

#[derive(Debug)]
pub struct ImaginaryTimeRun {
    pub params: RbmParams,
    /// Energy before each step, then the final energy (`steps + 1` entries).
    pub energies: Vec<f64>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub sign: f64,
    pub failure: Option<Error>,
}

/// Runs `steps` imaginary-time steps; a numerical failure stops the run and is stored in `failure`.
pub fn run_imaginary_time(
    params0: &RbmParams,
    h: &SparseHamiltonian,
    dtau: f64,
    steps: usize,
    reg: &Regularization,
) -> Result<ImaginaryTimeRun> {
    run_imaginary_time_sampled(params0, h, dtau, steps, reg, &Sampling::Exact)
}

/// [`run_imaginary_time`] with each step's linear system drawn from `sampling`.
pub fn run_imaginary_time_sampled(
    params0: &RbmParams,
    h: &SparseHamiltonian,
    dtau: f64,
    steps: usize,
    reg: &Regularization,
    sampling: &Sampling,
) -> Result<ImaginaryTimeRun> {
    check_sites(params0, h)?;
    reg.validate()?;
    if !(dtau > 0.0) {
        return Err(Error::InvalidArgument(format!("dtau must be positive, got {dtau}")));
    }
    log::info!("imaginary-time update: theta <- theta {} dtau * A^-1 Re f", if IMAGINARY_TIME_SIGN < 0.0 { "-" } else { "+" });
    let mut params = params0.clone();
    let mut energies = Vec::with_capacity(steps + 1);
    let mut diagnostics = Vec::with_capacity(steps);
    let mut failure = None;
    for s in 0..steps {
        match step_sampled::<rand_chacha::ChaCha20Rng>(&params, h, Mode::ImaginaryTime, dtau, reg, PhaseGauge::default(), sampling, s, None) {
            Ok((next, rep)) => {
                energies.push(rep.energy.re);
                diagnostics.push(DiagnosticsRow::new(s, s as f64 * dtau, &rep));
                params = next;
            }
            Err(e) => {
                failure = Some(e.at_step(s));
                break;
            }
        }
    }
    if failure.is_none() {
        match params.build_statevector().and_then(|sv| expectation(&sv, h)) {
            Ok(e) => energies.push(e.re),
            Err(e) => failure = Some(e.at_step(steps)),
        }
    }
    Ok(ImaginaryTimeRun { params, energies, diagnostics, sign: IMAGINARY_TIME_SIGN, failure })
}

impl ImaginaryTimeRun {
    pub fn into_result(self) -> Result<Self> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(Self { failure: None, ..self }),
        }
    }
}

/// A named observable.
#[derive(Clone, Debug)]
pub struct Observable {
    pub name: String,
    pub op: SparseHamiltonian,
}

impl Observable {
    pub fn new(name: impl Into<String>, op: SparseHamiltonian) -> Self {
        Self { name: name.into(), op }
    }
}

#[derive(Debug)]
pub struct RealTimeRun {
    pub params: RbmParams,
    pub times: Vec<f64>,
    /// One series per observable, aligned with `times`.
    pub series: Vec<Vec<f64>>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub failure: Option<Error>,
}

impl RealTimeRun {
    pub fn into_result(self) -> Result<Self> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(Self { failure: None, ..self }),
        }
    }
}

fn observe(params: &RbmParams, observables: &[Observable]) -> Result<Vec<f64>> {
    let sv = params.build_statevector()?;
    observables.iter().map(|o| Ok(expectation(&sv, &o.op)?.re)).collect()
}

/// Real-time Euler run recording observables every `cfg.record_every` steps.
pub fn run_real_time(
    params0: &RbmParams,
    h: &SparseHamiltonian,
    cfg: &IntegratorConfig,
    observables: &[Observable],
    noise: Option<&NoiseConfig>,
) -> Result<RealTimeRun> {
    check_sites(params0, h)?;
    if cfg.mode != Mode::RealTime {
        return Err(Error::InvalidArgument("real-time run needs a real-time configuration".into()));
    }
    cfg.validate()?;
    let steps = cfg.steps()?;
    let mut rng = rng_from_seed(noise.map(|n| n.seed).unwrap_or(0));
    let delta = noise.map(|n| n.delta).unwrap_or(0.0);

    let mut params = params0.clone();
    let mut run = RealTimeRun { params: params.clone(), times: Vec::new(), series: vec![Vec::new(); observables.len()], diagnostics: Vec::new(), failure: None };
    let record = |run: &mut RealTimeRun, s: usize, p: &RbmParams| -> Result<()> {
        let vals = observe(p, observables)?;
        run.times.push(s as f64 * cfg.dt);
        for (ser, v) in run.series.iter_mut().zip(vals) {
            ser.push(v);
        }
        Ok(())
    };
    if let Err(e) = record(&mut run, 0, &params) {
        run.failure = Some(e.at_step(0));
        return Ok(run);
    }
    for s in 0..steps {
        let out = step_sampled(
            &params,
            h,
            Mode::RealTime,
            cfg.dt,
            &cfg.regularization,
            cfg.gauge,
            &cfg.sampling,
            s,
            Some((delta, &mut rng)),
        );
        match out {
            Ok((next, rep)) => {
                run.diagnostics.push(DiagnosticsRow::new(s, s as f64 * cfg.dt, &rep));
                params = next;
            }
            Err(e) => {
                run.failure = Some(e.at_step(s));
                break;
            }
        }
        if (s + 1) % cfg.record_every == 0 {
            if let Err(e) = record(&mut run, s + 1, &params) {
                run.failure = Some(e.at_step(s + 1));
                break;
            }
        }
    }
    run.params = params;
    Ok(run)
}

/// Gradient statistics for one system size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientRow {
    pub n: usize,
    pub n_var: usize,
    /// mean and minimum of `‖f‖ / N_var`
    pub mean_force: f64,
    pub min_force: f64,
    /// mean and minimum of `‖A⁻¹ f‖ / N_var`
    pub mean_update: f64,
    pub min_update: f64,
}

/// Per-size RNG seed so that each size's draws do not depend on the size list.
pub fn gradient_seed(seed: u64, n: usize) -> u64 {
    seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Gradient norms over `n_init` Gaussian initializations for each size in `sizes`.
pub fn gradient_scan<F>(
    model: F,
    sizes: &[usize],
    m: usize,
    n_init: usize,
    seed: u64,
    std_dev: f64,
    reg: &Regularization,
) -> Result<Vec<GradientRow>>
where
    F: Fn(usize) -> Result<SparseHamiltonian>,
{
    if n_init == 0 {
        return Err(Error::InvalidArgument("gradient scan needs at least one initialization".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n > GRADIENT_GUARD {
            return Err(Error::Guard(format!("gradient scan at N = {n}")));
        }
        let h = model(n)?;
        let mut rng = rng_from_seed(gradient_seed(seed, n));
        let (mut fs, mut xs) = (Vec::with_capacity(n_init), Vec::with_capacity(n_init));
        let mut n_var = 0;
        for _ in 0..n_init {
            let p = RbmParams::random(n, m, true, std_dev, &mut rng);
            n_var = p.n_var();
            let sys = assemble_chunked(&p, &weighted_exact_guarded(&p, &h, GRADIENT_GUARD)?, PhaseGauge::default());
            let xr = solve_regularized(&sys, &sys.force_re(), reg)?.x;
            let xi = solve_regularized(&sys, &sys.force_im(), reg)?.x;
            let upd = xr.iter().chain(&xi).map(|v| v * v).sum::<f64>().sqrt();
            fs.push(sys.diagnostics.force_norm / n_var as f64);
            xs.push(upd / n_var as f64);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        rows.push(GradientRow { n, n_var, mean_force: mean(&fs), min_force: min(&fs), mean_update: mean(&xs), min_update: min(&xs) });
    }
    Ok(rows)
}

/// Least-squares slope of `ln(value)` against `N`.
pub fn log_slope(points: &[(usize, f64)]) -> f64 {
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1.ln()).sum::<f64>() / k;
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1.ln() - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_heisenberg, build_tfi, Boundary};
    use crate::spinstate::{Pauli, PauliTerm};
    use crate::rng_from_seed;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn sys_from(a: Mat<f64>) -> TvmcLinearSystem {
        let n = a.nrows();
        TvmcLinearSystem {
            a,
            f: vec![C64::new(0.0, 0.0); n],
            energy: c(0.0),
            diagnostics: SystemDiagnostics { n_var: n, n_configs: 0, force_norm: 0.0, asymmetry: 0.0 },
        }
    }

    #[test]
    fn identity_solve() {
        let sys = sys_from(Mat::<f64>::identity(3, 3));
        let reg = Regularization { ridge: 0.0, ..Default::default() };
        let sol = solve_regularized(&sys, &[1.0, 0.0, 0.0], &reg).unwrap();
        assert_eq!(sol.x, vec![1.0, 0.0, 0.0]);
        assert_eq!(sol.path, SolverPath::Cholesky);
    }

    #[test]
    fn singular_falls_back_to_pseudo_inverse() {
        let mut a = Mat::<f64>::zeros(2, 2);
        a[(0, 0)] = 1.0;
        let reg = Regularization { ridge: 0.0, diag_shift: 0.0, svd_cutoff: 1e-8 };
        let sol = solve_regularized(&sys_from(a), &[1.0, 1.0], &reg).unwrap();
        assert_eq!(sol.path, SolverPath::EigenPseudoInverse);
        assert!((sol.x[0] - 1.0).abs() < 1e-15 && sol.x[1].abs() < 1e-15);
    }

    #[test]
    fn non_finite_system_is_rejected() {
        let mut a = Mat::<f64>::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(solve_regularized(&sys_from(a), &[1.0, 1.0], &Regularization::default()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn random_spd_residual() {
        let mut rng = rng_from_seed(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let b = Mat::<f64>::from_fn(30, 12, |_, _| normal.sample(&mut rng));
        let a = linalg::gram(b.as_ref());
        let rhs: Vec<f64> = (0..12).map(|_| normal.sample(&mut rng)).collect();
        let reg = Regularization { ridge: 1e-3, ..Default::default() };
        let sol = solve_regularized(&sys_from(a.clone()), &rhs, &reg).unwrap();
        let mut r = linalg::mul_vec(a.as_ref(), &sol.x);
        for i in 0..12 {
            r[i] += 1e-3 * sol.x[i] - rhs[i];
        }
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bn = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rn <= 1e-10 * bn);
    }

    #[test]
    fn single_spin_zero_params_system() {
        let h = build_tfi_one();
        let p = RbmParams::zeros(1, 0, true);
        let sys = build_system_exact(&p, &h).unwrap();
        assert!((sys.a[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(sys.f[0].norm() < 1e-15);
    }

    fn build_tfi_one() -> SparseHamiltonian {
        SparseHamiltonian::new(1, [PauliTerm::single(c(-1.0), 0, Pauli::X)]).unwrap()
    }

    #[test]
    fn kernel_and_explicit_paths_agree() {
        let mut rng = rng_from_seed(4);
        let h = build_tfi(4, 1.0, Boundary::Open).unwrap();
        let p = RbmParams::random(4, 8, true, 0.3, &mut rng);
        let cd = centered_exact(&p, &h, PhaseGauge::Free).unwrap();
        assert!(cd.prefers_kernel());
        for reg in [Regularization::default(), Regularization::imaginary_time()] {
            for part in [ForcePart::Re, ForcePart::Im] {
                let a = cd.solve_explicit(part, &reg).unwrap();
                let b = cd.solve_kernel(part, &reg).unwrap().unwrap();
                let scale = a.x.iter().map(|v| v.abs()).fold(0.0, f64::max);
                for (x, y) in a.x.iter().zip(&b.x) {
                    assert!((x - y).abs() <= 1e-7 * scale.max(1.0), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn chunked_and_direct_assembly_agree() {
        let mut rng = rng_from_seed(9);
        let h = build_heisenberg(5, 0.7, 0.3, Boundary::Periodic).unwrap();
        let p = RbmParams::random(5, 3, true, 0.4, &mut rng);
        let direct = centered_exact(&p, &h, PhaseGauge::Free).unwrap().assemble();
        let chunked = build_system_exact(&p, &h).unwrap();
        for i in 0..p.n_var() {
            assert!((direct.f[i] - chunked.f[i]).norm() < 1e-13);
            for j in 0..p.n_var() {
                assert!((direct.a[(i, j)] - chunked.a[(i, j)]).abs() < 1e-13);
                assert_eq!(chunked.a[(i, j)], chunked.a[(j, i)]);
            }
        }
    }

    #[test]
    fn stationary_point_does_not_move() {
        // |+> is the ground state of -X, so f = 0
        let h = build_tfi_one();
        let p = RbmParams::zeros(1, 1, true);
        let (q, _) = step_real(&p, &h, &IntegratorConfig::real_time(0.01, 0.01)).unwrap();
        for (a, b) in p.to_vector().iter().zip(q.to_vector()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn euler_step_is_linear_in_dt() {
        let mut rng = rng_from_seed(12);
        let h = build_tfi(3, 1.0, Boundary::Periodic).unwrap();
        let p = RbmParams::random(3, 3, true, 0.2, &mut rng);
        let d1 = step_real(&p, &h, &IntegratorConfig::real_time(1e-3, 1e-3)).unwrap().0.to_vector();
        let d2 = step_real(&p, &h, &IntegratorConfig::real_time(5e-4, 5e-4)).unwrap().0.to_vector();
        let v = p.to_vector();
        let n1: f64 = d1.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let n2: f64 = d2.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((n1 / n2 - 2.0).abs() < 0.1);
    }

    #[test]
    fn imaginary_time_finds_single_spin_ground_state() {
        let h = build_tfi_one();
        let mut rng = rng_from_seed(2);
        let p = RbmParams::random(1, 1, true, 0.5, &mut rng);
        let run = run_imaginary_time(&p, &h, 0.01, 1000, &Regularization::imaginary_time()).unwrap().into_result().unwrap();
        assert!((run.energies.last().unwrap() + 1.0).abs() < 1e-6);
        assert_eq!(run.sign, -1.0);
    }

    #[test]
    fn zero_noise_is_identity_and_noise_keeps_symmetry() {
        let mut rng = rng_from_seed(3);
        let h = build_tfi(3, 1.0, Boundary::Periodic).unwrap();
        let p = RbmParams::random(3, 2, true, 0.3, &mut rng);
        let sys = build_system_exact(&p, &h).unwrap();
        let same = inject_noise(&sys, 0.0, &mut rng).unwrap();
        assert_eq!(same.a, sys.a);
        assert_eq!(same.f, sys.f);
        let noisy = inject_noise(&sys, 1e-3, &mut rng).unwrap();
        for i in 0..sys.n_var() {
            for j in 0..sys.n_var() {
                assert_eq!(noisy.a[(i, j)], noisy.a[(j, i)]);
            }
        }
    }

    #[test]
    fn diagnostics_csv_row() {
        let row = DiagnosticsRow {
            step: 3,
            t: 0.5,
            energy: C64::new(-1.0, 0.0),
            force_norm: 2.0,
            path: SolverPath::Cholesky,
            min_eigenvalue_estimate: None,
        };
        assert_eq!(row.to_csv().split(',').count(), DIAGNOSTICS_HEADER.split(',').count());
        assert!(row.to_csv().starts_with("3,5.0000000000000000e-1,"));
    }
}

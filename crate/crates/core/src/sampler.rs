//! Born-rule and Metropolis sampling, Monte Carlo estimators and the classical TAFI autocorrelation study.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lattice::LatticeSpec;
use crate::rbm::RbmParams;
use crate::spinstate::{BasisConfig, SparseHamiltonian};
use crate::tvmc::{self, TvmcLinearSystem, EXACT_GUARD};
use crate::{format_float, rng_from_seed, Error, Result, C64};

/// Default temperature of the classical TAFI chain, in units of the Ising coupling.
pub const DEFAULT_TAFI_TEMPERATURE: f64 = 0.3;

/// Largest lattice for which dense transition matrices are built.
pub const TRANSITION_GUARD: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub configs: Vec<BasisConfig>,
    pub n_exp: usize,
    pub seed: u64,
    /// Fraction of accepted proposals, for Markov-chain batches.
    pub acceptance_rate: Option<f64>,
}

impl SampleBatch {
    pub fn indices(&self) -> Vec<usize> {
        self.configs.iter().map(BasisConfig::index).collect()
    }

    /// Empirical frequency of each basis index.
    pub fn histogram(&self, n_sites: usize) -> Vec<f64> {
        let mut h = vec![0.0; 1 << n_sites];
        for c in &self.configs {
            h[c.index()] += 1.0;
        }
        let n = self.configs.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }
}

fn exact_probabilities(params: &RbmParams) -> Result<Vec<f64>> {
    if params.n_visible() > EXACT_GUARD {
        return Err(Error::Guard(format!("exact sampling for {} visible spins", params.n_visible())));
    }
    Ok(params.build_statevector()?.probabilities())
}

/// I.i.d. draws from `|ψ(z)|²` by inverse CDF.
pub fn sample_exact(params: &RbmParams, n: usize, seed: u64) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let probs = exact_probabilities(params)?;
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cdf.push(acc);
    }
    let total = acc;
    let last_nonzero = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    let mut rng = rng_from_seed(seed);
    let nv = params.n_visible();
    let configs = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            let k = cdf.partition_point(|&c| c <= u).min(last_nonzero);
            BasisConfig::from_index(nv, k)
        })
        .collect();
    Ok(SampleBatch { configs, n_exp: n, seed, acceptance_rate: None })
}

/// Single-site-flip Metropolis chain on `|ψ|²`; one sample is kept after every sweep of `N` proposals.
pub fn metropolis_quantum(params: &RbmParams, n: usize, burn_in: usize, seed: u64) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let nv = params.n_visible();
    if nv >= usize::BITS as usize {
        return Err(Error::Guard(format!("{nv} visible spins")));
    }
    let mut rng = rng_from_seed(seed);
    let mut state: usize = rng.random_range(0..(1usize << nv));
    let mut lp = params.log_amplitude_index(state).re;
    let (mut accepted, mut proposed) = (0usize, 0usize);
    let mut configs = Vec::with_capacity(n);
    for sweep in 0..burn_in + n {
        for _ in 0..nv {
            let site = rng.random_range(0..nv);
            let cand = state ^ (1 << site);
            let lc = params.log_amplitude_index(cand).re;
            let ratio = (2.0 * (lc - lp)).exp();
            proposed += 1;
            if ratio >= 1.0 || rng.random::<f64>() < ratio {
                state = cand;
                lp = lc;
                accepted += 1;
            }
        }
        if sweep >= burn_in {
            configs.push(BasisConfig::from_index(nv, state));
        }
    }
    Ok(SampleBatch { configs, n_exp: n, seed, acceptance_rate: Some(accepted as f64 / proposed as f64) })
}

/// One-proposal transition matrix of [`metropolis_quantum`]: `P[a][b]` for a uniformly chosen site.
pub fn quantum_transition_matrix(params: &RbmParams) -> Result<Vec<Vec<f64>>> {
    let probs = exact_probabilities(params)?;
    Ok(metropolis_matrix(params.n_visible(), |a, b| if probs[a] > 0.0 { probs[b] / probs[a] } else { 1.0 }))
}

fn metropolis_matrix(n: usize, ratio: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    let dim = 1usize << n;
    let mut p = vec![vec![0.0; dim]; dim];
    for (a, row) in p.iter_mut().enumerate() {
        let mut stay = 1.0;
        for site in 0..n {
            let b = a ^ (1 << site);
            let t = ratio(a, b).min(1.0) / n as f64;
            row[b] += t;
            stay -= t;
        }
        row[a] += stay;
    }
    p
}

/// Monte Carlo estimate of `A`, `f` and `<H>` from a batch.
pub fn estimate_system_mc(params: &RbmParams, h: &SparseHamiltonian, batch: &SampleBatch) -> Result<TvmcLinearSystem> {
    tvmc::build_system_samples(params, h, &batch.indices(), tvmc::PhaseGauge::default())
}

/// Sample mean of the local estimator `Σ_z' O(z,z') ψ(z')/ψ(z)`.
pub fn estimate_observable(params: &RbmParams, op: &SparseHamiltonian, batch: &SampleBatch) -> Result<C64> {
    if batch.configs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if op.n_sites() != params.n_visible() {
        return Err(Error::DimensionMismatch { expected: params.n_visible(), got: op.n_sites() });
    }
    let mut sum = C64::new(0.0, 0.0);
    for z in &batch.configs {
        let k = z.index();
        let lk = params.log_amplitude_index(k);
        let mut row = Vec::new();
        op.for_each_in_row(k, |c, v| row.push((c, v)));
        for (c, v) in row {
            sum += v * (params.log_amplitude_index(c) - lk).exp();
        }
    }
    Ok(sum / batch.configs.len() as f64)
}

/// Change of `Σ_<ij> z_i z_j` when spin `site` flips.
fn flip_delta(spins: &[i8], neighbors: &[Vec<usize>], site: usize) -> f64 {
    let local: i32 = neighbors[site].iter().map(|&j| spins[j] as i32).sum();
    -2.0 * (spins[site] as i32 * local) as f64
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive and finite, got {t}")));
    }
    Ok(())
}

/// Single-spin-flip Metropolis on the antiferromagnetic Ising energy of `lattice`.
///
/// Random-site proposals, `N` per sweep, zero-energy moves always accepted, random initial
/// configuration. `observe` is evaluated after every sweep.
pub fn metropolis_classical<F>(lattice: &LatticeSpec, temperature: f64, n_sweeps: usize, seed: u64, observe: F) -> Result<Vec<f64>>
where
    F: Fn(&[i8]) -> f64,
{
    check_temperature(temperature)?;
    let neighbors = lattice.neighbors()?;
    let n = lattice.sites;
    let beta = 1.0 / temperature;
    let mut rng = rng_from_seed(seed);
    let mut spins: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    let mut series = Vec::with_capacity(n_sweeps);
    for _ in 0..n_sweeps {
        for _ in 0..n {
            let site = rng.random_range(0..n);
            let de = flip_delta(&spins, &neighbors, site);
            if de <= 0.0 || rng.random::<f64>() < (-beta * de).exp() {
                spins[site] = -spins[site];
            }
        }
        series.push(observe(&spins));
    }
    Ok(series)
}

/// Classical TAFI chain on an `L×L` triangular lattice recording `z(0,0)·z(L/2,L/2)` per sweep.
pub fn metropolis_classical_tafi(l: usize, temperature: f64, n_sweeps: usize, seed: u64) -> Result<Vec<f64>> {
    if l < 4 || l % 2 != 0 {
        return Err(Error::InvalidArgument(format!("L must be even and at least 4, got {l}")));
    }
    let lattice = LatticeSpec::triangular(l, l)?;
    let far = l / 2 + l * (l / 2);
    metropolis_classical(&lattice, temperature, n_sweeps, seed, |s| (s[0] * s[far]) as f64)
}

/// One-proposal transition matrix of [`metropolis_classical`] and its Boltzmann distribution.
pub fn classical_transition_matrix(lattice: &LatticeSpec, temperature: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    check_temperature(temperature)?;
    let n = lattice.sites;
    if n > TRANSITION_GUARD {
        return Err(Error::Guard(format!("transition matrix for {n} sites")));
    }
    let neighbors = lattice.neighbors()?;
    let spins = |k: usize| BasisConfig::from_index(n, k).spins();
    let dim = 1usize << n;
    let energy: Vec<f64> = (0..dim)
        .map(|k| {
            let s = spins(k);
            neighbors.iter().enumerate().map(|(i, nb)| nb.iter().map(|&j| (s[i] * s[j]) as f64).sum::<f64>()).sum::<f64>() / 2.0
        })
        .collect();
    let emin = energy.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = energy.iter().map(|e| (-(e - emin) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let pi = w.iter().map(|v| v / z).collect();
    let p = metropolis_matrix(n, |a, b| {
        let de = energy[b] - energy[a];
        if de <= 0.0 {
            1.0
        } else {
            (-de / temperature).exp()
        }
    });
    Ok((p, pi))
}

/// Normalized autocorrelation function and integrated autocorrelation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutocorrSeries {
    pub lags: Vec<usize>,
    pub values: Vec<f64>,
    /// `1 + 2 Σ_{τ≥1} C(τ)` summed up to the first negative value.
    pub tau_int: f64,
}

impl AutocorrSeries {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lag,C_normalized\n");
        for (l, v) in self.lags.iter().zip(&self.values) {
            s.push_str(&format!("{l},{}\n", format_float(*v)));
        }
        s
    }
}

pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<AutocorrSeries> {
    if series.len() < 10 * max_lag.max(1) {
        return Err(Error::InvalidArgument(format!(
            "series of length {} is shorter than 10 x max_lag = {}",
            series.len(),
            10 * max_lag.max(1)
        )));
    }
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let cov = |lag: usize| dev[..n - lag].iter().zip(&dev[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n - lag) as f64;
    let c0 = cov(0);
    if c0 == 0.0 {
        return Err(Error::ConstantSeries);
    }
    let lags: Vec<usize> = (0..=max_lag).collect();
    let mut values: Vec<f64> = lags.iter().map(|&l| cov(l) / c0).collect();
    values[0] = 1.0;
    let mut tau_int = 1.0;
    for &v in &values[1..] {
        if v < 0.0 {
            break;
        }
        tau_int += 2.0 * v;
    }
    Ok(AutocorrSeries { lags, values, tau_int })
}

/// `sweep,O` CSV of a Monte Carlo series.
pub fn series_to_csv(series: &[f64]) -> String {
    let mut s = String::from("sweep,O\n");
    for (i, v) in series.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, format_float(*v)));
    }
    s
}

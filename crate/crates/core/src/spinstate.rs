//! Statevectors over N spin-1/2 sites and Pauli-sum operators.
//!
//! Basis convention: `z_i = 1 - 2 * bit_i`, site 0 is the least-significant bit
//! of the basis index. Bit 0 is the +1 eigenstate of Pauli-Z.

use std::collections::BTreeMap;

use faer::{Mat, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

/// Largest N for which dense matrices are built.
pub const DENSE_GUARD: usize = 12;
/// Largest N for the eigendecomposition propagation cross-check.
pub const EIGEN_PROPAGATION_GUARD: usize = 10;
/// Largest time step accepted by [`propagate_exact`].
pub const MAX_EXACT_DT: f64 = 0.01;

const PAR_THRESHOLD: usize = 1 << 12;

/// `z_i` of basis index `index` as a float.
#[inline]
pub fn spin_of(index: usize, site: usize) -> f64 {
    if (index >> site) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// A computational basis configuration.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisConfig {
    bits: Vec<u8>,
}

impl BasisConfig {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn from_index(n: usize, index: usize) -> Self {
        Self { bits: (0..n).map(|i| ((index >> i) & 1) as u8).collect() }
    }

    /// Configuration from spin values `z_i = ±1`.
    pub fn from_spins(spins: &[i8]) -> Result<Self> {
        let bits = spins
            .iter()
            .map(|&s| match s {
                1 => Ok(0),
                -1 => Ok(1),
                _ => Err(Error::InvalidArgument(format!("spin value {s} is not ±1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self { bits })
    }

    pub fn n_sites(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Basis index. Panics if N does not fit in a `usize`.
    pub fn index(&self) -> usize {
        assert!(self.bits.len() <= usize::BITS as usize, "configuration too long for an index");
        self.bits.iter().enumerate().fold(0usize, |acc, (i, &b)| acc | ((b as usize) << i))
    }

    pub fn spin(&self, site: usize) -> i8 {
        1 - 2 * self.bits[site] as i8
    }

    pub fn spins(&self) -> Vec<i8> {
        self.bits.iter().map(|&b| 1 - 2 * b as i8).collect()
    }

    pub fn flipped(&self, site: usize) -> Self {
        let mut bits = self.bits.clone();
        bits[site] ^= 1;
        Self { bits }
    }
}

/// Complex amplitudes over all `2^N` basis configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n: usize,
    amps: Vec<C64>,
}

impl StateVector {
    pub fn new(n: usize, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != 1usize << n {
            return Err(Error::InvalidArgument(format!(
                "expected {} amplitudes for {n} sites, got {}",
                1usize << n,
                amps.len()
            )));
        }
        Ok(Self { n, amps })
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, amps: vec![C64::new(0.0, 0.0); 1 << n] }
    }

    pub fn basis(n: usize, index: usize) -> Self {
        let mut s = Self::zeros(n);
        s.amps[index] = C64::new(1.0, 0.0);
        s
    }

    /// `|+>^N`.
    pub fn plus(n: usize) -> Self {
        let a = (1.0 / (1u64 << n) as f64).sqrt();
        Self { n, amps: vec![C64::new(a, 0.0); 1 << n] }
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let nrm = self.norm();
        if !nrm.is_finite() {
            return Err(Error::NonFinite("statevector".into()));
        }
        if nrm == 0.0 {
            return Err(Error::Degenerate("zero-norm statevector".into()));
        }
        let inv = 1.0 / nrm;
        self.amps.iter_mut().for_each(|a| *a *= inv);
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self> {
        self.normalize()?;
        Ok(self)
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    /// `|<a|b>|^2 / (<a|a><b|b>)`.
    pub fn fidelity(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr() / (self.norm_sqr() * other.norm_sqr())
    }

    /// Norm of `self - e^{iφ} other` with the phase chosen to minimise it.
    pub fn phase_aligned_distance(&self, other: &StateVector) -> f64 {
        let ov = self.inner(other);
        let phase = if ov.norm() > 0.0 { ov.conj() / ov.norm() } else { C64::new(1.0, 0.0) };
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| (a - phase * b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn scale(&mut self, c: C64) {
        self.amps.iter_mut().for_each(|a| *a *= c);
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: C64, other: &StateVector) {
        for (a, b) in self.amps.iter_mut().zip(&other.amps) {
            *a += c * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    /// `self * other = phase * result` (`None` is the identity).
    pub fn mul(self, other: Pauli) -> (C64, Option<Pauli>) {
        use Pauli::*;
        let i = C64::new(0.0, 1.0);
        match (self, other) {
            (X, X) | (Y, Y) | (Z, Z) => (C64::new(1.0, 0.0), None),
            (X, Y) => (i, Some(Z)),
            (Y, X) => (-i, Some(Z)),
            (Y, Z) => (i, Some(X)),
            (Z, Y) => (-i, Some(X)),
            (Z, X) => (i, Some(Y)),
            (X, Z) => (-i, Some(Y)),
        }
    }
}

/// A coefficient times a tensor product of single-site Paulis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliTerm {
    pub coefficient: C64,
    pub ops: BTreeMap<usize, Pauli>,
}

impl PauliTerm {
    pub fn new(coefficient: C64, ops: impl IntoIterator<Item = (usize, Pauli)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (site, p) in ops {
            if map.insert(site, p).is_some() {
                return Err(Error::InvalidArgument(format!("site {site} repeated in Pauli term")));
            }
        }
        Ok(Self { coefficient, ops: map })
    }

    pub fn identity(coefficient: C64) -> Self {
        Self { coefficient, ops: BTreeMap::new() }
    }

    pub fn single(coefficient: C64, site: usize, p: Pauli) -> Self {
        Self { coefficient, ops: BTreeMap::from([(site, p)]) }
    }

    pub fn pair(coefficient: C64, a: (usize, Pauli), b: (usize, Pauli)) -> Result<Self> {
        Self::new(coefficient, [a, b])
    }

    /// Product of two terms using the single-site Pauli algebra.
    pub fn product(&self, other: &PauliTerm) -> PauliTerm {
        let mut coefficient = self.coefficient * other.coefficient;
        let mut ops = self.ops.clone();
        for (&site, &q) in &other.ops {
            match ops.remove(&site) {
                None => {
                    ops.insert(site, q);
                }
                Some(p) => {
                    let (phase, r) = p.mul(q);
                    coefficient *= phase;
                    if let Some(r) = r {
                        ops.insert(site, r);
                    }
                }
            }
        }
        PauliTerm { coefficient, ops }
    }

    fn masks(&self) -> (usize, usize, C64) {
        let (mut x, mut z, mut ny) = (0usize, 0usize, 0u32);
        for (&site, &p) in &self.ops {
            match p {
                Pauli::X => x |= 1 << site,
                Pauli::Z => z |= 1 << site,
                Pauli::Y => {
                    x |= 1 << site;
                    z |= 1 << site;
                    ny += 1;
                }
            }
        }
        let phase = match ny % 4 {
            0 => C64::new(1.0, 0.0),
            1 => C64::new(0.0, 1.0),
            2 => C64::new(-1.0, 0.0),
            _ => C64::new(0.0, -1.0),
        };
        (x, z, phase)
    }
}

/// Terms sharing the same flip pattern: `<b|H|b ^ flip>` collects their sign-weighted sum.
#[derive(Clone, Debug)]
struct FlipGroup {
    flip: usize,
    /// (sign mask, coefficient times i^{#Y})
    signed: Vec<(usize, C64)>,
}

/// A weighted sum of Pauli strings with precomputed connected-element tables.
#[derive(Clone, Debug)]
pub struct SparseHamiltonian {
    n: usize,
    terms: Vec<PauliTerm>,
    hermitian: bool,
    groups: Vec<FlipGroup>,
}

impl SparseHamiltonian {
    /// Builds the operator, merging duplicate Pauli strings and dropping zero terms.
    pub fn new(n: usize, terms: impl IntoIterator<Item = PauliTerm>) -> Result<Self> {
        if n > 62 {
            return Err(Error::Guard(format!("{n} sites exceeds the 62-site index limit")));
        }
        let mut merged: BTreeMap<Vec<(usize, Pauli)>, C64> = BTreeMap::new();
        for t in terms {
            if let Some((&site, _)) = t.ops.iter().next_back() {
                if site >= n {
                    return Err(Error::InvalidArgument(format!(
                        "Pauli term acts on site {site} of a {n}-site operator"
                    )));
                }
            }
            let key: Vec<(usize, Pauli)> = t.ops.iter().map(|(&s, &p)| (s, p)).collect();
            *merged.entry(key).or_insert(C64::new(0.0, 0.0)) += t.coefficient;
        }
        let terms: Vec<PauliTerm> = merged
            .into_iter()
            .filter(|(_, c)| *c != C64::new(0.0, 0.0))
            .map(|(ops, coefficient)| PauliTerm { coefficient, ops: ops.into_iter().collect() })
            .collect();
        let scale = terms.iter().map(|t| t.coefficient.norm()).fold(0.0, f64::max);
        let hermitian = terms.iter().all(|t| t.coefficient.im.abs() <= 1e-14 * scale.max(1.0));

        let mut by_flip: BTreeMap<usize, Vec<(usize, C64)>> = BTreeMap::new();
        for t in &terms {
            let (x, z, phase) = t.masks();
            by_flip.entry(x).or_default().push((z, t.coefficient * phase));
        }
        let groups = by_flip.into_iter().map(|(flip, signed)| FlipGroup { flip, signed }).collect();
        Ok(Self { n, terms, hermitian, groups })
    }

    pub fn zero(n: usize) -> Self {
        Self { n, terms: Vec::new(), hermitian: true, groups: Vec::new() }
    }

    /// A single Pauli string with unit coefficient, e.g. `[(0, X), (1, X)]`.
    pub fn pauli_string(n: usize, ops: &[(usize, Pauli)]) -> Result<Self> {
        Self::new(n, [PauliTerm::new(C64::new(1.0, 0.0), ops.iter().copied())?])
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    pub fn terms(&self) -> &[PauliTerm] {
        &self.terms
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Number of distinct off-diagonal flip patterns.
    pub fn n_offdiagonal(&self) -> usize {
        self.groups.iter().filter(|g| g.flip != 0).count()
    }

    pub fn sum(&self, other: &SparseHamiltonian) -> Result<Self> {
        self.check_sites(other.n)?;
        Self::new(self.n, self.terms.iter().chain(&other.terms).cloned())
    }

    pub fn scaled(&self, c: C64) -> Self {
        Self::new(
            self.n,
            self.terms.iter().map(|t| PauliTerm { coefficient: t.coefficient * c, ops: t.ops.clone() }),
        )
        .expect("scaling preserves validity")
    }

    pub fn adjoint(&self) -> Self {
        Self::new(
            self.n,
            self.terms.iter().map(|t| PauliTerm { coefficient: t.coefficient.conj(), ops: t.ops.clone() }),
        )
        .expect("adjoint preserves validity")
    }

    /// Operator product `self * other`.
    pub fn product(&self, other: &SparseHamiltonian) -> Result<Self> {
        self.check_sites(other.n)?;
        let mut out = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                out.push(a.product(b));
            }
        }
        Self::new(self.n, out)
    }

    fn check_sites(&self, n: usize) -> Result<()> {
        if self.n != n {
            return Err(Error::DimensionMismatch { expected: self.n, got: n });
        }
        Ok(())
    }

    /// Calls `f(col, <row|H|col>)` for every nonzero element of a row.
    #[inline]
    pub fn for_each_in_row(&self, row: usize, mut f: impl FnMut(usize, C64)) {
        for g in &self.groups {
            let col = row ^ g.flip;
            let mut v = C64::new(0.0, 0.0);
            for &(zmask, c) in &g.signed {
                if (col & zmask).count_ones() & 1 == 0 {
                    v += c;
                } else {
                    v -= c;
                }
            }
            if v != C64::new(0.0, 0.0) {
                f(col, v);
            }
        }
    }

    /// Diagonal element `<index|H|index>`.
    pub fn diagonal(&self, index: usize) -> C64 {
        let mut v = C64::new(0.0, 0.0);
        if let Some(g) = self.groups.iter().find(|g| g.flip == 0) {
            for &(zmask, c) in &g.signed {
                if (index & zmask).count_ones() & 1 == 0 {
                    v += c;
                } else {
                    v -= c;
                }
            }
        }
        v
    }

    /// Dense matrix, guarded to `N <= DENSE_GUARD`.
    pub fn to_dense(&self) -> Result<Mat<C64>> {
        if self.n > DENSE_GUARD {
            return Err(Error::Guard(format!("dense matrix for {} sites", self.n)));
        }
        let dim = 1usize << self.n;
        let mut m = Mat::<C64>::zeros(dim, dim);
        for r in 0..dim {
            self.for_each_in_row(r, |c, v| m[(r, c)] += v);
        }
        Ok(m)
    }

    /// `out = H psi` on raw amplitude slices.
    pub fn apply_into(&self, psi: &[C64], out: &mut [C64]) {
        let row = |r: usize| {
            let mut acc = C64::new(0.0, 0.0);
            self.for_each_in_row(r, |c, v| acc += v * psi[c]);
            acc
        };
        if out.len() >= PAR_THRESHOLD {
            out.par_iter_mut().enumerate().for_each(|(r, o)| *o = row(r));
        } else {
            out.iter_mut().enumerate().for_each(|(r, o)| *o = row(r));
        }
    }
}

/// `H |psi>` (unnormalized). The input is left untouched.
pub fn apply_operator(h: &SparseHamiltonian, psi: &StateVector) -> Result<StateVector> {
    h.check_sites(psi.n)?;
    let mut out = StateVector::zeros(psi.n);
    h.apply_into(&psi.amps, &mut out.amps);
    Ok(out)
}

/// `<psi|O|psi>`.
pub fn expectation(psi: &StateVector, o: &SparseHamiltonian) -> Result<C64> {
    let opsi = apply_operator(o, psi)?;
    Ok(psi.inner(&opsi))
}

/// Nonzero elements `<z|H|z'>` of the row of `z`, duplicates merged.
pub fn connected_states(h: &SparseHamiltonian, z: &BasisConfig) -> Result<Vec<(BasisConfig, C64)>> {
    h.check_sites(z.n_sites())?;
    let mut out = Vec::new();
    h.for_each_in_row(z.index(), |c, v| out.push((BasisConfig::from_index(h.n, c), v)));
    Ok(out)
}

/// One classic RK4 step of `i dψ/dt = H ψ` without renormalization.
pub fn rk4_step(h: &SparseHamiltonian, psi: &StateVector, dt: f64) -> StateVector {
    let minus_i = C64::new(0.0, -1.0);
    let deriv = |v: &[C64], out: &mut Vec<C64>| {
        h.apply_into(v, out);
        out.iter_mut().for_each(|a| *a *= minus_i);
    };
    let dim = psi.amps.len();
    let mut k = vec![C64::new(0.0, 0.0); dim];
    let mut tmp = vec![C64::new(0.0, 0.0); dim];
    let mut acc = psi.amps.clone();

    deriv(&psi.amps, &mut k);
    for i in 0..dim {
        acc[i] += k[i] * (dt / 6.0);
        tmp[i] = psi.amps[i] + k[i] * (dt / 2.0);
    }
    deriv(&tmp, &mut k);
    for i in 0..dim {
        acc[i] += k[i] * (dt / 3.0);
        tmp[i] = psi.amps[i] + k[i] * (dt / 2.0);
    }
    deriv(&tmp, &mut k);
    for i in 0..dim {
        acc[i] += k[i] * (dt / 3.0);
        tmp[i] = psi.amps[i] + k[i] * dt;
    }
    deriv(&tmp, &mut k);
    for i in 0..dim {
        acc[i] += k[i] * (dt / 6.0);
    }
    StateVector { n: psi.n, amps: acc }
}

/// Number of steps of size `dt` covering `t_max`; rejects non-commensurate grids.
pub fn step_count(t_max: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !(t_max >= 0.0) || !t_max.is_finite() {
        return Err(Error::InvalidArgument(format!("t_max must be non-negative, got {t_max}")));
    }
    let n = (t_max / dt).round();
    if (n * dt - t_max).abs() > 1e-9 * t_max.max(1.0) {
        return Err(Error::InvalidArgument(format!("t_max = {t_max} is not a multiple of dt = {dt}")));
    }
    Ok(n as usize)
}

fn check_exact_inputs(h: &SparseHamiltonian, psi0: &StateVector, dt: f64) -> Result<()> {
    h.check_sites(psi0.n)?;
    if !h.is_hermitian() {
        return Err(Error::NotHermitian);
    }
    if dt > MAX_EXACT_DT * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!("exact propagation needs dt <= {MAX_EXACT_DT}, got {dt}")));
    }
    Ok(())
}

/// RK4 with per-step renormalization; returns the state at every step, `t = 0` first.
pub fn propagate_exact(h: &SparseHamiltonian, psi0: &StateVector, t_max: f64, dt: f64) -> Result<Vec<StateVector>> {
    Ok(propagate_exact_recorded(h, psi0, t_max, dt, 1)?.into_iter().map(|(_, s)| s).collect())
}

/// As [`propagate_exact`] but keeps only every `record_every`-th state (and `t = 0`).
pub fn propagate_exact_recorded(
    h: &SparseHamiltonian,
    psi0: &StateVector,
    t_max: f64,
    dt: f64,
    record_every: usize,
) -> Result<Vec<(f64, StateVector)>> {
    check_exact_inputs(h, psi0, dt)?;
    let steps = step_count(t_max, dt)?;
    let every = record_every.max(1);
    let mut psi = psi0.clone().normalized()?;
    let mut out = vec![(0.0, psi.clone())];
    for s in 1..=steps {
        psi = rk4_step(h, &psi, dt);
        psi.normalize().map_err(|e| e.at_step(s))?;
        if s % every == 0 {
            out.push((s as f64 * dt, psi.clone()));
        }
    }
    Ok(out)
}

/// Eigenvalues (ascending) and eigenvectors (columns) of a hermitian operator.
pub fn eigh(h: &SparseHamiltonian) -> Result<(Vec<f64>, Mat<C64>)> {
    if !h.is_hermitian() {
        return Err(Error::NotHermitian);
    }
    let dense = h.to_dense()?;
    let evd = dense
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Solver(format!("eigendecomposition failed: {e:?}")))?;
    let vals = (0..dense.nrows()).map(|i| evd.S()[i].re).collect();
    Ok((vals, evd.U().to_owned()))
}

/// Lowest eigenvalue and a corresponding normalized eigenvector.
pub fn ground_state(h: &SparseHamiltonian) -> Result<(f64, StateVector)> {
    let (vals, vecs) = eigh(h)?;
    let amps = (0..vecs.nrows()).map(|r| vecs[(r, 0)]).collect();
    Ok((vals[0], StateVector::new(h.n, amps)?.normalized()?))
}

/// Exact `e^{-iHt} ψ0` through the eigendecomposition; cross-check path for small N.
pub fn propagate_eigen(h: &SparseHamiltonian, psi0: &StateVector, times: &[f64]) -> Result<Vec<StateVector>> {
    h.check_sites(psi0.n)?;
    if h.n > EIGEN_PROPAGATION_GUARD {
        return Err(Error::Guard(format!("eigen propagation for {} sites", h.n)));
    }
    let (vals, vecs) = eigh(h)?;
    let dim = vals.len();
    let coeffs: Vec<C64> =
        (0..dim).map(|k| (0..dim).map(|r| vecs[(r, k)].conj() * psi0.amps[r]).sum()).collect();
    times
        .iter()
        .map(|&t| {
            let phased: Vec<C64> =
                coeffs.iter().zip(&vals).map(|(c, &e)| c * C64::from_polar(1.0, -e * t)).collect();
            let amps = (0..dim).map(|r| (0..dim).map(|k| vecs[(r, k)] * phased[k]).sum()).collect();
            StateVector::new(h.n, amps)
        })
        .collect()
}

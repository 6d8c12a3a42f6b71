//! RBM wavefunction: amplitudes, log-derivatives and parameter (de)serialization.
//!
//! `ψ(z) = exp(Σ_i b_i z_i) Π_j cosh(θ_j(z))` with `θ_j(z) = m_j + Σ_i W_ij z_i`.
//! Constant prefactors are dropped since every consumer normalizes.

pub mod circuit;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::spinstate::{spin_of, BasisConfig, StateVector};
use crate::{Error, Result, C64};

/// Largest N accepted by [`RbmParams::build_statevector`].
pub const STATEVECTOR_GUARD: usize = 24;

const LOG_COSH_SWITCH: f64 = 20.0;

/// `ln cosh x`, switching to the asymptotic form for `|Re x| > 20`.
#[inline]
pub fn log_cosh(x: C64) -> C64 {
    if x.re.abs() > LOG_COSH_SWITCH {
        let s = if x.re > 0.0 { x } else { -x };
        s - std::f64::consts::LN_2 + (-2.0 * s).exp()
    } else {
        x.cosh().ln()
    }
}

/// `tanh x` evaluated without overflow.
#[inline]
pub fn tanh_stable(x: C64) -> C64 {
    let (s, sign) = if x.re >= 0.0 { (x, 1.0) } else { (-x, -1.0) };
    let e = (-2.0 * s).exp();
    sign * (1.0 - e) / (1.0 + e)
}

/// Visible biases, hidden biases and couplings of an RBM.
///
/// Couplings are stored as `weights[i + n * j]` for visible `i`, hidden `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbmParams {
    n: usize,
    m: usize,
    pub visible_bias: Vec<C64>,
    pub hidden_bias: Vec<C64>,
    pub weights: Vec<C64>,
    urbm: bool,
}

impl RbmParams {
    pub fn zeros(n: usize, m: usize, urbm: bool) -> Self {
        let z = C64::new(0.0, 0.0);
        Self { n, m, visible_bias: vec![z; n], hidden_bias: vec![z; m], weights: vec![z; n * m], urbm }
    }

    /// uRBM for `|+>^⊗n` with a nondegenerate tangent space.
    ///
    /// Hidden units `2p, 2p+1` share a bias `c` and couple to visible spin `i = p mod n` only,
    /// with `W = ±iπ/4`; `cosh(c + iwz) cosh(c - iwz) = (cosh 2c + cos 2w) / 2` does not depend
    /// on `z`. The coupling derivatives then carry `z_k z_i` terms whose coefficient is mostly
    /// a phase for `c = 1 + iπ/4` and a pure magnitude for `c = 1`; successive pairs on a site
    /// alternate between the two. With `W = 0` every log-derivative is at most linear in `z` and
    /// the force vanishes for any diagonal two-body coupling. An odd last unit stays uncoupled.
    pub fn plus(n: usize, m: usize) -> Self {
        use std::f64::consts::FRAC_PI_4;
        let mut p = Self::zeros(n, m, true);
        p.hidden_bias.fill(C64::new(1.0, 0.0));
        let n_eff = n.max(1);
        for pair in 0..m / 2 {
            let i = pair % n_eff;
            let c = if (pair / n_eff) % 2 == 0 { C64::new(1.0, FRAC_PI_4) } else { C64::new(1.0, 0.0) };
            for (unit, w) in [(2 * pair, FRAC_PI_4), (2 * pair + 1, -FRAC_PI_4)] {
                p.hidden_bias[unit] = c;
                p.weights[i + n * unit] = C64::new(0.0, w);
            }
        }
        p
    }

    pub fn new(
        n: usize,
        m: usize,
        visible_bias: Vec<C64>,
        hidden_bias: Vec<C64>,
        weights: Vec<C64>,
        urbm: bool,
    ) -> Result<Self> {
        if visible_bias.len() != n || hidden_bias.len() != m || weights.len() != n * m {
            return Err(Error::InvalidArgument("parameter block sizes do not match (N, M)".into()));
        }
        let p = Self { n, m, visible_bias, hidden_bias, weights, urbm };
        p.validate()?;
        Ok(p)
    }

    /// Every real component of the parameter vector drawn from `N(0, std_dev^2)`.
    pub fn random<R: Rng + ?Sized>(n: usize, m: usize, urbm: bool, std_dev: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std_dev).expect("finite standard deviation");
        let len = Self::n_var_for(n, m, urbm);
        let v: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
        Self::from_vector(n, m, urbm, &v).expect("length matches")
    }

    pub fn validate(&self) -> Result<()> {
        if self.urbm && self.weights.iter().any(|w| w.re != 0.0) {
            return Err(Error::InvalidArgument("unitary-coupled RBM requires purely imaginary couplings".into()));
        }
        let finite = |v: &[C64]| v.iter().all(|c| c.re.is_finite() && c.im.is_finite());
        if !(finite(&self.visible_bias) && finite(&self.hidden_bias) && finite(&self.weights)) {
            return Err(Error::NonFinite("RBM parameters".into()));
        }
        Ok(())
    }

    pub fn n_visible(&self) -> usize {
        self.n
    }

    pub fn n_hidden(&self) -> usize {
        self.m
    }

    pub fn is_urbm(&self) -> bool {
        self.urbm
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> C64 {
        self.weights[i + self.n * j]
    }

    pub fn n_var_for(n: usize, m: usize, urbm: bool) -> usize {
        2 * n + 2 * m + if urbm { 1 } else { 2 } * n * m
    }

    pub fn n_var(&self) -> usize {
        Self::n_var_for(self.n, self.m, self.urbm)
    }

    /// Flattening `[b^R, b^I, m^R, m^I, W^I, (W^R)]`, `i` fastest within the coupling blocks.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_var());
        v.extend(self.visible_bias.iter().map(|c| c.re));
        v.extend(self.visible_bias.iter().map(|c| c.im));
        v.extend(self.hidden_bias.iter().map(|c| c.re));
        v.extend(self.hidden_bias.iter().map(|c| c.im));
        v.extend(self.weights.iter().map(|c| c.im));
        if !self.urbm {
            v.extend(self.weights.iter().map(|c| c.re));
        }
        v
    }

    pub fn from_vector(n: usize, m: usize, urbm: bool, v: &[f64]) -> Result<Self> {
        let len = Self::n_var_for(n, m, urbm);
        if v.len() != len {
            return Err(Error::InvalidArgument(format!("parameter vector has length {}, expected {len}", v.len())));
        }
        let nm = n * m;
        let (br, rest) = v.split_at(n);
        let (bi, rest) = rest.split_at(n);
        let (mr, rest) = rest.split_at(m);
        let (mi, rest) = rest.split_at(m);
        let (wi, wr) = rest.split_at(nm);
        let zip = |re: &[f64], im: &[f64]| re.iter().zip(im).map(|(&a, &b)| C64::new(a, b)).collect::<Vec<_>>();
        let weights = if urbm { wi.iter().map(|&b| C64::new(0.0, b)).collect() } else { zip(wr, wi) };
        Ok(Self { n, m, visible_bias: zip(br, bi), hidden_bias: zip(mr, mi), weights, urbm })
    }

    /// Adds `step * delta` to the flattened parameters.
    pub fn axpy(&self, step: f64, delta: &[f64]) -> Result<Self> {
        let mut v = self.to_vector();
        if delta.len() != v.len() {
            return Err(Error::InvalidArgument("update length differs from the parameter count".into()));
        }
        v.iter_mut().zip(delta).for_each(|(a, d)| *a += step * d);
        let p = Self::from_vector(self.n, self.m, self.urbm, &v)?;
        p.validate()?;
        Ok(p)
    }

    /// `θ_j` for the configuration with basis index `index`.
    #[inline]
    pub fn hidden_angles_into(&self, index: usize, out: &mut [C64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let col = &self.weights[self.n * j..self.n * (j + 1)];
            let mut t = self.hidden_bias[j];
            for (i, w) in col.iter().enumerate() {
                t += w * spin_of(index, i);
            }
            *o = t;
        }
    }

    pub fn hidden_angles(&self, z: &BasisConfig) -> Result<Vec<C64>> {
        self.check(z)?;
        let mut out = vec![C64::new(0.0, 0.0); self.m];
        self.hidden_angles_into(z.index(), &mut out);
        Ok(out)
    }

    /// `ln ψ` given precomputed hidden angles.
    #[inline]
    pub fn log_amplitude_with(&self, index: usize, angles: &[C64]) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for (i, b) in self.visible_bias.iter().enumerate() {
            acc += b * spin_of(index, i);
        }
        for &t in angles {
            acc += log_cosh(t);
        }
        acc
    }

    pub fn log_amplitude_index(&self, index: usize) -> C64 {
        let mut angles = vec![C64::new(0.0, 0.0); self.m];
        self.hidden_angles_into(index, &mut angles);
        self.log_amplitude_with(index, &angles)
    }

    pub fn log_amplitude(&self, z: &BasisConfig) -> Result<C64> {
        self.check(z)?;
        Ok(self.log_amplitude_index(z.index()))
    }

    /// Unnormalized amplitude.
    pub fn amplitude(&self, z: &BasisConfig) -> Result<C64> {
        Ok(self.log_amplitude(z)?.exp())
    }

    /// `O_n(z) = ∂ ln ψ(z) / ∂θ_n` in the parameter-vector order.
    pub fn log_derivatives(&self, z: &BasisConfig) -> Result<Vec<C64>> {
        self.check(z)?;
        let mut out = vec![C64::new(0.0, 0.0); self.n_var()];
        self.log_derivatives_into(z.index(), &mut out);
        Ok(out)
    }

    pub fn log_derivatives_into(&self, index: usize, out: &mut [C64]) {
        let (n, m) = (self.n, self.m);
        let i1 = C64::new(0.0, 1.0);
        let mut angles = vec![C64::new(0.0, 0.0); m];
        self.hidden_angles_into(index, &mut angles);
        for i in 0..n {
            let z = spin_of(index, i);
            out[i] = C64::new(z, 0.0);
            out[n + i] = C64::new(0.0, z);
        }
        let off = 2 * n;
        for j in 0..m {
            let t = tanh_stable(angles[j]);
            out[off + j] = t;
            out[off + m + j] = i1 * t;
            for i in 0..n {
                let zt = t * spin_of(index, i);
                out[off + 2 * m + i + n * j] = i1 * zt;
                if !self.urbm {
                    out[off + 2 * m + n * m + i + n * j] = zt;
                }
            }
        }
    }

    /// `ln ψ` for every basis index.
    pub fn log_amplitudes(&self) -> Result<Vec<C64>> {
        if self.n > STATEVECTOR_GUARD {
            return Err(Error::Guard(format!("statevector for {} visible spins", self.n)));
        }
        let mut angles = vec![C64::new(0.0, 0.0); self.m];
        Ok((0..1usize << self.n)
            .map(|k| {
                self.hidden_angles_into(k, &mut angles);
                self.log_amplitude_with(k, &angles)
            })
            .collect())
    }

    /// Normalized statevector over all `2^N` configurations.
    pub fn build_statevector(&self) -> Result<StateVector> {
        let logs = self.log_amplitudes()?;
        statevector_from_logs(self.n, &logs)
    }

    fn check(&self, z: &BasisConfig) -> Result<()> {
        if z.n_sites() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: z.n_sites() });
        }
        Ok(())
    }

    pub fn to_snapshot(&self) -> RbmSnapshot {
        let grid = |f: fn(&C64) -> f64| -> Vec<Vec<f64>> {
            (0..self.n).map(|i| (0..self.m).map(|j| f(&self.weight(i, j))).collect()).collect()
        };
        RbmSnapshot {
            n: self.n,
            m: self.m,
            urbm: self.urbm,
            b_re: self.visible_bias.iter().map(|c| c.re).collect(),
            b_im: self.visible_bias.iter().map(|c| c.im).collect(),
            m_re: self.hidden_bias.iter().map(|c| c.re).collect(),
            m_im: self.hidden_bias.iter().map(|c| c.im).collect(),
            w_re: grid(|c| c.re),
            w_im: grid(|c| c.im),
        }
    }

    pub fn from_snapshot(s: &RbmSnapshot) -> Result<Self> {
        let (n, m) = (s.n, s.m);
        let rows_ok = |g: &Vec<Vec<f64>>| g.len() == n && g.iter().all(|r| r.len() == m);
        if s.b_re.len() != n || s.b_im.len() != n || s.m_re.len() != m || s.m_im.len() != m || !rows_ok(&s.w_re) || !rows_ok(&s.w_im)
        {
            return Err(Error::InvalidArgument("snapshot block sizes do not match (N, M)".into()));
        }
        let zip = |re: &[f64], im: &[f64]| re.iter().zip(im).map(|(&a, &b)| C64::new(a, b)).collect::<Vec<_>>();
        let mut weights = vec![C64::new(0.0, 0.0); n * m];
        for j in 0..m {
            for i in 0..n {
                weights[i + n * j] = C64::new(s.w_re[i][j], s.w_im[i][j]);
            }
        }
        Self::new(n, m, zip(&s.b_re, &s.b_im), zip(&s.m_re, &s.m_im), weights, s.urbm)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_snapshot()).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: RbmSnapshot =
            serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("parameter snapshot: {e}")))?;
        Self::from_snapshot(&snap)
    }
}

/// Normalized statevector from log-amplitudes.
pub fn statevector_from_logs(n: usize, logs: &[C64]) -> Result<StateVector> {
    let shift = logs.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        if shift == f64::NEG_INFINITY {
            return Err(Error::Degenerate("all amplitudes vanish".into()));
        }
        return Err(Error::NonFinite("log-amplitudes".into()));
    }
    let amps: Vec<C64> = logs.iter().map(|l| (l - shift).exp()).collect();
    let sv = StateVector::new(n, amps)?;
    if sv.amplitudes().iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
        return Err(Error::NonFinite("amplitudes".into()));
    }
    sv.normalized()
}

/// JSON parameter snapshot; couplings as `W[i][j]` (visible row, hidden column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbmSnapshot {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub urbm: bool,
    pub b_re: Vec<f64>,
    pub b_im: Vec<f64>,
    pub m_re: Vec<f64>,
    pub m_im: Vec<f64>,
    #[serde(rename = "W_re")]
    pub w_re: Vec<Vec<f64>>,
    #[serde(rename = "W_im")]
    pub w_im: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn plus_state_is_exact_and_not_stationary() {
        let h = crate::lattice::build_tfi(3, 1.0, crate::lattice::Boundary::Open).unwrap();
        for m in [2, 5, 6] {
            let p = RbmParams::plus(3, m);
            let f = p.build_statevector().unwrap().fidelity(&StateVector::plus(3));
            assert!((f - 1.0).abs() < 1e-14, "M = {m}: fidelity {f}");
            let sys = crate::tvmc::build_system_exact(&p, &h).unwrap();
            assert!(sys.force_im().iter().any(|v| v.abs() > 1e-3), "M = {m}");
        }
        let z = crate::tvmc::build_system_exact(&RbmParams::zeros(3, 6, true), &h).unwrap();
        assert!(z.force_im().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn zero_params_give_plus_state() {
        let p = RbmParams::zeros(3, 2, true);
        for k in 0..8 {
            assert_eq!(p.amplitude(&BasisConfig::from_index(3, k)).unwrap(), c(1.0, 0.0));
        }
        let sv = p.build_statevector().unwrap();
        assert!(sv.phase_aligned_distance(&StateVector::plus(3)) < 1e-15);
    }

    #[test]
    fn single_phase_bias() {
        let mut p = RbmParams::zeros(1, 0, true);
        p.visible_bias[0] = c(0.0, std::f64::consts::FRAC_PI_4);
        let sv = p.build_statevector().unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let expect = [C64::from_polar(s, std::f64::consts::FRAC_PI_4), C64::from_polar(s, -std::f64::consts::FRAC_PI_4)];
        for (a, e) in sv.amplitudes().iter().zip(expect) {
            assert!((a - e).norm() < 1e-15);
        }
    }

    #[test]
    fn log_cosh_is_continuous_at_switch() {
        for im in [0.0, 0.3, -1.1] {
            for re in [19.999_999, 20.000_001, -19.999_999, -20.000_001] {
                let x = c(re, im);
                let direct = x.cosh().ln();
                let d = (log_cosh(x) - direct).norm();
                // imaginary parts may differ by multiples of 2π
                let wrapped = ((log_cosh(x) - direct).im / (2.0 * std::f64::consts::PI)).round();
                assert!(d < 1e-12 || (d - (wrapped * 2.0 * std::f64::consts::PI).abs()).abs() < 1e-12);
            }
        }
        assert!(log_cosh(c(800.0, 0.0)).re.is_finite());
        assert!(tanh_stable(c(800.0, 0.2)).re == 1.0);
    }

    #[test]
    fn degenerate_state_is_rejected() {
        let logs = vec![c(f64::NEG_INFINITY, 0.0); 4];
        assert!(matches!(statevector_from_logs(2, &logs), Err(Error::Degenerate(_))));
    }

    #[test]
    fn urbm_rejects_real_couplings() {
        let w = vec![c(0.1, 0.2)];
        assert!(RbmParams::new(1, 1, vec![c(0.0, 0.0)], vec![c(0.0, 0.0)], w.clone(), true).is_err());
        assert!(RbmParams::new(1, 1, vec![c(0.0, 0.0)], vec![c(0.0, 0.0)], w, false).is_ok());
    }

    #[test]
    fn zero_params_derivatives() {
        let p = RbmParams::zeros(3, 2, true);
        let z = BasisConfig::from_index(3, 5);
        let o = p.log_derivatives(&z).unwrap();
        for i in 0..3 {
            assert_eq!(o[i], c(z.spin(i) as f64, 0.0));
        }
        for j in 0..4 {
            assert_eq!(o[6 + j], c(0.0, 0.0));
        }
    }

    #[test]
    fn coupling_derivative_is_spin_times_hidden_derivative() {
        let mut rng = rng_from_seed(3);
        let p = RbmParams::random(4, 3, true, 0.5, &mut rng);
        for k in 0..16 {
            let z = BasisConfig::from_index(4, k);
            let o = p.log_derivatives(&z).unwrap();
            for j in 0..3 {
                for i in 0..4 {
                    let w = o[2 * 4 + 2 * 3 + i + 4 * j];
                    assert!((w - o[2 * 4 + 3 + j] * z.spin(i) as f64).norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn gauge_phase_on_first_visible_bias() {
        let mut rng = rng_from_seed(11);
        let p = RbmParams::random(3, 2, true, 0.4, &mut rng);
        let phi = 0.37;
        let mut q = p.clone();
        q.visible_bias[0] += c(0.0, phi);
        for k in 0..8 {
            let z = BasisConfig::from_index(3, k);
            let ratio = q.amplitude(&z).unwrap() / p.amplitude(&z).unwrap();
            let expect = C64::from_polar(1.0, phi * z.spin(0) as f64);
            assert!((ratio - expect).norm() < 1e-13);
        }
    }

    #[test]
    fn snapshot_json_round_trip_is_bit_exact() {
        let mut rng = rng_from_seed(5);
        for urbm in [true, false] {
            let p = RbmParams::random(3, 2, urbm, 1.0 / 3.0, &mut rng);
            let back = RbmParams::from_json(&p.to_json()).unwrap();
            assert_eq!(back, p);
            let s: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
            assert_eq!(s["W_re"].as_array().unwrap().len(), 3);
            assert_eq!(s["N"], 3);
        }
        assert!(RbmParams::from_json(r#"{"N":1}"#).is_err());
    }

    fn arb_params() -> impl Strategy<Value = (RbmParams, usize)> {
        (1usize..=4, 0usize..=3, any::<bool>(), any::<u64>()).prop_map(|(n, m, urbm, seed)| {
            let mut rng = rng_from_seed(seed);
            (RbmParams::random(n, m, urbm, 0.7, &mut rng), (seed as usize) % (1 << n))
        })
    }

    proptest! {
        #[test]
        fn vector_round_trip((p, _) in arb_params()) {
            let v = p.to_vector();
            prop_assert_eq!(v.len(), p.n_var());
            let q = RbmParams::from_vector(p.n_visible(), p.n_hidden(), p.is_urbm(), &v).unwrap();
            prop_assert_eq!(q, p);
        }

        #[test]
        fn derivatives_match_central_differences((p, k) in arb_params()) {
            let z = BasisConfig::from_index(p.n_visible(), k);
            let o = p.log_derivatives(&z).unwrap();
            let v = p.to_vector();
            let h = 1e-5;
            for n in 0..v.len() {
                let mut vp = v.clone();
                vp[n] += h;
                let mut vm = v.clone();
                vm[n] -= h;
                let lp = RbmParams::from_vector(p.n_visible(), p.n_hidden(), p.is_urbm(), &vp).unwrap().log_amplitude(&z).unwrap();
                let lm = RbmParams::from_vector(p.n_visible(), p.n_hidden(), p.is_urbm(), &vm).unwrap().log_amplitude(&z).unwrap();
                // log of the ratio avoids branch jumps of the complex logarithm
                let fd = (lp - lm).exp().ln() / (2.0 * h);
                let rel = (fd - o[n]).norm() / o[n].norm().max(1e-3);
                prop_assert!(rel <= 1e-6, "param {} fd {} analytic {}", n, fd, o[n]);
            }
        }
    }
}

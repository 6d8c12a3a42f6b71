//! Statevector emulation of the RBM preparation circuit.
//!
//! Qubit layout: visible spins are qubits `0..N`, the recycled ancilla is qubit `N`.

use crate::rbm::RbmParams;
use crate::spinstate::{spin_of, StateVector};
use crate::{Error, Result, C64};

/// Largest hidden-unit count for [`ensemble_decompose`].
pub const ENSEMBLE_GUARD: usize = 12;

pub type Gate = [[C64; 2]; 2];

/// Single-qubit rotation `Rz(rz_angle) · Ry(ry_angle)` with `G|0> = e^{bias Z}|+> / c`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationGate {
    pub ry_angle: f64,
    pub rz_angle: f64,
    pub matrix: Gate,
}

impl RotationGate {
    pub fn apply_to_zero(&self) -> [C64; 2] {
        [self.matrix[0][0], self.matrix[1][0]]
    }
}

fn ry(a: f64) -> Gate {
    let (s, c) = (a / 2.0).sin_cos();
    [[C64::new(c, 0.0), C64::new(-s, 0.0)], [C64::new(s, 0.0), C64::new(c, 0.0)]]
}

fn rz(a: f64) -> Gate {
    let z = C64::new(0.0, 0.0);
    [[C64::from_polar(1.0, -a / 2.0), z], [z, C64::from_polar(1.0, a / 2.0)]]
}

fn matmul2(a: &Gate, b: &Gate) -> Gate {
    let mut out = [[C64::new(0.0, 0.0); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
        }
    }
    out
}

/// Returns the gate and the normalization `c = sqrt(cosh(2 Re bias))`.
pub fn rotation_gate(bias: C64) -> (RotationGate, f64) {
    let br = bias.re;
    let norm = (2.0 * br).cosh().sqrt();
    // cos(a/2) ∝ e^{br}, sin(a/2) ∝ e^{-br}
    let ry_angle = 2.0 * (-br).exp().atan2(br.exp());
    let rz_angle = -2.0 * bias.im;
    let matrix = matmul2(&rz(rz_angle), &ry(ry_angle));
    (RotationGate { ry_angle, rz_angle, matrix }, norm)
}

/// Applies a single-qubit gate to `qubit` of a raw amplitude array.
pub fn apply_gate(amps: &mut [C64], qubit: usize, g: &Gate) {
    let bit = 1usize << qubit;
    for k in 0..amps.len() {
        if k & bit == 0 {
            let (a0, a1) = (amps[k], amps[k | bit]);
            amps[k] = g[0][0] * a0 + g[0][1] * a1;
            amps[k | bit] = g[1][0] * a0 + g[1][1] * a1;
        }
    }
}

/// Diagonal of `exp(i Σ_i w_i z_i h)` over `N` visible qubits and the ancilla (qubit `N`).
pub fn entangler_unitary(w_column: &[C64]) -> Result<Vec<C64>> {
    if w_column.iter().any(|w| w.re != 0.0) {
        return Err(Error::InvalidArgument("entangler couplings must be purely imaginary".into()));
    }
    let n = w_column.len();
    Ok((0..1usize << (n + 1))
        .map(|k| {
            let h = spin_of(k, n);
            let phase: f64 = w_column.iter().enumerate().map(|(i, w)| w.im * spin_of(k, i) * h).sum();
            C64::from_polar(1.0, phase)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct PreparationReport {
    pub state: StateVector,
    pub ancilla_success_probs: Vec<f64>,
    pub total_success: f64,
}

/// Emulates the N+1 qubit circuit with one recycled ancilla and `|+>` post-selection.
pub fn prepare_recycled(params: &RbmParams) -> Result<PreparationReport> {
    if !params.is_urbm() {
        return Err(Error::InvalidArgument("circuit preparation requires a unitary-coupled RBM".into()));
    }
    let (n, m) = (params.n_visible(), params.n_hidden());
    let mut visible = vec![C64::new(0.0, 0.0); 1 << n];
    visible[0] = C64::new(1.0, 0.0);
    for i in 0..n {
        let (g, _) = rotation_gate(params.visible_bias[i]);
        apply_gate(&mut visible, i, &g.matrix);
    }

    let dim_v = 1usize << n;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut probs = Vec::with_capacity(m);
    for j in 0..m {
        // ancilla starts in |0>, so the joint register is visible ⊗ |0>
        let mut joint = vec![C64::new(0.0, 0.0); 2 * dim_v];
        joint[..dim_v].copy_from_slice(&visible);
        let (g, _) = rotation_gate(params.hidden_bias[j]);
        apply_gate(&mut joint, n, &g.matrix);
        let column: Vec<C64> = (0..n).map(|i| params.weight(i, j)).collect();
        let diag = entangler_unitary(&column)?;
        joint.iter_mut().zip(&diag).for_each(|(a, d)| *a *= d);
        // <+|_ancilla
        for k in 0..dim_v {
            visible[k] = (joint[k] + joint[k | dim_v]) * inv_sqrt2;
        }
        let p: f64 = visible.iter().map(|a| a.norm_sqr()).sum();
        if !(p > 0.0) {
            return Err(Error::Degenerate(format!("ancilla projection {j} has zero probability")));
        }
        let s = 1.0 / p.sqrt();
        visible.iter_mut().for_each(|a| *a *= s);
        probs.push(p);
    }
    let total_success = probs.iter().product();
    Ok(PreparationReport { state: StateVector::new(n, visible)?, ancilla_success_probs: probs, total_success })
}

/// Probabilistic real-coupling block for `exp(w Z⊗Z)`.
#[derive(Clone, Debug)]
pub struct RealCoupling {
    pub theta1: f64,
    pub theta2: f64,
    /// Post-selected amplitude operator on the (visible, hidden) pair, diagonal in `z`.
    pub amplitude_kernel: [[f64; 4]; 4],
    /// Ancilla-|1> probability conditioned on each pair configuration (diagonal).
    pub kernel: [[f64; 4]; 4],
    /// Success probability for the pair prepared in `|++>`.
    pub success_prob: f64,
}

/// Emulates the parity-controlled ancilla rotations and post-selection on ancilla `|1>`.
///
/// The conditional success probabilities form `e^{w z_v z_h - |w|}`, i.e. the
/// Boltzmann weight `e^{w Z⊗Z}` up to a constant; the branch amplitudes carry
/// its square root.
pub fn real_w_coupling(w: f64) -> RealCoupling {
    let theta1 = 2.0 * (w - w.abs()).exp().sqrt().asin();
    let theta2 = 2.0 * (-w - w.abs()).exp().sqrt().asin();
    // register: qubit 0 visible, qubit 1 hidden, qubit 2 ancilla
    let mut amplitude_kernel = [[0.0; 4]; 4];
    let mut kernel = [[0.0; 4]; 4];
    let mut success = 0.0;
    for pair in 0..4usize {
        let mut reg = [C64::new(0.0, 0.0); 8];
        reg[pair] = C64::new(1.0, 0.0);
        let parity = spin_of(pair, 0) * spin_of(pair, 1);
        let g = ry(if parity > 0.0 { theta1 } else { theta2 });
        let mut sub = [reg[pair], reg[pair | 4]];
        sub = [g[0][0] * sub[0] + g[0][1] * sub[1], g[1][0] * sub[0] + g[1][1] * sub[1]];
        reg[pair] = sub[0];
        reg[pair | 4] = sub[1];
        let amp = reg[pair | 4];
        amplitude_kernel[pair][pair] = amp.re;
        kernel[pair][pair] = amp.norm_sqr();
        success += 0.25 * amp.norm_sqr();
    }
    RealCoupling { theta1, theta2, amplitude_kernel, kernel, success_prob: success }
}

/// One term of the hidden-spin ensemble expansion.
#[derive(Clone, Debug)]
pub struct EnsembleTerm {
    /// Hidden projections `s_j = ±1` (X basis).
    pub hidden: Vec<i8>,
    pub weight: C64,
    /// Normalized component; `|+>^N` placeholder when the component vanishes (weight 0).
    pub state: StateVector,
}

/// Expands the state over hidden X-basis projections; `Σ weight · state` reconstructs it.
///
/// `R_+(x) = cosh x`, `R_-(x) = sinh x`, and the `s_j` component of hidden unit `j`
/// is `cos φ_j(z)` for `+` and `i sin φ_j(z)` for `-`, with `φ_j = m^I_j + Σ_i W^I_ij z_i`.
pub fn ensemble_decompose(params: &RbmParams) -> Result<Vec<EnsembleTerm>> {
    if !params.is_urbm() {
        return Err(Error::InvalidArgument("ensemble expansion requires a unitary-coupled RBM".into()));
    }
    let (n, m) = (params.n_visible(), params.n_hidden());
    if m > ENSEMBLE_GUARD {
        return Err(Error::Guard(format!("ensemble expansion with {m} hidden units")));
    }
    let dim = 1usize << n;
    let visible: Vec<C64> = (0..dim)
        .map(|k| {
            let mut acc = C64::new(0.0, 0.0);
            for (i, b) in params.visible_bias.iter().enumerate() {
                acc += b * spin_of(k, i);
            }
            acc.exp()
        })
        .collect();
    let phi: Vec<Vec<f64>> = (0..dim)
        .map(|k| {
            (0..m)
                .map(|j| params.hidden_bias[j].im + (0..n).map(|i| params.weight(i, j).im * spin_of(k, i)).sum::<f64>())
                .collect()
        })
        .collect();
    let full: Vec<C64> = (0..dim)
        .map(|k| visible[k] * (0..m).map(|j| C64::new(params.hidden_bias[j].re, phi[k][j]).cosh()).product::<C64>())
        .collect();
    let full_norm = full.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    if !(full_norm > 0.0) {
        return Err(Error::Degenerate("all amplitudes vanish".into()));
    }

    let mut out = Vec::with_capacity(1 << m);
    for mask in 0..1usize << m {
        let hidden: Vec<i8> = (0..m).map(|j| if (mask >> j) & 1 == 0 { 1 } else { -1 }).collect();
        let r: f64 = (0..m)
            .map(|j| {
                let x = params.hidden_bias[j].re;
                if hidden[j] > 0 {
                    x.cosh()
                } else {
                    x.sinh()
                }
            })
            .product();
        let comp: Vec<C64> = (0..dim)
            .map(|k| {
                let mut a = visible[k];
                for j in 0..m {
                    a *= if hidden[j] > 0 { C64::new(phi[k][j].cos(), 0.0) } else { C64::new(0.0, phi[k][j].sin()) };
                }
                a
            })
            .collect();
        let comp_norm = comp.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        let (weight, state) = if comp_norm > 0.0 {
            let s = 1.0 / comp_norm;
            (C64::new(r * comp_norm / full_norm, 0.0), StateVector::new(n, comp.into_iter().map(|a| a * s).collect())?)
        } else {
            (C64::new(0.0, 0.0), StateVector::plus(n))
        };
        out.push(EnsembleTerm { hidden, weight, state });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn is_unitary(g: &Gate) -> bool {
        let p = matmul2(&[[g[0][0].conj(), g[1][0].conj()], [g[0][1].conj(), g[1][1].conj()]], g);
        (p[0][0] - c(1.0, 0.0)).norm() < 1e-14
            && (p[1][1] - c(1.0, 0.0)).norm() < 1e-14
            && p[0][1].norm() < 1e-14
            && p[1][0].norm() < 1e-14
    }

    #[test]
    fn rotation_gate_examples() {
        let (g, norm) = rotation_gate(c(0.0, 0.0));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let out = g.apply_to_zero();
        assert!((out[0] - c(s, 0.0)).norm() < 1e-15 && (out[1] - c(s, 0.0)).norm() < 1e-15);
        assert_eq!(norm, 1.0);

        let phi = 0.4;
        let (g, norm) = rotation_gate(c(0.0, phi));
        assert!((norm - 1.0).abs() < 1e-15);
        let out = g.apply_to_zero();
        assert!((out[0] - C64::from_polar(s, phi)).norm() < 1e-15);
        assert!((out[1] - C64::from_polar(s, -phi)).norm() < 1e-15);

        for bias in [c(0.3, 0.0), c(-0.8, 1.7), c(2.5, -0.2)] {
            let (g, norm) = rotation_gate(bias);
            assert!(is_unitary(&g.matrix));
            let out = g.apply_to_zero();
            // direct 2-vector arithmetic: e^{bias Z}|+> = (e^{bias}, e^{-bias}) / sqrt(2)
            let target = [bias.exp() * s / norm, (-bias).exp() * s / norm];
            assert!((out[0] - target[0]).norm() < 1e-12 && (out[1] - target[1]).norm() < 1e-12);
        }
        assert!(((rotation_gate(c(0.3, 0.0)).1) - 0.6f64.cosh().sqrt()).abs() < 1e-15);
    }

    #[test]
    fn entangler_examples() {
        let id = entangler_unitary(&[c(0.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert!(id.iter().all(|d| *d == c(1.0, 0.0)));

        let w = std::f64::consts::FRAC_PI_4;
        let d = entangler_unitary(&[c(0.0, w)]).unwrap();
        let expect = [C64::from_polar(1.0, w), C64::from_polar(1.0, -w), C64::from_polar(1.0, -w), C64::from_polar(1.0, w)];
        for (a, e) in d.iter().zip(expect) {
            assert!((a - e).norm() < 1e-15);
        }
        assert!(entangler_unitary(&[c(0.1, 0.2)]).is_err());
    }

    #[test]
    fn entangler_is_product_of_pair_phases() {
        let col = [c(0.0, 0.3), c(0.0, -1.2), c(0.0, 0.77)];
        let d = entangler_unitary(&col).unwrap();
        for k in 0..16usize {
            let h = if (k >> 3) & 1 == 0 { 1.0 } else { -1.0 };
            let mut v = c(1.0, 0.0);
            for i in 0..3 {
                let z = if (k >> i) & 1 == 0 { 1.0 } else { -1.0 };
                v *= C64::new(0.0, col[i].im * z * h).exp();
            }
            assert!((d[k] - v).norm() < 1e-14);
        }
    }

    #[test]
    fn zero_params_prepare_plus_with_unit_success() {
        let p = RbmParams::zeros(3, 2, true);
        let rep = prepare_recycled(&p).unwrap();
        assert!(rep.state.phase_aligned_distance(&StateVector::plus(3)) < 1e-15);
        assert!(rep.ancilla_success_probs.iter().all(|&q| (q - 1.0).abs() < 1e-15));
    }

    #[test]
    fn imaginary_params_match_analytic_state() {
        let mut rng = rng_from_seed(8);
        let mut p = RbmParams::random(3, 2, true, 0.8, &mut rng);
        p.visible_bias.iter_mut().for_each(|b| b.re = 0.0);
        p.hidden_bias.iter_mut().for_each(|b| b.re = 0.0);
        let rep = prepare_recycled(&p).unwrap();
        assert!(rep.ancilla_success_probs.iter().all(|&q| q > 0.0 && q < 1.0));
        assert!(rep.state.fidelity(&p.build_statevector().unwrap()) > 1.0 - 1e-12);
    }

    #[test]
    fn real_coupling_examples() {
        let z = real_w_coupling(0.0);
        assert!((z.theta1 - std::f64::consts::PI).abs() < 1e-15 && (z.theta2 - std::f64::consts::PI).abs() < 1e-15);
        assert!((z.success_prob - 1.0).abs() < 1e-15);
        for k in 0..4 {
            assert!((z.kernel[k][k] - 1.0).abs() < 1e-15);
        }

        let a = real_w_coupling(0.7);
        let b = real_w_coupling(-0.7);
        assert_eq!((a.theta1, a.theta2), (b.theta2, b.theta1));
    }

    #[test]
    fn ensemble_trivial_cases() {
        let p = RbmParams::zeros(2, 0, true);
        let t = ensemble_decompose(&p).unwrap();
        assert_eq!(t.len(), 1);
        assert!((t[0].weight - c(1.0, 0.0)).norm() < 1e-15);

        let mut rng = rng_from_seed(2);
        let mut p = RbmParams::random(2, 1, true, 0.5, &mut rng);
        p.hidden_bias[0].re = 0.0;
        let t = ensemble_decompose(&p).unwrap();
        assert!(t[0].weight.norm() > 0.0);
        assert_eq!(t[1].weight, c(0.0, 0.0));
    }
}

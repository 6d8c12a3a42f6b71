//! Dense reference implementations shared by the integration tests.
//!
//! Nothing here goes through the crate's sparse row tables, log-cosh helpers or derivative
//! formulas: operators are built as explicit Kronecker products and amplitudes are evaluated
//! with plain complex arithmetic.

#![allow(dead_code)]

use urbm_core::rbm::RbmParams;
use urbm_core::spinstate::{Pauli, SparseHamiltonian};
use urbm_core::tvmc::PhaseGauge;
use urbm_core::C64;

pub type Dense = Vec<Vec<C64>>;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn pauli_2x2(p: Option<Pauli>) -> [[C64; 2]; 2] {
    let (o, l, i) = (c(0.0, 0.0), c(1.0, 0.0), c(0.0, 1.0));
    match p {
        None => [[l, o], [o, l]],
        Some(Pauli::X) => [[o, l], [l, o]],
        Some(Pauli::Y) => [[o, -i], [i, o]],
        Some(Pauli::Z) => [[l, o], [o, -l]],
    }
}

/// Dense matrix of a Pauli sum; site `k` is bit `k` of the basis index, bit 0 is spin up.
pub fn kron_dense(h: &SparseHamiltonian) -> Dense {
    let n = h.n_sites();
    let dim = 1usize << n;
    let mut out = vec![vec![c(0.0, 0.0); dim]; dim];
    for term in h.terms() {
        let mats: Vec<[[C64; 2]; 2]> = (0..n).map(|k| pauli_2x2(term.ops.get(&k).copied())).collect();
        for (r, row) in out.iter_mut().enumerate() {
            for (col, v) in row.iter_mut().enumerate() {
                let mut e = term.coefficient;
                for (k, m) in mats.iter().enumerate() {
                    e *= m[(r >> k) & 1][(col >> k) & 1];
                    if e == c(0.0, 0.0) {
                        break;
                    }
                }
                *v += e;
            }
        }
    }
    out
}

pub fn dense_apply(m: &Dense, v: &[C64]) -> Vec<C64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// `<v|M|v> / <v|v>`.
pub fn dense_expectation(m: &Dense, v: &[C64]) -> C64 {
    let mv = dense_apply(m, v);
    let num: C64 = v.iter().zip(&mv).map(|(a, b)| a.conj() * b).sum();
    let den: f64 = v.iter().map(|a| a.norm_sqr()).sum();
    num / den
}

/// Unnormalized amplitudes `e^{Σ b z} Π_j 2 cosh(m_j + Σ_i W_ij z_i)` for every basis index.
pub fn direct_amplitudes(p: &RbmParams) -> Vec<C64> {
    let n = p.n_visible();
    (0..1usize << n)
        .map(|idx| {
            let z: Vec<f64> = (0..n).map(|k| if (idx >> k) & 1 == 0 { 1.0 } else { -1.0 }).collect();
            let mut log = c(0.0, 0.0);
            for (b, zi) in p.visible_bias.iter().zip(&z) {
                log += b * zi;
            }
            let mut amp = log.exp();
            for (j, m) in p.hidden_bias.iter().enumerate() {
                let mut theta = *m;
                for (i, zi) in z.iter().enumerate() {
                    theta += p.weight(i, j) * zi;
                }
                amp *= theta.cosh() * 2.0;
            }
            amp
        })
        .collect()
}

/// Covariance matrix, force vector and energy assembled from dense inner products, with
/// derivatives of the dense amplitudes taken by central differences in every real parameter.
pub fn numeric_system(p: &RbmParams, h: &SparseHamiltonian, gauge: PhaseGauge) -> (Vec<Vec<f64>>, Vec<C64>, C64) {
    let step = 1e-5;
    let v = p.to_vector();
    let (n, m, urbm) = (p.n_visible(), p.n_hidden(), p.is_urbm());
    let psi = direct_amplitudes(p);
    let nv = v.len();
    let o: Vec<Vec<C64>> = (0..nv)
        .map(|k| {
            let mut plus = v.clone();
            let mut minus = v.clone();
            plus[k] += step;
            minus[k] -= step;
            let ap = direct_amplitudes(&RbmParams::from_vector(n, m, urbm, &plus).unwrap());
            let am = direct_amplitudes(&RbmParams::from_vector(n, m, urbm, &minus).unwrap());
            (0..psi.len()).map(|z| (ap[z] - am[z]) / (2.0 * step) / psi[z]).collect()
        })
        .collect();
    let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
    let prob: Vec<f64> = psi.iter().map(|a| a.norm_sqr() / norm).collect();
    let hpsi = dense_apply(&kron_dense(h), &psi);
    let eloc: Vec<C64> = hpsi.iter().zip(&psi).map(|(a, b)| a / b).collect();
    let energy: C64 = prob.iter().zip(&eloc).map(|(p, e)| e * p).sum();
    let mean: Vec<C64> = o.iter().map(|ok| ok.iter().zip(&prob).map(|(x, p)| x * p).sum()).collect();
    let sub = |mu: C64| match gauge {
        PhaseGauge::Free => mu.conj(),
        PhaseGauge::Pinned => c(mu.re, 0.0),
    };
    let mut a = vec![vec![0.0; nv]; nv];
    for i in 0..nv {
        for j in 0..nv {
            let oo: C64 = (0..psi.len()).map(|z| o[i][z].conj() * o[j][z] * prob[z]).sum();
            a[i][j] = (oo - sub(mean[i]) * mean[j]).re;
        }
    }
    let f = (0..nv)
        .map(|k| {
            let oe: C64 = (0..psi.len()).map(|z| o[k][z].conj() * eloc[z] * prob[z]).sum();
            oe - sub(mean[k]) * energy
        })
        .collect();
    (a, f, energy)
}

/// Lowest eigenvalue of a Hermitian dense matrix by power iteration on `s·I - M`.
pub fn dense_ground_energy(m: &Dense) -> f64 {
    let dim = m.len();
    let shift: f64 = m.iter().map(|r| r.iter().map(|x| x.norm()).sum::<f64>()).fold(0.0, f64::max);
    let mut v: Vec<C64> = (0..dim).map(|i| c(1.0 + 0.01 * i as f64, 0.0)).collect();
    let mut e = 0.0;
    for _ in 0..20_000 {
        let mv = dense_apply(m, &v);
        let w: Vec<C64> = v.iter().zip(&mv).map(|(a, b)| a * shift - b).collect();
        let nrm = w.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        v = w.into_iter().map(|x| x / nrm).collect();
        let next = dense_expectation(m, &v).re;
        if (next - e).abs() < 1e-14 {
            return next;
        }
        e = next;
    }
    e
}

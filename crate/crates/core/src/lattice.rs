//! Model Hamiltonians, jump operators and the classical triangular Ising energy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::spinstate::{BasisConfig, Pauli, PauliTerm, SparseHamiltonian};
use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Open,
    Periodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeKind {
    Chain,
    Triangular,
}

/// Geometry of a lattice; site `(x, y)` of a triangular lattice has index `x + lx * y`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub kind: LatticeKind,
    pub sites: usize,
    pub boundary: Boundary,
    pub dims: Option<(usize, usize)>,
}

impl LatticeSpec {
    pub fn chain(n: usize, boundary: Boundary) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("chain needs at least 2 sites, got {n}")));
        }
        if boundary == Boundary::Periodic && n < 3 {
            return Err(Error::InvalidArgument(
                "periodic chain needs at least 3 sites (N = 2 would double the single bond)".into(),
            ));
        }
        Ok(Self { kind: LatticeKind::Chain, sites: n, boundary, dims: None })
    }

    /// Periodic `lx × ly` triangular lattice.
    pub fn triangular(lx: usize, ly: usize) -> Result<Self> {
        if lx < 2 || ly < 2 {
            return Err(Error::InvalidArgument(format!("triangular lattice needs lx, ly >= 2, got {lx}x{ly}")));
        }
        Ok(Self { kind: LatticeKind::Triangular, sites: lx * ly, boundary: Boundary::Periodic, dims: Some((lx, ly)) })
    }

    /// Raw bond enumeration before deduplication (right, down, down-right for triangular).
    pub fn raw_bonds(&self) -> Vec<(usize, usize)> {
        match self.kind {
            LatticeKind::Chain => {
                let n = self.sites;
                let mut b: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
                if self.boundary == Boundary::Periodic {
                    b.push((n - 1, 0));
                }
                b
            }
            LatticeKind::Triangular => {
                let (lx, ly) = self.dims.expect("triangular lattice has dims");
                let idx = |x: usize, y: usize| (x % lx) + lx * (y % ly);
                let mut b = Vec::with_capacity(3 * lx * ly);
                for y in 0..ly {
                    for x in 0..lx {
                        let s = idx(x, y);
                        b.push((s, idx(x + 1, y)));
                        b.push((s, idx(x, y + 1)));
                        b.push((s, idx(x + 1, y + 1)));
                    }
                }
                b
            }
        }
    }

    /// Deduplicated bond list in first-occurrence order, each pair stored as `(min, max)`.
    pub fn bonds(&self) -> Result<Vec<(usize, usize)>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (a, b) in self.raw_bonds() {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-bond on site {a}")));
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                out.push(key);
            }
        }
        Ok(out)
    }

    /// Elementary triangles `(x,y),(x+1,y),(x+1,y+1)` and `(x,y),(x,y+1),(x+1,y+1)`.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        let Some((lx, ly)) = self.dims else { return Vec::new() };
        let idx = |x: usize, y: usize| (x % lx) + lx * (y % ly);
        let mut t = Vec::with_capacity(2 * lx * ly);
        for y in 0..ly {
            for x in 0..lx {
                t.push([idx(x, y), idx(x + 1, y), idx(x + 1, y + 1)]);
                t.push([idx(x, y), idx(x, y + 1), idx(x + 1, y + 1)]);
            }
        }
        t
    }

    /// Neighbour lists derived from the deduplicated bonds.
    pub fn neighbors(&self) -> Result<Vec<Vec<usize>>> {
        let mut nb = vec![Vec::new(); self.sites];
        for (a, b) in self.bonds()? {
            nb[a].push(b);
            nb[b].push(a);
        }
        Ok(nb)
    }
}

/// Bond list as a JSON array of `[i, j]` pairs.
pub fn bonds_to_json(bonds: &[(usize, usize)]) -> String {
    let pairs: Vec<[usize; 2]> = bonds.iter().map(|&(a, b)| [a, b]).collect();
    serde_json::to_string(&pairs).expect("bond list serializes")
}

fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

fn zz(coeff: f64, a: usize, b: usize) -> PauliTerm {
    PauliTerm::pair(re(coeff), (a, Pauli::Z), (b, Pauli::Z)).expect("distinct bond sites")
}

/// `H = -h Σ X_i - Σ_<ij> Z_i Z_j`.
pub fn build_tfi(n: usize, h: f64, boundary: Boundary) -> Result<SparseHamiltonian> {
    let lat = LatticeSpec::chain(n, boundary)?;
    let mut terms: Vec<PauliTerm> = (0..n).map(|i| PauliTerm::single(re(-h), i, Pauli::X)).collect();
    terms.extend(lat.bonds()?.into_iter().map(|(a, b)| zz(-1.0, a, b)));
    SparseHamiltonian::new(n, terms)
}

/// `H = -hz Σ Z_i + Σ_<ij> (jz Z_i Z_j + X_i X_j + Y_i Y_j)`.
pub fn build_heisenberg(n: usize, jz: f64, hz: f64, boundary: Boundary) -> Result<SparseHamiltonian> {
    build_heisenberg_with_fields(n, jz, &vec![hz; n], boundary)
}

/// Heisenberg chain with a site-dependent longitudinal field `-Σ h_i Z_i`.
pub fn build_heisenberg_with_fields(n: usize, jz: f64, fields: &[f64], boundary: Boundary) -> Result<SparseHamiltonian> {
    let lat = LatticeSpec::chain(n, boundary)?;
    if fields.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: fields.len() });
    }
    let mut terms: Vec<PauliTerm> = fields.iter().enumerate().map(|(i, &f)| PauliTerm::single(re(-f), i, Pauli::Z)).collect();
    for (a, b) in lat.bonds()? {
        terms.push(zz(jz, a, b));
        terms.push(PauliTerm::pair(re(1.0), (a, Pauli::X), (b, Pauli::X))?);
        terms.push(PauliTerm::pair(re(1.0), (a, Pauli::Y), (b, Pauli::Y))?);
    }
    SparseHamiltonian::new(n, terms)
}

/// `H = -h Σ X_i + Σ_<ij> Z_i Z_j` on the periodic `lx × ly` triangular lattice.
pub fn build_tafi_2d(lx: usize, ly: usize, h: f64) -> Result<SparseHamiltonian> {
    let lat = LatticeSpec::triangular(lx, ly)?;
    let n = lat.sites;
    let mut terms: Vec<PauliTerm> = (0..n).map(|i| PauliTerm::single(re(-h), i, Pauli::X)).collect();
    terms.extend(lat.bonds()?.into_iter().map(|(a, b)| zz(1.0, a, b)));
    SparseHamiltonian::new(n, terms)
}

/// Jump operators of a Lindblad master equation.
#[derive(Clone, Debug)]
pub struct LindbladSpec {
    pub gamma: f64,
    pub operators: Vec<(usize, SparseHamiltonian)>,
}

impl LindbladSpec {
    pub fn none() -> Self {
        Self { gamma: 0.0, operators: Vec::new() }
    }

    pub fn n_sites(&self) -> Option<usize> {
        self.operators.first().map(|(_, l)| l.n_sites())
    }
}

/// `sqrt(gamma) |1><0|` on every site, written as `sqrt(gamma) (X - iY) / 2`.
pub fn build_lindblad_raising(n: usize, gamma: f64) -> Result<LindbladSpec> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be non-negative, got {gamma}")));
    }
    let a = gamma.sqrt() / 2.0;
    let operators = (0..n)
        .map(|k| {
            let l = SparseHamiltonian::new(
                n,
                [PauliTerm::single(re(a), k, Pauli::X), PauliTerm::single(C64::new(0.0, -a), k, Pauli::Y)],
            )?;
            Ok((k, l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LindbladSpec { gamma, operators })
}

/// `E = Σ_<ij> z_i z_j` over the triangular bonds.
pub fn classical_tafi_energy(config: &BasisConfig, lattice: &LatticeSpec) -> Result<f64> {
    if lattice.kind != LatticeKind::Triangular {
        return Err(Error::InvalidArgument("classical TAFI energy needs a triangular lattice".into()));
    }
    if config.n_sites() != lattice.sites {
        return Err(Error::DimensionMismatch { expected: lattice.sites, got: config.n_sites() });
    }
    Ok(lattice
        .bonds()?
        .into_iter()
        .map(|(a, b)| (config.spin(a) * config.spin(b)) as f64)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spinstate::{connected_states, eigh, expectation, StateVector};

    fn elem(h: &SparseHamiltonian, row: usize, col: usize) -> C64 {
        let n = h.n_sites();
        connected_states(h, &BasisConfig::from_index(n, row))
            .unwrap()
            .into_iter()
            .filter(|(z, _)| z.index() == col)
            .map(|(_, v)| v)
            .sum()
    }

    #[test]
    fn tfi_two_sites_open() {
        let h = build_tfi(2, 1.0, Boundary::Open).unwrap();
        assert_eq!(elem(&h, 0, 0), re(-1.0));
        assert_eq!(elem(&h, 0, 1), re(-1.0));
    }

    #[test]
    fn tfi_periodic_three_sites_classical() {
        let h = build_tfi(3, 0.0, Boundary::Periodic).unwrap();
        assert_eq!(h.diagonal(0), re(-3.0));
        assert!(build_tfi(2, 1.0, Boundary::Periodic).is_err());
    }

    #[test]
    fn heisenberg_two_sites_singlet_triplet() {
        let h = build_heisenberg(2, 1.0, 0.0, Boundary::Open).unwrap();
        let (vals, _) = eigh(&h).unwrap();
        let expected = [-3.0, 1.0, 1.0, 1.0];
        for (v, e) in vals.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12, "{vals:?}");
        }
    }

    #[test]
    fn heisenberg_diagonal_and_conservation() {
        let h = build_heisenberg(3, 1.0, 1.0, Boundary::Periodic).unwrap();
        assert_eq!(h.diagonal(0), re(0.0));

        let h = build_heisenberg(4, 1.0, 0.0, Boundary::Periodic).unwrap();
        let d = h.to_dense().unwrap();
        let dim = 16;
        let mz = |i: usize| (0..4).map(|s| crate::spinstate::spin_of(i, s)).sum::<f64>();
        for r in 0..dim {
            for c in 0..dim {
                let comm = d[(r, c)] * (mz(c) - mz(r));
                assert!(comm.norm() < 1e-14);
            }
        }
    }

    #[test]
    fn tafi_two_by_two_bonds() {
        let lat = LatticeSpec::triangular(2, 2).unwrap();
        assert_eq!(lat.raw_bonds().len(), 12);
        // every pair of the four sites is bonded once wrapped
        assert_eq!(lat.bonds().unwrap(), vec![(0, 1), (0, 2), (0, 3), (1, 3), (1, 2), (2, 3)]);
        let h = build_tafi_2d(2, 2, 0.0).unwrap();
        assert_eq!(h.diagonal(0), re(6.0));
        let all_up = BasisConfig::from_index(4, 0);
        assert_eq!(classical_tafi_energy(&all_up, &lat).unwrap(), 6.0);
    }

    #[test]
    fn tafi_all_up_energy_is_bond_count() {
        for (lx, ly) in [(3, 3), (4, 3), (3, 4)] {
            let lat = LatticeSpec::triangular(lx, ly).unwrap();
            let nb = lat.bonds().unwrap().len();
            assert_eq!(nb, 3 * lx * ly);
            let h = build_tafi_2d(lx, ly, 0.0).unwrap();
            assert_eq!(h.diagonal(0).re, nb as f64);
            assert_eq!(h.diagonal((1 << (lx * ly)) - 1).re, nb as f64);
        }
    }

    #[test]
    fn bonds_json_format() {
        let lat = LatticeSpec::chain(3, Boundary::Periodic).unwrap();
        assert_eq!(bonds_to_json(&lat.bonds().unwrap()), "[[0,1],[1,2],[0,2]]");
    }

    #[test]
    fn lindblad_single_site_algebra() {
        let spec = build_lindblad_raising(1, 0.05).unwrap();
        let l = &spec.operators[0].1;
        let ldl = l.adjoint().product(l).unwrap().to_dense().unwrap();
        assert!((ldl[(0, 0)] - re(0.05)).norm() < 1e-15);
        assert!(ldl[(1, 1)].norm() < 1e-15 && ldl[(0, 1)].norm() < 1e-15);
        let d = l.to_dense().unwrap();
        assert!((d[(1, 0)] - re(0.05f64.sqrt())).norm() < 1e-15);

        let zero = build_lindblad_raising(3, 0.0).unwrap();
        assert!(zero.operators.iter().all(|(_, l)| l.is_zero()));
        assert!(build_lindblad_raising(2, -1.0).is_err());
    }

    #[test]
    fn local_flip_identity() {
        let lat = LatticeSpec::triangular(3, 3).unwrap();
        let nb = lat.neighbors().unwrap();
        for idx in [0usize, 5, 77, 300, 511] {
            let z = BasisConfig::from_index(9, idx);
            let e0 = classical_tafi_energy(&z, &lat).unwrap();
            for i in 0..9 {
                let sum: i32 = nb[i].iter().map(|&j| z.spin(j) as i32).sum();
                let e1 = classical_tafi_energy(&z.flipped(i), &lat).unwrap();
                assert_eq!(e1 - e0, (-2 * sum * z.spin(i) as i32) as f64);
            }
        }
    }

    #[test]
    fn ground_states_frustrate_one_bond_per_triangle() {
        for (lx, ly) in [(2, 2), (3, 3)] {
            let lat = LatticeSpec::triangular(lx, ly).unwrap();
            let n = lat.sites;
            let energies: Vec<f64> =
                (0..1usize << n).map(|i| classical_tafi_energy(&BasisConfig::from_index(n, i), &lat).unwrap()).collect();
            let emin = energies.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut count = 0;
            for (i, &e) in energies.iter().enumerate() {
                if e != emin {
                    continue;
                }
                count += 1;
                let z = BasisConfig::from_index(n, i);
                for t in lat.triangles() {
                    let frustrated = [(t[0], t[1]), (t[1], t[2]), (t[0], t[2])]
                        .iter()
                        .filter(|&&(a, b)| z.spin(a) == z.spin(b))
                        .count();
                    assert_eq!(frustrated, 1, "{lx}x{ly} config {i}");
                }
            }
            assert!(count > 0);
        }
    }

    #[test]
    fn classical_energy_matches_quantum_diagonal() {
        for (lx, ly) in [(2, 2), (2, 3)] {
            let lat = LatticeSpec::triangular(lx, ly).unwrap();
            let h = build_tafi_2d(lx, ly, 0.0).unwrap();
            let n = lat.sites;
            for i in 0..1usize << n {
                let e = classical_tafi_energy(&BasisConfig::from_index(n, i), &lat).unwrap();
                let q = expectation(&StateVector::basis(n, i), &h).unwrap();
                assert_eq!(q.re, e);
            }
        }
    }

    #[test]
    fn builders_match_kron_structure_and_are_hermitian() {
        let models = [
            build_tfi(5, 0.7, Boundary::Periodic).unwrap(),
            build_tfi(4, 1.3, Boundary::Open).unwrap(),
            build_heisenberg(5, 0.5, 1.0, Boundary::Periodic).unwrap(),
            build_tafi_2d(3, 2, 0.4).unwrap(),
        ];
        for h in &models {
            assert!(h.is_hermitian());
            let d = h.to_dense().unwrap();
            for r in 0..d.nrows() {
                for c in 0..d.ncols() {
                    assert!((d[(r, c)] - d[(c, r)].conj()).norm() < 1e-12);
                }
            }
        }
    }
}

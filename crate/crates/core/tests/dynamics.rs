use urbm_core::lattice::{build_lindblad_raising, build_tfi, Boundary};
use urbm_core::open::{apply_jump_exact, apply_jump_variational, JumpConfig};
use urbm_core::rbm::RbmParams;
use urbm_core::rng_from_seed;
use urbm_core::spinstate::{expectation, propagate_exact_recorded, Pauli, SparseHamiltonian};
use urbm_core::tvmc::{
    build_system_exact, inject_noise, run_imaginary_time, run_real_time, IntegratorConfig, Observable, Regularization,
};

#[test]
fn noise_frobenius_norm_concentrates() {
    let p = RbmParams::random(3, 3, true, 0.3, &mut rng_from_seed(5));
    let sys = build_system_exact(&p, &build_tfi(3, 1.0, Boundary::Periodic).unwrap()).unwrap();
    let (delta, n) = (1e-3, sys.n_var() as f64);
    for seed in 0..100 {
        let noisy = inject_noise(&sys, delta, &mut rng_from_seed(seed)).unwrap();
        let mut fro = 0.0;
        for i in 0..sys.n_var() {
            for j in 0..sys.n_var() {
                fro += (noisy.a[(i, j)] - sys.a[(i, j)]).powi(2);
            }
        }
        let ratio = fro.sqrt() / (delta * n);
        assert!((0.5..=2.0).contains(&ratio), "seed {seed}: ratio {ratio}");
    }
}

#[test]
fn variational_raising_jump_matches_exact() {
    let n = 3;
    let l = build_lindblad_raising(n, 0.05).unwrap();
    let p = RbmParams::random(n, 2 * n, true, 0.3, &mut rng_from_seed(8));
    let psi = p.build_statevector().unwrap();
    for (site, op) in &l.operators {
        let exact = apply_jump_exact(&psi, *site, op).unwrap();
        let jumped = apply_jump_variational(&p, *site, &JumpConfig::default()).unwrap();
        let f = jumped.build_statevector().unwrap().fidelity(&exact);
        assert!(f >= 0.99, "site {site}: fidelity {f}");
    }
}

#[test]
fn small_quench_tracks_exact() {
    let n = 4;
    let p0 = RbmParams::random(n, 4 * n, true, 0.1, &mut rng_from_seed(4));
    let hi = build_tfi(n, 0.5, Boundary::Periodic).unwrap();
    let p0 = run_imaginary_time(&p0, &hi, 0.01, 1000, &Regularization::imaginary_time()).unwrap().into_result().unwrap().params;
    let hf = build_tfi(n, 1.0, Boundary::Periodic).unwrap();
    let sx = SparseHamiltonian::pauli_string(n, &[(0, Pauli::X)]).unwrap();
    let (dt, t_max, every) = (0.0005, 1.0, 50);
    let cfg = IntegratorConfig::real_time(dt, t_max).with_record_every(every);
    let run = run_real_time(&p0, &hf, &cfg, &[Observable::new("sx1", sx.clone())], None).unwrap().into_result().unwrap();
    let exact = propagate_exact_recorded(&hf, &p0.build_statevector().unwrap(), t_max, dt, every).unwrap();
    assert_eq!(exact.len(), run.series[0].len());
    for ((_, psi), v) in exact.iter().zip(&run.series[0]) {
        let d = (expectation(psi, &sx).unwrap().re - v).abs();
        assert!(d <= 0.01, "deviation {d}");
    }
}

//! Variational dynamics with unitary-coupled restricted Boltzmann machines.
//!
//! The crate is organised bottom-up:
//!
//! * [`spinstate`]: statevectors, Pauli-sum operators and the exact propagator.
//! * [`lattice`]: model Hamiltonians, jump operators and the classical TAFI energy.
//! * [`rbm`]: the variational state, its log-derivatives and the circuit emulation.
//! * [`tvmc`]: covariance matrix / force vector assembly, regularized solves and integrators.
//! * [`sampler`]: Born-rule and Metropolis sampling, Monte Carlo estimators, autocorrelation.
//! * [`open`]: quantum trajectories (variational and exact) and the Lindblad oracle.

pub mod error;
pub mod lattice;
pub mod linalg;
pub mod open;
pub mod rbm;
pub mod sampler;
pub mod spinstate;
pub mod tvmc;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;

/// Name of the RNG used for every seeded draw in the crate.
pub const RNG_ID: &str = "ChaCha20Rng::seed_from_u64";

/// Deterministic RNG for a seed.
pub fn rng_from_seed(seed: u64) -> rand_chacha::ChaCha20Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha20Rng::seed_from_u64(seed)
}

/// Floating-point text with 17 significant digits, as written to every output file.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

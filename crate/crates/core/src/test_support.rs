//! Shared fixtures for the unit tests in this crate.

use crate::scenario::{SystemConfig, SPEED_OF_LIGHT};
use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Desk-scale configuration at 120 GHz used throughout the unit tests.
pub fn test_config() -> SystemConfig {
    let lambda = SPEED_OF_LIGHT / 120e9;
    SystemConfig {
        carrier_frequency: 120e9,
        bandwidth: 150e3,
        n_rf: 4,
        n_e: 16,
        d_e: lambda / 2.0,
        d_rf: lambda / 2.0,
        d_p: 0.1,
        p_max: 1.0,
        t_slots: 200,
        noise_power: 1e-12,
        codebook_bits: 10,
        absorption_coeff: 0.0033,
        waveguide_alpha: 0.0,
        waveguide_beta: 2.0 * PI / lambda,
        gamma_si: 1e-9,
        gamma_s: 0.5,
        si_gain: 1.0,
        rng_seed: 1,
        grid_resolution_xi_rho: 0.1,
    }
}

/// Same geometry but with a small panel, handy for brute-force oracles.
pub fn small_config(n_rf: usize, n_e: usize) -> SystemConfig {
    let mut cfg = test_config();
    cfg.n_rf = n_rf;
    cfg.n_e = n_e;
    cfg
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_complex_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<Complex64> {
    Array2::from_shape_fn((r, c), |_| {
        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    })
}

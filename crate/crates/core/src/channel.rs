//! Channel synthesis: near-field response vectors, the target-reflection
//! channel, per-user downlink channels, the self-interference channel
//! between the two panels, and the in-microstrip propagation matrices.
//!
//! Amplitudes follow spherical spreading with an exponential absorption
//! term, lambda / (4 pi r) * exp(-kappa r / 2); the absorption coefficient
//! is a configuration knob. Phases use exp(+j 2 pi r / lambda) with the
//! exact element-to-target distance, so wavefront curvature across the
//! panel is fully represented.

use crate::scenario::{
    element_distance_side, element_position, wavelength, Scenario, Side, SphericalPosition,
    SystemConfig,
};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("range must be positive, got {0}")]
    NonPositiveRange(f64),
}

/// Signal propagation inside the microstrips of one panel: a diagonal
/// matrix whose entry for element (i, n) depends only on the in-guide path
/// length n * d_e.
#[derive(Debug, Clone)]
pub struct PropagationMatrix {
    pub side: Side,
    diag: Array1<Complex64>,
}

impl PropagationMatrix {
    /// Diagonal entries, element-major: index (i - 1) * n_e + n.
    pub fn diag(&self) -> &Array1<Complex64> {
        &self.diag
    }

    pub fn entry(&self, m: usize) -> Complex64 {
        self.diag[m]
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Materializes the full diagonal matrix.
    pub fn as_matrix(&self) -> Array2<Complex64> {
        let n = self.diag.len();
        let mut m = Array2::zeros((n, n));
        for k in 0..n {
            m[(k, k)] = self.diag[k];
        }
        m
    }
}

/// Near-field response vector of one panel toward a point in space.
#[derive(Debug, Clone)]
pub struct NearFieldVector {
    pub side: Side,
    pub entries: Array1<Complex64>,
}

/// All channels of one scenario realization.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    /// Reflection channel between the panels via all targets, N x N.
    pub h_r: Array2<Complex64>,
    /// Downlink channel per user, each of length N.
    pub h_dl: Vec<Array1<Complex64>>,
    /// Self-interference channel between the panels, N x N.
    pub h_si: Array2<Complex64>,
    pub p_tx: PropagationMatrix,
    pub p_rx: PropagationMatrix,
}

impl ChannelSet {
    /// Builds every channel of a scenario. Deterministic.
    pub fn synthesize(scenario: &Scenario, config: &SystemConfig) -> Self {
        let h_r = reflection_channel(scenario, config);
        let h_dl = scenario
            .user_positions()
            .iter()
            .map(|p| dl_channel(p, config))
            .collect();
        Self {
            h_r,
            h_dl,
            h_si: si_channel(config),
            p_tx: propagation_matrix(Side::Tx, config),
            p_rx: propagation_matrix(Side::Rx, config),
        }
    }
}

/// Free-space spreading with molecular absorption at range r.
pub fn attenuation(r: f64, config: &SystemConfig) -> Result<f64, ChannelError> {
    if !(r > 0.0) {
        return Err(ChannelError::NonPositiveRange(r));
    }
    Ok(amplitude(r, config))
}

/// Amplitude taper lambda / (4 pi r) * exp(-kappa r / 2); caller guarantees
/// r > 0.
pub(crate) fn amplitude(r: f64, config: &SystemConfig) -> f64 {
    let lambda = wavelength(config);
    lambda / (4.0 * std::f64::consts::PI * r) * (-config.absorption_coeff * r / 2.0).exp()
}

/// d/dr of `amplitude`; equals amplitude * (-1/r - kappa/2).
pub(crate) fn amplitude_derivative(r: f64, config: &SystemConfig) -> f64 {
    amplitude(r, config) * (-1.0 / r - config.absorption_coeff / 2.0)
}

/// Complex channel entry alpha(d) * exp(j 2 pi d / lambda) for a path of
/// length d.
pub(crate) fn path_gain(d: f64, config: &SystemConfig) -> Complex64 {
    let phase = 2.0 * std::f64::consts::PI * d / wavelength(config);
    Complex64::from_polar(amplitude(d, config), phase)
}

/// Near-field response of the requested panel toward `pos`: entry
/// (i - 1) n_e + n carries the exact element-to-target path gain.
pub fn response_vector(pos: &SphericalPosition, side: Side, config: &SystemConfig) -> NearFieldVector {
    let mut entries = Array1::zeros(config.n_total());
    for i in 0..config.n_rf {
        for n in 0..config.n_e {
            let d = element_distance_side(side, pos, i, n, config);
            entries[i * config.n_e + n] = path_gain(d, config);
        }
    }
    NearFieldVector { side, entries }
}

/// Downlink channel toward a user antenna; entries coincide with the
/// transmit-side response vector.
pub fn dl_channel(pos: &SphericalPosition, config: &SystemConfig) -> Array1<Complex64> {
    response_vector(pos, Side::Tx, config).entries
}

/// Reflection channel: sum over targets of beta_k a_rx(k) a_tx(k)^H.
pub fn reflection_channel(scenario: &Scenario, config: &SystemConfig) -> Array2<Complex64> {
    let n = config.n_total();
    let mut h = Array2::zeros((n, n));
    for (pos, beta) in scenario.targets.iter().zip(&scenario.reflection_coeffs) {
        let a_rx = response_vector(pos, Side::Rx, config).entries;
        let a_tx = response_vector(pos, Side::Tx, config).entries;
        for m in 0..n {
            let left = *beta * a_rx[m];
            for q in 0..n {
                h[(m, q)] += left * a_tx[q].conj();
            }
        }
    }
    h
}

/// Line-of-sight self-interference channel: entry (m, q) couples TX element
/// q into RX element m through the exact inter-panel distance. Symmetric
/// (not Hermitian) because the panel geometry is mirror-symmetric.
pub fn si_channel(config: &SystemConfig) -> Array2<Complex64> {
    let n = config.n_total();
    let mut h = Array2::zeros((n, n));
    if config.si_gain == 0.0 {
        return h;
    }
    let gain = Complex64::new(config.si_gain, 0.0);
    for i_rx in 0..config.n_rf {
        for n_rx in 0..config.n_e {
            let m = i_rx * config.n_e + n_rx;
            let e_rx = element_position(Side::Rx, i_rx, n_rx, config);
            for i_tx in 0..config.n_rf {
                for n_tx in 0..config.n_e {
                    let q = i_tx * config.n_e + n_tx;
                    let e_tx = element_position(Side::Tx, i_tx, n_tx, config);
                    let dx = e_rx[0] - e_tx[0];
                    let dy = e_rx[1] - e_tx[1];
                    let dz = e_rx[2] - e_tx[2];
                    let d = (dx * dx + dy * dy + dz * dz).sqrt();
                    h[(m, q)] = gain * path_gain(d, config);
                }
            }
        }
    }
    h
}

/// Diagonal propagation matrix of one panel: exp(-(n-1) d_e (alpha + j
/// beta)) repeated across microstrips.
pub fn propagation_matrix(side: Side, config: &SystemConfig) -> PropagationMatrix {
    let mut diag = Array1::zeros(config.n_total());
    for i in 0..config.n_rf {
        for n in 0..config.n_e {
            let path = n as f64 * config.d_e;
            let mag = (-config.waveguide_alpha * path).exp();
            let phase = -config.waveguide_beta * path;
            diag[i * config.n_e + n] = Complex64::from_polar(mag, phase);
        }
    }
    PropagationMatrix { side, diag }
}

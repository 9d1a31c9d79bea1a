//! System configuration, target geometry, and the element-to-target distance
//! formula every channel entry is built from.
//!
//! Geometry convention: the transmit panel's microstrips extend along the
//! negative x axis starting at -d_p/2, the receive panel mirrors it through
//! the y-z plane starting at +d_p/2, and each microstrip stacks its
//! metamaterial elements along +z with spacing d_e. Targets are given in
//! spherical coordinates (range from the origin, elevation from the +z axis,
//! azimuth in the x-y plane). The mirrored receive-panel offset is a
//! convention of this crate; only the transmit-side distance formula is
//! pinned by the model.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Errors raised while validating or loading configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("could not parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

/// Which panel of the full-duplex node a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Tx,
    Rx,
}

/// All physical and algorithmic constants of the full-duplex node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Carrier frequency in Hz.
    pub carrier_frequency: f64,
    /// Signal bandwidth in Hz.
    pub bandwidth: f64,
    /// Microstrips (RF chains) per panel.
    pub n_rf: usize,
    /// Metamaterial elements per microstrip.
    pub n_e: usize,
    /// Intra-microstrip element spacing in meters.
    pub d_e: f64,
    /// Inter-microstrip spacing in meters.
    pub d_rf: f64,
    /// Separation between the TX and RX panels in meters.
    pub d_p: f64,
    /// Transmit power budget in watts.
    pub p_max: f64,
    /// Transmissions per coherent block.
    pub t_slots: usize,
    /// Noise power in watts.
    pub noise_power: f64,
    /// Phase-quantization bits of the analog weight codebook.
    pub codebook_bits: u32,
    /// Medium absorption coefficient in 1/m.
    pub absorption_coeff: f64,
    /// In-microstrip attenuation in nepers/m.
    pub waveguide_alpha: f64,
    /// In-microstrip wavenumber in rad/m.
    pub waveguide_beta: f64,
    /// Residual self-interference threshold (squared row norm).
    pub gamma_si: f64,
    /// Position-error-bound threshold in meters.
    pub gamma_s: f64,
    /// Scalar strength of the self-interference channel.
    pub si_gain: f64,
    /// Master random seed.
    pub rng_seed: u64,
    /// Grid step for the combiner weight search, in (0, 1].
    pub grid_resolution_xi_rho: f64,
}

impl SystemConfig {
    /// Total element count across the panel.
    pub fn n_total(&self) -> usize {
        self.n_rf * self.n_e
    }

    /// Panel aperture (n_e - 1) * d_e in meters.
    pub fn aperture(&self) -> f64 {
        (self.n_e.saturating_sub(1)) as f64 * self.d_e
    }

    /// Checks every invariant; call after construction or deserialization.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if !(self.carrier_frequency > 0.0) {
            return err("carrier_frequency must be > 0");
        }
        if !(self.bandwidth > 0.0) {
            return err("bandwidth must be > 0");
        }
        if self.n_rf < 1 || self.n_e < 1 {
            return err("n_rf and n_e must be >= 1");
        }
        if !(self.d_e > 0.0 && self.d_rf > 0.0 && self.d_p > 0.0) {
            return err("d_e, d_rf, d_p must be > 0");
        }
        if !(self.p_max > 0.0) {
            return err("p_max must be > 0");
        }
        if self.t_slots < 1 {
            return err("t_slots must be >= 1");
        }
        if !(self.noise_power > 0.0) {
            return err("noise_power must be > 0");
        }
        if self.codebook_bits == 0 || self.codebook_bits > 16 {
            return err("codebook_bits must be in 1..=16");
        }
        if !(self.absorption_coeff >= 0.0) {
            return err("absorption_coeff must be >= 0");
        }
        if !(self.waveguide_alpha >= 0.0) {
            return err("waveguide_alpha must be >= 0");
        }
        if !self.waveguide_beta.is_finite() {
            return err("waveguide_beta must be finite");
        }
        if !(self.gamma_si >= 0.0) {
            return err("gamma_si must be >= 0");
        }
        if !(self.gamma_s > 0.0) {
            return err("gamma_s must be > 0");
        }
        if !(self.si_gain >= 0.0) {
            return err("si_gain must be >= 0");
        }
        if !(self.grid_resolution_xi_rho > 0.0 && self.grid_resolution_xi_rho <= 1.0) {
            return err("grid_resolution_xi_rho must be in (0, 1]");
        }
        Ok(())
    }
}

/// Target position in spherical coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalPosition {
    /// Range from the origin in meters.
    pub r: f64,
    /// Elevation from the +z axis in radians, in [0, pi].
    pub theta: f64,
    /// Azimuth in radians.
    pub phi: f64,
}

impl SphericalPosition {
    pub fn new(r: f64, theta: f64, phi: f64) -> Result<Self, ConfigError> {
        if !(r > 0.0) {
            return Err(ConfigError::Invalid("range must be > 0".into()));
        }
        if !(0.0..=std::f64::consts::PI).contains(&theta) {
            return Err(ConfigError::Invalid("theta must be in [0, pi]".into()));
        }
        if !phi.is_finite() {
            return Err(ConfigError::Invalid("phi must be finite".into()));
        }
        Ok(Self { r, theta, phi })
    }

    /// Cartesian coordinates (x, y, z).
    pub fn cartesian(&self) -> [f64; 3] {
        [
            self.r * self.theta.sin() * self.phi.cos(),
            self.r * self.theta.sin() * self.phi.sin(),
            self.r * self.theta.cos(),
        ]
    }
}

/// A set of point targets, a subset of which are downlink users.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    /// Target positions; length K.
    pub targets: Vec<SphericalPosition>,
    /// Unit-modulus reflection coefficient per target.
    pub reflection_coeffs: Vec<Complex64>,
    /// Indices (into `targets`) of the targets served as downlink users.
    pub user_indices: Vec<usize>,
}

impl Scenario {
    pub fn new(
        targets: Vec<SphericalPosition>,
        reflection_coeffs: Vec<Complex64>,
        user_indices: Vec<usize>,
    ) -> Result<Self, ConfigError> {
        let k = targets.len();
        if k == 0 {
            return Err(ConfigError::Invalid("scenario needs at least one target".into()));
        }
        if reflection_coeffs.len() != k {
            return Err(ConfigError::Invalid(
                "one reflection coefficient per target required".into(),
            ));
        }
        for beta in &reflection_coeffs {
            if (beta.norm() - 1.0).abs() > 1e-9 {
                return Err(ConfigError::Invalid(
                    "reflection coefficients must have unit modulus".into(),
                ));
            }
        }
        if user_indices.is_empty() {
            return Err(ConfigError::Invalid("at least one user required".into()));
        }
        if user_indices.len() > k {
            return Err(ConfigError::Invalid("more users than targets".into()));
        }
        let mut seen = vec![false; k];
        for &u in &user_indices {
            if u >= k {
                return Err(ConfigError::Invalid("user index out of range".into()));
            }
            if seen[u] {
                return Err(ConfigError::Invalid("duplicate user index".into()));
            }
            seen[u] = true;
        }
        Ok(Self {
            targets,
            reflection_coeffs,
            user_indices,
        })
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_indices.len()
    }

    /// Positions of the user targets, in `user_indices` order.
    pub fn user_positions(&self) -> Vec<SphericalPosition> {
        self.user_indices.iter().map(|&u| self.targets[u]).collect()
    }
}

/// Carrier wavelength c / f in meters.
pub fn wavelength(config: &SystemConfig) -> f64 {
    SPEED_OF_LIGHT / config.carrier_frequency
}

/// Cartesian position of panel element (i, n), zero-based indices.
pub fn element_position(side: Side, i: usize, n: usize, config: &SystemConfig) -> [f64; 3] {
    let offset = config.d_p / 2.0 + i as f64 * config.d_rf;
    let x = match side {
        Side::Tx => -offset,
        Side::Rx => offset,
    };
    [x, 0.0, n as f64 * config.d_e]
}

/// Distance between a target and transmit-panel element (i, n), zero-based
/// indices.
pub fn element_distance(
    pos: &SphericalPosition,
    i: usize,
    n: usize,
    config: &SystemConfig,
) -> f64 {
    element_distance_side(Side::Tx, pos, i, n, config)
}

/// Distance between a target and element (i, n) of the given panel.
pub fn element_distance_side(
    side: Side,
    pos: &SphericalPosition,
    i: usize,
    n: usize,
    config: &SystemConfig,
) -> f64 {
    let t = pos.cartesian();
    let e = element_position(side, i, n, config);
    let dx = t[0] - e[0];
    let dy = t[1] - e[1];
    let dz = t[2] - e[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Partial derivatives of the element distance with respect to (r, theta,
/// phi) of the target.
pub fn element_distance_gradient(
    side: Side,
    pos: &SphericalPosition,
    i: usize,
    n: usize,
    config: &SystemConfig,
) -> [f64; 3] {
    let t = pos.cartesian();
    let e = element_position(side, i, n, config);
    let u = [t[0] - e[0], t[1] - e[1], t[2] - e[2]];
    let d = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let (st, ct) = (pos.theta.sin(), pos.theta.cos());
    let (sp, cp) = (pos.phi.sin(), pos.phi.cos());
    let dt_dr = [st * cp, st * sp, ct];
    let dt_dtheta = [pos.r * ct * cp, pos.r * ct * sp, -pos.r * st];
    let dt_dphi = [-pos.r * st * sp, pos.r * st * cp, 0.0];
    let dot = |a: &[f64; 3]| (u[0] * a[0] + u[1] * a[1] + u[2] * a[2]) / d;
    [dot(&dt_dr), dot(&dt_dtheta), dot(&dt_dphi)]
}

/// Near/far-field boundary 2 D^2 / lambda for an aperture of D meters.
pub fn fraunhofer_distance(aperture: f64, config: &SystemConfig) -> f64 {
    2.0 * aperture * aperture / wavelength(config)
}

/// Converts a power in dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Converts a power in watts to dBm.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// A power value in a config file: either plain watts or a string with an
/// explicit unit suffix ("13 dBm", "0.5 W").
pub(crate) fn parse_power(raw: &toml::Value, key: &str) -> Result<f64, ConfigError> {
    match raw {
        toml::Value::Float(x) => Ok(*x),
        toml::Value::Integer(x) => Ok(*x as f64),
        toml::Value::String(s) => {
            let t = s.trim();
            let lower = t.to_ascii_lowercase();
            if let Some(v) = lower.strip_suffix("dbm") {
                let x: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| ConfigError::Invalid(format!("bad dBm value for {key}: {s}")))?;
                Ok(dbm_to_watts(x))
            } else if let Some(v) = lower.strip_suffix('w') {
                let x: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| ConfigError::Invalid(format!("bad watt value for {key}: {s}")))?;
                Ok(x)
            } else {
                Err(ConfigError::Invalid(format!(
                    "power {key} needs a 'dBm' or 'W' suffix, got {s}"
                )))
            }
        }
        _ => Err(ConfigError::Invalid(format!("power {key} must be a number or string"))),
    }
}

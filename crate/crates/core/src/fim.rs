//! Fisher information for the users' spherical parameters and the position
//! error bound derived from it.
//!
//! The received block is Gaussian with a mean that depends on the target
//! parameters through the reflection channel and a noise covariance that
//! does not, so every information term reduces to a quadratic form in the
//! mean derivatives. Derivatives of the reflection channel are analytical:
//! each parameter of one target perturbs only that target's rank-one
//! contribution, through both the element-distance phase and the amplitude
//! taper. The parameter ordering is (r, theta, phi) per user.

use crate::channel::{amplitude, amplitude_derivative, PropagationMatrix};
use crate::codebook::AnalogBfMatrix;
use crate::linalg;
use crate::scenario::{
    element_distance_gradient, element_distance_side, wavelength, Side, SphericalPosition,
    SystemConfig,
};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FimError {
    #[error("noise covariance is singular: microstrip {microstrip} has zero combined gain")]
    SingularNoiseCovariance { microstrip: usize },
    #[error("Fisher information is singular: {dim} parameter direction(s) unidentifiable")]
    Unidentifiable {
        dim: usize,
        /// Orthonormal basis of the numerical null space, one column per
        /// unidentifiable direction.
        null_basis: Array2<f64>,
    },
}

/// Response vector of one panel toward a position together with its three
/// parameter derivatives, with the reflection coefficient fixed to one.
#[derive(Debug, Clone)]
struct SidePartials {
    a: Array1<Complex64>,
    d: [Array1<Complex64>; 3],
}

fn side_partials(pos: &SphericalPosition, side: Side, config: &SystemConfig) -> SidePartials {
    let n = config.n_total();
    let lambda = wavelength(config);
    let wavenumber = 2.0 * std::f64::consts::PI / lambda;
    let mut a = Array1::zeros(n);
    let mut d = [Array1::zeros(n), Array1::zeros(n), Array1::zeros(n)];
    for i in 0..config.n_rf {
        for nn in 0..config.n_e {
            let m = i * config.n_e + nn;
            let dist = element_distance_side(side, pos, i, nn, config);
            let grad = element_distance_gradient(side, pos, i, nn, config);
            let phase = Complex64::from_polar(1.0, wavenumber * dist);
            let amp = amplitude(dist, config);
            a[m] = amp * phase;
            // d/d_dist of amp * e^{j k dist}, then the chain rule per axis
            let per_dist = (Complex64::new(amplitude_derivative(dist, config), 0.0)
                + Complex64::new(0.0, wavenumber * amp))
                * phase;
            for axis in 0..3 {
                d[axis][m] = per_dist * grad[axis];
            }
        }
    }
    SidePartials { a, d }
}

#[derive(Debug, Clone)]
struct UserPartials {
    rx: SidePartials,
    tx: SidePartials,
}

/// Analytical derivatives of the reconstructed reflection channel with
/// respect to every user parameter.
#[derive(Debug, Clone)]
pub struct ChannelPartials {
    users: Vec<UserPartials>,
    n: usize,
}

impl ChannelPartials {
    /// Number of parameters, three per user.
    pub fn count(&self) -> usize {
        3 * self.users.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Panel size N.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Rank-two factors of the idx-th derivative: the derivative equals
    /// x1 y1^H + x2 y2^H.
    pub(crate) fn factors(
        &self,
        idx: usize,
    ) -> (
        &Array1<Complex64>,
        &Array1<Complex64>,
        &Array1<Complex64>,
        &Array1<Complex64>,
    ) {
        let user = &self.users[idx / 3];
        let axis = idx % 3;
        (&user.rx.d[axis], &user.tx.a, &user.rx.a, &user.tx.d[axis])
    }

    /// Materializes the idx-th derivative as a dense N x N matrix.
    pub fn materialize(&self, idx: usize) -> Array2<Complex64> {
        let (x1, y1, x2, y2) = self.factors(idx);
        let n = self.n;
        let mut out = Array2::zeros((n, n));
        for m in 0..n {
            for q in 0..n {
                out[(m, q)] = x1[m] * y1[q].conj() + x2[m] * y2[q].conj();
            }
        }
        out
    }

    /// Reconstructed reflection channel (unit reflection coefficients) at
    /// the same parameter vector.
    pub fn reconstructed_channel(&self) -> Array2<Complex64> {
        let n = self.n;
        let mut out = Array2::zeros((n, n));
        for user in &self.users {
            for m in 0..n {
                for q in 0..n {
                    out[(m, q)] += user.rx.a[m] * user.tx.a[q].conj();
                }
            }
        }
        out
    }
}

/// Builds the analytical channel derivatives for a set of user positions.
pub fn channel_partials(zeta: &[SphericalPosition], config: &SystemConfig) -> ChannelPartials {
    let users = zeta
        .iter()
        .map(|pos| UserPartials {
            rx: side_partials(pos, Side::Rx, config),
            tx: side_partials(pos, Side::Tx, config),
        })
        .collect();
    ChannelPartials {
        users,
        n: config.n_total(),
    }
}

/// Post-combining noise covariance: diagonal with one entry per microstrip.
#[derive(Debug, Clone)]
pub struct NoiseCovariance {
    diag: Array1<f64>,
}

impl NoiseCovariance {
    pub fn diag(&self) -> &Array1<f64> {
        &self.diag
    }

    pub fn inv_diag(&self) -> Array1<f64> {
        self.diag.mapv(|x| 1.0 / x)
    }

    pub fn as_matrix(&self) -> Array2<Complex64> {
        let n = self.diag.len();
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            m[(i, i)] = Complex64::new(self.diag[i], 0.0);
        }
        m
    }
}

/// Per-microstrip noise power sigma^2 (w_i o p_i)^H (p_i o w_i); equals the
/// direct product sigma^2 (W^H P^H)(P W) because the analog matrix couples
/// each microstrip to exactly one output.
pub fn noise_covariance(
    w_rx: &AnalogBfMatrix,
    p_rx: &PropagationMatrix,
    config: &SystemConfig,
) -> Result<NoiseCovariance, FimError> {
    let n_rf = w_rx.n_rf();
    let n_e = w_rx.n_e();
    let mut diag = Array1::zeros(n_rf);
    for i in 0..n_rf {
        let mut s = 0.0;
        for n in 0..n_e {
            s += (w_rx.weights()[(i, n)] * p_rx.entry(i * n_e + n)).norm_sqr();
        }
        if s == 0.0 {
            return Err(FimError::SingularNoiseCovariance { microstrip: i });
        }
        diag[i] = config.noise_power * s;
    }
    Ok(NoiseCovariance { diag })
}

/// Fisher information matrix for the stacked user parameters.
#[derive(Debug, Clone)]
pub struct Fim {
    matrix: Array2<f64>,
    num_users: usize,
}

impl Fim {
    pub fn new(matrix: Array2<f64>, num_users: usize) -> Self {
        Self { matrix, num_users }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Position error bound values derived from one Fisher matrix.
#[derive(Debug, Clone, Copy)]
pub struct PebResult {
    /// sqrt(trace of the full inverse); the default bound.
    pub peb_full: f64,
    /// sqrt of the summed reciprocal diagonal entries; ignores parameter
    /// coupling and is kept for comparison.
    pub peb_diag: f64,
    /// Lower bound 9 U^2 / trace on the inverse trace.
    pub trace_bound: f64,
}

/// Precomputed receive-side products that make repeated Fisher evaluations
/// against changing transmit configurations cheap. The combining matrix and
/// channel derivatives are fixed at construction; only the N x U precoded
/// panel response changes per evaluation.
pub struct FimContext {
    n_rf: usize,
    num_users: usize,
    inv_diag: Array1<f64>,
    /// Per parameter: combined left factors (A x1, A x2) and right factors
    /// (y1, y2), with A = W_RX^H P_RX^H.
    per_param: Vec<(
        Array1<Complex64>,
        Array1<Complex64>,
        Array1<Complex64>,
        Array1<Complex64>,
    )>,
    scale: f64,
}

impl FimContext {
    pub fn new(
        w_rx: &AnalogBfMatrix,
        p_rx: &PropagationMatrix,
        partials: &ChannelPartials,
        config: &SystemConfig,
    ) -> Result<Self, FimError> {
        let rn = noise_covariance(w_rx, p_rx, config)?;
        let a = w_rx.combine_matrix(p_rx);
        let num_users = partials.num_users();
        let mut per_param = Vec::with_capacity(3 * num_users);
        for idx in 0..partials.count() {
            let (x1, y1, x2, y2) = partials.factors(idx);
            per_param.push((a.dot(x1), a.dot(x2), y1.clone(), y2.clone()));
        }
        let p_stream = config.p_max / num_users as f64;
        Ok(Self {
            n_rf: w_rx.n_rf(),
            num_users,
            inv_diag: rn.inv_diag(),
            per_param,
            scale: 2.0 * config.t_slots as f64 * p_stream,
        })
    }

    /// Assembles the full Fisher matrix for the precoded panel response
    /// `b = P_TX W_TX V` (N x U).
    pub fn fim(&self, b: &Array2<Complex64>) -> Fim {
        let users = b.ncols();
        let dim = self.per_param.len();
        // mean derivative per parameter, N_RF x U
        let mut g: Vec<Array2<Complex64>> = Vec::with_capacity(dim);
        for (l1, l2, y1, y2) in &self.per_param {
            let mut gi = Array2::zeros((self.n_rf, users));
            let n = y1.len();
            let mut r1 = vec![Complex64::new(0.0, 0.0); users];
            let mut r2 = vec![Complex64::new(0.0, 0.0); users];
            for u in 0..users {
                let mut s1 = Complex64::new(0.0, 0.0);
                let mut s2 = Complex64::new(0.0, 0.0);
                for m in 0..n {
                    s1 += y1[m].conj() * b[(m, u)];
                    s2 += y2[m].conj() * b[(m, u)];
                }
                r1[u] = s1;
                r2[u] = s2;
            }
            for r in 0..self.n_rf {
                for u in 0..users {
                    gi[(r, u)] = l1[r] * r1[u] + l2[r] * r2[u];
                }
            }
            g.push(gi);
        }
        let mut m = Array2::zeros((dim, dim));
        for i in 0..dim {
            for j in i..dim {
                let mut s = 0.0;
                for r in 0..self.n_rf {
                    let w = self.inv_diag[r];
                    for u in 0..users {
                        s += (g[i][(r, u)].conj() * g[j][(r, u)]).re * w;
                    }
                }
                let val = self.scale * s;
                m[(i, j)] = val;
                m[(j, i)] = val;
            }
        }
        Fim {
            matrix: m,
            num_users: self.num_users,
        }
    }
}

/// Full Fisher matrix for one beamforming configuration. Streams enter only
/// through their Gram matrix: T slots of U orthonormal streams carrying
/// p_max / U each.
pub fn fim_assemble(
    w_tx: &AnalogBfMatrix,
    w_rx: &AnalogBfMatrix,
    v: &Array2<Complex64>,
    partials: &ChannelPartials,
    p_tx: &PropagationMatrix,
    p_rx: &PropagationMatrix,
    config: &SystemConfig,
) -> Result<Fim, FimError> {
    let ctx = FimContext::new(w_rx, p_rx, partials, config)?;
    let b = w_tx.precode_matrix(p_tx, v);
    Ok(ctx.fim(&b))
}

/// Position error bounds from a Fisher matrix. Near-singular matrices are
/// reported as unidentifiable rather than silently pseudo-inverted: at the
/// elevation pole, for example, azimuth genuinely carries no information.
pub fn peb(fim: &Fim) -> Result<PebResult, FimError> {
    let (vals, vecs) = linalg::symmetric_eig(fim.matrix());
    let dim = fim.dim();
    let lambda_max = vals[0].max(0.0);
    let tol = 1e-12 * lambda_max;
    let null_count = vals.iter().filter(|&&v| v <= tol).count();
    if null_count > 0 || lambda_max <= 0.0 {
        let cols = null_count.max(1);
        let mut null_basis = Array2::zeros((dim, cols));
        let mut col = 0;
        for (k, &v) in vals.iter().enumerate() {
            if v <= tol && col < cols {
                for r in 0..dim {
                    null_basis[(r, col)] = vecs[(r, k)];
                }
                col += 1;
            }
        }
        return Err(FimError::Unidentifiable {
            dim: cols,
            null_basis,
        });
    }
    let inv_trace: f64 = vals.iter().map(|&v| 1.0 / v).sum();
    let diag_sum: f64 = (0..dim).map(|i| 1.0 / fim.matrix()[(i, i)]).sum();
    let trace: f64 = (0..dim).map(|i| fim.matrix()[(i, i)]).sum();
    let u = fim.num_users() as f64;
    Ok(PebResult {
        peb_full: inv_trace.sqrt(),
        peb_diag: diag_sum.sqrt(),
        trace_bound: 9.0 * u * u / trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::propagation_matrix;
    use crate::codebook::{assemble_analog_matrix, LorentzianCodebook};
    use crate::test_support::{rng, small_config, test_config};
    use ndarray::Array2;
    use rand::Rng;
    use std::f64::consts::PI;

    fn random_codebook_bf(side: Side, cfg: &SystemConfig, seed: u64) -> AnalogBfMatrix {
        let cb = LorentzianCodebook::from_config(cfg);
        let mut r = rng(seed);
        let w = Array2::from_shape_fn((cfg.n_rf, cfg.n_e), |_| cb.weight(r.gen_range(0..cb.len())));
        assemble_analog_matrix(w, side, cfg).unwrap()
    }

    fn positions(k: usize) -> Vec<SphericalPosition> {
        (0..k)
            .map(|i| {
                SphericalPosition::new(3.0 + 1.7 * i as f64, PI / 6.0, 0.5 + 0.6 * i as f64)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn partials_match_central_finite_differences() {
        let mut cfg = small_config(2, 4);
        cfg.absorption_coeff = 0.0033;
        let mut r = rng(21);
        for _ in 0..6 {
            let zeta = vec![
                SphericalPosition::new(
                    2.0 + 6.0 * r.gen::<f64>(),
                    0.3 + 0.9 * r.gen::<f64>(),
                    0.2 + 2.0 * r.gen::<f64>(),
                )
                .unwrap(),
                SphericalPosition::new(
                    2.0 + 6.0 * r.gen::<f64>(),
                    0.3 + 0.9 * r.gen::<f64>(),
                    0.2 + 2.0 * r.gen::<f64>(),
                )
                .unwrap(),
            ];
            let parts = channel_partials(&zeta, &cfg);
            for idx in 0..parts.count() {
                let analytic = parts.materialize(idx);
                let user = idx / 3;
                let axis = idx % 3;
                let base = match axis {
                    0 => zeta[user].r,
                    1 => zeta[user].theta,
                    _ => zeta[user].phi,
                };
                let h = 1e-6 * base.abs().max(1.0);
                let shift = |delta: f64| {
                    let mut z = zeta.clone();
                    match axis {
                        0 => z[user].r += delta,
                        1 => z[user].theta += delta,
                        _ => z[user].phi += delta,
                    }
                    channel_partials(&z, &cfg).reconstructed_channel()
                };
                let plus = shift(h);
                let minus = shift(-h);
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for m in 0..cfg.n_total() {
                    for q in 0..cfg.n_total() {
                        let fd = (plus[(m, q)] - minus[(m, q)]) / (2.0 * h);
                        num += (fd - analytic[(m, q)]).norm_sqr();
                        den += analytic[(m, q)].norm_sqr();
                    }
                }
                assert!(
                    num.sqrt() / den.sqrt() < 1e-6,
                    "idx {idx}: rel err {}",
                    num.sqrt() / den.sqrt()
                );
            }
        }
    }

    #[test]
    fn single_element_range_derivative_is_symbolic() {
        let mut cfg = small_config(1, 1);
        cfg.absorption_coeff = 0.0;
        cfg.d_p = 2e-300;
        cfg.d_rf = 1e-300;
        cfg.d_e = 1e-300;
        let r0 = 4.0;
        let zeta = vec![SphericalPosition::new(r0, PI / 2.0, 0.3).unwrap()];
        let parts = channel_partials(&zeta, &cfg);
        // with coincident panels the channel is alpha(r)^2 and its range
        // derivative is 2 alpha alpha' = -2 alpha^2 / r
        let dh = parts.materialize(0);
        let alpha = amplitude(r0, &cfg);
        assert!((dh[(0, 0)].re - (-2.0 * alpha * alpha / r0)).abs() < 1e-12);
        assert!(dh[(0, 0)].im.abs() < 1e-15);
    }

    #[test]
    fn azimuth_derivative_vanishes_at_the_pole() {
        let cfg = small_config(2, 3);
        let zeta = vec![SphericalPosition::new(5.0, 0.0, 1.0).unwrap()];
        let parts = channel_partials(&zeta, &cfg);
        let dphi = parts.materialize(2);
        for z in dphi.iter() {
            assert!(z.norm() < 1e-300, "azimuth is unidentifiable at theta = 0");
        }
    }

    #[test]
    fn noise_covariance_identity_case_and_quadratic_scaling() {
        let mut cfg = small_config(3, 4);
        cfg.waveguide_alpha = 0.0;
        cfg.waveguide_beta = 0.0;
        cfg.noise_power = 2.0;
        let p = propagation_matrix(Side::Rx, &cfg);
        // unit-norm microstrip weights
        let w = Array2::from_elem((3, 4), Complex64::new(0.5, 0.0));
        let bf = assemble_analog_matrix(w, Side::Rx, &cfg).unwrap();
        let rn = noise_covariance(&bf, &p, &cfg).unwrap();
        for &d in rn.diag().iter() {
            assert!((d - 2.0).abs() < 1e-14);
        }
        // doubling one microstrip's weights quadruples that entry only
        let mut w2 = bf.weights().clone();
        for n in 0..4 {
            w2[(1, n)] *= 2.0;
        }
        let bf2 = assemble_analog_matrix(w2, Side::Rx, &cfg).unwrap();
        let rn2 = noise_covariance(&bf2, &p, &cfg).unwrap();
        assert!((rn2.diag()[0] - rn.diag()[0]).abs() < 1e-14);
        assert!((rn2.diag()[1] - 4.0 * rn.diag()[1]).abs() < 1e-13);
        assert!((rn2.diag()[2] - rn.diag()[2]).abs() < 1e-14);
        // an all-zero microstrip is singular
        let mut w3 = bf.weights().clone();
        for n in 0..4 {
            w3[(0, n)] = Complex64::new(0.0, 0.0);
        }
        let bf3 = assemble_analog_matrix(w3, Side::Rx, &cfg).unwrap();
        assert!(noise_covariance(&bf3, &p, &cfg).is_err());
    }

    #[test]
    fn noise_covariance_two_path_equality() {
        let mut cfg = test_config();
        cfg.waveguide_alpha = 3.0; // lossy guide so the diagonal varies
        let p = propagation_matrix(Side::Rx, &cfg);
        for seed in 0..50 {
            let bf = random_codebook_bf(Side::Rx, &cfg, 100 + seed);
            let rn = noise_covariance(&bf, &p, &cfg).unwrap();
            // oracle: direct matrix product sigma^2 (W^H P^H)(P W)
            let a = bf.combine_matrix(&p);
            let fw = bf.forward_matrix(&p);
            let direct = a.dot(&fw);
            for i in 0..cfg.n_rf {
                for j in 0..cfg.n_rf {
                    let d = direct[(i, j)] * Complex64::new(cfg.noise_power, 0.0);
                    if i == j {
                        assert!(
                            (d.re - rn.diag()[i]).abs() / rn.diag()[i] < 1e-13,
                            "two-path mismatch"
                        );
                        assert!(d.im.abs() < 1e-13 * rn.diag()[i]);
                    } else {
                        assert!(d.norm() < 1e-13 * rn.diag()[i], "off-diagonal leak");
                    }
                }
            }
        }
    }

    fn identity_v(cfg: &SystemConfig, users: usize) -> Array2<Complex64> {
        let mut v = Array2::zeros((cfg.n_rf, users));
        for u in 0..users {
            v[(u, u)] = Complex64::new(1.0, 0.0);
        }
        v
    }

    #[test]
    fn fim_scales_with_slots_power_and_noise() {
        let cfg = small_config(2, 4);
        let p_tx = propagation_matrix(Side::Tx, &cfg);
        let p_rx = propagation_matrix(Side::Rx, &cfg);
        let w_tx = random_codebook_bf(Side::Tx, &cfg, 1);
        let w_rx = random_codebook_bf(Side::Rx, &cfg, 2);
        let zeta = positions(2);
        let parts = channel_partials(&zeta, &cfg);
        let v = identity_v(&cfg, 2);
        let base = fim_assemble(&w_tx, &w_rx, &v, &parts, &p_tx, &p_rx, &cfg).unwrap();
        let mut c2 = cfg.clone();
        c2.t_slots *= 2;
        let doubled = fim_assemble(&w_tx, &w_rx, &v, &parts, &p_tx, &p_rx, &c2).unwrap();
        let mut c3 = cfg.clone();
        c3.noise_power *= 2.0;
        let noisier = fim_assemble(&w_tx, &w_rx, &v, &parts, &p_tx, &p_rx, &c3).unwrap();
        let mut c4 = cfg.clone();
        c4.p_max *= 4.0;
        let boosted = fim_assemble(&w_tx, &w_rx, &v, &parts, &p_tx, &p_rx, &c4).unwrap();
        for i in 0..base.dim() {
            for j in 0..base.dim() {
                let b = base.matrix()[(i, j)];
                let tol = 1e-9 * b.abs().max(1e-300);
                assert!((doubled.matrix()[(i, j)] - 2.0 * b).abs() <= tol);
                assert!((noisier.matrix()[(i, j)] - 0.5 * b).abs() <= tol);
                assert!((boosted.matrix()[(i, j)] - 4.0 * b).abs() <= 4.0 * tol);
            }
        }
        // power scaling carries to the bound: peb(4 P) = peb(P) / 2
        let p1 = peb(&base).unwrap();
        let p4 = peb(&boosted).unwrap();
        assert!((p4.peb_full - p1.peb_full / 2.0).abs() / p1.peb_full < 1e-9);
    }

    #[test]
    fn fim_matches_explicit_mean_oracle() {
        let cfg = small_config(2, 4);
        let p_tx = propagation_matrix(Side::Tx, &cfg);
        let p_rx = propagation_matrix(Side::Rx, &cfg);
        let w_tx = random_codebook_bf(Side::Tx, &cfg, 5);
        let w_rx = random_codebook_bf(Side::Rx, &cfg, 6);
        let zeta = positions(1);
        let parts = channel_partials(&zeta, &cfg);
        let v = identity_v(&cfg, 1);
        let mut c = cfg.clone();
        c.t_slots = 8;
        let fim = fim_assemble(&w_tx, &w_rx, &v, &parts, &p_tx, &p_rx, &c).unwrap();
        // oracle: build T = 8 explicit orthonormal streams at p_max / U per
        // stream and evaluate the quadratic form numerically
        let t = 8;
        let p_stream = c.p_max / 1.0;
        let mut r = rng(77);
        let mut srow = Array1::from_iter(
            (0..t).map(|_| Complex64::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5)),
        );
        let norm = srow.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        srow.mapv_inplace(|z| z / norm * (t as f64 * p_stream).sqrt());
        let s = srow.insert_axis(ndarray::Axis(0)); // 1 x T
        let a = w_rx.combine_matrix(&p_rx);
        let b = w_tx.precode_matrix(&p_tx, &v);
        let rn = noise_covariance(&w_rx, &p_rx, &c).unwrap();
        let inv = rn.inv_diag();
        let dim = parts.count();
        let derivs: Vec<Array2<Complex64>> = (0..dim)
            .map(|i| a.dot(&parts.materialize(i)).dot(&b).dot(&s))
            .collect();
        let mut oracle = Array2::<f64>::zeros((dim, dim));
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = 0.0;
                for rr in 0..c.n_rf {
                    for tt in 0..t {
                        acc += (derivs[i][(rr, tt)].conj() * derivs[j][(rr, tt)]).re * inv[rr];
                    }
                }
                oracle[(i, j)] = 2.0 * acc;
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                let scale = oracle[(i, i)].abs().max(oracle[(j, j)].abs()).max(1e-300);
                assert!(
                    (fim.matrix()[(i, j)] - oracle[(i, j)]).abs() / scale < 1e-9,
                    "({i},{j}): {} vs {}",
                    fim.matrix()[(i, j)],
                    oracle[(i, j)]
                );
            }
        }
    }

    #[test]
    fn fim_is_symmetric_positive_semidefinite() {
        let cfg = small_config(3, 5);
        let p_tx = propagation_matrix(Side::Tx, &cfg);
        let p_rx = propagation_matrix(Side::Rx, &cfg);
        for seed in 0..5 {
            let w_tx = random_codebook_bf(Side::Tx, &cfg, 10 + seed);
            let w_rx = random_codebook_bf(Side::Rx, &cfg, 20 + seed);
            let zeta = positions(2);
            let parts = channel_partials(&zeta, &cfg);
            let v = identity_v(&cfg, 2);
            let fim = fim_assemble(&w_tx, &w_rx, &v, &parts, &p_tx, &p_rx, &cfg).unwrap();
            for i in 0..fim.dim() {
                for j in 0..fim.dim() {
                    assert_eq!(fim.matrix()[(i, j)], fim.matrix()[(j, i)]);
                }
            }
            let (vals, _) = linalg::symmetric_eig(fim.matrix());
            let lmax = vals[0];
            for &v in vals.iter() {
                assert!(v >= -1e-9 * lmax, "eigenvalue {v} vs max {lmax}");
            }
        }
    }

    #[test]
    fn peb_reference_cases_and_trace_bound() {
        // identity Fisher matrix for two users
        let fim = Fim::new(Array2::eye(6), 2);
        let p = peb(&fim).unwrap();
        assert!((p.peb_full - 6.0f64.sqrt()).abs() < 1e-12);
        assert!((p.peb_full - p.peb_diag).abs() < 1e-12);
        // diagonal: full and diagonal bounds coincide
        let mut d = Array2::zeros((6, 6));
        for i in 0..6 {
            d[(i, i)] = 1.0 + i as f64;
        }
        let p = peb(&Fim::new(d, 2)).unwrap();
        assert!((p.peb_full - p.peb_diag).abs() < 1e-12);
        // random SPD matrices: Cauchy-Schwarz bound and diagonal domination
        let mut r = rng(31);
        for _ in 0..20 {
            let g = Array2::from_shape_fn((6, 6), |_| r.gen::<f64>() - 0.5);
            let mut spd = Array2::zeros((6, 6));
            for i in 0..6 {
                for j in 0..6 {
                    let mut s = 0.0;
                    for k in 0..6 {
                        s += g[(i, k)] * g[(j, k)];
                    }
                    spd[(i, j)] = s + if i == j { 0.5 } else { 0.0 };
                }
            }
            let p = peb(&Fim::new(spd, 2)).unwrap();
            assert!(p.peb_full * p.peb_full >= p.trace_bound - 1e-12);
            assert!(p.peb_full >= p.peb_diag - 1e-12);
        }
    }

    #[test]
    fn singular_fim_reports_null_space() {
        // a target at the elevation pole leaves azimuth unidentifiable
        let cfg = small_config(2, 4);
        let p_tx = propagation_matrix(Side::Tx, &cfg);
        let p_rx = propagation_matrix(Side::Rx, &cfg);
        let w_tx = random_codebook_bf(Side::Tx, &cfg, 40);
        let w_rx = random_codebook_bf(Side::Rx, &cfg, 41);
        let zeta = vec![SphericalPosition::new(5.0, 0.0, 1.0).unwrap()];
        let parts = channel_partials(&zeta, &cfg);
        let v = identity_v(&cfg, 1);
        let fim = fim_assemble(&w_tx, &w_rx, &v, &parts, &p_tx, &p_rx, &cfg).unwrap();
        match peb(&fim) {
            Err(FimError::Unidentifiable { dim, null_basis }) => {
                assert!(dim >= 1);
                // the azimuth axis (index 2) must be in the null space
                let mut azimuth_weight = 0.0;
                for c in 0..null_basis.ncols() {
                    azimuth_weight += null_basis[(2, c)].abs();
                }
                assert!(azimuth_weight > 0.9);
            }
            other => panic!("expected unidentifiable, got {other:?}"),
        }
    }
}

//! Maximum-likelihood estimation of target spherical parameters from the
//! post-combining sample covariance.
//!
//! The estimator reconstructs the effective receive-side matrix for a
//! candidate parameter set (with unknown reflection coefficients dropped),
//! projects the sample covariance onto its column space, and maximizes the
//! projected energy. The search runs as a sequence of 1D grid scans per
//! parameter, cycling through azimuth, elevation, and range for a fixed
//! number of sweeps, and estimates targets sequentially: once a target is
//! locked, its column stays in the reconstruction while the next target is
//! searched.

use crate::channel::PropagationMatrix;
use crate::codebook::AnalogBfMatrix;
use crate::linalg;
use crate::scenario::{fraunhofer_distance, Scenario, Side, SphericalPosition, SystemConfig};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("estimate set has {got} targets, scenario has {expected}")]
    TargetCountMismatch { expected: usize, got: usize },
    #[error("search grid invalid: {0}")]
    InvalidGrid(String),
}

/// Sample covariance (1/T) Y Y^H of a received block, Hermitian-symmetrized.
#[derive(Debug, Clone)]
pub struct SampleCovariance {
    pub matrix: Array2<Complex64>,
    pub t_slots: usize,
}

pub fn sample_covariance(y: &Array2<Complex64>) -> SampleCovariance {
    let n = y.nrows();
    let t = y.ncols();
    let mut m = Array2::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            let mut s = Complex64::new(0.0, 0.0);
            for k in 0..t {
                s += y[(a, k)] * y[(b, k)].conj();
            }
            m[(a, b)] = s / t as f64;
        }
    }
    SampleCovariance {
        matrix: linalg::hermitian_part(&m),
        t_slots: t,
    }
}

/// Beamforming chain the estimator observes the world through.
pub struct EstimationContext<'a> {
    /// Combining matrix W_RX^H P_RX^H, n_rf x N.
    combine: Array2<Complex64>,
    /// Precoded panel response P_TX W_TX V, N x U.
    precode: Array2<Complex64>,
    pub config: &'a SystemConfig,
    pub num_targets: usize,
}

impl<'a> EstimationContext<'a> {
    pub fn new(
        w_tx: &AnalogBfMatrix,
        w_rx: &AnalogBfMatrix,
        v: &Array2<Complex64>,
        p_tx: &PropagationMatrix,
        p_rx: &PropagationMatrix,
        config: &'a SystemConfig,
        num_targets: usize,
    ) -> Self {
        Self {
            combine: w_rx.combine_matrix(p_rx),
            precode: w_tx.precode_matrix(p_tx, v),
            config,
            num_targets,
        }
    }

    /// Effective column contributed by one candidate target: the pair
    /// (A a_rx, a_tx^H B) whose outer product enters the reconstruction.
    fn target_factors(&self, pos: &SphericalPosition) -> (Array1<Complex64>, Array1<Complex64>) {
        let cfg = self.config;
        let n_rf = self.combine.nrows();
        let users = self.precode.ncols();
        let mut left = Array1::zeros(n_rf);
        let mut right = Array1::zeros(users);
        let lambda = crate::scenario::wavelength(cfg);
        let wavenumber = 2.0 * std::f64::consts::PI / lambda;
        for i in 0..cfg.n_rf {
            for nn in 0..cfg.n_e {
                let m = i * cfg.n_e + nn;
                let d_rx =
                    crate::scenario::element_distance_side(Side::Rx, pos, i, nn, cfg);
                let a_rx = Complex64::from_polar(
                    crate::channel::amplitude(d_rx, cfg),
                    wavenumber * d_rx,
                );
                for r in 0..n_rf {
                    left[r] += self.combine[(r, m)] * a_rx;
                }
                let d_tx =
                    crate::scenario::element_distance_side(Side::Tx, pos, i, nn, cfg);
                let a_tx = Complex64::from_polar(
                    crate::channel::amplitude(d_tx, cfg),
                    wavenumber * d_tx,
                );
                for u in 0..users {
                    right[u] += a_tx.conj() * self.precode[(m, u)];
                }
            }
        }
        (left, right)
    }
}

/// Reconstructs the effective matrix A H B for candidate target parameters
/// with all reflection coefficients set to one.
pub fn reconstruct_virtual_channel(
    zeta: &[SphericalPosition],
    ctx: &EstimationContext<'_>,
) -> Array2<Complex64> {
    let n_rf = ctx.combine.nrows();
    let users = ctx.precode.ncols();
    let mut h = Array2::zeros((n_rf, users));
    for pos in zeta {
        let (left, right) = ctx.target_factors(pos);
        for r in 0..n_rf {
            for u in 0..users {
                h[(r, u)] += left[r] * right[u];
            }
        }
    }
    h
}

/// Value of the projection objective together with a flag telling whether
/// the reconstruction was rank-deficient and needed a ridge.
#[derive(Debug, Clone, Copy)]
pub struct MleValue {
    pub value: f64,
    pub regularized: bool,
}

/// Projected covariance energy Tr{Q R} with Q the orthogonal projector onto
/// the column space of `h_eff`. Rank-deficient reconstructions get a ridge
/// of 1e-10 * trace on the Gram matrix and are flagged.
pub fn projection_objective(h_eff: &Array2<Complex64>, r_sample: &Array2<Complex64>) -> MleValue {
    let cols = h_eff.ncols();
    let gram = linalg::adjoint(h_eff).dot(h_eff);
    let trace: f64 = (0..cols).map(|i| gram[(i, i)].re).sum();
    if trace <= 0.0 {
        return MleValue {
            value: 0.0,
            regularized: true,
        };
    }
    let (vals, vecs) = linalg::hermitian_eig(&gram);
    let deficient = vals.iter().any(|&v| v <= 1e-10 * trace);
    let ridge = if deficient { 1e-10 * trace } else { 0.0 };
    // G^-1 via the eigenbasis, ridged when deficient
    let mut ginv = Array2::zeros((cols, cols));
    for a in 0..cols {
        for b in 0..cols {
            let mut s = Complex64::new(0.0, 0.0);
            for k in 0..cols {
                s += vecs[(a, k)] * vecs[(b, k)].conj() / (vals[k].max(0.0) + ridge);
            }
            ginv[(a, b)] = s;
        }
    }
    // Tr{H G^-1 H^H R} = Tr{G^-1 (H^H R H)}
    let hrh = linalg::adjoint(h_eff).dot(r_sample).dot(h_eff);
    let mut value = 0.0;
    for a in 0..cols {
        for b in 0..cols {
            value += (ginv[(a, b)] * hrh[(b, a)]).re;
        }
    }
    MleValue {
        value,
        regularized: deficient,
    }
}

/// Objective for a full candidate parameter set.
pub fn mle_objective(
    zeta: &[SphericalPosition],
    r_sample: &SampleCovariance,
    ctx: &EstimationContext<'_>,
) -> MleValue {
    let h = reconstruct_virtual_channel(zeta, ctx);
    projection_objective(&h, &r_sample.matrix)
}

/// 1D grid specification per spherical axis plus the sweep count.
#[derive(Debug, Clone)]
pub struct SearchGrid {
    pub r: (f64, f64, usize),
    pub theta: (f64, f64, usize),
    pub phi: (f64, f64, usize),
    pub sweeps: usize,
}

impl SearchGrid {
    pub fn validate(&self) -> Result<(), EstimationError> {
        for (name, &(lo, hi, n)) in [("r", &self.r), ("theta", &self.theta), ("phi", &self.phi)] {
            if n < 2 {
                return Err(EstimationError::InvalidGrid(format!(
                    "{name} axis needs at least 2 points"
                )));
            }
            if !(hi > lo) {
                return Err(EstimationError::InvalidGrid(format!(
                    "{name} axis range is empty"
                )));
            }
        }
        if self.r.0 <= 0.0 {
            return Err(EstimationError::InvalidGrid("range must start above 0".into()));
        }
        if self.theta.0 < 0.0 || self.theta.1 > std::f64::consts::PI {
            return Err(EstimationError::InvalidGrid(
                "elevation must stay within [0, pi]".into(),
            ));
        }
        if self.sweeps == 0 {
            return Err(EstimationError::InvalidGrid("at least one sweep required".into()));
        }
        Ok(())
    }

    fn axis_points(axis: (f64, f64, usize)) -> Vec<f64> {
        let (lo, hi, n) = axis;
        (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Estimated spherical parameters for every target plus the final objective.
#[derive(Debug, Clone)]
pub struct EstimateSet {
    pub estimates: Vec<SphericalPosition>,
    pub objective_trace: f64,
}

/// Number of elevation grid points the cyclic search restarts from.
const THETA_STARTS: usize = 8;

/// Sequential per-target estimation by cyclic 1D searches.
///
/// Range starts at the panel's near/far-field boundary clamped into the
/// grid. Because the microstrips are offset along a single axis, the
/// objective carries a conical ridge that couples elevation and azimuth
/// and can freeze a single axis-aligned ascent; the search therefore
/// restarts from a few evenly spaced elevation grid points and keeps the
/// best outcome. Each scan keeps the first grid point on ties, so a flat
/// objective yields a deterministic result.
pub fn estimate_targets(
    r_sample: &SampleCovariance,
    ctx: &EstimationContext<'_>,
    grid: &SearchGrid,
) -> Result<EstimateSet, EstimationError> {
    grid.validate()?;
    let r_points = SearchGrid::axis_points(grid.r);
    let theta_points = SearchGrid::axis_points(grid.theta);
    let phi_points = SearchGrid::axis_points(grid.phi);
    let fraunhofer = fraunhofer_distance(ctx.config.aperture(), ctx.config);
    let r_init = fraunhofer.clamp(grid.r.0, grid.r.1);
    let starts = THETA_STARTS.min(theta_points.len());
    let mut locked: Vec<SphericalPosition> = Vec::with_capacity(ctx.num_targets);
    let mut final_objective = 0.0;
    for _target in 0..ctx.num_targets {
        let mut best: Option<(f64, SphericalPosition)> = None;
        for s in 0..starts {
            let theta_idx = if starts == 1 {
                0
            } else {
                s * (theta_points.len() - 1) / (starts - 1)
            };
            let mut cand = SphericalPosition {
                r: r_init,
                theta: theta_points[theta_idx],
                phi: phi_points[phi_points.len() / 2],
            };
            let mut cand_val = f64::NEG_INFINITY;
            for _sweep in 0..grid.sweeps {
                for (axis, points) in [(2usize, &phi_points), (1, &theta_points), (0, &r_points)]
                {
                    let mut best_val = f64::NEG_INFINITY;
                    let mut best_x = points[0];
                    for &x in points.iter() {
                        let mut probe = cand;
                        match axis {
                            0 => probe.r = x,
                            1 => probe.theta = x,
                            _ => probe.phi = x,
                        }
                        let mut zeta = locked.clone();
                        zeta.push(probe);
                        let val = mle_objective(&zeta, r_sample, ctx).value;
                        if val > best_val {
                            best_val = val;
                            best_x = x;
                        }
                    }
                    match axis {
                        0 => cand.r = best_x,
                        1 => cand.theta = best_x,
                        _ => cand.phi = best_x,
                    }
                    cand_val = best_val;
                }
            }
            if best.as_ref().map_or(true, |(v, _)| cand_val > *v) {
                best = Some((cand_val, cand));
            }
        }
        let (val, cand) = best.expect("at least one start");
        final_objective = val;
        locked.push(cand);
    }
    Ok(EstimateSet {
        estimates: locked,
        objective_trace: final_objective,
    })
}

/// Root mean square Cartesian position error after associating estimates to
/// true targets. Association minimizes total squared error exhaustively for
/// up to four targets and greedily beyond that.
pub fn rmse(estimates: &EstimateSet, truth: &Scenario) -> Result<f64, EstimationError> {
    let k = truth.num_targets();
    if estimates.estimates.len() != k {
        return Err(EstimationError::TargetCountMismatch {
            expected: k,
            got: estimates.estimates.len(),
        });
    }
    let cost = |a: &SphericalPosition, b: &SphericalPosition| -> f64 {
        let ca = a.cartesian();
        let cb = b.cartesian();
        (ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)
    };
    let total: f64 = if k <= 4 {
        // exhaustive assignment
        let mut perm: Vec<usize> = (0..k).collect();
        permute_min(&mut perm, 0, &|assign: &[usize]| {
            assign
                .iter()
                .enumerate()
                .map(|(t, &e)| cost(&truth.targets[t], &estimates.estimates[e]))
                .sum()
        })
    } else {
        // greedy nearest matching
        let mut used = vec![false; k];
        let mut acc = 0.0;
        for t in 0..k {
            let mut best = f64::INFINITY;
            let mut best_e = 0;
            for (e, pos) in estimates.estimates.iter().enumerate() {
                if !used[e] {
                    let c = cost(&truth.targets[t], pos);
                    if c < best {
                        best = c;
                        best_e = e;
                    }
                }
            }
            used[best_e] = true;
            acc += best;
        }
        acc
    };
    Ok((total / k as f64).sqrt())
}

fn permute_min(perm: &mut Vec<usize>, start: usize, eval: &dyn Fn(&[usize]) -> f64) -> f64 {
    if start == perm.len() {
        return eval(perm);
    }
    let mut best = f64::INFINITY;
    for i in start..perm.len() {
        perm.swap(start, i);
        best = best.min(permute_min(perm, start + 1, eval));
        perm.swap(start, i);
    }
    best
}

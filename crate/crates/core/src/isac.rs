//! Joint sensing/communication configuration of the full-duplex node: the
//! weighted combination of the two single-purpose designs, digital
//! self-interference cancellation, residual-interference accounting, and
//! the end-to-end design procedure.
//!
//! The design first estimates the targets through a probe configuration,
//! builds the sensing- and communication-optimized beamformers at the
//! estimated parameters, scans a grid of blend weights for the combination
//! that maximizes the downlink rate subject to the position-error-bound
//! threshold, then installs the digital canceller and truncates the
//! precoder basis until both the residual self-interference and the bound
//! constraints hold.

use crate::channel::{ChannelSet, PropagationMatrix};
use crate::codebook::{assemble_analog_matrix, AnalogBfMatrix, LorentzianCodebook};
use crate::comm_opt::{self, CommOptError};
use crate::crb_opt::{self, CrbOptError};
use crate::estimation::{self, EstimateSet, EstimationContext, EstimationError, SearchGrid};
use crate::fim::{self, FimContext, FimError};
use crate::harness::{synthesize_received, SymbolBlock};
use crate::linalg;
use crate::scenario::{Scenario, Side, SphericalPosition, SystemConfig};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IsacError {
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Fim(#[from] FimError),
    #[error(transparent)]
    CrbOpt(#[from] CrbOptError),
    #[error(transparent)]
    CommOpt(#[from] CommOptError),
}

/// Complete reconfigurable state of the full-duplex node.
#[derive(Debug, Clone)]
pub struct BfConfiguration {
    pub w_tx: AnalogBfMatrix,
    pub w_rx: AnalogBfMatrix,
    /// Digital precoder, n_rf x U.
    pub v: Array2<Complex64>,
    /// Digital self-interference canceller, n_rf x n_rf.
    pub d: Array2<Complex64>,
    /// Right-singular basis of the negated canceller; truncated columns are
    /// zeroed by the feasibility loop.
    pub f_basis: Array2<Complex64>,
    /// Blend weight of the communication analog matrix.
    pub xi: f64,
    /// Blend weight of the communication precoder.
    pub rho: f64,
}

/// One evaluated blend-weight grid point.
#[derive(Debug, Clone, Copy)]
pub struct GridPoint {
    pub xi: f64,
    pub rho: f64,
    pub sum_rate: f64,
    /// Position error bound at the estimated parameters; infinite when the
    /// Fisher matrix was singular.
    pub peb: f64,
    pub peb_feasible: bool,
}

/// Outcome of the end-to-end design.
#[derive(Debug, Clone)]
pub struct IsacSolution {
    pub bf: BfConfiguration,
    /// Downlink sum rate on the reconstructed channels.
    pub sum_rate: f64,
    /// Position error bound at the estimated parameters.
    pub peb: f64,
    /// Residual self-interference power per microstrip output.
    pub residual_si: Vec<f64>,
    pub feasible: bool,
    pub grid_trace: Vec<GridPoint>,
    /// Probe-round estimates for every target.
    pub estimates: EstimateSet,
    /// Estimated positions of the downlink users, in user order.
    pub user_estimates: Vec<SphericalPosition>,
    /// Reconstructed downlink channels the design optimized against.
    pub est_h_dl: Vec<Array1<Complex64>>,
    /// Number of precoder basis columns left active by the truncation loop.
    pub active_basis_cols: usize,
}

/// How the blend weights are chosen.
#[derive(Debug, Clone, Copy)]
pub enum CombinerMode {
    /// Scan the full (xi, rho) grid.
    Grid,
    /// Pin both weights, still recording the single evaluated point.
    Forced { xi: f64, rho: f64 },
}

/// Entrywise blend of the two analog designs followed by nearest-codeword
/// projection (the realizable weight set is not closed under convex
/// combinations), plus the blended precoder rescaled for transmit power
/// equality under the blended analog matrix.
pub fn combine_designs(
    sensing: (&AnalogBfMatrix, &Array2<Complex64>),
    comm: (&AnalogBfMatrix, &Array2<Complex64>),
    xi: f64,
    rho: f64,
    codebook: &LorentzianCodebook,
    p_tx: &PropagationMatrix,
    config: &SystemConfig,
) -> (AnalogBfMatrix, Array2<Complex64>) {
    let (w_s, v_s) = sensing;
    let (w_c, v_c) = comm;
    let xi_c = Complex64::new(xi, 0.0);
    let xi_s = Complex64::new(1.0 - xi, 0.0);
    let mut weights = Array2::zeros((config.n_rf, config.n_e));
    for i in 0..config.n_rf {
        for nn in 0..config.n_e {
            let blended = xi_c * w_c.weights()[(i, nn)] + xi_s * w_s.weights()[(i, nn)];
            weights[(i, nn)] = codebook.nearest(blended).1;
        }
    }
    let w_tx = assemble_analog_matrix(weights, Side::Tx, config)
        .expect("blended weights match the configured panel");
    let rho_c = Complex64::new(rho, 0.0);
    let rho_s = Complex64::new(1.0 - rho, 0.0);
    let users = v_c.ncols();
    let mut v = Array2::zeros((config.n_rf, users));
    for i in 0..config.n_rf {
        for u in 0..users {
            v[(i, u)] = rho_c * v_c[(i, u)] + rho_s * v_s[(i, u)];
        }
    }
    comm_opt::scale_precoder_for_power(&mut v, &w_tx, p_tx, config);
    (w_tx, v)
}

/// Effective self-interference matrix W_RX^H P_RX^H H_SI P_TX W_TX.
pub fn effective_si(
    w_rx: &AnalogBfMatrix,
    w_tx: &AnalogBfMatrix,
    channels: &ChannelSet,
) -> Array2<Complex64> {
    let a = w_rx.combine_matrix(&channels.p_rx);
    let fw = w_tx.forward_matrix(&channels.p_tx);
    a.dot(&channels.h_si).dot(&fw)
}

/// Digital canceller: the negated effective self-interference matrix. With
/// an untruncated basis the digital-domain interference term vanishes
/// exactly.
pub fn si_canceller(
    w_rx: &AnalogBfMatrix,
    w_tx: &AnalogBfMatrix,
    channels: &ChannelSet,
) -> Array2<Complex64> {
    effective_si(w_rx, w_tx, channels).mapv(|z| -z)
}

/// Row-wise residual interference power at each microstrip output:
/// squared norms of the rows of (effective_si + D) V.
pub fn residual_si(bf: &BfConfiguration, channels: &ChannelSet) -> Vec<f64> {
    let eff = effective_si(&bf.w_rx, &bf.w_tx, channels);
    let n_rf = eff.nrows();
    let users = bf.v.ncols();
    let mut rows = Vec::with_capacity(n_rf);
    for i in 0..n_rf {
        let mut row = 0.0;
        for u in 0..users {
            let mut s = Complex64::new(0.0, 0.0);
            for j in 0..n_rf {
                s += (eff[(i, j)] + bf.d[(i, j)]) * bf.v[(j, u)];
            }
            row += s.norm_sqr();
        }
        rows.push(row);
    }
    rows
}

/// Smallest threshold any row of the residual interference can satisfy:
/// the squared spectral norm of (effective_si + D) V, which upper-bounds
/// every row's squared norm. Zero when the canceller is exact.
pub fn gamma_si_feasibility(bf: &BfConfiguration, channels: &ChannelSet) -> f64 {
    let eff = effective_si(&bf.w_rx, &bf.w_tx, channels);
    let residual_matrix = (&eff + &bf.d).dot(&bf.v);
    let f = linalg::svd(&residual_matrix);
    f.sigma[0] * f.sigma[0]
}

fn zero_trailing_columns(basis: &Array2<Complex64>, keep: usize) -> Array2<Complex64> {
    let mut b = basis.clone();
    for c in keep..b.ncols() {
        for r in 0..b.nrows() {
            b[(r, c)] = Complex64::new(0.0, 0.0);
        }
    }
    b
}

/// Precoder through the truncated basis: block-diagonalization on the
/// basis-projected effective channels, mapped back and power-normalized.
fn precoder_in_basis(
    w_tx: &AnalogBfMatrix,
    h_dl: &[Array1<Complex64>],
    basis: &Array2<Complex64>,
    active: usize,
    p_tx: &PropagationMatrix,
    config: &SystemConfig,
) -> Result<Array2<Complex64>, CommOptError> {
    let g = comm_opt::effective_rows(w_tx, h_dl, p_tx);
    let users = g.nrows();
    let n_rf = g.ncols();
    let mut g_proj = Array2::zeros((users, active));
    for u in 0..users {
        for c in 0..active {
            let mut s = Complex64::new(0.0, 0.0);
            for i in 0..n_rf {
                s += g[(u, i)] * basis[(i, c)];
            }
            g_proj[(u, c)] = s;
        }
    }
    let v_tilde = comm_opt::bd_unit_directions(&g_proj)?;
    let mut v = Array2::zeros((n_rf, users));
    for u in 0..users {
        for i in 0..n_rf {
            let mut s = Complex64::new(0.0, 0.0);
            for c in 0..active {
                s += basis[(i, c)] * v_tilde[(c, u)];
            }
            v[(i, u)] = s;
        }
    }
    comm_opt::scale_precoder_for_power(&mut v, w_tx, p_tx, config);
    Ok(v)
}

/// Associates estimated positions to scenario targets by minimal total
/// squared Cartesian error (exhaustive up to four targets, greedy beyond)
/// and returns, for each target index, its matched estimate.
pub fn associate_estimates(
    estimates: &[SphericalPosition],
    scenario: &Scenario,
) -> Vec<SphericalPosition> {
    let k = scenario.targets.len();
    let cost = |a: &SphericalPosition, b: &SphericalPosition| -> f64 {
        let ca = a.cartesian();
        let cb = b.cartesian();
        (ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)
    };
    let mut assignment: Vec<usize> = (0..k).collect();
    if k <= 4 {
        let mut best_cost = f64::INFINITY;
        let mut perm: Vec<usize> = (0..k).collect();
        permute(&mut perm, 0, &mut |p: &[usize]| {
            let c: f64 = p
                .iter()
                .enumerate()
                .map(|(t, &e)| cost(&scenario.targets[t], &estimates[e]))
                .sum();
            if c < best_cost {
                best_cost = c;
                assignment.copy_from_slice(p);
            }
        });
    } else {
        let mut used = vec![false; k];
        for t in 0..k {
            let mut best = f64::INFINITY;
            let mut best_e = 0;
            for (e, pos) in estimates.iter().enumerate() {
                if !used[e] {
                    let c = cost(&scenario.targets[t], pos);
                    if c < best {
                        best = c;
                        best_e = e;
                    }
                }
            }
            used[best_e] = true;
            assignment[t] = best_e;
        }
    }
    assignment.iter().map(|&e| estimates[e]).collect()
}

fn permute(perm: &mut Vec<usize>, start: usize, visit: &mut dyn FnMut(&[usize])) {
    if start == perm.len() {
        visit(perm);
        return;
    }
    for i in start..perm.len() {
        perm.swap(start, i);
        permute(perm, start + 1, visit);
        perm.swap(start, i);
    }
}

fn random_codebook_matrix(
    side: Side,
    codebook: &LorentzianCodebook,
    config: &SystemConfig,
    rng: &mut ChaCha8Rng,
) -> AnalogBfMatrix {
    let w = Array2::from_shape_fn((config.n_rf, config.n_e), |_| {
        codebook.weight(rng.gen_range(0..codebook.len()))
    });
    assemble_analog_matrix(w, side, config).expect("random weights match the configured panel")
}

/// End-to-end configuration of the full-duplex node for one scenario.
///
/// A randomly drawn codebook configuration probes the scene first; its
/// received block feeds the target estimator. The sensing and
/// communication designs are then built at the estimated parameters,
/// blended per `mode`, and finished with the digital canceller and the
/// basis-truncation feasibility loop. Identical seeds and inputs yield
/// bit-identical solutions.
pub fn isac_design(
    scenario: &Scenario,
    channels: &ChannelSet,
    config: &SystemConfig,
    rng: &mut ChaCha8Rng,
    mode: CombinerMode,
    est_grid: &SearchGrid,
) -> Result<IsacSolution, IsacError> {
    let codebook = LorentzianCodebook::from_config(config);
    let users = scenario.num_users();
    let k = scenario.num_targets();

    // probe round: random feasible configuration with exact cancellation
    let probe_tx = random_codebook_matrix(Side::Tx, &codebook, config, rng);
    let probe_rx = random_codebook_matrix(Side::Rx, &codebook, config, rng);
    let mut probe_v: Array2<Complex64> = Array2::zeros((config.n_rf, users));
    for u in 0..users {
        probe_v[(u % config.n_rf, u)] = Complex64::new(1.0, 0.0);
    }
    comm_opt::scale_precoder_for_power(&mut probe_v, &probe_tx, &channels.p_tx, config);
    let probe_d = si_canceller(&probe_rx, &probe_tx, channels);
    let probe_bf = BfConfiguration {
        w_tx: probe_tx,
        w_rx: probe_rx,
        v: probe_v,
        d: probe_d,
        f_basis: Array2::eye(config.n_rf),
        xi: 0.0,
        rho: 0.0,
    };
    let symbols = SymbolBlock::generate(users, config.t_slots, config.p_max, rng);
    let y = synthesize_received(&probe_bf, channels, &symbols, rng, config);
    let r_sample = estimation::sample_covariance(&y);
    let probe_ctx = EstimationContext::new(
        &probe_bf.w_tx,
        &probe_bf.w_rx,
        &probe_bf.v,
        &channels.p_tx,
        &channels.p_rx,
        config,
        k,
    );
    let estimates = estimation::estimate_targets(&r_sample, &probe_ctx, est_grid)?;
    let per_target = associate_estimates(&estimates.estimates, scenario);
    let user_estimates: Vec<SphericalPosition> = scenario
        .user_indices
        .iter()
        .map(|&u| per_target[u])
        .collect();

    // reconstructed channels and derivative structures at the estimates
    let est_h_dl: Vec<Array1<Complex64>> = user_estimates
        .iter()
        .map(|p| crate::channel::dl_channel(p, config))
        .collect();
    let partials = fim::channel_partials(&user_estimates, config);
    let k_mats = crb_opt::k_matrices(&partials, &channels.p_tx, &channels.p_rx, config);

    // sensing design
    let alternation = crb_opt::alternate_crb(&k_mats, config)?;
    let w_rx_s = crb_opt::project_rx_to_codebook(&alternation.rx, &codebook, &channels.p_rx, config)
        .expect("projected receive weights match the configured panel");
    let factorization =
        crb_opt::factorize_tx(&alternation.f_tx, &codebook, &channels.p_tx, config, users)?;

    // communication design on the reconstructed channels
    let comm = comm_opt::comm_design(&est_h_dl, &channels.p_tx, &codebook, config)?;

    // blend-weight selection under the bound constraint
    let fim_ctx = FimContext::new(&w_rx_s, &channels.p_rx, &partials, config)?;
    let evaluate = |xi: f64, rho: f64| -> (AnalogBfMatrix, Array2<Complex64>, GridPoint) {
        let (w_tx, v) = combine_designs(
            (&factorization.w_tx, &factorization.v),
            (&comm.w_tx_c, &comm.v_c),
            xi,
            rho,
            &codebook,
            &channels.p_tx,
            config,
        );
        let b = w_tx.precode_matrix(&channels.p_tx, &v);
        let peb = match fim::peb(&fim_ctx.fim(&b)) {
            Ok(p) => p.peb_full,
            Err(_) => f64::INFINITY,
        };
        let rate = comm_opt::sum_rate(&w_tx, &v, &est_h_dl, &channels.p_tx, config);
        let point = GridPoint {
            xi,
            rho,
            sum_rate: rate,
            peb,
            peb_feasible: peb <= config.gamma_s,
        };
        (w_tx, v, point)
    };
    let mut grid_trace = Vec::new();
    let mut chosen: Option<(AnalogBfMatrix, Array2<Complex64>, GridPoint)> = None;
    let mut fallback: Option<(AnalogBfMatrix, Array2<Complex64>, GridPoint)> = None;
    let points: Vec<(f64, f64)> = match mode {
        CombinerMode::Forced { xi, rho } => vec![(xi, rho)],
        CombinerMode::Grid => {
            let step = config.grid_resolution_xi_rho;
            let count = (1.0 / step).round() as usize;
            let mut pts = Vec::new();
            for a in 0..=count {
                let xi = (a as f64 * step).min(1.0);
                for b in 0..=count {
                    let rho = (b as f64 * step).min(1.0);
                    pts.push((xi, rho));
                }
            }
            pts
        }
    };
    for (xi, rho) in points {
        let (w_tx, v, point) = evaluate(xi, rho);
        grid_trace.push(point);
        let better_fallback = fallback
            .as_ref()
            .map_or(true, |(_, _, cur)| point.peb < cur.peb);
        if better_fallback {
            fallback = Some((w_tx.clone(), v.clone(), point));
        }
        if point.peb_feasible {
            let better = chosen.as_ref().map_or(true, |(_, _, cur)| {
                point.sum_rate > cur.sum_rate
                    || (point.sum_rate == cur.sum_rate && point.peb < cur.peb)
            });
            if better {
                chosen = Some((w_tx, v, point));
            }
        }
    }
    let grid_feasible = chosen.is_some();
    let (w_tx, v_combined, point) =
        chosen.unwrap_or_else(|| fallback.expect("at least one grid point evaluated"));

    // digital canceller and truncated-basis feasibility loop
    let d = si_canceller(&w_rx_s, &w_tx, channels);
    let f_basis_full = linalg::svd(&d.mapv(|z| -z)).v;
    let mut accepted: Option<(Array2<Complex64>, Array2<Complex64>, usize, Vec<f64>, f64, bool)> =
        None;
    let mut last_attempt: Option<(Array2<Complex64>, Array2<Complex64>, usize, Vec<f64>, f64)> =
        None;
    for active in (users..=config.n_rf).rev() {
        let basis = zero_trailing_columns(&f_basis_full, active);
        let v = match precoder_in_basis(&w_tx, &est_h_dl, &basis, active, &channels.p_tx, config) {
            Ok(v) => v,
            Err(_) => continue, // this truncation level cannot carry the streams
        };
        let bf = BfConfiguration {
            w_tx: w_tx.clone(),
            w_rx: w_rx_s.clone(),
            v: v.clone(),
            d: d.clone(),
            f_basis: basis.clone(),
            xi: point.xi,
            rho: point.rho,
        };
        let rows = residual_si(&bf, channels);
        let si_ok = rows.iter().all(|&r| r <= config.gamma_si);
        let b = w_tx.precode_matrix(&channels.p_tx, &v);
        let peb = match fim::peb(&fim_ctx.fim(&b)) {
            Ok(p) => p.peb_full,
            Err(_) => f64::INFINITY,
        };
        let peb_ok = peb <= config.gamma_s;
        last_attempt = Some((basis.clone(), v.clone(), active, rows.clone(), peb));
        if si_ok && peb_ok {
            accepted = Some((basis, v, active, rows, peb, true));
            break;
        }
    }
    let (basis, v_final, active, rows, peb_final, loop_feasible) = match accepted {
        Some(t) => t,
        None => match last_attempt {
            Some((basis, v, active, rows, peb)) => (basis, v, active, rows, peb, false),
            None => {
                // every truncation level failed to carry the streams; fall
                // back to the combined precoder with the full basis
                let bf = BfConfiguration {
                    w_tx: w_tx.clone(),
                    w_rx: w_rx_s.clone(),
                    v: v_combined.clone(),
                    d: d.clone(),
                    f_basis: f_basis_full.clone(),
                    xi: point.xi,
                    rho: point.rho,
                };
                let rows = residual_si(&bf, channels);
                let b = w_tx.precode_matrix(&channels.p_tx, &v_combined);
                let peb = match fim::peb(&fim_ctx.fim(&b)) {
                    Ok(p) => p.peb_full,
                    Err(_) => f64::INFINITY,
                };
                (f_basis_full.clone(), v_combined.clone(), config.n_rf, rows, peb, false)
            }
        },
    };
    let bf = BfConfiguration {
        w_tx,
        w_rx: w_rx_s,
        v: v_final,
        d,
        f_basis: basis,
        xi: point.xi,
        rho: point.rho,
    };
    let rate = comm_opt::sum_rate(&bf.w_tx, &bf.v, &est_h_dl, &channels.p_tx, config);
    // independent re-check of the feasibility flag
    let rows_check = residual_si(&bf, channels);
    let feasible = grid_feasible
        && loop_feasible
        && rows_check.iter().all(|&r| r <= config.gamma_si)
        && peb_final <= config.gamma_s;
    Ok(IsacSolution {
        bf,
        sum_rate: rate,
        peb: peb_final,
        residual_si: rows,
        feasible,
        grid_trace,
        estimates,
        user_estimates,
        est_h_dl,
        active_basis_cols: active,
    })
}

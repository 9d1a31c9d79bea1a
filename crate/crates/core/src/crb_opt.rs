//! Sensing-oriented beamformer design: alternating optimization of the
//! relaxed transmit and receive Gram matrices against the Fisher-trace
//! objective, codebook projection of the receive solution, and
//! factorization of the transmit Gram back into an analog matrix and a
//! digital precoder.
//!
//! Both relaxed subproblems admit closed forms. The receive step maximizes
//! a linear functional over rank-one positive blocks, solved per microstrip
//! by the principal eigenvector of that block's gain matrix. The transmit
//! step maximizes the inner product with a positive semidefinite matrix of
//! unit Frobenius budget, solved by normalizing the positive part. No
//! external conic solver is involved.

use crate::channel::PropagationMatrix;
use crate::codebook::{assemble_analog_matrix, AnalogBfMatrix, LorentzianCodebook};
use crate::fim::ChannelPartials;
use crate::linalg;
use crate::scenario::{Side, SystemConfig};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CrbOptError {
    #[error("transmit gain matrix has no positive part; sensing design is degenerate")]
    DegenerateTxGram,
    #[error("factorization needs between one and n_rf users, got {0}")]
    BadUserCount(usize),
}

/// Effective channel-derivative matrices with the in-microstrip propagation
/// folded in. Each is rank two; the factors are stored and dense matrices
/// are materialized only on demand.
pub struct KMatrices {
    factors: Vec<(
        Array1<Complex64>,
        Array1<Complex64>,
        Array1<Complex64>,
        Array1<Complex64>,
    )>,
    n_rf: usize,
    n_e: usize,
}

impl KMatrices {
    pub fn count(&self) -> usize {
        self.factors.len()
    }

    pub fn n(&self) -> usize {
        self.n_rf * self.n_e
    }

    pub fn n_rf(&self) -> usize {
        self.n_rf
    }

    pub fn n_e(&self) -> usize {
        self.n_e
    }

    /// Dense matrix x1 y1^H + x2 y2^H for oracle checks and debugging.
    pub fn materialize(&self, idx: usize) -> Array2<Complex64> {
        let (x1, y1, x2, y2) = &self.factors[idx];
        let n = self.n();
        let mut out = Array2::zeros((n, n));
        for m in 0..n {
            for q in 0..n {
                out[(m, q)] = x1[m] * y1[q].conj() + x2[m] * y2[q].conj();
            }
        }
        out
    }
}

/// Builds the derivative chain P_RX^H dH P_TX for every user parameter.
pub fn k_matrices(
    partials: &ChannelPartials,
    p_tx: &PropagationMatrix,
    p_rx: &PropagationMatrix,
    config: &SystemConfig,
) -> KMatrices {
    let n = config.n_total();
    let mut factors = Vec::with_capacity(partials.count());
    for idx in 0..partials.count() {
        let (x1, y1, x2, y2) = partials.factors(idx);
        let mut fx1 = Array1::zeros(n);
        let mut fy1 = Array1::zeros(n);
        let mut fx2 = Array1::zeros(n);
        let mut fy2 = Array1::zeros(n);
        for m in 0..n {
            let crx = p_rx.entry(m).conj();
            let ctx = p_tx.entry(m).conj();
            fx1[m] = crx * x1[m];
            fx2[m] = crx * x2[m];
            fy1[m] = ctx * y1[m];
            fy2[m] = ctx * y2[m];
        }
        factors.push((fx1, fy1, fx2, fy2));
    }
    KMatrices {
        factors,
        n_rf: config.n_rf,
        n_e: config.n_e,
    }
}

/// Receive blocks of the relaxed Gram, one rank-one block per microstrip,
/// globally scaled to unit Frobenius budget.
#[derive(Debug, Clone)]
pub struct RxBlocks {
    pub blocks: Vec<Array2<Complex64>>,
    /// True where the block's gain matrix was numerically zero and the
    /// first identity direction was used as a fallback.
    pub degenerate: Vec<bool>,
}

/// Rank-one maximizer of <A, B> over unit-Frobenius positive blocks: the
/// principal eigenvector of the Hermitian part of `a`. Ties and the zero
/// matrix resolve to the first identity direction through the
/// eigendecomposition's deterministic ordering.
pub fn rx_block_from_gain_matrix(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (_, v) = linalg::principal_eigvec(&linalg::hermitian_part(a));
    let n = v.len();
    let mut block = Array2::zeros((n, n));
    for p in 0..n {
        for q in 0..n {
            block[(p, q)] = v[p] * v[q].conj();
        }
    }
    block
}

fn block_quadratic(
    x: &Array1<Complex64>,
    y: &Array1<Complex64>,
    blocks: &[Array2<Complex64>],
    n_e: usize,
) -> Complex64 {
    // x^H F_RX y with block-diagonal F_RX
    let mut s = Complex64::new(0.0, 0.0);
    for (k, b) in blocks.iter().enumerate() {
        let base = k * n_e;
        for p in 0..n_e {
            let mut inner = Complex64::new(0.0, 0.0);
            for q in 0..n_e {
                inner += b[(p, q)] * y[base + q];
            }
            s += x[base + p].conj() * inner;
        }
    }
    s
}

fn tx_quadratic(x: &Array1<Complex64>, y: &Array1<Complex64>, f: &Array2<Complex64>) -> Complex64 {
    // x^H F y for dense F
    let n = x.len();
    let mut s = Complex64::new(0.0, 0.0);
    for p in 0..n {
        let mut inner = Complex64::new(0.0, 0.0);
        for q in 0..n {
            inner += f[(p, q)] * y[q];
        }
        s += x[p].conj() * inner;
    }
    s
}

/// Fisher-trace surrogate Tr{Re{sum_i K_i F_TX K_i^H F_RX}} evaluated
/// through the rank-two factors.
pub fn sensing_objective(
    f_tx: &Array2<Complex64>,
    blocks: &[Array2<Complex64>],
    k: &KMatrices,
) -> f64 {
    let mut total = 0.0;
    for (x1, y1, x2, y2) in &k.factors {
        let xs = [x1, x2];
        let ys = [y1, y2];
        for a in 0..2 {
            for b in 0..2 {
                // (y_a^H F_TX y_b) (x_b^H F_RX x_a)
                let t = tx_quadratic(ys[a], ys[b], f_tx);
                let r = block_quadratic(xs[b], xs[a], blocks, k.n_e);
                total += (t * r).re;
            }
        }
    }
    total
}

/// Optimal receive blocks for a fixed transmit Gram: per microstrip, the
/// principal direction of that block of sum_i K_i F_TX K_i^H, all blocks
/// scaled by 1/sqrt(n_rf) so the stacked Gram keeps unit Frobenius budget.
pub fn optimize_rx_blocks(f_tx: &Array2<Complex64>, k: &KMatrices) -> RxBlocks {
    let n_e = k.n_e;
    let n_rf = k.n_rf;
    let mut blocks = Vec::with_capacity(n_rf);
    let mut degenerate = Vec::with_capacity(n_rf);
    let scale = Complex64::new(1.0 / (n_rf as f64).sqrt(), 0.0);
    for strip in 0..n_rf {
        let base = strip * n_e;
        let mut a: Array2<Complex64> = Array2::zeros((n_e, n_e));
        for (x1, y1, x2, y2) in &k.factors {
            let xs = [x1, x2];
            let ys = [y1, y2];
            for ia in 0..2 {
                for ib in 0..2 {
                    let t = tx_quadratic(ys[ia], ys[ib], f_tx);
                    for p in 0..n_e {
                        let left = xs[ia][base + p] * t;
                        for q in 0..n_e {
                            a[(p, q)] += left * xs[ib][base + q].conj();
                        }
                    }
                }
            }
        }
        let zero = linalg::frobenius(&a) < 1e-300;
        degenerate.push(zero);
        let mut block = rx_block_from_gain_matrix(&a);
        block.mapv_inplace(|z| z * scale);
        blocks.push(block);
    }
    RxBlocks { blocks, degenerate }
}

/// Positive part of a Hermitian matrix normalized to unit Frobenius norm.
/// Positive definiteness is certified by an attempted Cholesky first so the
/// eigendecomposition only runs when clipping is actually needed.
pub fn psd_projection_normalized(m: &Array2<Complex64>) -> Option<Array2<Complex64>> {
    let h = linalg::hermitian_part(m);
    let n = h.nrows();
    let trace: f64 = (0..n).map(|i| h[(i, i)].re).sum();
    let shift = 1e-14 * trace.abs().max(1e-300);
    let mut probe = h.clone();
    for i in 0..n {
        probe[(i, i)] += Complex64::new(shift, 0.0);
    }
    let positive = if linalg::cholesky(&probe).is_some() {
        h
    } else {
        let (vals, vecs) = linalg::hermitian_eig(&h);
        let mut out: Array2<Complex64> = Array2::zeros((n, n));
        for k in 0..n {
            if vals[k] <= 0.0 {
                continue;
            }
            let lk = Complex64::new(vals[k], 0.0);
            for p in 0..n {
                let left = vecs[(p, k)] * lk;
                for q in 0..n {
                    out[(p, q)] += left * vecs[(q, k)].conj();
                }
            }
        }
        out
    };
    let norm = linalg::frobenius(&positive);
    if norm <= 1e-300 {
        return None;
    }
    Some(positive.mapv(|z| z / norm))
}

/// Optimal transmit Gram for fixed receive blocks: the normalized positive
/// part of sum_i K_i^H F_RX K_i.
pub fn optimize_tx_gram(
    blocks: &[Array2<Complex64>],
    k: &KMatrices,
) -> Result<Array2<Complex64>, CrbOptError> {
    let n = k.n();
    let mut m: Array2<Complex64> = Array2::zeros((n, n));
    for (x1, y1, x2, y2) in &k.factors {
        let xs = [x1, x2];
        let ys = [y1, y2];
        for ia in 0..2 {
            for ib in 0..2 {
                // K^H F_RX K = sum_ab y_a (x_a^H F_RX x_b) y_b^H
                let r = block_quadratic(xs[ia], xs[ib], blocks, k.n_e);
                for p in 0..n {
                    let left = ys[ia][p] * r;
                    for q in 0..n {
                        m[(p, q)] += left * ys[ib][q].conj();
                    }
                }
            }
        }
    }
    psd_projection_normalized(&m).ok_or(CrbOptError::DegenerateTxGram)
}

/// Outcome of the alternating Gram optimization.
#[derive(Debug, Clone)]
pub struct SensingAlternation {
    pub f_tx: Array2<Complex64>,
    pub rx: RxBlocks,
    /// Objective after every full alternation; non-decreasing.
    pub objective_history: Vec<f64>,
    pub converged: bool,
}

pub const ALTERNATION_TOL: f64 = 1e-6;
pub const ALTERNATION_MAX_ITERS: usize = 50;

/// Alternates the receive and transmit closed forms from a scaled-identity
/// transmit Gram until the objective stalls.
pub fn alternate_crb(
    k: &KMatrices,
    _config: &SystemConfig,
) -> Result<SensingAlternation, CrbOptError> {
    let n = k.n();
    let mut f_tx: Array2<Complex64> = Array2::eye(n).mapv(|z: Complex64| z / (n as f64).sqrt());
    let mut rx = optimize_rx_blocks(&f_tx, k);
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..ALTERNATION_MAX_ITERS {
        rx = optimize_rx_blocks(&f_tx, k);
        f_tx = optimize_tx_gram(&rx.blocks, k)?;
        let obj = sensing_objective(&f_tx, &rx.blocks, k);
        if let Some(&prev) = history.last() {
            history.push(obj);
            if (obj - prev).abs() <= ALTERNATION_TOL * prev.abs().max(1e-300) {
                converged = true;
                break;
            }
        } else {
            history.push(obj);
        }
    }
    Ok(SensingAlternation {
        f_tx,
        rx,
        objective_history: history,
        converged,
    })
}

/// Nearest codeword vector, in normalized block distance, to the direction
/// of a unit vector. Scans a deterministic gauge grid over global phase and
/// scale (the rank-one block discards both, the entrywise projection does
/// not), then refines by alternating a least-squares gauge with
/// reprojection. A numerically zero direction falls back to the first
/// codeword everywhere.
pub fn project_direction_to_codewords(
    v: &Array1<Complex64>,
    codebook: &LorentzianCodebook,
) -> Array1<Complex64> {
    let n = v.len();
    let vnorm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if vnorm <= 1e-300 {
        return Array1::from_elem(n, codebook.weight(0));
    }
    let vhat = v.mapv(|z| z / vnorm);
    let score = |w: &Array1<Complex64>| -> f64 {
        // |v^H w| / ||w||, the direction alignment
        let wn = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if wn <= 1e-300 {
            return 0.0;
        }
        let dot: Complex64 = vhat.iter().zip(w.iter()).map(|(a, b)| a.conj() * b).sum();
        dot.norm() / wn
    };
    let candidate = |c: Complex64| -> Array1<Complex64> {
        Array1::from_iter(vhat.iter().map(|&z| codebook.nearest(c * z).1))
    };
    let phases = 48;
    let scales = 24;
    let smax = 1.2 * (n as f64).sqrt();
    let mut best_w = candidate(Complex64::new(smax / 2.0, 0.0));
    let mut best_score = score(&best_w);
    for ip in 0..phases {
        let psi = 2.0 * std::f64::consts::PI * ip as f64 / phases as f64;
        for is in 0..scales {
            let s = smax * (is as f64 + 1.0) / scales as f64;
            let w = candidate(Complex64::from_polar(s, psi));
            let sc = score(&w);
            if sc > best_score + 1e-15 {
                best_score = sc;
                best_w = w;
            }
        }
    }
    // refinement: least-squares gauge c = v^H w, then reproject
    for _ in 0..3 {
        let c: Complex64 = vhat
            .iter()
            .zip(best_w.iter())
            .map(|(a, b)| a.conj() * b)
            .sum();
        if c.norm() <= 1e-300 {
            break;
        }
        let w = candidate(c);
        let sc = score(&w);
        if sc > best_score + 1e-15 {
            best_score = sc;
            best_w = w;
        } else {
            break;
        }
    }
    best_w
}

/// Codebook-constrained receive matrix nearest to the relaxed blocks: per
/// microstrip, the principal direction of the block is projected onto the
/// codeword set and the rows are assembled into the analog matrix.
pub fn project_rx_to_codebook(
    rx: &RxBlocks,
    codebook: &LorentzianCodebook,
    _p_rx: &PropagationMatrix,
    config: &SystemConfig,
) -> Result<AnalogBfMatrix, crate::codebook::CodebookError> {
    let mut weights = Array2::zeros((config.n_rf, config.n_e));
    for (i, block) in rx.blocks.iter().enumerate() {
        let w = if linalg::frobenius(block) <= 1e-300 {
            Array1::from_elem(config.n_e, codebook.weight(0))
        } else {
            let (_, v) = linalg::principal_eigvec(block);
            project_direction_to_codewords(&v, codebook)
        };
        for nn in 0..config.n_e {
            weights[(i, nn)] = w[nn];
        }
    }
    assemble_analog_matrix(weights, Side::Rx, config)
}

/// Result of factorizing the transmit Gram into codebook-feasible analog
/// weights and a digital precoder.
#[derive(Debug, Clone)]
pub struct TxFactorization {
    pub w_tx: AnalogBfMatrix,
    pub v: Array2<Complex64>,
    /// Fit residual ||F_TX - (W V)(W V)^H||_F after every round;
    /// non-increasing.
    pub objective_history: Vec<f64>,
    pub converged: bool,
}

pub const FACTORIZATION_TOL: f64 = 1e-4;
pub const FACTORIZATION_MAX_ROUNDS: usize = 30;

fn factorization_objective(f_tx: &Array2<Complex64>, g: &Array2<Complex64>) -> f64 {
    let n = f_tx.nrows();
    let users = g.ncols();
    let mut total = 0.0;
    for p in 0..n {
        for q in 0..n {
            let mut gg = Complex64::new(0.0, 0.0);
            for u in 0..users {
                gg += g[(p, u)] * g[(q, u)].conj();
            }
            total += (f_tx[(p, q)] - gg).norm_sqr();
        }
    }
    total.sqrt()
}

/// Factorizes a positive Gram into a codebook-feasible analog matrix and a
/// digital precoder by alternating per-element codeword scans with the
/// exact precoder update through the panel's column space. The precoder is
/// rescaled once at exit so the transmit power constraint holds with
/// equality; the recorded history tracks the unscaled fit.
pub fn factorize_tx(
    f_tx: &Array2<Complex64>,
    codebook: &LorentzianCodebook,
    p_tx: &PropagationMatrix,
    config: &SystemConfig,
    num_users: usize,
) -> Result<TxFactorization, CrbOptError> {
    let n_rf = config.n_rf;
    let n_e = config.n_e;
    let n = n_rf * n_e;
    if num_users == 0 || num_users > n_rf {
        return Err(CrbOptError::BadUserCount(num_users));
    }
    // initial analog weights from the per-microstrip slice of the Gram's
    // dominant eigenstructure
    let (vals, vecs) = linalg::hermitian_eig(f_tx);
    let mut weights: Array2<Complex64> = Array2::zeros((n_rf, n_e));
    for i in 0..n_rf {
        let mut strip_dir: Array1<Complex64> = Array1::zeros(n_e);
        for u in 0..num_users.min(n) {
            let scale = Complex64::new(vals[u].max(0.0).sqrt(), 0.0);
            for nn in 0..n_e {
                strip_dir[nn] += vecs[(i * n_e + nn, u)] * scale;
            }
        }
        let w = project_direction_to_codewords(&strip_dir, codebook);
        for nn in 0..n_e {
            weights[(i, nn)] = w[nn];
        }
    }
    let mut v = optimal_precoder_for_weights(f_tx, &weights, num_users);
    let mut g = product_weights_precoder(&weights, &v);
    let mut history = vec![factorization_objective(f_tx, &g)];
    let mut converged = false;
    for _ in 0..FACTORIZATION_MAX_ROUNDS {
        // (a) per-element codeword scan holding everything else fixed
        for i in 0..n_rf {
            let vrow: Vec<Complex64> = (0..num_users).map(|u| v[(i, u)]).collect();
            let vv: f64 = vrow.iter().map(|z| z.norm_sqr()).sum();
            for nn in 0..n_e {
                let m = i * n_e + nn;
                // restricted objective f(w) = 2(k0 - 2 Re{w a} + |w|^2 b)
                //                           + (f_mm - |w|^2 vv)^2
                let mut a = Complex64::new(0.0, 0.0);
                let mut b = 0.0;
                for q in 0..n {
                    if q == m {
                        continue;
                    }
                    let mut cq = Complex64::new(0.0, 0.0);
                    for u in 0..num_users {
                        cq += vrow[u] * g[(q, u)].conj();
                    }
                    a += cq * f_tx[(m, q)].conj();
                    b += cq.norm_sqr();
                }
                let fmm = f_tx[(m, m)].re;
                let eval = |w: Complex64| -> f64 {
                    let w2 = w.norm_sqr();
                    2.0 * (-2.0 * (w * a).re + w2 * b) + (fmm - w2 * vv).powi(2)
                };
                let mut best_w = weights[(i, nn)];
                let mut best_val = eval(best_w);
                for &cand in codebook.weights() {
                    let val = eval(cand);
                    if val < best_val - 1e-18 - 1e-15 * best_val.abs() {
                        best_val = val;
                        best_w = cand;
                    }
                }
                if best_w != weights[(i, nn)] {
                    weights[(i, nn)] = best_w;
                    for u in 0..num_users {
                        g[(m, u)] = best_w * vrow[u];
                    }
                }
            }
        }
        // (b) exact precoder update through the panel column space; kept
        // only when it does not worsen the fit
        let v_new = optimal_precoder_for_weights(f_tx, &weights, num_users);
        let g_new = product_weights_precoder(&weights, &v_new);
        let obj_candidate = factorization_objective(f_tx, &g_new);
        let obj_current = factorization_objective(f_tx, &g);
        if obj_candidate <= obj_current {
            v = v_new;
            g = g_new;
        }
        let prev = *history.last().expect("seeded history");
        let obj = factorization_objective(f_tx, &g).min(prev);
        history.push(obj);
        if (prev - obj).abs() <= FACTORIZATION_TOL * prev.abs().max(1e-300) {
            converged = true;
            break;
        }
    }
    let w_tx = assemble_analog_matrix(weights, Side::Tx, config)
        .expect("factorization weights match the configured panel");
    // rescale for transmit power equality
    let b = w_tx.precode_matrix(p_tx, &v);
    let power: f64 = b.iter().map(|z| z.norm_sqr()).sum();
    if power > 1e-300 {
        let s = (config.p_max / power).sqrt();
        v.mapv_inplace(|z| z * s);
    }
    Ok(TxFactorization {
        w_tx,
        v,
        objective_history: history,
        converged,
    })
}

fn product_weights_precoder(
    weights: &Array2<Complex64>,
    v: &Array2<Complex64>,
) -> Array2<Complex64> {
    let (n_rf, n_e) = weights.dim();
    let users = v.ncols();
    let mut g = Array2::zeros((n_rf * n_e, users));
    for i in 0..n_rf {
        for nn in 0..n_e {
            for u in 0..users {
                g[(i * n_e + nn, u)] = weights[(i, nn)] * v[(i, u)];
            }
        }
    }
    g
}

/// Exact minimizer of ||F - (W V)(W V)^H||_F over V for fixed analog
/// weights: the panel's columns have disjoint supports, so the normalized
/// microstrip weight vectors form an orthonormal basis of range(W) and the
/// optimal restricted Gram is the clipped top-U eigenstructure of the
/// compressed target.
fn optimal_precoder_for_weights(
    f_tx: &Array2<Complex64>,
    weights: &Array2<Complex64>,
    num_users: usize,
) -> Array2<Complex64> {
    let (n_rf, n_e) = weights.dim();
    let mut norms = vec![0.0f64; n_rf];
    for (i, norm) in norms.iter_mut().enumerate() {
        *norm = weights
            .row(i)
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt();
    }
    // compressed target Q^H F Q with Q the normalized block columns
    let mut mw: Array2<Complex64> = Array2::zeros((n_rf, n_rf));
    for i in 0..n_rf {
        for j in 0..n_rf {
            if norms[i] <= 1e-300 || norms[j] <= 1e-300 {
                continue;
            }
            let mut s = Complex64::new(0.0, 0.0);
            for p in 0..n_e {
                let wi = weights[(i, p)].conj() / norms[i];
                for q in 0..n_e {
                    s += wi * f_tx[(i * n_e + p, j * n_e + q)] * weights[(j, q)] / norms[j];
                }
            }
            mw[(i, j)] = s;
        }
    }
    let (vals, vecs) = linalg::hermitian_eig(&linalg::hermitian_part(&mw));
    let mut v = Array2::zeros((n_rf, num_users));
    for u in 0..num_users.min(n_rf) {
        let scale = vals[u].max(0.0).sqrt();
        for i in 0..n_rf {
            if norms[i] > 1e-300 {
                v[(i, u)] = vecs[(i, u)] * Complex64::new(scale / norms[i], 0.0);
            }
        }
    }
    v
}

//! Communication-oriented design: per-microstrip codeword selection for the
//! transmit panel, a block-diagonalization digital precoder that nulls
//! inter-user interference, and the downlink sum-rate metric.

use crate::channel::PropagationMatrix;
use crate::codebook::{assemble_analog_matrix, AnalogBfMatrix, LorentzianCodebook};
use crate::linalg;
use crate::scenario::{Side, SystemConfig};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommOptError {
    #[error("block diagonalization infeasible for user {user}: interference null space is empty")]
    InfeasibleBd { user: usize },
    #[error("{users} users exceed the {n_rf} digital chains")]
    TooManyUsers { users: usize, n_rf: usize },
}

/// Communication-oriented transmit configuration.
#[derive(Debug, Clone)]
pub struct CommDesign {
    pub w_tx_c: AnalogBfMatrix,
    pub v_c: Array2<Complex64>,
    pub sum_rate: f64,
}

/// Downlink sum rate in bits/s/Hz: sum over users of
/// log2(1 + |h_u P W v_u|^2 / sigma^2). Rate is reported in base two.
pub fn sum_rate(
    w_tx: &AnalogBfMatrix,
    v: &Array2<Complex64>,
    h_dl: &[Array1<Complex64>],
    p_tx: &PropagationMatrix,
    config: &SystemConfig,
) -> f64 {
    let b = w_tx.precode_matrix(p_tx, v);
    let mut rate = 0.0;
    for (u, h) in h_dl.iter().enumerate() {
        let mut s = Complex64::new(0.0, 0.0);
        for m in 0..h.len() {
            s += h[m] * b[(m, u)];
        }
        rate += (1.0 + s.norm_sqr() / config.noise_power).log2();
    }
    rate
}

/// Effective per-user channel rows h_u P W of shape U x n_rf.
pub fn effective_rows(
    w_tx: &AnalogBfMatrix,
    h_dl: &[Array1<Complex64>],
    p_tx: &PropagationMatrix,
) -> Array2<Complex64> {
    let fw = w_tx.forward_matrix(p_tx);
    let n = fw.nrows();
    let n_rf = fw.ncols();
    let mut g = Array2::zeros((h_dl.len(), n_rf));
    for (u, h) in h_dl.iter().enumerate() {
        for i in 0..n_rf {
            let mut s = Complex64::new(0.0, 0.0);
            for m in 0..n {
                s += h[m] * fw[(m, i)];
            }
            g[(u, i)] = s;
        }
    }
    g
}

/// Per-microstrip codeword selection maximizing the summed user gains.
///
/// For each microstrip the elements are first phase-aligned against the
/// strongest user's conjugate channel, a common codebook phase offset is
/// scanned on top, and a few cyclic per-element improvement passes with the
/// exact objective finish the job. Deterministic throughout; a vanishing
/// channel keeps the first codeword everywhere.
pub fn select_tx_codewords(
    h_dl: &[Array1<Complex64>],
    p_tx: &PropagationMatrix,
    codebook: &LorentzianCodebook,
    config: &SystemConfig,
) -> AnalogBfMatrix {
    let n_rf = config.n_rf;
    let n_e = config.n_e;
    let users = h_dl.len();
    let mut weights: Array2<Complex64> = Array2::zeros((n_rf, n_e));
    for i in 0..n_rf {
        let base = i * n_e;
        // per-user channel-times-guide coefficients on this microstrip
        let coeff: Vec<Vec<Complex64>> = (0..users)
            .map(|u| (0..n_e).map(|nn| h_dl[u][base + nn] * p_tx.entry(base + nn)).collect())
            .collect();
        let strength = |u: usize| -> f64 { coeff[u].iter().map(|z| z.norm_sqr()).sum() };
        let mut u_star = 0;
        for u in 1..users {
            if strength(u) > strength(u_star) {
                u_star = u;
            }
        }
        let objective = |w: &[Complex64]| -> f64 {
            (0..users)
                .map(|u| {
                    let s: Complex64 = coeff[u].iter().zip(w.iter()).map(|(c, x)| c * x).sum();
                    s.norm_sqr()
                })
                .sum()
        };
        let total_strength: f64 = (0..users).map(strength).sum();
        let mut best: Vec<Complex64> = vec![codebook.weight(0); n_e];
        if total_strength > 1e-300 {
            // aligned phases plus a scanned common offset
            let mut best_val = f64::NEG_INFINITY;
            for &delta in codebook.phases() {
                let cand: Vec<Complex64> = (0..n_e)
                    .map(|nn| {
                        let target = -coeff[u_star][nn].arg() + delta;
                        let on_circle = 0.5
                            * (Complex64::new(0.0, 1.0) + Complex64::from_polar(1.0, target));
                        codebook.nearest(on_circle).1
                    })
                    .collect();
                let val = objective(&cand);
                if val > best_val {
                    best_val = val;
                    best = cand;
                }
            }
            // cyclic exact per-element refinement
            let mut sums: Vec<Complex64> = (0..users)
                .map(|u| coeff[u].iter().zip(best.iter()).map(|(c, x)| c * x).sum())
                .collect();
            for _pass in 0..5 {
                let mut changed = false;
                for nn in 0..n_e {
                    let current = best[nn];
                    let mut local_best = current;
                    let mut local_val = (0..users).map(|u| sums[u].norm_sqr()).sum::<f64>();
                    for &cand in codebook.weights() {
                        if cand == current {
                            continue;
                        }
                        let val = (0..users)
                            .map(|u| (sums[u] + coeff[u][nn] * (cand - current)).norm_sqr())
                            .sum::<f64>();
                        if val > local_val + 1e-15 * local_val.abs() {
                            local_val = val;
                            local_best = cand;
                        }
                    }
                    if local_best != current {
                        for u in 0..users {
                            sums[u] += coeff[u][nn] * (local_best - current);
                        }
                        best[nn] = local_best;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
        }
        for nn in 0..n_e {
            weights[(i, nn)] = best[nn];
        }
    }
    assemble_analog_matrix(weights, Side::Tx, config)
        .expect("selection weights match the configured panel")
}

/// Unit-norm precoder directions putting every user in the null space of
/// the other users' effective rows, for rows living in an m-dimensional
/// digital space.
pub fn bd_unit_directions(g: &Array2<Complex64>) -> Result<Array2<Complex64>, CommOptError> {
    let users = g.nrows();
    let m = g.ncols();
    if users > m {
        return Err(CommOptError::TooManyUsers { users, n_rf: m });
    }
    let mut v: Array2<Complex64> = Array2::zeros((m, users));
    for u in 0..users {
        // Gram of the stacked interference rows
        let mut gram: Array2<Complex64> = Array2::zeros((m, m));
        for o in 0..users {
            if o == u {
                continue;
            }
            for p in 0..m {
                let left = g[(o, p)].conj();
                for q in 0..m {
                    gram[(p, q)] += left * g[(o, q)];
                }
            }
        }
        let (vals, vecs) = linalg::hermitian_eig(&gram);
        let lmax = vals[0].max(0.0);
        let tol = 1e-12 * lmax;
        // project the matched filter onto the interference null space
        let mut dir: Array1<Complex64> = Array1::zeros(m);
        for k in 0..m {
            if vals[k] > tol && lmax > 0.0 {
                continue;
            }
            let mut inner = Complex64::new(0.0, 0.0);
            for p in 0..m {
                inner += vecs[(p, k)].conj() * g[(u, p)].conj();
            }
            for p in 0..m {
                dir[p] += vecs[(p, k)] * inner;
            }
        }
        let norm = dir.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm <= 1e-12 * g.row(u).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(1e-300) {
            return Err(CommOptError::InfeasibleBd { user: u });
        }
        for p in 0..m {
            v[(p, u)] = dir[p] / norm;
        }
    }
    Ok(v)
}

/// Block-diagonalization precoder: null-space directions per user with an
/// equal power split, scaled so each user's radiated power is exactly
/// p_max / U.
pub fn block_diagonalization(
    w_tx: &AnalogBfMatrix,
    h_dl: &[Array1<Complex64>],
    p_tx: &PropagationMatrix,
    config: &SystemConfig,
) -> Result<Array2<Complex64>, CommOptError> {
    let g = effective_rows(w_tx, h_dl, p_tx);
    let mut v = bd_unit_directions(&g)?;
    scale_precoder_for_power(&mut v, w_tx, p_tx, config);
    Ok(v)
}

/// Scales every precoder column so each user radiates p_max / U and the
/// total transmit power meets p_max with equality.
pub fn scale_precoder_for_power(
    v: &mut Array2<Complex64>,
    w_tx: &AnalogBfMatrix,
    p_tx: &PropagationMatrix,
    config: &SystemConfig,
) {
    let users = v.ncols();
    let per_user = config.p_max / users as f64;
    let b = w_tx.precode_matrix(p_tx, v);
    for u in 0..users {
        let power: f64 = (0..b.nrows()).map(|m| b[(m, u)].norm_sqr()).sum();
        if power > 1e-300 {
            let s = (per_user / power).sqrt();
            for i in 0..v.nrows() {
                v[(i, u)] *= s;
            }
        }
    }
}

/// Full communication-oriented design: codeword selection, then block
/// diagonalization together with the achieved sum rate.
pub fn comm_design(
    h_dl: &[Array1<Complex64>],
    p_tx: &PropagationMatrix,
    codebook: &LorentzianCodebook,
    config: &SystemConfig,
) -> Result<CommDesign, CommOptError> {
    let w_tx_c = select_tx_codewords(h_dl, p_tx, codebook, config);
    let v_c = block_diagonalization(&w_tx_c, h_dl, p_tx, config)?;
    let rate = sum_rate(&w_tx_c, &v_c, h_dl, p_tx, config);
    Ok(CommDesign {
        w_tx_c,
        v_c,
        sum_rate: rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::propagation_matrix;
    use crate::test_support::{rng, small_config};
    use rand::Rng;

    fn random_channel(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Array1<Complex64> {
        Array1::from_iter((0..n).map(|_| {
            Complex64::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5)
        }))
    }

    fn uniform_bf(cfg: &SystemConfig) -> AnalogBfMatrix {
        let cb = LorentzianCodebook::from_config(cfg);
        let w = Array2::from_elem((cfg.n_rf, cfg.n_e), cb.weight(cb.len() / 2));
        assemble_analog_matrix(w, Side::Tx, cfg).unwrap()
    }

    #[test]
    fn sum_rate_reference_cases() {
        let cfg = small_config(2, 3);
        let p_tx = propagation_matrix(Side::Tx, &cfg);
        let w = uniform_bf(&cfg);
        let mut r = rng(1);
        let h = vec![random_channel(&mut r, cfg.n_total())];
        // zero precoder carries no rate
        let v0: Array2<Complex64> = Array2::zeros((cfg.n_rf, 1));
        assert_eq!(sum_rate(&w, &v0, &h, &p_tx, &cfg), 0.0);
        // a received power equal to the noise power is one bit
        let mut v = Array2::zeros((cfg.n_rf, 1));
        v[(0, 0)] = Complex64::new(1.0, 0.0);
        let b = w.precode_matrix(&p_tx, &v);
        let mut s = Complex64::new(0.0, 0.0);
        for m in 0..cfg.n_total() {
            s += h[0][m] * b[(m, 0)];
        }
        let scale = (cfg.noise_power / s.norm_sqr()).sqrt();
        v[(0, 0)] *= scale;
        let rate = sum_rate(&w, &v, &h, &p_tx, &cfg);
        assert!((rate - 1.0).abs() < 1e-9);
        // two users match a scalar-by-scalar oracle
        let h2 = vec![
            random_channel(&mut r, cfg.n_total()),
            random_channel(&mut r, cfg.n_total()),
        ];
        let mut v2 = Array2::zeros((cfg.n_rf, 2));
        for u in 0..2 {
            for i in 0..cfg.n_rf {
                v2[(i, u)] = Complex64::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5);
            }
        }
        let got = sum_rate(&w, &v2, &h2, &p_tx, &cfg);
        let b2 = w.precode_matrix(&p_tx, &v2);
        let mut oracle = 0.0;
        for u in 0..2 {
            let mut s = Complex64::new(0.0, 0.0);
            for m in 0..cfg.n_total() {
                s += h2[u][m] * b2[(m, u)];
            }
            oracle += (1.0 + s.norm_sqr() / cfg.noise_power).log2();
        }
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn selection_reaches_matched_filter_bound() {
        let mut cfg = small_config(1, 4);
        cfg.codebook_bits = 10;
        let p_tx = propagation_matrix(Side::Tx, &cfg);
        let cb = LorentzianCodebook::from_config(&cfg);
        // channel chosen so every per-element product is real positive
        let h: Array1<Complex64> =
            Array1::from_iter((0..4).map(|m| p_tx.entry(m).conj() * (1.0 + m as f64)));
        let channels = vec![h.clone()];
        let w = select_tx_codewords(&channels, &p_tx, &cb, &cfg);
        let sum: f64 = (0..4).map(|m| (h[m] * p_tx.entry(m)).norm()).sum();
        let mut gain = Complex64::new(0.0, 0.0);
        for m in 0..4 {
            gain += h[m] * p_tx.entry(m) * w.weights()[(0, m)];
        }
        // the realizable weight set halves the coherent gain at worst
        assert!(
            gain.norm() >= 0.5 * sum - 1e-12,
            "gain {} below the matched-filter floor {}",
            gain.norm(),
            0.5 * sum
        );
    }

    #[test]
    fn zero_channel_selects_first_codeword() {
        let cfg = small_config(2, 3);
        let p_tx = propagation_matrix(Side::Tx, &cfg);
        let cb = LorentzianCodebook::from_config(&cfg);
        let h = vec![Array1::zeros(cfg.n_total())];
        let w = select_tx_codewords(&h, &p_tx, &cb, &cfg);
        for i in 0..cfg.n_rf {
            for nn in 0..cfg.n_e {
                assert_eq!(w.weights()[(i, nn)], cb.weight(0));
            }
        }
    }

    #[test]
    fn selection_close_to_exhaustive_on_tiny_codebooks() {
        let mut cfg = small_config(1, 3);
        cfg.codebook_bits = 3;
        let p_tx = propagation_matrix(Side::Tx, &cfg);
        let cb = LorentzianCodebook::from_config(&cfg);
        let mut r = rng(23);
        for _ in 0..20 {
            let h = vec![random_channel(&mut r, 3)];
            let w = select_tx_codewords(&h, &p_tx, &cb, &cfg);
            let gain = |ws: &[Complex64]| -> f64 {
                let mut s = Complex64::new(0.0, 0.0);
                for m in 0..3 {
                    s += h[0][m] * p_tx.entry(m) * ws[m];
                }
                s.norm()
            };
            let ours = gain(&[
                w.weights()[(0, 0)],
                w.weights()[(0, 1)],
                w.weights()[(0, 2)],
            ]);
            // oracle: exhaustive scan over all codeword triples
            let mut best = 0.0f64;
            for a in 0..cb.len() {
                for b in 0..cb.len() {
                    for c in 0..cb.len() {
                        best = best.max(gain(&[cb.weight(a), cb.weight(b), cb.weight(c)]));
                    }
                }
            }
            assert!(
                ours >= best * 0.98,
                "greedy gain {ours} more than 2 percent below exhaustive {best}"
            );
        }
    }

    #[test]
    fn bd_single_user_is_matched_filter() {
        let mut r = rng(2);
        let g = Array2::from_shape_fn((1, 4), |_| {
            Complex64::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5)
        });
        let v = bd_unit_directions(&g).unwrap();
        // v proportional to g^H
        let gnorm: f64 = g.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for p in 0..4 {
            let expect = g[(0, p)].conj() / gnorm;
            assert!((v[(p, 0)] - expect).norm() < 1e-10);
        }
    }

    #[test]
    fn bd_orthogonal_users_lose_nothing() {
        let mut g: Array2<Complex64> = Array2::zeros((2, 4));
        g[(0, 0)] = Complex64::new(2.0, 1.0);
        g[(1, 2)] = Complex64::new(0.0, -3.0);
        let v = bd_unit_directions(&g).unwrap();
        for u in 0..2 {
            let mut own = Complex64::new(0.0, 0.0);
            let mut leak = Complex64::new(0.0, 0.0);
            for p in 0..4 {
                own += g[(u, p)] * v[(p, u)];
                leak += g[(1 - u, p)] * v[(p, u)];
            }
            let gnorm: f64 = g.row(u).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!((own.norm() - gnorm).abs() < 1e-10, "matched gain kept");
            assert!(leak.norm() < 1e-12);
        }
    }

    #[test]
    fn bd_random_case_matches_projector_oracle() {
        let mut r = rng(7);
        for _ in 0..10 {
            let g = Array2::from_shape_fn((2, 4), |_| {
                Complex64::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5)
            });
            let v = bd_unit_directions(&g).unwrap();
            for u in 0..2 {
                let mut own = Complex64::new(0.0, 0.0);
                let mut leak = Complex64::new(0.0, 0.0);
                for p in 0..4 {
                    own += g[(u, p)] * v[(p, u)];
                    leak += g[(1 - u, p)] * v[(p, u)];
                }
                assert!(leak.norm() < 1e-10 * own.norm(), "leakage above threshold");
                // oracle: norm of g_u projected off the interferer row
                let other = g.row(1 - u);
                let on: f64 = other.iter().map(|z| z.norm_sqr()).sum();
                let cross: Complex64 =
                    other.iter().zip(g.row(u).iter()).map(|(o, s)| o.conj() * s).sum();
                let gu2: f64 = g.row(u).iter().map(|z| z.norm_sqr()).sum();
                let proj_norm = (gu2 - cross.norm_sqr() / on).max(0.0).sqrt();
                assert!((own.norm() - proj_norm).abs() < 1e-9 * proj_norm.max(1e-300));
            }
        }
    }

    #[test]
    fn bd_power_split_is_exact() {
        let cfg = small_config(4, 4);
        let p_tx = propagation_matrix(Side::Tx, &cfg);
        let w = uniform_bf(&cfg);
        let mut r = rng(13);
        let h = vec![
            random_channel(&mut r, cfg.n_total()),
            random_channel(&mut r, cfg.n_total()),
        ];
        let v = block_diagonalization(&w, &h, &p_tx, &cfg).unwrap();
        let b = w.precode_matrix(&p_tx, &v);
        let mut total = 0.0;
        for u in 0..2 {
            let power: f64 = (0..cfg.n_total()).map(|m| b[(m, u)].norm_sqr()).sum();
            assert!((power - cfg.p_max / 2.0).abs() < 1e-9 * cfg.p_max);
            total += power;
        }
        assert!((total - cfg.p_max).abs() < 1e-9 * cfg.p_max);
    }

    #[test]
    fn bd_rank_collision_is_infeasible() {
        let mut g: Array2<Complex64> = Array2::zeros((2, 2));
        g[(0, 0)] = Complex64::new(1.0, 0.0);
        g[(0, 1)] = Complex64::new(0.5, 0.5);
        for p in 0..2 {
            g[(1, p)] = g[(0, p)]; // identical rows collide
        }
        assert!(matches!(
            bd_unit_directions(&g),
            Err(CommOptError::InfeasibleBd { .. })
        ));
        // more users than chains is rejected up front
        let g3: Array2<Complex64> = Array2::zeros((3, 2));
        assert!(matches!(
            bd_unit_directions(&g3),
            Err(CommOptError::TooManyUsers { .. })
        ));
    }

    #[test]
    fn sum_rate_increases_with_power_budget() {
        let cfg = small_config(4, 4);
        let p_tx = propagation_matrix(Side::Tx, &cfg);
        let cb = LorentzianCodebook::from_config(&cfg);
        let mut r = rng(19);
        let h = vec![
            random_channel(&mut r, cfg.n_total()),
            random_channel(&mut r, cfg.n_total()),
        ];
        let design_lo = comm_design(&h, &p_tx, &cb, &cfg).unwrap();
        let mut cfg_hi = cfg.clone();
        cfg_hi.p_max *= 4.0;
        let design_hi = comm_design(&h, &p_tx, &cb, &cfg_hi).unwrap();
        assert!(design_hi.sum_rate > design_lo.sum_rate);
    }
}

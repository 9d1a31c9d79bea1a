//! Small dense linear algebra over complex matrices.
//!
//! All routines are deterministic: no threading and no data-dependent
//! reduction orders, so repeated runs produce bit-identical results. The
//! matrices in this crate stay small (a few hundred rows at most), which
//! makes cyclic Jacobi methods both fast enough and numerically robust.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

const JACOBI_MAX_SWEEPS: usize = 60;

/// Frobenius norm.
pub fn frobenius(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Hermitian part (a + a^H) / 2.
pub fn hermitian_part(a: &Array2<Complex64>) -> Array2<Complex64> {
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = 0.5 * (a[(i, j)] + a[(j, i)].conj());
        }
    }
    out
}

/// Rotates a vector so its largest-magnitude entry is real and positive.
/// Resolves the global phase ambiguity of eigenvectors and singular vectors.
pub fn fix_phase(v: &mut Array1<Complex64>) {
    let mut best = 0usize;
    let mut best_mag = -1.0;
    for (idx, z) in v.iter().enumerate() {
        let m = z.norm_sqr();
        if m > best_mag + 1e-300 {
            best_mag = m;
            best = idx;
        }
    }
    let pivot = v[best];
    if pivot.norm() > 0.0 {
        let phase = pivot / pivot.norm();
        let corr = phase.conj();
        v.mapv_inplace(|z| z * corr);
    }
}

/// Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted descending and the matching eigenvectors as
/// columns. Input is Hermitian-symmetrized first so tiny asymmetries from
/// accumulated arithmetic cannot derail the sweep.
pub fn hermitian_eig(a: &Array2<Complex64>) -> (Array1<f64>, Array2<Complex64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "hermitian_eig needs a square matrix");
    let mut m = hermitian_part(a);
    let mut v: Array2<Complex64> = Array2::eye(n);
    if n <= 1 {
        let vals = Array1::from_iter(m.iter().map(|z| z.re));
        return (vals, v);
    }
    let scale = frobenius(&m).max(1e-300);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)].norm_sqr();
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let beta = m[(p, q)];
                let b = beta.norm();
                if b <= 1e-300 {
                    continue;
                }
                let alpha = m[(p, p)].re;
                let gamma = m[(q, q)].re;
                let psi = beta / b;
                // tan of the rotation angle zeroing the (p, q) entry
                let theta = (alpha - gamma) / (2.0 * b);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // column update: col_p' = c col_p + s conj(psi) col_q,
                //                col_q' = -s psi col_p + c col_q
                let spc = Complex64::new(s, 0.0) * psi.conj();
                let sp = Complex64::new(s, 0.0) * psi;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp + spc * mkq;
                    m[(k, q)] = -sp * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk + sp * mqk;
                    m[(q, k)] = -spc * mpk + c * mqk;
                }
                m[(p, q)] = Complex64::new(0.0, 0.0);
                m[(q, p)] = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp + spc * vkq;
                    v[(k, q)] = -sp * vkp + c * vkq;
                }
            }
        }
    }
    // stable descending sort of (eigenvalue, original index)
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[(i, i)].re).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap().then(i.cmp(&j)));
    let vals = Array1::from_iter(order.iter().map(|&i| diag[i]));
    let mut vecs = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        let mut w = Array1::from_iter((0..n).map(|k| v[(k, src)]));
        fix_phase(&mut w);
        for k in 0..n {
            vecs[(k, col)] = w[k];
        }
    }
    (vals, vecs)
}

/// Largest eigenvalue and its (phase-fixed, unit-norm) eigenvector of a
/// Hermitian matrix.
pub fn principal_eigvec(a: &Array2<Complex64>) -> (f64, Array1<Complex64>) {
    let (vals, vecs) = hermitian_eig(a);
    (vals[0], vecs.column(0).to_owned())
}

/// Thin singular value decomposition `a = u * diag(sigma) * v^H`.
pub struct Svd {
    /// Left singular vectors, one column per singular value; columns whose
    /// singular value is numerically zero are zeroed.
    pub u: Array2<Complex64>,
    /// Singular values, descending.
    pub sigma: Array1<f64>,
    /// Right singular vectors as columns; always unitary.
    pub v: Array2<Complex64>,
}

/// One-sided Jacobi SVD. Works column-wise, so small singular values come
/// out with high relative accuracy, which the rank checks rely on.
pub fn svd(a: &Array2<Complex64>) -> Svd {
    let (rows, cols) = (a.nrows(), a.ncols());
    if rows < cols {
        // factor the adjoint and swap factors
        let at = adjoint(a);
        let f = svd(&at);
        return Svd {
            u: f.v,
            sigma: f.sigma,
            v: f.u,
        };
    }
    let mut w = a.clone();
    let mut v: Array2<Complex64> = Array2::eye(cols);
    let scale = frobenius(&w).max(1e-300);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = Complex64::new(0.0, 0.0);
                for k in 0..rows {
                    let wp = w[(k, p)];
                    let wq = w[(k, q)];
                    app += wp.norm_sqr();
                    aqq += wq.norm_sqr();
                    apq += wp.conj() * wq;
                }
                let b = apq.norm();
                if b <= 1e-16 * (app.sqrt() * aqq.sqrt()).max(1e-300) {
                    continue;
                }
                rotated = true;
                let psi = apq / b;
                let theta = (app - aqq) / (2.0 * b);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let spc = Complex64::new(s, 0.0) * psi.conj();
                let sp = Complex64::new(s, 0.0) * psi;
                for k in 0..rows {
                    let wp = w[(k, p)];
                    let wq = w[(k, q)];
                    w[(k, p)] = c * wp + spc * wq;
                    w[(k, q)] = -sp * wp + c * wq;
                }
                for k in 0..cols {
                    let vp = v[(k, p)];
                    let vq = v[(k, q)];
                    v[(k, p)] = c * vp + spc * vq;
                    v[(k, q)] = -sp * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
        let _ = scale;
    }
    let mut norms: Vec<f64> = (0..cols)
        .map(|j| w.column(j).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));
    let mut u = Array2::zeros((rows, cols));
    let mut vs = Array2::zeros((cols, cols));
    let mut sigma = Array1::zeros(cols);
    let tol = 1e-300;
    for (col, &src) in order.iter().enumerate() {
        sigma[col] = norms[src];
        let mut vcol = Array1::from_iter((0..cols).map(|k| v[(k, src)]));
        fix_phase(&mut vcol);
        // keep u consistent with the phase fix applied to v
        let phase_num: Complex64 = vcol
            .iter()
            .zip((0..cols).map(|k| v[(k, src)]))
            .map(|(new, old)| old.conj() * *new)
            .sum();
        let corr = if phase_num.norm() > tol {
            phase_num / phase_num.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        for k in 0..cols {
            vs[(k, col)] = vcol[k];
        }
        if norms[src] > tol {
            for k in 0..rows {
                u[(k, col)] = w[(k, src)] / norms[src] * corr;
            }
        }
        norms[src] = sigma[col];
    }
    Svd { u, sigma, v: vs }
}

/// Conjugate transpose.
pub fn adjoint(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (r, c) = (a.nrows(), a.ncols());
    let mut out = Array2::zeros((c, r));
    for i in 0..r {
        for j in 0..c {
            out[(j, i)] = a[(i, j)].conj();
        }
    }
    out
}

/// Cholesky factor `l` with `a = l * l^H`, or `None` if the matrix is not
/// positive definite to working precision.
pub fn cholesky(a: &Array2<Complex64>) -> Option<Array2<Complex64>> {
    let n = a.nrows();
    let mut l: Array2<Complex64> = Array2::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[(j, j)] = Complex64::new(dj, 0.0);
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / dj;
        }
    }
    Some(l)
}

/// Solves `a x = b` for Hermitian positive-definite `a` via Cholesky.
pub fn solve_hpd(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Option<Array2<Complex64>> {
    let l = cholesky(a)?;
    let n = a.nrows();
    let cols = b.ncols();
    let mut x = b.clone();
    // forward: l y = b
    for j in 0..cols {
        for i in 0..n {
            let mut s = x[(i, j)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = s / l[(i, i)].re;
        }
    }
    // backward: l^H x = y
    for j in 0..cols {
        for i in (0..n).rev() {
            let mut s = x[(i, j)];
            for k in (i + 1)..n {
                s -= l[(k, i)].conj() * x[(k, j)];
            }
            x[(i, j)] = s / l[(i, i)].re;
        }
    }
    Some(x)
}

/// Orthogonal projector onto the column space of `h`, `h (h^H h)^-1 h^H`.
/// A ridge of `1e-10 * trace(h^H h) / cols` is added when the Gram matrix is
/// not positive definite; the flag reports whether that happened.
pub fn column_space_projector(h: &Array2<Complex64>) -> (Array2<Complex64>, bool) {
    let cols = h.ncols();
    let hh = adjoint(h);
    let gram = hh.dot(h);
    let mut regularized = false;
    let x = match solve_hpd(&gram, &hh) {
        Some(x) => x,
        None => {
            regularized = true;
            let trace: f64 = (0..cols).map(|i| gram[(i, i)].re).sum();
            let ridge = 1e-10 * trace.max(1e-300) / cols as f64;
            let mut g = gram.clone();
            for i in 0..cols {
                g[(i, i)] += Complex64::new(ridge, 0.0);
            }
            solve_hpd(&g, &hh).expect("ridge-regularized Gram must be positive definite")
        }
    };
    (h.dot(&x), regularized)
}

/// Eigendecomposition of a real symmetric matrix, descending eigenvalues and
/// real eigenvector columns.
pub fn symmetric_eig(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let ac = a.mapv(|x| Complex64::new(x, 0.0));
    let (vals, vecs) = hermitian_eig(&ac);
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = vecs[(i, j)].re;
        }
    }
    (vals, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_complex_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((r, c), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        })
    }

    fn random_unitary(rng: &mut ChaCha8Rng, n: usize) -> Array2<Complex64> {
        // Gram-Schmidt on a random matrix
        let a = random_complex_matrix(rng, n, n);
        let mut q: Array2<Complex64> = Array2::zeros((n, n));
        for j in 0..n {
            let mut col: Array1<Complex64> = a.column(j).to_owned();
            for k in 0..j {
                let proj: Complex64 = (0..n).map(|i| q[(i, k)].conj() * col[i]).sum();
                for i in 0..n {
                    let qik = q[(i, k)];
                    col[i] -= proj * qik;
                }
            }
            let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            for i in 0..n {
                q[(i, j)] = col[i] / norm;
            }
        }
        q
    }

    #[test]
    fn eig_recovers_planted_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2usize, 3, 6, 12] {
            let q = random_unitary(&mut rng, n);
            let planted: Vec<f64> = (0..n).map(|i| (n - i) as f64 + 0.25).collect();
            let mut a: Array2<Complex64> = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let mut s = Complex64::new(0.0, 0.0);
                    for k in 0..n {
                        s += q[(i, k)] * Complex64::new(planted[k], 0.0) * q[(j, k)].conj();
                    }
                    a[(i, j)] = s;
                }
            }
            let (vals, vecs) = hermitian_eig(&a);
            for i in 0..n {
                assert!((vals[i] - planted[i]).abs() < 1e-10, "eigenvalue mismatch");
            }
            // residual a v = v diag(vals)
            let av = a.dot(&vecs);
            for j in 0..n {
                for i in 0..n {
                    let diff = av[(i, j)] - vecs[(i, j)] * Complex64::new(vals[j], 0.0);
                    assert!(diff.norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn eig_identity_returns_canonical_basis() {
        let eye: Array2<Complex64> = Array2::eye(4);
        let (vals, vecs) = hermitian_eig(&eye);
        for i in 0..4 {
            assert!((vals[i] - 1.0).abs() < 1e-14);
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((vecs[(i, j)] - Complex64::new(expect, 0.0)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn svd_reconstructs_and_detects_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_complex_matrix(&mut rng, 6, 4);
        let f = svd(&a);
        // reconstruct
        let mut rec: Array2<Complex64> = Array2::zeros((6, 4));
        for i in 0..6 {
            for j in 0..4 {
                let mut s = Complex64::new(0.0, 0.0);
                for k in 0..4 {
                    s += f.u[(i, k)] * Complex64::new(f.sigma[k], 0.0) * f.v[(j, k)].conj();
                }
                rec[(i, j)] = s;
            }
        }
        for (x, y) in rec.iter().zip(a.iter()) {
            assert!((x - y).norm() < 1e-10);
        }
        // rank-1 matrix has one dominant singular value
        let x = random_complex_matrix(&mut rng, 5, 1);
        let y = random_complex_matrix(&mut rng, 1, 5);
        let r1 = x.dot(&y);
        let f1 = svd(&r1);
        assert!(f1.sigma[0] > 1e-3);
        for k in 1..5 {
            assert!(f1.sigma[k] < 1e-12 * f1.sigma[0]);
        }
        // v stays unitary even for rank-deficient input
        let vhv = adjoint(&f1.v).dot(&f1.v);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((vhv[(i, j)] - Complex64::new(expect, 0.0)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn cholesky_solve_matches_direct_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_complex_matrix(&mut rng, 5, 5);
        let mut a = adjoint(&b).dot(&b);
        for i in 0..5 {
            a[(i, i)] += Complex64::new(0.5, 0.0);
        }
        let rhs = random_complex_matrix(&mut rng, 5, 2);
        let x = solve_hpd(&a, &rhs).expect("positive definite");
        let ax = a.dot(&x);
        for (u, v) in ax.iter().zip(rhs.iter()) {
            assert!((u - v).norm() < 1e-10);
        }
    }

    #[test]
    fn projector_is_idempotent_and_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_complex_matrix(&mut rng, 6, 2);
        let (q, regularized) = column_space_projector(&h);
        assert!(!regularized);
        let qq = q.dot(&q);
        for (x, y) in qq.iter().zip(q.iter()) {
            assert!((x - y).norm() < 1e-10);
        }
        let qh = adjoint(&q);
        for (x, y) in qh.iter().zip(q.iter()) {
            assert!((x - y).norm() < 1e-10);
        }
        // projects h onto itself
        let qh2 = q.dot(&h);
        for (x, y) in qh2.iter().zip(h.iter()) {
            assert!((x - y).norm() < 1e-10);
        }
    }
}

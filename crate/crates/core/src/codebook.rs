//! Lorentzian-constrained analog weights: the quantized phase codebook, the
//! per-microstrip analog beamforming matrices with their block-sparse
//! layout, and nearest-codeword projection.
//!
//! Every realizable metamaterial weight lies on the circle
//! 0.5 * (j + exp(j phi)) with phi in [-pi/2, pi/2]: a circle of radius 1/2
//! centered at j/2 that passes through 0 and j.

use crate::channel::PropagationMatrix;
use crate::scenario::{Side, SystemConfig};
use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("phase {0} outside [-pi/2, pi/2]")]
    PhaseOutOfRange(f64),
    #[error("weight magnitude {0} is not unit modulus")]
    NotUnitModulus(f64),
    #[error("weight grid has shape {got:?}, expected {expected:?}")]
    DimensionMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
}

/// Maps a phase in [-pi/2, pi/2] to the realizable weight 0.5 (j + e^{j phi}).
pub fn lorentzian_weight(phi: f64) -> Result<Complex64, CodebookError> {
    if !({ -PI / 2.0 }..=PI / 2.0).contains(&phi) {
        return Err(CodebookError::PhaseOutOfRange(phi));
    }
    Ok(lorentzian_weight_unchecked(phi))
}

fn lorentzian_weight_unchecked(phi: f64) -> Complex64 {
    0.5 * (Complex64::new(0.0, 1.0) + Complex64::from_polar(1.0, phi))
}

/// Folds the in-microstrip propagation phase of element n (zero-based) into
/// a unit-modulus codeword, returning 0.5 (j + w * e^{j n d_e beta}).
pub fn compose_dma_weight(
    tilde_w: Complex64,
    n: usize,
    config: &SystemConfig,
) -> Result<Complex64, CodebookError> {
    let mag = tilde_w.norm();
    if (mag - 1.0).abs() > 1e-9 {
        return Err(CodebookError::NotUnitModulus(mag));
    }
    let guide_phase = n as f64 * config.d_e * config.waveguide_beta;
    Ok(0.5 * (Complex64::new(0.0, 1.0) + tilde_w * Complex64::from_polar(1.0, guide_phase)))
}

/// Quantized set of realizable weights: 2^bits phases sampled uniformly from
/// [-pi/2, pi/2) with half-open spacing pi / 2^bits.
#[derive(Debug, Clone)]
pub struct LorentzianCodebook {
    phases: Vec<f64>,
    weights: Vec<Complex64>,
}

impl LorentzianCodebook {
    pub fn new(bits: u32) -> Self {
        let size = 1usize << bits;
        let step = PI / size as f64;
        let phases: Vec<f64> = (0..size).map(|k| -PI / 2.0 + k as f64 * step).collect();
        let weights = phases
            .iter()
            .map(|&p| lorentzian_weight_unchecked(p))
            .collect();
        Self { phases, weights }
    }

    pub fn from_config(config: &SystemConfig) -> Self {
        Self::new(config.codebook_bits)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn weights(&self) -> &[Complex64] {
        &self.weights
    }

    pub fn weight(&self, idx: usize) -> Complex64 {
        self.weights[idx]
    }

    /// Index and value of the codeword nearest to `z` in Euclidean distance,
    /// ties broken toward the smaller phase index.
    ///
    /// Euclidean distance on the codebook circle is monotone in angular
    /// separation, so only the grid neighbors of the continuous solution and
    /// the two endpoints can win; they are compared explicitly.
    pub fn nearest(&self, z: Complex64) -> (usize, Complex64) {
        let m = self.weights.len();
        let centered = z - Complex64::new(0.0, 0.5);
        if centered.norm() <= 1e-300 {
            // center of the circle: every codeword is equidistant
            return (0, self.weights[0]);
        }
        let ang = centered.arg();
        let step = PI / m as f64;
        let kf = ((ang + PI / 2.0) / step).floor() as i64;
        let clamp = |k: i64| -> usize { k.max(0).min(m as i64 - 1) as usize };
        let mut cands = [clamp(kf - 1), clamp(kf), clamp(kf + 1), 0, m - 1];
        cands.sort_unstable();
        let mut best = cands[0];
        let mut best_d = (z - self.weights[best]).norm_sqr();
        for &c in &cands[1..] {
            if c == best {
                continue;
            }
            let d = (z - self.weights[c]).norm_sqr();
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        (best, self.weights[best])
    }

    /// Entrywise nearest-codeword projection of a vector.
    pub fn project(&self, w: &ArrayView1<Complex64>) -> Array1<Complex64> {
        Array1::from_iter(w.iter().map(|&z| self.nearest(z).1))
    }
}

/// Entrywise nearest-codeword projection; idempotent on codeword vectors.
pub fn project_to_codebook(
    w: &Array1<Complex64>,
    codebook: &LorentzianCodebook,
) -> Array1<Complex64> {
    codebook.project(&w.view())
}

/// Analog beamforming matrix of one panel, stored as the n_rf x n_e weight
/// grid. The materialized N x n_rf matrix is block diagonal by microstrip:
/// column i is supported only on rows of microstrip i.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalogBfMatrix {
    pub side: Side,
    weights: Array2<Complex64>,
}

impl AnalogBfMatrix {
    pub fn weights(&self) -> &Array2<Complex64> {
        &self.weights
    }

    pub fn n_rf(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_e(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_total(&self) -> usize {
        self.weights.len()
    }

    /// Weight vector of one microstrip.
    pub fn microstrip(&self, i: usize) -> ArrayView1<'_, Complex64> {
        self.weights.row(i)
    }

    /// Materializes the N x n_rf block-sparse matrix.
    pub fn materialize(&self) -> Array2<Complex64> {
        let (n_rf, n_e) = self.weights.dim();
        let mut m = Array2::zeros((n_rf * n_e, n_rf));
        for i in 0..n_rf {
            for n in 0..n_e {
                m[(i * n_e + n, i)] = self.weights[(i, n)];
            }
        }
        m
    }

    /// Combining matrix W^H P^H of shape n_rf x N.
    pub fn combine_matrix(&self, p: &PropagationMatrix) -> Array2<Complex64> {
        let (n_rf, n_e) = self.weights.dim();
        let mut a = Array2::zeros((n_rf, n_rf * n_e));
        for i in 0..n_rf {
            for n in 0..n_e {
                let m = i * n_e + n;
                a[(i, m)] = (self.weights[(i, n)] * p.entry(m)).conj();
            }
        }
        a
    }

    /// Forward matrix P W of shape N x n_rf.
    pub fn forward_matrix(&self, p: &PropagationMatrix) -> Array2<Complex64> {
        let (n_rf, n_e) = self.weights.dim();
        let mut a = Array2::zeros((n_rf * n_e, n_rf));
        for i in 0..n_rf {
            for n in 0..n_e {
                let m = i * n_e + n;
                a[(m, i)] = p.entry(m) * self.weights[(i, n)];
            }
        }
        a
    }

    /// Precoded panel response P W V of shape N x U.
    pub fn precode_matrix(&self, p: &PropagationMatrix, v: &Array2<Complex64>) -> Array2<Complex64> {
        let (n_rf, n_e) = self.weights.dim();
        let users = v.ncols();
        let mut b = Array2::zeros((n_rf * n_e, users));
        for i in 0..n_rf {
            for n in 0..n_e {
                let m = i * n_e + n;
                let gain = p.entry(m) * self.weights[(i, n)];
                for u in 0..users {
                    b[(m, u)] = gain * v[(i, u)];
                }
            }
        }
        b
    }
}

/// Wraps a weight grid into an analog matrix, checking dimensions against
/// the configuration.
pub fn assemble_analog_matrix(
    weights: Array2<Complex64>,
    side: Side,
    config: &SystemConfig,
) -> Result<AnalogBfMatrix, CodebookError> {
    let got = weights.dim();
    let expected = (config.n_rf, config.n_e);
    if got != expected {
        return Err(CodebookError::DimensionMismatch { got, expected });
    }
    Ok(AnalogBfMatrix { side, weights })
}

/// Recovers the weight grid from a materialized N x n_rf matrix.
pub fn extract_weights(materialized: &Array2<Complex64>, n_e: usize) -> Array2<Complex64> {
    let n_rf = materialized.ncols();
    let mut w = Array2::zeros((n_rf, n_e));
    for i in 0..n_rf {
        for n in 0..n_e {
            w[(i, n)] = materialized[(i * n_e + n, i)];
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::wavelength;
    use crate::test_support::{rng, small_config, test_config};
    use rand::Rng;

    #[test]
    fn lorentzian_weight_reference_points() {
        assert!((lorentzian_weight(0.0).unwrap() - Complex64::new(0.5, 0.5)).norm() < 1e-15);
        assert!((lorentzian_weight(PI / 2.0).unwrap() - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        assert!(lorentzian_weight(-PI / 2.0).unwrap().norm() < 1e-15);
        assert!(lorentzian_weight(2.0).is_err());
        assert!(lorentzian_weight(-2.0).is_err());
    }

    #[test]
    fn codebook_is_sorted_and_on_the_circle() {
        for bits in [1u32, 3, 10] {
            let cb = LorentzianCodebook::new(bits);
            assert_eq!(cb.len(), 1usize << bits);
            for pair in cb.phases().windows(2) {
                assert!(pair[0] < pair[1]);
            }
            let center = Complex64::new(0.0, 0.5);
            for w in cb.weights() {
                assert!(((w - center).norm() - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let mut r = rng(42);
        for bits in [3u32, 8, 12] {
            let cb = LorentzianCodebook::new(bits);
            for _ in 0..300 {
                let z = Complex64::new(r.gen::<f64>() * 4.0 - 2.0, r.gen::<f64>() * 4.0 - 2.0);
                let (fast_idx, _) = cb.nearest(z);
                // oracle: strict-improvement scan in index order
                let mut best = 0usize;
                let mut best_d = (z - cb.weight(0)).norm_sqr();
                for k in 1..cb.len() {
                    let d = (z - cb.weight(k)).norm_sqr();
                    if d < best_d {
                        best = k;
                        best_d = d;
                    }
                }
                assert_eq!(fast_idx, best, "bits {bits}, z {z}");
            }
        }
    }

    #[test]
    fn nearest_reference_point_and_tie_breaks() {
        let cb = LorentzianCodebook::new(10);
        let z = Complex64::new(0.6, 0.5);
        let (idx, w) = cb.nearest(z);
        let mut best = 0usize;
        let mut best_d = (z - cb.weight(0)).norm_sqr();
        for k in 1..cb.len() {
            let d = (z - cb.weight(k)).norm_sqr();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        assert_eq!(idx, best);
        assert!((z - w).norm() <= (z - cb.weight(best)).norm() + 1e-15);
        // circle center: all codewords tie, lowest index wins
        let (idx, _) = cb.nearest(Complex64::new(0.0, 0.5));
        assert_eq!(idx, 0);
        // zero input snaps to the zero-weight codeword exactly
        let (idx, w) = cb.nearest(Complex64::new(0.0, 0.0));
        assert_eq!(idx, 0);
        assert!(w.norm() < 1e-15);
    }

    #[test]
    fn projection_is_idempotent() {
        let cb = LorentzianCodebook::new(6);
        let mut r = rng(7);
        let v = Array1::from_iter((0..16).map(|_| {
            Complex64::new(r.gen::<f64>() * 2.0 - 1.0, r.gen::<f64>() * 2.0 - 1.0)
        }));
        let p1 = project_to_codebook(&v, &cb);
        let p2 = project_to_codebook(&p1, &cb);
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn projection_never_beaten_by_another_codeword() {
        let cb = LorentzianCodebook::new(3);
        let mut r = rng(3);
        for _ in 0..100 {
            let z = Complex64::new(r.gen::<f64>() * 3.0 - 1.5, r.gen::<f64>() * 3.0 - 1.5);
            let (_, w) = cb.nearest(z);
            for other in cb.weights() {
                assert!((z - w).norm() <= (z - other).norm() + 1e-15);
            }
        }
    }

    #[test]
    fn compose_weight_reference_cases() {
        let cfg = test_config();
        let one = Complex64::new(1.0, 0.0);
        // first element has no in-guide phase
        let w = compose_dma_weight(one, 0, &cfg).unwrap();
        assert!((w - Complex64::new(0.5, 0.5)).norm() < 1e-15);
        // half-wavelength step with beta = 2 pi / lambda adds a phase of pi
        let mut cfg2 = cfg.clone();
        let lambda = wavelength(&cfg2);
        cfg2.d_e = lambda / 2.0;
        cfg2.waveguide_beta = 2.0 * PI / lambda;
        let tw = Complex64::from_polar(1.0, PI / 4.0);
        let got = compose_dma_weight(tw, 1, &cfg2).unwrap();
        let oracle = 0.5 * (Complex64::new(0.0, 1.0) + Complex64::from_polar(1.0, PI / 4.0 + PI));
        assert!((got - oracle).norm() < 1e-12);
        // circle membership for random unit inputs
        let mut r = rng(9);
        let center = Complex64::new(0.0, 0.5);
        for n in 0..20 {
            let tw = Complex64::from_polar(1.0, r.gen::<f64>() * 2.0 * PI);
            let w = compose_dma_weight(tw, n, &cfg).unwrap();
            assert!(((w - center).norm() - 0.5).abs() < 1e-12);
        }
        assert!(compose_dma_weight(Complex64::new(0.5, 0.0), 0, &cfg).is_err());
    }

    #[test]
    fn assembled_matrix_has_block_support() {
        let cfg = small_config(2, 2);
        let w = Array2::from_elem((2, 2), Complex64::new(1.0, 0.0));
        let bf = assemble_analog_matrix(w, Side::Tx, &cfg).unwrap();
        let m = bf.materialize();
        assert_eq!(m.dim(), (4, 2));
        let mut nonzeros = 0;
        for i in 0..4 {
            for j in 0..2 {
                let in_block = i / 2 == j;
                if in_block {
                    assert!((m[(i, j)] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
                    nonzeros += 1;
                } else {
                    assert_eq!(m[(i, j)], Complex64::new(0.0, 0.0));
                }
            }
        }
        assert_eq!(nonzeros, 4);
    }

    #[test]
    fn column_norms_match_microstrip_norms_and_round_trip() {
        let cfg = small_config(3, 4);
        let mut r = rng(11);
        let w = Array2::from_shape_fn((3, 4), |_| {
            Complex64::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5)
        });
        let bf = assemble_analog_matrix(w.clone(), Side::Rx, &cfg).unwrap();
        let m = bf.materialize();
        for i in 0..3 {
            let col: f64 = m.column(i).iter().map(|z| z.norm_sqr()).sum();
            let row: f64 = w.row(i).iter().map(|z| z.norm_sqr()).sum();
            assert!((col - row).abs() < 1e-14);
        }
        let back = extract_weights(&m, 4);
        assert_eq!(back, w);
        // dimension mismatch rejected
        let bad = Array2::zeros((2, 4));
        assert!(assemble_analog_matrix(bad, Side::Rx, &cfg).is_err());
    }
}

//! Minimal dense linear algebra for coarse-grid cross checks: LU solve,
//! spectral-radius estimation, and symmetric eigenvalues. Sized for the
//! few-hundred-unknown oracle systems, not for production solves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Clone, Debug)]
pub struct DenseMatrix<S: Scalar> {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> DenseMatrix<S> {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        DenseMatrix {
            n_rows,
            n_cols,
            data: vec![S::zero(); n_rows * n_cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.n_cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut S {
        &mut self.data[r * self.n_cols + c]
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .map(|r| {
                let row = &self.data[r * self.n_cols..(r + 1) * self.n_cols];
                row.iter().zip(x).map(|(&a, &b)| a * b).sum()
            })
            .collect()
    }

    /// `self - other` (same shape).
    pub fn sub(&self, other: &DenseMatrix<S>) -> DenseMatrix<S> {
        assert_eq!(self.n_rows, other.n_rows);
        assert_eq!(self.n_cols, other.n_cols);
        DenseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }
}

/// Solve `A x = b` by partial-pivot LU. Returns `None` for singular `A`.
pub fn lu_solve<S: Scalar>(a: &DenseMatrix<S>, b: &[S]) -> Option<Vec<S>> {
    assert_eq!(a.n_rows, a.n_cols);
    let n = a.n_rows;
    assert_eq!(b.len(), n);
    let mut lu = a.data.clone();
    let mut x: Vec<S> = b.to_vec();
    let mut piv: Vec<usize> = (0..n).collect();

    for k in 0..n {
        let mut p = k;
        let mut best = lu[piv[k] * n + k].abs();
        for r in (k + 1)..n {
            let v = lu[piv[r] * n + k].abs();
            if v > best {
                best = v;
                p = r;
            }
        }
        if best == S::zero() {
            return None;
        }
        piv.swap(k, p);
        let pk = piv[k];
        let diag = lu[pk * n + k];
        for r in (k + 1)..n {
            let pr = piv[r];
            let factor = lu[pr * n + k] / diag;
            lu[pr * n + k] = factor;
            for c in (k + 1)..n {
                let sub = factor * lu[pk * n + c];
                lu[pr * n + c] = lu[pr * n + c] - sub;
            }
        }
    }

    // Forward substitution on the permuted rows.
    let mut y = vec![S::zero(); n];
    for r in 0..n {
        let pr = piv[r];
        let mut v = x[pr];
        for c in 0..r {
            v = v - lu[pr * n + c] * y[c];
        }
        y[r] = v;
    }
    // Back substitution.
    for r in (0..n).rev() {
        let pr = piv[r];
        let mut v = y[r];
        for c in (r + 1)..n {
            v = v - lu[pr * n + c] * x[c];
        }
        x[r] = v / lu[pr * n + r];
    }
    Some(x)
}

/// Spectral-radius estimate of a (possibly nonsymmetric) matrix via the
/// growth rate of repeated application to a random vector. Robust against
/// complex dominant pairs by averaging the growth over a window.
pub fn spectral_radius_estimate<S: Scalar>(m: &DenseMatrix<S>, iters: usize, seed: u64) -> S {
    assert_eq!(m.n_rows, m.n_cols);
    let n = m.n_rows;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<S> = (0..n).map(|_| S::of(rng.gen::<f64>() - 0.5)).collect();
    let norm = |v: &[S]| v.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nv = norm(&v);
    if nv == S::zero() {
        return S::zero();
    }
    for x in v.iter_mut() {
        *x = *x / nv;
    }
    let mut log_growth = S::zero();
    let window = iters.min(20).max(1);
    let mut counted = 0usize;
    for it in 0..iters {
        let w = m.matvec(&v);
        let nw = norm(&w);
        if nw == S::zero() {
            return S::zero();
        }
        if it + window >= iters {
            log_growth = log_growth + nw.ln();
            counted += 1;
        }
        v = w.iter().map(|&x| x / nw).collect();
    }
    (log_growth / S::of(counted.max(1) as f64)).exp()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues<S: Scalar>(m: &DenseMatrix<S>, sweeps: usize) -> Vec<S> {
    assert_eq!(m.n_rows, m.n_cols);
    let n = m.n_rows;
    let mut a = m.data.clone();
    for _ in 0..sweeps {
        let mut off = S::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off + a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < S::of(1e-14) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < S::of(1e-300) {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let tau = (aqq - app) / (S::of(2.0) * apq);
                let t = if tau >= S::zero() {
                    S::one() / (tau + (S::one() + tau * tau).sqrt())
                } else {
                    -S::one() / (-tau + (S::one() + tau * tau).sqrt())
                };
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<S> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eig
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_small_system() {
        let mut a = DenseMatrix::zeros(3, 3);
        let rows = [[4.0, 1.0, 0.0], [1.0, 3.0, -1.0], [0.0, -1.0, 5.0]];
        for r in 0..3 {
            for c in 0..3 {
                *a.at_mut(r, c) = rows[r][c];
            }
        }
        let x = [1.0f64, -2.0, 0.5];
        let b = a.matvec(&x);
        let solved = lu_solve(&a, &b).unwrap();
        for i in 0..3 {
            assert!((solved[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn lu_detects_singularity() {
        let mut a = DenseMatrix::<f64>::zeros(2, 2);
        *a.at_mut(0, 0) = 1.0;
        *a.at_mut(0, 1) = 2.0;
        *a.at_mut(1, 0) = 2.0;
        *a.at_mut(1, 1) = 4.0;
        assert!(lu_solve(&a, &[1.0, 1.0]).is_none());
    }

    #[test]
    fn spectral_radius_of_rotation_scaled() {
        // 0.7 * rotation has spectral radius 0.7 (complex pair).
        let mut m = DenseMatrix::<f64>::zeros(2, 2);
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        *m.at_mut(0, 0) = 0.7 * c;
        *m.at_mut(0, 1) = -0.7 * s;
        *m.at_mut(1, 0) = 0.7 * s;
        *m.at_mut(1, 1) = 0.7 * c;
        let rho = spectral_radius_estimate(&m, 200, 1);
        assert!((rho - 0.7).abs() < 1e-6, "rho {rho}");
    }

    #[test]
    fn jacobi_eigenvalues_diag_plus_rank1() {
        let n = 6;
        let mut m = DenseMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                *m.at_mut(i, j) = if i == j { (i + 1) as f64 } else { 0.1 };
            }
        }
        let eig = symmetric_eigenvalues(&m, 30);
        // Trace preserved.
        let tr: f64 = (1..=n).map(|i| i as f64).sum();
        let sum: f64 = eig.iter().sum();
        assert!((sum - tr).abs() < 1e-9);
        assert!(eig.windows(2).all(|w| w[0] <= w[1]));
    }
}

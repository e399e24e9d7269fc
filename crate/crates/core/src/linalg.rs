//! Complex dense linear algebra shared by the covariance and estimator code.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Largest `|A_ij - conj(A_ji)|` over the matrix.
pub fn hermitian_deviation(a: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in j..n {
            let d = (a[(i, j)] - a[(j, i)].conj()).norm();
            worst = worst.max(d);
        }
    }
    worst
}

pub fn max_abs(a: &CMatrix) -> f64 {
    a.iter().fold(0.0f64, |m, z| m.max(z.norm()))
}

/// Overwrites the upper triangle with the conjugate of the lower triangle and
/// zeroes the imaginary part of the diagonal.
pub fn hermitize_from_lower(a: &mut CMatrix) {
    let n = a.nrows();
    for j in 0..n {
        a[(j, j)].im = 0.0;
        for i in (j + 1)..n {
            a[(j, i)] = a[(i, j)].conj();
        }
    }
}

/// Accumulates `weight * h h^H` into the lower triangle of `acc`.
pub fn add_outer_lower(acc: &mut CMatrix, h: &CVector, weight: f64) {
    let n = h.len();
    for j in 0..n {
        let hj = h[j].conj() * weight;
        for i in j..n {
            acc[(i, j)] += h[i] * hj;
        }
    }
}

/// `(A + Aᴴ) / 2`.
pub fn hermitized(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

pub fn outer(h: &CVector) -> CMatrix {
    h * h.adjoint()
}

pub fn frobenius_sq(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn trace_re(a: &CMatrix) -> f64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)].re).sum()
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: CMatrix,
}

impl HermitianEigen {
    pub fn new(a: &CMatrix) -> Self {
        let eig = a.clone().symmetric_eigen();
        let n = a.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let mut vectors = CMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        HermitianEigen { values, vectors }
    }

    /// `Γ diag(values) Γ^H`, returned exactly Hermitian.
    pub fn reconstruct(&self, values: &[f64]) -> CMatrix {
        let n = self.vectors.nrows();
        let mut scaled = self.vectors.clone();
        for (k, &v) in values.iter().enumerate() {
            scaled.column_mut(k).scale_mut(v);
        }
        let mut out = &scaled * self.vectors.adjoint();
        debug_assert_eq!(out.nrows(), n);
        hermitize_from_lower(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let a = CMatrix::from_row_slice(
            3,
            3,
            &[
                c(2.0, 0.0),
                c(0.5, 0.3),
                c(0.0, -0.2),
                c(0.5, -0.3),
                c(1.0, 0.0),
                c(0.1, 0.0),
                c(0.0, 0.2),
                c(0.1, 0.0),
                c(0.5, 0.0),
            ],
        );
        let e = HermitianEigen::new(&a);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let back = e.reconstruct(&e.values);
        assert!((back - &a).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn outer_lower_matches_full_outer() {
        let h = CVector::from_vec(vec![c(1.0, 2.0), c(-0.5, 0.1), c(0.0, 3.0)]);
        let mut acc = CMatrix::zeros(3, 3);
        add_outer_lower(&mut acc, &h, 0.5);
        hermitize_from_lower(&mut acc);
        let full = outer(&h) * c(0.5, 0.0);
        assert!((acc - full).iter().all(|z| z.norm() < 1e-14));
    }
}

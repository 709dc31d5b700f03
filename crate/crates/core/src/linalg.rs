//! Dense symmetric linear algebra used by the objective and the optimizers.
//!
//! The factorization is stored as the upper factor `U` with `A = UᵀU`, kept
//! column-major so that every inner loop walks contiguous memory.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Cholesky factorization `A = UᵀU` of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    /// Column-major upper factor; column `j` holds row `j` of `L = Uᵀ`.
    u: Vec<f64>,
}

impl Cholesky {
    /// Factors `a`, reading only its upper triangle.
    ///
    /// Fails with [`Error::NotPositiveDefinite`] carrying the index of the
    /// first non-positive pivot.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "cholesky (square matrix)",
                expected: n,
                found: a.ncols(),
            });
        }
        let src = a.as_slice();
        let mut u = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..=j {
                let (head, tail) = u.split_at_mut(j * n);
                let col_j = &mut tail[..n];
                let dot: f64 = if i == j {
                    col_j[..i].iter().map(|v| v * v).sum()
                } else {
                    let col_i = &head[i * n..i * n + i];
                    col_i.iter().zip(&col_j[..i]).map(|(x, y)| x * y).sum()
                };
                let value = src[j * n + i] - dot;
                if i == j {
                    if !(value > 0.0) || !value.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: j });
                    }
                    col_j[j] = value.sqrt();
                } else {
                    col_j[i] = value / head[i * n + i];
                }
            }
        }
        Ok(Self { n, u })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn at(&self, row: usize, col: usize) -> f64 {
        self.u[col * self.n + row]
    }

    /// `log|A| = 2 Σ log U_jj`.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.n).map(|j| self.at(j, j).ln()).sum::<f64>()
    }

    /// Solves `Uᵀ z = b` in place.
    fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let col = &self.u[i * n..i * n + i];
            let dot: f64 = col.iter().zip(&b[..i]).map(|(x, y)| x * y).sum();
            b[i] = (b[i] - dot) / self.u[i * n + i];
        }
    }

    /// Solves `U x = z` in place.
    fn backward_in_place(&self, z: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let xi = z[i] / self.u[i * n + i];
            z[i] = xi;
            let col = &self.u[i * n..i * n + i];
            for (zk, uk) in z[..i].iter_mut().zip(col) {
                *zk -= uk * xi;
            }
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.forward_in_place(x.as_mut_slice());
        self.backward_in_place(x.as_mut_slice());
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        let n = self.n;
        for col in x.as_mut_slice().chunks_mut(n) {
            self.forward_in_place(col);
            self.backward_in_place(col);
        }
        x
    }

    /// `bᵀ A⁻¹ b` computed as `‖U⁻ᵀ b‖²`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        let mut z = b.clone();
        self.forward_in_place(z.as_mut_slice());
        z.norm_squared()
    }

    /// Upper-triangular inverse `U⁻¹`.
    pub fn factor_inverse(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut inv = DMatrix::<f64>::zeros(n, n);
        let mut work = vec![0.0; n];
        for j in 0..n {
            // Solve U x = e_j; only the leading j + 1 entries are non-zero.
            work[..=j].iter_mut().for_each(|v| *v = 0.0);
            work[j] = 1.0;
            for i in (0..=j).rev() {
                let xi = work[i] / self.u[i * n + i];
                work[i] = xi;
                let col = &self.u[i * n..i * n + i];
                for (wk, uk) in work[..i].iter_mut().zip(col) {
                    *wk -= uk * xi;
                }
            }
            inv.view_mut((0, j), (j + 1, 1))
                .copy_from_slice(&work[..=j]);
        }
        inv
    }

    /// `A⁻¹ = U⁻¹ U⁻ᵀ`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let uinv = self.factor_inverse();
        let mut out = &uinv * uinv.transpose();
        symmetrize_in_place(&mut out);
        out
    }

    /// `trace(A⁻¹) = ‖U⁻¹‖²_F`.
    pub fn inverse_trace(&self) -> f64 {
        self.factor_inverse().norm_squared()
    }
}

/// `log|A|` of a symmetric positive definite matrix via Cholesky.
pub fn logdet_spd(a: &DMatrix<f64>) -> Result<f64> {
    Ok(Cholesky::factor(a)?.logdet())
}

/// Frobenius inner product `⟨A, B⟩ = Σ A_ij B_ij`.
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum()
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize_in_place(&mut out);
    out
}

/// `ZᵀZ`, exactly symmetric.
///
/// Goes through an explicit transpose so the product hits the blocked kernel
/// rather than `tr_mul`'s dot-product loop.
pub fn gram(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = z.transpose() * z;
    symmetrize_in_place(&mut g);
    g
}

/// `ZᵀZ + shift·I`.
pub fn gram_plus_shift(z: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    let mut g = gram(z);
    for k in 0..g.nrows() {
        g[(k, k)] += shift;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed;
        let g = DMatrix::from_fn(n, n, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        });
        &g * g.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn identity_logdet_is_zero() {
        assert_eq!(logdet_spd(&DMatrix::identity(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_logdet() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
        assert!((logdet_spd(&a).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reports_failing_pivot() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 2.0, 1.0]);
        match Cholesky::factor(&a) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn solve_inverse_and_trace_agree_with_nalgebra() {
        let a = spd(9, 4);
        let chol = Cholesky::factor(&a).unwrap();
        let reference = a.clone().cholesky().unwrap();
        let b = DVector::from_fn(9, |i, _| (i as f64).sin());
        assert!((chol.solve_vec(&b) - reference.solve(&b)).norm() < 1e-12);
        let inv = chol.inverse();
        assert!((&inv - reference.inverse()).norm() < 1e-12);
        assert!((chol.inverse_trace() - inv.trace()).abs() < 1e-12);
        assert!((chol.quad_form(&b) - b.dot(&reference.solve(&b))).abs() < 1e-12);
        let rhs = DMatrix::from_fn(9, 3, |i, j| (i * 3 + j) as f64);
        assert!((chol.solve_mat(&rhs) - reference.solve(&rhs)).norm() < 1e-10);
    }
}

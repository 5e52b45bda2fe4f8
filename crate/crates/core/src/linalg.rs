//! Small dense square matrices and a cyclic Jacobi eigensolver.
//!
//! Covariances in this crate have dimension equal to the data dimension
//! (2 by default, at most a handful), so a plain row-major `Vec<f64>` and
//! Jacobi rotations are the right tool: unconditionally stable for real
//! symmetric input and accurate to working precision.

use crate::error::{Error, Result};

/// Relative off-diagonal Frobenius mass at which Jacobi sweeps stop.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Eigenvalues in `[-PSD_TOLERANCE, 0)` are clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::identity(n);
        m.scale_mut(s);
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn scale_mut(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: other.n,
            });
        }
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        Matrix {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let scale = self.frobenius().max(1.0);
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if (self.get(i, j) - self.get(j, i)).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    acc += self.get(i, j).powi(2);
                }
            }
        }
        acc.sqrt()
    }
}

/// Eigenpairs of a symmetric matrix: `a = V · diag(values) · Vᵀ`, eigenvectors
/// stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymmetricEigen {
    /// Rebuilds `V · diag(f(λ)) · Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let mapped: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.vectors.get(i, k) * mapped[k] * self.vectors.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps over every (p, q) pair in row order, annihilating `a[p][q]` with a
/// plane rotation, until the off-diagonal Frobenius norm drops below
/// `JACOBI_TOLERANCE` relative to the Frobenius norm of the input.
pub fn jacobi_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    if !a.is_symmetric(1e-12) {
        return Err(Error::NotSymmetric);
    }
    let n = a.dim();
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius();
    if scale == 0.0 || n < 2 {
        return Ok(SymmetricEigen {
            values: (0..n).map(|i| m.get(i, i)).collect(),
            vectors: v,
        });
    }

    for _ in 0..MAX_SWEEPS {
        if m.off_diagonal_norm() <= JACOBI_TOLERANCE * scale {
            return Ok(SymmetricEigen {
                values: (0..n).map(|i| m.get(i, i)).collect(),
                vectors: v,
            });
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                // tan of the rotation angle, smaller root for stability
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);

                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Err(Error::NoConvergence(MAX_SWEEPS))
}

/// Principal square root of a symmetric PSD matrix.
///
/// Eigenvalues in `[-PSD_TOLERANCE, 0)` are treated as zero; anything more
/// negative is rejected.
pub fn sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let eig = jacobi_eigen(a)?;
    let clamped = clamp_spectrum(&eig.values)?;
    let sqrt = SymmetricEigen {
        values: clamped,
        vectors: eig.vectors,
    }
    .reconstruct_with(f64::sqrt);
    Ok(sqrt.symmetrized())
}

/// Eigenvalues with tiny negatives clamped to zero.
pub fn clamp_spectrum(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&l| {
            if l >= 0.0 {
                Ok(l)
            } else if l >= -PSD_TOLERANCE {
                Ok(0.0)
            } else {
                Err(Error::NotPsd(l))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_is_its_own_decomposition() {
        let m = Matrix::diagonal(&[3.0, 1.0, 2.0]);
        let eig = jacobi_eigen(&m).unwrap();
        assert_eq!(eig.values, vec![3.0, 1.0, 2.0]);
        assert_eq!(eig.vectors, Matrix::identity(3));
    }

    #[test]
    fn two_by_two_known_spectrum() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let mut vals = jacobi_eigen(&m).unwrap().values;
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((vals[0] - 1.0).abs() < 1e-14);
        assert!((vals[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(jacobi_eigen(&m), Err(Error::NotSymmetric)));
    }

    #[test]
    fn sqrt_clamps_tiny_negative_and_rejects_large_negative() {
        let m = Matrix::diagonal(&[4.0, -1e-12]);
        let r = sqrt_psd(&m).unwrap();
        assert_eq!(r.get(0, 0), 2.0);
        assert_eq!(r.get(1, 1), 0.0);
        assert!(matches!(
            sqrt_psd(&Matrix::diagonal(&[1.0, -1e-3])),
            Err(Error::NotPsd(_))
        ));
    }

    #[test]
    fn zero_matrix() {
        let r = sqrt_psd(&Matrix::zeros(3)).unwrap();
        assert_eq!(r, Matrix::zeros(3));
    }
}

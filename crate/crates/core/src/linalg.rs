//! Dense linear algebra glue. Large problems go through faer; the tiny
//! determinants inside quadrature integrands use a stack LU.

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, Side};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub fn hermiticity_defect(h: &[Complex64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((h[i * n + j] - h[j * n + i].conj()).norm());
        }
    }
    worst
}

pub fn to_mat(data: &[Complex64], n: usize) -> Mat<Complex64> {
    assert_eq!(data.len(), n * n);
    Mat::from_fn(n, n, |i, j| data[i * n + j])
}

pub fn from_mat(m: &Mat<Complex64>) -> Vec<Complex64> {
    let (r, c) = (m.nrows(), m.ncols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn check_hermitian(h: &[Complex64], n: usize) -> Result<()> {
    if h.len() != n * n {
        return Err(Error::Dimension(format!("{} entries for a {n}x{n} matrix", h.len())));
    }
    let deviation = hermiticity_defect(h, n);
    if deviation > 1e-12 {
        return Err(Error::NotHermitian { deviation });
    }
    Ok(())
}

/// Ascending eigenvalues of a Hermitian matrix.
pub fn hermitian_eigenvalues(h: &[Complex64], n: usize) -> Result<Vec<f64>> {
    check_hermitian(h, n)?;
    let m = to_mat(h, n);
    let mut ev = m
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Eigenvalues (ascending) and orthonormal eigenvectors as columns.
pub fn hermitian_eigen(h: &[Complex64], n: usize) -> Result<(Vec<f64>, Mat<Complex64>)> {
    check_hermitian(h, n)?;
    let m = to_mat(h, n);
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let vals: Vec<f64> = (0..n).map(|k| s[k].re).collect();
    Ok((vals, evd.U().to_owned()))
}

/// `(z - H)^{-1}` by partial-pivoting LU.
pub fn resolvent_matrix(h: &[Complex64], n: usize, z: Complex64) -> Mat<Complex64> {
    let a = Mat::from_fn(n, n, |i, j| {
        let v = -h[i * n + j];
        if i == j {
            v + z
        } else {
            v
        }
    });
    a.partial_piv_lu().inverse()
}

/// Determinant of a small complex matrix (row-major, `n <= 8`), partial pivoting.
pub fn small_det(m: &[Complex64], n: usize) -> Complex64 {
    debug_assert!(n <= 8 && m.len() == n * n);
    let mut a = [Complex64::default(); 64];
    a[..n * n].copy_from_slice(m);
    let mut det = Complex64::new(1.0, 0.0);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].norm_sqr();
        for r in col + 1..n {
            let v = a[r * n + col].norm_sqr();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return Complex64::default();
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        let inv = p.inv();
        for r in col + 1..n {
            let f = a[r * n + col] * inv;
            if f != Complex64::default() {
                for c in col + 1..n {
                    let v = a[col * n + c];
                    a[r * n + c] -= f * v;
                }
            }
        }
    }
    det
}

/// Determinant of any square complex matrix through faer.
pub fn det(m: &[Complex64], n: usize) -> Complex64 {
    to_mat(m, n).determinant()
}

/// Symmetric square root and eigenvalues of a real symmetric positive matrix.
pub fn symmetric_sqrt(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (a[i * n + j] + a[j * n + i]));
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let vals: Vec<f64> = (0..n).map(|k| s[k]).collect();
    if let Some(bad) = vals.iter().find(|&&v| v <= 0.0) {
        return Err(Error::Singular(format!(
            "matrix is not positive definite (eigenvalue {bad:e})"
        )));
    }
    let mut root = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            root[i * n + j] = (0..n).map(|k| u[(i, k)] * vals[k].sqrt() * u[(j, k)]).sum();
        }
    }
    Ok((root, vals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn small_det_matches_faer() {
        let m = [
            c(1.0, 0.5),
            c(-2.0, 0.1),
            c(0.3, 0.0),
            c(0.0, 1.0),
            c(4.0, -1.0),
            c(2.0, 2.0),
            c(1.5, 0.0),
            c(0.2, -0.7),
            c(-1.0, 0.0),
        ];
        let a = small_det(&m, 3);
        let b = det(&m, 3);
        assert!((a - b).norm() < 1e-13 * b.norm());
        assert_eq!(small_det(&[c(2.0, 1.0)], 1), c(2.0, 1.0));
    }

    #[test]
    fn sqrt_squares_back() {
        let a = [2.0, 0.5, 0.0, 0.5, 3.0, 0.2, 0.0, 0.2, 1.0];
        let (r, _) = symmetric_sqrt(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| r[i * 3 + k] * r[k * 3 + j]).sum();
                assert!((v - a[i * 3 + j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn rejects_non_hermitian() {
        let h = [c(0.0, 0.0), c(1.0, 0.0), c(2.0, 0.0), c(0.0, 0.0)];
        assert!(matches!(hermitian_eigenvalues(&h, 2), Err(Error::NotHermitian { .. })));
    }
}

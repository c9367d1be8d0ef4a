use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Relative entrywise tolerance for accepting a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Rejects non-square or visibly asymmetric input and returns `(M + Mᵀ)/2`.
pub fn symmetric_part(m: &DenseMatrix) -> Result<DenseMatrix> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let asym = m.relative_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    Ok(m.symmetrized())
}

/// Lower-triangular `L` with `L·Lᵀ = m`.
///
/// Fails with [`Error::NotPositiveDefinite`] as soon as a pivot is not
/// strictly positive. A pivot within `n·ε·max_i m_ii` of zero is rounding noise
/// and counts as zero. No diagonal shift is applied here.
pub fn cholesky(m: &DenseMatrix) -> Result<DenseMatrix> {
    let a = symmetric_part(m)?;
    let n = a.rows();
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0, f64::max);
    let noise = n as f64 * f64::EPSILON * max_diag;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > noise) || !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = libm::sqrt(d);
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L · X = B` for lower-triangular `L`.
pub fn solve_lower(l: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_triangular_system(l, b)?;
    let (n, k) = b.shape();
    let mut x = b.clone();
    for c in 0..k {
        for i in 0..n {
            let mut s = x[(i, c)];
            for p in 0..i {
                s -= l[(i, p)] * x[(p, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `Lᵀ · X = B` for lower-triangular `L`.
pub fn solve_lower_transposed(l: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_triangular_system(l, b)?;
    let (n, k) = b.shape();
    let mut x = b.clone();
    for c in 0..k {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for p in (i + 1)..n {
                s -= l[(p, i)] * x[(p, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

fn check_triangular_system(l: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if !l.is_square() {
        return Err(Error::NotSquare {
            rows: l.rows(),
            cols: l.cols(),
        });
    }
    if l.rows() != b.rows() {
        return Err(Error::DimensionMismatch {
            context: "triangular solve",
            expected: l.rows(),
            found: b.rows(),
        });
    }
    Ok(())
}

#![allow(clippy::needless_range_loop)]

//! Reference implementations used as independent oracles. They share no code
//! with the library kernels.
#![allow(dead_code)]

use lrf_core::DenseMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

/// Triple-loop product.
pub fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a[(i, p)] * b[(p, j)];
            }
            out[i * b.cols() + j] = s;
        }
    }
    DenseMatrix::new(a.rows(), b.cols(), out).unwrap()
}

/// Eigenvalues of a symmetric matrix by the classical two-sided cyclic
/// Jacobi method, sorted descending.
pub fn symmetric_eigenvalues(m: &DenseMatrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (m[(i, j)] + m[(j, i)])).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values as square roots of the eigenvalues of `MᵀM`, descending.
/// Adequate for well-conditioned oracle checks only.
pub fn singular_values(m: &DenseMatrix) -> Vec<f64> {
    let small = if m.rows() >= m.cols() {
        naive_matmul(&m.transpose(), m)
    } else {
        naive_matmul(m, &m.transpose())
    };
    symmetric_eigenvalues(&small)
        .into_iter()
        .map(|v| v.max(0.0).sqrt())
        .collect()
}

/// `Q · diag(lambda) · Qᵀ` with `Q` from Gram-Schmidt on a Gaussian matrix.
pub fn symmetric_with_spectrum(rng: &mut ChaCha8Rng, lambda: &[f64]) -> DenseMatrix {
    let n = lambda.len();
    let g = gaussian(rng, n, n);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| g[(i, j)]).collect();
        for _ in 0..2 {
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / nrm).collect());
    }
    DenseMatrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| q[k][i] * lambda[k] * q[k][j]).sum()
    })
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

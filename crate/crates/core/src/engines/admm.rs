//! Noise-enhanced truncation.
//!
//! A perturbation `ΔW = −ε·Q·L` is added to `W` before double-SVD
//! truncation, where `Lᵀ·L = (X·Xᵀ)⁻¹`. Because `L·X` has orthonormal rows,
//! `‖ΔW·X‖_F = ε·‖Q‖_F = ε`. `Q` is chosen to shrink the nuclear norm of the
//! perturbed whitened weight `(W + ΔW)·S = W·S − ε·Q·L·S`, solved with ADMM
//! on the splitting `Z = W·S − ε·Q·L·S`:
//!
//! * `Z ← SVT_{1/ρ}(W·S − ε·Q·M − Λ/ρ)` with `M = L·S`,
//! * `Q ← (W·S − Z − Λ/ρ)·M⁺ / ε`, then rescaled to unit Frobenius norm,
//! * `Λ ← Λ + ρ·(Z − W·S + ε·Q·M)`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engines::{check_inputs, truncate_double_svd, LowRankFactors};
use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, default_pinv_tol, pseudo_inverse_factors, solve_lower, svd, symmetric_part,
};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmParams {
    pub eps: f64,
    pub rho: f64,
    pub max_iter: usize,
    /// Stop once `‖Z − W·S + ε·Q·M‖_F / ‖W·S‖_F` drops below this.
    pub tol: f64,
}

impl Default for AdmmParams {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            rho: 1.0,
            max_iter: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub factors: LowRankFactors,
    /// `‖(W + ΔW)·S‖_*`; entry 0 is the unperturbed weight.
    pub trace: Vec<f64>,
    pub delta_w: DenseMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// Some iteration raised the objective by more than `1e-6` relative.
    pub non_monotone: bool,
}

pub fn truncate_admm_noise(
    w: &DenseMatrix,
    gram: &DenseMatrix,
    k: usize,
    params: &AdmmParams,
) -> Result<AdmmOutcome> {
    if !(params.eps >= 0.0) || !(params.rho > 0.0) {
        return Err(Error::InvalidParameter("admm needs eps >= 0 and rho > 0"));
    }
    check_inputs(w, Some(gram), k)?;
    let (m, n) = w.shape();
    if params.eps == 0.0 {
        return Ok(AdmmOutcome {
            factors: truncate_double_svd(w, gram, k)?,
            trace: Vec::new(),
            delta_w: DenseMatrix::zeros(m, n),
            iterations: 0,
            converged: true,
            non_monotone: false,
        });
    }

    let g = symmetric_part(gram)?;
    let spectrum = svd(&g)?.sigma;
    let smin = spectrum[n - 1];
    if !(smin > default_pinv_tol(n) * spectrum[0]) {
        return Err(Error::GramNotInvertible);
    }
    let s = cholesky(&g).map_err(|_| Error::GramNotInvertible)?;
    // L = S⁻¹ gives Lᵀ·L = S⁻ᵀ·S⁻¹ = (S·Sᵀ)⁻¹.
    let l = solve_lower(&s, &DenseMatrix::identity(n))?;
    let ws = w.matmul(&s)?;
    let mix = l.matmul(&s)?;
    let mix_pinv = pseudo_inverse_factors(&svd(&mix)?, default_pinv_tol(n))?;

    let eps = params.eps;
    let rho = params.rho;
    let ws_norm = ws.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut q = DenseMatrix::zeros(m, n);
    let mut dual = DenseMatrix::zeros(m, n);
    let mut trace = Vec::with_capacity(params.max_iter + 1);
    trace.push(nuclear_norm(&ws)?);
    let mut non_monotone = false;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..params.max_iter {
        iterations += 1;
        let qm = q.matmul(&mix)?.scale(eps);
        // Z-update
        let mut target = ws.sub(&qm)?;
        target.add_assign_scaled(&dual, -1.0 / rho);
        let z = singular_value_threshold(&target, 1.0 / rho)?;
        // Q-update
        let mut rhs = ws.sub(&z)?;
        rhs.add_assign_scaled(&dual, -1.0 / rho);
        let q_ls = rhs.matmul(&mix_pinv)?.scale(1.0 / eps);
        let qn = q_ls.frobenius_norm();
        if qn > 0.0 {
            q = q_ls.scale(1.0 / qn);
        }
        // Dual ascent on Z = W·S − ε·Q·M.
        let qm = q.matmul(&mix)?.scale(eps);
        let perturbed = ws.sub(&qm)?;
        let residual = z.sub(&perturbed)?;
        dual.add_assign_scaled(&residual, rho);

        let objective = nuclear_norm(&perturbed)?;
        let prev = *trace.last().expect("trace seeded");
        if objective > prev * (1.0 + 1e-6) {
            non_monotone = true;
        }
        trace.push(objective);
        if residual.frobenius_norm() / ws_norm < params.tol {
            converged = true;
            break;
        }
    }

    let delta_w = q.matmul(&l)?.scale(-eps);
    let w_n = w.add(&delta_w)?;
    Ok(AdmmOutcome {
        factors: truncate_double_svd(&w_n, gram, k)?,
        trace,
        delta_w,
        iterations,
        converged,
        non_monotone,
    })
}

pub(crate) fn nuclear_norm(m: &DenseMatrix) -> Result<f64> {
    Ok(svd(m)?.sigma.iter().sum())
}

/// Proximal operator of `tau · ‖·‖_*`.
pub(crate) fn singular_value_threshold(m: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    let s = svd(m)?;
    let shrunk: Vec<f64> = s.sigma.iter().map(|&v| (v - tau).max(0.0)).collect();
    s.u.scale_cols(&shrunk).matmul(&s.vt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{generate_calibration, SampleDistribution};
    use crate::engines::gram_loss;

    fn instance(seed: u64) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        let w = generate_calibration(seed, 8, 8, SampleDistribution::Gaussian).unwrap();
        let x = generate_calibration(seed + 1000, 32, 8, SampleDistribution::Gaussian).unwrap();
        let g = x.matmul_t(&x).unwrap();
        (w, x, g)
    }

    #[test]
    fn svt_shrinks_spectrum() {
        let m = DenseMatrix::from_diag(&[3.0, 0.5]);
        assert_eq!(
            singular_value_threshold(&m, 1.0).unwrap(),
            DenseMatrix::from_diag(&[2.0, 0.0])
        );
    }

    #[test]
    fn zero_eps_is_double_svd() {
        let (w, _, g) = instance(1);
        let out = truncate_admm_noise(
            &w,
            &g,
            3,
            &AdmmParams {
                eps: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let base = truncate_double_svd(&w, &g, 3).unwrap();
        assert_eq!(out.factors, base);
        assert_eq!(
            gram_loss(&w, &out.factors, &g).unwrap(),
            gram_loss(&w, &base, &g).unwrap()
        );
    }

    #[test]
    fn perturbation_has_norm_eps_through_activations() {
        let (w, x, g) = instance(2);
        let out = truncate_admm_noise(&w, &g, 3, &AdmmParams::default()).unwrap();
        let dwx = out.delta_w.matmul(&x).unwrap().frobenius_norm();
        assert!((dwx - 1e-3).abs() < 1e-9, "{dwx}");
        assert!(out.trace.last().unwrap() <= &out.trace[0]);
    }

    #[test]
    fn singular_gram_rejected() {
        let w = DenseMatrix::identity(3);
        let g = DenseMatrix::from_diag(&[1.0, 1.0, 0.0]);
        assert!(matches!(
            truncate_admm_noise(&w, &g, 1, &AdmmParams::default()),
            Err(Error::GramNotInvertible)
        ));
    }
}

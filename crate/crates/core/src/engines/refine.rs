//! L-BFGS refinement of a factor pair against the Gram-weighted loss
//! `f(A, B) = trace((W − AB)·G·(W − AB)ᵀ) = ‖W·X − A·B·X‖_F²`.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engines::LowRankFactors;
use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsParams {
    /// Initial step length of the first line search.
    pub lr: f64,
    pub max_iter: usize,
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            max_iter: 40,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub factors: LowRankFactors,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting with the initial value.
    pub curve: Vec<f64>,
    pub line_search_failed: bool,
}

/// Objective value and gradients `(f, ∂f/∂A, ∂f/∂B)`.
pub fn refinement_objective(
    w: &DenseMatrix,
    gram: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
) -> Result<(f64, DenseMatrix, DenseMatrix)> {
    let r = w.sub(&a.matmul(b)?)?;
    let rg = r.matmul(gram)?;
    let f = dot(rg.as_slice(), r.as_slice());
    let grad_a = rg.matmul_t(b)?.scale(-2.0);
    let grad_b = a.t_matmul(&rg)?.scale(-2.0);
    Ok((f, grad_a, grad_b))
}

struct Problem<'a> {
    w: &'a DenseMatrix,
    gram: &'a DenseMatrix,
    m: usize,
    k: usize,
    n: usize,
}

impl Problem<'_> {
    fn split(&self, theta: &[f64]) -> (DenseMatrix, DenseMatrix) {
        let na = self.m * self.k;
        let a = DenseMatrix::from_vec_unchecked(self.m, self.k, theta[..na].to_vec());
        let b = DenseMatrix::from_vec_unchecked(self.k, self.n, theta[na..].to_vec());
        (a, b)
    }

    fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = self.split(theta);
        let (f, ga, gb) = refinement_objective(self.w, self.gram, &a, &b)?;
        let mut g = ga.into_vec();
        g.extend_from_slice(gb.as_slice());
        Ok((f, g))
    }
}

/// Minimizes the Gram-weighted truncation loss over both factors, starting
/// from `init`. The objective never increases: only steps satisfying the
/// strong Wolfe conditions are accepted. If a line search fails, the best
/// iterate so far is returned with `line_search_failed` set.
pub fn refine_lbfgs(
    init: &LowRankFactors,
    w: &DenseMatrix,
    gram: &DenseMatrix,
    params: &LbfgsParams,
) -> Result<RefineOutcome> {
    if init.rows() != w.rows() || init.cols() != w.cols() {
        return Err(Error::DimensionMismatch {
            context: "refine init vs weight",
            expected: w.rows() * w.cols(),
            found: init.rows() * init.cols(),
        });
    }
    if gram.shape() != (w.cols(), w.cols()) {
        return Err(Error::DimensionMismatch {
            context: "refine gram",
            expected: w.cols(),
            found: gram.rows(),
        });
    }
    if !(params.lr > 0.0)
        || params.memory == 0
        || !(0.0 < params.c1 && params.c1 < params.c2 && params.c2 < 1.0)
    {
        return Err(Error::InvalidParameter(
            "lbfgs needs lr > 0, memory > 0 and 0 < c1 < c2 < 1",
        ));
    }
    let problem = Problem {
        w,
        gram,
        m: w.rows(),
        k: init.rank(),
        n: w.cols(),
    };
    let mut x: Vec<f64> = init.a().as_slice().to_vec();
    x.extend_from_slice(init.b().as_slice());
    let (mut f, mut g) = problem.eval(&x)?;
    let f0 = f;
    let mut curve = alloc::vec![f];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(params.memory);
    let mut line_search_failed = false;
    let mut iterations = 0;
    let gtol = 1e-12 * (1.0 + f.abs());

    for iter in 0..params.max_iter {
        if norm_inf(&g) <= gtol {
            break;
        }
        let mut d = two_loop(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let alpha0 = if iter == 0 { params.lr } else { 1.0 };
        let Some(step) = strong_wolfe(&problem, &x, f, slope, &d, alpha0, params)? else {
            line_search_failed = true;
            break;
        };
        iterations += 1;
        let s: Vec<f64> = d.iter().map(|v| step.alpha * v).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        f = step.f;
        g = step.g;
        curve.push(f);
        if sy > 1e-300 {
            if history.len() == params.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
    }

    let (a, b) = problem.split(&x);
    Ok(RefineOutcome {
        factors: LowRankFactors::new(a, b)?,
        initial_objective: f0,
        final_objective: f,
        iterations,
        curve,
        line_search_failed,
    })
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// L-BFGS two-loop recursion: returns `−H·g`.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - beta) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

struct Step {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
}

const MAX_LINE_EVALS: usize = 30;

/// Bracketing and zoom with cubic interpolation. `None` if no step meeting
/// both strong Wolfe conditions with a strictly lower objective was found.
fn strong_wolfe(
    problem: &Problem<'_>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    alpha0: f64,
    params: &LbfgsParams,
) -> Result<Option<Step>> {
    let phi = |alpha: f64| -> Result<(f64, Vec<f64>, f64)> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let (f, g) = problem.eval(&xt)?;
        let slope = dot(&g, d);
        Ok((f, g, slope))
    };
    let armijo = |alpha: f64, f: f64| f <= f0 + params.c1 * alpha * slope0 && f < f0;
    let curvature = |slope: f64| slope.abs() <= -params.c2 * slope0;

    let mut prev = (0.0, f0, slope0);
    let mut alpha = alpha0;
    let mut evals = 0;
    loop {
        if evals >= MAX_LINE_EVALS {
            return Ok(None);
        }
        evals += 1;
        let (f, g, slope) = phi(alpha)?;
        if !f.is_finite() || !armijo(alpha, f) || (evals > 1 && f >= prev.1) {
            return zoom(&phi, &armijo, &curvature, prev, (alpha, f, slope), evals);
        }
        if curvature(slope) {
            return Ok(Some(Step { alpha, f, g }));
        }
        if slope >= 0.0 {
            return zoom(&phi, &armijo, &curvature, (alpha, f, slope), prev, evals);
        }
        prev = (alpha, f, slope);
        alpha *= 2.0;
    }
}

type PhiFn<'a> = dyn Fn(f64) -> Result<(f64, Vec<f64>, f64)> + 'a;

fn zoom(
    phi: &PhiFn<'_>,
    armijo: &dyn Fn(f64, f64) -> bool,
    curvature: &dyn Fn(f64) -> bool,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    mut evals: usize,
) -> Result<Option<Step>> {
    let mut best: Option<Step> = None;
    while evals < MAX_LINE_EVALS {
        evals += 1;
        let alpha = interpolate(lo, hi);
        let (f, g, slope) = phi(alpha)?;
        if !f.is_finite() || !armijo(alpha, f) || f >= lo.1 {
            hi = (alpha, f, slope);
        } else {
            if curvature(slope) {
                return Ok(Some(Step { alpha, f, g }));
            }
            if best.as_ref().is_none_or(|b| f < b.f) {
                best = Some(Step { alpha, f, g });
            }
            if slope * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, f, slope);
        }
        if (hi.0 - lo.0).abs() <= 1e-16 * lo.0.abs().max(1e-300) {
            break;
        }
    }
    // Interval collapsed: a sufficient-decrease step is still a safe move.
    Ok(best)
}

/// Cubic interpolation minimizer within `[lo, hi]`, safeguarded to stay
/// away from the ends; bisection when the cubic is unusable.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a0, f0, d0) = lo;
    let (a1, f1, d1) = hi;
    let (left, right) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let width = right - left;
    let mid = 0.5 * (a0 + a1);
    if !f1.is_finite() || !d1.is_finite() {
        return mid;
    }
    let d1_ = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1);
    let disc = d1_ * d1_ - d0 * d1;
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = libm::copysign(libm::sqrt(disc), a1 - a0);
    let t = a1 - (a1 - a0) * (d1 + d2 - d1_) / (d1 - d0 + 2.0 * d2);
    if !t.is_finite() || t <= left + 0.1 * width || t >= right - 0.1 * width {
        mid
    } else {
        t
    }
}

/// Largest entrywise relative discrepancy between the analytic gradients of
/// the refinement objective and central finite differences with step
/// `1e-6 · max(1, ‖θ‖_∞)`. Each entry's error is divided by
/// `max(|analytic|, |numeric|, 1e-2 · ‖∇f‖_∞)`.
pub fn gradient_check(
    w: &DenseMatrix,
    gram: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
) -> Result<f64> {
    let (_, ga, gb) = refinement_objective(w, gram, a, b)?;
    let scale = a.max_abs().max(b.max_abs()).max(1.0);
    let h = 1e-6 * scale;
    let g_inf = ga.max_abs().max(gb.max_abs());
    let floor = (1e-2 * g_inf).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;

    let mut probe = |which_a: bool, i: usize, j: usize, analytic: f64| -> Result<()> {
        let eval = |delta: f64| -> Result<f64> {
            let (mut ap, mut bp) = (a.clone(), b.clone());
            if which_a {
                ap[(i, j)] += delta;
            } else {
                bp[(i, j)] += delta;
            }
            Ok(refinement_objective(w, gram, &ap, &bp)?.0)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic - numeric).abs() / denom);
        Ok(())
    };
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            probe(true, i, j, ga[(i, j)])?;
        }
    }
    for i in 0..b.rows() {
        for j in 0..b.cols() {
            probe(false, i, j, gb[(i, j)])?;
        }
    }
    Ok(worst)
}

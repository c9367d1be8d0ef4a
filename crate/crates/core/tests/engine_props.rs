mod common;

use common::*;
use lrf_core::engines::*;
use lrf_core::synth::spectral_activations;
use lrf_core::DenseMatrix;
use proptest::prelude::*;

struct Instance {
    w: DenseMatrix,
    x: DenseMatrix,
    g: DenseMatrix,
}

fn instance(seed: u64, m: usize, n: usize, oversample: usize) -> Instance {
    let mut r = rng(seed);
    let w = gaussian(&mut r, m, n);
    let x = gaussian(&mut r, n, oversample * n);
    let g = naive_matmul(&x, &x.transpose());
    Instance { w, x, g }
}

fn anisotropic(seed: u64, m: usize, n: usize, condition: f64) -> Instance {
    let w = gaussian(&mut rng(seed), m, n);
    let x = spectral_activations(seed ^ 0x5eed, n, 4 * n, condition, 0).unwrap();
    let g = naive_matmul(&x, &x.transpose());
    Instance { w, x, g }
}

/// Every engine at rank `k`, paired with its name.
fn all_engines(inst: &Instance, k: usize) -> Vec<(&'static str, LowRankFactors)> {
    let admm = truncate_admm_noise(&inst.w, &inst.g, k, &AdmmParams::default()).unwrap();
    vec![
        ("plain", truncate_plain(&inst.w, k).unwrap()),
        (
            "cholesky",
            truncate_cholesky(&inst.w, &inst.g, k, 0.0).unwrap().factors,
        ),
        (
            "double_svd",
            truncate_double_svd(&inst.w, &inst.g, k).unwrap(),
        ),
        ("admm_noise", admm.factors),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn double_svd_attains_the_floor(m in 2usize..=16, n in 2usize..=16, seed in any::<u64>()) {
        let inst = instance(seed, m, n, 4);
        for k in 1..=m.min(n) {
            let f = truncate_double_svd(&inst.w, &inst.g, k).unwrap();
            let got = activation_loss(&inst.w, &f, &inst.x).unwrap();
            let want = theoretical_min_loss(&inst.w, &inst.x, k).unwrap();
            let scale = inst.w.matmul(&inst.x).unwrap().frobenius_norm();
            prop_assert!((got - want).abs() <= 1e-8 * want.max(1e-7 * scale), "k={} {} vs {}", k, got, want);
        }
    }

    #[test]
    fn losses_shrink_with_rank(m in 2usize..=10, n in 2usize..=10, seed in any::<u64>()) {
        let inst = instance(seed, m, n, 4);
        let slack = 2.0 * 1e-3 * (n as f64).sqrt();
        let mut prev: Vec<f64> = vec![f64::INFINITY; 4];
        for k in 1..=m.min(n) {
            for (i, (name, f)) in all_engines(&inst, k).into_iter().enumerate() {
                let loss = activation_loss(&inst.w, &f, &inst.x).unwrap();
                let tol = if name == "admm_noise" { slack } else { 1e-9 * (1.0 + prev[i].min(1e300)) };
                prop_assert!(loss <= prev[i] + tol, "{} k={}: {} > {}", name, k, loss, prev[i]);
                prev[i] = loss;
            }
        }
    }

    #[test]
    fn nothing_beats_the_floor(m in 2usize..=10, n in 2usize..=10, seed in any::<u64>(), refine in any::<bool>()) {
        let inst = instance(seed, m, n, 4);
        for k in 1..m.min(n) {
            let floor = theoretical_min_loss(&inst.w, &inst.x, k).unwrap();
            for (name, f) in all_engines(&inst, k) {
                let f = if refine {
                    refine_lbfgs(&f, &inst.w, &inst.g, &LbfgsParams::default()).unwrap().factors
                } else {
                    f
                };
                let loss = activation_loss(&inst.w, &f, &inst.x).unwrap();
                prop_assert!(loss >= floor - 1e-9 * (1.0 + floor), "{} k={}: {} < {}", name, k, loss, floor);
            }
        }
    }

    #[test]
    fn gram_scale_is_irrelevant(m in 2usize..=12, n in 2usize..=12, log_c in -6.0f64..6.0, seed in any::<u64>()) {
        let inst = instance(seed, m, n, 4);
        let c = 10f64.powf(log_c);
        let k = (m.min(n) / 2).max(1);
        let base = truncate_double_svd(&inst.w, &inst.g, k).unwrap().product();
        let scaled = truncate_double_svd(&inst.w, &inst.g.scale(c), k).unwrap().product();
        prop_assert!(scaled.sub(&base).unwrap().frobenius_norm() <= 1e-9 * base.frobenius_norm());
    }

    #[test]
    fn identity_gram_collapses_engines(m in 2usize..=12, n in 2usize..=12, seed in any::<u64>()) {
        let w = gaussian(&mut rng(seed), m, n);
        let eye = DenseMatrix::identity(n);
        for k in 1..=m.min(n) {
            let p = gram_loss(&w, &truncate_plain(&w, k).unwrap(), &eye).unwrap();
            let c = gram_loss(&w, &truncate_cholesky(&w, &eye, k, 0.0).unwrap().factors, &eye).unwrap();
            let d = gram_loss(&w, &truncate_double_svd(&w, &eye, k).unwrap(), &eye).unwrap();
            prop_assert!((p - c).abs() <= 1e-9 && (p - d).abs() <= 1e-9);
        }
    }

    #[test]
    fn refinement_never_hurts(m in 2usize..=8, n in 2usize..=8, log_cond in 0.0f64..6.0, seed in any::<u64>()) {
        let inst = anisotropic(seed, m, n, 10f64.powf(log_cond));
        let k = (m.min(n) / 2).max(1);
        for init in [truncate_plain(&inst.w, k).unwrap(), truncate_double_svd(&inst.w, &inst.g, k).unwrap()] {
            let out = refine_lbfgs(&init, &inst.w, &inst.g, &LbfgsParams::default()).unwrap();
            let f0 = refinement_objective(&inst.w, &inst.g, init.a(), init.b()).unwrap().0;
            let f1 = refinement_objective(&inst.w, &inst.g, out.factors.a(), out.factors.b()).unwrap().0;
            prop_assert!(f1 <= f0 + 1e-12);
            prop_assert!(out.curve.windows(2).all(|p| p[1] <= p[0]));
        }
    }

    #[test]
    fn analytic_gradients_agree(m in 2usize..=6, n in 2usize..=6, k in 1usize..=3, seed in any::<u64>()) {
        let inst = instance(seed, m, n, 3);
        let mut r = rng(seed ^ 7);
        let a = gaussian(&mut r, m, k);
        let b = gaussian(&mut r, k, n);
        prop_assert!(gradient_check(&inst.w, &inst.g, &a, &b).unwrap() <= 1e-5);
    }

    #[test]
    fn admm_bounds(n in 2usize..=8, seed in any::<u64>()) {
        let inst = instance(seed, n, n, 4);
        let k = (n / 2).max(1);
        let params = AdmmParams::default();
        let out = truncate_admm_noise(&inst.w, &inst.g, k, &params).unwrap();
        let dwx = naive_matmul(&out.delta_w, &inst.x).frobenius_norm();
        prop_assert!(dwx <= params.eps * (n as f64).sqrt() * (1.0 + 1e-9));
        prop_assert!(out.trace.last().unwrap() <= &out.trace[0]);
    }
}

#[test]
fn oracle_matches_brute_force_product_spectrum() {
    let inst = instance(606, 6, 6, 2);
    let sv = singular_values(&naive_matmul(&inst.w, &inst.x));
    let want = sv[3..].iter().map(|s| s * s).sum::<f64>().sqrt();
    let got = theoretical_min_loss(&inst.w, &inst.x, 3).unwrap();
    assert!(rel_diff(got, want) <= 1e-9, "{got} vs {want}");
    assert_eq!(
        theoretical_min_loss(
            &DenseMatrix::identity(2),
            &DenseMatrix::from_diag(&[3.0, 4.0]),
            1
        )
        .unwrap(),
        3.0
    );
}

#[test]
fn plain_truncation_is_eckart_young() {
    let w = gaussian(&mut rng(88), 8, 8);
    let f = truncate_plain(&w, 2).unwrap();
    let sv = singular_values(&w);
    let tail = sv[2..].iter().map(|s| s * s).sum::<f64>().sqrt();
    assert!(rel_diff(w.sub(&f.product()).unwrap().frobenius_norm(), tail) <= 1e-9);
    let d = truncate_plain(&DenseMatrix::from_diag(&[5.0, 1.0]), 1).unwrap();
    assert_eq!(d.product(), DenseMatrix::from_diag(&[5.0, 0.0]));
}

#[test]
fn full_rank_truncation_is_lossless_for_every_engine() {
    for (m, n) in [(5, 5), (4, 7), (7, 4)] {
        let inst = instance(m as u64 * 31 + n as u64, m, n, 4);
        let scale = inst.w.matmul(&inst.x).unwrap().frobenius_norm();
        let k = m.min(n);
        for (name, f) in all_engines(&inst, k) {
            let loss = activation_loss(&inst.w, &f, &inst.x).unwrap();
            if name == "admm_noise" {
                continue;
            }
            assert!(loss <= 1e-9 * scale, "{name}: {loss}");
        }
    }
}

#[test]
fn cholesky_reaches_floor_on_well_conditioned_gram() {
    let inst = anisotropic(42, 8, 8, 1e3);
    let f = truncate_cholesky(&inst.w, &inst.g, 4, 0.0).unwrap();
    assert!(!f.jittered);
    let got = activation_loss(&inst.w, &f.factors, &inst.x).unwrap();
    let want = theoretical_min_loss(&inst.w, &inst.x, 4).unwrap();
    assert!(rel_diff(got, want) <= 1e-6);
}

#[test]
fn refinement_recovers_slack_left_by_plain_svd() {
    let inst = anisotropic(9, 8, 8, 1e4);
    let init = truncate_plain(&inst.w, 3).unwrap();
    let out = refine_lbfgs(&init, &inst.w, &inst.g, &LbfgsParams::default()).unwrap();
    assert!(out.final_objective < out.initial_objective * (1.0 - 1e-6));
    assert!(out.iterations <= 40);

    let opt = truncate_double_svd(&inst.w, &inst.g, 3).unwrap();
    let (f, ga, gb) = refinement_objective(&inst.w, &inst.g, opt.a(), opt.b()).unwrap();
    let gnorm = (ga.frobenius_norm().powi(2) + gb.frobenius_norm().powi(2)).sqrt();
    assert!(
        gnorm <= 1e-6 * (1.0 + f) * inst.g.frobenius_norm(),
        "{gnorm}"
    );
}

#[test]
fn refinement_at_optimum_changes_nothing() {
    let inst = anisotropic(10, 6, 6, 1e2);
    let opt = truncate_double_svd(&inst.w, &inst.g, 2).unwrap();
    let out = refine_lbfgs(&opt, &inst.w, &inst.g, &LbfgsParams::default()).unwrap();
    assert!((out.initial_objective - out.final_objective) <= 1e-8 * out.initial_objective);
}

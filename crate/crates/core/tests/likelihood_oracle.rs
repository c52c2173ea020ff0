//! Likelihood machinery against dense-factorization oracles.

mod common;

use common::*;
use mutare::{
    gls_beta, log_likelihood, profile_tau, CovarianceSpec, MutareParams, WhitenedProblem,
};
use nalgebra::DVector;
use rand::Rng;

#[test]
fn rank_one_likelihood_matches_dense_factorization() {
    let mut rng = seeded_rng(1001);
    for trial in 0..60 {
        let inst = random_instance(&mut rng, 4, 10, 3);
        let params =
            MutareParams::new(inst.beta.clone(), inst.tau, inst.s2a, inst.s2e).unwrap();
        let fast = log_likelihood(&inst.panel, &params).unwrap();
        let dense = oracle_loglik(&inst.panel, &inst.beta, inst.tau, inst.s2a, inst.s2e);
        let rel = (fast - dense).abs() / dense.abs().max(1.0);
        assert!(rel < 1e-8, "trial {trial}: {fast} vs {dense} (rel {rel:.2e})");
    }
}

#[test]
fn gls_matches_dense_generalized_least_squares() {
    let mut rng = seeded_rng(1002);
    for trial in 0..40 {
        let inst = random_instance(&mut rng, 4, 10, 3);
        let k = inst.beta.len() - 1;
        if k == 0 {
            continue;
        }
        // a threshold low enough that no design column vanishes
        let tau = inst.panel.pooled().fold(f64::MAX, f64::min) - 1.0;
        let cov = CovarianceSpec::new(inst.s2a, inst.s2e).unwrap();
        let support: Vec<usize> = (1..=k).collect();
        let ours = gls_beta(&inst.panel, tau, &cov, &support).unwrap();
        let cols: Vec<usize> = (0..=k).collect();
        let dense = oracle_gls(&inst.panel, tau, k, inst.s2a, inst.s2e, &cols);
        for (c, (a, b)) in ours.iter().zip(&dense).enumerate() {
            assert!(
                (a - b).abs() < 1e-7 * b.abs().max(1.0),
                "trial {trial} col {c}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn gls_is_a_likelihood_maximum_under_perturbation() {
    let mut rng = seeded_rng(1003);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, 3, 9, 2);
        let k = inst.beta.len() - 1;
        let tau = inst.panel.pooled().fold(f64::MAX, f64::min) - 1.0;
        let cov = CovarianceSpec::new(inst.s2a, inst.s2e).unwrap();
        let support: Vec<usize> = (1..=k).collect();
        let Ok(beta) = gls_beta(&inst.panel, tau, &cov, &support) else {
            continue; // a draw too small to identify every column
        };
        let base = log_likelihood(
            &inst.panel,
            &MutareParams::new(beta.clone(), tau, inst.s2a, inst.s2e).unwrap(),
        )
        .unwrap();
        for _ in 0..10 {
            let perturbed: Vec<f64> = beta
                .iter()
                .map(|b| b + rng.gen_range(-0.3..0.3))
                .collect();
            let ll = log_likelihood(
                &inst.panel,
                &MutareParams::new(perturbed, tau, inst.s2a, inst.s2e).unwrap(),
            )
            .unwrap();
            assert!(ll <= base + 1e-9, "perturbation beat the GLS maximum");
        }
    }
}

#[test]
fn whitening_reproduces_the_generalized_quadratic_form() {
    let mut rng = seeded_rng(1004);
    for trial in 0..30 {
        let inst = random_instance(&mut rng, 4, 9, 3);
        let k = inst.beta.len() - 1;
        let cov = CovarianceSpec::new(inst.s2a, inst.s2e).unwrap();
        let prob = WhitenedProblem::build(&inst.panel, inst.tau, k, &cov).unwrap();
        for _ in 0..5 {
            let beta: Vec<f64> = (0..=k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let white = {
                let b = DVector::from_row_slice(&beta);
                let r = &prob.response - &prob.design * b;
                r.dot(&r)
            };
            let dense = oracle_quadform(&inst.panel, &beta, inst.tau, inst.s2a, inst.s2e);
            assert!(
                (white - dense).abs() < 1e-8 * dense.max(1.0),
                "trial {trial}: whitened {white} vs dense {dense}"
            );
        }
    }
}

#[test]
fn profile_tau_agrees_with_brute_force_on_a_short_series() {
    // single series that crosses the break constantly: negative
    // feedback above the threshold, so both regimes stay populated and
    // the conditional mean jumps by 2.4 error sd at the break
    let truth = MutareParams::new(vec![0.3, -0.8], 0.3, 0.0, 0.01).unwrap();
    let panel = mutare::simulate_panel(&truth, 1, 50, 150, 77).unwrap();
    let fit = profile_tau(&panel, 1, 0.10).unwrap();

    // brute force through the public pieces: for every candidate,
    // estimate variances, refit coefficients, evaluate the likelihood
    let cands = mutare::candidate_thresholds(&panel, 0.10).unwrap();
    let mut best = f64::NEG_INFINITY;
    let mut best_tau = f64::NAN;
    for &tau in &cands {
        let Ok((s2a, s2e)) = mutare::estimate_variance_components(&panel, tau, 1, None) else {
            continue;
        };
        let cov = CovarianceSpec::new(s2a, s2e).unwrap();
        let Ok(beta) = gls_beta(&panel, tau, &cov, &[1]) else {
            continue;
        };
        let ll = log_likelihood(
            &panel,
            &MutareParams::new(beta, tau, s2a, s2e).unwrap(),
        )
        .unwrap();
        if ll > best {
            best = ll;
            best_tau = tau;
        }
    }
    assert_eq!(fit.tau_hat, best_tau, "profile picked a different candidate");
    assert!((fit.loglik - best).abs() < 1e-6 * best.abs().max(1.0));
    // the break sits at 0.3; the estimate should land within a few
    // order-statistic gaps of it
    let mut vals: Vec<f64> = panel.pooled().collect();
    vals.sort_by(f64::total_cmp);
    let below = vals.iter().rev().find(|v| **v <= 0.3).copied().unwrap();
    let above = vals.iter().find(|v| **v > 0.3).copied().unwrap();
    let gap = (above - below).max(0.01);
    assert!(
        (fit.tau_hat - 0.3).abs() <= 3.0 * gap,
        "threshold {} too far from the break (gap {gap})",
        fit.tau_hat
    );
}

#[test]
fn covariance_identity_for_orthonormal_whitened_design() {
    // identity covariance and an orthonormal design: information is the
    // identity, so the plug-in covariance is too
    use nalgebra::DMatrix;
    let design = DMatrix::identity(4, 2);
    let prob = WhitenedProblem::from_whitened(design, DVector::from_row_slice(&[1.0, 0.5, 0.0, 0.0]));
    // (X'X)^{-1} for orthonormal columns is the identity
    let gram = prob.design.transpose() * &prob.design;
    let inv = gram.try_inverse().unwrap();
    assert!((inv - DMatrix::identity(2, 2)).amax() < 1e-14);
}

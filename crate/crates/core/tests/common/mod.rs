//! Shared oracle code for integration tests. Everything here computes
//! through dense matrices and explicit indicator products, independent
//! of the library's rank-one identities and accumulators.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mutare::PanelSeries;

/// Explicit indicator-product regressor row: entry j is
/// `y_{t-j} * prod_{s=1..j} I[y_{t-s} > tau]`.
pub fn oracle_row(series: &[f64], t: usize, k: usize, tau: f64) -> Vec<f64> {
    let mut row = vec![0.0; k + 1];
    row[0] = 1.0;
    for j in 1..=k {
        let mut ind = 1.0;
        for s in 1..=j {
            if !(series[t - s] > tau) {
                ind = 0.0;
            }
        }
        row[j] = series[t - j] * ind;
    }
    row
}

/// Stacked design and response over rows `t = k..m-1` of every subject.
pub fn oracle_design(panel: &PanelSeries, tau: f64, k: usize) -> (DMatrix<f64>, DVector<f64>) {
    let m = panel.series_length();
    let rows_per = m - k;
    let n_rows = rows_per * panel.n_subjects();
    let mut h = DMatrix::zeros(n_rows, k + 1);
    let mut y = DVector::zeros(n_rows);
    let mut r = 0;
    for series in panel.iter_series() {
        for t in k..m {
            let row = oracle_row(series, t, k, tau);
            for (c, v) in row.iter().enumerate() {
                h[(r, c)] = *v;
            }
            y[r] = series[t];
            r += 1;
        }
    }
    (h, y)
}

/// Dense block-diagonal covariance `W = s2e I + s2a (1 1')` per subject.
pub fn oracle_w(n_subjects: usize, rows_per: usize, s2a: f64, s2e: f64) -> DMatrix<f64> {
    let n = n_subjects * rows_per;
    let mut w = DMatrix::zeros(n, n);
    for s in 0..n_subjects {
        let base = s * rows_per;
        for i in 0..rows_per {
            for j in 0..rows_per {
                let mut v = if i == j { s2e } else { 0.0 };
                v += s2a;
                w[(base + i, base + j)] = v;
            }
        }
    }
    w
}

/// Dense-factorization log likelihood
/// `-1/2 [N ln(2 pi) + log|W| + r' W^{-1} r]`.
pub fn oracle_loglik(panel: &PanelSeries, beta: &[f64], tau: f64, s2a: f64, s2e: f64) -> f64 {
    let k = beta.len() - 1;
    let (h, y) = oracle_design(panel, tau, k);
    let r = y - h * DVector::from_row_slice(beta);
    let rows_per = panel.series_length() - k;
    let w = oracle_w(panel.n_subjects(), rows_per, s2a, s2e);
    let chol = w.cholesky().expect("oracle covariance is SPD");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let solved = chol.solve(&r);
    let n = r.len() as f64;
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&solved))
}

/// Dense GLS `(H' W^{-1} H)^{-1} H' W^{-1} y` over the given columns.
pub fn oracle_gls(panel: &PanelSeries, tau: f64, k: usize, s2a: f64, s2e: f64, cols: &[usize]) -> Vec<f64> {
    let (h, y) = oracle_design(panel, tau, k);
    let h_sub = h.select_columns(cols.iter());
    let rows_per = panel.series_length() - k;
    let w = oracle_w(panel.n_subjects(), rows_per, s2a, s2e);
    let w_inv = w.try_inverse().expect("oracle covariance invertible");
    let a = h_sub.transpose() * &w_inv * &h_sub;
    let b = h_sub.transpose() * &w_inv * y;
    let sol = a.try_inverse().expect("oracle normal equations solvable") * b;
    let mut beta = vec![0.0; k + 1];
    for (i, &c) in cols.iter().enumerate() {
        beta[c] = sol[i];
    }
    beta
}

/// Quadratic form `(y - H beta)' W^{-1} (y - H beta)` through the dense
/// inverse.
pub fn oracle_quadform(panel: &PanelSeries, beta: &[f64], tau: f64, s2a: f64, s2e: f64) -> f64 {
    let k = beta.len() - 1;
    let (h, y) = oracle_design(panel, tau, k);
    let r = y - h * DVector::from_row_slice(beta);
    let rows_per = panel.series_length() - k;
    let w = oracle_w(panel.n_subjects(), rows_per, s2a, s2e);
    let w_inv = w.try_inverse().expect("oracle covariance invertible");
    (r.transpose() * w_inv * r)[(0, 0)]
}

/// A random panel of plain Gaussian noise around a drifting level; no
/// model structure needed for algebraic identities.
pub fn random_panel(rng: &mut ChaCha8Rng, n: usize, m: usize) -> PanelSeries {
    let values = (0..n)
        .map(|_| {
            let level: f64 = rng.gen_range(-0.5..0.5);
            (0..m).map(|_| level + rng.gen_range(-1.0..1.0)).collect()
        })
        .collect();
    PanelSeries::from_values(values).expect("balanced by construction")
}

/// Random instance dimensions and parameters for oracle comparisons.
pub struct RandomInstance {
    pub panel: PanelSeries,
    pub beta: Vec<f64>,
    pub tau: f64,
    pub s2a: f64,
    pub s2e: f64,
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_n: usize, max_m: usize, max_k: usize) -> RandomInstance {
    let k = rng.gen_range(0..=max_k);
    let n = rng.gen_range(1..=max_n);
    let m = rng.gen_range((k + 2).max(3)..=max_m);
    let panel = random_panel(rng, n, m);
    let beta: Vec<f64> = (0..=k).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let mut pooled: Vec<f64> = panel.pooled().collect();
    pooled.sort_by(f64::total_cmp);
    let tau = pooled[rng.gen_range(0..pooled.len())];
    let s2a = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.01..1.5) };
    let s2e = rng.gen_range(0.05..2.0);
    RandomInstance {
        panel,
        beta,
        tau,
        s2a,
        s2e,
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------
// Solver oracles: exhaustive sign-support enumeration for the weighted
// lasso, solved through nalgebra, nothing shared with the library's
// coordinate descent.
// ---------------------------------------------------------------------

use mutare::{CovarianceSpec, MutareParams, PenaltyConfig, WhitenedProblem};

/// Minimize `|y - X b|^2 + sum_j l1w[j] |b_j|` over the given active
/// lag columns (intercept free, everything else pinned to zero) by
/// enumerating all sign patterns in `{-1, 0, +1}^active` and keeping
/// the best consistent stationary point. Returns the coefficient
/// vector over all columns.
pub fn oracle_weighted_lasso(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    active: &[usize],
    l1w: &[f64], // per lag column (index j-1)
) -> Vec<f64> {
    let p = design.ncols();
    let gram = design.transpose() * design;
    let xty = design.transpose() * response;
    let n_pat = 3usize.pow(active.len() as u32);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for pat in 0..n_pat {
        let mut signs = Vec::with_capacity(active.len());
        let mut code = pat;
        for _ in active {
            signs.push(match code % 3 {
                0 => 0i8,
                1 => 1,
                _ => -1,
            });
            code /= 3;
        }
        // stationarity system over {intercept} + signed support
        let mut cols = vec![0usize];
        cols.extend(
            active
                .iter()
                .zip(&signs)
                .filter(|(_, s)| **s != 0)
                .map(|(c, _)| *c),
        );
        let q = cols.len();
        let mut a = DMatrix::zeros(q, q);
        let mut b = DVector::zeros(q);
        for (r, &cr) in cols.iter().enumerate() {
            for (c, &cc) in cols.iter().enumerate() {
                a[(r, c)] = gram[(cr, cc)];
            }
            b[r] = xty[cr];
            if cr != 0 {
                let s = signs[active.iter().position(|&x| x == cr).unwrap()] as f64;
                b[r] -= 0.5 * l1w[cr - 1] * s;
            }
        }
        let Some(sol) = a.lu().solve(&b) else { continue };
        // sign consistency on the support
        let mut ok = true;
        let mut beta = vec![0.0; p];
        for (r, &cr) in cols.iter().enumerate() {
            beta[cr] = sol[r];
            if cr != 0 {
                let s = signs[active.iter().position(|&x| x == cr).unwrap()] as f64;
                if sol[r] * s < 0.0 {
                    ok = false;
                }
            }
        }
        if !ok {
            continue;
        }
        // subgradient feasibility on the zeroed actives
        let bvec = DVector::from_row_slice(&beta);
        let grad = &xty - &gram * bvec;
        for (i, &c) in active.iter().enumerate() {
            if signs[i] == 0 && (2.0 * grad[c]).abs() > l1w[c - 1] + 1e-9 {
                ok = false;
            }
        }
        if !ok {
            continue;
        }
        let resid = response - design * DVector::from_row_slice(&beta);
        let obj = resid.dot(&resid)
            + active
                .iter()
                .map(|&c| l1w[c - 1] * beta[c].abs())
                .sum::<f64>();
        if best.as_ref().map_or(true, |(o, _)| obj < *o) {
            best = Some((obj, beta));
        }
    }
    best.expect("the all-zero sign pattern always yields a candidate").1
}

/// A random solver instance: a whitened problem from a simulated panel
/// plus a random penalty configuration.
pub fn random_solver_instance(
    rng: &mut ChaCha8Rng,
    k: usize,
) -> (WhitenedProblem, PenaltyConfig) {
    let n = rng.gen_range(1..=3usize);
    let m = rng.gen_range((4 * k).max(25)..=60);
    let mut beta = vec![rng.gen_range(-0.2..0.2)];
    for j in 1..=k {
        let scale = 0.7 / (1 << (j - 1)).min(8) as f64;
        beta.push(if rng.gen_bool(0.6) {
            rng.gen_range(-scale..scale)
        } else {
            0.0
        });
    }
    let s2a = if n == 1 || rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(0.05..0.6) };
    let s2e = rng.gen_range(0.1..0.8);
    let truth = MutareParams::new(beta, rng.gen_range(-0.2..0.2), s2a, s2e).unwrap();
    let panel = mutare::simulate_panel(&truth, n, m, 100, rng.gen()).unwrap();
    let mut pooled: Vec<f64> = panel.pooled().collect();
    pooled.sort_by(f64::total_cmp);
    let tau = pooled[rng.gen_range(pooled.len() / 5..4 * pooled.len() / 5)];
    let cov = CovarianceSpec::new(s2a.max(0.0), s2e).unwrap();
    let prob = WhitenedProblem::build(&panel, tau, k, &cov).unwrap();
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..4.0)).collect();
    let cfg = PenaltyConfig::new(
        rng.gen_range(0.0..8.0),
        rng.gen_range(0.0..8.0),
        1.0,
    )
    .unwrap()
    .with_weights(weights);
    (prob, cfg)
}

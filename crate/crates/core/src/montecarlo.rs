//! Monte Carlo harness: the panel estimation study (estimator means,
//! spreads, and 90% interval coverage), the single-series order
//! selection study comparing AIC/BIC with the double-penalized
//! procedure, and an empirical check of the threshold estimator's
//! convergence rate.
//!
//! Replicates are embarrassingly parallel; every replicate derives its
//! own seed from the master seed, and reductions run in replicate
//! order, so results are bit-reproducible at any worker count.

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{MutareError, Result};
use crate::model::{simulate_panel, MutareParams};
use crate::numeric::{mean_sd, median};
use crate::penalty::PenaltyConfig;
use crate::selection::{fit_mutare, ic_tables_with, FitResult};
use crate::tuning::{tune, TuneGrid, TuneMethod};

/// Burn-in discarded before recording simulated series.
pub const DEFAULT_BURN_IN: usize = 200;
/// Default replicate count; the published studies use 1000.
pub const DESK_REPLICATES: usize = 200;
pub const FULL_REPLICATES: usize = 1000;

const TRIM: f64 = 0.10;
const Z90: f64 = 1.6448536269514722; // Phi^{-1}(0.95)

/// Panel estimation study design: `k = 2`, coefficients `(0, 0.5, 0.4)`,
/// threshold `0.1`, both variances `0.5`.
pub fn estimation_study_truth() -> MutareParams {
    MutareParams::new(vec![0.0, 0.5, 0.4], 0.1, 0.5, 0.5).expect("valid by construction")
}

/// Default size ladder for the estimation study.
pub const ESTIMATION_SIZES: [(usize, usize); 3] = [(30, 10), (40, 15), (60, 25)];

/// Deterministic per-task seed derivation (splitmix64 over the master
/// seed xor a stream index).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean, spread, and Monte Carlo standard error of one estimate.
#[derive(Debug, Clone, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// `sd / sqrt(replicates)`.
    pub mc_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageSummary {
    pub name: String,
    /// Fraction of replicates whose 90% interval covered the truth.
    pub rate: f64,
    /// Binomial standard error.
    pub mc_se: f64,
}

/// Per-size summary of the estimation study.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub m: usize,
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    /// Frozen tuning configuration used for every replicate.
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho: f64,
    /// Summaries for `tau, beta_0, beta_1, beta_2, sigma2_alpha`.
    pub params: Vec<ParamSummary>,
    /// 90% interval coverage for `beta_0, beta_1, beta_2`.
    pub coverage: Vec<CoverageSummary>,
    /// Per-replicate estimates (columns as in `params`), for normality
    /// diagnostics.
    pub estimates: Vec<Vec<f64>>,
}

fn interval_covers(fit: &FitResult, lag: usize, truth: f64) -> bool {
    // position of the coefficient inside the covariance block
    let pos = if lag == 0 {
        Some(0)
    } else {
        fit.support.iter().position(|&j| j == lag).map(|p| p + 1)
    };
    match pos {
        Some(p) => {
            let se = fit.cov_beta[(p, p)].max(0.0).sqrt();
            (fit.params.beta[lag] - truth).abs() <= Z90 * se
        }
        // coefficient excluded from the model: the degenerate interval
        // {0} covers only a zero truth
        None => truth == 0.0,
    }
}

/// Run the panel estimation study: per size, tune once on a fresh
/// panel/test-panel pair, freeze the configuration, then simulate and
/// fit `replicates` panels.
pub fn run_example1(
    sizes: &[(usize, usize)],
    replicates: usize,
    seed: u64,
) -> Result<Vec<EstimatorSummary>> {
    if replicates == 0 {
        return Err(MutareError::InvalidArgument("need at least one replicate".into()));
    }
    let truth = estimation_study_truth();
    let mut out = Vec::with_capacity(sizes.len());
    for (s, &(m, n)) in sizes.iter().enumerate() {
        let tune_panel = simulate_panel(
            &truth,
            n,
            m,
            DEFAULT_BURN_IN,
            derive_seed(seed, 0x1_0000 + 2 * s as u64),
        )?;
        let test_panel = simulate_panel(
            &truth,
            n,
            m,
            DEFAULT_BURN_IN,
            derive_seed(seed, 0x1_0000 + 2 * s as u64 + 1),
        )?;
        let cfg = tune(
            &tune_panel,
            2,
            &TuneGrid::default(),
            TuneMethod::TestPanel,
            Some(&test_panel),
            TRIM,
            PenaltyConfig::DEFAULT_BIG_M,
        )?;

        let fits: Vec<Result<FitResult>> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let panel = simulate_panel(
                    &truth,
                    n,
                    m,
                    DEFAULT_BURN_IN,
                    derive_seed(seed, 0x10_0000 * (s as u64 + 1) + r as u64),
                )?;
                fit_mutare(&panel, 2, &cfg, TRIM)
            })
            .collect();

        let mut estimates = Vec::with_capacity(replicates);
        let mut covered = [0usize; 3];
        let mut failures = 0usize;
        for fit in &fits {
            match fit {
                Ok(fit) => {
                    estimates.push(vec![
                        fit.params.tau,
                        fit.params.beta[0],
                        fit.params.beta[1],
                        fit.params.beta[2],
                        fit.params.sigma2_alpha,
                    ]);
                    for lag in 0..3 {
                        if interval_covers(fit, lag, truth.beta[lag]) {
                            covered[lag] += 1;
                        }
                    }
                }
                Err(e) => {
                    failures += 1;
                    log::warn!("replicate failed at (m={m}, n={n}): {e}");
                }
            }
        }
        if failures * 20 > replicates {
            return Err(MutareError::Harness(format!(
                "{failures} of {replicates} replicates failed at (m={m}, n={n})"
            )));
        }
        let used = estimates.len();
        let names = ["tau", "beta0", "beta1", "beta2", "sigma2_alpha"];
        let params = (0..5)
            .map(|c| {
                let col: Vec<f64> = estimates.iter().map(|e| e[c]).collect();
                let (mean, sd) = mean_sd(&col);
                ParamSummary {
                    name: names[c].to_string(),
                    mean,
                    sd,
                    mc_se: sd / (used as f64).sqrt(),
                }
            })
            .collect();
        let coverage = (0..3)
            .map(|lag| {
                let rate = covered[lag] as f64 / used as f64;
                CoverageSummary {
                    name: names[lag + 1].to_string(),
                    rate,
                    mc_se: (rate * (1.0 - rate) / used as f64).sqrt(),
                }
            })
            .collect();
        out.push(EstimatorSummary {
            m,
            n,
            replicates: used,
            failures,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            rho: cfg.rho,
            params,
            coverage,
            estimates,
        });
    }
    Ok(out)
}

/// Order-selection method identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SelectionMethod {
    Aic,
    Bic,
    /// The double-penalized procedure.
    Dp,
}

/// Selection frequencies for one (model, method) pair.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionTable {
    pub method: SelectionMethod,
    pub model_id: usize,
    pub true_order: usize,
    /// Frequency of selecting order `1..=k_max` (index 0 = order 1).
    pub freq: Vec<f64>,
    /// Frequency of selecting order 0, reported separately.
    pub freq_zero: f64,
    pub failures: usize,
    pub replicates: usize,
    /// Binomial standard errors matching `freq`.
    pub freq_se: Vec<f64>,
}

impl SelectionTable {
    fn from_orders(
        method: SelectionMethod,
        model_id: usize,
        true_order: usize,
        k_max: usize,
        orders: &[Option<usize>],
    ) -> Self {
        let replicates = orders.len();
        let used = orders.iter().flatten().count();
        let failures = replicates - used;
        let mut counts = vec![0usize; k_max + 1];
        for &o in orders.iter().flatten() {
            counts[o.min(k_max)] += 1;
        }
        let freq: Vec<f64> = (1..=k_max)
            .map(|o| counts[o] as f64 / replicates as f64)
            .collect();
        let freq_se = freq
            .iter()
            .map(|&p| (p * (1.0 - p) / replicates as f64).sqrt())
            .collect();
        SelectionTable {
            method,
            model_id,
            true_order,
            freq,
            freq_zero: counts[0] as f64 / replicates as f64,
            failures,
            replicates,
            freq_se,
        }
    }

    /// Modal order among `1..=k_max`.
    pub fn modal_order(&self) -> usize {
        let mut best = 0usize;
        for (i, &f) in self.freq.iter().enumerate() {
            if f > self.freq[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn frequency_at(&self, order: usize) -> f64 {
        if order == 0 {
            self.freq_zero
        } else {
            self.freq.get(order - 1).copied().unwrap_or(0.0)
        }
    }
}

/// The three single-series designs of the order-selection study:
/// lag coefficients and true order. Intercept 0, threshold 0.01, error
/// variance 0.1, series length 200.
pub fn order_study_models() -> Vec<(Vec<f64>, usize)> {
    vec![
        (vec![0.4, 0.4, 0.0, 0.0, 0.0], 2),
        (vec![0.5, 0.3, 0.1, 0.0, 0.0], 3),
        (vec![0.3, 0.2, 0.1, 0.05, 0.0], 4),
    ]
}

const ORDER_STUDY_M: usize = 200;
const ORDER_STUDY_KMAX: usize = 5;

/// Run the order-selection study: for each model, tune once
/// (test-panel protocol), then compare AIC, BIC, and the
/// double-penalized selector over `replicates` single series.
pub fn run_example2(replicates: usize, seed: u64) -> Result<Vec<SelectionTable>> {
    if replicates == 0 {
        return Err(MutareError::InvalidArgument("need at least one replicate".into()));
    }
    let mut tables = Vec::new();
    for (model_idx, (lags, true_order)) in order_study_models().into_iter().enumerate() {
        let mut beta = vec![0.0];
        beta.extend(&lags);
        let truth = MutareParams::new(beta, 0.01, 0.0, 0.1)?;
        let tune_series = simulate_panel(
            &truth,
            1,
            ORDER_STUDY_M,
            DEFAULT_BURN_IN,
            derive_seed(seed, 0x2_0000 + 2 * model_idx as u64),
        )?;
        let test_series = simulate_panel(
            &truth,
            1,
            ORDER_STUDY_M,
            DEFAULT_BURN_IN,
            derive_seed(seed, 0x2_0000 + 2 * model_idx as u64 + 1),
        )?;
        let cfg = tune(
            &tune_series,
            ORDER_STUDY_KMAX,
            &TuneGrid::default(),
            TuneMethod::TestPanel,
            Some(&test_series),
            TRIM,
            PenaltyConfig::DEFAULT_BIG_M,
        )?;

        // per replicate: (aic order, bic order, dp order)
        let picks: Vec<(Option<usize>, Option<usize>, Option<usize>)> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let series = match simulate_panel(
                    &truth,
                    1,
                    ORDER_STUDY_M,
                    DEFAULT_BURN_IN,
                    derive_seed(seed, 0x20_0000 * (model_idx as u64 + 1) + r as u64),
                ) {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("simulation failed: {e}");
                        return (None, None, None);
                    }
                };
                let ic = ic_tables_with(&series, ORDER_STUDY_KMAX, TRIM, true)
                    .map(|(a, b)| (a.selected_order, b.selected_order));
                let (aic, bic) = match ic {
                    Ok((a, b)) => (Some(a), Some(b)),
                    Err(e) => {
                        log::warn!("criterion fit failed: {e}");
                        (None, None)
                    }
                };
                let dp = match fit_mutare(&series, ORDER_STUDY_KMAX, &cfg, TRIM) {
                    Ok(fit) => Some(fit.order),
                    Err(e) => {
                        log::warn!("penalized fit failed: {e}");
                        None
                    }
                };
                (aic, bic, dp)
            })
            .collect();

        let max_failures = picks
            .iter()
            .map(|(a, b, d)| usize::from(a.is_none()) + usize::from(b.is_none()) + usize::from(d.is_none()))
            .sum::<usize>();
        if max_failures * 20 > 3 * replicates {
            return Err(MutareError::Harness(format!(
                "too many failed fits in order-selection model {}",
                model_idx + 1
            )));
        }
        let aic_orders: Vec<Option<usize>> = picks.iter().map(|p| p.0).collect();
        let bic_orders: Vec<Option<usize>> = picks.iter().map(|p| p.1).collect();
        let dp_orders: Vec<Option<usize>> = picks.iter().map(|p| p.2).collect();
        for (method, orders) in [
            (SelectionMethod::Aic, aic_orders),
            (SelectionMethod::Bic, bic_orders),
            (SelectionMethod::Dp, dp_orders),
        ] {
            tables.push(SelectionTable::from_orders(
                method,
                model_idx + 1,
                true_order,
                ORDER_STUDY_KMAX,
                &orders,
            ));
        }
    }
    Ok(tables)
}

/// Standardized sample quantiles paired with standard-normal quantiles
/// (Blom plotting positions).
#[derive(Debug, Clone, Serialize)]
pub struct QqData {
    /// `(theoretical, sample)` pairs.
    pub points: Vec<(f64, f64)>,
    /// True when the input was (numerically) constant; sample
    /// quantiles are reported as zeros in that case.
    pub degenerate: bool,
}

pub fn qq_data(estimates: &[f64]) -> Result<QqData> {
    if estimates.len() < 20 {
        return Err(MutareError::InvalidArgument(format!(
            "need at least 20 replicates for quantile diagnostics, got {}",
            estimates.len()
        )));
    }
    let (mean, sd) = mean_sd(estimates);
    let degenerate = !(sd > 1e-14);
    let mut sorted = estimates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let points = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let p = (i as f64 + 1.0 - 0.375) / (n + 0.25);
            let theo = normal.inverse_cdf(p);
            let sample = if degenerate { 0.0 } else { (x - mean) / sd };
            (theo, sample)
        })
        .collect();
    Ok(QqData { points, degenerate })
}

/// Median absolute threshold error at geometrically growing sample
/// sizes: the subject count doubles `doublings` times from `base`.
/// Returns `(N, median |tau_hat - tau_0|)` per size.
pub fn rate_check(
    base: (usize, usize),
    doublings: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if replicates == 0 {
        return Err(MutareError::InvalidArgument("need at least one replicate".into()));
    }
    let truth = estimation_study_truth();
    let (m, n0) = base;
    let mut out = Vec::new();
    for d in 0..=doublings {
        let n = n0 << d;
        let errs: Vec<Option<f64>> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let panel = simulate_panel(
                    &truth,
                    n,
                    m,
                    DEFAULT_BURN_IN,
                    derive_seed(seed, 0x30_0000 * (d as u64 + 1) + r as u64),
                )
                .ok()?;
                let fit = crate::likelihood::profile_tau(&panel, 2, TRIM).ok()?;
                Some((fit.tau_hat - truth.tau).abs())
            })
            .collect();
        let ok: Vec<f64> = errs.iter().flatten().copied().collect();
        let failures = replicates - ok.len();
        if failures * 20 > replicates {
            return Err(MutareError::Harness(format!(
                "{failures} of {replicates} rate-check replicates failed at n={n}"
            )));
        }
        out.push((m * n, median(&ok)));
    }
    if truth.tau < f64::NEG_INFINITY {
        log::warn!("threshold outside the data range: rate is not identified");
    }
    Ok(out)
}

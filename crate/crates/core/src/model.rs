//! The MUTARE model: a panel of series where lag `j` enters the
//! conditional mean only when all of the last `j` observations exceed a
//! common threshold, plus a per-subject random intercept.
//!
//! `y_it = alpha_i + beta_0 + sum_j beta_j * y_{i,t-j} * I[y_{i,t-1} > tau, ..., y_{i,t-j} > tau] + eps_it`
//!
//! with `alpha_i ~ N(0, sigma2_alpha)` and `eps_it ~ N(0, sigma2_eps)`.
//! The indicator products are nested: once one lag fails the threshold,
//! every deeper lag drops out too.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MutareError, Result};

/// A balanced panel: `n_subjects` series of identical length.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSeries {
    n_subjects: usize,
    series_length: usize,
    /// Row-per-subject storage, each row of length `series_length`.
    values: Vec<Vec<f64>>,
    subject_ids: Vec<String>,
}

impl PanelSeries {
    /// Build a panel from per-subject series. Rejects unbalanced or
    /// non-finite input; truncate upstream if series lengths differ.
    pub fn new(values: Vec<Vec<f64>>, subject_ids: Vec<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(MutareError::Data("panel has no subjects".into()));
        }
        if subject_ids.len() != values.len() {
            return Err(MutareError::Data(format!(
                "{} subject ids for {} series",
                subject_ids.len(),
                values.len()
            )));
        }
        let m = values[0].len();
        if m == 0 {
            return Err(MutareError::Data("series length is zero".into()));
        }
        for (i, row) in values.iter().enumerate() {
            if row.len() != m {
                return Err(MutareError::Data(format!(
                    "unbalanced panel: subject '{}' has {} observations, expected {}; \
                     truncate all series to a common length before ingestion",
                    subject_ids[i],
                    row.len(),
                    m
                )));
            }
            if let Some(t) = row.iter().position(|v| !v.is_finite()) {
                return Err(MutareError::Data(format!(
                    "non-finite value for subject '{}' at time {}",
                    subject_ids[i],
                    t + 1
                )));
            }
        }
        Ok(Self {
            n_subjects: values.len(),
            series_length: m,
            values,
            subject_ids,
        })
    }

    /// Convenience constructor with generated ids `s01, s02, ...`.
    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        let width = values.len().to_string().len();
        let ids = (1..=values.len())
            .map(|i| format!("s{:0width$}", i, width = width))
            .collect();
        Self::new(values, ids)
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn series_length(&self) -> usize {
        self.series_length
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    /// One subject's series.
    pub fn series(&self, subject: usize) -> &[f64] {
        &self.values[subject]
    }

    pub fn iter_series(&self) -> impl Iterator<Item = &[f64]> {
        self.values.iter().map(|v| v.as_slice())
    }

    /// All observations, subject-major.
    pub fn pooled(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    /// Pooled sample variance (denominator N-1); 0 for a single value.
    pub fn pooled_variance(&self) -> f64 {
        let n = (self.n_subjects * self.series_length) as f64;
        let mean = self.pooled().sum::<f64>() / n;
        if n < 2.0 {
            return 0.0;
        }
        self.pooled().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    }

    /// Total observation count `N = n * m`.
    pub fn total_len(&self) -> usize {
        self.n_subjects * self.series_length
    }

    /// Check the panel can support a fit with maximum lag `k`.
    pub fn check_fit_size(&self, k: usize) -> Result<()> {
        if self.series_length < k + 2 {
            return Err(MutareError::InvalidArgument(format!(
                "series length {} is too short for maximum lag {} (need at least {})",
                self.series_length,
                k,
                k + 2
            )));
        }
        Ok(())
    }
}

/// Model parameters: fixed effects, threshold, and the two variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutareParams {
    /// `(beta_0, beta_1, ..., beta_k)`.
    pub beta: Vec<f64>,
    pub tau: f64,
    pub sigma2_alpha: f64,
    pub sigma2_eps: f64,
}

impl MutareParams {
    pub fn new(beta: Vec<f64>, tau: f64, sigma2_alpha: f64, sigma2_eps: f64) -> Result<Self> {
        let p = Self {
            beta,
            tau,
            sigma2_alpha,
            sigma2_eps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(MutareError::InvalidArgument(
                "beta must contain at least the intercept".into(),
            ));
        }
        if self.beta.iter().any(|b| !b.is_finite()) || !self.tau.is_finite() {
            return Err(MutareError::InvalidArgument(
                "non-finite coefficient or threshold".into(),
            ));
        }
        if !(self.sigma2_alpha >= 0.0) {
            return Err(MutareError::InvalidArgument(format!(
                "sigma2_alpha must be nonnegative, got {}",
                self.sigma2_alpha
            )));
        }
        if !(self.sigma2_eps > 0.0) {
            return Err(MutareError::InvalidArgument(format!(
                "sigma2_eps must be positive, got {}",
                self.sigma2_eps
            )));
        }
        Ok(())
    }

    /// Maximum lag `k`.
    pub fn k(&self) -> usize {
        self.beta.len() - 1
    }

    /// Sum of lag-coefficient magnitudes; `>= 1` trips the
    /// stationarity advisory in the simulator.
    pub fn lag_l1_norm(&self) -> f64 {
        self.beta[1..].iter().map(|b| b.abs()).sum()
    }
}

/// One design row `(1, y_{t-1} I_1, ..., y_{t-k} I_1...I_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorRow {
    pub entries: Vec<f64>,
}

impl RegressorRow {
    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }
}

/// Fill `out` (length `k+1`) with the regressor row for `history =
/// (y_{t-1}, ..., y_{t-k})` at threshold `tau`. The nesting means we can
/// stop at the first lag at or below the threshold.
#[inline]
pub(crate) fn fill_regressor_row(out: &mut [f64], history: &[f64], tau: f64) {
    out[0] = 1.0;
    let k = out.len() - 1;
    let mut j = 0;
    while j < k && history[j] > tau {
        out[j + 1] = history[j];
        j += 1;
    }
    for e in out.iter_mut().skip(j + 1) {
        *e = 0.0;
    }
}

/// Build the nested-indicator regressor row for lag order `k`.
///
/// Entry 0 is the constant 1; entry `j` is `y_{t-j}` if every one of
/// `y_{t-1}, ..., y_{t-j}` exceeds `tau`, and 0 otherwise.
pub fn build_regressor_row(history: &[f64], tau: f64, k: usize) -> Result<RegressorRow> {
    if history.len() < k {
        return Err(MutareError::InvalidArgument(format!(
            "history of length {} is shorter than lag order {}",
            history.len(),
            k
        )));
    }
    if history[..k].iter().any(|v| !v.is_finite()) || !tau.is_finite() {
        return Err(MutareError::InvalidArgument(
            "non-finite history or threshold".into(),
        ));
    }
    let mut entries = vec![0.0; k + 1];
    fill_regressor_row(&mut entries, history, tau);
    Ok(RegressorRow { entries })
}

/// Conditional mean `alpha_i + beta' h(history, tau)`.
pub fn conditional_mean(params: &MutareParams, alpha_i: f64, history: &[f64]) -> Result<f64> {
    let row = build_regressor_row(history, params.tau, params.k())?;
    Ok(alpha_i
        + row
            .entries
            .iter()
            .zip(&params.beta)
            .map(|(h, b)| h * b)
            .sum::<f64>())
}

/// Simulate a balanced panel of the process.
///
/// Each subject draws its intercept once, starts its pre-sample lags at
/// the first-regime mean `beta_0`, runs `burn_in` discarded steps, then
/// records `m` observations. The same seed reproduces the panel bit for
/// bit.
pub fn simulate_panel(
    params: &MutareParams,
    n: usize,
    m: usize,
    burn_in: usize,
    seed: u64,
) -> Result<PanelSeries> {
    params.validate()?;
    if n == 0 || m == 0 {
        return Err(MutareError::InvalidArgument(
            "need at least one subject and one time point".into(),
        ));
    }
    if params.lag_l1_norm() >= 1.0 {
        log::warn!(
            "sum of |lag coefficients| = {:.3} >= 1: the simulated process may not be stationary",
            params.lag_l1_norm()
        );
    }
    let k = params.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.sigma2_eps.sqrt())
        .map_err(|e| MutareError::InvalidArgument(format!("error distribution: {e}")))?;
    let intercept_sd = params.sigma2_alpha.sqrt();
    let intercept = if intercept_sd > 0.0 {
        Some(Normal::new(0.0, intercept_sd).expect("finite nonnegative sd"))
    } else {
        None
    };

    let mut values = Vec::with_capacity(n);
    let mut row = vec![0.0; k + 1];
    for _ in 0..n {
        let alpha_i = intercept.map_or(0.0, |d| d.sample(&mut rng));
        // history[0] = y_{t-1}; pre-sample lags sit at the first-regime mean
        let mut history = vec![params.beta[0]; k.max(1)];
        let mut series = Vec::with_capacity(m);
        for step in 0..(burn_in + m) {
            fill_regressor_row(&mut row, &history, params.tau);
            let mean: f64 = row.iter().zip(&params.beta).map(|(h, b)| h * b).sum();
            let y = alpha_i + mean + noise.sample(&mut rng);
            history.rotate_right(1);
            history[0] = y;
            if step >= burn_in {
                series.push(y);
            }
        }
        values.push(series);
    }
    PanelSeries::from_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(beta: &[f64], tau: f64, s2a: f64, s2e: f64) -> MutareParams {
        MutareParams::new(beta.to_vec(), tau, s2a, s2e).unwrap()
    }

    #[test]
    fn regressor_row_second_lag_below_threshold() {
        let r = build_regressor_row(&[0.5, -0.2], 0.1, 2).unwrap();
        assert_eq!(r.entries, vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn regressor_row_both_lags_above() {
        let r = build_regressor_row(&[0.5, 0.4], 0.1, 2).unwrap();
        assert_eq!(r.entries, vec![1.0, 0.5, 0.4]);
    }

    #[test]
    fn regressor_row_first_indicator_fails() {
        let r = build_regressor_row(&[0.05, 0.4], 0.1, 2).unwrap();
        assert_eq!(r.entries, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn regressor_row_short_history_is_an_error() {
        assert!(build_regressor_row(&[0.5], 0.1, 2).is_err());
    }

    #[test]
    fn conditional_mean_matches_hand_arithmetic() {
        let p = params(&[0.0, 0.5, 0.4], 0.1, 0.0, 1.0);
        let m = conditional_mean(&p, 0.0, &[0.5, 0.4]).unwrap();
        assert!((m - 0.41).abs() < 1e-15);
    }

    #[test]
    fn conditional_mean_first_regime_is_intercept() {
        let p = params(&[0.3, 0.5, 0.4], 0.1, 0.0, 1.0);
        let m = conditional_mean(&p, 0.0, &[0.05, 0.0]).unwrap();
        assert_eq!(m, 0.3);
    }

    #[test]
    fn conditional_mean_threshold_above_history_leaves_alpha_only() {
        let p = params(&[0.0, 0.5, 0.4], 10.0, 0.0, 1.0);
        let m = conditional_mean(&p, 0.2, &[0.5, 0.4]).unwrap();
        assert!((m - 0.2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_noise_pins_series_at_first_regime_mean() {
        let p = params(&[0.3, 0.5], 10.0, 0.0, 1e-12);
        let panel = simulate_panel(&p, 2, 50, 200, 7).unwrap();
        for s in panel.iter_series() {
            for &v in s {
                assert!((v - 0.3).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_panel() {
        let p = params(&[0.0, 0.5, 0.4], 0.1, 0.5, 0.5);
        let a = simulate_panel(&p, 5, 40, 200, 42).unwrap();
        let b = simulate_panel(&p, 5, 40, 200, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_panel(&p, 5, 40, 200, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn negative_variance_rejected() {
        assert!(MutareParams::new(vec![0.0], 0.0, -0.1, 1.0).is_err());
        assert!(MutareParams::new(vec![0.0], 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn simulator_matches_independent_recursion() {
        // replay the documented draw order with a local recursion
        let p = params(&[0.1, 0.6], 0.05, 0.0, 0.25);
        let seed = 99;
        let (n, m, burn) = (1, 30, 10);
        let panel = simulate_panel(&p, n, m, burn, seed).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut prev = 0.1_f64;
        let mut expect = Vec::new();
        for step in 0..(burn + m) {
            let mean = 0.1 + if prev > 0.05 { 0.6 * prev } else { 0.0 };
            let y = mean + noise.sample(&mut rng);
            prev = y;
            if step >= burn {
                expect.push(y);
            }
        }
        assert_eq!(panel.series(0), expect.as_slice());
    }

    #[test]
    fn long_series_mean_converges_without_threshold_effect() {
        // tau above everything: iid N(beta0, s2e); mean within 3 sd of beta0
        let p = params(&[0.3, 0.4], 100.0, 0.0, 0.25);
        let m = 4000;
        let panel = simulate_panel(&p, 1, m, 100, 11).unwrap();
        let mean = panel.pooled().sum::<f64>() / m as f64;
        let bound = 3.0 * 0.5 / (m as f64).sqrt();
        assert!((mean - 0.3).abs() < bound, "mean {mean} not within {bound} of 0.3");
    }

    #[test]
    fn unbalanced_rejected_with_truncation_hint() {
        let err = PanelSeries::from_values(vec![vec![1.0, 2.0], vec![1.0]]).unwrap_err();
        assert!(err.to_string().contains("truncate"));
    }
}

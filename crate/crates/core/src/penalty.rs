//! The double penalty: adaptive-lasso shrinkage on the lag coefficients
//! plus a charge on the memory order (the largest nonzero lag index).
//! Two equivalent rewrites of the order charge are provided; the second
//! is the form the mixed-integer solver linearizes.

use serde::{Deserialize, Serialize};

use crate::error::{MutareError, Result};

/// Coefficients smaller than this are treated as zero everywhere.
pub const COEF_ZERO_TOL: f64 = 1e-8;

/// Pilot coefficients below this magnitude get the sentinel weight.
pub const PILOT_ZERO_TOL: f64 = 1e-10;

/// Weight assigned when the pilot coefficient is numerically zero;
/// large enough that any positive `lambda1` forces the coefficient out,
/// while keeping all arithmetic finite.
pub const ZERO_PILOT_WEIGHT: f64 = 1e10;

/// Penalty configuration: `lambda1` scales the weighted L1 shrinkage,
/// `lambda2` the order charge, `rho` the pilot-weight exponent, and
/// `big_m` bounds the coefficient budget in the integer formulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho: f64,
    /// Adaptive weights `nu_1..nu_k`.
    pub weights: Vec<f64>,
    pub big_m: f64,
}

impl PenaltyConfig {
    pub const DEFAULT_BIG_M: f64 = 50.0;

    pub fn new(lambda1: f64, lambda2: f64, rho: f64) -> Result<Self> {
        let cfg = Self {
            lambda1,
            lambda2,
            rho,
            weights: Vec::new(),
            big_m: Self::DEFAULT_BIG_M,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_big_m(mut self, big_m: f64) -> Self {
        self.big_m = big_m;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(MutareError::InvalidArgument(format!(
                "lambda1 and lambda2 must be nonnegative, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.rho > 0.0) {
            return Err(MutareError::InvalidArgument(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if !(self.big_m > 0.0) {
            return Err(MutareError::InvalidArgument(format!(
                "big_m must be positive, got {}",
                self.big_m
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(MutareError::InvalidArgument(
                "adaptive weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Weight for lag `j` (1-based); defaults to 1 when unset.
    pub fn weight(&self, j: usize) -> f64 {
        debug_assert!(j >= 1);
        self.weights.get(j - 1).copied().unwrap_or(1.0)
    }
}

/// Memory order: the largest lag index `j >= 1` with `|beta_j| > tol`;
/// 0 when all lag coefficients vanish. The intercept never counts.
pub fn order_of(beta: &[f64], tol: f64) -> usize {
    beta.iter()
        .enumerate()
        .skip(1)
        .rev()
        .find(|(_, b)| b.abs() > tol)
        .map_or(0, |(j, _)| j)
}

/// The double-penalized objective
/// `2 loglik - lambda1 sum_j nu_j |beta_j| - lambda2 * order(beta)`.
pub fn double_penalized_objective(loglik: f64, beta: &[f64], cfg: &PenaltyConfig) -> f64 {
    let shrink: f64 = beta
        .iter()
        .enumerate()
        .skip(1)
        .map(|(j, b)| cfg.weight(j) * b.abs())
        .sum();
    2.0 * loglik - cfg.lambda1 * shrink - cfg.lambda2 * order_of(beta, COEF_ZERO_TOL) as f64
}

/// Order charge written as nonzero count plus covered zeros: zeros with
/// some nonzero coefficient after them still pay.
pub fn penalty_prop1(beta: &[f64], lambda2: f64, tol: f64) -> f64 {
    let k = beta.len().saturating_sub(1);
    let mut count = 0usize;
    for j in 1..=k {
        if beta[j].abs() > tol {
            count += 1;
        } else if beta[j + 1..].iter().any(|b| b.abs() > tol) {
            count += 1;
        }
    }
    lambda2 * count as f64
}

/// Order charge written as a sum of tail indicators:
/// `lambda2 * sum_j (1 - I[beta_j = ... = beta_k = 0])`.
pub fn penalty_prop2(beta: &[f64], lambda2: f64, tol: f64) -> f64 {
    let k = beta.len().saturating_sub(1);
    let mut count = 0usize;
    for j in 1..=k {
        if beta[j..].iter().any(|b| b.abs() > tol) {
            count += 1;
        }
    }
    lambda2 * count as f64
}

/// Adaptive weights `nu_j = |pilot_j|^{-rho}` for `j = 1..k`, with the
/// sentinel for numerically-zero pilots.
pub fn adaptive_weights(pilot_beta: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(rho > 0.0) {
        return Err(MutareError::InvalidArgument(format!(
            "rho must be positive, got {rho}"
        )));
    }
    Ok(pilot_beta
        .iter()
        .skip(1)
        .map(|b| {
            if b.abs() < PILOT_ZERO_TOL {
                ZERO_PILOT_WEIGHT
            } else {
                b.abs().powf(-rho)
            }
        })
        .collect())
}

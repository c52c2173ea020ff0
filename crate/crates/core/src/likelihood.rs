//! Marginal Gaussian likelihood for the panel model and its profiled
//! maximizers.
//!
//! The likelihood conditions on the first `k` observations of each
//! subject, so residual rows run over `t = k+1..m`. Per subject the
//! covariance is `W_i = sigma2_eps I + sigma2_alpha 1 1'`, inverted via
//! the rank-one identity
//!
//! `W_i^{-1} = sigma2_eps^{-1} (I - (sigma2_alpha / (sigma2_eps + m_e sigma2_alpha)) 1 1')`
//!
//! with `log|W_i| = m_e ln(sigma2_eps) + ln(1 + m_e sigma2_alpha / sigma2_eps)`.
//!
//! Because the mean is linear in `beta` given the threshold, profiling
//! is exact: `beta` by generalized least squares, the error variance in
//! closed form given the variance ratio, and the ratio by bracketed
//! search. The threshold itself is profiled over the observed-value
//! grid, where the likelihood is piecewise constant.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::design::DesignStats;
use crate::error::{MutareError, Result};
use crate::model::{MutareParams, PanelSeries};
use crate::numeric::{scan_golden_max_on, solve_spd};

/// Variance components of the random-intercept covariance
/// `W_i = sigma2_eps I + sigma2_alpha 1 1'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceSpec {
    pub sigma2_alpha: f64,
    pub sigma2_eps: f64,
}

impl CovarianceSpec {
    pub fn new(sigma2_alpha: f64, sigma2_eps: f64) -> Result<Self> {
        if !(sigma2_alpha >= 0.0) {
            return Err(MutareError::InvalidArgument(format!(
                "sigma2_alpha must be nonnegative, got {sigma2_alpha}"
            )));
        }
        if !(sigma2_eps > 0.0) {
            return Err(MutareError::InvalidArgument(format!(
                "sigma2_eps must be positive, got {sigma2_eps}"
            )));
        }
        Ok(Self {
            sigma2_alpha,
            sigma2_eps,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.sigma2_alpha / self.sigma2_eps
    }
}

/// Result of profiling the likelihood over the threshold grid.
#[derive(Debug, Clone)]
pub struct ProfiledFit {
    /// Full coefficient vector `(beta_0, ..., beta_k)`, zeros off the
    /// fitted support.
    pub beta_hat: Vec<f64>,
    pub tau_hat: f64,
    pub sigma2_alpha_hat: f64,
    pub sigma2_eps_hat: f64,
    /// Log likelihood (natural scale, constants included).
    pub loglik: f64,
    /// Free lag indices (`1..=k`); the intercept is always free.
    pub support: Vec<usize>,
}

/// Conditional marginal log likelihood
/// `-1/2 [N ln(2 pi) + log|W| + r' W^{-1} r]` over rows `t = k+1..m`.
pub fn log_likelihood(panel: &PanelSeries, params: &MutareParams) -> Result<f64> {
    params.validate()?;
    // evaluation needs only one residual row, unlike a fit
    if panel.series_length() < params.k() + 1 {
        return Err(MutareError::InvalidArgument(format!(
            "series length {} leaves no residual rows at lag order {}",
            panel.series_length(),
            params.k()
        )));
    }
    let stats = DesignStats::build(panel, params.tau, params.k(), None, false);
    let ll = stats.loglik_at(&params.beta, params.sigma2_alpha, params.sigma2_eps);
    if !ll.is_finite() {
        return Err(MutareError::Numeric(format!(
            "log likelihood is not finite at sigma2_alpha={}, sigma2_eps={}",
            params.sigma2_alpha, params.sigma2_eps
        )));
    }
    Ok(ll)
}

/// Generalized least squares fixed effects at a fixed threshold and
/// covariance, restricted to `{0} ∪ support`.
///
/// Identically-zero design columns (a threshold above every relevant
/// lag) get coefficient 0; a rank deficiency among the remaining
/// columns is an error naming the offending columns. The conditioning
/// lag order is `max(support)`.
pub fn gls_beta(
    panel: &PanelSeries,
    tau: f64,
    cov: &CovarianceSpec,
    support: &[usize],
) -> Result<Vec<f64>> {
    let k = support.iter().copied().max().unwrap_or(0);
    panel.check_fit_size(k)?;
    let mut lags: Vec<usize> = support.iter().copied().filter(|&j| j >= 1).collect();
    lags.sort_unstable();
    lags.dedup();
    if lags.iter().any(|&j| j > k) {
        return Err(MutareError::InvalidArgument("support index exceeds lag order".into()));
    }
    let stats = DesignStats::build(panel, tau, k, None, false);
    let fit = gls_on_stats(&stats, &lags, cov.ratio(), "gls_beta")?;
    Ok(fit)
}

/// GLS on prebuilt stats; returns the full `(k+1)`-vector with zeros on
/// dropped/unsupported columns.
pub(crate) fn gls_on_stats(
    stats: &DesignStats,
    support: &[usize],
    phi: f64,
    context: &str,
) -> Result<Vec<f64>> {
    let cols = solvable_columns(stats, support);
    let (g, q, _) = stats.v_gram(phi, &cols);
    let sol = solve_spd(&g, &q).map_err(|c| MutareError::Singular {
        context: context.to_string(),
        columns: vec![cols[c]],
    })?;
    let mut beta = vec![0.0; stats.k + 1];
    for (i, &c) in cols.iter().enumerate() {
        beta[c] = sol[i];
    }
    Ok(beta)
}

/// `{0} ∪ support` minus identically-zero columns.
fn solvable_columns(stats: &DesignStats, support: &[usize]) -> Vec<usize> {
    let mut cols = vec![0usize];
    cols.extend(support.iter().copied().filter(|&j| stats.gram[(j, j)] > 0.0));
    cols
}

/// Unique observed values between the `trim` and `1 - trim` empirical
/// quantiles, ascending. This is the exact profile grid: the likelihood
/// is constant between adjacent order statistics.
pub fn candidate_thresholds(panel: &PanelSeries, trim: f64) -> Result<Vec<f64>> {
    let values: Vec<f64> = panel.pooled().collect();
    candidate_set(values, trim)
}

pub(crate) fn candidate_set(mut values: Vec<f64>, trim: f64) -> Result<Vec<f64>> {
    if !(0.0..0.5).contains(&trim) {
        return Err(MutareError::InvalidArgument(format!(
            "trim must lie in [0, 0.5), got {trim}"
        )));
    }
    if values.is_empty() {
        return Err(MutareError::InvalidArgument("no observations".into()));
    }
    values.sort_by(f64::total_cmp);
    let len = values.len();
    let lo = ((trim * len as f64).floor() as usize).min(len - 1);
    let hi = len - 1 - lo;
    if lo > hi {
        return Err(MutareError::InvalidArgument(format!(
            "trim {trim} leaves no candidate thresholds"
        )));
    }
    let mut cands: Vec<f64> = values[lo..=hi].to_vec();
    cands.dedup();
    if cands.is_empty() {
        return Err(MutareError::InvalidArgument(
            "empty candidate set after trimming".into(),
        ));
    }
    Ok(cands)
}

/// One variance-component fit: coefficients profiled by GLS, error
/// variance in closed form, ratio by bracketed search.
#[derive(Debug, Clone)]
pub(crate) struct VarianceFit {
    pub beta: Vec<f64>,
    pub sigma2_alpha: f64,
    pub sigma2_eps: f64,
    pub loglik: f64,
}

const EPS_FLOOR: f64 = 1e-8;
const VAR_TOL: f64 = 1e-7;

/// Profiled log likelihood at variance ratio `phi`, maximizing over the
/// error variance in closed form. `None` when the design is singular.
fn profile_phi(
    stats: &DesignStats,
    cols: &[usize],
    phi: f64,
    box_hi: f64,
) -> Option<(Vec<f64>, f64, f64)> {
    let (g, q, yy) = stats.v_gram(phi, cols);
    let sol = solve_spd(&g, &q).ok()?;
    let n = stats.n_rows as f64;
    let rss_v = (yy - sol.dot(&q)).max(0.0);
    let s2e = (rss_v / n).clamp(EPS_FLOOR, box_hi);
    let ll = -0.5
        * (n * (2.0 * std::f64::consts::PI).ln()
            + n * s2e.ln()
            + stats.logdet_v(phi)
            + rss_v / s2e);
    let mut beta = vec![0.0; stats.k + 1];
    for (i, &c) in cols.iter().enumerate() {
        beta[c] = sol[i];
    }
    Some((beta, s2e, ll))
}

/// Log likelihood with `beta` profiled by GLS at fixed variances.
fn loglik_gls_at(stats: &DesignStats, cols: &[usize], s2a: f64, s2e: f64) -> Option<(Vec<f64>, f64)> {
    let phi = s2a / s2e;
    let (g, q, yy) = stats.v_gram(phi, cols);
    let sol = solve_spd(&g, &q).ok()?;
    let n = stats.n_rows as f64;
    let rss_v = (yy - sol.dot(&q)).max(0.0);
    let ll = -0.5
        * (n * (2.0 * std::f64::consts::PI).ln()
            + n * s2e.ln()
            + stats.logdet_v(phi)
            + rss_v / s2e);
    let mut beta = vec![0.0; stats.k + 1];
    for (i, &c) in cols.iter().enumerate() {
        beta[c] = sol[i];
    }
    Some((beta, ll))
}

/// Maximize the profiled likelihood over the variance box
/// `sigma2_alpha in [0, box_hi]`, `sigma2_eps in [1e-8, box_hi]`.
pub(crate) fn fit_variances(
    stats: &DesignStats,
    support: &[usize],
    fix_eps: Option<f64>,
    box_hi: f64,
    pin_alpha: bool,
) -> Result<VarianceFit> {
    let cols = solvable_columns(stats, support);
    let box_hi = box_hi.max(1e-6);

    let result = if let Some(eps) = fix_eps {
        if !(eps > 0.0) {
            return Err(MutareError::InvalidArgument(format!(
                "fixed sigma2_eps must be positive, got {eps}"
            )));
        }
        if pin_alpha {
            loglik_gls_at(stats, &cols, 0.0, eps).map(|(beta, ll)| VarianceFit {
                beta,
                sigma2_alpha: 0.0,
                sigma2_eps: eps,
                loglik: ll,
            })
        } else {
            let xs = alpha_grid(box_hi);
            let mut eval = |s2a: f64| {
                loglik_gls_at(stats, &cols, s2a, eps).map_or(f64::NEG_INFINITY, |(_, ll)| ll)
            };
            let (s2a, _) = scan_golden_max_on(&mut eval, &xs, VAR_TOL);
            loglik_gls_at(stats, &cols, s2a, eps).map(|(beta, ll)| VarianceFit {
                beta,
                sigma2_alpha: s2a,
                sigma2_eps: eps,
                loglik: ll,
            })
        }
    } else if pin_alpha {
        profile_phi(stats, &cols, 0.0, box_hi).map(|(beta, s2e, ll)| VarianceFit {
            beta,
            sigma2_alpha: 0.0,
            sigma2_eps: s2e,
            loglik: ll,
        })
    } else {
        let xs = ratio_grid();
        let mut eval = |phi: f64| {
            profile_phi(stats, &cols, phi, box_hi).map_or(f64::NEG_INFINITY, |(_, _, ll)| ll)
        };
        let (phi, _) = scan_golden_max_on(&mut eval, &xs, VAR_TOL);
        profile_phi(stats, &cols, phi, box_hi).map(|(beta, s2e, ll)| {
            let s2a = (phi * s2e).clamp(0.0, box_hi);
            VarianceFit {
                beta,
                sigma2_alpha: s2a,
                sigma2_eps: s2e,
                loglik: ll,
            }
        })
    };

    match result {
        Some(fit) if fit.loglik.is_finite() => Ok(fit),
        Some(fit) => Err(MutareError::NonConvergence {
            context: "variance-component search".into(),
            detail: format!(
                "best point sigma2_alpha={}, sigma2_eps={} has non-finite log likelihood",
                fit.sigma2_alpha, fit.sigma2_eps
            ),
        }),
        None => Err(MutareError::Singular {
            context: "variance-component search".into(),
            columns: vec![],
        }),
    }
}

/// Scan abscissae for the variance ratio: zero plus a log-spaced sweep.
fn ratio_grid() -> Vec<f64> {
    let mut xs = vec![0.0];
    let (lo, hi, n) = (1e-6_f64, 1e6_f64, 49);
    let step = (hi / lo).ln() / (n - 1) as f64;
    xs.extend((0..n).map(|i| lo * (step * i as f64).exp()));
    xs
}

fn alpha_grid(box_hi: f64) -> Vec<f64> {
    let mut xs = vec![0.0];
    let (lo, n) = (box_hi * 1e-8, 41);
    let step = (box_hi / lo).ln() / (n - 1) as f64;
    xs.extend((0..n).map(|i| lo * (step * i as f64).exp()));
    xs
}

/// Options for the internal threshold profiler.
#[derive(Debug, Clone)]
pub(crate) struct ProfileOptions<'a> {
    /// Free lag indices.
    pub support: Vec<usize>,
    pub fix_eps: Option<f64>,
    /// Included effective rows (`t - k`), ascending; `None` = all.
    pub mask: Option<&'a [usize]>,
    pub trim: f64,
}

/// Profile the likelihood over candidate thresholds; ties go to the
/// smaller threshold. Candidates whose design cannot be solved are
/// skipped.
pub(crate) fn profile_threshold(
    panel: &PanelSeries,
    k: usize,
    opts: &ProfileOptions,
) -> Result<ProfiledFit> {
    panel.check_fit_size(k)?;
    let candidates = match opts.mask {
        None => candidate_thresholds(panel, opts.trim)?,
        Some(mask) => {
            let mut vals = Vec::with_capacity(mask.len() * panel.n_subjects());
            for series in panel.iter_series() {
                vals.extend(mask.iter().map(|&e| series[e + k]));
            }
            candidate_set(vals, opts.trim)?
        }
    };
    let pin_alpha = panel.n_subjects() == 1;
    let box_hi = 10.0 * panel.pooled_variance();

    let fits: Vec<Option<VarianceFit>> = candidates
        .par_iter()
        .map(|&tau| {
            let stats = DesignStats::build(panel, tau, k, opts.mask, false);
            fit_variances(&stats, &opts.support, opts.fix_eps, box_hi, pin_alpha).ok()
        })
        .collect();

    let mut best: Option<(f64, &VarianceFit)> = None;
    for (tau, fit) in candidates.iter().zip(&fits) {
        if let Some(fit) = fit {
            // strict improvement keeps the smallest tau on ties
            if best.map_or(true, |(_, b)| fit.loglik > b.loglik) {
                best = Some((*tau, fit));
            }
        }
    }
    let (tau_hat, fit) = best.ok_or_else(|| {
        MutareError::Numeric("no candidate threshold admitted a non-singular fit".into())
    })?;
    Ok(ProfiledFit {
        beta_hat: fit.beta.clone(),
        tau_hat,
        sigma2_alpha_hat: fit.sigma2_alpha,
        sigma2_eps_hat: fit.sigma2_eps,
        loglik: fit.loglik,
        support: opts.support.clone(),
    })
}

/// Maximize the likelihood jointly over the threshold grid, the
/// coefficients, and both variance components, with all lags `1..=k`
/// free.
pub fn profile_tau(panel: &PanelSeries, k: usize, trim: f64) -> Result<ProfiledFit> {
    profile_threshold(
        panel,
        k,
        &ProfileOptions {
            support: (1..=k).collect(),
            fix_eps: None,
            mask: None,
            trim,
        },
    )
}

/// Maximum-likelihood variance components at a fixed threshold, with
/// the coefficients profiled out by GLS at every evaluation. With
/// `fix_eps` only the random-effect variance is searched. A single
/// subject pins `sigma2_alpha` to zero (it is not identified apart from
/// the intercept there).
pub fn estimate_variance_components(
    panel: &PanelSeries,
    tau: f64,
    k: usize,
    fix_eps: Option<f64>,
) -> Result<(f64, f64)> {
    panel.check_fit_size(k)?;
    let stats = DesignStats::build(panel, tau, k, None, false);
    let support: Vec<usize> = (1..=k).collect();
    let fit = fit_variances(
        &stats,
        &support,
        fix_eps,
        10.0 * panel.pooled_variance(),
        panel.n_subjects() == 1,
    )?;
    Ok((fit.sigma2_alpha, fit.sigma2_eps))
}

/// Plug-in asymptotic covariance of the free coefficients:
/// `(H_(1)' W^{-1} H_(1))^{-1}` with columns `{0} ∪ fit.support`.
/// Row/column 0 corresponds to the intercept.
pub fn asymptotic_covariance(panel: &PanelSeries, fit: &ProfiledFit) -> Result<DMatrix<f64>> {
    let k = fit.beta_hat.len().saturating_sub(1);
    panel.check_fit_size(k)?;
    let mut cols = vec![0usize];
    cols.extend(fit.support.iter().copied().filter(|&j| (1..=k).contains(&j)));
    cols.sort_unstable();
    cols.dedup();
    let stats = DesignStats::build(panel, fit.tau_hat, k, None, false);
    let phi = fit.sigma2_alpha_hat / fit.sigma2_eps_hat;
    let (g, _, _) = stats.v_gram(phi, &cols);
    // H' W^{-1} H = G_V / sigma2_eps
    let inv = crate::numeric::invert_spd(&g).map_err(|c| MutareError::Singular {
        context: "asymptotic covariance".into(),
        columns: vec![cols[c]],
    })?;
    Ok(inv * fit.sigma2_eps_hat)
}

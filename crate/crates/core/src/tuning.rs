//! Tuning-parameter selection: blocked cross-validation for dependent
//! data on observed panels, and held-out test-panel prediction error
//! for simulation studies.
//!
//! The blocked scheme deletes `h` rows on each side of every validation
//! block so training and validation are nearly independent; block sizes
//! follow `h = floor((m-k)/4)`, `n_c = floor(sqrt(m))`, and
//! `n_v = m - k - n_c - 2h`.

use rayon::prelude::*;
use serde::Serialize;

use crate::design::DesignStats;
use crate::error::{MutareError, Result};
use crate::model::{fill_regressor_row, PanelSeries};
use crate::penalty::PenaltyConfig;
use crate::selection::{fit_mutare_impl, FitOptions, FitResult};

/// Blocked cross-validation plan over the effective rows `0..m-k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvPlan {
    pub m: usize,
    pub k: usize,
    /// Gap deleted on each side of a validation block.
    pub h: usize,
    /// Training rows per fold.
    pub n_c: usize,
    /// Validation rows per fold.
    pub n_v: usize,
    /// Validation-block start offsets (effective row index).
    pub fold_offsets: Vec<usize>,
}

impl CvPlan {
    pub fn new(m: usize, k: usize) -> Result<Self> {
        if m <= k {
            return Err(MutareError::InvalidArgument(format!(
                "series length {m} does not exceed lag order {k}"
            )));
        }
        let eff = m - k;
        let h = eff / 4;
        let n_c = (m as f64).sqrt().floor() as usize;
        let used = n_c + 2 * h;
        if used >= eff {
            return Err(MutareError::InvalidArgument(format!(
                "blocked validation is infeasible: m={m}, k={k} give h={h}, n_c={n_c}, \
                 leaving n_v={} (need at least 1)",
                eff as isize - used as isize
            )));
        }
        let n_v = eff - used;
        let fold_offsets = (0..)
            .map(|f| f * n_v)
            .take_while(|o| o + n_v <= eff)
            .collect();
        Ok(CvPlan {
            m,
            k,
            h,
            n_c,
            n_v,
            fold_offsets,
        })
    }

    /// Training/validation row sets per fold. Training is the `n_c`
    /// rows nearest the validation block but at least `h` away from it
    /// on each side; for interior blocks that is exactly every row
    /// outside the deleted window.
    pub fn folds(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let eff = self.m - self.k;
        self.fold_offsets
            .iter()
            .map(|&v0| {
                let validation: Vec<usize> = (v0..v0 + self.n_v).collect();
                let mut candidates: Vec<(usize, usize)> = (0..eff)
                    .filter_map(|e| {
                        let dist = if e + self.h < v0 {
                            return Some((v0 - e, e)); // left of the gap
                        } else if e >= v0 + self.n_v + self.h {
                            Some((e - (v0 + self.n_v) + 1, e))
                        } else {
                            None
                        };
                        dist
                    })
                    .filter(|(d, _)| *d > self.h)
                    .collect();
                candidates.sort_unstable();
                let mut training: Vec<usize> =
                    candidates.iter().take(self.n_c).map(|&(_, e)| e).collect();
                training.sort_unstable();
                (training, validation)
            })
            .collect()
    }
}

/// Predict one-step-ahead conditional means for the `rows` of `panel`
/// (effective indices at lag order `k`) and return the squared errors'
/// sum. True lagged values feed the regressors; `alpha[i]` is subject
/// `i`'s predicted random intercept.
fn sum_squared_prediction_error(
    panel: &PanelSeries,
    beta: &[f64],
    tau: f64,
    k: usize,
    alpha: &[f64],
    rows: &[usize],
) -> f64 {
    let mut row = vec![0.0; k + 1];
    let mut history = vec![0.0; k.max(1)];
    let mut total = 0.0;
    for (i, series) in panel.iter_series().enumerate() {
        for &e in rows {
            let t = e + k;
            for j in 1..=k {
                history[j - 1] = series[t - j];
            }
            fill_regressor_row(&mut row, &history, tau);
            let mean: f64 = row.iter().zip(beta).map(|(h, b)| h * b).sum();
            let err = series[t] - (alpha[i] + mean);
            total += err * err;
        }
    }
    total
}

/// Shrunken per-subject intercept predictions from training residuals:
/// `alpha_i = (m_tr s2a / (s2e + m_tr s2a)) * mean training residual`.
fn blup_intercepts(panel: &PanelSeries, fit: &FitResult, k: usize, training: &[usize]) -> Vec<f64> {
    let s2a = fit.params.sigma2_alpha;
    let s2e = fit.params.sigma2_eps;
    let m_tr = training.len() as f64;
    if s2a == 0.0 || training.is_empty() {
        return vec![0.0; panel.n_subjects()];
    }
    let shrink = m_tr * s2a / (s2e + m_tr * s2a);
    let stats = DesignStats::build(panel, fit.params.tau, k, Some(training), false);
    stats
        .subject_residual_means(&fit.params.beta)
        .into_iter()
        .map(|r| shrink * r)
        .collect()
}

/// Mean squared one-step prediction error of the full fit pipeline
/// under the blocked plan: fit on each fold's training rows, predict
/// its validation rows.
pub fn hblock_cv_score(
    panel: &PanelSeries,
    k: usize,
    cfg: &PenaltyConfig,
    plan: &CvPlan,
) -> Result<f64> {
    if plan.m != panel.series_length() || plan.k != k {
        return Err(MutareError::InvalidArgument(format!(
            "plan was built for (m={}, k={}), data has (m={}, k={k})",
            plan.m,
            plan.k,
            panel.series_length()
        )));
    }
    let folds = plan.folds();
    let mut total = 0.0;
    let mut count = 0usize;
    for (training, validation) in &folds {
        let fit = fit_mutare_impl(panel, k, cfg, 0.10, &FitOptions::default(), Some(training))?;
        let alpha = blup_intercepts(panel, &fit, k, training);
        total += sum_squared_prediction_error(
            panel,
            &fit.params.beta,
            fit.params.tau,
            k,
            &alpha,
            validation,
        );
        count += validation.len() * panel.n_subjects();
    }
    Ok(total / count as f64)
}

/// Mean squared one-step prediction error on a held-out panel: fit on
/// `panel`, predict every conditioned row of `test` with zero-mean
/// random intercepts (the test subjects are new).
pub fn test_panel_score(
    panel: &PanelSeries,
    test: &PanelSeries,
    k: usize,
    cfg: &PenaltyConfig,
    trim: f64,
) -> Result<f64> {
    test.check_fit_size(k)?;
    let fit = fit_mutare_impl(panel, k, cfg, trim, &FitOptions::default(), None)?;
    let rows: Vec<usize> = (0..test.series_length() - k).collect();
    let alpha = vec![0.0; test.n_subjects()];
    let sse =
        sum_squared_prediction_error(test, &fit.params.beta, fit.params.tau, k, &alpha, &rows);
    Ok(sse / (rows.len() * test.n_subjects()) as f64)
}

/// How a tuning configuration is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMethod {
    /// Blocked cross-validation on the panel itself.
    HBlock,
    /// Prediction error on a held-out panel of the same shape.
    TestPanel,
}

/// Candidate grids for `(lambda1, lambda2, rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub rho: Vec<f64>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        TuneGrid {
            lambda1: vec![0.1, 0.5, 1.0, 2.0, 5.0, 10.0],
            lambda2: vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
            rho: vec![0.5, 1.0, 2.0],
        }
    }
}

/// One scored grid point.
#[derive(Debug, Clone, Serialize)]
pub struct TuneRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho: f64,
    pub score: f64,
    pub rank: usize,
}

/// Full tuning output: every grid point with its score and rank, plus
/// the winning configuration.
#[derive(Debug, Clone)]
pub struct TuneReport {
    pub rows: Vec<TuneRow>,
    pub best: PenaltyConfig,
}

/// Exhaustive grid search minimizing the chosen score. Ties prefer the
/// sparser model: larger `lambda2`, then larger `lambda1`, then smaller
/// `rho`.
pub fn tune(
    panel: &PanelSeries,
    k: usize,
    grid: &TuneGrid,
    method: TuneMethod,
    test: Option<&PanelSeries>,
    trim: f64,
    big_m: f64,
) -> Result<PenaltyConfig> {
    Ok(tune_report(panel, k, grid, method, test, trim, big_m)?.best)
}

pub fn tune_report(
    panel: &PanelSeries,
    k: usize,
    grid: &TuneGrid,
    method: TuneMethod,
    test: Option<&PanelSeries>,
    trim: f64,
    big_m: f64,
) -> Result<TuneReport> {
    if grid.lambda1.is_empty() || grid.lambda2.is_empty() || grid.rho.is_empty() {
        return Err(MutareError::InvalidArgument("empty tuning grid".into()));
    }
    if method == TuneMethod::TestPanel && test.is_none() {
        return Err(MutareError::InvalidArgument(
            "test-panel tuning requires a test panel".into(),
        ));
    }
    let plan = match method {
        TuneMethod::HBlock => Some(CvPlan::new(panel.series_length(), k)?),
        TuneMethod::TestPanel => None,
    };
    let mut points = Vec::new();
    for &l1 in &grid.lambda1 {
        for &l2 in &grid.lambda2 {
            for &rho in &grid.rho {
                points.push((l1, l2, rho));
            }
        }
    }
    let scores: Vec<Result<f64>> = points
        .par_iter()
        .map(|&(l1, l2, rho)| {
            let cfg = PenaltyConfig::new(l1, l2, rho)?.with_big_m(big_m);
            match method {
                TuneMethod::HBlock => {
                    hblock_cv_score(panel, k, &cfg, plan.as_ref().expect("plan built"))
                }
                TuneMethod::TestPanel => {
                    test_panel_score(panel, test.expect("presence checked"), k, &cfg, trim)
                }
            }
        })
        .collect();

    let mut rows: Vec<TuneRow> = Vec::with_capacity(points.len());
    for ((l1, l2, rho), score) in points.into_iter().zip(scores) {
        rows.push(TuneRow {
            lambda1: l1,
            lambda2: l2,
            rho,
            score: score?,
            rank: 0,
        });
    }
    // rank by score; sparser (larger lambda2, larger lambda1, smaller
    // rho) wins exact ties
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = &rows[a];
        let rb = &rows[b];
        ra.score
            .total_cmp(&rb.score)
            .then(rb.lambda2.total_cmp(&ra.lambda2))
            .then(rb.lambda1.total_cmp(&ra.lambda1))
            .then(ra.rho.total_cmp(&rb.rho))
    });
    for (rank, &i) in order.iter().enumerate() {
        rows[i].rank = rank + 1;
    }
    let best_row = &rows[order[0]];
    let best = PenaltyConfig::new(best_row.lambda1, best_row.lambda2, best_row.rho)?
        .with_big_m(big_m);
    Ok(TuneReport { rows, best })
}

/// Tuning report CSV: one row per grid point.
pub fn write_tuning_report<W: std::io::Write>(w: &mut W, report: &TuneReport) -> Result<()> {
    writeln!(w, "lambda1,lambda2,rho,score,rank")?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            crate::numeric::fmt_sig(r.lambda1, 12),
            crate::numeric::fmt_sig(r.lambda2, 12),
            crate::numeric::fmt_sig(r.rho, 12),
            crate::numeric::fmt_sig(r.score, 12),
            r.rank
        )?;
    }
    Ok(())
}

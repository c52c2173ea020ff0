//! Stacked nested-indicator design and the sufficient statistics that
//! make repeated likelihood evaluation cheap.
//!
//! Per subject the marginal covariance of the conditioned rows is the
//! rank-one perturbation `W_i = sigma2_eps * I + sigma2_alpha * 1 1'`.
//! Writing `phi = sigma2_alpha / sigma2_eps` and `V_i = I + phi * 1 1'`,
//! everything the solvers need reduces to
//!
//! - `V_i^{-1} = I - (phi / (1 + m_i phi)) 1 1'`
//! - `log|V_i| = ln(1 + m_i phi)`
//!
//! so Gram matrices under any variance pair come from one pass over the
//! data: the raw cross-products plus per-subject column sums.

use nalgebra::{DMatrix, DVector};

use crate::model::{fill_regressor_row, PanelSeries};

/// Per-subject accumulators.
#[derive(Debug, Clone)]
pub(crate) struct SubjectStats {
    /// Number of included rows `m_i`.
    pub m_rows: usize,
    /// Column sums `1' H_i`, length `k + 1`.
    pub col_sum: DVector<f64>,
    /// Target sum `1' y_i`.
    pub y_sum: f64,
}

/// Raw rows for one subject, kept only when whitening or KKT checks
/// need the stacked matrices.
#[derive(Debug, Clone)]
pub(crate) struct SubjectRows {
    pub targets: Vec<f64>,
    /// Row-major, stride `k + 1`.
    pub design: Vec<f64>,
}

/// Design built at a fixed `(tau, k)`, optionally restricted to a subset
/// of effective rows (the same subset for every subject).
#[derive(Debug, Clone)]
pub(crate) struct DesignStats {
    pub k: usize,
    pub n_rows: usize,
    pub subjects: Vec<SubjectStats>,
    /// `sum_i H_i' H_i`, `(k+1) x (k+1)`.
    pub gram: DMatrix<f64>,
    /// `sum_i H_i' y_i`.
    pub hty: DVector<f64>,
    pub yty: f64,
    /// Raw rows, present only when built with `keep_rows`.
    pub rows: Option<Vec<SubjectRows>>,
}

impl DesignStats {
    /// Build the conditioned design: rows are target times `t = k..m-1`
    /// (0-based), regressors come from each row's own lagged history.
    /// `mask`, when given, lists the included effective rows
    /// `e = t - k` in ascending order.
    pub fn build(
        panel: &PanelSeries,
        tau: f64,
        k: usize,
        mask: Option<&[usize]>,
        keep_rows: bool,
    ) -> Self {
        let p = k + 1;
        let m = panel.series_length();
        let effective = m - k;
        let mut gram = DMatrix::zeros(p, p);
        let mut hty = DVector::zeros(p);
        let mut yty = 0.0;
        let mut subjects = Vec::with_capacity(panel.n_subjects());
        let mut rows_store: Option<Vec<SubjectRows>> = keep_rows.then(Vec::new);
        let mut row = vec![0.0; p];
        let mut history = vec![0.0; k.max(1)];
        let mut n_rows = 0;

        for series in panel.iter_series() {
            let mut col_sum = DVector::zeros(p);
            let mut y_sum = 0.0;
            let mut m_rows = 0;
            let mut raw = keep_rows.then(|| SubjectRows {
                targets: Vec::new(),
                design: Vec::new(),
            });
            let iter: Box<dyn Iterator<Item = usize>> = match mask {
                Some(es) => Box::new(es.iter().copied()),
                None => Box::new(0..effective),
            };
            for e in iter {
                let t = e + k;
                debug_assert!(t < m);
                // history[j-1] = y_{t-j}
                for j in 1..=k {
                    history[j - 1] = series[t - j];
                }
                fill_regressor_row(&mut row, &history, tau);
                let y = series[t];
                for a in 0..p {
                    col_sum[a] += row[a];
                    hty[a] += row[a] * y;
                    for b in a..p {
                        gram[(a, b)] += row[a] * row[b];
                    }
                }
                y_sum += y;
                yty += y * y;
                m_rows += 1;
                if let Some(raw) = raw.as_mut() {
                    raw.targets.push(y);
                    raw.design.extend_from_slice(&row);
                }
            }
            n_rows += m_rows;
            subjects.push(SubjectStats {
                m_rows,
                col_sum,
                y_sum,
            });
            if let (Some(store), Some(raw)) = (rows_store.as_mut(), raw) {
                store.push(raw);
            }
        }
        // mirror the upper triangle
        for a in 0..p {
            for b in (a + 1)..p {
                gram[(b, a)] = gram[(a, b)];
            }
        }
        DesignStats {
            k,
            n_rows,
            subjects,
            gram,
            hty,
            yty,
            rows: rows_store,
        }
    }

    /// Gram pieces under `V(phi)`, restricted to `cols`:
    /// `(H' V^{-1} H, H' V^{-1} y, y' V^{-1} y)`.
    pub fn v_gram(&self, phi: f64, cols: &[usize]) -> (DMatrix<f64>, DVector<f64>, f64) {
        let q = cols.len();
        let mut g = DMatrix::zeros(q, q);
        let mut b = DVector::zeros(q);
        for (a, &ca) in cols.iter().enumerate() {
            b[a] = self.hty[ca];
            for (z, &cb) in cols.iter().enumerate().skip(a) {
                g[(a, z)] = self.gram[(ca, cb)];
            }
        }
        let mut yy = self.yty;
        if phi != 0.0 {
            for s in &self.subjects {
                if s.m_rows == 0 {
                    continue;
                }
                let d = phi / (1.0 + s.m_rows as f64 * phi);
                for (a, &ca) in cols.iter().enumerate() {
                    let sa = s.col_sum[ca];
                    b[a] -= d * s.y_sum * sa;
                    for (z, &cb) in cols.iter().enumerate().skip(a) {
                        g[(a, z)] -= d * sa * s.col_sum[cb];
                    }
                }
                yy -= d * s.y_sum * s.y_sum;
            }
        }
        for a in 0..q {
            for z in (a + 1)..q {
                g[(z, a)] = g[(a, z)];
            }
        }
        (g, b, yy)
    }

    /// `sum_i ln(1 + m_i phi)`.
    pub fn logdet_v(&self, phi: f64) -> f64 {
        self.subjects
            .iter()
            .filter(|s| s.m_rows > 0)
            .map(|s| (1.0 + s.m_rows as f64 * phi).ln())
            .sum()
    }

    /// `log|W|` at the given variances.
    pub fn logdet_w(&self, sigma2_alpha: f64, sigma2_eps: f64) -> f64 {
        self.n_rows as f64 * sigma2_eps.ln() + self.logdet_v(sigma2_alpha / sigma2_eps)
    }

    /// Marginal Gaussian log likelihood at a full coefficient vector.
    pub fn loglik_at(&self, beta: &[f64], sigma2_alpha: f64, sigma2_eps: f64) -> f64 {
        let cols: Vec<usize> = (0..=self.k).collect();
        let phi = sigma2_alpha / sigma2_eps;
        let (g, q, yy) = self.v_gram(phi, &cols);
        let bv = DVector::from_row_slice(beta);
        let quad_v = yy - 2.0 * bv.dot(&q) + (&g * &bv).dot(&bv);
        let n = self.n_rows as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln()
            + n * sigma2_eps.ln()
            + self.logdet_v(phi)
            + quad_v / sigma2_eps)
    }

    /// Residual means per subject at `beta`: `(1'y_i - 1'H_i beta) / m_i`.
    pub fn subject_residual_means(&self, beta: &[f64]) -> Vec<f64> {
        let bv = DVector::from_row_slice(beta);
        self.subjects
            .iter()
            .map(|s| {
                if s.m_rows == 0 {
                    0.0
                } else {
                    (s.y_sum - s.col_sum.dot(&bv)) / s.m_rows as f64
                }
            })
            .collect()
    }
}

//! Small numeric helpers: pivot-reporting SPD solves, bracketed 1-D
//! maximization, and decimal rounding for reproducible output.

use nalgebra::{DMatrix, DVector};

/// Solve `a x = b` for symmetric positive definite `a` by Cholesky,
/// reporting the column at which factorization breaks down.
///
/// The pivot tolerance is relative to the largest diagonal entry, so
/// exactly-zero columns and linear dependencies both surface as the
/// first column whose pivot collapses.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> std::result::Result<DVector<f64>, usize> {
    let l = cholesky_lower(a)?;
    let n = a.nrows();
    // forward: l z = b
    let mut z = b.clone();
    for i in 0..n {
        let mut s = z[i];
        for j in 0..i {
            s -= l[(i, j)] * z[j];
        }
        z[i] = s / l[(i, i)];
    }
    // backward: l' x = z
    let mut x = z;
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= l[(j, i)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

/// Inverse of a symmetric positive definite matrix, with the same
/// failing-column report as [`solve_spd`].
pub fn invert_spd(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let col = solve_spd(a, &e)?;
        inv.set_column(j, &col);
    }
    // symmetrize against round-off
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    Ok(inv)
}

fn cholesky_lower(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max);
    let tol = scale.max(1.0) * 1e-12;
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if !(d > tol) {
            return Err(j);
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Maximize a unimodal-ish scalar function over `[lo, hi]`.
///
/// A coarse scan locates the best bracket, then golden-section search
/// refines it to relative width `tol`. Deterministic; returns the best
/// point and value seen.
pub fn scan_golden_max<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    scan_points: usize,
    tol: f64,
) -> (f64, f64) {
    debug_assert!(hi >= lo);
    let n = scan_points.max(3);
    let xs: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * (i as f64) / ((n - 1) as f64))
        .collect();
    scan_golden_max_on(&mut f, &xs, tol)
}

/// Same as [`scan_golden_max`] but with caller-chosen scan abscissae
/// (e.g. log-spaced). `xs` must be sorted ascending.
pub fn scan_golden_max_on<F: FnMut(f64) -> f64>(f: &mut F, xs: &[f64], tol: f64) -> (f64, f64) {
    debug_assert!(xs.len() >= 2);
    let mut best_i = 0;
    let mut best_v = f64::NEG_INFINITY;
    let vals: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    for (i, &v) in vals.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    let lo = xs[best_i.saturating_sub(1)];
    let hi = xs[(best_i + 1).min(xs.len() - 1)];
    let (x, v) = golden_max(f, lo, hi, tol);
    if v >= best_v {
        (x, v)
    } else {
        (xs[best_i], best_v)
    }
}

/// Golden-section maximization on `[lo, hi]` to relative width `tol`.
pub fn golden_max<F: FnMut(f64) -> f64>(f: &mut F, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    if !(b > a) {
        return (a, f(a));
    }
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a) <= tol * a.abs().max(b.abs()).max(1.0) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Round to `digits` significant decimal digits.
///
/// Output files serialize through this so that seeded runs diff cleanly
/// across platforms without carrying full binary-float text.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x)
        .parse()
        .unwrap_or(x)
}

/// Format with `digits` significant decimal digits (plain or scientific,
/// whichever round-trips the rounded value more readably).
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let r = round_sig(x, digits);
    if r == 0.0 {
        return "0".to_string();
    }
    let a = r.abs();
    if (1e-4..1e12).contains(&a) {
        // trim trailing zeros from a fixed rendering
        let mut s = format!("{:.*}", decimals_for(a, digits), r);
        if s.contains('.') {
            while s.ends_with('0') {
                s.pop();
            }
            if s.ends_with('.') {
                s.pop();
            }
        }
        s
    } else {
        format!("{:e}", r)
    }
}

fn decimals_for(a: f64, digits: usize) -> usize {
    let int_digits = if a >= 1.0 { a.log10().floor() as usize + 1 } else { 0 };
    digits.saturating_sub(int_digits).min(17)
}

/// Median of a slice (not in place); NaNs sort last.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample mean and standard deviation (denominator n-1).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1) as f64).sqrt())
}

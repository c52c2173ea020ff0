//! File formats: the `subject,time,y` panel CSV, study-report CSVs, and
//! decimal rounding of JSON documents for reproducible output.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{MutareError, Result};
use crate::model::PanelSeries;
use crate::montecarlo::{EstimatorSummary, QqData, SelectionMethod, SelectionTable};
use crate::numeric::fmt_sig;

/// Significant digits used for every number we serialize.
pub const OUTPUT_SIG_DIGITS: usize = 12;

/// Read a panel from `subject,time,y` CSV: rows grouped by subject,
/// times `1..m` consecutive within each subject, balanced across
/// subjects.
pub fn read_panel_csv<R: Read>(reader: R) -> Result<PanelSeries> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = csv.headers()?;
        let expect = ["subject", "time", "y"];
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != expect {
            return Err(MutareError::Data(format!(
                "expected header 'subject,time,y', got '{}'",
                got.join(",")
            )));
        }
    }
    let mut ids: Vec<String> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (line, record) in csv.records().enumerate() {
        let record = record?;
        if record.len() != 3 {
            return Err(MutareError::Data(format!(
                "row {}: expected 3 fields, got {}",
                line + 2,
                record.len()
            )));
        }
        let subject = record[0].trim().to_string();
        let time: usize = record[1].trim().parse().map_err(|_| {
            MutareError::Data(format!("row {}: time '{}' is not a positive integer", line + 2, &record[1]))
        })?;
        let y: f64 = record[2].trim().parse().map_err(|_| {
            MutareError::Data(format!("row {}: y '{}' is not a number", line + 2, &record[2]))
        })?;
        if ids.last() != Some(&subject) {
            if ids.contains(&subject) {
                return Err(MutareError::Data(format!(
                    "row {}: subject '{subject}' appears in non-contiguous blocks; \
                     sort rows by (subject, time)",
                    line + 2
                )));
            }
            ids.push(subject);
            values.push(Vec::new());
        }
        let series = values.last_mut().expect("pushed above");
        if time != series.len() + 1 {
            return Err(MutareError::Data(format!(
                "row {}: expected time {} for subject '{}', got {time}; \
                 times must be 1..m consecutive",
                line + 2,
                series.len() + 1,
                ids.last().unwrap()
            )));
        }
        series.push(y);
    }
    PanelSeries::new(values, ids)
}

pub fn read_panel_csv_path(path: &Path) -> Result<PanelSeries> {
    read_panel_csv(std::fs::File::open(path)?)
}

/// Write a panel as `subject,time,y` with 12-significant-digit values.
pub fn write_panel_csv<W: Write>(w: &mut W, panel: &PanelSeries) -> Result<()> {
    writeln!(w, "subject,time,y")?;
    for (id, series) in panel.subject_ids().iter().zip(panel.iter_series()) {
        for (t, y) in series.iter().enumerate() {
            writeln!(w, "{},{},{}", id, t + 1, fmt_sig(*y, OUTPUT_SIG_DIGITS))?;
        }
    }
    Ok(())
}

/// Round every number in a JSON document to [`OUTPUT_SIG_DIGITS`]
/// significant digits, in place.
pub fn round_json_numbers(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if n.is_f64() {
                    let r = crate::numeric::round_sig(f, OUTPUT_SIG_DIGITS);
                    if let Some(num) = serde_json::Number::from_f64(r) {
                        *n = num;
                    }
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_json_numbers),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_json_numbers),
        _ => {}
    }
}

/// Serialize with rounded numbers, a trailing newline, and stable key
/// order (callers construct maps in a fixed order).
pub fn to_rounded_json_string(value: serde_json::Value) -> String {
    let mut v = value;
    round_json_numbers(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("JSON serialization");
    s.push('\n');
    s
}

fn f(x: f64) -> String {
    fmt_sig(x, OUTPUT_SIG_DIGITS)
}

/// Estimation-study CSV: one block of rows per size with mean, sd,
/// Monte Carlo standard error, and coverage statistics per parameter.
pub fn write_estimator_summary_csv<W: Write>(
    w: &mut W,
    summaries: &[EstimatorSummary],
) -> Result<()> {
    writeln!(w, "m,n,statistic,tau,beta0,beta1,beta2,sigma2_alpha")?;
    for s in summaries {
        let col = |stat: &dyn Fn(&crate::montecarlo::ParamSummary) -> f64| {
            s.params.iter().map(stat).map(f).collect::<Vec<_>>().join(",")
        };
        writeln!(w, "{},{},mean,{}", s.m, s.n, col(&|p| p.mean))?;
        writeln!(w, "{},{},sd,{}", s.m, s.n, col(&|p| p.sd))?;
        writeln!(w, "{},{},mc_se,{}", s.m, s.n, col(&|p| p.mc_se))?;
        // coverage exists only for the fixed effects
        writeln!(
            w,
            "{},{},coverage90,,{},{},{},",
            s.m,
            s.n,
            f(s.coverage[0].rate),
            f(s.coverage[1].rate),
            f(s.coverage[2].rate)
        )?;
        writeln!(
            w,
            "{},{},coverage90_se,,{},{},{},",
            s.m,
            s.n,
            f(s.coverage[0].mc_se),
            f(s.coverage[1].mc_se),
            f(s.coverage[2].mc_se)
        )?;
    }
    Ok(())
}

fn method_name(m: SelectionMethod) -> &'static str {
    match m {
        SelectionMethod::Aic => "AIC",
        SelectionMethod::Bic => "BIC",
        SelectionMethod::Dp => "DP",
    }
}

/// Order-selection CSV: selection frequency per candidate order with
/// binomial standard errors.
pub fn write_selection_table_csv<W: Write>(w: &mut W, tables: &[SelectionTable]) -> Result<()> {
    let k_max = tables.first().map_or(0, |t| t.freq.len());
    let freq_cols: Vec<String> = (1..=k_max).map(|o| format!("order{o}")).collect();
    let se_cols: Vec<String> = (1..=k_max).map(|o| format!("se{o}")).collect();
    writeln!(
        w,
        "method,model,true_order,{},order0,failures,replicates,{}",
        freq_cols.join(","),
        se_cols.join(",")
    )?;
    for t in tables {
        let freqs: Vec<String> = t.freq.iter().map(|&x| f(x)).collect();
        let ses: Vec<String> = t.freq_se.iter().map(|&x| f(x)).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            method_name(t.method),
            t.model_id,
            t.true_order,
            freqs.join(","),
            f(t.freq_zero),
            t.failures,
            t.replicates,
            ses.join(",")
        )?;
    }
    Ok(())
}

/// Quantile-pair CSV for external plotting.
pub fn write_qq_csv<W: Write>(w: &mut W, label: &str, qq: &QqData) -> Result<()> {
    writeln!(w, "estimate,theoretical,sample")?;
    for &(theo, sample) in &qq.points {
        writeln!(w, "{},{},{}", label, f(theo), f(sample))?;
    }
    Ok(())
}

/// Threshold-rate CSV: sample size and median absolute error.
pub fn write_rate_csv<W: Write>(w: &mut W, rows: &[(usize, f64)]) -> Result<()> {
    writeln!(w, "N,median_abs_error")?;
    for &(n, err) in rows {
        writeln!(w, "{},{}", n, f(err))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_round_trips_through_csv() {
        let panel = PanelSeries::new(
            vec![vec![0.1, -2.5, 3.0], vec![1.0, 2.0, 0.333333333333]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&mut buf, &panel).unwrap();
        let back = read_panel_csv(buf.as_slice()).unwrap();
        assert_eq!(back, panel);
    }

    #[test]
    fn bad_header_is_a_data_error() {
        let err = read_panel_csv("id,t,value\na,1,0.5\n".as_bytes()).unwrap_err();
        assert!(matches!(err, MutareError::Data(_)));
    }

    #[test]
    fn nonconsecutive_times_rejected() {
        let err = read_panel_csv("subject,time,y\na,1,0.5\na,3,0.2\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("consecutive"));
    }

    #[test]
    fn interleaved_subjects_rejected() {
        let text = "subject,time,y\na,1,0.5\nb,1,0.1\na,2,0.2\nb,2,0.3\n";
        let err = read_panel_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("non-contiguous"));
    }

    #[test]
    fn unbalanced_csv_rejected() {
        let text = "subject,time,y\na,1,0.5\na,2,0.2\nb,1,0.3\n";
        assert!(read_panel_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn json_rounding_truncates_long_fractions() {
        let mut v = serde_json::json!({"x": [0.1234567890123456789, 1.0], "n": 7});
        round_json_numbers(&mut v);
        assert_eq!(v["x"][0], serde_json::json!(0.123456789012));
        assert_eq!(v["n"], serde_json::json!(7));
    }
}

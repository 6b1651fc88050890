//! Cross-seed plot data.
//!
//! File schema (CSV, one header row): `env_steps, mean, std`, then one
//! column per trace named `seed_<seed>` (suffixed `_<i>` for repeated seeds).
//! Each row is one outer iteration, with `env_steps` the cumulative count
//! after it. Metrics also reported at the final point (`f`, `p`, `f_lambda`,
//! `follower_gap`, `metric`) get one extra last row for the final iterate.
//! `std` is the sample standard deviation across traces, 0 for a single trace.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use pbrl_core::pbrl::{IterationRecord, RunTrace};

use crate::error::{format_err, HarnessError, Result};
use crate::num::{fmt_f64, parse_f64};

/// Per-iteration metrics available to every trace; the trace's own metric name is an alias of `metric`.
pub const PLOT_METRICS: [&str; 9] = [
    "f",
    "p",
    "f_lambda",
    "grad_norm_sq",
    "exact_grad_norm_sq",
    "penalty_grad_err_sq",
    "follower_gap",
    "oracle_gap",
    "metric",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PlotData {
    pub columns: Vec<String>,
    pub env_steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `per_seed[row][trace]`.
    pub per_seed: Vec<Vec<f64>>,
}

fn record_value(r: &IterationRecord, metric: &str) -> f64 {
    match metric {
        "f" => r.f,
        "p" => r.p,
        "f_lambda" => r.f_lambda,
        "grad_norm_sq" => r.grad_norm_sq,
        "exact_grad_norm_sq" => r.exact_grad_norm_sq,
        "penalty_grad_err_sq" => r.penalty_grad_err_sq,
        "follower_gap" => r.follower_gap,
        "oracle_gap" => r.oracle_gap,
        _ => r.metric,
    }
}

fn series(t: &RunTrace, metric: &str) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64)> = t.records.iter().map(|r| (r.env_steps, record_value(r, metric))).collect();
    let p = &t.final_point;
    let last = match metric {
        "f" => Some(p.f),
        "p" => Some(p.p),
        "f_lambda" => Some(p.f_lambda),
        "follower_gap" => Some(p.follower_gap),
        "metric" => Some(p.metric),
        _ => None,
    };
    if let Some(v) = last {
        out.push((p.env_steps, v));
    }
    out
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aligns `metric` across traces.
pub fn plot_data(traces: &[RunTrace], metric: &str) -> Result<PlotData> {
    if traces.is_empty() {
        return Err(HarnessError::Validation("no traces to plot".into()));
    }
    let key = if PLOT_METRICS.contains(&metric) {
        metric
    } else if traces.iter().all(|t| t.metric_name == metric) {
        "metric"
    } else {
        let mut names: Vec<String> = PLOT_METRICS.iter().map(|s| s.to_string()).collect();
        names.push(traces[0].metric_name.clone());
        return Err(HarnessError::Validation(format!("unknown metric {metric:?}; available: {}", names.join(", "))));
    };
    let cols: Vec<Vec<(u64, f64)>> = traces.iter().map(|t| series(t, key)).collect();
    let steps: Vec<u64> = cols[0].iter().map(|c| c.0).collect();
    if cols.iter().any(|c| c.len() != steps.len() || c.iter().zip(&steps).any(|(a, s)| a.0 != *s)) {
        return Err(HarnessError::Validation("traces do not share an env_steps axis".into()));
    }
    let mut columns: Vec<String> = vec!["env_steps".into(), "mean".into(), "std".into()];
    for (i, t) in traces.iter().enumerate() {
        let name = format!("seed_{}", t.seed);
        if columns.contains(&name) {
            columns.push(format!("{name}_{i}"));
        } else {
            columns.push(name);
        }
    }
    let mut data = PlotData { columns, env_steps: steps, mean: vec![], std: vec![], per_seed: vec![] };
    for row in 0..data.env_steps.len() {
        let vals: Vec<f64> = cols.iter().map(|c| c[row].1).collect();
        let (m, s) = mean_std(&vals);
        data.mean.push(m);
        data.std.push(s);
        data.per_seed.push(vals);
    }
    Ok(data)
}

pub fn write_plot_data<W: Write>(w: W, data: &PlotData) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(&data.columns)?;
    for (i, vals) in data.per_seed.iter().enumerate() {
        let mut row = vec![data.env_steps[i].to_string(), fmt_f64(data.mean[i]), fmt_f64(data.std[i])];
        row.extend(vals.iter().map(|&v| fmt_f64(v)));
        csv.write_record(row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_plot_data<R: Read>(r: R) -> Result<PlotData> {
    let mut csv = csv::Reader::from_reader(r);
    let columns: Vec<String> = csv.headers()?.iter().map(String::from).collect();
    if columns.len() < 4 || columns[..3] != ["env_steps", "mean", "std"] {
        return format_err("unexpected plot columns");
    }
    let mut data = PlotData { columns, env_steps: vec![], mean: vec![], std: vec![], per_seed: vec![] };
    for row in csv.records() {
        let row = row?;
        data.env_steps.push(row[0].parse().or_else(|_| format_err("bad env_steps"))?);
        data.mean.push(parse_f64(&row[1])?);
        data.std.push(parse_f64(&row[2])?);
        data.per_seed.push((3..row.len()).map(|i| parse_f64(&row[i])).collect::<Result<_>>()?);
    }
    Ok(data)
}

/// Writes the plot file for `metric` and returns its contents.
pub fn emit_plot_data(traces: &[RunTrace], metric: &str, path: &Path) -> Result<PlotData> {
    let data = plot_data(traces, metric)?;
    let mut buf = Vec::new();
    write_plot_data(&mut buf, &data)?;
    fs::write(path, buf)?;
    Ok(data)
}

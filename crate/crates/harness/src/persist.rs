//! Trace files: one JSON header line, then CSV iteration records.
//!
//! Record columns, in order: `k, env_steps, f, p, f_lambda, grad_norm_sq,
//! exact_grad_norm_sq, penalty_grad_err_sq, follower_gap, oracle_gap, metric,
//! wall_time`. Floats use the text form of [`crate::num`], so every file
//! reloads bit for bit.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use pbrl_core::pbrl::{EvalPoint, IterationRecord, RunTrace, TraceSummary};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Result};
use crate::experiments::RunStatus;
use crate::num::{floats, fmt_f64, nums, parse_f64, Num};

pub const TRACE_FORMAT: &str = "pbrl-trace v1";

pub const RECORD_COLUMNS: [&str; 12] = [
    "k",
    "env_steps",
    "f",
    "p",
    "f_lambda",
    "grad_norm_sq",
    "exact_grad_norm_sq",
    "penalty_grad_err_sq",
    "follower_gap",
    "oracle_gap",
    "metric",
    "wall_time",
];

/// Run context stored alongside a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub config_hash: String,
    pub status: RunStatus,
    /// Reference value for the run (start line or optimum), if the experiment has one.
    pub baseline: Option<Num>,
}

#[derive(Serialize, Deserialize)]
struct PointDoc {
    env_steps: u64,
    f: Num,
    p: Num,
    f_lambda: Num,
    follower_gap: Num,
    metric: Num,
}

#[derive(Serialize, Deserialize)]
struct SummaryDoc {
    avg_grad_norm_sq: Num,
    avg_exact_grad_norm_sq: Num,
    min_follower_gap: Num,
    final_follower_gap: Num,
    final_metric: Num,
    final_f: Num,
    oracle_error_term: Num,
    movement_term: Num,
    eps_needed: Num,
    descent_violations: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    algorithm: String,
    seed: u64,
    metric_name: String,
    env_steps_formula: String,
    meta: TraceMeta,
    n_records: usize,
    final_point: PointDoc,
    summary: SummaryDoc,
    final_x: Vec<Num>,
    final_y: Vec<Vec<Num>>,
}

fn header_of(t: &RunTrace, meta: &TraceMeta) -> Header {
    let p = &t.final_point;
    let s = &t.summary;
    Header {
        format: TRACE_FORMAT.to_string(),
        algorithm: t.algorithm.clone(),
        seed: t.seed,
        metric_name: t.metric_name.clone(),
        env_steps_formula: t.env_steps_formula.clone(),
        meta: meta.clone(),
        n_records: t.records.len(),
        final_point: PointDoc {
            env_steps: p.env_steps,
            f: Num(p.f),
            p: Num(p.p),
            f_lambda: Num(p.f_lambda),
            follower_gap: Num(p.follower_gap),
            metric: Num(p.metric),
        },
        summary: SummaryDoc {
            avg_grad_norm_sq: Num(s.avg_grad_norm_sq),
            avg_exact_grad_norm_sq: Num(s.avg_exact_grad_norm_sq),
            min_follower_gap: Num(s.min_follower_gap),
            final_follower_gap: Num(s.final_follower_gap),
            final_metric: Num(s.final_metric),
            final_f: Num(s.final_f),
            oracle_error_term: Num(s.oracle_error_term),
            movement_term: Num(s.movement_term),
            eps_needed: Num(s.eps_needed),
            descent_violations: s.descent_violations,
        },
        final_x: nums(&t.final_x),
        final_y: t.final_y.iter().map(|y| nums(y)).collect(),
    }
}

fn record_row(r: &IterationRecord) -> Vec<String> {
    let mut row = vec![r.k.to_string(), r.env_steps.to_string()];
    row.extend(
        [
            r.f,
            r.p,
            r.f_lambda,
            r.grad_norm_sq,
            r.exact_grad_norm_sq,
            r.penalty_grad_err_sq,
            r.follower_gap,
            r.oracle_gap,
            r.metric,
            r.wall_time,
        ]
        .iter()
        .map(|&v| fmt_f64(v)),
    );
    row
}

pub fn write_trace<W: Write>(mut w: W, trace: &RunTrace, meta: &TraceMeta) -> Result<()> {
    serde_json::to_writer(&mut w, &header_of(trace, meta))?;
    writeln!(w)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(RECORD_COLUMNS)?;
    for r in &trace.records {
        csv.write_record(record_row(r))?;
    }
    csv.flush()?;
    Ok(())
}

fn parse_int<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().or_else(|_| format_err(format!("bad integer {s:?}")))
}

pub fn read_trace<R: Read>(r: R) -> Result<(RunTrace, TraceMeta)> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let h: Header = serde_json::from_str(line.trim_end())?;
    if h.format != TRACE_FORMAT {
        return format_err(format!("unsupported trace format {:?}", h.format));
    }
    let mut csv = csv::Reader::from_reader(reader);
    if csv.headers()?.iter().ne(RECORD_COLUMNS.iter().copied()) {
        return format_err("unexpected record columns");
    }
    let mut records = Vec::with_capacity(h.n_records);
    for row in csv.records() {
        let row = row?;
        if row.len() != RECORD_COLUMNS.len() {
            return format_err("record row has the wrong number of fields");
        }
        let v: Vec<f64> = (2..12).map(|i| parse_f64(&row[i])).collect::<Result<_>>()?;
        records.push(IterationRecord {
            k: parse_int(&row[0])?,
            env_steps: parse_int(&row[1])?,
            f: v[0],
            p: v[1],
            f_lambda: v[2],
            grad_norm_sq: v[3],
            exact_grad_norm_sq: v[4],
            penalty_grad_err_sq: v[5],
            follower_gap: v[6],
            oracle_gap: v[7],
            metric: v[8],
            wall_time: v[9],
        });
    }
    if records.len() != h.n_records {
        return format_err(format!("header announces {} records, found {}", h.n_records, records.len()));
    }
    let p = h.final_point;
    let s = h.summary;
    let trace = RunTrace {
        algorithm: h.algorithm,
        seed: h.seed,
        metric_name: h.metric_name,
        env_steps_formula: h.env_steps_formula,
        records,
        final_point: EvalPoint {
            env_steps: p.env_steps,
            f: p.f.0,
            p: p.p.0,
            f_lambda: p.f_lambda.0,
            follower_gap: p.follower_gap.0,
            metric: p.metric.0,
        },
        summary: TraceSummary {
            avg_grad_norm_sq: s.avg_grad_norm_sq.0,
            avg_exact_grad_norm_sq: s.avg_exact_grad_norm_sq.0,
            min_follower_gap: s.min_follower_gap.0,
            final_follower_gap: s.final_follower_gap.0,
            final_metric: s.final_metric.0,
            final_f: s.final_f.0,
            oracle_error_term: s.oracle_error_term.0,
            movement_term: s.movement_term.0,
            eps_needed: s.eps_needed.0,
            descent_violations: s.descent_violations,
        },
        final_x: floats(&h.final_x),
        final_y: h.final_y.iter().map(|y| floats(y)).collect(),
    };
    Ok((trace, h.meta))
}

pub fn save_trace(path: &Path, trace: &RunTrace, meta: &TraceMeta) -> Result<()> {
    let mut buf = Vec::new();
    write_trace(&mut buf, trace, meta)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<(RunTrace, TraceMeta)> {
    read_trace(fs::File::open(path)?)
}

/// Bitwise equality of two traces, wall-clock timings included.
pub fn traces_identical(a: &RunTrace, b: &RunTrace) -> bool {
    let summary_bits = |s: &TraceSummary| {
        [
            s.avg_grad_norm_sq,
            s.avg_exact_grad_norm_sq,
            s.min_follower_gap,
            s.final_follower_gap,
            s.final_metric,
            s.final_f,
            s.oracle_error_term,
            s.movement_term,
            s.eps_needed,
        ]
        .map(f64::to_bits)
    };
    a.same_results(b)
        && a.env_steps_formula == b.env_steps_formula
        && a.records.iter().zip(&b.records).all(|(x, y)| x.wall_time.to_bits() == y.wall_time.to_bits())
        && summary_bits(&a.summary) == summary_bits(&b.summary)
        && a.summary.descent_violations == b.summary.descent_violations
}

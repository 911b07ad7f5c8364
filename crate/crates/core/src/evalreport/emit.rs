//! Report files.
//!
//! * `gen_matrix.csv`: one row per (method, edit duration, eval duration)
//!   cell plus one `baseline` row per eval duration.
//! * `box_stats.csv`: one row per (tau, method, layer, lr).
//! * `summary.json`: baseline drops, backward gains and gating counts.
//! * `ledger.jsonl`: one JSON object per run.
//! * `timings.csv`: wall seconds per ledger line. This is the only output
//!   that differs between repeated runs.
//!
//! CSV floats are written with 17 significant digits so that parsing them
//! back yields the in-memory values exactly. Missing values are empty.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::experiments::{DetectorStudy, GenMatrix, Ledger};
use super::ReportError;
use crate::editing::EditMethod;
use crate::search::Rejection;

pub const GEN_MATRIX_CSV: &str = "gen_matrix.csv";
pub const BOX_STATS_CSV: &str = "box_stats.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const LEDGER_JSONL: &str = "ledger.jsonl";
pub const TIMINGS_CSV: &str = "timings.csv";

pub const GEN_MATRIX_HEADER: [&str; 10] =
    ["method", "edit_duration", "eval_duration", "seeds", "mean", "min", "max", "layer", "lr", "absent_reason"];
pub const BOX_STATS_HEADER: [&str; 15] = [
    "tau", "method", "layer", "lr", "seeds", "gated_out", "diverged", "mean", "min", "q1", "median", "q3", "max",
    "whisker_lo", "whisker_hi",
];

/// Everything one report consists of.
#[derive(Debug, Clone, Copy)]
pub struct Report<'a> {
    pub base_val_accuracy: Option<f64>,
    pub matrix: Option<&'a GenMatrix>,
    pub detector: Option<&'a DetectorStudy>,
    pub ledger: &'a Ledger,
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| ReportError::Format(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| ReportError::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| ReportError::Format(e.to_string()))
}

pub fn gen_matrix_csv(m: Option<&GenMatrix>) -> Result<Vec<u8>, ReportError> {
    let mut rows = Vec::new();
    if let Some(m) = m {
        for (&d, &acc) in m.durations.iter().zip(&m.baseline) {
            let a = fmt_f64(acc);
            rows.push(vec!["baseline".into(), String::new(), d.to_string(), "1".into(), a.clone(), a.clone(), a, String::new(), String::new(), String::new()]);
        }
        for r in &m.rows {
            for c in &r.cells {
                let mmm = c.mean_min_max();
                rows.push(vec![
                    r.method.to_string(),
                    r.edit_duration.to_string(),
                    c.eval_duration.to_string(),
                    c.seeds().to_string(),
                    opt(mmm.map(|x| x.0)),
                    opt(mmm.map(|x| x.1)),
                    opt(mmm.map(|x| x.2)),
                    r.layer.map(|l| l.to_string()).unwrap_or_default(),
                    opt(r.lr),
                    r.absent.clone().unwrap_or_default(),
                ]);
            }
        }
    }
    csv_bytes(&GEN_MATRIX_HEADER, rows)
}

pub fn box_stats_csv(s: Option<&DetectorStudy>) -> Result<Vec<u8>, ReportError> {
    let mut rows = Vec::new();
    for e in s.map(|s| s.entries.as_slice()).unwrap_or_default() {
        let b = e.stats;
        rows.push(vec![
            fmt_f64(e.tau),
            e.method.to_string(),
            e.layer.to_string(),
            fmt_f64(e.lr),
            e.samples.len().to_string(),
            e.gated_out.to_string(),
            e.diverged.to_string(),
            opt(b.map(|b| b.mean)),
            opt(b.map(|b| b.min)),
            opt(b.map(|b| b.q1)),
            opt(b.map(|b| b.median)),
            opt(b.map(|b| b.q3)),
            opt(b.map(|b| b.max)),
            opt(b.map(|b| b.whisker_lo)),
            opt(b.map(|b| b.whisker_hi)),
        ]);
    }
    csv_bytes(&BOX_STATS_HEADER, rows)
}

#[derive(Debug, Serialize)]
struct BaselineCell {
    duration: u32,
    accuracy: f64,
}

#[derive(Debug, Serialize)]
struct RowSummary {
    method: EditMethod,
    edit_duration: u32,
    layer: Option<usize>,
    lr: Option<f64>,
    absent: Option<String>,
    seeds: usize,
    drops: Vec<f64>,
    mean_drop: Option<f64>,
    /// Mean gain over eval durations up to the edit duration, in points.
    backward_gain: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AgingSummary {
    tau: f64,
    baseline: Vec<BaselineCell>,
    rows: Vec<RowSummary>,
}

#[derive(Debug, Serialize)]
struct DetectorCount {
    tau: f64,
    method: EditMethod,
    accepted: usize,
    gated_out: usize,
    diverged: usize,
}

#[derive(Debug, Serialize)]
struct DetectorSummary {
    baseline: f64,
    counts: Vec<DetectorCount>,
}

#[derive(Debug, Default, Serialize)]
struct GateCount {
    task: String,
    method: String,
    runs: usize,
    accepted: usize,
    rejected_threshold: usize,
    diverged: usize,
}

#[derive(Debug, Serialize)]
struct Summary {
    base_val_accuracy: Option<f64>,
    aging: Option<AgingSummary>,
    detector: Option<DetectorSummary>,
    gating: Vec<GateCount>,
}

pub fn summary_json(r: &Report) -> Result<Vec<u8>, ReportError> {
    let aging = r.matrix.map(|m| AgingSummary {
        tau: m.tau,
        baseline: m.durations.iter().zip(&m.baseline).map(|(&duration, &accuracy)| BaselineCell { duration, accuracy }).collect(),
        rows: m
            .rows
            .iter()
            .map(|row| RowSummary {
                method: row.method,
                edit_duration: row.edit_duration,
                layer: row.layer,
                lr: row.lr,
                absent: row.absent.clone(),
                seeds: row.drops.len(),
                drops: row.drops.clone(),
                mean_drop: (!row.drops.is_empty()).then(|| row.drops.iter().sum::<f64>() / row.drops.len() as f64),
                backward_gain: m.backward_gain(row.method, row.edit_duration),
            })
            .collect(),
    });
    let detector = r.detector.map(|s| {
        let mut counts: Vec<DetectorCount> = Vec::new();
        for e in &s.entries {
            match counts.iter_mut().find(|c| c.tau == e.tau && c.method == e.method) {
                Some(c) => {
                    c.accepted += e.samples.len();
                    c.gated_out += e.gated_out;
                    c.diverged += e.diverged;
                }
                None => counts.push(DetectorCount {
                    tau: e.tau,
                    method: e.method,
                    accepted: e.samples.len(),
                    gated_out: e.gated_out,
                    diverged: e.diverged,
                }),
            }
        }
        DetectorSummary { baseline: s.baseline, counts }
    });
    let mut gating: BTreeMap<(String, String), GateCount> = BTreeMap::new();
    for rec in &r.ledger.records {
        let method = rec.plan.method.to_string();
        let g = gating.entry((rec.task.clone(), method.clone())).or_insert_with(|| GateCount {
            task: rec.task.clone(),
            method,
            ..GateCount::default()
        });
        g.runs += 1;
        match rec.rejection {
            None => g.accepted += 1,
            Some(Rejection::Threshold) => g.rejected_threshold += 1,
            Some(Rejection::Divergence) => g.diverged += 1,
        }
    }
    let s = Summary { base_val_accuracy: r.base_val_accuracy, aging, detector, gating: gating.into_values().collect() };
    let mut out = serde_json::to_vec_pretty(&s).map_err(|e| ReportError::Format(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn ledger_jsonl(l: &Ledger) -> Result<Vec<u8>, ReportError> {
    let mut out = Vec::new();
    for r in &l.records {
        serde_json::to_writer(&mut out, r).map_err(|e| ReportError::Format(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn timings_csv(l: &Ledger) -> Result<Vec<u8>, ReportError> {
    let rows = l.seconds.iter().enumerate().map(|(i, s)| vec![i.to_string(), fmt_f64(*s)]).collect();
    csv_bytes(&["ledger_line", "wall_seconds"], rows)
}

/// Writes `files` into `dir`. Every file is first written to a temporary
/// sibling; the renames happen only after all writes succeeded, so a
/// failure leaves no partial output behind.
pub fn write_atomically(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path, e: std::io::Error| ReportError::Io { path: path.display().to_string(), source: e };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut staged = Vec::new();
    let cleanup = |staged: &[(PathBuf, PathBuf)]| {
        for (tmp, _) in staged {
            let _ = std::fs::remove_file(tmp);
        }
    };
    for (name, bytes) in files {
        let fin = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        if let Err(e) = std::fs::write(&tmp, bytes) {
            cleanup(&staged);
            let _ = std::fs::remove_file(&tmp);
            return Err(io(&tmp, e));
        }
        staged.push((tmp, fin));
    }
    for (tmp, fin) in &staged {
        std::fs::rename(tmp, fin).map_err(|e| io(fin, e))?;
    }
    Ok(staged.into_iter().map(|(_, f)| f).collect())
}

/// Writes the five report files into `out_dir`.
pub fn emit_reports(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    write_atomically(
        out_dir,
        &[
            (GEN_MATRIX_CSV, gen_matrix_csv(report.matrix)?),
            (BOX_STATS_CSV, box_stats_csv(report.detector)?),
            (SUMMARY_JSON, summary_json(report)?),
            (LEDGER_JSONL, ledger_jsonl(report.ledger)?),
            (TIMINGS_CSV, timings_csv(report.ledger)?),
        ],
    )
}

//! The aging cross-generalization matrix and the detector seed study.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{mean_min_max, BoxStats};
use super::ReportError;
use crate::editing::{EditMethod, EditPlan, EditTask};
use crate::network::{evaluate, Checkpoint, Network};
use crate::search::{record_of, search, Phase, RunRecord, SearchConfig};
use crate::shiftbench::{Dataset, SplitTag};

/// Accuracy on a held-out half. Anything but an edit-test set is refused,
/// so reported numbers can never come from data an edit was fitted on.
pub fn heldout_accuracy(net: &Network, d: &Dataset) -> Result<f64, ReportError> {
    if d.split() != SplitTag::EditTest {
        return Err(ReportError::Leakage(format!("evaluation set is tagged {:?}, expected edit_test", d.split())));
    }
    Ok(evaluate(net, d)?)
}

/// Edit and held-out halves of each aging duration.
#[derive(Debug, Clone)]
pub struct AgingBench {
    pub durations: Vec<u32>,
    pub train: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

/// Seed statistics of one matrix cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub eval_duration: u32,
    /// Held-out accuracy of each accepted seed of the winning configuration.
    pub samples: Vec<f64>,
}

impl Cell {
    pub fn seeds(&self) -> usize {
        self.samples.len()
    }

    pub fn mean_min_max(&self) -> Option<(f64, f64, f64)> {
        mean_min_max(&self.samples)
    }
}

/// One method edited on one duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub method: EditMethod,
    pub edit_duration: u32,
    /// Winning layer and learning rate; `None` for an absent row.
    pub layer: Option<usize>,
    pub lr: Option<f64>,
    /// Why the row is absent.
    pub absent: Option<String>,
    /// Original-validation drop of each accepted seed, in percentage points.
    pub drops: Vec<f64>,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMatrix {
    pub tau: f64,
    pub durations: Vec<u32>,
    /// Unedited accuracy on each duration's held-out half.
    pub baseline: Vec<f64>,
    pub rows: Vec<MatrixRow>,
}

impl GenMatrix {
    pub fn row(&self, method: EditMethod, edit_duration: u32) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.method == method && r.edit_duration == edit_duration)
    }

    /// Mean over eval durations `D' <= D` of the row's cell means minus the
    /// baseline mean over the same cells, in percentage points. `None` for
    /// an absent row.
    pub fn backward_gain(&self, method: EditMethod, edit_duration: u32) -> Option<f64> {
        let row = self.row(method, edit_duration)?;
        let mut edited = Vec::new();
        let mut base = Vec::new();
        for (cell, b) in row.cells.iter().zip(&self.baseline) {
            if cell.eval_duration <= edit_duration {
                edited.push(cell.mean_min_max()?.0);
                base.push(*b);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Some(100.0 * (mean(&edited) - mean(&base)))
    }

    /// Number of cells including the baseline row.
    pub fn cell_count(&self) -> usize {
        self.rows.iter().map(|r| r.cells.len()).sum::<usize>() + self.baseline.len()
    }
}

/// Ledger plus wall times, aligned.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    pub records: Vec<RunRecord>,
    pub seconds: Vec<f64>,
}

impl Ledger {
    pub fn extend(&mut self, records: Vec<RunRecord>, seconds: Vec<f64>) {
        debug_assert_eq!(records.len(), seconds.len());
        self.records.extend(records);
        self.seconds.extend(seconds);
    }
}

/// Searches every method on every duration and evaluates each winner on
/// every duration's held-out half. `progress` receives one line per search.
pub fn build_gen_matrix(
    base: &Checkpoint,
    original_val: &Dataset,
    bench: &AgingBench,
    methods: &[EditMethod],
    cfg: &SearchConfig,
    progress: &mut dyn FnMut(String),
) -> Result<(GenMatrix, Ledger), ReportError> {
    let baseline = bench.test.iter().map(|d| heldout_accuracy(&base.network, d)).collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    let mut ledger = Ledger::default();
    for &method in methods {
        for (train, &d) in bench.train.iter().zip(&bench.durations) {
            let t0 = Instant::now();
            let task = EditTask::new(base, train, original_val)?;
            let (result, timings) = search(&task, method, cfg, &format!("aging:{d}"))?;
            let runs = result.ledger.len();
            let accepted = result.ledger.iter().filter(|r| r.accepted).count();
            ledger.extend(result.ledger.clone(), timings);
            let row = match &result.best {
                Some(best) => {
                    let winners: Vec<&Checkpoint> = best.accepted().filter_map(|t| t.checkpoint.as_ref()).collect();
                    let cells = bench
                        .durations
                        .iter()
                        .zip(&bench.test)
                        .map(|(&e, test)| {
                            let samples = winners
                                .iter()
                                .map(|ck| heldout_accuracy(&ck.network, test))
                                .collect::<Result<Vec<_>, _>>()?;
                            Ok(Cell { eval_duration: e, samples })
                        })
                        .collect::<Result<Vec<_>, ReportError>>()?;
                    MatrixRow {
                        method,
                        edit_duration: d,
                        layer: Some(best.layer),
                        lr: Some(best.lr),
                        absent: None,
                        drops: best.accepted().filter_map(|t| t.record.baseline_drop).collect(),
                        cells,
                    }
                }
                None => MatrixRow {
                    method,
                    edit_duration: d,
                    layer: None,
                    lr: None,
                    absent: result.absent_reason(),
                    drops: Vec::new(),
                    cells: bench.durations.iter().map(|&e| Cell { eval_duration: e, samples: Vec::new() }).collect(),
                },
            };
            progress(format!(
                "{method} D={d}: {runs} runs, {accepted} accepted, winner {} ({:.1}s)",
                match (row.layer, row.lr) {
                    (Some(l), Some(lr)) => format!("layer {l} lr {lr}"),
                    _ => "none".into(),
                },
                t0.elapsed().as_secs_f64()
            ));
            rows.push(row);
        }
    }
    Ok((GenMatrix { tau: cfg.tau, durations: bench.durations.clone(), baseline, rows }, ledger))
}

/// Held-out accuracy distribution of one `(method, layer, lr)` over seeds
/// after gating at `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub tau: f64,
    pub method: EditMethod,
    pub layer: usize,
    pub lr: f64,
    pub samples: Vec<f64>,
    /// Seeds rejected by the gate.
    pub gated_out: usize,
    /// Seeds that diverged.
    pub diverged: usize,
    pub stats: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorStudy {
    /// Unedited accuracy on the shifted held-out half.
    pub baseline: f64,
    pub taus: Vec<f64>,
    pub entries: Vec<SeedStats>,
}

impl DetectorStudy {
    /// All accepted samples of `method` at `tau`, over every configuration.
    pub fn pooled(&self, method: EditMethod, tau: f64) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.method == method && e.tau == tau)
            .flat_map(|e| e.samples.iter().copied())
            .collect()
    }
}

/// Runs every method over every candidate layer, coarse learning rate and
/// seed on the detector edit half, then gates the same runs at each `tau`.
/// Ledger records carry the strictest `tau`.
pub fn detector_boxstats(
    base: &Checkpoint,
    original_val: &Dataset,
    train: &Dataset,
    test: &Dataset,
    methods: &[EditMethod],
    cfg: &SearchConfig,
    taus: &[f64],
) -> Result<(DetectorStudy, Ledger), ReportError> {
    cfg.validate()?;
    if taus.is_empty() {
        return Err(ReportError::Usage("no gating thresholds given".into()));
    }
    let mut taus = taus.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let strict = taus[0];
    heldout_accuracy(&base.network, test)?;
    let task = EditTask::new(base, train, original_val)?.with_heldout(test)?;
    let base_val = base.provenance.base_val_accuracy;
    let arch = base.network.architecture();

    let mut configs: Vec<(EditMethod, usize, f64)> = Vec::new();
    for &m in methods {
        let layers = match m {
            EditMethod::Full => vec![arch.weighted_layers()[0]],
            _ if cfg.layers.is_empty() => arch.weighted_layers(),
            _ => cfg.layers.clone(),
        };
        for l in layers {
            configs.extend(cfg.coarse_lrs.iter().map(|&lr| (m, l, lr)));
        }
    }
    let plans: Vec<EditPlan> = configs
        .iter()
        .flat_map(|&(method, layer, lr)| {
            let n = if method.is_seeded() { cfg.seeds } else { 1 };
            (0..n).map(move |i| EditPlan { method, layer, rank: cfg.rank, lr, steps: cfg.steps, seed: cfg.plan_seed(i) })
        })
        .collect();
    // (record, held-out accuracy, wall seconds)
    let runs: Vec<(RunRecord, Option<f64>, f64)> = plans
        .par_iter()
        .map(|p| {
            let t0 = Instant::now();
            let outcome = task.run(p);
            let secs = t0.elapsed().as_secs_f64();
            let record = record_of("detector", Phase::Coarse, p, strict, base_val, &outcome)?;
            Ok((record, outcome.ok().and_then(|o| o.heldout_accuracy), secs))
        })
        .collect::<Result<_, ReportError>>()?;
    let mut by_config: HashMap<(EditMethod, usize, u64), Vec<&(RunRecord, Option<f64>, f64)>> = HashMap::new();
    for r in &runs {
        by_config.entry((r.0.plan.method, r.0.plan.layer, r.0.plan.lr.to_bits())).or_default().push(r);
    }

    let mut ledger = Ledger::default();
    let mut entries = Vec::new();
    for &(method, layer, lr) in &configs {
        let executed = &by_config[&(method, layer, lr.to_bits())];
        // unseeded methods ran once; the outcome stands for every seed
        let per_seed: Vec<(RunRecord, Option<f64>, f64)> = (0..cfg.seeds)
            .map(|i| {
                let (rec, acc, secs) = executed[if method.is_seeded() { i } else { 0 }];
                let mut rec = rec.clone();
                rec.plan.seed = cfg.plan_seed(i);
                rec.reused = !method.is_seeded() && i > 0;
                let secs = if rec.reused { 0.0 } else { *secs };
                (rec, *acc, secs)
            })
            .collect();
        for &tau in &taus {
            let mut samples = Vec::new();
            let (mut gated_out, mut diverged) = (0, 0);
            for (rec, acc, _) in &per_seed {
                match (rec.baseline_drop, acc) {
                    (Some(drop), Some(acc)) if drop <= tau => samples.push(*acc),
                    (Some(_), _) => gated_out += 1,
                    (None, _) => diverged += 1,
                }
            }
            let stats = BoxStats::of(&samples);
            entries.push(SeedStats { tau, method, layer, lr, samples, gated_out, diverged, stats });
        }
        let (recs, secs): (Vec<_>, Vec<_>) = per_seed.into_iter().map(|(r, _, s)| (r, s)).unzip();
        ledger.extend(recs, secs);
    }
    entries.sort_by(|a, b| {
        a.tau.total_cmp(&b.tau).then(a.method.cmp(&b.method)).then(a.layer.cmp(&b.layer)).then(a.lr.total_cmp(&b.lr))
    });
    let baseline = heldout_accuracy(&base.network, test)?;
    Ok((DetectorStudy { baseline, taus, entries }, ledger))
}

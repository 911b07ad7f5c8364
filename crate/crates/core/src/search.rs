//! Gated coarse-to-fine search over layers and learning rates.
//!
//! Every run is gated on the drop it causes on the original validation
//! set: a run whose drop exceeds `tau` percentage points is rejected. The
//! coarse phase sweeps every candidate layer over a geometric learning-rate
//! grid; the fine phase sweeps a narrower grid around the winners of the two
//! best layers. Each configuration is repeated over several seeds and
//! ranked by the mean selection accuracy of its accepted seeds.
//!
//! Selection accuracy is measured on the edit set the update is learned
//! from. The held-out half never enters this module.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::editing::{EditError, EditMethod, EditOutcome, EditPlan, EditTask};
use crate::network::Checkpoint;
use crate::shiftbench::derive_seed;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error("edit run {plan} failed: {message}")]
    Run { plan: String, message: String },
}

pub type Result<T> = std::result::Result<T, SearchError>;

/// Accepts an outcome iff its drop on the original validation set is at
/// most `tau` percentage points. Gains always pass.
pub fn gate(outcome: &EditOutcome, tau: f64) -> bool {
    outcome.baseline_drop <= tau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Geometric coarse grid, ascending.
    #[serde(default = "default_coarse_lrs")]
    pub coarse_lrs: Vec<f64>,
    /// Multipliers applied to a coarse winner's learning rate, ascending
    /// and containing 1.
    #[serde(default = "default_fine_factors")]
    pub fine_factors: Vec<f64>,
    /// Candidate layers; empty means every weighted layer.
    #[serde(default)]
    pub layers: Vec<usize>,
    /// Largest accepted drop on the original validation set, in percentage points.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Root of the per-repeat plan seeds.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
}

fn default_coarse_lrs() -> Vec<f64> {
    (0..7).map(|k| 0.03 * 10f64.powf(k as f64 / 2.0)).collect()
}

fn default_fine_factors() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0]
}

fn default_tau() -> f64 {
    1.5
}

fn default_seeds() -> usize {
    5
}

fn default_steps() -> usize {
    EditPlan::new(EditMethod::Surgical, 0, 1.0, 0).steps
}

fn default_rank() -> usize {
    EditPlan::new(EditMethod::LowRank, 0, 1.0, 0).rank
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            coarse_lrs: default_coarse_lrs(),
            fine_factors: default_fine_factors(),
            layers: Vec::new(),
            tau: default_tau(),
            seeds: default_seeds(),
            seed: 0,
            steps: default_steps(),
            rank: default_rank(),
        }
    }
}

fn ascending_positive(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(SearchError::Config(format!("{name} is empty")));
    }
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(SearchError::Config(format!("{name} must hold positive finite values, got {v:?}")));
    }
    if v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SearchError::Config(format!("{name} must be strictly ascending, got {v:?}")));
    }
    Ok(())
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(SearchError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.seeds == 0 {
            return Err(SearchError::Config("seeds must be at least 1".into()));
        }
        if self.rank == 0 {
            return Err(SearchError::Config("rank must be at least 1".into()));
        }
        ascending_positive("coarse_lrs", &self.coarse_lrs)?;
        ascending_positive("fine_factors", &self.fine_factors)?;
        if !self.fine_factors.contains(&1.0) {
            return Err(SearchError::Config("fine_factors must contain 1".into()));
        }
        Ok(())
    }

    /// Plan seed of repeat `i`.
    pub fn plan_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, i as u64)
    }

    fn candidate_layers(&self, method: EditMethod, ck: &Checkpoint) -> Vec<usize> {
        let arch = ck.network.architecture();
        match method {
            // the layer index is meaningless for full finetuning
            EditMethod::Full => vec![arch.weighted_layers().first().copied().unwrap_or(0)],
            _ if self.layers.is_empty() => arch.weighted_layers(),
            _ => self.layers.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    Threshold,
    Divergence,
}

/// One ledger entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Caller-chosen label of the edit task, e.g. the aging duration.
    pub task: String,
    pub phase: Phase,
    pub plan: EditPlan,
    pub tau: f64,
    pub accepted: bool,
    pub rejection: Option<Rejection>,
    /// Accuracy on the selection split; `None` after divergence.
    pub selection_accuracy: Option<f64>,
    pub base_val_accuracy: f64,
    pub original_val_accuracy: Option<f64>,
    /// Percentage points lost on the original validation set.
    pub baseline_drop: Option<f64>,
    pub final_loss: Option<f64>,
    /// Step at which the run diverged.
    pub diverged_at: Option<usize>,
    /// True when the outcome was copied from an identical unseeded run.
    pub reused: bool,
}

/// A record plus, for accepted runs, the edited checkpoint.
#[derive(Debug, Clone)]
pub struct Trial {
    pub record: RunRecord,
    pub checkpoint: Option<Checkpoint>,
}

/// All seeds of one `(layer, lr)` configuration.
#[derive(Debug, Clone)]
pub struct ConfigResult {
    pub method: EditMethod,
    pub layer: usize,
    pub lr: f64,
    pub trials: Vec<Trial>,
}

impl ConfigResult {
    pub fn accepted(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.record.accepted)
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted().count()
    }

    fn mean_of(&self, f: impl Fn(&RunRecord) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.accepted().filter_map(|t| f(&t.record)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean selection accuracy over accepted seeds.
    pub fn mean_selection(&self) -> Option<f64> {
        self.mean_of(|r| r.selection_accuracy)
    }

    /// Mean drop over accepted seeds.
    pub fn mean_drop(&self) -> Option<f64> {
        self.mean_of(|r| r.baseline_drop)
    }

    /// Total order on viable configurations: higher mean selection accuracy,
    /// then smaller drop, then lower lr, then lower layer. `Less` is better.
    pub fn rank_cmp(&self, other: &ConfigResult) -> Ordering {
        let key = |c: &ConfigResult| (c.mean_selection().unwrap_or(f64::NEG_INFINITY), c.mean_drop().unwrap_or(f64::INFINITY));
        let (sa, da) = key(self);
        let (sb, db) = key(other);
        sb.total_cmp(&sa)
            .then(da.total_cmp(&db))
            .then(self.lr.total_cmp(&other.lr))
            .then(self.layer.cmp(&other.layer))
    }
}

/// Coarse phase result for one method.
#[derive(Debug, Clone)]
pub struct CoarseResult {
    pub method: EditMethod,
    pub configs: Vec<ConfigResult>,
}

impl CoarseResult {
    /// Best viable configuration per candidate layer; `None` marks a layer
    /// whose every run was rejected.
    pub fn per_layer(&self) -> Vec<(usize, Option<&ConfigResult>)> {
        let mut layers: Vec<usize> = self.configs.iter().map(|c| c.layer).collect();
        layers.dedup();
        layers
            .into_iter()
            .map(|l| {
                let best = self
                    .configs
                    .iter()
                    .filter(|c| c.layer == l && c.accepted_count() > 0)
                    .min_by(|a, b| a.rank_cmp(b));
                (l, best)
            })
            .collect()
    }

    pub fn accepted_runs(&self) -> usize {
        self.configs.iter().map(ConfigResult::accepted_count).sum()
    }
}

/// Outcome of a whole search for one method.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub method: EditMethod,
    pub coarse: CoarseResult,
    /// Fine-phase configurations, including the reused coarse incumbents.
    pub fine: Vec<ConfigResult>,
    /// The winning configuration, or `None` when no configuration was viable.
    pub best: Option<ConfigResult>,
    /// Every executed run, in execution order.
    pub ledger: Vec<RunRecord>,
}

impl SearchResult {
    /// Why there is no winner, when there is none.
    pub fn absent_reason(&self) -> Option<String> {
        self.best.is_none().then(|| {
            format!(
                "no viable configuration: all {} coarse runs rejected at tau = {}",
                self.coarse.configs.iter().map(|c| c.trials.len()).sum::<usize>(),
                self.coarse.configs.first().and_then(|c| c.trials.first()).map_or(f64::NAN, |t| t.record.tau)
            )
        })
    }
}

/// Ledger entry for one finished run. Divergence is a rejection; any
/// other error is passed through.
pub(crate) fn record_of(
    label: &str,
    phase: Phase,
    plan: &EditPlan,
    tau: f64,
    base_val_accuracy: f64,
    outcome: &std::result::Result<EditOutcome, EditError>,
) -> Result<RunRecord> {
    let mut record = RunRecord {
        task: label.to_string(),
        phase,
        plan: *plan,
        tau,
        accepted: false,
        rejection: None,
        selection_accuracy: None,
        base_val_accuracy,
        original_val_accuracy: None,
        baseline_drop: None,
        final_loss: None,
        diverged_at: None,
        reused: false,
    };
    match outcome {
        Ok(o) => {
            let accepted = gate(o, tau);
            record.accepted = accepted;
            record.rejection = (!accepted).then_some(Rejection::Threshold);
            record.selection_accuracy = Some(o.train_accuracy);
            record.original_val_accuracy = Some(o.original_val_accuracy);
            record.baseline_drop = Some(o.baseline_drop);
            record.final_loss = o.losses.last().copied();
        }
        Err(EditError::Diverged { step }) => {
            record.rejection = Some(Rejection::Divergence);
            record.diverged_at = Some(*step);
        }
        Err(e) => return Err(SearchError::Run { plan: format!("{plan:?}"), message: e.to_string() }),
    }
    Ok(record)
}

/// Runs configurations against one edit task. Unseeded methods give the
/// same outcome for every seed, so they are trained once per configuration
/// and the outcome is copied to the remaining seeds.
struct Runner<'t, 'a> {
    task: &'t EditTask<'a>,
    cfg: &'t SearchConfig,
    label: &'t str,
}

impl Runner<'_, '_> {
    fn plans(&self, method: EditMethod, layer: usize, lr: f64) -> Vec<EditPlan> {
        let n = if method.is_seeded() { self.cfg.seeds } else { 1 };
        (0..n)
            .map(|i| EditPlan { method, layer, rank: self.cfg.rank, lr, steps: self.cfg.steps, seed: self.cfg.plan_seed(i) })
            .collect()
    }

    fn trial(&self, plan: &EditPlan, phase: Phase) -> Result<(Trial, f64)> {
        let t0 = Instant::now();
        let outcome = self.task.run(plan);
        let secs = t0.elapsed().as_secs_f64();
        let base_val_accuracy = self.task.base().provenance.base_val_accuracy;
        let record = record_of(self.label, phase, plan, self.cfg.tau, base_val_accuracy, &outcome)?;
        let checkpoint = match outcome {
            Ok(o) if record.accepted => Some(o.checkpoint),
            _ => None,
        };
        Ok((Trial { record, checkpoint }, secs))
    }

    /// Runs every `(layer, lr)` pair, seeds innermost, in parallel.
    fn run_grid(&self, method: EditMethod, grid: &[(usize, f64)], phase: Phase) -> Result<Vec<(ConfigResult, Vec<f64>)>> {
        let plans: Vec<EditPlan> = grid.iter().flat_map(|&(l, lr)| self.plans(method, l, lr)).collect();
        let done: Vec<(Trial, f64)> = plans.par_iter().map(|p| self.trial(p, phase)).collect::<Result<_>>()?;
        let mut it = done.into_iter();
        let mut out = Vec::with_capacity(grid.len());
        for &(layer, lr) in grid {
            let executed: Vec<(Trial, f64)> = it.by_ref().take(self.plans(method, layer, lr).len()).collect();
            let mut trials = Vec::with_capacity(self.cfg.seeds);
            let mut times = Vec::with_capacity(self.cfg.seeds);
            if method.is_seeded() {
                for (t, s) in executed {
                    trials.push(t);
                    times.push(s);
                }
            } else {
                let (first, secs) = executed.into_iter().next().expect("one run per unseeded configuration");
                for i in 0..self.cfg.seeds {
                    let mut t = first.clone();
                    t.record.plan.seed = self.cfg.plan_seed(i);
                    t.record.reused = i > 0;
                    trials.push(t);
                    times.push(if i == 0 { secs } else { 0.0 });
                }
            }
            out.push((ConfigResult { method, layer, lr, trials }, times));
        }
        Ok(out)
    }
}

/// Wall-clock seconds per ledger entry, aligned with [`SearchResult::ledger`].
/// Kept apart from the ledger so that the ledger is reproducible.
pub type Timings = Vec<f64>;

/// Sweeps every candidate layer over the coarse grid and every seed.
pub fn coarse_search(task: &EditTask, method: EditMethod, cfg: &SearchConfig, label: &str) -> Result<(CoarseResult, Timings)> {
    cfg.validate()?;
    let runner = Runner { task, cfg, label };
    let grid: Vec<(usize, f64)> = cfg
        .candidate_layers(method, task.base())
        .into_iter()
        .flat_map(|l| cfg.coarse_lrs.iter().map(move |&lr| (l, lr)))
        .collect();
    let (configs, times): (Vec<_>, Vec<_>) = runner.run_grid(method, &grid, Phase::Coarse)?.into_iter().unzip();
    Ok((CoarseResult { method, configs }, times.concat()))
}

/// Fine phase result for one method.
#[derive(Debug, Clone)]
pub struct FineResult {
    /// Fine-phase configurations, including the reused coarse incumbents,
    /// sorted by layer then lr.
    pub configs: Vec<ConfigResult>,
    pub best: Option<ConfigResult>,
    /// Records of the runs executed in this phase, in execution order.
    pub ledger: Vec<RunRecord>,
    pub timings: Timings,
}

/// Sweeps the fine grid around the winners of the two best coarse layers.
/// Coarse incumbents are reused rather than rerun. When every coarse run
/// was rejected nothing runs and there is no winner.
pub fn fine_search(task: &EditTask, coarse: &CoarseResult, cfg: &SearchConfig, label: &str) -> Result<FineResult> {
    cfg.validate()?;
    let mut winners: Vec<&ConfigResult> = coarse.per_layer().into_iter().filter_map(|(_, b)| b).collect();
    winners.sort_by(|a, b| a.rank_cmp(b));
    winners.truncate(2);
    let known: HashMap<(usize, u64), &ConfigResult> =
        coarse.configs.iter().map(|c| ((c.layer, c.lr.to_bits()), c)).collect();
    let mut grid = Vec::new();
    for w in &winners {
        for f in &cfg.fine_factors {
            let lr = w.lr * f;
            if !known.contains_key(&(w.layer, lr.to_bits())) && !grid.contains(&(w.layer, lr)) {
                grid.push((w.layer, lr));
            }
        }
    }
    let runner = Runner { task, cfg, label };
    let (mut configs, times): (Vec<_>, Vec<_>) = runner.run_grid(coarse.method, &grid, Phase::Fine)?.into_iter().unzip();
    let ledger = configs.iter().flat_map(|c| c.trials.iter().map(|t| t.record.clone())).collect();
    for w in &winners {
        for f in &cfg.fine_factors {
            if let Some(c) = known.get(&(w.layer, (w.lr * f).to_bits())) {
                configs.push((*c).clone());
            }
        }
    }
    configs.sort_by(|a, b| a.layer.cmp(&b.layer).then(a.lr.total_cmp(&b.lr)));
    let best = configs.iter().filter(|c| c.accepted_count() > 0).min_by(|a, b| a.rank_cmp(b)).cloned();
    Ok(FineResult { configs, best, ledger, timings: times.concat() })
}

/// Coarse then fine search for one method.
pub fn search(task: &EditTask, method: EditMethod, cfg: &SearchConfig, label: &str) -> Result<(SearchResult, Timings)> {
    let (coarse, mut timings) = coarse_search(task, method, cfg, label)?;
    let fine = fine_search(task, &coarse, cfg, label)?;
    let mut ledger: Vec<RunRecord> =
        coarse.configs.iter().flat_map(|c| c.trials.iter().map(|t| t.record.clone())).collect();
    ledger.extend(fine.ledger);
    timings.extend(fine.timings);
    Ok((SearchResult { method, coarse, fine: fine.configs, best: fine.best, ledger }, timings))
}

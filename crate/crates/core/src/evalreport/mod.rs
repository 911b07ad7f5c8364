//! Cross-generalization matrices, seed statistics, report files and the
//! end-to-end pipeline driven by a [`RunManifest`].

mod emit;
mod experiments;
mod manifest;
mod stats;

pub use emit::{
    box_stats_csv, emit_reports, fmt_f64, gen_matrix_csv, ledger_jsonl, summary_json, write_atomically, Report,
    BOX_STATS_CSV, BOX_STATS_HEADER, GEN_MATRIX_CSV, GEN_MATRIX_HEADER, LEDGER_JSONL, SUMMARY_JSON, TIMINGS_CSV,
};
pub use experiments::{
    build_gen_matrix, detector_boxstats, heldout_accuracy, AgingBench, Cell, DetectorStudy, GenMatrix, Ledger,
    MatrixRow, SeedStats,
};
pub use manifest::{DataConfig, EditSection, EditSource, ExperimentSection, RunManifest, TrainSection};
pub use stats::{mean_min_max, quantile, BoxStats};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::editing::{EditError, EditMethod, EditOutcome, EditTask};
use crate::network::{train_base, Architecture, Checkpoint, CheckpointError, NetworkError};
use crate::search::{search, RunRecord, SearchError, SearchResult};
use crate::shiftbench::{
    apply_detector, derive_seed, gen_base, gen_set, split_5050, BaseSplit, Dataset, DatasetError, SplitTag,
    AGING_DURATIONS, AGING_SIZES,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{0}")]
    Usage(String),
    #[error("evaluation leakage: {0}")]
    Leakage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

impl ReportError {
    /// Whether the error stems from bad user input rather than a failure
    /// while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ReportError::Manifest(_)
                | ReportError::Usage(_)
                | ReportError::Dataset(DatasetError::Usage(_))
                | ReportError::Network(NetworkError::Usage(_))
                | ReportError::Edit(EditError::Usage(_))
                | ReportError::Search(SearchError::Config(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, ReportError>;

const BASE_CKPT: &str = "base.ckpt";
const AGING_JSON: &str = "aging.json";
const DETECTOR_JSON: &str = "detector.json";
const AGING_TIMINGS: &str = "aging.timings.json";
const DETECTOR_TIMINGS: &str = "detector.timings.json";

/// Stored result of one experiment, reread by the `report` step.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stage<T> {
    result: T,
    records: Vec<RunRecord>,
}

/// Datasets and artifacts of one manifest, rooted at an output directory.
pub struct Pipeline {
    pub manifest: RunManifest,
    pub out: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.display().to_string(), source }
}

fn aging_index(d: u32) -> usize {
    AGING_DURATIONS.iter().position(|&x| x == d).expect("durations are validated against the supported set")
}

impl Pipeline {
    pub fn new(manifest: RunManifest, out: PathBuf) -> Result<Self> {
        manifest.validate()?;
        Ok(Pipeline { manifest, out })
    }

    pub fn base_split(&self) -> Result<BaseSplit> {
        let d = &self.manifest.data;
        Ok(gen_base(d.classes, d.base_size, self.manifest.seed)?)
    }

    /// Shifted whole set of duration `d`, before splitting.
    pub fn aging_set(&self, d: u32) -> Result<Dataset> {
        let m = &self.manifest;
        let whole = gen_set(m.data.classes, AGING_SIZES[aging_index(d)], derive_seed(m.seed, 0x100 + u64::from(d)), SplitTag::Whole)?;
        Ok(m.aging_model().apply(&whole, d, m.data.confounded, derive_seed(m.seed, 0x200 + u64::from(d)))?)
    }

    pub fn aging_bench(&self) -> Result<AgingBench> {
        let durations = self.manifest.experiment.durations.clone();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &d in &durations {
            let (a, b) = split_5050(&self.aging_set(d)?, derive_seed(self.manifest.seed, 0x300 + u64::from(d)))?;
            train.push(a);
            test.push(b);
        }
        Ok(AgingBench { durations, train, test })
    }

    /// Shifted detector set, before splitting.
    pub fn detector_set(&self) -> Result<Dataset> {
        let m = &self.manifest;
        let whole = gen_set(m.data.classes, m.data.detector_size, derive_seed(m.seed, 0x400), SplitTag::Whole)?;
        Ok(apply_detector(&whole, &m.detector)?)
    }

    pub fn detector_halves(&self) -> Result<(Dataset, Dataset)> {
        Ok(split_5050(&self.detector_set()?, derive_seed(self.manifest.seed, 0x401))?)
    }

    /// `(edit_train, edit_test)` of one shifted set.
    pub fn halves(&self, source: EditSource) -> Result<(Dataset, Dataset)> {
        match source {
            EditSource::Aging(d) => {
                Ok(split_5050(&self.aging_set(d)?, derive_seed(self.manifest.seed, 0x300 + u64::from(d)))?)
            }
            EditSource::Detector => self.detector_halves(),
        }
    }

    /// Searches one method on one edit set. Writes the ledger and a JSON
    /// summary of the winner.
    pub fn search(
        &self,
        method: EditMethod,
        source: EditSource,
        progress: &mut dyn FnMut(String),
    ) -> Result<SearchResult> {
        let base = self.base(progress)?;
        let val = self.base_split()?.val;
        let (train, _) = self.halves(source)?;
        let label = match source {
            EditSource::Aging(d) => format!("aging:{d}"),
            EditSource::Detector => "detector".into(),
        };
        let task = EditTask::new(&base, &train, &val)?;
        let (result, timings) = search(&task, method, &self.manifest.search, &label)?;
        #[derive(Serialize)]
        struct Winner {
            layer: usize,
            lr: f64,
            accepted_seeds: usize,
            mean_selection_accuracy: Option<f64>,
            mean_drop: Option<f64>,
        }
        #[derive(Serialize)]
        struct Out {
            task: String,
            method: EditMethod,
            tau: f64,
            runs: usize,
            accepted: usize,
            winner: Option<Winner>,
            absent: Option<String>,
        }
        let out = Out {
            task: label,
            method,
            tau: self.manifest.search.tau,
            runs: result.ledger.len(),
            accepted: result.ledger.iter().filter(|r| r.accepted).count(),
            winner: result.best.as_ref().map(|b| Winner {
                layer: b.layer,
                lr: b.lr,
                accepted_seeds: b.accepted_count(),
                mean_selection_accuracy: b.mean_selection(),
                mean_drop: b.mean_drop(),
            }),
            absent: result.absent_reason(),
        };
        let json = serde_json::to_vec_pretty(&out).map_err(|e| ReportError::Format(e.to_string()))?;
        let ledger = Ledger { records: result.ledger.clone(), seconds: timings };
        write_atomically(&self.out, &[("search_result.json", json), ("search_ledger.jsonl", ledger_jsonl(&ledger)?)])?;
        Ok(result)
    }

    pub fn base_path(&self) -> PathBuf {
        self.out.join(BASE_CKPT)
    }

    /// Writes every dataset into `out/data` and returns the paths.
    pub fn gen_data(&self) -> Result<Vec<PathBuf>> {
        let dir = self.out.join("data");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut files: Vec<(String, Dataset)> = Vec::new();
        let base = self.base_split()?;
        files.push(("base_train.ds".into(), base.train));
        files.push(("base_val.ds".into(), base.val));
        let bench = self.aging_bench()?;
        for ((d, a), b) in bench.durations.iter().zip(bench.train).zip(bench.test) {
            files.push((format!("aging_{d}_edit_train.ds"), a));
            files.push((format!("aging_{d}_edit_test.ds"), b));
        }
        let (a, b) = self.detector_halves()?;
        files.push(("detector_edit_train.ds".into(), a));
        files.push(("detector_edit_test.ds".into(), b));
        let bytes: Vec<(&str, Vec<u8>)> = files.iter().map(|(n, d)| (n.as_str(), d.to_bytes())).collect();
        write_atomically(&dir, &bytes)
    }

    /// Trains the base model and saves it to `out/base.ckpt`.
    pub fn train_base(&self) -> Result<Checkpoint> {
        let base = self.base_split()?;
        let arch = Architecture::reference(self.manifest.data.classes);
        let ck = train_base(arch, &base.train, &base.val, &self.manifest.train_config())?;
        std::fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        write_atomically(&self.out, &[(BASE_CKPT, ck.to_bytes())])?;
        Ok(ck)
    }

    /// The saved base model when it matches this manifest, else a freshly
    /// trained one.
    pub fn base(&self, progress: &mut dyn FnMut(String)) -> Result<Checkpoint> {
        let path = self.base_path();
        if path.exists() {
            let ck = Checkpoint::load(&path)?;
            let split = self.base_split()?;
            if ck.provenance.dataset_id == split.train.fingerprint()
                && ck.provenance.val_fingerprint == split.val.fingerprint()
                && ck.provenance.train == Some(self.manifest.train_config())
            {
                return Ok(ck);
            }
            progress(format!("{} does not match the manifest; retraining", path.display()));
        } else {
            progress(format!("no base model at {}; training one", path.display()));
        }
        self.train_base()
    }

    /// Runs the single edit of the manifest's `[edit]` section and writes
    /// `edit_outcome.json`.
    pub fn edit(&self, progress: &mut dyn FnMut(String)) -> Result<EditOutcome> {
        let e = self.manifest.edit.as_ref().ok_or_else(|| ReportError::Manifest("manifest has no [edit] section".into()))?;
        let base = self.base(progress)?;
        let val = self.base_split()?.val;
        let (train, test) = self.halves(e.dataset.parse::<EditSource>().map_err(ReportError::Manifest)?)?;
        let outcome = EditTask::new(&base, &train, &val)?.with_heldout(&test)?.run(&e.plan())?;
        #[derive(Serialize)]
        struct Out<'a> {
            dataset: &'a str,
            plan: crate::editing::EditPlan,
            train_accuracy: f64,
            heldout_accuracy: Option<f64>,
            base_val_accuracy: f64,
            original_val_accuracy: f64,
            baseline_drop: f64,
            losses: &'a [f64],
        }
        let json = serde_json::to_vec_pretty(&Out {
            dataset: &e.dataset,
            plan: outcome.plan,
            train_accuracy: outcome.train_accuracy,
            heldout_accuracy: outcome.heldout_accuracy,
            base_val_accuracy: outcome.base_val_accuracy,
            original_val_accuracy: outcome.original_val_accuracy,
            baseline_drop: outcome.baseline_drop,
            losses: &outcome.losses,
        })
        .map_err(|e| ReportError::Format(e.to_string()))?;
        write_atomically(&self.out, &[("edit_outcome.json", json), ("edited.ckpt", outcome.checkpoint.to_bytes())])?;
        Ok(outcome)
    }

    /// Searches every method on every duration and stores the matrix.
    pub fn aging_matrix(&self, progress: &mut dyn FnMut(String)) -> Result<(GenMatrix, Ledger)> {
        let base = self.base(progress)?;
        let val = self.base_split()?.val;
        let bench = self.aging_bench()?;
        let m = &self.manifest;
        let (matrix, ledger) = build_gen_matrix(&base, &val, &bench, &m.experiment.methods, &m.search, progress)?;
        self.store(AGING_JSON, AGING_TIMINGS, &matrix, &ledger)?;
        Ok((matrix, ledger))
    }

    /// Runs the detector seed study and stores it.
    pub fn detector_box(&self, progress: &mut dyn FnMut(String)) -> Result<(DetectorStudy, Ledger)> {
        let base = self.base(progress)?;
        let val = self.base_split()?.val;
        let (train, test) = self.detector_halves()?;
        let m = &self.manifest;
        let (study, ledger) =
            detector_boxstats(&base, &val, &train, &test, &m.experiment.methods, &m.search, &m.experiment.box_taus)?;
        progress(format!("detector study: {} runs", ledger.records.len()));
        self.store(DETECTOR_JSON, DETECTOR_TIMINGS, &study, &ledger)?;
        Ok((study, ledger))
    }

    fn store<T: Serialize>(&self, name: &str, timings: &str, result: &T, ledger: &Ledger) -> Result<()> {
        let stage = Stage { result, records: ledger.records.clone() };
        let json = serde_json::to_vec(&stage).map_err(|e| ReportError::Format(e.to_string()))?;
        let secs = serde_json::to_vec(&ledger.seconds).map_err(|e| ReportError::Format(e.to_string()))?;
        write_atomically(&self.out, &[(name, json), (timings, secs)])?;
        Ok(())
    }

    fn load<T: for<'de> Deserialize<'de>>(&self, name: &str, timings: &str) -> Result<Option<(T, Ledger)>> {
        let path = self.out.join(name);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let stage: Stage<T> =
            serde_json::from_slice(&bytes).map_err(|e| ReportError::Format(format!("{}: {e}", path.display())))?;
        let tpath = self.out.join(timings);
        let seconds: Vec<f64> = std::fs::read(&tpath)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .filter(|s: &Vec<f64>| s.len() == stage.records.len())
            .unwrap_or_else(|| vec![f64::NAN; stage.records.len()]);
        Ok(Some((stage.result, Ledger { records: stage.records, seconds })))
    }

    /// Emits the report files from whatever stored experiments exist.
    pub fn report(&self) -> Result<Vec<PathBuf>> {
        let aging: Option<(GenMatrix, Ledger)> = self.load(AGING_JSON, AGING_TIMINGS)?;
        let detector: Option<(DetectorStudy, Ledger)> = self.load(DETECTOR_JSON, DETECTOR_TIMINGS)?;
        if aging.is_none() && detector.is_none() {
            return Err(ReportError::Usage(format!(
                "nothing to report in {}: run aging-matrix or detector-box first",
                self.out.display()
            )));
        }
        let mut ledger = Ledger::default();
        for l in [aging.as_ref().map(|a| &a.1), detector.as_ref().map(|d| &d.1)].into_iter().flatten() {
            ledger.extend(l.records.clone(), l.seconds.clone());
        }
        let base_val_accuracy = match self.base_path().exists() {
            true => Some(Checkpoint::load(&self.base_path())?.provenance.base_val_accuracy),
            false => None,
        };
        let report = Report {
            base_val_accuracy,
            matrix: aging.as_ref().map(|a| &a.0),
            detector: detector.as_ref().map(|d| &d.0),
            ledger: &ledger,
        };
        emit_reports(&report, &self.out)
    }
}

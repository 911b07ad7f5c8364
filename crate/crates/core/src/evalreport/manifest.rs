//! TOML run manifest.
//!
//! ```toml
//! seed = 1                      # root of every data and training seed
//! out = "out"                   # output directory
//!
//! [data]
//! classes = 5
//! base_size = 4800
//! detector_size = 250
//! aging_severity = 1.0
//! confounded = false
//!
//! [detector]                    # photometric profile of the new detector
//! brightness_offset = 0.12
//! contrast_gain = 0.6
//! gamma = 1.4
//! noise_sigma = 0.06
//! blur_radius = 1
//! seed = 2018
//!
//! [train]
//! lr = 4.0
//! steps = 3000
//! batch_size = 32
//!
//! [search]                      # see SearchConfig
//! tau = 1.5
//! seeds = 5
//!
//! [experiment]
//! methods = ["low_rank", "surgical", "full"]
//! durations = [0, 14, 24, 36, 43, 54, 60]
//! box_taus = [1.5, 7.0]
//!
//! [edit]                        # single run for the `edit` subcommand
//! method = "low_rank"
//! layer = 2
//! lr = 1.0
//! dataset = "aging:43"          # or "detector"
//! ```
//!
//! Every section and key is optional; omitted values take the defaults
//! shown above. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::editing::{EditMethod, EditPlan};
use crate::network::TrainConfig;
use crate::search::SearchConfig;
use crate::shiftbench::{AgingModel, DetectorSpec, AGING_DURATIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub base_size: usize,
    pub detector_size: usize,
    pub aging_severity: f64,
    pub confounded: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { classes: 5, base_size: 4800, detector_size: 250, aging_severity: 1.0, confounded: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { lr: 4.0, steps: 3000, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub methods: Vec<EditMethod>,
    pub durations: Vec<u32>,
    pub box_taus: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { methods: EditMethod::ALL.to_vec(), durations: AGING_DURATIONS.to_vec(), box_taus: vec![1.5, 7.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSection {
    pub method: EditMethod,
    #[serde(default)]
    pub layer: usize,
    pub lr: f64,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// `"aging:<D>"` or `"detector"`.
    #[serde(default = "default_edit_dataset")]
    pub dataset: String,
}

fn default_edit_dataset() -> String {
    "aging:43".into()
}

impl EditSection {
    pub fn plan(&self) -> EditPlan {
        let mut p = EditPlan::new(self.method, self.layer, self.lr, self.seed);
        if let Some(r) = self.rank {
            p.rank = r;
        }
        if let Some(s) = self.steps {
            p.steps = s;
        }
        p
    }
}

/// Which edit set a single `edit` run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditSource {
    Aging(u32),
    Detector,
}

impl std::str::FromStr for EditSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "detector" {
            return Ok(EditSource::Detector);
        }
        s.strip_prefix("aging:")
            .and_then(|d| d.parse().ok())
            .filter(|d| AGING_DURATIONS.contains(d))
            .map(EditSource::Aging)
            .ok_or_else(|| format!("edit dataset {s:?} is neither \"detector\" nor \"aging:<D>\" with D in {AGING_DURATIONS:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub detector: DetectorSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub edit: Option<EditSection>,
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            seed: default_seed(),
            out: default_out(),
            data: DataConfig::default(),
            detector: DetectorSpec::default(),
            train: TrainSection::default(),
            search: SearchConfig::default(),
            experiment: ExperimentSection::default(),
            edit: None,
        }
    }
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let m: RunManifest = toml::from_str(text).map_err(|e| ReportError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ReportError::Manifest(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            ReportError::Manifest(m) => ReportError::Manifest(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |m: String| Err(ReportError::Manifest(m));
        if self.data.classes < 2 {
            return bad(format!("data.classes must be at least 2, got {}", self.data.classes));
        }
        if self.data.base_size < self.data.classes || self.data.detector_size < 2 {
            return bad("data sizes are too small".into());
        }
        AgingModel { severity: self.data.aging_severity }
            .validate()
            .map_err(|e| ReportError::Manifest(e.to_string()))?;
        self.detector.validate().map_err(|e| ReportError::Manifest(e.to_string()))?;
        self.search.validate().map_err(|e| ReportError::Manifest(e.to_string()))?;
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.train.lr));
        }
        if self.experiment.methods.is_empty() {
            return bad("experiment.methods is empty".into());
        }
        if let Some(d) = self.experiment.durations.iter().find(|d| !AGING_DURATIONS.contains(d)) {
            return bad(format!("unsupported aging duration {d}; expected a subset of {AGING_DURATIONS:?}"));
        }
        if self.experiment.durations.windows(2).any(|w| w[0] >= w[1]) || self.experiment.durations.is_empty() {
            return bad("experiment.durations must be nonempty and strictly ascending".into());
        }
        if self.experiment.box_taus.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return bad("experiment.box_taus must be positive".into());
        }
        if let Some(e) = &self.edit {
            e.dataset.parse::<EditSource>().map_err(ReportError::Manifest)?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { lr: self.train.lr, steps: self.train.steps, batch_size: self.train.batch_size, seed: self.seed }
    }

    pub fn aging_model(&self) -> AgingModel {
        AgingModel { severity: self.data.aging_severity }
    }
}

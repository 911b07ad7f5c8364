//! The three model-update methods.
//!
//! All of them minimize the same objective, the MSE between softmax
//! probabilities and one-hot labels over the whole edit set, with plain
//! full-batch gradient descent:
//!
//! * [`low_rank_edit`] freezes every weight and learns `W_l + U V^T`;
//! * [`surgical_finetune`] updates only layer `l` (weight and bias);
//! * [`full_finetune`] updates every weighted layer.
//!
//! Layers below the first trainable one never change, so their activations
//! on the edit and validation sets are computed once per [`EditTask`] and
//! reused by every run.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::network::{accuracy_of, one_hot, predict_from, Checkpoint, Network, NetworkError};
use crate::shiftbench::{Dataset, SplitTag};
use crate::tensor::{kernels, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EditError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{0}")]
    Usage(String),
    #[error("edit diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
}

impl From<TensorError> for EditError {
    fn from(e: TensorError) -> Self {
        EditError::Network(e.into())
    }
}

pub type Result<T> = std::result::Result<T, EditError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMethod {
    LowRank,
    Surgical,
    Full,
}

impl EditMethod {
    pub const ALL: [EditMethod; 3] = [EditMethod::LowRank, EditMethod::Surgical, EditMethod::Full];

    pub fn name(self) -> &'static str {
        match self {
            EditMethod::LowRank => "low_rank",
            EditMethod::Surgical => "surgical",
            EditMethod::Full => "full",
        }
    }

    /// Whether the outcome depends on the plan seed. Only the low-rank
    /// adapter draws random numbers.
    pub fn is_seeded(self) -> bool {
        self == EditMethod::LowRank
    }
}

impl std::fmt::Display for EditMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EditMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "low_rank" | "low-rank" => Ok(EditMethod::LowRank),
            "surgical" => Ok(EditMethod::Surgical),
            "full" => Ok(EditMethod::Full),
            _ => Err(format!("unknown edit method {s:?}; expected low_rank, surgical or full")),
        }
    }
}

fn default_rank() -> usize {
    2
}

fn default_steps() -> usize {
    100
}

/// One edit run. `layer` is a 0-based index into the architecture and is
/// ignored by full finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub method: EditMethod,
    #[serde(default)]
    pub layer: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EditPlan {
    pub fn new(method: EditMethod, layer: usize, lr: f64, seed: u64) -> Self {
        EditPlan { method, layer, rank: default_rank(), lr, steps: default_steps(), seed }
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EditError::Usage(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.method == EditMethod::LowRank && self.rank == 0 {
            return Err(EditError::Usage("adapter rank must be at least 1".into()));
        }
        if self.method != EditMethod::Full {
            let spec = net.architecture().layers.get(self.layer).ok_or_else(|| {
                EditError::Usage(format!("layer {} outside 0..{}", self.layer, net.depth()))
            })?;
            if !spec.has_weights() {
                return Err(EditError::Usage(format!("layer {} holds no weights", self.layer)));
            }
        }
        Ok(())
    }

    /// First layer whose parameters can change under this plan.
    fn first_trainable(&self, net: &Network) -> usize {
        match self.method {
            EditMethod::Full => net.architecture().weighted_layers().first().copied().unwrap_or(0),
            _ => self.layer,
        }
    }
}

/// Rank-`r` update `U V^T` of layer `l`'s weight viewed as an
/// `n_l x m_l` matrix. For a convolution the matrix is the kernel flattened
/// to `c_out x (c_in k k)`, so the update acts as two stacked 1x1
/// projections of rank `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub layer: usize,
    /// `[n_l, r]`
    pub u: Tensor,
    /// `[m_l, r]`
    pub v: Tensor,
}

impl LowRankAdapter {
    /// `U = 0` and `V ~ N(0, 1/m_l)`, so a fresh adapter is an exact identity
    /// edit and each column of `V^T x` keeps the scale of `x`.
    pub fn new(net: &Network, layer: usize, rank: usize, seed: u64) -> Result<Self> {
        let (n, m) = adapter_dims(net, layer)?;
        if rank == 0 {
            return Err(EditError::Usage("adapter rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (m as f64).recip().sqrt()).expect("positive std");
        let v = (0..m * rank).map(|_| normal.sample(&mut rng)).collect();
        Ok(LowRankAdapter {
            layer,
            u: Tensor::zeros(vec![n, rank]),
            v: Tensor::from_parts(vec![m, rank], v),
        })
    }

    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    /// `U V^T`, row-major `[n_l, m_l]`.
    pub fn delta(&self) -> Vec<f64> {
        let (n, r, m) = (self.u.shape()[0], self.rank(), self.v.shape()[0]);
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, r, m, self.u.data(), false, self.v.data(), true, 0.0, &mut out);
        out
    }
}

fn adapter_dims(net: &Network, layer: usize) -> Result<(usize, usize)> {
    net.architecture()
        .layers
        .get(layer)
        .and_then(|s| s.weight_matrix_dims())
        .ok_or_else(|| EditError::Usage(format!("layer {layer} holds no weights")))
}

/// Folds the adapter into layer `l`: `W_l + U V^T`, every other tensor copied.
pub fn materialize(base: &Checkpoint, adapter: &LowRankAdapter) -> Result<Checkpoint> {
    let (n, m) = adapter_dims(&base.network, adapter.layer)?;
    let r = adapter.u.shape().get(1).copied().unwrap_or(0);
    if adapter.u.shape() != [n, r] || adapter.v.shape() != [m, r] || r == 0 {
        return Err(EditError::Usage(format!(
            "adapter factors {:?} and {:?} do not fit a {n}x{m} weight",
            adapter.u.shape(),
            adapter.v.shape()
        )));
    }
    let mut out = base.clone();
    let w = out.network.layer_mut(adapter.layer).weight.as_mut().expect("weighted layer");
    for (w, d) in w.data_mut().iter_mut().zip(adapter.delta()) {
        *w += d;
    }
    if !w.is_finite() {
        return Err(TensorError::NonFinite { op: "materialize" }.into());
    }
    Ok(out)
}

/// Result of one edit run.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub plan: EditPlan,
    pub checkpoint: Checkpoint,
    /// The learned factors, for low-rank plans.
    pub adapter: Option<LowRankAdapter>,
    /// Accuracy on the edit set the update was learned from.
    pub train_accuracy: f64,
    /// Accuracy on the held-out half, when the task was given one.
    pub heldout_accuracy: Option<f64>,
    pub base_val_accuracy: f64,
    pub original_val_accuracy: f64,
    /// `base_val_accuracy - original_val_accuracy` in percentage points.
    pub baseline_drop: f64,
    /// Loss before each step plus the final loss, `steps + 1` entries.
    pub losses: Vec<f64>,
}

/// A base checkpoint together with the data every edit of it uses.
pub struct EditTask<'a> {
    base: &'a Checkpoint,
    train: &'a Dataset,
    original_val: &'a Dataset,
    heldout: Option<&'a Dataset>,
    targets: Tensor,
    train_prefix: Vec<OnceLock<Tensor>>,
    val_prefix: Vec<OnceLock<Tensor>>,
    heldout_prefix: Vec<OnceLock<Tensor>>,
}

impl<'a> EditTask<'a> {
    /// `original_val` must be the validation set recorded in the base
    /// checkpoint's provenance; the baseline drop is measured on it.
    pub fn new(base: &'a Checkpoint, train: &'a Dataset, original_val: &'a Dataset) -> Result<Self> {
        let net = &base.network;
        if train.is_empty() {
            return Err(EditError::Usage("edit set is empty".into()));
        }
        if original_val.is_empty() {
            return Err(EditError::Usage("original validation set is empty".into()));
        }
        for d in [train, original_val] {
            if d.class_count() != net.class_count() {
                return Err(EditError::Usage(format!(
                    "dataset has {} classes, network {}",
                    d.class_count(),
                    net.class_count()
                )));
            }
        }
        if original_val.fingerprint() != base.provenance.val_fingerprint {
            return Err(EditError::Usage(format!(
                "original validation set {} is not the one recorded with the checkpoint ({})",
                original_val.fingerprint(),
                base.provenance.val_fingerprint
            )));
        }
        let depth = net.depth();
        Ok(EditTask {
            base,
            train,
            original_val,
            heldout: None,
            targets: one_hot(train.labels(), net.class_count()),
            train_prefix: (0..depth).map(|_| OnceLock::new()).collect(),
            val_prefix: (0..depth).map(|_| OnceLock::new()).collect(),
            heldout_prefix: (0..depth).map(|_| OnceLock::new()).collect(),
        })
    }

    /// Also reports accuracy on `heldout`, which must be an edit-test half.
    pub fn with_heldout(mut self, heldout: &'a Dataset) -> Result<Self> {
        if heldout.split() != SplitTag::EditTest {
            return Err(EditError::Usage(format!("held-out set is tagged {:?}, not edit_test", heldout.split())));
        }
        if heldout.is_empty() || heldout.class_count() != self.base.network.class_count() {
            return Err(EditError::Usage("held-out set is empty or has the wrong class count".into()));
        }
        self.heldout = Some(heldout);
        Ok(self)
    }

    pub fn base(&self) -> &Checkpoint {
        self.base
    }

    pub fn train(&self) -> &Dataset {
        self.train
    }

    fn prefix<'s>(&'s self, cache: &'s [OnceLock<Tensor>], data: &'s Dataset, start: usize) -> Result<&'s Tensor> {
        if start == 0 {
            return Ok(data.images());
        }
        if let Some(t) = cache[start].get() {
            return Ok(t);
        }
        let t = self.base.network.forward_prefix(start, data.images())?;
        Ok(cache[start].get_or_init(|| t))
    }

    /// Runs one plan.
    pub fn run(&self, plan: &EditPlan) -> Result<EditOutcome> {
        let base = &self.base.network;
        plan.validate(base)?;
        let start = plan.first_trainable(base);
        let h = self.prefix(&self.train_prefix, self.train, start)?;

        let mut net = base.clone();
        match plan.method {
            EditMethod::Full => net.set_trainable(&vec![true; net.depth()])?,
            EditMethod::Surgical => net.train_only(plan.layer)?,
            EditMethod::LowRank => net.set_trainable(&vec![false; net.depth()])?,
        }
        let mut adapter = match plan.method {
            EditMethod::LowRank => Some(LowRankAdapter::new(base, plan.layer, plan.rank, plan.seed)?),
            _ => None,
        };

        let mut losses = Vec::with_capacity(plan.steps + 1);
        for step in 0..=plan.steps {
            let diverged = |e: NetworkError| match e {
                NetworkError::Tensor(TensorError::NonFinite { .. }) => EditError::Diverged { step },
                e => EditError::Network(e),
            };
            let mut tape = Tape::new();
            let mut vars = net.register(&mut tape);
            let factors = match &adapter {
                Some(a) => {
                    let u = tape.leaf(a.u.clone().with_grad());
                    let v = tape.leaf(a.v.clone().with_grad());
                    let w = vars[a.layer].weight.expect("weighted layer");
                    let shape = tape.value(w)?.shape().to_vec();
                    let delta = tape.matmul(u, v, true).map_err(|e| diverged(e.into()))?;
                    let delta = tape.reshape(delta, shape)?;
                    vars[a.layer].weight = Some(tape.add(w, delta).map_err(|e| diverged(e.into()))?);
                    Some((u, v))
                }
                None => None,
            };
            let input = tape.leaf(h.clone());
            let target = tape.leaf(self.targets.clone());
            let loss = net
                .record(&mut tape, &vars, input, start)
                .and_then(|logits| Ok(tape.softmax(logits)?))
                .and_then(|probs| Ok(tape.mse(probs, target)?))
                .map_err(diverged)?;
            let value = tape.value(loss)?.item().expect("scalar loss");
            losses.push(value);
            if step == plan.steps {
                break;
            }
            let grads = tape.backward(loss).map_err(|e| diverged(e.into()))?;

            let sgd = |param: &mut Tensor, g: &[f64]| {
                param.data_mut().iter_mut().zip(g).for_each(|(w, g)| *w -= plan.lr * g);
                param.is_finite()
            };
            let mut finite = true;
            match (&mut adapter, factors) {
                (Some(a), Some((u, v))) => {
                    finite &= sgd(&mut a.u, grads.get(u).expect("adapter gradient"));
                    finite &= sgd(&mut a.v, grads.get(v).expect("adapter gradient"));
                }
                _ => {
                    for (i, lv) in vars.iter().enumerate() {
                        if !net.trainable()[i] {
                            continue;
                        }
                        let p = net.layer_mut(i);
                        for (param, var) in [(&mut p.weight, lv.weight), (&mut p.bias, lv.bias)] {
                            if let (Some(param), Some(var)) = (param.as_mut(), var) {
                                finite &= sgd(param, grads.get(var).expect("trainable leaf has a gradient"));
                            }
                        }
                    }
                }
            }
            if !finite {
                return Err(EditError::Diverged { step });
            }
        }

        let checkpoint = match &adapter {
            Some(a) => materialize(self.base, a)?,
            None => {
                net.set_trainable(&vec![true; net.depth()])?;
                Checkpoint { network: net, provenance: self.base.provenance.clone() }
            }
        };
        let edited = &checkpoint.network;
        let acc = |cache, data: &Dataset| -> Result<f64> {
            let pred = predict_from(edited, start, self.prefix(cache, data, start)?)?;
            Ok(accuracy_of(&pred, data.labels()))
        };
        let train_accuracy = acc(&self.train_prefix, self.train)?;
        let original_val_accuracy = acc(&self.val_prefix, self.original_val)?;
        let heldout_accuracy = self.heldout.map(|d| acc(&self.heldout_prefix, d)).transpose()?;
        let base_val_accuracy = self.base.provenance.base_val_accuracy;
        Ok(EditOutcome {
            plan: *plan,
            checkpoint,
            adapter,
            train_accuracy,
            heldout_accuracy,
            base_val_accuracy,
            original_val_accuracy,
            baseline_drop: 100.0 * (base_val_accuracy - original_val_accuracy),
            losses,
        })
    }
}

fn run_method(
    method: EditMethod,
    base: &Checkpoint,
    plan: &EditPlan,
    edit_train: &Dataset,
    original_val: &Dataset,
) -> Result<EditOutcome> {
    if plan.method != method {
        return Err(EditError::Usage(format!("plan method {} passed to the {method} editor", plan.method)));
    }
    EditTask::new(base, edit_train, original_val)?.run(plan)
}

/// Learns `W_l + U V^T` with every original weight frozen.
pub fn low_rank_edit(base: &Checkpoint, plan: &EditPlan, edit_train: &Dataset, original_val: &Dataset) -> Result<EditOutcome> {
    run_method(EditMethod::LowRank, base, plan, edit_train, original_val)
}

/// Updates only layer `l`'s weight and bias.
pub fn surgical_finetune(
    base: &Checkpoint,
    plan: &EditPlan,
    edit_train: &Dataset,
    original_val: &Dataset,
) -> Result<EditOutcome> {
    run_method(EditMethod::Surgical, base, plan, edit_train, original_val)
}

/// Updates every weighted layer.
pub fn full_finetune(base: &Checkpoint, plan: &EditPlan, edit_train: &Dataset, original_val: &Dataset) -> Result<EditOutcome> {
    run_method(EditMethod::Full, base, plan, edit_train, original_val)
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, Checkpoint, Network, NetworkError, Provenance, Result};
use crate::autodiff::Tape;
use crate::shiftbench::Dataset;
use crate::tensor::{Tensor, TensorError};

/// Rows per forward pass during inference.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// SGD steps, each on one minibatch.
    pub steps: usize,
    /// Minibatch size; `0` means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 4.0, steps: 1500, batch_size: 32, seed: 0 }
    }
}

/// One-hot targets `[n, classes]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (row, &l) in labels.iter().enumerate() {
        data[row * classes + l] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), classes], data)
}

fn argmax(row: &[f64]) -> usize {
    // first maximum wins, so ties go to the lowest class index
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per example of `images` (activations entering layer `start`).
pub(crate) fn predict_from(net: &Network, start: usize, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    for lo in (0..n).step_by(EVAL_CHUNK) {
        let hi = (lo + EVAL_CHUNK).min(n);
        let probs = net.forward_from(start, &images.slice_rows(lo, hi))?;
        out.extend(probs.data().chunks(net.class_count()).map(argmax));
    }
    Ok(out)
}

pub fn predict(net: &Network, images: &Tensor) -> Result<Vec<usize>> {
    predict_from(net, 0, images)
}

pub(crate) fn accuracy_of(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Fraction of examples whose arg-max class equals the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(NetworkError::Usage("cannot evaluate on an empty dataset".into()));
    }
    Ok(accuracy_of(&predict(net, data.images())?, data.labels()))
}

/// Minibatch SGD on the softmax/one-hot MSE. The minibatch order is a
/// seeded reshuffle per epoch, so the result is a pure function of the
/// inputs.
pub fn train_base(arch: Architecture, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    if train.is_empty() {
        return Err(NetworkError::Usage("training set is empty".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(NetworkError::Usage(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let mut net = Network::init(arch, cfg.seed)?;
    if train.class_count() != net.class_count() {
        return Err(NetworkError::Usage(format!(
            "dataset has {} classes, network {}",
            train.class_count(),
            net.class_count()
        )));
    }
    net.set_trainable(&vec![true; net.depth()])?;
    let n = train.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let targets = one_hot(train.labels(), net.class_count());

    for step in 0..cfg.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;
        let x = train.images().select_rows(rows);
        let y = targets.select_rows(rows);

        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let input = tape.leaf(x);
        let target = tape.leaf(y);
        let grads = net
            .record(&mut tape, &vars, input, 0)
            .and_then(|logits| Ok(tape.softmax(logits)?))
            .and_then(|probs| Ok(tape.mse(probs, target)?))
            .and_then(|loss| Ok(tape.backward(loss)?))
            .map_err(|e| match e {
                NetworkError::Tensor(TensorError::NonFinite { .. }) => NetworkError::Diverged { step },
                e => e,
            })?;
        for (i, v) in vars.iter().enumerate() {
            let p = net.layer_mut(i);
            for (param, var) in [(&mut p.weight, v.weight), (&mut p.bias, v.bias)] {
                if let (Some(param), Some(var)) = (param.as_mut(), var) {
                    let g = grads.get(var).expect("trainable leaf has a gradient");
                    param.data_mut().iter_mut().zip(g).for_each(|(w, g)| *w -= cfg.lr * g);
                    if !param.is_finite() {
                        return Err(NetworkError::Diverged { step });
                    }
                }
            }
        }
    }

    let base_val_accuracy = evaluate(&net, val)?;
    Ok(Checkpoint {
        network: net,
        provenance: Provenance {
            seed: cfg.seed,
            dataset_id: train.fingerprint(),
            val_fingerprint: val.fingerprint(),
            base_val_accuracy,
            train: Some(*cfg),
        },
    })
}

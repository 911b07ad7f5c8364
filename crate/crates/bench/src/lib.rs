//! Shared fixtures for the benchmarks.

use shiftedit_core::network::{train_base, TrainConfig};
use shiftedit_core::shiftbench::{apply_aging, gen_base, split_5050};
use shiftedit_core::{Architecture, Checkpoint, Dataset};

pub const CLASSES: usize = 5;

/// A briefly trained reference network with its validation set and the
/// training half of an aged edit set.
pub fn fixture() -> (Checkpoint, Dataset, Dataset) {
    let base = gen_base(CLASSES, 640, 1).expect("base split");
    let cfg = TrainConfig { lr: 4.0, steps: 100, batch_size: 32, seed: 1 };
    let ck = train_base(Architecture::reference(CLASSES), &base.train, &base.val, &cfg).expect("training");
    let aged = apply_aging(&base.val, 43, false, 2).expect("aging");
    let (edit, _) = split_5050(&aged, 3).expect("split");
    (ck, base.val, edit)
}

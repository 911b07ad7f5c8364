//! Model-update methods under distribution shift: low-rank weight editing,
//! single-layer (surgical) finetuning and full finetuning, together with a
//! synthetic shift benchmark, a gated hyperparameter search, and the
//! cross-generalization reports built on top of them.

pub mod autodiff;
mod bytes;
pub mod editing;
pub mod evalreport;
pub mod network;
pub mod search;
pub mod shiftbench;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use editing::{EditMethod, EditOutcome, EditPlan, EditTask, LowRankAdapter};
pub use evalreport::{GenMatrix, RunManifest, SeedStats};
pub use network::{Architecture, Checkpoint, LayerSpec, Network};
pub use search::{gate, RunRecord, SearchConfig, SearchResult};
pub use shiftbench::{Dataset, DetectorSpec, ShiftSpec, SplitTag};
pub use tensor::{Activation, Tensor, TensorError};

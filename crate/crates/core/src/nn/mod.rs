//! Dense tensors, reverse-mode autodiff, and the width-slimmable U-Net supernet.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod supernet;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointIndex};
pub use optim::{accumulate_pass, sandwich_step, AdamState, AdamW, SandwichStats};
pub use params::{Param, ParamId, ParamStore};
pub use supernet::{StandaloneNet, Supernet, SupernetOptions};
pub use tape::{softmax, Tape, Var};
pub use tensor::Tensor;

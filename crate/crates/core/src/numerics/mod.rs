//! Differentiable-training substrate: tensors, the reverse-mode tape,
//! AdamW with warmup-cosine scheduling, finite-difference gradient
//! verification, and checkpoint serialization.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::grad_check;
pub use optim::{lr_at, AdamHyper, OptimState, ScheduleConfig};
pub use params::{derive_seed, ema_update_store, seeded_rng, ParamStore};
pub use tape::{AttnMask, Gradients, Tape, Var};
pub use tensor::{Dtype, Real, Tensor};

//! Dense `f64` tensors, a dynamic reverse-mode tape and the Adam optimizer.

pub mod checkpoint;
pub mod gradcheck;
mod gemm;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{lr_schedule, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{AttnSegment, Tape, Var};
pub use tensor::Tensor;


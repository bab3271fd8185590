//! Dense-tensor math core: reverse-mode differentiation, AdamW, and the
//! warmup/cosine learning-rate schedule.

pub mod adamw;
pub mod gradcheck;
pub mod scalarfn;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamWConfig, OptimizerState};
pub use schedule::LrSchedule;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

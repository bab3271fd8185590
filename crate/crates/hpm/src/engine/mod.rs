//! Training loop: loss-guided masking, the dual objective, EMA refresh.

pub mod ema;
pub mod losses;
pub mod mask;
pub mod train;

pub use ema::{ema_update, EmaConfig};
pub use losses::{LossField, LossRole, Measure, ObjectiveConfig, PredMode};
pub use mask::{alpha_at, generate_mask, MaskPlan, MaskPolicy, PatchMask};
pub use train::{ModelPair, StepMetrics, TrainSetup, Trainer};

//! Synthetic data generation, PNM image IO, dataset packs, checkpoints.

pub mod checkpoint;
pub mod pack;
pub mod pnm;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor};
pub use pack::{read_pack, write_pack};
pub use pnm::{read_pnm, write_pnm};
pub use synth::{synth_dataset, synth_sample, SampleRecord, ShapeFamily, ShapeRule, SynthSpec};

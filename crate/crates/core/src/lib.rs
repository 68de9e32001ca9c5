//! Diffusion policies aligned to segment-level preferences.
//!
//! The crate covers the full pipeline: a DDPM noise-prediction policy, the
//! FKPD / RKPD / NRPD alignment objectives, preference data generation with
//! a script teacher, two small environments, and the training harness.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod envs;
pub mod harness;
mod error;
pub mod losses;
pub mod numeric;
pub mod policy;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use data::{OfflineDataset, PreferenceDataset, PreferencePair, TeacherConfig};
pub use diffusion::{DiffusionSchedule, NoiseModel, NoiseModelSpec, NoisePredictor, ScheduleSpec};
pub use error::{Error, Result};
pub use losses::{AlignConfig, LossReport, Variant};
pub use numeric::{Activation, AdamConfig, DenseArray};
pub use policy::{Segment, SegmentBatch};

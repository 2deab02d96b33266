//! Two-stage multi-expert diffusion sampling over analytic frame-sequence
//! targets.
//!
//! A control expert produces a coarse structure with a few deterministic DDIM
//! steps; the structure is re-noised to depth `t_e` and refined by a spatial
//! and a temporal expert that may run on different noise schedules. Long
//! sequences are generated segment by segment with shared base noise,
//! epsilon-space coherence guidance and half-overlapping refinement windows.
//!
//! All experts are closed-form posterior-mean denoisers over Gaussian
//! mixtures, so every quantity has an exact reference to test against.

pub mod error;
pub mod experts;
pub mod harness;
pub mod longgen;
pub mod metrics;
pub mod presets;
pub mod record;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod target;
pub mod tensor;

pub use error::{Error, Result};
pub use experts::{ExpertRole, ExpertSpec};
pub use rng::{ConstantSource, RandomSource, SeededSource};
pub use sampler::{run_pipeline, DenoiseMode, PipelineConfig, RunRecord};
pub use schedule::{NoiseSchedule, TimestepGrid};
pub use target::GaussianTarget;
pub use tensor::FrameTensor;

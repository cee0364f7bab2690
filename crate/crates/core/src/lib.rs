//! Softmax classifiers trained with a scheduled mix of cross entropy and
//! expectation loss, together with the tools to compare them: learning-rate
//! sweeps, gradient-noise and escape analysis, bucket tracking, performance
//! profiles and rank statistics, and a resumable experiment runner.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod escape;
pub mod losses;
pub mod math;
pub mod model;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LossSpec, MixWeights};
pub use math::{LogitVector, ProbabilityVector, RandomSource};
pub use model::{Architecture, ClassifierModel};
pub use schedule::ScheduleSpec;
pub use trainer::{train, Objective, RunReport, TrainConfig};

//! Anomaly-detecting stacked autoencoder plus the machinery to optimize it
//! for constrained deployments: neuron clip masks, multi-branch early
//! exits, a four-objective evolutionary search, and an equal-width-binning
//! codec for shipping model updates.

pub mod binpack;
pub mod clipping;
pub mod data;
pub mod error;
pub mod exits;
pub mod linalg;
pub mod moga;
pub mod objectives;
pub mod sae;
mod stats;

pub use binpack::{BinningParams, ErrorBoundReport, PackedMatrix};
pub use clipping::{ClipMask, ClipSchedule, ModelView};
pub use data::{Dataset, StandardizationParams};
pub use error::{Error, Result};
pub use exits::{ExitPolicy, ExitTrace};
pub use linalg::{Matrix, Vector};
pub use moga::{ArchiveEntry, FrontSet, GaConfig, Genome, OptimizerMode};
pub use objectives::{ConfusionCounts, EvalContext, ExitSetting, ObjectiveVector};
pub use sae::{SaeConfig, SaeModel, SaeShape, TrainReport};

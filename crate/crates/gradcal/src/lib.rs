//! Training laboratory for multi-level gradient calibration on toy
//! multi-modal multi-task networks.
//!
//! The crate provides:
//! - a minimal dense-tensor reverse-mode differentiation tape with
//!   region-scoped gradient access ([`tape`], [`region`]),
//! - a two-branch fusion network whose parameters are partitioned into
//!   named regions ([`model`]),
//! - inter-task loss re-weighting, intra-modality gradient gating and the
//!   diagnostic ratios built on them ([`calib`]),
//! - toy task metrics and the multi-task evaluation score ([`metrics`]),
//! - a synthetic two-modality benchmark generator ([`synth`]),
//! - a deterministic training loop, experiment runner and metric emitters
//!   ([`train`], [`emit`]),
//! - a finite-difference gradient audit ([`gradcheck`]).

pub mod calib;
pub mod emit;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod region;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use calib::{IntraCalibState, TaskWeights};
pub use error::{Error, Result};
pub use metrics::TaskMetrics;
pub use model::{NetConfig, Network, ParameterStore};
pub use region::{GradientMap, RegionTag};
pub use synth::{DropModality, SplitScheme, SynthConfig, SyntheticSample};
pub use tape::{Activation, LossKind, NodeId, Tape};
pub use tensor::Tensor;
pub use train::{CalibrationMode, ExperimentConfig, RunReport};

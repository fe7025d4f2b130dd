//! Quickest change detection of sensor data delivered over a lossy,
//! queue-based uplink.

pub mod detectors;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod likelihood;
pub mod model;
pub mod par;
pub mod queueing;
pub mod stats;
pub mod verify;

pub use detectors::{Detector, DetectorKind};
pub use engine::{run_batch, run_replication, ReplicationResult, RngPolicy};
pub use error::{QcdError, Result};
pub use model::{ChannelModel, DensityModel, Discipline, SamplingProcess, ScenarioConfig};
pub use par::Parallelism;

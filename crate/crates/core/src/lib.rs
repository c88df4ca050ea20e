//! Federated learning over a simulated vehicular network, with three
//! behavior-attestation defenses against model poisoning.
//!
//! Module map:
//!
//! * [`model`]: linear and single-layer LSTM speed predictors over flat
//!   weight vectors, with exact gradients and SGD local training.
//! * [`data`]: synthetic link-speed series, CSV exchange, sliding windows and
//!   sharding.
//! * [`protocol`]: broadcast, collection, FedAvg and the round loop.
//! * [`attestation`]: the AFL1/AFL2/AFL3 checks and the reliability gate.
//! * [`adversary`]: static, pretence, randomized-pretence and Sybil attackers.
//! * [`experiment`]: config files, presets, metric outputs, comparison.

pub mod adversary;
pub mod attestation;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod protocol;
pub mod rng;

/// Identity of a participant. Base workers are `0..worker_count`.
pub type WorkerId = u32;

pub use adversary::{AttackKind, AttackSchedule};
pub use attestation::{Check, DefenseConfig, Verdict};
pub use data::{Sample, ShardPlan, SpeedSeries, SyntheticParams};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, Summary};
pub use model::{ModelKind, ModelSpec, TrainConfig, WeightVector};
pub use protocol::{GlobalModel, LocalUpdate, RoundRecord, Simulation, SimulationConfig};

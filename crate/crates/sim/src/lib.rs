//! Kinematic bag-opening environment and policy search around the dynamic
//! active vision space.

pub mod config;
pub mod env;
pub mod policy;
pub mod train;

pub use config::{BirthMode, ConfigError, EnvConfig, Scenario};
pub use env::{ActionPair, CameraAction, DoneReason, EnvError, EpisodeLog, IpEnv, Observation};
pub use policy::{rollout, Method, PolicyConfig, PolicyParams, RolloutOptions, RolloutRecord};
pub use train::{evaluate, train, CemConfig, EvalMetrics, TrainError};

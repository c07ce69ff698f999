//! Random-forest surrogate tuning with expected-improvement acquisition.

pub mod forest;
pub mod space;
pub mod tune;

pub use forest::{expected_improvement, Forest, ForestConfig, RegressionTree};
pub use space::{DimKind, Dimension, HyperPoint, ParamSpace, ParamValue};
pub use tune::{random_search, read_history, tune, TrialPhase, TrialRecord, TrialStatus, TuneConfig, TuneOutcome};

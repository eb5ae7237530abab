//! Data-efficient policy search for short-horizon intervention problems.
//!
//! A Gaussian-process world model predicts the next reward from a fixed
//! feature map, a Monte Carlo tree search plans on the model's mean
//! predictions with an optional variance bonus, and a small harness runs
//! the agent against baselines on a deterministic surrogate simulator.

pub mod agents;
pub mod complexity;
pub mod env;
pub mod features;
pub mod gp;
pub mod harness;
pub mod planner;

pub use features::{phi, ActionGrid, ActionPair, FeatureVector, State, FEATURE_DIM};
pub use gp::{FittedGp, GpHyperParams, Prediction, TrainingSet};

//! Grid traffic simulation and multi-agent deep Q-learning signal control for
//! road networks where some intersections have no sensors.
//!
//! Unobserved intersections get their states imputed from observed neighbors
//! (a store-and-forward neighbor mean) and, for training, their rewards
//! imputed by a learned reward model. Eight control strategies compose these
//! pieces; see [`controllers::StrategyId`].

pub mod agents;
pub mod controllers;
pub mod error;
pub mod experiment;
pub mod imputation;
pub mod nn;
pub mod observation;
pub mod road_network;
pub mod traffic_sim;

pub use error::{AgentError, ControlError, ExperimentError, ImputeError, NetworkError, NnError, ObservationError, SimError};

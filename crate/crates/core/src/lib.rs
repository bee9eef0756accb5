//! Simulator and optimizer for a stacked-intelligent-metasurface transmitter
//! that serves several downlink users while steering a sensing beam at a
//! radar target.
//!
//! The physical chain is `antennas -> W_1 -> Phi_1 -> W_2 -> ... -> Phi_Q`,
//! with fixed Rayleigh–Sommerfeld couplings `W_q` ([`propagation`]) and
//! programmable per-atom phases `Phi_q` ([`wavefield`]). [`objective`]
//! evaluates the penalized sum rate and its gradients, and [`optimizer`]
//! runs the multi-start projected gradient ascent on phases and powers.

pub mod channel;
pub mod config;
pub mod error;
pub mod experiments;
pub mod objective;
pub mod optimizer;
pub mod propagation;
pub mod rng;
pub mod wavefield;

pub use channel::{ChannelModel, ChannelSet};
pub use config::{build_geometry, GeometryLayout, PenaltyScale, PsiMode, ScenarioConfig};
pub use error::{Error, Result};
pub use objective::{GradientPair, ObjectiveReport, Problem, PsiRule};
pub use optimizer::{optimize, OptimizerTrace};
pub use propagation::{build_propagation, PropagationSet};
pub use wavefield::{SimState, SteeringVector};

//! Mean field control solver built on forward-backward score dynamics.
//!
//! The value function is approximated by a small squared-ReLU network whose
//! spatial gradient and Laplacian come out of the same forward pass. Particle
//! trajectories are rolled out with a kernel density estimate of the score,
//! and the network is fitted by matching its values to the backward
//! component along those trajectories. A stochastic (FBSDE) rollout is
//! provided as a baseline.

// indexed loops mirror the math in the numeric kernels
#![allow(clippy::needless_range_loop)]

pub mod dynamics;
pub mod kde;
pub mod metrics;
pub mod net;
pub mod problems;
pub mod scalar;
pub mod tape;
pub mod training;

pub use kde::KdeCloud;
pub use net::{NetConfig, NetParams, TerminalWrapper};
pub use scalar::Real;
pub use tape::{ExprId, Recording, Shape};

pub type NetParams64 = NetParams<f64>;
pub type NetParams32 = NetParams<f32>;
pub type Recording64 = Recording<f64>;
pub type Recording32 = Recording<f32>;
pub type KdeCloud64 = KdeCloud<f64>;

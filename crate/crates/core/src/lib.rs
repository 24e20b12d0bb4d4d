//! Physics-aware motion retargeting with single-loop bilevel optimization.
//!
//! A parameterized kinematic map turns source motion into target references;
//! a reinforcement-learning policy tracks those references in simulation, and
//! the map's parameters are updated from the tracking error on the fly.

pub mod bilevel;
pub mod config;
pub mod error;
pub mod frame;
pub mod metrics;
pub mod morphology;
pub mod objective;
pub mod refmap;
pub mod rotmath;
pub mod sim;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use frame::Frame;

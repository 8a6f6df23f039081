//! Neural event-triggered control with Lyapunov certificates.

pub mod baselines;
pub mod error;
pub mod etcsim;
pub mod experiment;
pub mod guarantees;
pub mod model;
pub mod nets;
pub mod odeint;
pub mod rng;
pub mod systems;
pub mod trainer;

pub use error::{NetcError, Result};
pub use systems::{System, SystemId};

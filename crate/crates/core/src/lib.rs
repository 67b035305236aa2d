//! Contraction-based control synthesis from Gaussian-process models of
//! discrete-time systems `x⁺ = f(x) + b(x) u`.

pub mod deriv_gp;
pub mod drift_gp;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod linalg;
pub mod lmi;
pub mod stochastic;
pub mod synthesis;
pub mod system;
pub mod verify_sim;

pub use error::{Error, Result};
pub use system::{Dynamics, FeedbackLaw, InputField, InputMap, SystemModel};

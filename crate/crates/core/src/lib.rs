//! Simulation toolkit for a two-mode Bose-Einstein condensate with
//! balanced particle gain and loss.
//!
//! The crate provides four cross-validating descriptions of the same
//! open system — exact dense master-equation integration, quantum-jump
//! Monte Carlo trajectories, the moment hierarchy with third-order
//! closure, and the closed-form solution of the non-interacting limit —
//! plus mean-field dynamics and a purity-revival analysis layer.

pub mod analysis;
pub mod bbr;
pub mod error;
pub mod fock;
pub mod jump;
pub mod lindblad;
pub mod linear;
pub mod meanfield;
pub mod ode;
pub mod optim;
pub mod output;
pub mod params;
pub(crate) mod shells;

pub use error::{Error, Result};
pub use params::SystemParams;

//! Simulation toolkit for nonequilibrium Langevin dynamics.
//!
//! Three levels of description of a heavy particle in a sheared bath are
//! provided, from finest to coarsest:
//!
//! * [`heatbath`]: event-driven elastic collisions with a Poisson field of
//!   light atoms that follow the background flow,
//! * [`markov`]: the Poisson jump process keeping only fast collisions,
//! * [`sde`]: the limiting Langevin equation `M dV = -γ(V - AQ)dt + σ dW`.
//!
//! [`md`] runs the many-particle Lennard-Jones shear experiment with
//! Lees-Edwards boundaries, and [`analysis`] holds the moment oracle and
//! trajectory statistics used to compare the levels. [`converge`] runs
//! the small-mass sweep against the moment oracle.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod converge;
pub mod error;
pub mod heatbath;
pub mod markov;
pub mod math;
pub mod md;
pub mod quad;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
pub use math::{flow_propagator, moment_phi, Mat3, Moments, StrainRate, Vec3, VelocityLaw};

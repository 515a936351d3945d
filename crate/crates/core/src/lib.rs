//! Numerical verification of diffusion hypotheses for a priori unstable
//! rotor-pendulum Hamiltonian systems.
//!
//! The library evaluates the Melnikov potential of a time-periodic
//! perturbation along unperturbed homoclinic orbits, certifies non-degenerate
//! critical points and their continuation (hypothesis H3a), checks that the
//! reduced Poincare function moves the actions (hypothesis H3b), iterates the
//! first-order scattering map against its effective Hamiltonian flow, measures
//! action jumps of full trajectories, and constructs explicit repair
//! perturbations when a hypothesis fails.

// coefficient tables carry more digits than f64 resolves, and the
// `!(x > 0)` comparisons deliberately reject NaN inputs
#![allow(clippy::excessive_precision)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::manual_is_multiple_of)]

pub mod config;
pub mod criticality;
pub mod dynamics;
pub mod effective;
pub mod error;
pub mod homoclinic;
pub mod integrate;
pub mod melnikov;
pub mod model;
pub mod pipeline;
pub mod quad;
pub mod reduced;
pub mod repair;
pub mod report;

pub use error::{Error, Result};
pub use model::{
    FourierSeries, Mode, Monomial, PendulumSpec, PerturbationSpec, RotorSpec, SystemSpec,
};

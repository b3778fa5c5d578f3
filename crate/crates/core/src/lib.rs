//! Numerical toolkit for stochastic optimal control problems whose transition
//! semigroup is an Ornstein-Uhlenbeck semigroup with an unbounded control
//! operator.
//!
//! The crate is organised around the pipeline
//!
//! ```text
//! models  ->  ou  ->  smoothing  ->  hjb  ->  sim
//! ```
//!
//! * [`models`] builds finite-dimensional surrogates of the two concrete
//!   systems (a spectrally truncated heat equation with Dirichlet boundary
//!   control and a stochastic delay equation with delay in the control) and
//!   the trajectory-lift operators.
//! * [`ou`] is the Gaussian engine: semigroup actions, covariances `Q_t`,
//!   sampling, pseudoinverse square roots and Cameron-Martin densities.
//! * [`smoothing`] assembles the Lambda operators, verifies the smoothing
//!   hypotheses numerically and evaluates the Monte-Carlo gradient
//!   representation formulas together with a finite-difference oracle.
//! * [`hjb`] solves the mild Hamilton-Jacobi-Bellman equation by contraction
//!   iteration on a feature grid.
//! * [`sim`] simulates the controlled dynamics forward and cross-validates
//!   the solved value function against direct policy evaluation.

pub mod error;
pub mod hjb;
pub mod models;
pub mod numeric;
pub mod ou;
pub mod rng;
pub mod sim;
pub mod smoothing;
pub mod spaces;

pub use error::CoreError;

//! Simulation library for the continuously monitored, driven-damped quantum
//! Duffing oscillator.
//!
//! * [`fock`]: truncated number-basis states, displacement, quadrature
//!   distributions, Wigner functions.
//! * [`classical`]: the classical Duffing baseline, Poincaré sections and the
//!   classical Lyapunov exponent.
//! * [`sse`]: homodyne-unraveled stochastic Schrödinger propagation and the
//!   dense master-equation reference integrator.
//! * [`control`]: fringe-direction estimation and local-oscillator phase selection.
//! * [`lyapunov`]: twin-trajectory quantum Lyapunov exponents.
//! * [`runner`]: configuration, seeding, sweeps, export and the CLI.

pub mod classical;
pub mod control;
pub mod fock;
pub mod lyapunov;
pub mod runner;
pub mod sse;

pub use fock::{C64, FockState, PhasePoint};

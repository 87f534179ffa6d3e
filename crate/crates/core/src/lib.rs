//! Distributed temporal-difference policy evaluation over graph Laplacians.
//!
//! The crate is organised bottom-up:
//!
//! * [`mdp`] builds the evaluation problem (`A`, `b_i`, `θ_c`) from a multi-agent MDP.
//! * [`graph`] assembles communication graphs, Laplacians and their Kronecker lifts.
//! * [`pd`] holds the continuous-time primal-dual dynamics and their Lyapunov certificate.
//! * [`sampler`] produces i.i.d. or Markovian observations and exact mixing times.
//! * [`td`] is the distributed TD algorithm with its equilibrium, error metric and certificate.
//! * [`baselines`] implements consensus TD with doubly stochastic mixing matrices.
//! * [`harness`] runs seeded experiments and writes CSV, JSON and SVG outputs.

// NaN-rejecting comparisons such as `!(x > 0.0)` are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod graph;
pub mod harness;
pub mod mdp;
pub mod pd;
pub mod rng;
pub mod sampler;
pub mod td;

pub use error::{Error, Result};
pub use exec::Execution;

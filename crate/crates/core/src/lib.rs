//! POD-Galerkin reduced order models of quadratic dynamical systems with
//! Bayesian identification of additive correction tensors.
//!
//! The toolkit covers the whole workflow: snapshot generation with desk-scale
//! full order models (1D viscous Burgers, synthetic quadratic truth), POD
//! basis extraction, Galerkin assembly and BDF2 integration of the reduced
//! ODE, ensemble and square-root polynomial-chaos forms of the
//! Gauss-Markov-Kalman smoother for the correction parameters, sparse
//! Bayesian (relevance vector machine) regression and variance-based
//! sensitivity screening, plus a config-driven pipeline and CLI on top.

pub mod config;
pub mod enkf;
pub mod error;
pub mod fom;
pub mod io;
pub mod linalg;
pub mod pce;
pub mod pipeline;
pub mod pod;
pub mod prior;
pub mod rng;
pub mod rom;
pub mod rvm;
pub mod sensitivity;
pub mod tensor;

pub use error::{Result, RomError};

//! Sign-compressed gradient methods with executable convergence guarantees.
//!
//! The crate implements plain, scaled and error-feedback sign descent,
//! sign-AdaGrad variants, a majority-vote parameter-server simulation with
//! exact bit accounting, the closed-form rate constants those methods obey,
//! and forward-Euler integration of the continuous-time gradient and sign
//! flows.

pub mod continuous;
pub mod distributed;
pub mod error;
pub mod objectives;
pub mod optimizers;
pub mod oracles;
pub mod par;
pub mod theory;
pub mod vecmath;

pub use error::{Error, Result};
pub use objectives::{ConstantSet, Objective, Quadratic};
pub use optimizers::{Method, Schedule, Trace};
pub use oracles::{ExactGradient, GradientSource, StochasticOracle};
pub use par::Execution;
pub use vecmath::DenseVector;

//! Bit-exact simulation of training on 16-bit floating point units.
//!
//! The crate models reduced-precision formats ([`floatsim`]), FMAC operators
//! with a wide accumulator and a single output rounding ([`qlinalg`]),
//! synthetic least-squares and MLP problems ([`models`]), SGD/AdamW with
//! nearest, stochastic and Kahan-compensated weight updates ([`optim`]),
//! closed-form convergence bounds with empirical validators ([`bounds`]), and
//! the experiment harness behind the `lowprec` CLI ([`harness`]).

pub mod error;
pub mod bounds;
pub mod floatsim;
pub mod harness;
pub mod models;
pub mod optim;
pub mod qlinalg;
pub mod rng;

pub use error::{Error, Result};
pub use floatsim::{FloatFormat, Rounding, RoundingMode};
pub use qlinalg::{AccumPrecision, QTensor, Shape};
pub use optim::UpdatePolicy;
pub use rng::RngStream;

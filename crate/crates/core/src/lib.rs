//! Slow traveling vortex pairs for the generalized surface quasi-geostrophic
//! equation.
//!
//! The crate computes half-plane energy maximizers with prescribed mass,
//! their radial whole-plane limit, the integral identities they satisfy, and
//! runs transport experiments probing their orbital stability.

// `!(x > y)` is how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anderson;
pub mod conv;
pub mod error;
pub mod evolution;
pub mod fields;
pub mod fixed_point;
pub mod io;
pub mod kernels;
pub mod limiting;
pub mod pair;
pub mod profiles;
pub mod real;
pub mod rearrange;
pub mod special;

pub use error::{GsqgError, Result};
pub use real::Real;

/// Double-precision instantiations.
pub type Grid = fields::Grid2D<f64>;
pub type Field = fields::Field2D<f64>;
pub type Radial = fields::RadialField<f64>;
pub type Power = profiles::PowerProfile<f64>;
pub type Constants = profiles::StructConstants<f64>;
pub type Kernel = kernels::KernelParams<f64>;
pub type Limiting = limiting::LimitingSolution<f64>;
pub type Pair = pair::PairProblem<f64>;
pub type PairSol = pair::PairSolution<f64>;

/// Single-precision instantiations.
pub type Grid32 = fields::Grid2D<f32>;
pub type Field32 = fields::Field2D<f32>;
pub type Power32 = profiles::PowerProfile<f32>;
pub type Pair32 = pair::PairProblem<f32>;

//! Synthesis and validation of probabilistically safe controllers for
//! discrete-time stochastic control-affine systems
//!
//! ```text
//! x_{k+1} = f(x_k) + g(x_k) u_k + w_k,   w_k ~ N(0, Σ)
//! ```
//!
//! using control barrier functions whose auxiliary transforms turn the
//! barrier trajectory into a nonnegative supermartingale. The crate provides
//! closed-form Gaussian moments of barrier transforms, residual evaluators for
//! four condition families, a minimum-deviation safety filter, K-step exit
//! probability bounds, and a seeded Monte-Carlo harness to check them.
//!
//! The numerical core is generic over [`Real`] (implemented for `f32` and
//! `f64`). The `*64` aliases at the crate root fix the scalar to `f64`, which
//! is what the simulation presets and the CLI use.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod barrier;
pub mod bounds;
pub mod condition;
pub mod error;
pub mod filter;
pub mod linalg;
pub mod moments;
pub mod presets;
pub mod scenario;
pub mod sim;
pub mod system;
pub mod verify;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use barrier::{QuadraticBarrier, SafeSet};
pub use bounds::BoundReport;
pub use condition::{CbfCondition, ConditionFamily, Convexity};
pub use error::{Error, Result};
pub use filter::{FallbackPolicy, FilterResult, SolverOptions, SolverStatus};
pub use moments::ExpQuadMoment;
pub use presets::{preset, PresetId, ScenarioPreset};
pub use scenario::{NominalPolicy, Scenario};
pub use sim::{EmpiricalResult, SimOptions, TrajectoryRecord};
pub use system::{ControlAffineSystem, Dynamics};

/// Floating-point scalar the numerical core is written against.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// One draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub(crate) fn lit<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("f64 literal representable in scalar type")
}

/// Converts a scalar to `f64` for reporting.
#[inline]
pub(crate) fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

pub type ControlAffineSystem64 = ControlAffineSystem<f64>;
pub type QuadraticBarrier64 = QuadraticBarrier<f64>;
pub type SafeSet64 = SafeSet<f64>;
pub type Scenario64 = Scenario<f64>;
pub type CbfCondition64 = CbfCondition<f64>;
pub type FilterResult64 = FilterResult<f64>;
pub type SolverOptions64 = SolverOptions<f64>;
pub type TrajectoryRecord64 = TrajectoryRecord<f64>;
pub type ScenarioPreset64 = ScenarioPreset<f64>;

pub type ControlAffineSystem32 = ControlAffineSystem<f32>;
pub type QuadraticBarrier32 = QuadraticBarrier<f32>;
pub type Scenario32 = Scenario<f32>;

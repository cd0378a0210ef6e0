//! K-step exit-probability bounds.
//!
//! Each condition family comes with an auxiliary function `Φ(h, k)` that is
//! nonnegative and decreasing in `h`, and whose value along closed-loop
//! trajectories is a supermartingale. The bound is `Φ(h(x₀), 0) / min_k Φ(0, k)`.
//!
//! | family | `Φ(h, k)` | bound |
//! |---|---|---|
//! | linear zeroing | `B − α^{K−k} h` | `1 − αᴷ h₀ / B` |
//! | c-martingale | `B − h + (K − k)β` | `1 − (h₀ − Kβ) / B` |
//! | polynomial | `(h − B)² + (K − k)β` | `((h₀ − B)² + Kβ) / B²` |
//! | exponential | `exp(−a h) + (K − k)β` | `exp(−a h₀) + Kβ` |
//!
//! Raw bounds may exceed 1; [`BoundReport`] keeps the raw value and clips a copy.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::QuadraticBarrier;
use crate::condition::ConditionFamily;
use crate::error::{Error, Result};
use crate::moments::expected_square_centered_quadratic;
use crate::scenario::Scenario;
use crate::system::ControlAffineSystem;
use crate::{linalg, lit, to_f64, Real};

fn pow_k<T: Real>(base: T, k: usize) -> T {
    base.powf(lit::<T>(k as f64))
}

/// `Φ(h(x₀), 0) / Φ_floor`.
pub fn bound_general<T: Real>(phi_at_x0: T, phi_floor: T) -> Result<T> {
    if !(phi_floor > T::zero()) {
        return Err(Error::InvalidArgument(format!("Φ floor must be > 0, got {phi_floor:?}")));
    }
    Ok(phi_at_x0 / phi_floor)
}

/// `1 − αᴷ h₀ / B`.
pub fn bound_linear<T: Real>(h_x0: T, upper: T, alpha: T, horizon: usize) -> Result<T> {
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::AlphaOutOfRange { alpha: to_f64(alpha) });
    }
    if !(upper > T::zero()) {
        return Err(Error::InvalidArgument(format!("B must be > 0, got {upper:?}")));
    }
    if !(h_x0 >= T::zero() && h_x0 <= upper) {
        return Err(Error::InvalidArgument(format!("h(x0) = {h_x0:?} outside [0, B]")));
    }
    Ok(T::one() - pow_k(alpha, horizon) * h_x0 / upper)
}

/// `1 − (h₀ − βK) / B`.
pub fn bound_c_martingale<T: Real>(h_x0: T, upper: T, beta: T, horizon: usize) -> Result<T> {
    if !(upper > T::zero()) {
        return Err(Error::InvalidArgument(format!("B must be > 0, got {upper:?}")));
    }
    Ok(T::one() - (h_x0 - beta * lit::<T>(horizon as f64)) / upper)
}

/// `((h₀ − B)² + Kβ) / B²`.
pub fn bound_poly<T: Real>(h_x0: T, upper: T, beta: T, horizon: usize) -> Result<T> {
    if !(upper > T::zero()) {
        return Err(Error::InvalidArgument(format!("B must be > 0, got {upper:?}")));
    }
    let gap = h_x0 - upper;
    Ok((gap * gap + lit::<T>(horizon as f64) * beta) / (upper * upper))
}

/// `exp(−a h₀) + Kβ`, taking the already scaled `a h₀`.
pub fn bound_exp_quad<T: Real>(h_x0_scaled: T, beta: T, horizon: usize) -> Result<T> {
    if !(beta >= T::zero()) {
        return Err(Error::InvalidArgument(format!("β must be >= 0, got {beta:?}")));
    }
    Ok((-h_x0_scaled).exp() + lit::<T>(horizon as f64) * beta)
}

/// Union bound over barriers: the plain sum.
pub fn bound_boole<T: Real>(per_barrier: &[T]) -> Result<T> {
    if per_barrier.is_empty() {
        return Err(Error::InvalidArgument("Boole aggregation of an empty list".into()));
    }
    if let Some(bad) = per_barrier.iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::InvalidArgument(format!("negative per-barrier bound {bad:?}")));
    }
    Ok(per_barrier.iter().fold(T::zero(), |acc, v| acc + *v))
}

fn require_upper<T: Real>(bar: &QuadraticBarrier<T>, family: &str) -> Result<T> {
    bar.upper_bound()
        .ok_or_else(|| Error::InvalidArgument(format!("{family} condition needs an upper bound B on h")))
}

/// `Φ(h, k)` for the family over horizon `K`. `h` is unscaled.
pub fn phi<T: Real>(family: &ConditionFamily<T>, bar: &QuadraticBarrier<T>, h: T, k: usize, horizon: usize) -> Result<T> {
    let remaining = lit::<T>(horizon.saturating_sub(k) as f64);
    Ok(match *family {
        ConditionFamily::LinearZeroing { alpha } => {
            let upper = require_upper(bar, family.name())?;
            upper - pow_k(alpha, horizon.saturating_sub(k)) * h
        }
        ConditionFamily::CMartingale { beta } => {
            let upper = require_upper(bar, family.name())?;
            upper - h + remaining * beta
        }
        ConditionFamily::PolynomialSquared { beta } => {
            let upper = require_upper(bar, family.name())?;
            (h - upper) * (h - upper) + remaining * beta
        }
        ConditionFamily::ExpQuadratic { beta } => (-(bar.scale() * h)).exp() + remaining * beta,
    })
}

/// `min_{0≤k≤K} Φ(0, k)`.
pub fn phi_floor<T: Real>(family: &ConditionFamily<T>, bar: &QuadraticBarrier<T>, horizon: usize) -> Result<T> {
    let mut floor = phi(family, bar, T::zero(), 0, horizon)?;
    for k in 1..=horizon {
        floor = floor.min(phi(family, bar, T::zero(), k, horizon)?);
    }
    Ok(floor)
}

/// `E[Φ(h(F(x,u) + w), k + 1) | x]` in closed form.
pub fn expected_next_phi<T: Real>(
    family: &ConditionFamily<T>,
    sys: &ControlAffineSystem<T>,
    bar: &QuadraticBarrier<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    k: usize,
    horizon: usize,
) -> Result<T> {
    let f = sys.drift_eval(x, u)?;
    let remaining = lit::<T>(horizon.saturating_sub(k + 1) as f64);
    let mean_h = || -> Result<T> { Ok(bar.eval(&f)? + linalg::trace_of_product(bar.a(), sys.noise_cov())) };
    Ok(match *family {
        ConditionFamily::LinearZeroing { alpha } => {
            let upper = require_upper(bar, family.name())?;
            upper - pow_k(alpha, horizon.saturating_sub(k + 1)) * mean_h()?
        }
        ConditionFamily::CMartingale { beta } => {
            let upper = require_upper(bar, family.name())?;
            upper - mean_h()? + remaining * beta
        }
        ConditionFamily::PolynomialSquared { beta } => {
            require_upper(bar, family.name())?;
            expected_square_centered_quadratic(bar.a(), sys.noise_cov(), &f)? + remaining * beta
        }
        ConditionFamily::ExpQuadratic { beta } => {
            crate::moments::expected_exp_neg_quadratic(bar, sys.noise_cov(), &f)? + remaining * beta
        }
    })
}

/// Bound for one condition started at `x0`.
pub fn bound_for_condition<T: Real>(
    family: &ConditionFamily<T>,
    bar: &QuadraticBarrier<T>,
    x0: &DVector<T>,
    horizon: usize,
) -> Result<T> {
    let h0 = bar.eval(x0)?;
    match *family {
        ConditionFamily::LinearZeroing { alpha } => {
            bound_linear(h0, require_upper(bar, family.name())?, alpha, horizon)
        }
        ConditionFamily::CMartingale { beta } => {
            bound_c_martingale(h0, require_upper(bar, family.name())?, beta, horizon)
        }
        ConditionFamily::PolynomialSquared { beta } => {
            bound_poly(h0, require_upper(bar, family.name())?, beta, horizon)
        }
        ConditionFamily::ExpQuadratic { beta } => bound_exp_quad(bar.scale() * h0, beta, horizon),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Unclipped bound (may exceed 1).
    pub raw: f64,
    /// `clamp(raw, 0, 1)`.
    pub bound: f64,
    pub family: String,
    pub horizon: usize,
    pub initial_state: Vec<f64>,
    /// One raw term per barrier condition; their sum is `raw`.
    pub per_barrier_terms: Vec<f64>,
}

fn clip(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Bound at `x0` over `horizon`, Boole-aggregated over the scenario's conditions.
pub fn bound_at<T: Real>(scenario: &Scenario<T>, x0: &DVector<T>, horizon: usize) -> Result<BoundReport> {
    let set = &scenario.safe_set;
    let mut terms = Vec::with_capacity(scenario.conditions.len());
    for cond in &scenario.conditions {
        terms.push(bound_for_condition(&cond.family, cond.barrier(set)?, x0, horizon)?);
    }
    let raw = if terms.len() == 1 { terms[0] } else { bound_boole(&terms)? };
    let family = match scenario.conditions.as_slice() {
        [only] => only.family.name().to_string(),
        _ => "boole".to_string(),
    };
    Ok(BoundReport {
        raw: to_f64(raw),
        bound: clip(to_f64(raw)),
        family,
        horizon,
        initial_state: x0.iter().map(|v| to_f64(*v)).collect(),
        per_barrier_terms: terms.into_iter().map(to_f64).collect(),
    })
}

/// Bound of the scenario from its own initial state and horizon.
pub fn scenario_bound<T: Real>(scenario: &Scenario<T>) -> Result<BoundReport> {
    bound_at(scenario, &scenario.initial_state, scenario.horizon)
}

/// One grid axis: `points` evenly spaced values on `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if points == 0 || !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("bad grid axis [{lo}, {hi}] with {points} points")));
        }
        Ok(Self { lo, hi, points })
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.points == 1 {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.points - 1) as f64
        }
    }
}

/// Clipped bounds on a 1D or 2D state grid, row-major with the last axis fastest.
/// Points outside the safe set hold `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundGrid {
    pub axes: Vec<GridAxis>,
    pub points: Vec<Vec<f64>>,
    pub bounds: Vec<f64>,
}

pub fn bound_grid(scenario: &Scenario<f64>, axes: &[GridAxis], horizon: usize) -> Result<BoundGrid> {
    let n = scenario.system.state_dim();
    if axes.is_empty() || axes.len() > 2 {
        return Err(Error::InvalidArgument(format!("grids are 1D or 2D, got {} axes", axes.len())));
    }
    if axes.len() != n {
        return Err(Error::dim("grid axes", n, axes.len()));
    }
    let total: usize = axes.iter().map(|a| a.points).product();
    let points: Vec<Vec<f64>> = (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut p = vec![0.0; axes.len()];
            for (d, axis) in axes.iter().enumerate().rev() {
                p[d] = axis.value(rem % axis.points);
                rem /= axis.points;
            }
            p
        })
        .collect();
    let bounds = points
        .par_iter()
        .map(|p| {
            let x = DVector::from_column_slice(p);
            if !scenario.safe_set.contains(&x) {
                return Ok(f64::NAN);
            }
            Ok(bound_at(scenario, &x, horizon)?.bound)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(BoundGrid {
        axes: axes.to_vec(),
        points,
        bounds,
    })
}

/// Writes `x1[,x2],bound` rows; unsafe points get an empty bound cell.
pub fn write_grid_csv<W: Write>(grid: &BoundGrid, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Document(e.to_string());
    let mut header: Vec<String> = (1..=grid.axes.len()).map(|i| format!("x{i}")).collect();
    header.push("bound".into());
    w.write_record(&header).map_err(io)?;
    for (p, b) in grid.points.iter().zip(&grid.bounds) {
        let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        row.push(if b.is_nan() { String::new() } else { b.to_string() });
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Document(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::{max_feasible_alpha, max_feasible_beta_poly};
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn pendulum_bar() -> QuadraticBarrier<f64> {
        let k = -36.0 / std::f64::consts::PI.powi(2);
        let s = 1.0 / 3f64.sqrt();
        QuadraticBarrier::new(dmatrix![k, k * s; k * s, k], dvector![0.0, 0.0], 1.0)
            .unwrap()
            .with_upper_bound(1.0)
            .unwrap()
    }

    fn pendulum_sigma() -> nalgebra::DMatrix<f64> {
        dmatrix![0.05f64.powi(2) * 0.01, 0.0; 0.0, 0.25f64.powi(2) * 0.01]
    }

    #[test]
    fn general_examples() {
        assert_eq!(bound_general(2.0, 2.0).unwrap(), 1.0);
        assert_eq!(bound_general(0.5, 1.0).unwrap(), 0.5);
        assert!(bound_general(0.5, 0.0).is_err());
    }

    #[test]
    fn linear_examples() {
        let alpha = max_feasible_alpha(&pendulum_bar(), &pendulum_sigma()).unwrap();
        let b = bound_linear(1.0, 1.0, alpha, 100).unwrap();
        assert!((b - 0.21130301144656105).abs() < 1e-12, "{b}");
        assert_eq!(bound_linear(0.0, 1.0, 0.9, 10).unwrap(), 1.0);
        assert!((bound_linear(0.4f64, 1.0, 0.9, 0).unwrap() - 0.6).abs() < 1e-15);
        assert!(bound_linear(1.0, 1.0, 1.0, 10).is_err());
        assert!(bound_linear(2.0, 1.0, 0.5, 10).is_err());
    }

    #[test]
    fn c_martingale_examples() {
        assert_eq!(bound_c_martingale(1.0, 1.0, 0.0, 50).unwrap(), 0.0);
        assert!((bound_c_martingale(1.0f64, 1.0, 0.01, 100).unwrap() - 1.0).abs() < 1e-15);
        assert!((bound_c_martingale(0.8f64, 1.0, 1e-3, 100).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn poly_examples() {
        let beta = max_feasible_beta_poly(&pendulum_bar(), &pendulum_sigma()).unwrap();
        let b = bound_poly(1.0, 1.0, beta, 100).unwrap();
        assert_eq!(b, 100.0 * beta);
        assert!((b - 1.6309360688371913e-3).abs() < 1e-15);
        assert!((bound_poly(0.0f64, 2.0, 0.1, 8).unwrap() - (1.0 + 0.8 / 4.0)).abs() < 1e-15);
        assert_eq!(bound_poly(1.0, 1.0, 0.0, 8).unwrap(), 0.0);
    }

    #[test]
    fn exp_quad_examples() {
        let b = bound_exp_quad(10.0, 1e-5, 100).unwrap();
        assert!((b - ((-10f64).exp() + 1e-3)).abs() < 1e-12);
        let b = bound_exp_quad(20.0 * 30.55, 1e-4, 300).unwrap();
        assert!((0.0299..=0.0301).contains(&b));
        assert_eq!(bound_exp_quad(0.0, 0.0, 7).unwrap(), 1.0);
    }

    #[test]
    fn boole_examples() {
        assert_eq!(bound_boole(&[0.3]).unwrap(), 0.3);
        assert!((bound_boole(&[0.0025f64; 4]).unwrap() - 0.01).abs() < 1e-15);
        assert!(bound_boole::<f64>(&[]).is_err());
        assert!(bound_boole(&[0.1, -0.1]).is_err());
    }

    #[test]
    fn general_instantiations_match_closed_forms() {
        let bar = pendulum_bar().with_scale(10.0).unwrap();
        let lin = ConditionFamily::LinearZeroing { alpha: 0.97 };
        let g = bound_general(phi(&lin, &bar, 0.6, 0, 40).unwrap(), phi_floor(&lin, &bar, 40).unwrap()).unwrap();
        assert!((g - bound_linear(0.6, 1.0, 0.97, 40).unwrap()).abs() < 1e-14);
        let cm = ConditionFamily::CMartingale { beta: 1e-3 };
        let g = bound_general(phi(&cm, &bar, 0.6, 0, 40).unwrap(), phi_floor(&cm, &bar, 40).unwrap()).unwrap();
        assert!((g - bound_c_martingale(0.6, 1.0, 1e-3, 40).unwrap()).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn general_reproduces_poly_and_exp(h in 0.0..1.0f64, beta in 0.0..1e-2f64, k in 0usize..400, scale in 1.0..50.0f64) {
            let bar = pendulum_bar().with_scale(scale).unwrap();
            let poly = ConditionFamily::PolynomialSquared { beta };
            let g = bound_general(phi(&poly, &bar, h, 0, k).unwrap(), phi_floor(&poly, &bar, k).unwrap()).unwrap();
            let direct = bound_poly(h, 1.0, beta, k).unwrap();
            prop_assert!((g - direct).abs() <= 1e-12 * direct.abs().max(f64::MIN_POSITIVE));
            let exp = ConditionFamily::ExpQuadratic { beta };
            prop_assert_eq!(phi_floor(&exp, &bar, k).unwrap(), 1.0);
            let g = bound_general(phi(&exp, &bar, h, 0, k).unwrap(), 1.0).unwrap();
            let direct = bound_exp_quad(scale * h, beta, k).unwrap();
            prop_assert!((g - direct).abs() <= 1e-12 * direct.abs());
        }

        #[test]
        fn bounds_nonincreasing_in_h(h1 in 0.0..1.0f64, h2 in 0.0..1.0f64, beta in 0.0..1e-3f64, k in 0usize..300) {
            let (lo, hi) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
            prop_assert!(bound_linear(hi, 1.0, 0.99, k).unwrap() <= bound_linear(lo, 1.0, 0.99, k).unwrap());
            prop_assert!(bound_c_martingale(hi, 1.0, beta, k).unwrap() <= bound_c_martingale(lo, 1.0, beta, k).unwrap());
            prop_assert!(bound_poly(hi, 1.0, beta, k).unwrap() <= bound_poly(lo, 1.0, beta, k).unwrap());
            prop_assert!(bound_exp_quad(10.0 * hi, beta, k).unwrap() <= bound_exp_quad(10.0 * lo, beta, k).unwrap());
        }

        #[test]
        fn exp_bound_monotone_in_k_and_beta(h in 0.0..50.0f64, b1 in 0.0..1e-2f64, b2 in 0.0..1e-2f64, k1 in 0usize..500, k2 in 0usize..500) {
            let (bl, bh) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let (kl, kh) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            prop_assert!(bound_exp_quad(h, bl, kl).unwrap() <= bound_exp_quad(h, bh, kl).unwrap());
            prop_assert!(bound_exp_quad(h, bl, kl).unwrap() <= bound_exp_quad(h, bl, kh).unwrap());
        }

        #[test]
        fn boole_is_exact_sum(v in proptest::collection::vec(0.0..1.0f64, 1..8)) {
            let s: f64 = v.iter().sum();
            prop_assert_eq!(bound_boole(&v).unwrap(), s);
        }
    }
}

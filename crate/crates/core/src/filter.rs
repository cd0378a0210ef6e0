//! Minimum-deviation safety filter: `u* = argmin ‖u − u_nom‖²` subject to
//! `residual(x, u) ≥ 0`.
//!
//! Solver selection:
//! - scalar input and a residual quadratic in `u`: exact interval clamp,
//! - residual certified concave in `u`: single-constraint KKT solve on the multiplier,
//! - otherwise (and for several simultaneous barriers): multi-start augmented Lagrangian.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{QuadraticBarrier, SafeSet};
use crate::condition::{
    concave_in_input, condition_residual, input_residual, CbfCondition, ConditionFamily, InputResidual,
};
use crate::error::{Error, Result};
use crate::system::ControlAffineSystem;
use crate::{linalg, lit, to_f64, Real};

/// A returned input counts as feasible when its residual is at least `-FEASIBILITY_TOL`.
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Analytic,
    KktConverged,
    MultistartBest,
    InfeasibleFallback,
}

/// What to do when no input satisfies the condition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackPolicy {
    /// Report [`Error::Infeasible`].
    #[default]
    Error,
    /// Apply the input with the largest residual found and mark the result.
    MaxResidual,
}

impl FromStr for FallbackPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "error" => Ok(FallbackPolicy::Error),
            "max-residual" | "max_residual" => Ok(FallbackPolicy::MaxResidual),
            other => Err(Error::InvalidArgument(format!("unknown fallback policy `{other}`"))),
        }
    }
}

impl fmt::Display for FallbackPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FallbackPolicy::Error => "error",
            FallbackPolicy::MaxResidual => "max-residual",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions<T> {
    /// Constraint tolerance of the KKT solve.
    pub tol: T,
    /// Maximum multiplier iterations.
    pub max_iter: usize,
    /// Low-discrepancy starts added after `u_nom` and the `2m` axis starts.
    pub multistart_extra: usize,
    /// Multi-start radius; `5·(1 + ‖u_nom‖)` when `None`.
    pub radius: Option<T>,
    pub fallback: FallbackPolicy,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            tol: lit(1e-10),
            max_iter: 200,
            multistart_extra: 4,
            radius: None,
            fallback: FallbackPolicy::Error,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult<T: Real> {
    pub u_star: DVector<T>,
    pub residual_at_solution: T,
    pub solver_status: SolverStatus,
    pub iterations: usize,
    /// ‖u* − u_nom‖
    pub distance: T,
}

impl<T: Real> FilterResult<T> {
    fn new(u_star: DVector<T>, u_nom: &DVector<T>, residual: T, status: SolverStatus, iterations: usize) -> Self {
        let distance = (&u_star - u_nom).norm();
        Self {
            u_star,
            residual_at_solution: residual,
            solver_status: status,
            iterations,
            distance,
        }
    }

    fn identity(u_nom: &DVector<T>, residual: T, status: SolverStatus) -> Self {
        Self {
            u_star: u_nom.clone(),
            residual_at_solution: residual,
            solver_status: status,
            iterations: 0,
            distance: T::zero(),
        }
    }
}

fn feasible<T: Real>(r: T) -> bool {
    r >= -lit::<T>(FEASIBILITY_TOL)
}

/// Exact minimiser of `|u − u_nom|` over `{u : q u² + l u + c ≥ 0}`.
pub fn solve_scalar_interval<T: Real>(q: T, l: T, c: T, u_nom: T) -> Result<FilterResult<T>> {
    let poly = |u: T| (q * u + l) * u + c;
    let nom = DVector::from_element(1, u_nom);
    let r_nom = poly(u_nom);
    if r_nom >= T::zero() {
        return Ok(FilterResult::identity(&nom, r_nom, SolverStatus::Analytic));
    }
    let infeasible = |best: T| Error::Infeasible {
        best_residual: to_f64(best),
    };
    let candidate = if q == T::zero() {
        if l == T::zero() {
            return Err(infeasible(c));
        }
        -c / l
    } else {
        let disc = l * l - lit::<T>(4.0) * q * c;
        if disc < T::zero() {
            // Empty for q < 0; for q > 0 the polynomial is positive everywhere,
            // which the r_nom check already excluded.
            let vertex = -l / (lit::<T>(2.0) * q);
            return Err(infeasible(poly(vertex)));
        }
        let sq = disc.sqrt();
        let sign = if l >= T::zero() { T::one() } else { -T::one() };
        let t = -lit::<T>(0.5) * (l + sign * sq);
        let (r1, r2) = if t == T::zero() {
            (T::zero(), T::zero())
        } else {
            let a = t / q;
            let b = c / t;
            if a <= b { (a, b) } else { (b, a) }
        };
        if q < T::zero() {
            // Feasible set [r1, r2]; u_nom lies outside it.
            if u_nom < r1 { r1 } else { r2 }
        } else if (u_nom - r1).abs() <= (r2 - u_nom).abs() {
            r1
        } else {
            r2
        }
    };
    let mut u = candidate;
    let mut iterations = 0;
    // Newton correction onto the feasible side of the root.
    while poly(u) < T::zero() && iterations < 4 {
        let slope = lit::<T>(2.0) * q * u + l;
        if slope == T::zero() {
            break;
        }
        let step = -poly(u) / slope;
        let nudge = u.abs().max(T::one()) * T::default_epsilon();
        u += step + if step >= T::zero() { nudge } else { -nudge };
        iterations += 1;
    }
    let r = poly(u);
    if !feasible(r) {
        return Err(infeasible(r));
    }
    Ok(FilterResult::new(DVector::from_element(1, u), &nom, r, SolverStatus::Analytic, iterations))
}

/// Minimiser of `‖u − u_nom‖² − μ r(u)` by damped Newton, warm started at `u`.
fn penalised_minimiser<T: Real>(
    residual: &dyn InputResidual<T>,
    u_nom: &DVector<T>,
    mu: T,
    mut u: DVector<T>,
) -> DVector<T> {
    let two = lit::<T>(2.0);
    let m = u_nom.len();
    let objective = |v: &DVector<T>| (v - u_nom).norm_squared() - mu * residual.value(v);
    for _ in 0..100 {
        let grad = (&u - u_nom) * two - residual.gradient(&u) * mu;
        let scale = T::one() + u.norm() + mu * residual.gradient(&u).norm();
        if grad.norm() <= lit::<T>(1e-14) * scale {
            break;
        }
        let hess = DMatrix::identity(m, m) * two - residual.hessian(&u) * mu;
        let dir = solve_regularised(&hess, &(-&grad));
        let f0 = objective(&u);
        let slope = grad.dot(&dir);
        if -slope <= lit::<T>(1e-12) * (T::one() + f0.abs()) {
            // Predicted decrease is below the rounding level of the objective.
            u += dir;
            continue;
        }
        let mut t = T::one();
        let mut moved = false;
        for _ in 0..60 {
            let trial = &u + &dir * t;
            if objective(&trial) <= f0 + lit::<T>(1e-4) * t * slope {
                u = trial;
                moved = true;
                break;
            }
            t *= lit::<T>(0.5);
        }
        if !moved {
            break;
        }
    }
    u
}

/// Solves `H d = b`, shifting `H` by a multiple of the identity until it is positive definite.
fn solve_regularised<T: Real>(hess: &DMatrix<T>, rhs: &DVector<T>) -> DVector<T> {
    let m = hess.nrows();
    let sym = (hess + hess.transpose()) * lit::<T>(0.5);
    let mut shift = T::zero();
    let base = lit::<T>(1e-10) * (T::one() + sym.amax());
    for _ in 0..80 {
        let trial = &sym + DMatrix::identity(m, m) * shift;
        if let Some(chol) = linalg::cholesky(&trial) {
            return chol.solve(rhs);
        }
        shift = if shift == T::zero() { base } else { shift * lit::<T>(4.0) };
    }
    rhs.clone()
}

/// Single-constraint KKT solve for a residual concave in `u`:
/// `u = u_nom + (μ/2)∇r(u)`, `r(u) = 0`, found by safeguarded root finding on `μ ≥ 0`.
pub fn solve_convex_kkt<T: Real>(
    residual: &dyn InputResidual<T>,
    u_nom: &DVector<T>,
    opts: &SolverOptions<T>,
) -> Result<FilterResult<T>> {
    let r_nom = residual.value(u_nom);
    if r_nom >= T::zero() {
        return Ok(FilterResult::identity(u_nom, r_nom, SolverStatus::KktConverged));
    }
    let mut iterations = 0;
    let mut lo = T::zero();
    let mut mu = T::one();
    let mut u_hi = penalised_minimiser(residual, u_nom, mu, u_nom.clone());
    let mut r_hi = residual.value(&u_hi);
    // Grow μ until the penalised minimiser is feasible.
    while r_hi < T::zero() {
        iterations += 1;
        let next_mu = mu * lit::<T>(10.0);
        let next_u = penalised_minimiser(residual, u_nom, next_mu, u_hi.clone());
        let next_r = residual.value(&next_u);
        let stalled = (&next_u - &u_hi).norm() <= lit::<T>(1e-12) * (T::one() + next_u.norm())
            && (next_r - r_hi).abs() <= lit::<T>(1e-14) * (T::one() + next_r.abs());
        lo = mu;
        mu = next_mu;
        u_hi = next_u;
        r_hi = next_r;
        if r_hi < T::zero() && (stalled || mu > lit::<T>(1e30) || iterations > opts.max_iter) {
            return Err(Error::Infeasible {
                best_residual: to_f64(r_hi),
            });
        }
    }
    let mut hi = mu;
    let tol = opts.tol;
    let m = u_nom.len();
    // Safeguarded Newton on φ(μ) = r(u(μ)), with φ'(μ) = ∇rᵀ(2I − μ∇²r)⁻¹∇r.
    let (mut mu, mut u, mut r) = (hi, u_hi.clone(), r_hi);
    loop {
        if r.abs() <= tol {
            break;
        }
        if hi - lo <= lit::<T>(4.0) * T::default_epsilon() * hi {
            // Bracket exhausted at working precision; keep the feasible end.
            u = u_hi.clone();
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence { iterations });
        }
        iterations += 1;
        let grad = residual.gradient(&u);
        let hess = DMatrix::identity(m, m) * lit::<T>(2.0) - residual.hessian(&u) * mu;
        let slope = grad.dot(&solve_regularised(&hess, &grad));
        let mut next = if slope > T::zero() { mu - r / slope } else { T::zero() };
        if !(next > lo && next < hi) {
            next = if lo > T::zero() && hi / lo > lit::<T>(100.0) {
                (lo * hi).sqrt()
            } else {
                lo + (hi - lo) * lit::<T>(0.5)
            };
        }
        mu = next;
        u = penalised_minimiser(residual, u_nom, mu, u.clone());
        r = residual.value(&u);
        if r >= T::zero() {
            hi = mu;
            u_hi = u.clone();
        } else {
            lo = mu;
        }
    }
    let r = residual.value(&u);
    Ok(FilterResult::new(u, u_nom, r, SolverStatus::KktConverged, iterations))
}

/// Radical-inverse (Halton) coordinate of `index` in base `base`.
fn radical_inverse(mut index: usize, base: usize) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * inv;
        index /= base;
        inv /= base as f64;
    }
    out
}

const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// `u_nom`, `u_nom ± radius·eᵢ`, then `extra` Halton points in the radius box.
pub fn multistart_points<T: Real>(u_nom: &DVector<T>, radius: T, extra: usize) -> Vec<DVector<T>> {
    let m = u_nom.len();
    let mut starts = Vec::with_capacity(1 + 2 * m + extra);
    starts.push(u_nom.clone());
    for i in 0..m {
        for sign in [T::one(), -T::one()] {
            let mut s = u_nom.clone();
            s[i] += sign * radius;
            starts.push(s);
        }
    }
    for k in 1..=extra {
        let offset = DVector::from_fn(m, |i, _| {
            let base = PRIMES[i % PRIMES.len()];
            lit::<T>(2.0 * radical_inverse(k, base) - 1.0)
        });
        starts.push(u_nom + offset * radius);
    }
    starts
}

fn min_residual<T: Real>(residuals: &[&dyn InputResidual<T>], u: &DVector<T>) -> (usize, T) {
    residuals
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.value(u)))
        .fold((0, T::max_value().expect("bounded scalar")), |acc, (i, v)| {
            if v < acc.1 { (i, v) } else { acc }
        })
}

/// Local augmented-Lagrangian solve of `min ‖u − u_nom‖²` s.t. `rᵢ(u) ≥ 0`.
fn augmented_lagrangian<T: Real>(
    residuals: &[&dyn InputResidual<T>],
    u_nom: &DVector<T>,
    start: &DVector<T>,
) -> (DVector<T>, usize) {
    let two = lit::<T>(2.0);
    let half = lit::<T>(0.5);
    let m = u_nom.len();
    let mut u = start.clone();
    let mut lambda = vec![T::zero(); residuals.len()];
    let mut rho = lit::<T>(10.0);
    let mut prev_violation = T::max_value().expect("bounded scalar");
    let mut iterations = 0;
    for _outer in 0..60 {
        let merit = |v: &DVector<T>| {
            let mut acc = (v - u_nom).norm_squared();
            for (r, &lam) in residuals.iter().zip(&lambda) {
                let s = (lam - rho * r.value(v)).max(T::zero());
                acc += (s * s - lam * lam) / (two * rho);
            }
            acc
        };
        for _inner in 0..100 {
            iterations += 1;
            let mut grad = (&u - u_nom) * two;
            let mut hess = DMatrix::<T>::identity(m, m) * two;
            for (r, &lam) in residuals.iter().zip(&lambda) {
                let s = lam - rho * r.value(&u);
                if s > T::zero() {
                    let g = r.gradient(&u);
                    grad -= &g * s;
                    hess += &g * g.transpose() * rho - r.hessian(&u) * s;
                }
            }
            if grad.norm() <= lit::<T>(1e-13) * (T::one() + u.norm() + u_nom.norm()) {
                break;
            }
            let dir = solve_regularised(&hess, &(-&grad));
            let slope = grad.dot(&dir);
            let dir = if slope < T::zero() { dir } else { -grad.clone() };
            let slope = grad.dot(&dir);
            let f0 = merit(&u);
            if -slope <= lit::<T>(1e-12) * (T::one() + f0.abs()) {
                u += dir;
                continue;
            }
            let mut t = T::one();
            let mut moved = false;
            for _ in 0..60 {
                let trial = &u + &dir * t;
                if merit(&trial) <= f0 + lit::<T>(1e-4) * t * slope {
                    u = trial;
                    moved = true;
                    break;
                }
                t *= half;
            }
            if !moved {
                break;
            }
        }
        let mut violation = T::zero();
        let mut complementarity = T::zero();
        for (r, lam) in residuals.iter().zip(lambda.iter_mut()) {
            let v = r.value(&u);
            violation = violation.max(-v);
            *lam = (*lam - rho * v).max(T::zero());
            complementarity = complementarity.max((*lam * v).abs());
        }
        if violation <= lit::<T>(1e-12) && complementarity <= lit::<T>(1e-10) {
            break;
        }
        if violation > lit::<T>(0.25) * prev_violation {
            rho *= lit::<T>(10.0);
        }
        prev_violation = violation;
        if rho > lit::<T>(1e14) {
            break;
        }
    }
    (restore_feasibility(residuals, u), iterations)
}

/// Gauss-Newton steps on the most violated residual until all are nonnegative.
fn restore_feasibility<T: Real>(residuals: &[&dyn InputResidual<T>], mut u: DVector<T>) -> DVector<T> {
    for _ in 0..30 {
        let (i, v) = min_residual(residuals, &u);
        if v >= T::zero() {
            break;
        }
        let g = residuals[i].gradient(&u);
        let gg = g.norm_squared();
        if gg == T::zero() {
            break;
        }
        let step = -v / gg * (T::one() + lit::<T>(1e-9));
        let nudge = lit::<T>(1e-15) * (T::one() + u.norm()) / gg.sqrt();
        u += &g * (step + nudge);
    }
    u
}

/// Backtracking ascent on `minᵢ rᵢ(u)`.
fn maximise_min_residual<T: Real>(
    residuals: &[&dyn InputResidual<T>],
    start: &DVector<T>,
    radius: T,
) -> DVector<T> {
    let mut u = start.clone();
    let mut step = radius;
    for _ in 0..400 {
        let (i, v) = min_residual(residuals, &u);
        let g = residuals[i].gradient(&u);
        let norm = g.norm();
        if norm == T::zero() || step < lit::<T>(1e-10) * (T::one() + u.norm()) {
            break;
        }
        let trial = &u + &g * (step / norm);
        if min_residual(residuals, &trial).1 > v {
            u = trial;
            step *= lit::<T>(1.5);
        } else {
            step *= lit::<T>(0.5);
        }
    }
    u
}

fn default_radius<T: Real>(u_nom: &DVector<T>, opts: &SolverOptions<T>) -> T {
    opts.radius.unwrap_or_else(|| lit::<T>(5.0) * (T::one() + u_nom.norm()))
}

/// Multi-start local solves of `min ‖u − u_nom‖²` s.t. every `rᵢ(u) ≥ 0`;
/// returns the feasible candidate closest to `u_nom`.
pub fn solve_nonconvex_multistart<T: Real>(
    residuals: &[&dyn InputResidual<T>],
    u_nom: &DVector<T>,
    opts: &SolverOptions<T>,
) -> Result<FilterResult<T>> {
    if residuals.is_empty() {
        return Err(Error::InvalidArgument("no constraints given".into()));
    }
    let (_, r_nom) = min_residual(residuals, u_nom);
    if r_nom >= T::zero() {
        return Ok(FilterResult::identity(u_nom, r_nom, SolverStatus::MultistartBest));
    }
    let radius = default_radius(u_nom, opts);
    let mut best: Option<(DVector<T>, T, T)> = None;
    let mut best_violating = T::min_value().expect("bounded scalar");
    let mut iterations = 0;
    for start in multistart_points(u_nom, radius, opts.multistart_extra) {
        let (u, iters) = augmented_lagrangian(residuals, u_nom, &start);
        iterations += iters;
        let (_, r) = min_residual(residuals, &u);
        if !feasible(r) {
            best_violating = best_violating.max(r);
            continue;
        }
        let d = (&u - u_nom).norm();
        if best.as_ref().is_none_or(|(_, bd, _)| d < *bd) {
            best = Some((u, d, r));
        }
    }
    if best.is_none() && residuals.len() > 1 {
        // Sequential projection: satisfy the constraints one at a time.
        let mut u = u_nom.clone();
        for r in residuals {
            if r.value(&u) < T::zero() {
                let (next, iters) = augmented_lagrangian(&[*r], &u, &u);
                iterations += iters;
                u = next;
            }
        }
        let (_, r) = min_residual(residuals, &u);
        if feasible(r) {
            let d = (&u - u_nom).norm();
            best = Some((u, d, r));
        } else {
            best_violating = best_violating.max(r);
        }
    }
    match best {
        Some((u, _, r)) => Ok(FilterResult::new(u, u_nom, r, SolverStatus::MultistartBest, iterations)),
        None => Err(Error::Infeasible {
            best_residual: to_f64(best_violating),
        }),
    }
}

/// Input maximising `minᵢ rᵢ(u)` over the multi-start pool.
pub fn max_residual_input<T: Real>(
    residuals: &[&dyn InputResidual<T>],
    u_nom: &DVector<T>,
    opts: &SolverOptions<T>,
) -> DVector<T> {
    let radius = default_radius(u_nom, opts);
    let mut best = u_nom.clone();
    let mut best_r = min_residual(residuals, u_nom).1;
    for start in multistart_points(u_nom, radius, opts.multistart_extra) {
        let u = maximise_min_residual(residuals, &start, radius);
        let r = min_residual(residuals, &u).1;
        if r > best_r {
            best = u;
            best_r = r;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Strategy {
    Analytic,
    Kkt,
    Multistart,
}

impl Strategy {
    fn status(self) -> SolverStatus {
        match self {
            Strategy::Analytic => SolverStatus::Analytic,
            Strategy::Kkt => SolverStatus::KktConverged,
            Strategy::Multistart => SolverStatus::MultistartBest,
        }
    }
}

/// Filters `u_nom` at state `x` through one barrier condition.
pub fn filter_step<T: Real>(
    sys: &ControlAffineSystem<T>,
    family: &ConditionFamily<T>,
    bar: &QuadraticBarrier<T>,
    x: &DVector<T>,
    u_nom: &DVector<T>,
    opts: &SolverOptions<T>,
) -> Result<FilterResult<T>> {
    sys.check_input(u_nom)?;
    let form = input_residual(family, sys, bar, x)?;
    let scalar = form.as_quadratic().and_then(|q| q.scalar_coefficients());
    let strategy = if scalar.is_some() {
        Strategy::Analytic
    } else if concave_in_input(family, bar, sys.noise_cov())? {
        Strategy::Kkt
    } else {
        Strategy::Multistart
    };
    let r_nom = condition_residual(family, sys, bar, x, u_nom)?;
    if r_nom >= T::zero() {
        return Ok(FilterResult::identity(u_nom, r_nom, strategy.status()));
    }
    let solved = match (strategy, scalar) {
        (Strategy::Analytic, Some((q, l, c))) => solve_scalar_interval(q, l, c, u_nom[0]),
        (Strategy::Kkt, _) => solve_convex_kkt(&form, u_nom, opts),
        _ => solve_nonconvex_multistart(&[&form], u_nom, opts),
    };
    let mut result = match solved {
        Err(Error::Infeasible { .. }) if opts.fallback == FallbackPolicy::MaxResidual => {
            let u = max_residual_input(&[&form], u_nom, opts);
            let r = condition_residual(family, sys, bar, x, &u)?;
            return Ok(FilterResult::new(u, u_nom, r, SolverStatus::InfeasibleFallback, 0));
        }
        other => other?,
    };
    result.residual_at_solution = condition_residual(family, sys, bar, x, &result.u_star)?;
    Ok(result)
}

/// Filters `u_nom` through every condition jointly. A single condition is
/// delegated to [`filter_step`]; several are solved by the multi-start solver
/// over the intersection of their feasible sets.
pub fn filter_step_multi<T: Real>(
    sys: &ControlAffineSystem<T>,
    set: &SafeSet<T>,
    conditions: &[CbfCondition<T>],
    x: &DVector<T>,
    u_nom: &DVector<T>,
    opts: &SolverOptions<T>,
) -> Result<FilterResult<T>> {
    match conditions {
        [] => Err(Error::InvalidArgument("no barrier conditions".into())),
        [only] => filter_step(sys, &only.family, only.barrier(set)?, x, u_nom, opts),
        _ => {
            sys.check_input(u_nom)?;
            let direct = |u: &DVector<T>| -> Result<T> {
                let mut min = T::max_value().expect("bounded scalar");
                for cond in conditions {
                    min = min.min(condition_residual(&cond.family, sys, cond.barrier(set)?, x, u)?);
                }
                Ok(min)
            };
            let r_nom = direct(u_nom)?;
            if r_nom >= T::zero() {
                return Ok(FilterResult::identity(u_nom, r_nom, SolverStatus::MultistartBest));
            }
            let forms = conditions
                .iter()
                .map(|c| input_residual(&c.family, sys, c.barrier(set)?, x))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&dyn InputResidual<T>> = forms.iter().map(|f| f as &dyn InputResidual<T>).collect();
            let mut result = match solve_nonconvex_multistart(&refs, u_nom, opts) {
                Err(Error::Infeasible { .. }) if opts.fallback == FallbackPolicy::MaxResidual => {
                    let u = max_residual_input(&refs, u_nom, opts);
                    let r = direct(&u)?;
                    return Ok(FilterResult::new(u, u_nom, r, SolverStatus::InfeasibleFallback, 0));
                }
                other => other?,
            };
            result.residual_at_solution = direct(&result.u_star)?;
            Ok(result)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::QuadraticInInput;
    use crate::system::Dynamics;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn integrator_1d() -> (ControlAffineSystem<f64>, QuadraticBarrier<f64>) {
        let sys = ControlAffineSystem::new(
            Dynamics::Linear {
                drift_matrix: dmatrix![1.0],
                input_matrix: dmatrix![0.01],
            },
            dmatrix![0.01],
        )
        .unwrap();
        let bar = QuadraticBarrier::affine(dvector![1.0], 0.0).with_scale(50.0).unwrap();
        (sys, bar)
    }

    fn scalar(q: f64, l: f64, c: f64) -> QuadraticInInput<f64> {
        QuadraticInInput::new(dmatrix![q], dvector![l], c)
    }

    #[test]
    fn scalar_interval_examples() {
        let r = solve_scalar_interval(0.0f64, 1.0, 0.0, -3.0).unwrap();
        assert!(r.u_star[0].abs() < 1e-15 && r.residual_at_solution >= 0.0);
        assert!((r.distance - 3.0).abs() < 1e-15);

        let r = solve_scalar_interval(-1.0, 0.0, 1.0, 0.5).unwrap();
        assert_eq!(r.u_star[0], 0.5);
        assert_eq!(r.distance, 0.0);

        assert!(matches!(solve_scalar_interval(-1.0, 0.0, -1.0, 0.0), Err(Error::Infeasible { .. })));
        assert!(matches!(solve_scalar_interval(0.0, 0.0, -1.0, 0.0), Err(Error::Infeasible { .. })));

        // Convex parabola: feasible set is outside (−1, 1).
        let r = solve_scalar_interval(1.0f64, 0.0, -1.0, 0.2).unwrap();
        assert!((r.u_star[0] - 1.0).abs() < 1e-12);
        let r = solve_scalar_interval(1.0f64, 0.0, -1.0, -0.2).unwrap();
        assert!((r.u_star[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_filter_keeps_feasible_nominal() {
        let (sys, bar) = integrator_1d();
        let family = ConditionFamily::ExpQuadratic { beta: 1e-4 };
        let opts = SolverOptions::default();
        let r = filter_step(&sys, &family, &bar, &dvector![1.0], &dvector![-1.0], &opts).unwrap();
        assert_eq!(r.u_star[0], -1.0);
        assert_eq!(r.distance, 0.0);
        assert!((r.residual_at_solution - 27.79).abs() < 0.01);
    }

    #[test]
    fn affine_filter_matches_closed_form_bound() {
        let (sys, bar) = integrator_1d();
        let (a, beta, dt, var) = (50.0f64, 1e-4, 0.01, 0.01);
        let x = 0.26;
        let family = ConditionFamily::ExpQuadratic { beta };
        let r = filter_step(&sys, &family, &bar, &dvector![x], &dvector![-x], &SolverOptions::default()).unwrap();
        let expected = (-((-a * x).exp() + beta).ln() + a * a * var / 2.0 - a * x) / (a * dt);
        assert!(expected > -x);
        assert!((r.u_star[0] - expected).abs() < 1e-9, "{} vs {expected}", r.u_star[0]);
        assert_eq!(r.solver_status, SolverStatus::Analytic);
    }

    #[test]
    fn slack_constraint_returns_nominal_everywhere() {
        let (sys, bar) = integrator_1d();
        let family = ConditionFamily::ExpQuadratic { beta: 1e30 };
        for i in 0..50 {
            let x = i as f64 * 0.05;
            let u = -3.0 + 0.1 * i as f64;
            let r = filter_step(&sys, &family, &bar, &dvector![x], &dvector![u], &SolverOptions::default()).unwrap();
            assert_eq!(r.u_star[0], u);
        }
    }

    #[test]
    fn kkt_agrees_with_scalar_interval() {
        let form = scalar(-2.0, 3.0, -0.5);
        let kkt = solve_convex_kkt(&form, &dvector![-4.0], &SolverOptions::default()).unwrap();
        let exact = solve_scalar_interval(-2.0, 3.0, -0.5, -4.0).unwrap();
        assert!((kkt.u_star[0] - exact.u_star[0]).abs() < 1e-8);
        assert!(kkt.residual_at_solution >= -1e-8 && kkt.residual_at_solution <= 1e-10);

        let affine = scalar(0.0, 0.5, -10.0);
        let kkt = solve_convex_kkt(&affine, &dvector![0.0], &SolverOptions::default()).unwrap();
        assert!((kkt.u_star[0] - 20.0).abs() < 1e-8);
    }

    #[test]
    fn kkt_detects_infeasibility() {
        let form = scalar(-1.0, 0.0, -1.0);
        assert!(matches!(
            solve_convex_kkt(&form, &dvector![3.0], &SolverOptions::default()),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn kkt_identity_when_feasible() {
        let form = QuadraticInInput::new(-DMatrix::identity(2, 2), dvector![0.0, 0.0], 1.0);
        let r = solve_convex_kkt(&form, &dvector![0.3, 0.4], &SolverOptions::default()).unwrap();
        assert_eq!(r.u_star, dvector![0.3, 0.4]);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn kkt_projects_onto_disc() {
        // r(u) = 1 − ‖u‖²; projection of (3, 4) is (0.6, 0.8).
        let form = QuadraticInInput::new(-DMatrix::identity(2, 2), dvector![0.0, 0.0], 1.0);
        let r = solve_convex_kkt(&form, &dvector![3.0, 4.0], &SolverOptions::default()).unwrap();
        assert!((r.u_star - dvector![0.6, 0.8]).norm() < 1e-9);
    }

    #[test]
    fn multistart_constant_residual_is_identity() {
        let form = scalar(0.0, 0.0, 1.0);
        let r = solve_nonconvex_multistart(&[&form], &dvector![2.5], &SolverOptions::default()).unwrap();
        assert_eq!(r.u_star[0], 2.5);
    }

    #[test]
    fn multistart_escapes_disc() {
        // r(u) = ‖u‖² − 1 (feasible outside the unit disc), u_nom = (0.1, 0).
        let form = QuadraticInInput::new(DMatrix::identity(2, 2), dvector![0.0, 0.0], -1.0);
        let r = solve_nonconvex_multistart(&[&form], &dvector![0.1, 0.0], &SolverOptions::default()).unwrap();
        assert!((&r.u_star - dvector![1.0, 0.0]).norm() < 1e-6, "{}", r.u_star);
        assert!(r.residual_at_solution >= 0.0);
    }

    #[test]
    fn multistart_handles_several_constraints() {
        // Outside two unit discs centred at (±1.5, 0) and u₂ ≥ −0.5.
        let disc = |cx: f64| QuadraticInInput::new(DMatrix::identity(2, 2), dvector![-2.0 * cx, 0.0], cx * cx - 1.0);
        let left = disc(-1.5);
        let right = disc(1.5);
        let half = QuadraticInInput::new(DMatrix::zeros(2, 2), dvector![0.0, 1.0], 0.5);
        let cons: [&dyn InputResidual<f64>; 3] = [&left, &right, &half];
        let r = solve_nonconvex_multistart(&cons, &dvector![1.2, 0.1], &SolverOptions::default()).unwrap();
        for c in cons {
            assert!(c.value(&r.u_star) >= -1e-8);
        }
        assert!(r.distance < 1.0);
    }

    #[test]
    fn fallback_marks_result() {
        let (sys, bar) = integrator_1d();
        let family = ConditionFamily::ExpQuadratic { beta: 1e-4 };
        // Zero-gain input map makes the condition at the boundary uncontrollable.
        let stuck = ControlAffineSystem::new(
            Dynamics::Linear {
                drift_matrix: dmatrix![1.0],
                input_matrix: dmatrix![0.0],
            },
            sys.noise_cov().clone(),
        )
        .unwrap();
        let x = dvector![0.0];
        let u = dvector![0.0];
        assert!(matches!(
            filter_step(&stuck, &family, &bar, &x, &u, &SolverOptions::default()),
            Err(Error::Infeasible { .. })
        ));
        let opts = SolverOptions {
            fallback: FallbackPolicy::MaxResidual,
            ..SolverOptions::default()
        };
        let r = filter_step(&stuck, &family, &bar, &x, &u, &opts).unwrap();
        assert_eq!(r.solver_status, SolverStatus::InfeasibleFallback);
        assert!(r.residual_at_solution < 0.0);
    }

    #[test]
    fn multistart_points_layout() {
        let pts = multistart_points(&dvector![1.0, -1.0], 2.0, 3);
        assert_eq!(pts.len(), 1 + 4 + 3);
        assert_eq!(pts[1], dvector![3.0, -1.0]);
        assert_eq!(pts[2], dvector![-1.0, -1.0]);
        assert_eq!(pts[4], dvector![1.0, -3.0]);
        for p in &pts[5..] {
            assert!((p - dvector![1.0, -1.0]).amax() <= 2.0);
        }
    }

    #[test]
    fn deterministic_outputs() {
        let form = QuadraticInInput::new(dmatrix![96.0, 0.0; 0.0, -20.0], dvector![1.0, 2.0], -3.0);
        let opts = SolverOptions::default();
        let a = solve_nonconvex_multistart(&[&form], &dvector![0.01, 0.02], &opts).unwrap();
        let b = solve_nonconvex_multistart(&[&form], &dvector![0.01, 0.02], &opts).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn kkt_matches_interval_on_random_concave(q in -5.0..0.0f64, l in -5.0..5.0f64, c in -5.0..5.0f64, u in -10.0..10.0f64) {
            let exact = solve_scalar_interval(q, l, c, u);
            let kkt = solve_convex_kkt(&scalar(q, l, c), &dvector![u], &SolverOptions::default());
            match (exact, kkt) {
                (Ok(e), Ok(k)) => prop_assert!((e.u_star[0] - k.u_star[0]).abs() < 1e-8, "{} {}", e.u_star[0], k.u_star[0]),
                (Err(_), Err(_)) => {}
                (e, k) => prop_assert!(false, "disagree: {e:?} {k:?}"),
            }
        }
    }
}

//! Residual evaluators for the four barrier-condition families.
//!
//! Every residual follows the same sign convention: `residual(x, u) ≥ 0` iff
//! the one-step condition holds at `(x, u)`.
//!
//! | family | condition |
//! |---|---|
//! | linear zeroing | `E[h(F+w)] ≥ α h(x)` |
//! | c-martingale | `E[h(F+w)] ≥ h(x) − β` |
//! | polynomial (Ψ(s) = s²) | `E[(h(F+w) − B)²] ≤ (h(x) − B)² + β` |
//! | exponential | `E[exp(−a h(F+w))] ≤ exp(−a h(x)) + β` |

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{QuadraticBarrier, SafeSet};
use crate::error::{Error, Result};
use crate::moments::{expected_square_centered_quadratic, ExpQuadMoment};
use crate::system::ControlAffineSystem;
use crate::{linalg, lit, to_f64, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ConditionFamily<T> {
    LinearZeroing { alpha: T },
    CMartingale { beta: T },
    /// Requires the barrier to carry its upper bound `B`.
    PolynomialSquared { beta: T },
    /// Uses the barrier's scale `a`.
    ExpQuadratic { beta: T },
}

impl<T: Real> ConditionFamily<T> {
    pub fn name(&self) -> &'static str {
        match self {
            ConditionFamily::LinearZeroing { .. } => "linear_zeroing",
            ConditionFamily::CMartingale { .. } => "c_martingale",
            ConditionFamily::PolynomialSquared { .. } => "polynomial_squared",
            ConditionFamily::ExpQuadratic { .. } => "exp_quadratic",
        }
    }
}

/// A condition family attached to one barrier of a safe set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbfCondition<T> {
    #[serde(flatten)]
    pub family: ConditionFamily<T>,
    #[serde(default)]
    pub barrier_index: usize,
}

impl<T: Real> CbfCondition<T> {
    pub fn new(family: ConditionFamily<T>, barrier_index: usize) -> Self {
        Self {
            family,
            barrier_index,
        }
    }

    pub fn barrier<'a>(&self, set: &'a SafeSet<T>) -> Result<&'a QuadraticBarrier<T>> {
        set.barriers().get(self.barrier_index).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "condition refers to barrier {} but the safe set has {}",
                self.barrier_index,
                set.barriers().len()
            ))
        })
    }

    /// Checks parameter ranges and the barrier requirements of the family.
    pub fn validate(&self, set: &SafeSet<T>, sigma: &DMatrix<T>) -> Result<()> {
        let bar = self.barrier(set)?;
        let nonneg = |beta: T| {
            if beta >= T::zero() && beta.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("β must be finite and >= 0, got {beta:?}")))
            }
        };
        match self.family {
            ConditionFamily::LinearZeroing { alpha } => {
                if !(alpha > T::zero() && alpha < T::one()) {
                    return Err(Error::AlphaOutOfRange { alpha: to_f64(alpha) });
                }
                require_upper_bound(bar).map(drop)
            }
            ConditionFamily::CMartingale { beta } => {
                nonneg(beta)?;
                require_upper_bound(bar).map(drop)
            }
            ConditionFamily::PolynomialSquared { beta } => {
                nonneg(beta)?;
                check_centered_form(bar).map(drop)
            }
            ConditionFamily::ExpQuadratic { beta } => {
                nonneg(beta)?;
                let (a_s, _, _) = bar.scaled_coefficients();
                ExpQuadMoment::new(sigma, &a_s).map(drop)
            }
        }
    }
}

fn require_upper_bound<T: Real>(bar: &QuadraticBarrier<T>) -> Result<T> {
    bar.upper_bound().ok_or_else(|| {
        Error::UnsupportedBarrierForm("this condition family needs an upper bound B on h".into())
    })
}

/// Returns `B` for barriers of the form `xᵀAx + c` with `B = c`.
fn check_centered_form<T: Real>(bar: &QuadraticBarrier<T>) -> Result<T> {
    if !linalg::vec_is_zero(bar.b()) {
        return Err(Error::UnsupportedBarrierForm(
            "polynomial condition needs h(x) = xᵀAx + c (b = 0)".into(),
        ));
    }
    match bar.upper_bound() {
        Some(bound) if bound == bar.c() => Ok(bound),
        _ => Err(Error::UnsupportedBarrierForm(
            "polynomial condition needs the upper bound B = c".into(),
        )),
    }
}

/// `log(exp(−s) + β)` without overflow.
pub fn log_exp_neg_plus<T: Real>(s: T, beta: T) -> T {
    if beta <= T::zero() {
        return -s;
    }
    let lb = beta.ln();
    let m = (-s).max(lb);
    m + ((-s - m).exp() + (lb - m).exp()).ln()
}

fn successor<T: Real>(
    sys: &ControlAffineSystem<T>,
    bar: &QuadraticBarrier<T>,
    x: &DVector<T>,
    u: &DVector<T>,
) -> Result<DVector<T>> {
    if bar.dim() != sys.state_dim() {
        return Err(Error::dim("barrier dimension", sys.state_dim(), bar.dim()));
    }
    sys.drift_eval(x, u)
}

/// `h(F(x,u)) + Tr(AΣ) − α h(x)`. Exact: `E[h(F+w)] = h(F) + Tr(AΣ)` for quadratic `h`.
pub fn linear_condition_residual<T: Real>(
    alpha: T,
    sys: &ControlAffineSystem<T>,
    bar: &QuadraticBarrier<T>,
    x: &DVector<T>,
    u: &DVector<T>,
) -> Result<T> {
    let f = successor(sys, bar, x, u)?;
    let tr = linalg::trace_of_product(bar.a(), sys.noise_cov());
    Ok(bar.eval(&f)? + tr - alpha * bar.eval(x)?)
}

/// `h(F(x,u)) + Tr(AΣ) − h(x) + β`, i.e. `E[h(F+w)] ≥ h(x) − β`.
pub fn c_martingale_residual<T: Real>(
    beta: T,
    sys: &ControlAffineSystem<T>,
    bar: &QuadraticBarrier<T>,
    x: &DVector<T>,
    u: &DVector<T>,
) -> Result<T> {
    let f = successor(sys, bar, x, u)?;
    let tr = linalg::trace_of_product(bar.a(), sys.noise_cov());
    Ok(bar.eval(&f)? + tr - bar.eval(x)? + beta)
}

/// `(h(x) − B)² + β − E[(h(F+w) − B)²]` for `h = xᵀAx + c`, `B = c`.
pub fn polynomial_condition_residual<T: Real>(
    beta: T,
    sys: &ControlAffineSystem<T>,
    bar: &QuadraticBarrier<T>,
    x: &DVector<T>,
    u: &DVector<T>,
) -> Result<T> {
    let bound = check_centered_form(bar)?;
    let f = successor(sys, bar, x, u)?;
    let gap = bar.eval(x)? - bound;
    Ok(gap * gap + beta - expected_square_centered_quadratic(bar.a(), sys.noise_cov(), &f)?)
}

/// `a h(F) − Θ + log(exp(−a h(x)) + β) + M`, all with the scaled coefficients.
pub fn exp_quadratic_condition_residual<T: Real>(
    beta: T,
    sys: &ControlAffineSystem<T>,
    bar: &QuadraticBarrier<T>,
    x: &DVector<T>,
    u: &DVector<T>,
) -> Result<T> {
    let f = successor(sys, bar, x, u)?;
    let (a_s, b_s, _) = bar.scaled_coefficients();
    let moment = ExpQuadMoment::new(sys.noise_cov(), &a_s)?;
    let theta = moment.theta(&f, &a_s, &b_s);
    Ok(bar.eval_scaled(&f)? - theta
        + log_exp_neg_plus(bar.eval_scaled(x)?, beta)
        + moment.log_det_term())
}

/// Affine specialisation `a h(F) + log(exp(−a h(x)) + β) − ½a²bᵀΣb`.
pub fn affine_condition_residual<T: Real>(
    beta: T,
    sys: &ControlAffineSystem<T>,
    bar: &QuadraticBarrier<T>,
    x: &DVector<T>,
    u: &DVector<T>,
) -> Result<T> {
    if !bar.is_affine() {
        return Err(Error::UnsupportedBarrierForm("affine condition needs A = 0".into()));
    }
    let f = successor(sys, bar, x, u)?;
    let a = bar.scale();
    let b = bar.b();
    let half_var = lit::<T>(0.5) * a * a * b.dot(&(sys.noise_cov() * b));
    Ok(bar.eval_scaled(&f)? + log_exp_neg_plus(bar.eval_scaled(x)?, beta) - half_var)
}

pub fn condition_residual<T: Real>(
    family: &ConditionFamily<T>,
    sys: &ControlAffineSystem<T>,
    bar: &QuadraticBarrier<T>,
    x: &DVector<T>,
    u: &DVector<T>,
) -> Result<T> {
    match *family {
        ConditionFamily::LinearZeroing { alpha } => linear_condition_residual(alpha, sys, bar, x, u),
        ConditionFamily::CMartingale { beta } => c_martingale_residual(beta, sys, bar, x, u),
        ConditionFamily::PolynomialSquared { beta } => {
            polynomial_condition_residual(beta, sys, bar, x, u)
        }
        ConditionFamily::ExpQuadratic { beta } => {
            exp_quadratic_condition_residual(beta, sys, bar, x, u)
        }
    }
}

/// `α = 1 + Tr(AΣ)`, the largest α for which the linear condition is
/// satisfiable with `F = x` at `h(x) = B`.
pub fn max_feasible_alpha<T: Real>(bar: &QuadraticBarrier<T>, sigma: &DMatrix<T>) -> Result<T> {
    let alpha = T::one() + linalg::trace_of_product(bar.a(), sigma);
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::AlphaOutOfRange { alpha: to_f64(alpha) });
    }
    Ok(alpha)
}

/// `β = 2Tr((AΣ)²) + Tr(AΣ)²`: the value of `E[((F+w)ᵀA(F+w))²]` at `F = 0`,
/// hence the smallest β making the polynomial condition hold at `x = 0`, `F = 0`.
pub fn max_feasible_beta_poly<T: Real>(bar: &QuadraticBarrier<T>, sigma: &DMatrix<T>) -> Result<T> {
    if !linalg::vec_is_zero(bar.b()) {
        return Err(Error::UnsupportedBarrierForm(
            "polynomial condition needs h(x) = xᵀAx + c (b = 0)".into(),
        ));
    }
    let a_sigma = bar.a() * sigma;
    let tr = a_sigma.trace();
    Ok(lit::<T>(2.0) * linalg::trace_of_product(&a_sigma, &a_sigma) + tr * tr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convexity {
    Convex,
    NotCertified,
}

/// `Convex` iff `N = A_s − A_sΛ⁻¹A_s` is negative semidefinite, which makes the
/// exponential condition a convex constraint in `u`.
pub fn convexity_certificate<T: Real>(bar: &QuadraticBarrier<T>, sigma: &DMatrix<T>) -> Result<Convexity> {
    let n_mat = curvature_matrix(bar, sigma)?;
    Ok(if linalg::is_negative_semidefinite(&n_mat) {
        Convexity::Convex
    } else {
        Convexity::NotCertified
    })
}

/// N = A_s − A_sΛ⁻¹A_s
pub fn curvature_matrix<T: Real>(bar: &QuadraticBarrier<T>, sigma: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (a_s, _, _) = bar.scaled_coefficients();
    let moment = ExpQuadMoment::new(sigma, &a_s)?;
    let n_mat = &a_s - &a_s * moment.lambda_chol().solve(&a_s);
    Ok((&n_mat + n_mat.transpose()) * lit::<T>(0.5))
}

/// Whether `u ↦ residual(x, u)` is certified concave for this family and barrier.
pub fn concave_in_input<T: Real>(
    family: &ConditionFamily<T>,
    bar: &QuadraticBarrier<T>,
    sigma: &DMatrix<T>,
) -> Result<bool> {
    Ok(match family {
        ConditionFamily::ExpQuadratic { .. } => {
            convexity_certificate(bar, sigma)? == Convexity::Convex
        }
        _ => linalg::is_negative_semidefinite(bar.a()),
    })
}

/// A residual viewed as a function of the input `u` alone, at a fixed state.
pub trait InputResidual<T: Real> {
    fn input_dim(&self) -> usize;
    fn value(&self, u: &DVector<T>) -> T;
    fn gradient(&self, u: &DVector<T>) -> DVector<T>;
    fn hessian(&self, u: &DVector<T>) -> DMatrix<T>;
}

/// `r(u) = uᵀQu + lᵀu + c` with symmetric `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticInInput<T: Real> {
    pub quad: DMatrix<T>,
    pub lin: DVector<T>,
    pub constant: T,
}

impl<T: Real> QuadraticInInput<T> {
    pub fn new(quad: DMatrix<T>, lin: DVector<T>, constant: T) -> Self {
        let quad = (&quad + quad.transpose()) * lit::<T>(0.5);
        Self {
            quad,
            lin,
            constant,
        }
    }

    /// Composes `r(F) = FᵀPF + pᵀF + p₀` with `F = f + Gu`.
    fn from_successor_form(
        p_mat: &DMatrix<T>,
        p_vec: &DVector<T>,
        p0: T,
        drift: &DVector<T>,
        g: &DMatrix<T>,
    ) -> Self {
        let pf = p_mat * drift;
        let quad = g.transpose() * p_mat * g;
        let lin = g.transpose() * (&pf * lit::<T>(2.0) + p_vec);
        let constant = drift.dot(&pf) + p_vec.dot(drift) + p0;
        Self::new(quad, lin, constant)
    }

    /// `(q, l, c)` for a scalar input.
    pub fn scalar_coefficients(&self) -> Option<(T, T, T)> {
        (self.lin.len() == 1).then(|| (self.quad[(0, 0)], self.lin[0], self.constant))
    }
}

impl<T: Real> InputResidual<T> for QuadraticInInput<T> {
    fn input_dim(&self) -> usize {
        self.lin.len()
    }

    fn value(&self, u: &DVector<T>) -> T {
        u.dot(&(&self.quad * u)) + self.lin.dot(u) + self.constant
    }

    fn gradient(&self, u: &DVector<T>) -> DVector<T> {
        &self.quad * u * lit::<T>(2.0) + &self.lin
    }

    fn hessian(&self, _u: &DVector<T>) -> DMatrix<T> {
        &self.quad * lit::<T>(2.0)
    }
}

/// Polynomial-family residual in `u`: `offset − [q² + 4FᵀAΣAF + 2q·Tr(AΣ)]`,
/// `q = FᵀAF`, `F = f + Gu`.
#[derive(Clone, Debug, PartialEq)]
pub struct SquaredQuadraticInInput<T: Real> {
    drift: DVector<T>,
    g: DMatrix<T>,
    a: DMatrix<T>,
    a_sigma_a: DMatrix<T>,
    trace: T,
    offset: T,
}

impl<T: Real> SquaredQuadraticInInput<T> {
    fn successor(&self, u: &DVector<T>) -> DVector<T> {
        &self.drift + &self.g * u
    }
}

impl<T: Real> InputResidual<T> for SquaredQuadraticInInput<T> {
    fn input_dim(&self) -> usize {
        self.g.ncols()
    }

    fn value(&self, u: &DVector<T>) -> T {
        let f = self.successor(u);
        let q = f.dot(&(&self.a * &f));
        let two = lit::<T>(2.0);
        let four = lit::<T>(4.0);
        self.offset - (q * q + four * f.dot(&(&self.a_sigma_a * &f)) + two * q * self.trace)
    }

    fn gradient(&self, u: &DVector<T>) -> DVector<T> {
        let f = self.successor(u);
        let af = &self.a * &f;
        let q = f.dot(&af);
        let four = lit::<T>(4.0);
        let grad_f = &af * (four * q + four * self.trace) + &self.a_sigma_a * &f * lit::<T>(8.0);
        -(self.g.transpose() * grad_f)
    }

    fn hessian(&self, u: &DVector<T>) -> DMatrix<T> {
        let f = self.successor(u);
        let af = &self.a * &f;
        let q = f.dot(&af);
        let four = lit::<T>(4.0);
        let hess_f = &af * af.transpose() * lit::<T>(8.0)
            + &self.a * (four * q + four * self.trace)
            + &self.a_sigma_a * lit::<T>(8.0);
        -(self.g.transpose() * hess_f * &self.g)
    }
}

/// The residual of one condition at a fixed state, as a function of `u`.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditionResidual<T: Real> {
    Quadratic(QuadraticInInput<T>),
    SquaredQuadratic(SquaredQuadraticInInput<T>),
}

impl<T: Real> ConditionResidual<T> {
    pub fn as_quadratic(&self) -> Option<&QuadraticInInput<T>> {
        match self {
            ConditionResidual::Quadratic(q) => Some(q),
            ConditionResidual::SquaredQuadratic(_) => None,
        }
    }
}

impl<T: Real> InputResidual<T> for ConditionResidual<T> {
    fn input_dim(&self) -> usize {
        match self {
            ConditionResidual::Quadratic(r) => r.input_dim(),
            ConditionResidual::SquaredQuadratic(r) => r.input_dim(),
        }
    }

    fn value(&self, u: &DVector<T>) -> T {
        match self {
            ConditionResidual::Quadratic(r) => r.value(u),
            ConditionResidual::SquaredQuadratic(r) => r.value(u),
        }
    }

    fn gradient(&self, u: &DVector<T>) -> DVector<T> {
        match self {
            ConditionResidual::Quadratic(r) => r.gradient(u),
            ConditionResidual::SquaredQuadratic(r) => r.gradient(u),
        }
    }

    fn hessian(&self, u: &DVector<T>) -> DMatrix<T> {
        match self {
            ConditionResidual::Quadratic(r) => r.hessian(u),
            ConditionResidual::SquaredQuadratic(r) => r.hessian(u),
        }
    }
}

/// Builds the input-space residual at state `x`. The quadratic-in-`u`
/// coefficients are derived analytically from the family.
pub fn input_residual<T: Real>(
    family: &ConditionFamily<T>,
    sys: &ControlAffineSystem<T>,
    bar: &QuadraticBarrier<T>,
    x: &DVector<T>,
) -> Result<ConditionResidual<T>> {
    if bar.dim() != sys.state_dim() {
        return Err(Error::dim("barrier dimension", sys.state_dim(), bar.dim()));
    }
    let drift = sys.drift(x)?;
    let g = sys.input_map(x)?;
    let sigma = sys.noise_cov();
    let h_x = bar.eval(x)?;
    let tr = linalg::trace_of_product(bar.a(), sigma);
    let quadratic = |p_mat: &DMatrix<T>, p_vec: &DVector<T>, p0: T| {
        ConditionResidual::Quadratic(QuadraticInInput::from_successor_form(p_mat, p_vec, p0, &drift, &g))
    };
    Ok(match *family {
        ConditionFamily::LinearZeroing { alpha } => quadratic(bar.a(), bar.b(), bar.c() + tr - alpha * h_x),
        ConditionFamily::CMartingale { beta } => quadratic(bar.a(), bar.b(), bar.c() + tr - h_x + beta),
        ConditionFamily::ExpQuadratic { beta } => {
            let (a_s, b_s, c_s) = bar.scaled_coefficients();
            let moment = ExpQuadMoment::new(sigma, &a_s)?;
            let chol = moment.lambda_chol();
            let lambda_inv_a = chol.solve(&a_s);
            let lambda_inv_b = chol.solve(&b_s);
            let p_mat = &a_s - &a_s * &lambda_inv_a;
            let p_vec = &b_s - &a_s * &lambda_inv_b;
            let p0 = c_s - lit::<T>(0.25) * b_s.dot(&lambda_inv_b)
                + moment.log_det_term()
                + log_exp_neg_plus(bar.scale() * h_x, beta);
            quadratic(&p_mat, &p_vec, p0)
        }
        ConditionFamily::PolynomialSquared { beta } => {
            let bound = check_centered_form(bar)?;
            let a_sigma = bar.a() * sigma;
            let trace_sq = linalg::trace_of_product(&a_sigma, &a_sigma);
            let gap = h_x - bound;
            let two = lit::<T>(2.0);
            ConditionResidual::SquaredQuadratic(SquaredQuadraticInInput {
                drift,
                g,
                a: bar.a().clone(),
                a_sigma_a: &a_sigma * bar.a(),
                trace: tr,
                offset: gap * gap + beta - two * trace_sq - tr * tr,
            })
        }
    })
}

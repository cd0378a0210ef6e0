//! Closed-form Gaussian expectations of barrier transforms.
//!
//! For `w ~ N(0, Σ)` and the scaled barrier `a·h(x) = xᵀA_s x + b_sᵀx + c_s`:
//!
//! ```text
//! E[exp(−a·h(F + w))] = exp(−a·h(F) + Θ − M)
//! Λ = ½Σ⁻¹ + A_s
//! Θ = (A_s F + b_s/2)ᵀ Λ⁻¹ (A_s F + b_s/2)
//! M = ½ log det(I + 2ΣA_s)
//! ```
//!
//! The moment exists iff Λ is positive definite. Exponentials are composed in
//! log space; `exp` is applied only by [`expected_exp_neg_quadratic`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::barrier::QuadraticBarrier;
use crate::error::{Error, Result};
use crate::system::sample_gaussian;
use crate::{linalg, lit, to_f64, Real};

/// Default Monte-Carlo sample count for oracle checks.
pub const ORACLE_SAMPLES: usize = 1_000_000;

/// Λ and M for a given noise covariance and scaled quadratic coefficient.
#[derive(Clone, Debug)]
pub struct ExpQuadMoment<T: Real> {
    lambda: DMatrix<T>,
    lambda_chol: Cholesky<T, Dyn>,
    log_det_term: T,
}

impl<T: Real> ExpQuadMoment<T> {
    pub fn new(sigma: &DMatrix<T>, a_s: &DMatrix<T>) -> Result<Self> {
        let lambda = lambda_matrix(sigma, a_s)?;
        let lambda_chol = linalg::cholesky(&lambda).ok_or(Error::LambdaNotPD)?;
        let log_det_term = log_det_term(sigma, a_s)?;
        Ok(Self {
            lambda,
            lambda_chol,
            log_det_term,
        })
    }

    /// Λ = ½Σ⁻¹ + A_s
    pub fn lambda(&self) -> &DMatrix<T> {
        &self.lambda
    }

    /// M = ½ log det(I + 2ΣA_s)
    pub fn log_det_term(&self) -> T {
        self.log_det_term
    }

    pub(crate) fn lambda_chol(&self) -> &Cholesky<T, Dyn> {
        &self.lambda_chol
    }

    /// Θ for drift value `F`.
    pub fn theta(&self, f_val: &DVector<T>, a_s: &DMatrix<T>, b_s: &DVector<T>) -> T {
        let v = a_s * f_val + b_s * lit::<T>(0.5);
        linalg::inverse_quadratic_form(&self.lambda_chol, &v)
    }
}

fn check_sigma<T: Real>(sigma: &DMatrix<T>, a_s: &DMatrix<T>) -> Result<Cholesky<T, Dyn>> {
    linalg::check_symmetric(sigma, "noise covariance")?;
    linalg::check_symmetric(a_s, "scaled barrier matrix")?;
    if a_s.nrows() != sigma.nrows() {
        return Err(Error::dim("scaled barrier matrix", sigma.nrows(), a_s.nrows()));
    }
    linalg::cholesky(sigma).ok_or(Error::NotPositiveDefinite("noise covariance"))
}

/// Λ = ½Σ⁻¹ + A_s; fails with [`Error::LambdaNotPD`] when Λ is not positive definite.
pub fn lambda_matrix<T: Real>(sigma: &DMatrix<T>, a_s: &DMatrix<T>) -> Result<DMatrix<T>> {
    let sigma_chol = check_sigma(sigma, a_s)?;
    let half_inv = sigma_chol.inverse() * lit::<T>(0.5);
    let lambda = half_inv + a_s;
    let lambda = (&lambda + lambda.transpose()) * lit::<T>(0.5);
    linalg::cholesky(&lambda).ok_or(Error::LambdaNotPD)?;
    Ok(lambda)
}

/// M = ½ log det(I + 2ΣA_s), evaluated as ½ log det(I + 2LᵀA_sL) with `LLᵀ = Σ`.
///
/// The symmetric form is positive definite exactly when Λ is.
pub fn log_det_term<T: Real>(sigma: &DMatrix<T>, a_s: &DMatrix<T>) -> Result<T> {
    let sigma_chol = check_sigma(sigma, a_s)?;
    let l = sigma_chol.l();
    let n = sigma.nrows();
    let inner = DMatrix::identity(n, n) + l.transpose() * a_s * &l * lit::<T>(2.0);
    let inner = (&inner + inner.transpose()) * lit::<T>(0.5);
    let chol = linalg::cholesky(&inner).ok_or(Error::LambdaNotPD)?;
    Ok(linalg::log_det(&chol) * lit::<T>(0.5))
}

/// Θ = (A_sF + b_s/2)ᵀΛ⁻¹(A_sF + b_s/2).
pub fn theta<T: Real>(
    f_val: &DVector<T>,
    a_s: &DMatrix<T>,
    b_s: &DVector<T>,
    lambda: &DMatrix<T>,
) -> Result<T> {
    let n = lambda.nrows();
    if f_val.len() != n {
        return Err(Error::dim("drift value", n, f_val.len()));
    }
    if b_s.len() != n {
        return Err(Error::dim("scaled barrier vector", n, b_s.len()));
    }
    if a_s.shape() != (n, n) {
        return Err(Error::dim("scaled barrier matrix", n, a_s.nrows()));
    }
    let chol = linalg::cholesky(lambda).ok_or(Error::LambdaNotPD)?;
    let v = a_s * f_val + b_s * lit::<T>(0.5);
    Ok(linalg::inverse_quadratic_form(&chol, &v))
}

/// `log E[exp(−a·h(F + w))] = −a·h(F) + Θ − M`.
pub fn log_expected_exp_neg_quadratic<T: Real>(
    bar: &QuadraticBarrier<T>,
    sigma: &DMatrix<T>,
    f_val: &DVector<T>,
) -> Result<T> {
    let (a_s, b_s, _) = bar.scaled_coefficients();
    let moment = ExpQuadMoment::new(sigma, &a_s)?;
    let scaled_h = bar.eval_scaled(f_val)?;
    Ok(-scaled_h + moment.theta(f_val, &a_s, &b_s) - moment.log_det_term())
}

/// `E[exp(−a·h(F + w))]` for `w ~ N(0, Σ)`.
pub fn expected_exp_neg_quadratic<T: Real>(
    bar: &QuadraticBarrier<T>,
    sigma: &DMatrix<T>,
    f_val: &DVector<T>,
) -> Result<T> {
    Ok(log_expected_exp_neg_quadratic(bar, sigma, f_val)?.exp())
}

/// `E[((F + w)ᵀA(F + w))²]` for `w ~ N(0, Σ)`:
///
/// ```text
/// (FᵀAF)² + 4FᵀAΣAF + 2(FᵀAF)Tr(AΣ) + 2Tr((AΣ)²) + Tr(AΣ)²
/// ```
pub fn expected_square_centered_quadratic<T: Real>(
    a: &DMatrix<T>,
    sigma: &DMatrix<T>,
    f_val: &DVector<T>,
) -> Result<T> {
    let n = sigma.nrows();
    if a.shape() != (n, n) {
        return Err(Error::dim("quadratic matrix", n, a.nrows()));
    }
    if f_val.len() != n {
        return Err(Error::dim("drift value", n, f_val.len()));
    }
    let af = a * f_val;
    let q = f_val.dot(&af);
    let a_sigma = a * sigma;
    let tr = a_sigma.trace();
    let tr_sq = linalg::trace_of_product(&a_sigma, &a_sigma);
    let two = lit::<T>(2.0);
    let four = lit::<T>(4.0);
    Ok(q * q + four * af.dot(&(sigma * &af)) + two * q * tr + two * tr_sq + tr * tr)
}

/// Sample mean and standard error of a Monte-Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl McEstimate {
    /// `|value − estimate| ≤ k·std_error`.
    pub fn agrees_with(&self, value: f64, k: f64) -> bool {
        (value - self.estimate).abs() <= k * self.std_error
    }
}

/// Monte-Carlo estimate of `E[integrand(w)]`, `w ~ N(0, Σ)`.
///
/// Draws come from a ChaCha8 stream seeded with `seed`; the estimate is
/// deterministic per seed.
pub fn mc_expectation_oracle<T, F>(
    integrand: F,
    sigma: &DMatrix<T>,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate>
where
    T: Real,
    F: Fn(&DVector<T>) -> T,
{
    if n_samples < 2 {
        return Err(Error::InvalidArgument("oracle needs at least 2 samples".into()));
    }
    linalg::check_symmetric(sigma, "noise covariance")?;
    let factor = linalg::cholesky(sigma)
        .ok_or(Error::NotPositiveDefinite("noise covariance"))?
        .l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for i in 0..n_samples {
        let w = sample_gaussian(&factor, &mut rng);
        let v = to_f64(integrand(&w));
        if !v.is_finite() {
            return Err(Error::NonFiniteSample { sample: i });
        }
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (n_samples - 1) as f64;
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / n_samples as f64).sqrt(),
    })
}

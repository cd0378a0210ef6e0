//! Control-affine dynamics `x⁺ = f(x) + g(x)u + w` with Gaussian noise `w ~ N(0, Σ)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::Real;

pub type DriftFn<T> = Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>;
pub type InputMapFn<T> = Arc<dyn Fn(&DVector<T>) -> DMatrix<T> + Send + Sync>;

/// Built-in drift/input-map pairs plus a callback escape hatch.
#[derive(Clone)]
pub enum Dynamics<T: Real> {
    /// `f(x) = F x`, `g(x) = G`.
    Linear {
        drift_matrix: DMatrix<T>,
        input_matrix: DMatrix<T>,
    },
    /// Inverted pendulum about the upright position, state `(θ, θ̇)`:
    /// `f(x) = (θ + Δt θ̇, θ̇ + Δt sin θ)`, `g(x) = (0, Δt)ᵀ`.
    Pendulum { dt: T },
    /// User supplied callbacks. Not serializable.
    Custom {
        state_dim: usize,
        input_dim: usize,
        drift: DriftFn<T>,
        input_map: InputMapFn<T>,
    },
}

impl<T: Real> fmt::Debug for Dynamics<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Linear {
                drift_matrix,
                input_matrix,
            } => f
                .debug_struct("Linear")
                .field("drift_matrix", drift_matrix)
                .field("input_matrix", input_matrix)
                .finish(),
            Dynamics::Pendulum { dt } => f.debug_struct("Pendulum").field("dt", dt).finish(),
            Dynamics::Custom {
                state_dim,
                input_dim,
                ..
            } => f
                .debug_struct("Custom")
                .field("state_dim", state_dim)
                .field("input_dim", input_dim)
                .finish_non_exhaustive(),
        }
    }
}

impl<T: Real> Dynamics<T> {
    fn dims(&self) -> Result<(usize, usize)> {
        match self {
            Dynamics::Linear {
                drift_matrix,
                input_matrix,
            } => {
                linalg::check_square(drift_matrix, "drift matrix")?;
                if input_matrix.nrows() != drift_matrix.nrows() {
                    return Err(Error::dim(
                        "input matrix rows",
                        drift_matrix.nrows(),
                        input_matrix.nrows(),
                    ));
                }
                Ok((drift_matrix.nrows(), input_matrix.ncols()))
            }
            Dynamics::Pendulum { .. } => Ok((2, 1)),
            Dynamics::Custom {
                state_dim,
                input_dim,
                ..
            } => Ok((*state_dim, *input_dim)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ControlAffineSystem<T: Real> {
    dynamics: Dynamics<T>,
    state_dim: usize,
    input_dim: usize,
    noise_cov: DMatrix<T>,
    noise_factor: DMatrix<T>,
}

impl<T: Real> ControlAffineSystem<T> {
    pub fn new(dynamics: Dynamics<T>, noise_cov: DMatrix<T>) -> Result<Self> {
        let (state_dim, input_dim) = dynamics.dims()?;
        if state_dim == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument(
                "state and input dimensions must be positive".into(),
            ));
        }
        linalg::check_symmetric(&noise_cov, "noise covariance")?;
        if noise_cov.nrows() != state_dim {
            return Err(Error::dim("noise covariance", state_dim, noise_cov.nrows()));
        }
        let noise_factor = linalg::cholesky(&noise_cov)
            .ok_or(Error::NotPositiveDefinite("noise covariance"))?
            .l();
        Ok(Self {
            dynamics,
            state_dim,
            input_dim,
            noise_cov,
            noise_factor,
        })
    }

    pub fn dynamics(&self) -> &Dynamics<T> {
        &self.dynamics
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Σ
    pub fn noise_cov(&self) -> &DMatrix<T> {
        &self.noise_cov
    }

    /// Lower Cholesky factor `L` with `LLᵀ = Σ`.
    pub fn noise_factor(&self) -> &DMatrix<T> {
        &self.noise_factor
    }

    pub fn check_state(&self, x: &DVector<T>) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::dim("state", self.state_dim, x.len()));
        }
        Ok(())
    }

    pub fn check_input(&self, u: &DVector<T>) -> Result<()> {
        if u.len() != self.input_dim {
            return Err(Error::dim("input", self.input_dim, u.len()));
        }
        Ok(())
    }

    /// f(x)
    pub fn drift(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check_state(x)?;
        let out = match &self.dynamics {
            Dynamics::Linear { drift_matrix, .. } => drift_matrix * x,
            Dynamics::Pendulum { dt } => {
                let (theta, omega) = (x[0], x[1]);
                DVector::from_vec(vec![theta + *dt * omega, omega + *dt * theta.sin()])
            }
            Dynamics::Custom { drift, .. } => drift(x),
        };
        if out.len() != self.state_dim {
            return Err(Error::dim("drift output", self.state_dim, out.len()));
        }
        Ok(out)
    }

    /// g(x)
    pub fn input_map(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        self.check_state(x)?;
        let out = match &self.dynamics {
            Dynamics::Linear { input_matrix, .. } => input_matrix.clone(),
            Dynamics::Pendulum { dt } => DMatrix::from_vec(2, 1, vec![T::zero(), *dt]),
            Dynamics::Custom { input_map, .. } => input_map(x),
        };
        if out.shape() != (self.state_dim, self.input_dim) {
            return Err(Error::InvalidArgument(format!(
                "input map has shape {:?}, expected {:?}",
                out.shape(),
                (self.state_dim, self.input_dim)
            )));
        }
        Ok(out)
    }

    /// Noise-free successor `F(x, u) = f(x) + g(x)u`.
    pub fn drift_eval(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        self.check_input(u)?;
        Ok(self.drift(x)? + self.input_map(x)? * u)
    }

    /// One draw of `w ~ N(0, Σ)` as `L z` with `z` standard normal.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        sample_gaussian(&self.noise_factor, rng)
    }
}

/// `L z` with `z` i.i.d. standard normal, for a lower Cholesky factor `L` of Σ.
pub fn sample_gaussian<T: Real, R: Rng + ?Sized>(factor: &DMatrix<T>, rng: &mut R) -> DVector<T> {
    let z = DVector::from_fn(factor.ncols(), |_, _| T::standard_normal(rng));
    factor * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn integrator_1d() -> ControlAffineSystem<f64> {
        ControlAffineSystem::new(
            Dynamics::Linear {
                drift_matrix: dmatrix![1.0],
                input_matrix: dmatrix![0.01],
            },
            dmatrix![0.01],
        )
        .unwrap()
    }

    #[test]
    fn integrator_drift() {
        let sys = integrator_1d();
        assert_eq!(sys.drift_eval(&dvector![1.0], &dvector![0.0]).unwrap()[0], 1.0);
        assert!((sys.drift_eval(&dvector![1.0], &dvector![-1.0]).unwrap()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn pendulum_drift() {
        let sys =
            ControlAffineSystem::new(Dynamics::Pendulum { dt: 0.01 }, dmatrix![2.5e-5, 0.0; 0.0, 6.25e-4])
                .unwrap();
        let f = sys.drift_eval(&dvector![0.1, 0.0], &dvector![0.0]).unwrap();
        assert_eq!(f[0], 0.1);
        assert!((f[1] - 0.01 * 0.1f64.sin()).abs() < 1e-16);
        assert!((f[1] - 0.000998).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let sys = integrator_1d();
        assert!(matches!(
            sys.drift_eval(&dvector![1.0, 2.0], &dvector![0.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            sys.drift_eval(&dvector![1.0], &dvector![0.0, 1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn rejects_bad_covariance() {
        let dynamics = Dynamics::Pendulum { dt: 0.01 };
        assert!(ControlAffineSystem::new(dynamics.clone(), dmatrix![1.0, 0.5; 0.4, 1.0]).is_err());
        assert!(ControlAffineSystem::new(dynamics, dmatrix![1.0, 0.0; 0.0, -1.0]).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let sys = ControlAffineSystem::<f32>::new(
            Dynamics::Linear {
                drift_matrix: dmatrix![1.0f32],
                input_matrix: dmatrix![0.01f32],
            },
            dmatrix![0.01f32],
        )
        .unwrap();
        let f = sys.drift_eval(&dvector![1.0f32], &dvector![-1.0f32]).unwrap();
        assert!((f[0] - 0.99).abs() < 1e-6);
    }
}

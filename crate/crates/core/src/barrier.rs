//! Quadratic barrier functions `h(x) = xᵀAx + bᵀx + c` and the safe sets they define.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::{linalg, lit, Real};

/// `h(x) = xᵀAx + bᵀx + c`, optionally scaled by `a ≥ 1` and bounded above by `B`.
///
/// Scaling leaves the zero superlevel set unchanged; only the exponential
/// condition family uses it.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticBarrier<T: Real> {
    a: DMatrix<T>,
    b: DVector<T>,
    c: T,
    scale: T,
    upper_bound: Option<T>,
}

impl<T: Real> QuadraticBarrier<T> {
    pub fn new(a: DMatrix<T>, b: DVector<T>, c: T) -> Result<Self> {
        linalg::check_symmetric(&a, "barrier matrix A")?;
        if b.len() != a.nrows() {
            return Err(Error::dim("barrier vector b", a.nrows(), b.len()));
        }
        if !c.is_finite() {
            return Err(Error::InvalidArgument("barrier constant must be finite".into()));
        }
        Ok(Self {
            a,
            b,
            c,
            scale: T::one(),
            upper_bound: None,
        })
    }

    /// `h(x) = bᵀx + c`.
    pub fn affine(b: DVector<T>, c: T) -> Self {
        let n = b.len();
        Self {
            a: DMatrix::zeros(n, n),
            b,
            c,
            scale: T::one(),
            upper_bound: None,
        }
    }

    /// `h(x) = ‖x − center‖² − radius²`, nonnegative outside the ball.
    pub fn outside_ball(center: &DVector<T>, radius: T) -> Self {
        let n = center.len();
        let two = lit::<T>(2.0);
        Self {
            a: DMatrix::identity(n, n),
            b: center * -two,
            c: center.norm_squared() - radius * radius,
            scale: T::one(),
            upper_bound: None,
        }
    }

    pub fn with_scale(mut self, scale: T) -> Result<Self> {
        if !(scale >= T::one()) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "barrier scale must be a finite value >= 1, got {scale:?}"
            )));
        }
        self.scale = scale;
        Ok(self)
    }

    /// Declares `h(x) ≤ B` for all `x`; accepted only when it can be verified
    /// analytically: `A ⪯ 0`, `b ∈ range(A)` and `B ≥ c − ¼bᵀA⁺b`.
    pub fn with_upper_bound(mut self, bound: T) -> Result<Self> {
        let sup = self.supremum().ok_or_else(|| {
            Error::InvalidArgument("barrier is unbounded above; no upper bound B exists".into())
        })?;
        let tol = lit::<T>(1e-12) * (T::one() + sup.abs());
        if bound + tol < sup {
            return Err(Error::InvalidArgument(format!(
                "upper bound {bound:?} is below sup h = {sup:?}"
            )));
        }
        self.upper_bound = Some(bound);
        Ok(self)
    }

    /// `sup_x h(x)` when finite.
    pub fn supremum(&self) -> Option<T> {
        if linalg::is_zero(&self.a) {
            return linalg::vec_is_zero(&self.b).then_some(self.c);
        }
        if !linalg::is_negative_semidefinite(&self.a) {
            return None;
        }
        let pinv = linalg::symmetric_pseudo_inverse(&self.a);
        // b must lie in range(A), otherwise h grows without bound along null(A).
        let residual = &self.a * (&pinv * &self.b) - &self.b;
        let tol = lit::<T>(1e-9) * (T::one() + self.b.norm());
        if residual.norm() > tol {
            return None;
        }
        Some(self.c - lit::<T>(0.25) * self.b.dot(&(&pinv * &self.b)))
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn b(&self) -> &DVector<T> {
        &self.b
    }

    pub fn c(&self) -> T {
        self.c
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn upper_bound(&self) -> Option<T> {
        self.upper_bound
    }

    pub fn is_affine(&self) -> bool {
        linalg::is_zero(&self.a)
    }

    /// Coefficients of `a·h`: `(aA, ab, ac)`.
    pub fn scaled_coefficients(&self) -> (DMatrix<T>, DVector<T>, T) {
        (&self.a * self.scale, &self.b * self.scale, self.c * self.scale)
    }

    fn check(&self, x: &DVector<T>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dim("barrier argument", self.dim(), x.len()));
        }
        Ok(())
    }

    /// Unscaled `h(x)`.
    pub fn eval(&self, x: &DVector<T>) -> Result<T> {
        self.check(x)?;
        Ok(self.eval_unchecked(x))
    }

    /// `a·h(x)`.
    pub fn eval_scaled(&self, x: &DVector<T>) -> Result<T> {
        Ok(self.scale * self.eval(x)?)
    }

    pub(crate) fn eval_unchecked(&self, x: &DVector<T>) -> T {
        x.dot(&(&self.a * x)) + self.b.dot(x) + self.c
    }

    /// ∇h(x) = 2Ax + b
    pub fn gradient(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check(x)?;
        Ok(&self.a * x * lit::<T>(2.0) + &self.b)
    }
}

/// `C = {x : hᵢ(x) ≥ 0 for all i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SafeSet<T: Real> {
    barriers: Vec<QuadraticBarrier<T>>,
}

impl<T: Real> SafeSet<T> {
    pub fn new(barriers: Vec<QuadraticBarrier<T>>) -> Result<Self> {
        let first = barriers
            .first()
            .ok_or_else(|| Error::InvalidArgument("safe set needs at least one barrier".into()))?;
        let n = first.dim();
        if let Some(bad) = barriers.iter().find(|b| b.dim() != n) {
            return Err(Error::dim("barrier dimension", n, bad.dim()));
        }
        Ok(Self { barriers })
    }

    pub fn single(barrier: QuadraticBarrier<T>) -> Self {
        Self {
            barriers: vec![barrier],
        }
    }

    pub fn barriers(&self) -> &[QuadraticBarrier<T>] {
        &self.barriers
    }

    pub fn dim(&self) -> usize {
        self.barriers[0].dim()
    }

    /// `minᵢ hᵢ(x)`, unscaled.
    pub fn min_value(&self, x: &DVector<T>) -> Result<T> {
        let mut min = None::<T>;
        for bar in &self.barriers {
            let v = bar.eval(x)?;
            min = Some(match min {
                Some(m) if m <= v => m,
                _ => v,
            });
        }
        Ok(min.expect("nonempty safe set"))
    }

    /// Boundary points (`h = 0`) count as safe.
    pub fn contains(&self, x: &DVector<T>) -> bool {
        x.len() == self.dim() && self.barriers.iter().all(|b| b.eval_unchecked(x) >= T::zero())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn pendulum_a() -> DMatrix<f64> {
        let k = -36.0 / std::f64::consts::PI.powi(2);
        let off = 3f64.powf(-0.5);
        dmatrix![k, k * off; k * off, k]
    }

    fn obstacles() -> SafeSet<f64> {
        let centers = [(-1.5, 0.7), (0.5, 0.7), (-0.5, -0.7), (1.5, -0.7)];
        SafeSet::new(
            centers
                .iter()
                .map(|&(cx, cy)| QuadraticBarrier::outside_ball(&dvector![cx, cy], 0.4))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn evaluates_examples() {
        let affine = QuadraticBarrier::affine(dvector![1.0], 0.0);
        assert_eq!(affine.eval(&dvector![1.0]).unwrap(), 1.0);

        let pend = QuadraticBarrier::new(pendulum_a(), dvector![0.0, 0.0], 1.0).unwrap();
        assert_eq!(pend.eval(&dvector![0.0, 0.0]).unwrap(), 1.0);

        let hyper = QuadraticBarrier::new(dmatrix![5.0, 0.0; 0.0, -1.0], dvector![0.0, 0.0], 0.3).unwrap();
        assert!((hyper.eval(&dvector![-2.5, 1.0]).unwrap() - 30.55f64).abs() < 1e-12);
    }

    #[test]
    fn boundary_counts_as_safe() {
        let set = SafeSet::single(QuadraticBarrier::affine(dvector![1.0], 0.0));
        assert!(set.contains(&dvector![0.0]));
        assert!(!set.contains(&dvector![-1e-9]));
    }

    #[test]
    fn obstacle_set_membership() {
        let set = obstacles();
        assert!(set.contains(&dvector![-2.5, 0.5]));
        assert!(!set.contains(&dvector![-1.5, 0.7]));
        let h1 = set.barriers()[0].eval(&dvector![-2.5, 0.5]).unwrap();
        assert!((h1 - (1.04 - 0.16)).abs() < 1e-12);
    }

    #[test]
    fn upper_bound_validation() {
        let pend = QuadraticBarrier::new(pendulum_a(), dvector![0.0, 0.0], 1.0).unwrap();
        assert!(pend.clone().with_upper_bound(1.0).is_ok());
        assert!(pend.with_upper_bound(0.5).is_err());

        let hyper = QuadraticBarrier::new(dmatrix![5.0, 0.0; 0.0, -1.0], dvector![0.0, 0.0], 0.3).unwrap();
        assert!(hyper.with_upper_bound(100.0).is_err());

        let affine = QuadraticBarrier::affine(dvector![1.0], 0.0);
        assert!(affine.with_upper_bound(10.0).is_err());
        let constant = QuadraticBarrier::affine(dvector![0.0], 2.0);
        assert!(constant.clone().with_upper_bound(2.0).is_ok());
        assert!(constant.with_upper_bound(1.0).is_err());

        // Concave with a linear term: sup = c − ¼ bᵀA⁻¹b = 1 + 1 = 2.
        let shifted = QuadraticBarrier::new(dmatrix![-1.0], dvector![2.0], 1.0).unwrap();
        assert!((shifted.supremum().unwrap() - 2.0f64).abs() < 1e-12);
        assert!(shifted.clone().with_upper_bound(2.0).is_ok());
        assert!(shifted.with_upper_bound(1.9).is_err());

        // Singular A with b outside its range is unbounded.
        let degenerate =
            QuadraticBarrier::new(dmatrix![-1.0, 0.0; 0.0, 0.0], dvector![0.0, 1.0], 0.0).unwrap();
        assert!(degenerate.supremum().is_none());
    }

    #[test]
    fn rejects_scale_below_one() {
        let bar = QuadraticBarrier::affine(dvector![1.0], 0.0);
        assert!(bar.clone().with_scale(0.5).is_err());
        assert!(bar.with_scale(50.0).is_ok());
    }

    #[test]
    fn single_precision_eval() {
        let bar = QuadraticBarrier::<f32>::new(dmatrix![5.0, 0.0; 0.0, -1.0], dvector![0.0, 0.0], 0.3).unwrap();
        assert!((bar.eval(&dvector![-2.5f32, 1.0]).unwrap() - 30.55).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn scaled_barrier_is_proportional(x0 in -3.0..3.0f64, x1 in -3.0..3.0f64, a in 1.0..50.0f64) {
            let bar = QuadraticBarrier::new(dmatrix![5.0, 0.0; 0.0, -1.0], dvector![0.2, -0.1], 0.3)
                .unwrap()
                .with_scale(a)
                .unwrap();
            let x = dvector![x0, x1];
            let h = bar.eval(&x).unwrap();
            let ah = bar.eval_scaled(&x).unwrap();
            prop_assert!((ah - a * h).abs() <= 1e-12 * (1.0 + ah.abs()));
            prop_assert_eq!(ah >= 0.0, h >= 0.0);
        }

        #[test]
        fn membership_matches_min_value(x0 in -3.0..3.0f64, x1 in -1.5..1.5f64) {
            let set = obstacles();
            let x = dvector![x0, x1];
            prop_assert_eq!(set.contains(&x), set.min_value(&x).unwrap() >= 0.0);
        }
    }
}

//! Closed-loop experiment description and its JSON document form.
//!
//! Document layout (`schema_version` 1); matrices are row-major nested arrays:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "name": "affine_1d",
//!   "description": "",
//!   "dynamics": { "kind": "linear", "drift_matrix": [[1.0]], "input_matrix": [[0.01]] },
//!   "noise_cov": [[0.01]],
//!   "barriers": [ { "a": [[0.0]], "b": [1.0], "c": 0.0, "scale": 50.0, "upper_bound": null } ],
//!   "conditions": [ { "family": "exp_quadratic", "beta": 0.0001, "barrier_index": 0 } ],
//!   "horizon": 150,
//!   "initial_state": [1.0],
//!   "nominal": { "kind": "proportional", "gain": 1.0, "goal": [0.0] },
//!   "dt": 0.01
//! }
//! ```
//!
//! `dynamics.kind` is `linear` or `pendulum` (with field `dt`); `nominal.kind`
//! is `zero` or `proportional` (`u = −gain·(x − goal)`, needs `m = n`).
//! Condition families: `linear_zeroing` (`alpha`), `c_martingale`,
//! `polynomial_squared` and `exp_quadratic` (`beta`).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{QuadraticBarrier, SafeSet};
use crate::condition::CbfCondition;
use crate::error::{Error, Result};
use crate::system::{ControlAffineSystem, Dynamics};
use crate::{linalg, Real};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

pub type PolicyFn<T> = Arc<dyn Fn(usize, &DVector<T>) -> DVector<T> + Send + Sync>;

/// Nominal controller `(k, x) ↦ u_nom`.
#[derive(Clone)]
pub enum NominalPolicy<T: Real> {
    Zero,
    /// `u = −gain·(x − goal)`.
    Proportional { gain: T, goal: DVector<T> },
    /// Not serializable.
    Custom(PolicyFn<T>),
}

impl<T: Real> fmt::Debug for NominalPolicy<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NominalPolicy::Zero => f.write_str("Zero"),
            NominalPolicy::Proportional { gain, goal } => f
                .debug_struct("Proportional")
                .field("gain", gain)
                .field("goal", goal)
                .finish(),
            NominalPolicy::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl<T: Real> NominalPolicy<T> {
    pub fn eval(&self, k: usize, x: &DVector<T>, input_dim: usize) -> DVector<T> {
        match self {
            NominalPolicy::Zero => DVector::zeros(input_dim),
            NominalPolicy::Proportional { gain, goal } => (x - goal) * -*gain,
            NominalPolicy::Custom(f) => f(k, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scenario<T: Real> {
    pub name: String,
    pub description: String,
    pub system: ControlAffineSystem<T>,
    pub safe_set: SafeSet<T>,
    /// One condition per constrained barrier; all are enforced jointly.
    pub conditions: Vec<CbfCondition<T>>,
    pub horizon: usize,
    pub initial_state: DVector<T>,
    pub nominal: NominalPolicy<T>,
    /// Discretisation step; informational.
    pub dt: T,
}

impl<T: Real> Scenario<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.system.state_dim();
        if self.safe_set.dim() != n {
            return Err(Error::dim("safe set dimension", n, self.safe_set.dim()));
        }
        self.system.check_state(&self.initial_state)?;
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        if !(self.dt > T::zero()) {
            return Err(Error::InvalidArgument("dt must be > 0".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::InvalidArgument("scenario needs at least one condition".into()));
        }
        for cond in &self.conditions {
            cond.validate(&self.safe_set, self.system.noise_cov())?;
        }
        if !self.safe_set.contains(&self.initial_state) {
            return Err(Error::InvalidArgument("initial state lies outside the safe set".into()));
        }
        if let NominalPolicy::Proportional { goal, .. } = &self.nominal {
            if goal.len() != n || self.system.input_dim() != n {
                return Err(Error::InvalidArgument(
                    "proportional nominal policy needs goal and input of state dimension".into(),
                ));
            }
        }
        let u = self.nominal.eval(0, &self.initial_state, self.system.input_dim());
        self.system.check_input(&u)
    }

    pub fn nominal_input(&self, k: usize, x: &DVector<T>) -> DVector<T> {
        self.nominal.eval(k, x, self.system.input_dim())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicsDoc {
    Linear {
        drift_matrix: Vec<Vec<f64>>,
        input_matrix: Vec<Vec<f64>>,
    },
    Pendulum {
        dt: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierDoc {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub upper_bound: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NominalDoc {
    Zero,
    Proportional { gain: f64, goal: Vec<f64> },
}

/// Serialized form of a [`Scenario`] with `f64` scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDocument {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub dynamics: DynamicsDoc,
    pub noise_cov: Vec<Vec<f64>>,
    pub barriers: Vec<BarrierDoc>,
    pub conditions: Vec<CbfCondition<f64>>,
    pub horizon: usize,
    pub initial_state: Vec<f64>,
    pub nominal: NominalDoc,
    pub dt: f64,
}

impl ScenarioDocument {
    pub fn from_scenario(s: &Scenario<f64>) -> Result<Self> {
        let dynamics = match s.system.dynamics() {
            Dynamics::Linear {
                drift_matrix,
                input_matrix,
            } => DynamicsDoc::Linear {
                drift_matrix: linalg::matrix_to_rows(drift_matrix),
                input_matrix: linalg::matrix_to_rows(input_matrix),
            },
            Dynamics::Pendulum { dt } => DynamicsDoc::Pendulum { dt: *dt },
            Dynamics::Custom { .. } => {
                return Err(Error::Document("callback dynamics cannot be serialized".into()))
            }
        };
        let nominal = match &s.nominal {
            NominalPolicy::Zero => NominalDoc::Zero,
            NominalPolicy::Proportional { gain, goal } => NominalDoc::Proportional {
                gain: *gain,
                goal: goal.iter().copied().collect(),
            },
            NominalPolicy::Custom(_) => {
                return Err(Error::Document("callback nominal policy cannot be serialized".into()))
            }
        };
        let barriers = s
            .safe_set
            .barriers()
            .iter()
            .map(|b| BarrierDoc {
                a: linalg::matrix_to_rows(b.a()),
                b: b.b().iter().copied().collect(),
                c: b.c(),
                scale: b.scale(),
                upper_bound: b.upper_bound(),
            })
            .collect();
        Ok(Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: s.name.clone(),
            description: s.description.clone(),
            dynamics,
            noise_cov: linalg::matrix_to_rows(s.system.noise_cov()),
            barriers,
            conditions: s.conditions.clone(),
            horizon: s.horizon,
            initial_state: s.initial_state.iter().copied().collect(),
            nominal,
            dt: s.dt,
        })
    }

    /// Builds and validates the scenario.
    pub fn into_scenario(self) -> Result<Scenario<f64>> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::Document(format!(
                "unsupported schema_version {} (expected {SCENARIO_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let dynamics = match self.dynamics {
            DynamicsDoc::Linear {
                drift_matrix,
                input_matrix,
            } => Dynamics::Linear {
                drift_matrix: linalg::matrix_from_rows(&drift_matrix)?,
                input_matrix: linalg::matrix_from_rows(&input_matrix)?,
            },
            DynamicsDoc::Pendulum { dt } => Dynamics::Pendulum { dt },
        };
        let system = ControlAffineSystem::new(dynamics, linalg::matrix_from_rows(&self.noise_cov)?)?;
        let barriers = self
            .barriers
            .into_iter()
            .map(|d| {
                let a: DMatrix<f64> = linalg::matrix_from_rows(&d.a)?;
                let mut bar = QuadraticBarrier::new(a, DVector::from_vec(d.b), d.c)?.with_scale(d.scale)?;
                if let Some(ub) = d.upper_bound {
                    bar = bar.with_upper_bound(ub)?;
                }
                Ok(bar)
            })
            .collect::<Result<Vec<_>>>()?;
        let nominal = match self.nominal {
            NominalDoc::Zero => NominalPolicy::Zero,
            NominalDoc::Proportional { gain, goal } => NominalPolicy::Proportional {
                gain,
                goal: DVector::from_vec(goal),
            },
        };
        let scenario = Scenario {
            name: self.name,
            description: self.description,
            system,
            safe_set: SafeSet::new(barriers)?,
            conditions: self.conditions,
            horizon: self.horizon,
            initial_state: DVector::from_vec(self.initial_state),
            nominal,
            dt: self.dt,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

impl Scenario<f64> {
    pub fn to_json(&self) -> Result<String> {
        let doc = ScenarioDocument::from_scenario(self)?;
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Document(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScenarioDocument = serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
        doc.into_scenario()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::ConditionFamily;
    use nalgebra::{dmatrix, dvector};

    fn scenario() -> Scenario<f64> {
        let system = ControlAffineSystem::new(
            Dynamics::Linear {
                drift_matrix: dmatrix![1.0],
                input_matrix: dmatrix![0.01],
            },
            dmatrix![0.01],
        )
        .unwrap();
        Scenario {
            name: "line".into(),
            description: String::new(),
            system,
            safe_set: SafeSet::single(QuadraticBarrier::affine(dvector![1.0], 0.0).with_scale(50.0).unwrap()),
            conditions: vec![CbfCondition::new(ConditionFamily::ExpQuadratic { beta: 1e-4 }, 0)],
            horizon: 150,
            initial_state: dvector![1.0],
            nominal: NominalPolicy::Proportional {
                gain: 1.0,
                goal: dvector![0.0],
            },
            dt: 0.01,
        }
    }

    #[test]
    fn json_round_trip() {
        let s = scenario();
        s.validate().unwrap();
        let text = s.to_json().unwrap();
        let back = Scenario::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.safe_set, s.safe_set);
        assert_eq!(back.conditions, s.conditions);
    }

    #[test]
    fn rejects_unsafe_start_and_bad_version() {
        let mut s = scenario();
        s.initial_state = dvector![-0.5];
        assert!(s.validate().is_err());
        let mut doc = ScenarioDocument::from_scenario(&scenario()).unwrap();
        doc.schema_version = 9;
        assert!(matches!(doc.into_scenario(), Err(Error::Document(_))));
    }

    #[test]
    fn condition_json_shape() {
        let c = CbfCondition::new(ConditionFamily::LinearZeroing { alpha: 0.5 }, 0);
        let v = serde_json::to_value(c).unwrap();
        assert_eq!(v["family"], "linear_zeroing");
        assert_eq!(v["alpha"], 0.5);
    }

    #[test]
    fn nominal_policies() {
        let x = dvector![2.0, -1.0];
        assert_eq!(NominalPolicy::<f64>::Zero.eval(0, &x, 1), dvector![0.0]);
        let p = NominalPolicy::Proportional {
            gain: 1.0,
            goal: dvector![2.5, 0.5],
        };
        assert_eq!(p.eval(3, &x, 2), dvector![0.5, 1.5]);
    }
}

//! The six benchmark scenarios.

use std::fmt;
use std::str::FromStr;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{QuadraticBarrier, SafeSet};
use crate::condition::{max_feasible_alpha, max_feasible_beta_poly, CbfCondition, ConditionFamily};
use crate::error::{Error, Result};
use crate::scenario::{NominalPolicy, Scenario};
use crate::system::{ControlAffineSystem, Dynamics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetId {
    Affine1d,
    PendulumLinear,
    PendulumPoly,
    PendulumExpquad,
    IntegratorHyperbola,
    IntegratorMulti,
}

impl PresetId {
    pub const ALL: [PresetId; 6] = [
        PresetId::Affine1d,
        PresetId::PendulumLinear,
        PresetId::PendulumPoly,
        PresetId::PendulumExpquad,
        PresetId::IntegratorHyperbola,
        PresetId::IntegratorMulti,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetId::Affine1d => "affine_1d",
            PresetId::PendulumLinear => "pendulum_linear",
            PresetId::PendulumPoly => "pendulum_poly",
            PresetId::PendulumExpquad => "pendulum_expquad",
            PresetId::IntegratorHyperbola => "integrator_hyperbola",
            PresetId::IntegratorMulti => "integrator_multi",
        }
    }
}

impl fmt::Display for PresetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioPreset<T: crate::Real> {
    pub id: PresetId,
    pub scenario: Scenario<T>,
    /// Published exit-probability figure for the preset, where one exists.
    pub reference_bound: Option<f64>,
    pub figure_ref: &'static str,
}

pub const DT: f64 = 0.01;

/// `A = −(6²/π²)·[[1, 1/√3], [1/√3, 1]]`.
pub fn pendulum_barrier_matrix() -> DMatrix<f64> {
    let k = -36.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let s = 1.0 / 3f64.sqrt();
    dmatrix![k, k * s; k * s, k]
}

/// `diag(0.05², 0.25²)·Δt`.
pub fn pendulum_noise() -> DMatrix<f64> {
    DMatrix::from_diagonal(&dvector![0.05 * 0.05, 0.25 * 0.25]) * DT
}

pub const OBSTACLE_CENTERS: [[f64; 2]; 4] = [[-1.5, 0.7], [0.5, 0.7], [-0.5, -0.7], [1.5, -0.7]];
pub const OBSTACLE_RADIUS: f64 = 0.4;

fn integrator_system() -> Result<ControlAffineSystem<f64>> {
    ControlAffineSystem::new(
        Dynamics::Linear {
            drift_matrix: DMatrix::identity(2, 2),
            input_matrix: DMatrix::identity(2, 2) * DT,
        },
        DMatrix::identity(2, 2) * (0.02 * DT),
    )
}

fn pendulum(id: PresetId) -> Result<Scenario<f64>> {
    let system = ControlAffineSystem::new(Dynamics::Pendulum { dt: DT }, pendulum_noise())?;
    let base = QuadraticBarrier::new(pendulum_barrier_matrix(), dvector![0.0, 0.0], 1.0)?.with_upper_bound(1.0)?;
    let (barrier, family) = match id {
        PresetId::PendulumLinear => {
            let alpha = max_feasible_alpha(&base, system.noise_cov())?;
            (base, ConditionFamily::LinearZeroing { alpha })
        }
        PresetId::PendulumPoly => {
            let beta = max_feasible_beta_poly(&base, system.noise_cov())?;
            (base, ConditionFamily::PolynomialSquared { beta })
        }
        _ => (base.with_scale(10.0)?, ConditionFamily::ExpQuadratic { beta: 1e-5 }),
    };
    Ok(Scenario {
        name: id.as_str().into(),
        description: format!("inverted pendulum, {} condition", family.name()),
        system,
        safe_set: SafeSet::single(barrier),
        conditions: vec![CbfCondition::new(family, 0)],
        horizon: 100,
        initial_state: dvector![0.0, 0.0],
        nominal: NominalPolicy::Zero,
        dt: DT,
    })
}

fn build(id: PresetId) -> Result<(Scenario<f64>, Option<f64>, &'static str)> {
    Ok(match id {
        PresetId::Affine1d => {
            let system = ControlAffineSystem::new(
                Dynamics::Linear {
                    drift_matrix: dmatrix![1.0],
                    input_matrix: dmatrix![DT],
                },
                dmatrix![DT],
            )?;
            let scenario = Scenario {
                name: id.as_str().into(),
                description: "1D integrator with affine barrier h(x) = x".into(),
                system,
                safe_set: SafeSet::single(QuadraticBarrier::affine(dvector![1.0], 0.0).with_scale(50.0)?),
                conditions: vec![CbfCondition::new(ConditionFamily::ExpQuadratic { beta: 1e-4 }, 0)],
                horizon: 150,
                initial_state: dvector![1.0],
                nominal: NominalPolicy::Proportional {
                    gain: 1.0,
                    goal: dvector![0.0],
                },
                dt: DT,
            };
            (scenario, None, "affine barrier: 200 sample paths and P(x,150) heatmap")
        }
        PresetId::PendulumLinear => (pendulum(id)?, Some(0.211), "pendulum sample paths, linear condition"),
        PresetId::PendulumPoly => (pendulum(id)?, Some(0.0016), "pendulum sample paths, polynomial condition"),
        PresetId::PendulumExpquad => (pendulum(id)?, Some(0.0010), "pendulum sample paths, exponential condition"),
        PresetId::IntegratorHyperbola => {
            let bar = QuadraticBarrier::new(dmatrix![5.0, 0.0; 0.0, -1.0], dvector![0.0, 0.0], 0.3)?.with_scale(20.0)?;
            let scenario = Scenario {
                name: id.as_str().into(),
                description: "2D single integrator between hyperbola branches".into(),
                system: integrator_system()?,
                safe_set: SafeSet::single(bar),
                conditions: vec![CbfCondition::new(ConditionFamily::ExpQuadratic { beta: 1e-4 }, 0)],
                horizon: 300,
                initial_state: dvector![-2.5, 1.0],
                nominal: NominalPolicy::Proportional {
                    gain: 1.0,
                    goal: dvector![2.5, 0.5],
                },
                dt: DT,
            };
            (scenario, Some(0.03), "integrator sample paths, hyperbola barrier")
        }
        PresetId::IntegratorMulti => {
            let barriers = OBSTACLE_CENTERS
                .iter()
                .map(|c| QuadraticBarrier::outside_ball(&DVector::from_row_slice(c), OBSTACLE_RADIUS).with_scale(20.0))
                .collect::<Result<Vec<_>>>()?;
            let conditions = (0..barriers.len())
                .map(|i| CbfCondition::new(ConditionFamily::ExpQuadratic { beta: 1e-5 }, i))
                .collect();
            let scenario = Scenario {
                name: id.as_str().into(),
                description: "2D single integrator among four disc obstacles".into(),
                system: integrator_system()?,
                safe_set: SafeSet::new(barriers)?,
                conditions,
                horizon: 300,
                initial_state: dvector![-2.5, 0.5],
                nominal: NominalPolicy::Proportional {
                    gain: 1.0,
                    goal: dvector![2.5, -0.5],
                },
                dt: DT,
            };
            (scenario, Some(0.003), "integrator sample paths, four obstacles with Boole aggregation")
        }
    })
}

pub fn preset(id: PresetId) -> Result<ScenarioPreset<f64>> {
    let (scenario, reference_bound, figure_ref) = build(id)?;
    scenario.validate()?;
    Ok(ScenarioPreset {
        id,
        scenario,
        reference_bound,
        figure_ref,
    })
}

pub fn preset_by_name(name: &str) -> Result<ScenarioPreset<f64>> {
    preset(name.parse()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::scenario_bound;
    use crate::moments::lambda_matrix;

    #[test]
    fn all_presets_validate_and_start_strictly_inside() {
        for id in PresetId::ALL {
            let p = preset(id).unwrap();
            assert_eq!(p.scenario.name, id.as_str());
            let h = p.scenario.safe_set.min_value(&p.scenario.initial_state).unwrap();
            assert!(h > 0.0, "{id}: {h}");
            assert_eq!(id.as_str().parse::<PresetId>().unwrap(), id);
        }
        assert!(matches!("nope".parse::<PresetId>(), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn horizons_and_obstacles() {
        assert_eq!(preset(PresetId::Affine1d).unwrap().scenario.horizon, 150);
        let multi = preset(PresetId::IntegratorMulti).unwrap().scenario;
        assert_eq!(multi.safe_set.barriers().len(), 4);
        for (bar, c) in multi.safe_set.barriers().iter().zip(OBSTACLE_CENTERS) {
            let centre = DVector::from_row_slice(&c);
            assert!(bar.eval(&centre).unwrap() < 0.0);
            let edge = &centre + dvector![OBSTACLE_RADIUS, 0.0];
            assert!(bar.eval(&edge).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn regression_pinned_parameters() {
        let lin = preset(PresetId::PendulumLinear).unwrap().scenario;
        assert_eq!(
            lin.conditions[0].family,
            ConditionFamily::LinearZeroing {
                alpha: 0.9976290843027693
            }
        );
        let poly = preset(PresetId::PendulumPoly).unwrap().scenario;
        match poly.conditions[0].family {
            ConditionFamily::PolynomialSquared { beta } => assert!((beta - 1.6309360688371913e-5).abs() < 1e-18),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hyperbola_lambda_is_positive_definite() {
        let s = preset(PresetId::IntegratorHyperbola).unwrap().scenario;
        let (a_s, _, _) = s.safe_set.barriers()[0].scaled_coefficients();
        assert!(lambda_matrix(s.system.noise_cov(), &a_s).is_ok());
    }

    #[test]
    fn preset_bounds() {
        let b = scenario_bound(&preset(PresetId::PendulumExpquad).unwrap().scenario).unwrap();
        assert!((b.raw - ((-10f64).exp() + 1e-3)).abs() < 1e-12);
        let b = scenario_bound(&preset(PresetId::IntegratorHyperbola).unwrap().scenario).unwrap();
        assert!((0.0299..=0.0301).contains(&b.raw));
        let b = scenario_bound(&preset(PresetId::IntegratorMulti).unwrap().scenario).unwrap();
        assert_eq!(b.per_barrier_terms.len(), 4);
        assert!((b.raw - 0.012000022720459927).abs() < 1e-15, "{}", b.raw);
        let b = scenario_bound(&preset(PresetId::Affine1d).unwrap().scenario).unwrap();
        assert!((b.raw - ((-50f64).exp() + 0.015)).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_every_preset() {
        for id in PresetId::ALL {
            let s = preset(id).unwrap().scenario;
            let text = s.to_json().unwrap();
            let back = Scenario::from_json(&text).unwrap();
            assert_eq!(back.safe_set, s.safe_set, "{id}");
            assert_eq!(back.conditions, s.conditions, "{id}");
            assert_eq!(back.to_json().unwrap(), text, "{id}");
        }
    }
}

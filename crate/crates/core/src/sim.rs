//! Seeded closed-loop simulation and Monte-Carlo estimation of exit frequencies.
//!
//! Trial `i` of a batch draws its noise from `ChaCha8Rng::seed_from_u64(base_seed + i)`.
//! Before the first exit the input is the filtered one; afterwards the nominal
//! input is applied unchanged.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::bounds::{expected_next_phi, phi, scenario_bound, BoundReport};
use crate::condition::condition_residual;
use crate::error::{Error, Result};
use crate::filter::{filter_step_multi, SolverOptions, SolverStatus};
use crate::scenario::Scenario;
use crate::{lit, to_f64, Real};

/// Pre-exit residuals at or above `-RESIDUAL_TOL` count as satisfying the condition.
pub const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimOptions<T> {
    pub filter: SolverOptions<T>,
    /// With `false` every noise draw is zero.
    pub noise_enabled: bool,
}

impl<T: Real> Default for SimOptions<T> {
    fn default() -> Self {
        Self {
            filter: SolverOptions::default(),
            noise_enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord<T: Real> {
    /// `x_0 … x_K`
    pub states: Vec<DVector<T>>,
    /// `u_0 … u_{K−1}`
    pub inputs: Vec<DVector<T>>,
    /// Minimum condition residual at the applied input, per step.
    pub residuals: Vec<T>,
    /// Smallest `k` with some `hᵢ(x_k) < 0`.
    pub first_exit_step: Option<usize>,
    /// The infeasibility fallback was used at least once.
    pub tainted: bool,
    pub seed: u64,
}

impl<T: Real> TrajectoryRecord<T> {
    pub fn exited(&self) -> bool {
        self.first_exit_step.is_some()
    }

    /// Residuals of steps taken from inside the safe set.
    pub fn pre_exit_residuals(&self) -> &[T] {
        let end = self.first_exit_step.unwrap_or(self.residuals.len()).min(self.residuals.len());
        &self.residuals[..end]
    }
}

fn min_condition_residual<T: Real>(scenario: &Scenario<T>, x: &DVector<T>, u: &DVector<T>) -> Result<T> {
    let mut min = T::max_value().expect("bounded scalar");
    for cond in &scenario.conditions {
        let bar = cond.barrier(&scenario.safe_set)?;
        min = min.min(condition_residual(&cond.family, &scenario.system, bar, x, u)?);
    }
    Ok(min)
}

/// One closed-loop rollout of `scenario.horizon` steps.
///
/// An infeasible filter step under the `error` fallback aborts the trial with
/// [`Error::TrialAborted`].
pub fn simulate_trajectory<T: Real>(scenario: &Scenario<T>, opts: &SimOptions<T>, seed: u64) -> Result<TrajectoryRecord<T>> {
    let sys = &scenario.system;
    let horizon = scenario.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = scenario.initial_state.clone();
    sys.check_state(&x)?;
    let mut record = TrajectoryRecord {
        states: Vec::with_capacity(horizon + 1),
        inputs: Vec::with_capacity(horizon),
        residuals: Vec::with_capacity(horizon),
        first_exit_step: (!scenario.safe_set.contains(&x)).then_some(0),
        tainted: false,
        seed,
    };
    record.states.push(x.clone());
    for k in 0..horizon {
        let u_nom = scenario.nominal_input(k, &x);
        let (u, r) = if record.first_exit_step.is_none() {
            let res = filter_step_multi(sys, &scenario.safe_set, &scenario.conditions, &x, &u_nom, &opts.filter)
                .map_err(|e| match e {
                    Error::Infeasible { .. } => Error::TrialAborted {
                        step: k,
                        state: x.iter().map(|v| to_f64(*v)).collect(),
                    },
                    other => other,
                })?;
            if res.solver_status == SolverStatus::InfeasibleFallback {
                record.tainted = true;
            }
            (res.u_star, res.residual_at_solution)
        } else {
            let r = min_condition_residual(scenario, &x, &u_nom).unwrap_or_else(|_| lit::<T>(f64::NAN));
            (u_nom, r)
        };
        let mut next = sys.drift_eval(&x, &u)?;
        if opts.noise_enabled {
            next += sys.sample_noise(&mut rng);
        }
        x = next;
        record.inputs.push(u);
        record.residuals.push(r);
        record.states.push(x.clone());
        if record.first_exit_step.is_none() && !scenario.safe_set.contains(&x) {
            record.first_exit_step = Some(k + 1);
        }
    }
    Ok(record)
}

/// Exact (Clopper–Pearson) two-sided 95% interval for `successes / trials`.
pub fn clopper_pearson_95(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let (x, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0).expect("positive shape").inverse_cdf(0.025)
    };
    let hi = if successes >= trials {
        1.0
    } else {
        Beta::new(x + 1.0, n - x).expect("positive shape").inverse_cdf(0.975)
    };
    (lo, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalResult {
    pub n_trials: usize,
    pub n_exited: usize,
    /// Trials that used the infeasibility fallback; the bound does not cover them.
    pub n_tainted: usize,
    /// Trials stopped by an infeasible filter step under the `error` fallback.
    pub n_aborted: usize,
    /// `n_exited / (n_trials − n_aborted)`.
    pub exit_frequency: f64,
    pub clopper_pearson_95: (f64, f64),
    /// Raw theoretical bound.
    pub theoretical_bound: f64,
    /// Lower confidence limit ≤ theoretical bound.
    pub bound_satisfied: bool,
    /// Smallest pre-exit residual over untainted completed trials.
    pub min_pre_exit_residual: f64,
}

/// A Monte-Carlo batch with per-trial records, in trial order.
#[derive(Clone, Debug)]
pub struct MonteCarloRun<T: Real> {
    pub result: EmpiricalResult,
    pub bound: BoundReport,
    pub records: Vec<TrajectoryRecord<T>>,
    /// `(trial index, error)` for trials that did not complete.
    pub aborted: Vec<(usize, Error)>,
}

pub fn run_batch<T: Real>(
    scenario: &Scenario<T>,
    opts: &SimOptions<T>,
    n_trials: usize,
    base_seed: u64,
) -> Result<MonteCarloRun<T>> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be >= 1".into()));
    }
    let bound = scenario_bound(scenario)?;
    let outcomes: Vec<Result<TrajectoryRecord<T>>> = (0..n_trials)
        .into_par_iter()
        .map(|i| simulate_trajectory(scenario, opts, base_seed.wrapping_add(i as u64)))
        .collect();
    let mut records = Vec::with_capacity(n_trials);
    let mut aborted = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => records.push(r),
            Err(e @ Error::TrialAborted { .. }) => aborted.push((i, e)),
            Err(e) => return Err(e),
        }
    }
    let completed = records.len();
    let n_exited = records.iter().filter(|r| r.exited()).count();
    let n_tainted = records.iter().filter(|r| r.tainted).count();
    let min_pre_exit_residual = records
        .iter()
        .filter(|r| !r.tainted)
        .flat_map(|r| r.pre_exit_residuals().iter().map(|v| to_f64(*v)))
        .fold(f64::INFINITY, f64::min);
    let ci = clopper_pearson_95(n_exited, completed);
    let result = EmpiricalResult {
        n_trials,
        n_exited,
        n_tainted,
        n_aborted: aborted.len(),
        exit_frequency: if completed == 0 { 0.0 } else { n_exited as f64 / completed as f64 },
        clopper_pearson_95: ci,
        theoretical_bound: bound.raw,
        bound_satisfied: ci.0 <= bound.raw,
        min_pre_exit_residual,
    };
    Ok(MonteCarloRun {
        result,
        bound,
        records,
        aborted,
    })
}

/// Trials use seeds `base_seed + i`; aggregation is ordered by trial index.
pub fn run_monte_carlo<T: Real>(
    scenario: &Scenario<T>,
    opts: &SimOptions<T>,
    n_trials: usize,
    base_seed: u64,
) -> Result<EmpiricalResult> {
    Ok(run_batch(scenario, opts, n_trials, base_seed)?.result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub step: usize,
    /// Index into the scenario's conditions.
    pub condition: usize,
    /// `E[Φ(h(x_{k+1}), k+1) | x_k, u_k]`
    pub lhs: f64,
    /// `Φ(h(x_k), k)`
    pub rhs: f64,
    pub ok: bool,
}

/// Restates each pre-exit step of `record` in Φ-space: `ok` iff `lhs ≤ rhs + 1e−8`.
pub fn audit_supermartingale<T: Real>(record: &TrajectoryRecord<T>, scenario: &Scenario<T>) -> Result<Vec<AuditEntry>> {
    let horizon = record.inputs.len();
    let end = record.first_exit_step.unwrap_or(horizon).min(horizon);
    let mut out = Vec::with_capacity(end * scenario.conditions.len());
    for k in 0..end {
        let (x, u) = (&record.states[k], &record.inputs[k]);
        for (i, cond) in scenario.conditions.iter().enumerate() {
            let bar = cond.barrier(&scenario.safe_set)?;
            let lhs = expected_next_phi(&cond.family, &scenario.system, bar, x, u, k, horizon)?;
            let rhs = phi(&cond.family, bar, bar.eval(x)?, k, horizon)?;
            out.push(AuditEntry {
                step: k,
                condition: i,
                lhs: to_f64(lhs),
                rhs: to_f64(rhs),
                ok: lhs <= rhs + lit::<T>(RESIDUAL_TOL),
            });
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Document(e.to_string())
}

fn header(n: usize, m: usize, with_trial: bool) -> Vec<String> {
    let mut h = Vec::with_capacity(n + m + 4);
    if with_trial {
        h.push("trial".to_string());
    }
    h.push("k".into());
    h.extend((1..=n).map(|i| format!("x{i}")));
    h.extend((1..=m).map(|i| format!("u{i}")));
    h.push("residual".into());
    h.push("exited".into());
    h
}

fn write_rows<T: Real, W: Write>(w: &mut csv::Writer<W>, rec: &TrajectoryRecord<T>, m: usize, trial: Option<usize>) -> Result<()> {
    for (k, x) in rec.states.iter().enumerate() {
        let mut row = Vec::new();
        if let Some(t) = trial {
            row.push(t.to_string());
        }
        row.push(k.to_string());
        row.extend(x.iter().map(|v| to_f64(*v).to_string()));
        match rec.inputs.get(k) {
            Some(u) => row.extend(u.iter().map(|v| to_f64(*v).to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), m)),
        }
        row.push(rec.residuals.get(k).map(|r| to_f64(*r).to_string()).unwrap_or_default());
        let exited = rec.first_exit_step.is_some_and(|e| k >= e);
        row.push(u8::from(exited).to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    Ok(())
}

/// `k,x1..xn,u1..um,residual,exited`; the final state row has empty input and residual cells.
pub fn write_trajectory_csv<T: Real, W: Write>(rec: &TrajectoryRecord<T>, n: usize, m: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(n, m, false)).map_err(csv_err)?;
    write_rows(&mut w, rec, m, None)?;
    w.flush().map_err(|e| Error::Document(e.to_string()))
}

/// Same layout as [`write_trajectory_csv`] with a leading `trial` column.
pub fn write_batch_csv<T: Real, W: Write>(records: &[TrajectoryRecord<T>], n: usize, m: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(n, m, true)).map_err(csv_err)?;
    for (i, rec) in records.iter().enumerate() {
        write_rows(&mut w, rec, m, Some(i))?;
    }
    w.flush().map_err(|e| Error::Document(e.to_string()))
}

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub schema_version: u32,
    pub scenario: String,
    pub base_seed: u64,
    pub horizon: usize,
    pub empirical: EmpiricalResult,
    pub bound: BoundReport,
    /// The bound does not cover tainted trials.
    pub bound_void_for_tainted: bool,
}

impl BatchSummary {
    pub fn new<T: Real>(scenario: &Scenario<T>, base_seed: u64, run: &MonteCarloRun<T>) -> Self {
        Self {
            schema_version: SUMMARY_SCHEMA_VERSION,
            scenario: scenario.name.clone(),
            base_seed,
            horizon: scenario.horizon,
            empirical: run.result.clone(),
            bound: run.bound.clone(),
            bound_void_for_tainted: run.result.n_tainted > 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{QuadraticBarrier, SafeSet};
    use crate::condition::{CbfCondition, ConditionFamily};
    use crate::presets::{preset, PresetId};
    use crate::scenario::NominalPolicy;
    use crate::system::{ControlAffineSystem, Dynamics};
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn deterministic_per_seed() {
        let s = preset(PresetId::PendulumExpquad).unwrap().scenario;
        let a = simulate_trajectory(&s, &SimOptions::default(), 11).unwrap();
        let b = simulate_trajectory(&s, &SimOptions::default(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), 101);
        assert_eq!(a.inputs.len(), 100);
    }

    #[test]
    fn zero_horizon_has_single_state() {
        let mut s = preset(PresetId::Affine1d).unwrap().scenario;
        s.horizon = 0;
        let r = simulate_trajectory(&s, &SimOptions::default(), 0).unwrap();
        assert_eq!(r.states.len(), 1);
        assert!(r.inputs.is_empty());
        assert!(!r.exited());
    }

    #[test]
    fn noise_free_affine_decays_without_exit() {
        let s = preset(PresetId::Affine1d).unwrap().scenario;
        let opts = SimOptions {
            noise_enabled: false,
            ..SimOptions::default()
        };
        let r = simulate_trajectory(&s, &opts, 0).unwrap();
        assert!(!r.exited());
        for w in r.states.windows(2) {
            assert!(w[1][0] <= w[0][0] && w[1][0] > 0.0);
        }
    }

    #[test]
    fn clopper_pearson_limits() {
        let (lo, hi) = clopper_pearson_95(0, 500);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.007350).abs() < 1e-5, "{hi}");
        let (lo, hi) = clopper_pearson_95(1, 1);
        assert!((lo - 0.025).abs() < 1e-9 && hi == 1.0);
        let (lo, hi) = clopper_pearson_95(5, 100);
        assert!((lo - 0.01643).abs() < 1e-4 && (hi - 0.11284).abs() < 1e-4, "{lo} {hi}");
    }

    #[test]
    fn single_trial_frequency() {
        let s = preset(PresetId::Affine1d).unwrap().scenario;
        let r = run_monte_carlo(&s, &SimOptions::default(), 1, 3).unwrap();
        assert!(r.exit_frequency == 0.0 || r.exit_frequency == 1.0);
        assert!(run_monte_carlo(&s, &SimOptions::default(), 0, 3).is_err());
    }

    #[test]
    fn batch_is_reproducible() {
        let s = preset(PresetId::PendulumExpquad).unwrap().scenario;
        let a = run_batch(&s, &SimOptions::default(), 16, 99).unwrap();
        let b = run_batch(&s, &SimOptions::default(), 16, 99).unwrap();
        assert_eq!(a.result, b.result);
        assert_eq!(a.records, b.records);
        assert_eq!(a.records[3].seed, 102);
    }

    #[test]
    fn audit_accepts_filtered_and_flags_violations() {
        let s = preset(PresetId::PendulumExpquad).unwrap().scenario;
        let rec = simulate_trajectory(&s, &SimOptions::default(), 5).unwrap();
        let audit = audit_supermartingale(&rec, &s).unwrap();
        assert!(!audit.is_empty());
        assert!(audit.iter().all(|e| e.ok));

        // Hand-built step that pushes the pendulum straight out.
        let bad = TrajectoryRecord {
            states: vec![dvector![0.3, 0.5], dvector![0.0, 0.0]],
            inputs: vec![dvector![100.0]],
            residuals: vec![-1.0],
            first_exit_step: None,
            tainted: false,
            seed: 0,
        };
        let audit = audit_supermartingale(&bad, &s).unwrap();
        assert!(!audit[0].ok);
    }

    #[test]
    fn audit_equality_for_constant_barrier() {
        let system = ControlAffineSystem::new(
            Dynamics::Linear {
                drift_matrix: dmatrix![1.0],
                input_matrix: dmatrix![1.0],
            },
            dmatrix![0.5],
        )
        .unwrap();
        let bar = QuadraticBarrier::affine(dvector![0.0], 2.0);
        let s = Scenario {
            name: "const".into(),
            description: String::new(),
            system,
            safe_set: SafeSet::single(bar),
            conditions: vec![CbfCondition::new(ConditionFamily::ExpQuadratic { beta: 0.0 }, 0)],
            horizon: 3,
            initial_state: dvector![0.0],
            nominal: NominalPolicy::Zero,
            dt: 1.0,
        };
        let rec = simulate_trajectory(&s, &SimOptions::default(), 1).unwrap();
        for e in audit_supermartingale(&rec, &s).unwrap() {
            assert_eq!(e.lhs, e.rhs);
            assert!(e.ok);
        }
    }

    #[test]
    fn csv_layout() {
        let s = preset(PresetId::PendulumExpquad).unwrap().scenario;
        let mut s = s;
        s.horizon = 2;
        let rec = simulate_trajectory(&s, &SimOptions::default(), 1).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&rec, 2, 1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,x1,x2,u1,residual,exited");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].ends_with(",,0"));
    }
}

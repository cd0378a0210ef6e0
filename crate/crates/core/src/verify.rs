//! Self-check suite: closed-form moments against Monte-Carlo, solver
//! cross-checks, identity checks and supermartingale audits on preset runs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::barrier::QuadraticBarrier;
use crate::bounds::{bound_exp_quad, bound_general, bound_poly, phi, phi_floor};
use crate::condition::{affine_condition_residual, exp_quadratic_condition_residual, ConditionFamily, QuadraticInInput};
use crate::error::Result;
use crate::filter::{solve_convex_kkt, solve_nonconvex_multistart, solve_scalar_interval, SolverOptions};
use crate::moments::{expected_exp_neg_quadratic, expected_square_centered_quadratic, mc_expectation_oracle};
use crate::presets::{preset, PresetId};
use crate::sim::{audit_supermartingale, run_batch, SimOptions};
use crate::system::{ControlAffineSystem, Dynamics};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    /// Fewer samples and instances.
    pub fast: bool,
    /// Multiplies every tolerance. `0` makes the statistical checks fail; test hook.
    pub tolerance_scale: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            fast: false,
            tolerance_scale: 1.0,
            seed: 20240901,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn moment_checks(opts: &VerifyOptions) -> Result<CheckOutcome> {
    let samples = if opts.fast { 100_000 } else { 1_000_000 };
    let k = 4.0 * opts.tolerance_scale;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut cases = 0;
    // Evaluation points keep the exponent spread O(1) so the Monte-Carlo
    // estimate of the lognormal-like moment is not dominated by rare draws.
    let mut pairs: Vec<(QuadraticBarrier<f64>, DMatrix<f64>, DVector<f64>)> = Vec::new();
    let pend = preset(PresetId::PendulumExpquad)?.scenario;
    pairs.push((pend.safe_set.barriers()[0].clone(), pend.system.noise_cov().clone(), DVector::from_vec(vec![0.1, -0.2])));
    let hyper = preset(PresetId::IntegratorHyperbola)?.scenario;
    pairs.push((hyper.safe_set.barriers()[0].clone(), hyper.system.noise_cov().clone(), DVector::from_vec(vec![0.0, 0.6])));
    let multi = preset(PresetId::IntegratorMulti)?.scenario;
    for (bar, c) in multi.safe_set.barriers().iter().zip(crate::presets::OBSTACLE_CENTERS) {
        pairs.push((bar.clone(), multi.system.noise_cov().clone(), DVector::from_vec(vec![c[0] + 0.45, c[1]])));
    }
    for (i, (bar, sigma, f)) in pairs.iter().enumerate() {
        let closed = expected_exp_neg_quadratic(bar, sigma, f)?;
        let mc = mc_expectation_oracle(|w| (-bar.eval_scaled(&(f + w)).unwrap()).exp(), sigma, samples, opts.seed + i as u64)?;
        cases += 1;
        worst = worst.max((closed - mc.estimate).abs() / mc.std_error.max(f64::MIN_POSITIVE));
        if !mc.agrees_with(closed, k) {
            failures += 1;
        }
        let closed = expected_square_centered_quadratic(bar.a(), sigma, f)?;
        let mc = mc_expectation_oracle(
            |w| {
                let y = f + w;
                let q = y.dot(&(bar.a() * &y));
                q * q
            },
            sigma,
            samples,
            opts.seed + 100 + i as u64,
        )?;
        cases += 1;
        worst = worst.max((closed - mc.estimate).abs() / mc.std_error.max(f64::MIN_POSITIVE));
        if !mc.agrees_with(closed, k) {
            failures += 1;
        }
    }
    Ok(outcome(
        "moment closed forms vs Monte-Carlo",
        failures == 0,
        format!("{cases} cases, {samples} samples, worst |z| = {worst:.2}, limit {k}"),
    ))
}

fn solver_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let n = if opts.fast { 100 } else { 1000 };
    let tol = 1e-8 * opts.tolerance_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sopts = SolverOptions::default();
    let mut mismatches = 0;
    let mut identity_fail = 0;
    for _ in 0..n {
        let (q, l, c) = (rng.random_range(-5.0..0.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let u: f64 = rng.random_range(-10.0..10.0);
        let exact = solve_scalar_interval(q, l, c, u);
        let kkt = solve_convex_kkt(&QuadraticInInput::new(DMatrix::from_element(1, 1, q), DVector::from_element(1, l), c), &DVector::from_element(1, u), &sopts);
        match (exact, kkt) {
            (Ok(e), Ok(k)) => {
                if !((e.u_star[0] - k.u_star[0]).abs() <= tol) {
                    mismatches += 1;
                }
                if (q * u + l) * u + c >= 0.0 && (e.u_star[0] != u || k.u_star[0] != u) {
                    identity_fail += 1;
                }
            }
            (Err(_), Err(_)) => {}
            _ => mismatches += 1,
        }
    }
    let mut beaten = 0;
    for _ in 0..n {
        let q = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let quad = -(&q * q.transpose());
        let lin = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let form = QuadraticInInput::new(quad, lin, rng.random_range(0.0..3.0));
        let u_nom = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
        let Ok(res) = solve_nonconvex_multistart(&[&form as &dyn crate::condition::InputResidual<f64>], &u_nom, &sopts) else {
            continue;
        };
        for _ in 0..50 {
            let probe = &res.u_star + DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)) * res.distance.max(1e-3);
            use crate::condition::InputResidual;
            if form.value(&probe) >= 0.0 && (&probe - &u_nom).norm() < res.distance - 1e-6 * opts.tolerance_scale {
                beaten += 1;
            }
        }
    }
    vec![
        outcome("scalar interval vs KKT", mismatches == 0, format!("{n} instances, {mismatches} disagreements (tol {tol:e})")),
        outcome("nominal input kept when feasible", identity_fail == 0, format!("{identity_fail} violations")),
        outcome("multistart vs random probes", beaten == 0, format!("{n} instances, {beaten} closer feasible probes")),
    ]
}

fn identity_checks(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let n = if opts.fast { 100 } else { 1000 };
    let tol = 1e-10 * opts.tolerance_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let sys = ControlAffineSystem::new(
            Dynamics::Linear {
                drift_matrix: DMatrix::from_element(1, 1, rng.random_range(0.5..1.5)),
                input_matrix: DMatrix::from_element(1, 1, rng.random_range(0.001..0.1)),
            },
            DMatrix::from_element(1, 1, rng.random_range(1e-4..0.1)),
        )?;
        let bar = QuadraticBarrier::affine(DVector::from_element(1, rng.random_range(0.1..2.0)), rng.random_range(-1.0..1.0))
            .with_scale(rng.random_range(1.0..50.0))?;
        let x = DVector::from_element(1, rng.random_range(-2.0..2.0));
        let u = DVector::from_element(1, rng.random_range(-5.0..5.0));
        let beta: f64 = rng.random_range(0.0..1e-2);
        let a: f64 = affine_condition_residual(beta, &sys, &bar, &x, &u)?;
        let e = exp_quadratic_condition_residual(beta, &sys, &bar, &x, &u)?;
        worst = worst.max((a - e).abs() / a.abs().max(1.0));
    }
    let mut worst_bound: f64 = 0.0;
    let bar = QuadraticBarrier::new(
        DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0])),
        DVector::zeros(2),
        1.0,
    )?
    .with_upper_bound(1.0)?
    .with_scale(10.0)?;
    for _ in 0..n {
        let h: f64 = rng.random_range(0.0..1.0);
        let beta = rng.random_range(0.0..1e-3);
        let k = rng.random_range(0..400usize);
        let poly = ConditionFamily::PolynomialSquared { beta };
        let g = bound_general(phi(&poly, &bar, h, 0, k)?, phi_floor(&poly, &bar, k)?)?;
        let d = bound_poly(h, 1.0, beta, k)?;
        worst_bound = worst_bound.max((g - d).abs() / d.abs().max(f64::MIN_POSITIVE));
        let exp = ConditionFamily::ExpQuadratic { beta };
        let g = bound_general(phi(&exp, &bar, h, 0, k)?, phi_floor(&exp, &bar, k)?)?;
        let d = bound_exp_quad(10.0 * h, beta, k)?;
        worst_bound = worst_bound.max((g - d).abs() / d.abs());
    }
    Ok(vec![
        outcome("affine residual = exponential residual at A = 0", worst <= tol, format!("worst relative gap {worst:e}")),
        outcome(
            "general bound reproduces closed forms",
            worst_bound <= 1e-12 * opts.tolerance_scale,
            format!("worst relative gap {worst_bound:e}"),
        ),
    ])
}

fn audit_checks(opts: &VerifyOptions) -> Result<CheckOutcome> {
    let trials = if opts.fast { 4 } else { 20 };
    let mut steps = 0;
    let mut bad = 0;
    for id in [PresetId::Affine1d, PresetId::PendulumLinear, PresetId::PendulumExpquad, PresetId::IntegratorHyperbola, PresetId::IntegratorMulti] {
        let s = preset(id)?.scenario;
        let run = run_batch(&s, &SimOptions::default(), trials, opts.seed)?;
        for rec in run.records.iter().filter(|r| !r.tainted) {
            for e in audit_supermartingale(rec, &s)? {
                steps += 1;
                if !e.ok {
                    bad += 1;
                }
            }
        }
        bad += run.aborted.len();
    }
    Ok(outcome("supermartingale audit on preset runs", bad == 0, format!("{steps} steps audited, {bad} failures")))
}

/// Runs every check; each outcome is independent.
pub fn run_verification(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![moment_checks(opts)?];
    out.extend(solver_checks(opts));
    out.extend(identity_checks(opts)?);
    out.push(audit_checks(opts)?);
    Ok(out)
}

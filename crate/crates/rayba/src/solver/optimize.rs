//! The nonlinear least-squares iteration: Gauss-Newton, Levenberg-Marquardt,
//! and Powell dogleg steps over the Schur-reduced normal equations.

use super::diagnostics::{condition_diagnostics, HffDiagnostics};
use super::model::NlsModel;
use super::normal::{build_normal_equations, SchurSystem, StepVectors};
use crate::problem::ProblemError;
use std::time::Instant;
use thiserror::Error;

/// Step strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gn,
    Lm,
    Dl,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gn" => Ok(Method::Gn),
            "lm" => Ok(Method::Lm),
            "dl" => Ok(Method::Dl),
            other => Err(format!("unknown method '{other}' (expected gn|lm|dl)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Gn => "gn",
            Method::Lm => "lm",
            Method::Dl => "dl",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: Method,
    pub max_iterations: usize,
    /// LM damping; `None` means `1e-4 * mean(diag H)` from the first system.
    pub initial_lambda: Option<f64>,
    /// Dogleg trust-region radius.
    pub initial_radius: f64,
    /// Converged when the relative cost decrease falls below this AND the
    /// step norm falls below `step_tol`.
    pub rel_cost_tol: f64,
    pub step_tol: f64,
    /// Converged when the gradient infinity norm falls below this.
    pub grad_tol: f64,
}

impl SolverConfig {
    pub fn new(method: Method) -> Self {
        SolverConfig {
            method,
            max_iterations: 200,
            initial_lambda: None,
            initial_radius: 1.0,
            rel_cost_tol: 1e-10,
            step_tol: 1e-8,
            grad_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    /// Relative cost decrease and step norm both under tolerance.
    Converged,
    /// Gradient infinity norm under tolerance.
    GradientSmall,
    MaxIterations,
    /// Gauss-Newton only: the reduced system factorization failed.
    GaussNewtonSingular,
    /// LM/DL could not find a decreasing step at any damping/radius.
    Stalled,
}

impl TerminationReason {
    pub fn name(&self) -> &'static str {
        match self {
            TerminationReason::Converged => "converged",
            TerminationReason::GradientSmall => "gradient_small",
            TerminationReason::MaxIterations => "max_iterations",
            TerminationReason::GaussNewtonSingular => "gauss_newton_singular",
            TerminationReason::Stalled => "stalled",
        }
    }

    /// Whether this is one of the two stop-criteria outcomes.
    pub fn is_converged(&self) -> bool {
        matches!(
            self,
            TerminationReason::Converged | TerminationReason::GradientSmall
        )
    }
}

/// Per-iteration diagnostics. Row `k` describes the state after `k` accepted
/// steps (row 0 is the initial state); `step_norm` is the step that led to
/// the row's state, `linear_solves` counts reduced-system factorizations so
/// far.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub chi2_ray: f64,
    pub chi2_uv: f64,
    pub step_norm: f64,
    pub damping_or_radius: f64,
    pub cond_hff: f64,
    pub min_eig_hff: f64,
    pub linear_solves: usize,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct OptimizeOutcome {
    pub reason: TerminationReason,
    pub records: Vec<IterationRecord>,
    pub iterations: usize,
    pub linear_solves: usize,
    pub final_cost: f64,
    /// Total feature-block regularizations across all solves.
    pub regularized_blocks: usize,
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

fn mean_diagonal(sys: &SchurSystem) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&(i, j), b) in &sys.h_tt {
        if i == j {
            sum += b.diagonal().sum();
            count += b.nrows();
        }
    }
    for b in &sys.h_ff {
        sum += b.diagonal().sum();
        count += b.nrows();
    }
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

/// Quadratic-model decrease for a step: `-g^T dx - 0.5 dx^T H dx`.
fn predicted_decrease(sys: &SchurSystem, step: &StepVectors) -> f64 {
    let neg_g = sys.neg_gradient();
    let h_step = sys.apply_hessian(step);
    neg_g.dot(step) - 0.5 * step.dot(&h_step)
}

struct DoglegPieces {
    gauss_newton: Option<StepVectors>,
    cauchy: StepVectors,
}

fn dogleg_step(pieces: &DoglegPieces, radius: f64) -> StepVectors {
    if let Some(gn) = &pieces.gauss_newton {
        if gn.norm() <= radius {
            return gn.clone();
        }
    }
    let cauchy_norm = pieces.cauchy.norm();
    if cauchy_norm >= radius || pieces.gauss_newton.is_none() {
        if cauchy_norm == 0.0 {
            return pieces.cauchy.clone();
        }
        return pieces.cauchy.scale((radius / cauchy_norm).min(1.0));
    }
    // Blend along the leg from the Cauchy point toward the GN point, stopping
    // on the trust-region boundary.
    let gn = pieces.gauss_newton.as_ref().unwrap();
    let d = gn.add(&pieces.cauchy, -1.0);
    let a = d.dot(&d);
    let b = pieces.cauchy.dot(&d);
    let c = cauchy_norm * cauchy_norm - radius * radius;
    debug_assert!(c <= 0.0);
    let disc = (b * b - a * c).max(0.0).sqrt();
    let beta = if b <= 0.0 { (-b + disc) / a } else { -c / (b + disc) };
    pieces.cauchy.add(&d, beta.clamp(0.0, 1.0))
}

/// Runs the configured method on a model until a stop criterion fires.
///
/// Accepted LM/DL steps never increase the cost; Gauss-Newton applies its
/// step unconditionally. The record list always contains the initial state
/// (row 0) and the final state (last row).
pub fn optimize_model<M: NlsModel>(
    model: &mut M,
    config: &SolverConfig,
) -> Result<OptimizeOutcome, OptimizeError> {
    let t0 = Instant::now();
    let mut records = Vec::new();
    let mut linear_solves = 0usize;
    let mut regularized_total = 0usize;
    let mut lambda = config.initial_lambda;
    let mut radius = config.initial_radius;
    let mut prev_step_norm = 0.0;
    let mut reason = TerminationReason::MaxIterations;
    let mut accepted_steps = 0usize;
    let mut pending: Option<TerminationReason> = None;

    for iter in 0..=config.max_iterations {
        let sys = build_normal_equations(model)?;
        let diag: HffDiagnostics = condition_diagnostics(&sys);
        if config.method == Method::Lm && lambda.is_none() {
            lambda = Some(1e-4 * mean_diagonal(&sys));
        }
        let cost = model.cost()?;
        let (chi2_ray, chi2_uv) = model.chi2_pair();
        records.push(IterationRecord {
            iteration: iter,
            chi2_ray,
            chi2_uv,
            step_norm: prev_step_norm,
            damping_or_radius: match config.method {
                Method::Lm => lambda.unwrap_or(0.0),
                Method::Dl => radius,
                Method::Gn => 0.0,
            },
            cond_hff: diag.cond,
            min_eig_hff: diag.min_eig,
            linear_solves,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(r) = pending.take() {
            reason = r;
            break;
        }
        if iter == config.max_iterations {
            reason = TerminationReason::MaxIterations;
            break;
        }
        if sys.gradient_inf_norm() < config.grad_tol {
            reason = TerminationReason::GradientSmall;
            break;
        }

        let mut accepted_step_norm = None;
        match config.method {
            Method::Gn => match sys.solve(0.0) {
                Err(_) => {
                    reason = TerminationReason::GaussNewtonSingular;
                    break;
                }
                Ok(step) => {
                    linear_solves += 1;
                    regularized_total += step.regularized_blocks;
                    model.apply_step(&step.poses, &step.features);
                    let new_cost = model.cost()?;
                    let n = step.norm();
                    accepted_step_norm = Some(n);
                    let rel = (cost - new_cost).abs() / cost.max(f64::MIN_POSITIVE);
                    if rel < config.rel_cost_tol && n < config.step_tol {
                        pending = Some(TerminationReason::Converged);
                    }
                }
            },
            Method::Lm => {
                let snapshot = model.state();
                let lam = lambda.as_mut().unwrap();
                for _attempt in 0..64 {
                    let step = match sys.solve(*lam) {
                        Ok(s) => {
                            linear_solves += 1;
                            s
                        }
                        Err(_) => {
                            *lam *= 10.0;
                            continue;
                        }
                    };
                    regularized_total += step.regularized_blocks;
                    model.apply_step(&step.poses, &step.features);
                    let new_cost = model.cost()?;
                    let pred = predicted_decrease(&sys, &step).max(f64::MIN_POSITIVE);
                    let rho = (cost - new_cost) / pred;
                    if new_cost.is_finite() && new_cost <= cost && rho > 0.0 {
                        let factor = (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                        *lam *= factor;
                        let n = step.norm();
                        accepted_step_norm = Some(n);
                        let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                        if rel < config.rel_cost_tol && n < config.step_tol {
                            pending = Some(TerminationReason::Converged);
                        }
                        break;
                    }
                    model.set_state(&snapshot);
                    *lam *= 10.0;
                    if *lam > 1e32 {
                        break;
                    }
                }
                if accepted_step_norm.is_none() {
                    reason = TerminationReason::Stalled;
                    break;
                }
            }
            Method::Dl => {
                let gauss_newton = match sys.solve(0.0) {
                    Ok(s) => {
                        linear_solves += 1;
                        regularized_total += s.regularized_blocks;
                        Some(s)
                    }
                    Err(_) => None,
                };
                let neg_g = sys.neg_gradient();
                let h_g = sys.apply_hessian(&neg_g);
                let gtg = neg_g.dot(&neg_g);
                let gthg = neg_g.dot(&h_g);
                let alpha = if gthg > 0.0 { gtg / gthg } else { 1.0 };
                let pieces = DoglegPieces {
                    gauss_newton,
                    cauchy: neg_g.scale(alpha),
                };
                let snapshot = model.state();
                for _attempt in 0..64 {
                    let step = dogleg_step(&pieces, radius);
                    let n = step.norm();
                    if n < 1e-300 {
                        break;
                    }
                    model.apply_step(&step.poses, &step.features);
                    let new_cost = model.cost()?;
                    let pred = predicted_decrease(&sys, &step).max(f64::MIN_POSITIVE);
                    let rho = (cost - new_cost) / pred;
                    if new_cost.is_finite() && new_cost <= cost && rho > 0.0 {
                        if rho > 0.75 {
                            radius = (radius * 2.0).max(3.0 * n);
                        } else if rho < 0.25 {
                            radius *= 0.5;
                        }
                        accepted_step_norm = Some(n);
                        let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                        if rel < config.rel_cost_tol && n < config.step_tol {
                            pending = Some(TerminationReason::Converged);
                        }
                        break;
                    }
                    model.set_state(&snapshot);
                    radius *= 0.5;
                    if radius < 1e-14 {
                        break;
                    }
                }
                if accepted_step_norm.is_none() {
                    reason = TerminationReason::Stalled;
                    break;
                }
            }
        }
        if let Some(n) = accepted_step_norm {
            prev_step_norm = n;
            accepted_steps += 1;
        }
    }

    let final_cost = model.cost()?;
    Ok(OptimizeOutcome {
        reason,
        records,
        iterations: accepted_steps,
        linear_solves,
        final_cost,
        regularized_blocks: regularized_total,
    })
}

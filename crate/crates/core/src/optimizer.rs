//! BFGS with backtracking Armijo line search.
//!
//! The optimizer only sees an unconstrained vector; positivity of variance
//! components is handled by the parameterization in [`crate::model`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterPoint;

const ARMIJO_C1: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

/// Smooth objective: loss value and gradient at an unconstrained point.
///
/// Implementations must be reentrant; experiments evaluate many objectives
/// concurrently.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

/// Adapter turning a closure into an [`Objective`].
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (self.f)(x)
    }
}

/// Stops a run whose first `coords` coordinates leave the box `[-bound, bound]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceGuard {
    pub coords: usize,
    pub bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    /// Sup-norm gradient tolerance.
    pub gtol: f64,
    /// Relative sup-norm step tolerance.
    pub step_tol: f64,
    pub max_iter: usize,
    pub divergence: Option<DivergenceGuard>,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            gtol: 1e-6,
            step_tol: 1e-10,
            max_iter: 500,
            divergence: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradTol,
    StepTol,
    MaxIter,
    LineSearchFail,
    /// Iterates escaped the [`DivergenceGuard`] box.
    Diverged,
}

impl Termination {
    pub fn is_converged(self) -> bool {
        matches!(self, Termination::GradTol | Termination::StepTol)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub loss: f64,
    pub grad: DVector<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl Minimum {
    pub fn converged(&self) -> bool {
        self.termination.is_converged()
    }
}

/// Converged estimate plus optimizer telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub point: ParameterPoint,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
}

impl FitResult {
    pub fn new(point: ParameterPoint, min: &Minimum) -> Self {
        Self {
            point,
            loss: min.loss,
            grad_norm: min.grad_norm,
            iterations: min.iterations,
            converged: min.termination.is_converged(),
            termination: min.termination,
        }
    }
}

/// Options shared by the model fitting entry points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub minimize: MinimizeOptions,
    /// 1 for a single start; 3 adds `init ± start_perturbation` on the
    /// variance coordinates.
    pub n_starts: usize,
    pub start_perturbation: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            minimize: MinimizeOptions::default(),
            n_starts: 1,
            start_perturbation: 1.0,
        }
    }
}

/// Starting points for a fit: `init`, then `init ± delta` on coordinates
/// `first_perturbed..` when `n_starts >= 3`.
pub fn start_points(
    init: &DVector<f64>,
    first_perturbed: usize,
    opts: &FitOptions,
) -> Vec<DVector<f64>> {
    let mut starts = vec![init.clone()];
    if opts.n_starts >= 3 && first_perturbed < init.len() {
        for sign in [1.0, -1.0] {
            let mut s = init.clone();
            for v in s.iter_mut().skip(first_perturbed) {
                *v += sign * opts.start_perturbation;
            }
            starts.push(s);
        }
    }
    starts
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn finite_eval(obj: &dyn Objective, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
    match obj.eval(x) {
        Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Some((f, g)),
        _ => None,
    }
}

enum LineSearch {
    Accepted(f64, DVector<f64>, DVector<f64>, f64),
    Failed { any_finite: bool },
}

fn backtrack(
    obj: &dyn Objective,
    x: &DVector<f64>,
    f: f64,
    g: &DVector<f64>,
    dir: &DVector<f64>,
    t0: f64,
) -> LineSearch {
    let slope = g.dot(dir);
    let mut t = t0;
    let mut any_finite = false;
    for _ in 0..MAX_BACKTRACKS {
        let trial = x + dir * t;
        if let Some((ft, gt)) = finite_eval(obj, &trial) {
            any_finite = true;
            if ft <= f + ARMIJO_C1 * t * slope {
                return LineSearch::Accepted(ft, gt, trial, t);
            }
        }
        t *= SHRINK;
    }
    LineSearch::Failed { any_finite }
}

/// Minimize `objective` from `init`.
///
/// Accepted iterates never increase the loss, so the returned loss is at
/// most the loss at `init`. Runs are fully deterministic.
pub fn minimize(
    objective: &dyn Objective,
    init: &DVector<f64>,
    opts: &MinimizeOptions,
) -> Result<Minimum> {
    let n = objective.dim();
    if init.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "objective has dimension {n}, initial point {}",
            init.len()
        )));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial point is not finite".into()));
    }
    let (mut f, mut g) = objective.eval(init)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective(format!(
            "loss {f} at the initial point"
        )));
    }
    let mut x = init.clone();
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;

    let finish = |x: DVector<f64>, f: f64, g: DVector<f64>, iterations, termination| Minimum {
        grad_norm: sup_norm(&g),
        x,
        loss: f,
        grad: g,
        iterations,
        termination,
    };

    loop {
        if sup_norm(&g) <= opts.gtol {
            return Ok(finish(x, f, g, iterations, Termination::GradTol));
        }
        if iterations >= opts.max_iter {
            return Ok(finish(x, f, g, iterations, Termination::MaxIter));
        }

        let mut dir = -(&h_inv * &g);
        if g.dot(&dir) >= 0.0 {
            h_inv.fill_with_identity();
            fresh = true;
            dir = -g.clone();
        }
        // keep the very first trial step bounded in sup-norm
        let t0 = if fresh { (1.0 / sup_norm(&dir)).min(1.0) } else { 1.0 };

        let accepted = match backtrack(objective, &x, f, &g, &dir, t0) {
            LineSearch::Accepted(ft, gt, xt, t) => Some((ft, gt, xt, t)),
            LineSearch::Failed { any_finite } if !fresh => {
                // retry once along steepest descent
                h_inv.fill_with_identity();
                fresh = true;
                let dir_sd = -g.clone();
                let t0 = (1.0 / sup_norm(&dir_sd)).min(1.0);
                match backtrack(objective, &x, f, &g, &dir_sd, t0) {
                    LineSearch::Accepted(ft, gt, xt, t) => {
                        dir = dir_sd;
                        Some((ft, gt, xt, t))
                    }
                    LineSearch::Failed { any_finite: again } => {
                        if !(any_finite || again) {
                            return Err(Error::NonFiniteObjective(
                                "every line-search trial was non-finite".into(),
                            ));
                        }
                        None
                    }
                }
            }
            LineSearch::Failed { any_finite } => {
                if !any_finite {
                    return Err(Error::NonFiniteObjective(
                        "every line-search trial was non-finite".into(),
                    ));
                }
                None
            }
        };
        let Some((f_new, g_new, x_new, t)) = accepted else {
            return Ok(finish(x, f, g, iterations, Termination::LineSearchFail));
        };
        iterations += 1;

        let s = &dir * t;
        let y = &g_new - &g;
        let step_small = sup_norm(&s) <= opts.step_tol * (1.0 + sup_norm(&x));
        x = x_new;
        f = f_new;
        g = g_new;

        if let Some(guard) = opts.divergence {
            if x.iter().take(guard.coords).any(|v| v.abs() > guard.bound) {
                return Ok(finish(x, f, g, iterations, Termination::Diverged));
            }
        }
        if step_small {
            let term = if sup_norm(&g) <= opts.gtol {
                Termination::GradTol
            } else {
                Termination::StepTol
            };
            return Ok(finish(x, f, g, iterations, term));
        }

        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h_inv.fill_with_identity();
                h_inv *= sy / y.norm_squared();
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H⁺ = H - ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h_inv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h_inv += &s * s.transpose() * (rho * rho * yhy + rho);
        }
    }
}

/// Run [`minimize`] from each start and keep the lowest loss (first wins ties).
pub fn minimize_multistart(
    objective: &dyn Objective,
    starts: &[DVector<f64>],
    opts: &MinimizeOptions,
) -> Result<Minimum> {
    let mut best: Option<Minimum> = None;
    let mut last_err = None;
    for start in starts {
        match minimize(objective, start, opts) {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.loss < b.loss) {
                    best = Some(m);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::InvalidInput("no starting points".into())))
}

/// Central-difference gradient with per-coordinate step `h * max(1, |x_j|)`.
pub fn finite_diff_gradient<F>(loss: F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut grad = DVector::zeros(x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let step = h * x[j].abs().max(1.0);
        probe[j] = x[j] + step;
        let up = loss(&probe)?;
        probe[j] = x[j] - step;
        let dn = loss(&probe)?;
        probe[j] = x[j];
        let d = (up - dn) / (2.0 * step);
        if !d.is_finite() {
            return Err(Error::NonFiniteObjective(format!(
                "finite difference in coordinate {j} is {d}"
            )));
        }
        grad[j] = d;
    }
    Ok(grad)
}

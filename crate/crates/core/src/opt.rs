//! Bound-constrained limited-memory quasi-Newton minimizer with
//! finite-difference gradients.
//!
//! Search directions come from the standard two-loop L-BFGS recursion; steps
//! are taken along the projection of the quasi-Newton path onto the box and
//! accepted under an Armijo condition. Convergence is measured by the
//! infinity norm of the projected gradient `x - P(x - g)`.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("objective is not finite at the start point")]
    NonFiniteStart,
    #[error("non-finite objective while probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },
}

/// A box-constrained minimization problem.
///
/// When `gradient` is absent, central finite differences with steps clipped
/// to the box are used instead.
pub struct BoundedProblem<'a> {
    pub objective: &'a dyn Fn(&[f64]) -> f64,
    pub gradient: Option<&'a dyn Fn(&[f64]) -> Vec<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x0: Vec<f64>,
}

impl BoundedProblem<'_> {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    fn validate(&self) -> Result<(), OptError> {
        let d = self.x0.len();
        if d == 0 {
            return Err(OptError::InvalidProblem("empty start point".into()));
        }
        if self.lower.len() != d || self.upper.len() != d {
            return Err(OptError::InvalidProblem(format!(
                "bounds have lengths {} and {}, expected {d}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for i in 0..d {
            if !(self.lower[i] < self.upper[i]) {
                return Err(OptError::InvalidProblem(format!(
                    "lower[{i}] = {} must be below upper[{i}] = {}",
                    self.lower[i], self.upper[i]
                )));
            }
            if self.x0[i] < self.lower[i] || self.x0[i] > self.upper[i] {
                return Err(OptError::InvalidProblem(format!(
                    "x0[{i}] = {} is outside [{}, {}]",
                    self.x0[i], self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptOptions {
    /// Infinity-norm tolerance on the projected gradient.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of curvature pairs kept for the two-loop recursion.
    pub history_size: usize,
    /// Relative finite-difference step.
    pub rel_step: f64,
}

impl Default for OptOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            history_size: 6,
            rel_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Projected-gradient infinity norm at the returned point.
    pub grad_norm: f64,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: usize = 25;

/// Central-difference gradient with per-coordinate steps clipped to the box;
/// a one-sided difference is used at an active bound.
pub fn finite_diff_gradient(
    objective: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    rel_step: f64,
    lower: &[f64],
    upper: &[f64],
) -> Result<Vec<f64>, OptError> {
    let d = x.len();
    let mut grad = vec![0.0; d];
    let mut probe = x.to_vec();
    for i in 0..d {
        let h = rel_step * x[i].abs().max(1.0);
        let up = (x[i] + h).min(upper[i]);
        let down = (x[i] - h).max(lower[i]);
        if up <= down {
            return Err(OptError::InvalidProblem(format!(
                "bounds too tight for a finite-difference step at coordinate {i}"
            )));
        }
        probe[i] = up;
        let f_up = objective(&probe);
        probe[i] = down;
        let f_down = objective(&probe);
        probe[i] = x[i];
        if !f_up.is_finite() || !f_down.is_finite() {
            return Err(OptError::NonFiniteProbe { coordinate: i });
        }
        grad[i] = (f_up - f_down) / (up - down);
    }
    Ok(grad)
}

fn clamp_to_box(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut norm = 0.0_f64;
    for i in 0..x.len() {
        let step = (x[i] - g[i]).clamp(lower[i], upper[i]) - x[i];
        norm = norm.max(step.abs());
    }
    norm
}

fn two_loop_direction(history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, g: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha - beta) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes a box-constrained problem; the returned objective value never
/// exceeds the value at the start point.
pub fn minimize_bounded(problem: &BoundedProblem, opts: &OptOptions) -> Result<OptResult, OptError> {
    problem.validate()?;
    let (lower, upper) = (&problem.lower, &problem.upper);
    let obj = problem.objective;

    let grad_at = |x: &[f64]| -> Result<Vec<f64>, OptError> {
        match problem.gradient {
            Some(g) => Ok(g(x)),
            None => finite_diff_gradient(obj, x, opts.rel_step, lower, upper),
        }
    };

    let mut x = problem.x0.clone();
    clamp_to_box(&mut x, lower, upper);
    let mut f = obj(&x);
    if !f.is_finite() {
        return Err(OptError::NonFiniteStart);
    }
    let mut g = grad_at(&x)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..opts.max_iter {
        let pg = projected_gradient_norm(&x, &g, lower, upper);
        if pg < opts.tol {
            converged = true;
            break;
        }
        iterations = iter + 1;

        let mut accepted = None;
        'directions: for attempt in 0..2 {
            let mut dir = if attempt == 0 && !history.is_empty() {
                two_loop_direction(&history, &g)
            } else {
                g.iter().map(|gi| -gi).collect()
            };
            if dot(&dir, &g) >= 0.0 {
                // not a descent direction; fall back to steepest descent
                dir = g.iter().map(|gi| -gi).collect();
            }
            // scale the first raw gradient step to unit infinity norm
            let mut t = if history.is_empty() {
                let dmax = dir.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if dmax > 1.0 {
                    1.0 / dmax
                } else {
                    1.0
                }
            } else {
                1.0
            };
            for _ in 0..MAX_HALVINGS {
                let mut cand: Vec<f64> = x
                    .iter()
                    .zip(&dir)
                    .map(|(xi, di)| xi + t * di)
                    .collect();
                clamp_to_box(&mut cand, lower, upper);
                let moved = cand.iter().zip(&x).any(|(a, b)| a != b);
                if !moved {
                    break;
                }
                let f_cand = obj(&cand);
                if f_cand.is_finite() {
                    let decrease: f64 = cand
                        .iter()
                        .zip(&x)
                        .zip(&g)
                        .map(|((c, xi), gi)| gi * (c - xi))
                        .sum();
                    if f_cand <= f + ARMIJO_C1 * decrease {
                        accepted = Some((cand, f_cand));
                        break 'directions;
                    }
                }
                t *= 0.5;
            }
        }

        let Some((x_new, f_new)) = accepted else {
            // no feasible decrease found; stop at the best point so far
            break;
        };

        let g_new = grad_at(&x_new)?;
        if g_new.iter().any(|v| !v.is_finite()) {
            x = x_new;
            f = f_new;
            break;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > opts.history_size.max(1) {
                history.pop_front();
            }
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }

    let grad_norm = projected_gradient_norm(&x, &g, lower, upper);
    if grad_norm < opts.tol {
        converged = true;
    }
    Ok(OptResult {
        x,
        f,
        iterations,
        converged,
        grad_norm,
    })
}

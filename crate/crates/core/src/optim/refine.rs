//! Derivative-free local polish: BFGS on finite-difference gradients with
//! projection onto the box.
//!
//! The search runs in box-normalized coordinates (every dimension mapped to
//! `[0, 1]`) so that step lengths and gradient components stay comparable
//! when parameters differ by many orders of magnitude; each evaluation maps
//! back to the original box. The gradient uses central differences with
//! steps shrunk at the faces (falling back to one-sided when a coordinate
//! sits on a bound), the inverse Hessian approximation is rebuilt from the
//! identity whenever the curvature condition fails, and the line search
//! backtracks on an Armijo test against the projected step. Good for
//! polishing a near-optimal point; not a global method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{sanitize, OptimResult, SearchBox, TerminationReason};
use crate::error::{Error, Result};

/// Local refinement controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineConfig {
    pub max_iterations: usize,
    pub max_evaluations: usize,
    /// Relative finite-difference step; the absolute step for coordinate `i`
    /// is `grad_step_rel * (1 + |x_i|)`, capped by the distance to the box.
    pub grad_step_rel: f64,
    /// Stop when the projected gradient max-norm falls below this.
    pub tol_grad: f64,
    /// Stop when the accepted step max-norm falls below this.
    pub tol_step: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iterations: 80,
            max_evaluations: 10_000,
            grad_step_rel: 1e-6,
            tol_grad: 1e-9,
            tol_step: 1e-11,
        }
    }
}

impl RefineConfig {
    fn validate(&self) -> Result<()> {
        if !(self.grad_step_rel > 0.0 && self.grad_step_rel < 1e-1) {
            return Err(Error::Config(format!(
                "finite-difference step must lie in (0, 0.1), got {}",
                self.grad_step_rel
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("need at least one refinement iteration".into()));
        }
        Ok(())
    }
}

struct Counter<'a, F> {
    objective: &'a F,
    used: usize,
    budget: usize,
}

impl<'a, F: Fn(&[f64]) -> f64> Counter<'a, F> {
    fn eval(&mut self, x: &[f64]) -> Option<f64> {
        if self.used >= self.budget {
            return None;
        }
        self.used += 1;
        Some(sanitize((self.objective)(x)))
    }
}

/// Finite-difference gradient honoring the box: per coordinate the forward
/// and backward steps shrink to stay feasible, and the difference quotient
/// uses whatever width remains. Returns None when the budget runs out.
fn gradient<F: Fn(&[f64]) -> f64>(
    counter: &mut Counter<'_, F>,
    bounds: &SearchBox,
    x: &[f64],
    step_rel: f64,
) -> Option<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for i in 0..x.len() {
        let h = step_rel * (1.0 + x[i].abs());
        let hp = h.min(bounds.upper()[i] - x[i]);
        let hm = h.min(x[i] - bounds.lower()[i]);
        if hp + hm <= 0.0 {
            g[i] = 0.0;
            continue;
        }
        work[i] = x[i] + hp;
        let fp = counter.eval(&work)?;
        work[i] = x[i] - hm;
        let fm = counter.eval(&work)?;
        work[i] = x[i];
        g[i] = (fp - fm) / (hp + hm);
    }
    Some(g)
}

/// Zeroes gradient components that push against an active bound, so the
/// convergence test measures only feasible descent directions.
fn project_gradient(bounds: &SearchBox, x: &[f64], g: &[f64]) -> Vec<f64> {
    let face_tol = 1e-12;
    g.iter()
        .enumerate()
        .map(|(i, &gi)| {
            let at_lower = x[i] - bounds.lower()[i] <= face_tol * (1.0 + bounds.lower()[i].abs());
            let at_upper = bounds.upper()[i] - x[i] <= face_tol * (1.0 + bounds.upper()[i].abs());
            if (at_lower && gi > 0.0) || (at_upper && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, &x| m.max(x.abs()))
}

/// Polishes `start` inside `bounds`. The start is clamped into the box
/// first; the result never leaves it. Without an improving step the
/// (clamped) start itself comes back, bit for bit.
pub fn local_refine<F>(
    objective: &F,
    bounds: &SearchBox,
    start: &[f64],
    config: &RefineConfig,
) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    if start.len() != bounds.dim() {
        return Err(Error::Config(format!(
            "start point has {} coordinates, search box has {}",
            start.len(),
            bounds.dim()
        )));
    }
    let dim = bounds.dim();

    let x_start = bounds.clamp(start);
    let unit = SearchBox::new(vec![0.0; dim], vec![1.0; dim]).expect("unit box is valid");
    let denormalize = |u: &[f64]| -> Vec<f64> {
        let x: Vec<f64> = u
            .iter()
            .enumerate()
            .map(|(i, &ui)| bounds.lower()[i] + ui * bounds.width(i))
            .collect();
        bounds.clamp(&x)
    };
    let normalized_objective = |u: &[f64]| objective(&denormalize(u));
    let mut counter = Counter {
        objective: &normalized_objective,
        used: 0,
        budget: config.max_evaluations,
    };

    let mut u: Vec<f64> = x_start
        .iter()
        .enumerate()
        .map(|(i, &xi)| (xi - bounds.lower()[i]) / bounds.width(i))
        .collect();
    let mut moved = false;
    let mut fx = counter
        .eval(&u)
        .ok_or_else(|| Error::OptimFailure("refinement budget too small for one evaluation".into()))?;
    let mut trace = vec![fx];
    let mut termination = TerminationReason::GenerationsExhausted;

    let finish = |u: &[f64], moved: bool| -> Vec<f64> {
        if moved {
            denormalize(u)
        } else {
            x_start.clone()
        }
    };

    let mut h_inv = DMatrix::<f64>::identity(dim, dim);
    let mut grad = match gradient(&mut counter, &unit, &u, config.grad_step_rel) {
        Some(g) => g,
        None => {
            return Ok(OptimResult {
                best_point: finish(&u, moved),
                best_value: fx,
                evaluations: counter.used,
                termination: TerminationReason::NoImprovement,
                trace,
            })
        }
    };

    'outer: for _ in 0..config.max_iterations {
        let pg = project_gradient(&unit, &u, &grad);
        if max_norm(&pg) <= config.tol_grad {
            termination = TerminationReason::Converged;
            break;
        }

        let g_vec = DVector::from_column_slice(&pg);
        let mut direction = -(&h_inv * &g_vec);
        // A quasi-Newton direction that fails to descend means the model is
        // stale; fall back to steepest descent for this iteration.
        if direction.dot(&g_vec) >= 0.0 {
            h_inv = DMatrix::identity(dim, dim);
            direction = -g_vec.clone();
        }
        // Steps longer than the box diagonal carry no information; shrink so
        // the first candidate is at most one box-length away.
        let scale = max_norm(direction.as_slice());
        if scale > 1.0 {
            direction /= scale;
        }

        // Backtracking Armijo search on the projected candidate.
        let mut alpha = 1.0;
        let c1 = 1e-4;
        let mut accepted: Option<(Vec<f64>, f64)> = None;
        for _ in 0..30 {
            let candidate: Vec<f64> = u
                .iter()
                .enumerate()
                .map(|(i, &ui)| ui + alpha * direction[i])
                .collect();
            let candidate = unit.clamp(&candidate);
            let actual_step: f64 = candidate
                .iter()
                .zip(&u)
                .enumerate()
                .map(|(i, (&c, &ui))| pg[i] * (c - ui))
                .sum();
            let Some(fc) = counter.eval(&candidate) else {
                termination = TerminationReason::BudgetExhausted;
                break 'outer;
            };
            if fc <= fx + c1 * actual_step && fc < fx {
                accepted = Some((candidate, fc));
                break;
            }
            alpha *= 0.5;
        }

        let Some((u_new, f_new)) = accepted else {
            // No acceptable step along this direction; treat as converged.
            termination = TerminationReason::Converged;
            break;
        };

        let step: Vec<f64> = u_new.iter().zip(&u).map(|(&a, &b)| a - b).collect();
        let Some(grad_new) = gradient(&mut counter, &unit, &u_new, config.grad_step_rel) else {
            u = u_new;
            fx = f_new;
            moved = true;
            trace.push(fx);
            termination = TerminationReason::BudgetExhausted;
            break;
        };

        // BFGS update of the inverse Hessian; skipped (and the model reset)
        // unless the curvature condition s'y > 0 holds robustly.
        let s = DVector::from_column_slice(&step);
        let y = DVector::from_iterator(dim, grad_new.iter().zip(&grad).map(|(&a, &b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let identity = DMatrix::<f64>::identity(dim, dim);
            let left = &identity - rho * &s * y.transpose();
            let right = &identity - rho * &y * s.transpose();
            h_inv = &left * h_inv * right + rho * &s * s.transpose();
        } else {
            h_inv = DMatrix::identity(dim, dim);
        }

        let step_size = max_norm(&step);
        u = u_new;
        fx = f_new;
        moved = true;
        grad = grad_new;
        trace.push(fx);
        if step_size <= config.tol_step {
            termination = TerminationReason::Converged;
            break;
        }
    }

    // Accepted steps strictly improve, so an unmoved run never beat its
    // start; report that, whatever stopped the loop.
    if !moved {
        termination = TerminationReason::NoImprovement;
    }

    Ok(OptimResult {
        best_point: finish(&u, moved),
        best_value: fx,
        evaluations: counter.used,
        termination,
        trace,
    })
}

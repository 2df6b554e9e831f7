//! Accelerated proximal gradient for `½⟨x, Hx⟩ − ⟨c, x⟩ + k + penalty(x)`
//! with `H` symmetric PSD and a closed-form prox for the penalty.
//!
//! Every smooth term in the reconstruction is such a quadratic, so the
//! iteration tracks `Hx` alongside `x` and extrapolates it linearly. That
//! costs exactly one application of `H` per step.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::grid::{diff_norm_sq, dot, norm_sq};

/// Number of consecutive objective increases treated as divergence.
pub const DIVERGENCE_STREAK: usize = 10;

#[derive(Clone, Copy, Debug)]
pub(crate) struct FistaSettings {
    pub step: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct FistaOutcome {
    pub x: Array2<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FistaOutcome {
    /// The minimizer, noting in the log when the iteration budget ran out.
    pub fn into_x(self, solver: &str) -> Array2<f64> {
        if !self.converged {
            log::debug!(
                "{solver}: stopped after {} iterations at objective {:e}",
                self.iterations,
                self.objective
            );
        }
        self.x
    }
}

pub(crate) struct Quadratic<'a> {
    pub apply: &'a dyn Fn(&ArrayView2<f64>) -> Array2<f64>,
    pub linear: &'a Array2<f64>,
    pub constant: f64,
}

impl Quadratic<'_> {
    fn value(&self, x: &Array2<f64>, hx: &Array2<f64>) -> f64 {
        0.5 * dot(x, hx) - dot(self.linear, x) + self.constant
    }
}

/// Runs FISTA with function-value restarts. A step that would raise the
/// objective is rejected and replaced by a plain proximal-gradient step from
/// the current iterate. The best iterate seen is returned.
pub(crate) fn fista<P, R>(
    solver: &'static str,
    quad: &Quadratic<'_>,
    x0: Array2<f64>,
    prox: P,
    penalty: R,
    settings: FistaSettings,
) -> Result<FistaOutcome>
where
    P: Fn(&mut Array2<f64>, f64),
    R: Fn(&Array2<f64>) -> f64,
{
    let tau = settings.step;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::SolverFailure { solver, reason: format!("invalid step size {tau}") });
    }

    let mut x = x0;
    let mut hx = (quad.apply)(&x.view());
    let mut obj = quad.value(&x, &hx) + penalty(&x);
    let mut x_prev = x.clone();
    let mut hx_prev = hx.clone();
    let mut t = 1.0f64;
    let mut momentum = 0.0f64;
    let mut increases = 0usize;
    let mut best = x.clone();
    let mut best_obj = obj;

    for it in 1..=settings.max_iter {
        // y = x + β(x − x_prev), Hy tracked linearly.
        let mut u = x.clone();
        let mut hy = hx.clone();
        if momentum > 0.0 {
            Zip::from(&mut u).and(&x_prev).for_each(|a, &b| *a += momentum * (*a - b));
            Zip::from(&mut hy).and(&hx_prev).for_each(|a, &b| *a += momentum * (*a - b));
        }
        Zip::from(&mut u)
            .and(&hy)
            .and(quad.linear)
            .for_each(|y, &h, &c| *y -= tau * (h - c));
        prox(&mut u, tau);
        let hu = (quad.apply)(&u.view());
        let cand = quad.value(&u, &hu) + penalty(&u);
        if !cand.is_finite() {
            return Err(Error::SolverFailure {
                solver,
                reason: format!("objective became non-finite at iteration {it}"),
            });
        }

        let slack = 1e-12 * obj.abs().max(1.0);
        if cand > obj + slack {
            if momentum > 0.0 {
                // Restart: drop momentum and retry from x.
                t = 1.0;
                momentum = 0.0;
                x_prev.assign(&x);
                hx_prev.assign(&hx);
                continue;
            }
            increases += 1;
            if increases >= DIVERGENCE_STREAK {
                return Err(Error::SolverFailure {
                    solver,
                    reason: format!(
                        "objective increased on {DIVERGENCE_STREAK} consecutive iterations"
                    ),
                });
            }
        } else {
            increases = 0;
        }

        let change = diff_norm_sq(&u, &x).sqrt();
        let scale = norm_sq(&u).sqrt();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        momentum = (t - 1.0) / t_next;
        t = t_next;
        x_prev = std::mem::replace(&mut x, u);
        hx_prev = std::mem::replace(&mut hx, hu);
        obj = cand;
        if obj <= best_obj {
            best_obj = obj;
            best.assign(&x);
        }

        if change <= settings.rel_tol * scale || (scale == 0.0 && change == 0.0) {
            return Ok(FistaOutcome { x: best, objective: best_obj, iterations: it, converged: true });
        }
    }

    Ok(FistaOutcome {
        x: best,
        objective: best_obj,
        iterations: settings.max_iter,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_a_nonnegative_quadratic() {
        // H = diag(1, 4), c = (2, -4): unconstrained minimizer (2, -1),
        // nonnegative minimizer (2, 0).
        let diag = Array2::from_shape_vec((1, 2), vec![1.0, 4.0]).unwrap();
        let apply = |x: &ArrayView2<f64>| x * &diag;
        let c = Array2::from_shape_vec((1, 2), vec![2.0, -4.0]).unwrap();
        let quad = Quadratic { apply: &apply, linear: &c, constant: 0.0 };
        let out = fista(
            "test",
            &quad,
            Array2::zeros((1, 2)),
            |u, _| u.mapv_inplace(|v| v.max(0.0)),
            |_| 0.0,
            FistaSettings { step: 0.25, max_iter: 1000, rel_tol: 1e-12 },
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.x[[0, 0]] - 2.0).abs() < 1e-9);
        assert_eq!(out.x[[0, 1]], 0.0);
        assert!((out.objective + 2.0).abs() < 1e-9);
    }

    #[test]
    fn oversized_steps_are_reported() {
        let apply = |x: &ArrayView2<f64>| x.to_owned() * 10.0;
        let c = Array2::from_elem((1, 1), 1.0);
        let quad = Quadratic { apply: &apply, linear: &c, constant: 0.0 };
        let res = fista(
            "test",
            &quad,
            Array2::zeros((1, 1)),
            |_, _| {},
            |_| 0.0,
            FistaSettings { step: 1.0, max_iter: 1000, rel_tol: 1e-14 },
        );
        assert!(res.unwrap_err().is_solver_failure());
    }
}

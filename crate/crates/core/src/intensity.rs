//! Intensity and background estimation on a known support.
//!
//! Solves the penalized joint problem
//!
//! `½‖Ψx − (ȳ − b)‖² + (μ/2)‖∇x‖² + (β/2)‖∇b‖² + (α/2)(‖I_Ω x‖² + ‖min(x,0)‖² + ‖min(b,0)‖²)`
//!
//! either by alternating accelerated proximal-gradient solves in `x` and `b`
//! or by one accelerated solve in both, and picks `μ` with a safeguarded
//! Newton iteration on the discrepancy function. `I_Ω` is 1 off the support
//! and 0 on it.

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_square, diff_norm_sq, dot, gradient_energy, gradient_normal, gradient_normal_norm, norm_sq, Support};
use crate::operators::{largest_eigenvalue, ForwardModel, SelfAdjointImageMap};
use crate::solver::{fista, FistaSettings, Quadratic};

const POWER_ITERS: usize = 2000;
const EIGEN_TOL: f64 = 1e-8;

/// How a fixed-`μ` problem is minimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointStrategy {
    /// Accelerated proximal gradient over `(x, b)` together.
    #[default]
    Joint,
    /// Alternating `x` and `b` subproblem solves.
    Alternating,
}

/// Knobs of the intensity step. The defaults are α = 1e6 and β = 20
/// with a 1e-3 relative discrepancy tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntensitySettings {
    pub mu: f64,
    pub beta: f64,
    pub alpha: f64,
    pub nu_dp: f64,
    pub dp_tol: f64,
    pub newton_max: usize,
    pub outer_max: usize,
    pub inner_max: usize,
    pub rel_tol: f64,
    pub strategy: JointStrategy,
    pub joint_max_iter: usize,
    pub joint_rel_tol: f64,
}

impl Default for IntensitySettings {
    fn default() -> Self {
        IntensitySettings {
            mu: 1.0,
            beta: 20.0,
            alpha: 1e6,
            nu_dp: 1.0,
            dp_tol: 1e-3,
            newton_max: 20,
            outer_max: 100,
            inner_max: 500,
            rel_tol: 1e-6,
            strategy: JointStrategy::Joint,
            joint_max_iter: 20_000,
            joint_rel_tol: 1e-9,
        }
    }
}

impl IntensitySettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "mu and beta must be positive, got {} and {}",
                self.mu, self.beta
            )));
        }
        if !(self.alpha >= 1e4) {
            return Err(Error::Config(format!("alpha must be at least 1e4, got {}", self.alpha)));
        }
        if !(1.0..=2.0).contains(&self.nu_dp) {
            return Err(Error::Config(format!("nu_dp must lie in [1, 2], got {}", self.nu_dp)));
        }
        if !(self.dp_tol > 0.0) || !(self.rel_tol > 0.0) || !(self.joint_rel_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.newton_max == 0 || self.outer_max == 0 || self.inner_max == 0 || self.joint_max_iter == 0 {
            return Err(Error::Config("iteration counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Data of one intensity estimation.
#[derive(Clone, Debug)]
pub struct IntensityProblem<'a> {
    pub model: &'a ForwardModel,
    /// Temporal mean `ȳ`, `M × M`.
    pub mean: Array2<f64>,
    pub support: Support,
    /// Noise variance from the support step.
    pub s: f64,
    pub frames: usize,
    pub settings: IntensitySettings,
    off_support: Array2<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntensityIterations {
    pub outer: usize,
    pub newton: usize,
}

#[derive(Clone, Debug)]
pub struct IntensityResult {
    /// Fine-grid intensity, `L × L`.
    pub x: Array2<f64>,
    /// Coarse-grid background, `M × M`.
    pub b: Array2<f64>,
    pub mu_hat: f64,
    /// Discrepancy `f(μ̂)`.
    pub f_residual: f64,
    pub iterations: IntensityIterations,
    /// Objective after each outer alternation of the last solve.
    pub trace: Vec<f64>,
    /// False when the discrepancy iteration stopped without meeting `dp_tol`.
    pub converged: bool,
}

/// Minimizer for a fixed `μ`. `outer_iterations` counts alternations, or
/// accelerated steps for [`JointStrategy::Joint`].
#[derive(Clone, Debug)]
pub struct JointSolution {
    pub x: Array2<f64>,
    pub b: Array2<f64>,
    pub trace: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
}

/// Scalar prox of `h` at `w` for `ατ`; `off_support` selects `I_Ω(i,i) = 1`.
pub fn prox_h_scalar(w: f64, alpha_tau: f64, off_support: bool) -> f64 {
    let i = if off_support { 1.0 } else { 0.0 };
    if w >= 0.0 {
        w / (1.0 + alpha_tau * i)
    } else {
        w / (1.0 + alpha_tau * (i + 1.0))
    }
}

pub fn prox_q_scalar(d: f64, alpha_delta: f64) -> f64 {
    if d >= 0.0 {
        d
    } else {
        d / (1.0 + alpha_delta)
    }
}

/// Scalar prox of `h̄`; `negative_hat` selects `I_x̂(i,i) = 1`.
pub fn prox_hbar_scalar(z: f64, alpha_tau: f64, off_support: bool, negative_hat: bool) -> f64 {
    let count = off_support as u8 + negative_hat as u8;
    z / (1.0 + alpha_tau * count as f64)
}

pub fn prox_h(w: &ArrayView2<f64>, tau: f64, alpha: f64, support: &Support) -> Array2<f64> {
    let off = off_support_mask(support);
    Zip::from(w).and(&off).map_collect(|&v, &o| prox_h_scalar(v, alpha * tau, o > 0.0))
}

pub fn prox_q(d: &ArrayView2<f64>, delta_step: f64, alpha: f64) -> Array2<f64> {
    d.mapv(|v| prox_q_scalar(v, alpha * delta_step))
}

pub fn prox_hbar(
    z: &ArrayView2<f64>,
    tau: f64,
    alpha: f64,
    support: &Support,
    x_hat: &ArrayView2<f64>,
) -> Array2<f64> {
    let off = off_support_mask(support);
    Zip::from(z)
        .and(&off)
        .and(x_hat)
        .map_collect(|&v, &o, &xh| prox_hbar_scalar(v, alpha * tau, o > 0.0, xh < 0.0))
}

fn off_support_mask(support: &Support) -> Array2<f64> {
    support.mask().mapv(|v| 1.0 - v)
}

fn neg_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|&v| if v < 0.0 { v * v } else { 0.0 }).sum()
}

/// Largest eigenvalue of `ΨᵀΨ + μ∇ᵀ∇` with the safety factor applied.
pub fn x_lipschitz(model: &ForwardModel, mu: f64) -> f64 {
    let l = model.fine_size();
    let op = SelfAdjointImageMap::new(l, l, |x: &ArrayView2<f64>| {
        let mut h = model.normal_unchecked(x);
        h.scaled_add(mu, &gradient_normal(x));
        h
    });
    largest_eigenvalue(&op, POWER_ITERS, EIGEN_TOL).lipschitz()
}

/// Largest eigenvalue of `I + β∇ᵀ∇` on the coarse grid, with safety factor.
pub fn b_lipschitz(m: usize, beta: f64) -> f64 {
    let op = SelfAdjointImageMap::new(m, m, |b: &ArrayView2<f64>| {
        let mut h = b.to_owned();
        h.scaled_add(beta, &gradient_normal(b));
        h
    });
    largest_eigenvalue(&op, POWER_ITERS, EIGEN_TOL).lipschitz()
}

/// Default starting `μ`: the ratio of the data and smoothness curvatures,
/// `‖ΨᵀΨ‖ / ‖∇ᵀ∇‖`.
pub fn default_mu0(model: &ForwardModel) -> f64 {
    let l = model.fine_size();
    let normal = SelfAdjointImageMap::new(l, l, |x: &ArrayView2<f64>| model.normal_unchecked(x));
    largest_eigenvalue(&normal, POWER_ITERS, EIGEN_TOL).value / gradient_normal_norm(l, l)
}

impl<'a> IntensityProblem<'a> {
    pub fn new(
        model: &'a ForwardModel,
        mean: Array2<f64>,
        support: Support,
        s: f64,
        frames: usize,
        settings: IntensitySettings,
    ) -> Result<Self> {
        check_square("mean image", &mean.view(), model.coarse_size())?;
        if support.grid() != model.fine_size() {
            return Err(Error::dimension("support grid", model.fine_size(), support.grid()));
        }
        if frames < 2 {
            return Err(Error::Precondition(format!("need at least 2 frames, got {frames}")));
        }
        if !(s >= 0.0) {
            return Err(Error::Precondition(format!("noise variance must be nonnegative, got {s}")));
        }
        settings.validate()?;
        let off_support = off_support_mask(&support);
        Ok(IntensityProblem { model, mean, support, s, frames, settings, off_support })
    }

    pub fn with_mu(&self, mu: f64) -> Result<Self> {
        let mut p = self.clone();
        p.settings.mu = mu;
        p.settings.validate()?;
        Ok(p)
    }

    fn fine(&self) -> usize {
        self.model.fine_size()
    }

    fn coarse(&self) -> usize {
        self.model.coarse_size()
    }

    /// `h(x) = (α/2)(‖I_Ω x‖² + ‖min(x,0)‖²)`.
    pub fn h_value(&self, x: &Array2<f64>) -> f64 {
        let off = Zip::from(x).and(&self.off_support).fold(0.0, |acc, &v, &o| acc + o * v * v);
        0.5 * self.settings.alpha * (off + neg_sq(x))
    }

    /// `q(b) = (α/2)‖min(b,0)‖²`.
    pub fn q_value(&self, b: &Array2<f64>) -> f64 {
        0.5 * self.settings.alpha * neg_sq(b)
    }

    /// `g(x; b) = ½‖Ψx − (ȳ − b)‖² + (μ/2)‖∇x‖²`.
    pub fn g_value(&self, x: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let res = self.model.forward_unchecked(&x.view()) - (&self.mean - b);
        0.5 * norm_sq(&res) + 0.5 * self.settings.mu * gradient_energy(&x.view())
    }

    pub fn grad_g(&self, x: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let res = self.model.forward_unchecked(&x.view()) - (&self.mean - b);
        let mut grad = self.model.adjoint_unchecked(&res.view());
        grad.scaled_add(self.settings.mu, &gradient_normal(&x.view()));
        grad
    }

    /// `r(b; x) = ½‖b − (ȳ − Ψx)‖² + (β/2)‖∇b‖²`.
    pub fn r_value(&self, b: &Array2<f64>, x: &Array2<f64>) -> f64 {
        let res = b - &(&self.mean - &self.model.forward_unchecked(&x.view()));
        0.5 * norm_sq(&res) + 0.5 * self.settings.beta * gradient_energy(&b.view())
    }

    pub fn grad_r(&self, b: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
        let mut grad = b - &(&self.mean - &self.model.forward_unchecked(&x.view()));
        grad.scaled_add(self.settings.beta, &gradient_normal(&b.view()));
        grad
    }

    /// `ḡ(x′) = ½‖Ψx′‖² + (μ/2)‖∇x′ + ∇x̂/μ‖²`.
    pub fn gbar_value(&self, xp: &Array2<f64>, x_hat: &Array2<f64>) -> f64 {
        let mu = self.settings.mu;
        let shifted = xp + &(x_hat / mu);
        0.5 * norm_sq(&self.model.forward_unchecked(&xp.view()))
            + 0.5 * mu * gradient_energy(&shifted.view())
    }

    pub fn grad_gbar(&self, xp: &Array2<f64>, x_hat: &Array2<f64>) -> Array2<f64> {
        let mut grad = self.model.normal_unchecked(&xp.view());
        grad.scaled_add(self.settings.mu, &gradient_normal(&xp.view()));
        grad += &gradient_normal(&x_hat.view());
        grad
    }

    /// Value of the full penalized objective.
    pub fn objective(&self, x: &Array2<f64>, b: &Array2<f64>) -> f64 {
        self.g_value(x, b)
            + 0.5 * self.settings.beta * gradient_energy(&b.view())
            + self.h_value(x)
            + self.q_value(b)
    }

    /// Expected `½ν²‖n̄‖² = (ν²/2)·M²·s/T`.
    pub fn discrepancy_target(&self) -> f64 {
        0.5 * self.settings.nu_dp.powi(2) * self.coarse().pow(2) as f64 * self.s / self.frames as f64
    }

    /// `f = ½‖ȳ − Ψx̂ − b̂‖² − (ν²/2)M²s/T`.
    pub fn discrepancy_f(&self, x_hat: &Array2<f64>, b_hat: &Array2<f64>) -> f64 {
        let res = &self.mean - &self.model.forward_unchecked(&x_hat.view()) - b_hat;
        0.5 * norm_sq(&res) - self.discrepancy_target()
    }

    fn x_operator(&self) -> impl Fn(&ArrayView2<f64>) -> Array2<f64> + '_ {
        let mu = self.settings.mu;
        move |x: &ArrayView2<f64>| {
            let mut h = self.model.normal_unchecked(x);
            h.scaled_add(mu, &gradient_normal(x));
            h
        }
    }

    fn check_fine(&self, what: &'static str, x: &Array2<f64>) -> Result<()> {
        check_square(what, &x.view(), self.fine())
    }

    fn check_coarse(&self, what: &'static str, b: &Array2<f64>) -> Result<()> {
        check_square(what, &b.view(), self.coarse())
    }

    fn solve_x_with(&self, b_fixed: &Array2<f64>, x_init: &Array2<f64>, lipschitz: f64) -> Result<Array2<f64>> {
        let rhs = &self.mean - b_fixed;
        let linear = self.model.adjoint_unchecked(&rhs.view());
        let apply = self.x_operator();
        let quad = Quadratic { apply: &apply, linear: &linear, constant: 0.0 };
        let alpha = self.settings.alpha;
        let off = &self.off_support;
        let out = fista(
            "intensity x-update",
            &quad,
            x_init.clone(),
            |u, tau| {
                Zip::from(u).and(off).for_each(|v, &o| *v = prox_h_scalar(*v, alpha * tau, o > 0.0));
            },
            |x| self.h_value(x),
            FistaSettings {
                step: 1.0 / lipschitz,
                max_iter: self.settings.inner_max,
                rel_tol: self.settings.rel_tol,
            },
        )?;
        Ok(out.into_x("intensity x-update"))
    }

    fn solve_b_with(&self, x_fixed: &Array2<f64>, b_init: &Array2<f64>, lipschitz: f64) -> Result<Array2<f64>> {
        let linear = &self.mean - &self.model.forward_unchecked(&x_fixed.view());
        let beta = self.settings.beta;
        let apply = |b: &ArrayView2<f64>| {
            let mut h = b.to_owned();
            h.scaled_add(beta, &gradient_normal(b));
            h
        };
        let quad = Quadratic { apply: &apply, linear: &linear, constant: 0.0 };
        let alpha = self.settings.alpha;
        let out = fista(
            "intensity b-update",
            &quad,
            b_init.clone(),
            |u, delta| u.mapv_inplace(|v| prox_q_scalar(v, alpha * delta)),
            |b| self.q_value(b),
            FistaSettings {
                step: 1.0 / lipschitz,
                max_iter: self.settings.inner_max,
                rel_tol: self.settings.rel_tol,
            },
        )?;
        Ok(out.into_x("intensity b-update"))
    }

    /// Minimizes `g(x; b) + h(x)` for fixed `b`.
    pub fn solve_x_subproblem(&self, b_fixed: &Array2<f64>, x_init: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_coarse("background", b_fixed)?;
        self.check_fine("initial intensity", x_init)?;
        self.solve_x_with(b_fixed, x_init, x_lipschitz(self.model, self.settings.mu))
    }

    /// Minimizes `r(b; x) + q(b)` for fixed `x`.
    pub fn solve_b_subproblem(&self, x_fixed: &Array2<f64>, b_init: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_fine("intensity", x_fixed)?;
        self.check_coarse("initial background", b_init)?;
        self.solve_b_with(x_fixed, b_init, b_lipschitz(self.coarse(), self.settings.beta))
    }

    /// Alternating minimization in `(x, b)` from zero.
    pub fn estimate_intensity(&self) -> Result<JointSolution> {
        let (l, m) = (self.fine(), self.coarse());
        self.estimate_intensity_from(Array2::zeros((l, l)), Array2::zeros((m, m)))
    }

    /// Alternating minimization from a warm start.
    pub fn estimate_intensity_from(&self, x0: Array2<f64>, b0: Array2<f64>) -> Result<JointSolution> {
        if self.support.is_empty() {
            return Err(Error::Precondition("no support to estimate on".into()));
        }
        self.check_fine("initial intensity", &x0)?;
        self.check_coarse("initial background", &b0)?;
        let lx = x_lipschitz(self.model, self.settings.mu);
        let lb = b_lipschitz(self.coarse(), self.settings.beta);
        let (mut x, mut b) = (x0, b0);
        let mut trace = Vec::new();
        let mut converged = false;
        let mut outer = 0;
        while outer < self.settings.outer_max {
            outer += 1;
            let x_new = self.solve_x_with(&b, &x, lx)?;
            let b_new = self.solve_b_with(&x_new, &b, lb)?;
            trace.push(self.objective(&x_new, &b_new));
            let change = diff_norm_sq(&x_new, &x) + diff_norm_sq(&b_new, &b);
            let scale = norm_sq(&x_new) + norm_sq(&b_new);
            x = x_new;
            b = b_new;
            if change <= self.settings.rel_tol.powi(2) * scale {
                converged = true;
                break;
            }
        }
        Ok(JointSolution { x, b, trace, outer_iterations: outer, converged })
    }

    /// Minimizes the joint objective with one accelerated solve over the
    /// stacked variable `(x, b/κ)`. The background is rescaled by `κ` so
    /// that both diagonal blocks of the Hessian have comparable norms and a
    /// single step size suits both. Alternation stalls when the support and
    /// the background explain the same part of the data; this does not.
    pub fn solve_joint_from(&self, x0: Array2<f64>, b0: Array2<f64>) -> Result<JointSolution> {
        if self.support.is_empty() {
            return Err(Error::Precondition("no support to estimate on".into()));
        }
        self.check_fine("initial intensity", &x0)?;
        self.check_coarse("initial background", &b0)?;
        let (l, m) = (self.fine(), self.coarse());
        let (mu, beta, alpha) = (self.settings.mu, self.settings.beta, self.settings.alpha);
        let kappa = (x_lipschitz(self.model, mu) / b_lipschitz(m, beta)).sqrt();

        // Packed layout: rows 0..l hold x, the top-left m × m block of the
        // remaining rows holds b/κ. Everything else stays zero.
        let split = |z: &ArrayView2<f64>| {
            (z.slice(s![..l, ..]).to_owned(), z.slice(s![l.., ..m]).to_owned())
        };
        let pack = |x: &Array2<f64>, bt: &Array2<f64>| {
            let mut z = Array2::zeros((l + m, l));
            z.slice_mut(s![..l, ..]).assign(x);
            z.slice_mut(s![l.., ..m]).assign(bt);
            z
        };
        // With the shared residual d = Ψx + κb̃ the Hessian blocks read
        // Ψᵀd + μ∇ᵀ∇x and κd + βκ²∇ᵀ∇b̃.
        let apply = |z: &ArrayView2<f64>| {
            let (x, bt) = split(z);
            let mut d = self.model.forward_unchecked(&x.view());
            d.scaled_add(kappa, &bt);
            let mut hx = self.model.adjoint_unchecked(&d.view());
            hx.scaled_add(mu, &gradient_normal(&x.view()));
            let mut hb = d * kappa;
            hb.scaled_add(beta * kappa * kappa, &gradient_normal(&bt.view()));
            pack(&hx, &hb)
        };
        let lipschitz = largest_eigenvalue(&SelfAdjointImageMap::new(l + m, l, apply), POWER_ITERS, EIGEN_TOL).lipschitz();
        let linear = pack(&self.model.adjoint_unchecked(&self.mean.view()), &(&self.mean * kappa));
        let quad = Quadratic { apply: &apply, linear: &linear, constant: 0.5 * norm_sq(&self.mean) };
        let off = &self.off_support;
        let out = fista(
            "intensity joint",
            &quad,
            pack(&x0, &(b0 / kappa)),
            |u, tau| {
                Zip::from(u.slice_mut(s![..l, ..]))
                    .and(off)
                    .for_each(|v, &o| *v = prox_h_scalar(*v, alpha * tau, o > 0.0));
                let ab = alpha * kappa * kappa * tau;
                u.slice_mut(s![l.., ..m]).mapv_inplace(|v| prox_q_scalar(v, ab));
            },
            |z| {
                let (x, bt) = split(&z.view());
                self.h_value(&x) + self.q_value(&(bt * kappa))
            },
            FistaSettings {
                step: 1.0 / lipschitz,
                max_iter: self.settings.joint_max_iter,
                rel_tol: self.settings.joint_rel_tol,
            },
        )?;
        let converged = out.converged;
        let iterations = out.iterations;
        let (x, bt) = split(&out.x.view());
        let b = bt * kappa;
        let trace = vec![self.objective(&x, &b)];
        Ok(JointSolution { x, b, trace, outer_iterations: iterations, converged })
    }

    /// Minimizer for the current `μ` with the configured strategy.
    pub fn solve_from(&self, x0: Array2<f64>, b0: Array2<f64>) -> Result<JointSolution> {
        match self.settings.strategy {
            JointStrategy::Joint => self.solve_joint_from(x0, b0),
            JointStrategy::Alternating => self.estimate_intensity_from(x0, b0),
        }
    }

    /// Derivative `∂x̂_μ/∂μ` for fixed background, from the linearized
    /// optimality conditions at `x_hat`.
    pub fn solve_x_prime(&self, x_hat: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_fine("intensity", x_hat)?;
        let l = self.fine();
        let linear = -gradient_normal(&x_hat.view());
        let apply = self.x_operator();
        let quad = Quadratic { apply: &apply, linear: &linear, constant: 0.0 };
        let alpha = self.settings.alpha;
        let weights = Zip::from(&self.off_support)
            .and(x_hat)
            .map_collect(|&o, &xh| o + if xh < 0.0 { 1.0 } else { 0.0 });
        let out = fista(
            "intensity sensitivity",
            &quad,
            Array2::zeros((l, l)),
            |u, tau| Zip::from(u).and(&weights).for_each(|v, &w| *v /= 1.0 + alpha * tau * w),
            |x| 0.5 * alpha * Zip::from(x).and(&weights).fold(0.0, |acc, &v, &w| acc + w * v * v),
            FistaSettings {
                step: 1.0 / x_lipschitz(self.model, self.settings.mu),
                max_iter: self.settings.inner_max * 4,
                rel_tol: self.settings.rel_tol,
            },
        )?;
        Ok(out.into_x("intensity sensitivity"))
    }

    /// `f′(μ) = −⟨Ψx̂′, ȳ − Ψx̂ − b̂⟩`.
    pub fn discrepancy_derivative(&self, x_hat: &Array2<f64>, b_hat: &Array2<f64>, x_prime: &Array2<f64>) -> f64 {
        let res = &self.mean - &self.model.forward_unchecked(&x_hat.view()) - b_hat;
        -dot(&self.model.forward_unchecked(&x_prime.view()), &res)
    }

    /// Fixed-`μ` reconstruction using `settings.mu`.
    pub fn solve_fixed(&self) -> Result<IntensityResult> {
        let (l, m) = (self.fine(), self.coarse());
        let sol = self.solve_from(Array2::zeros((l, l)), Array2::zeros((m, m)))?;
        let f = self.discrepancy_f(&sol.x, &sol.b);
        Ok(IntensityResult {
            x: sol.x,
            b: sol.b,
            mu_hat: self.settings.mu,
            f_residual: f,
            iterations: IntensityIterations { outer: sol.outer_iterations, newton: 0 },
            trace: sol.trace,
            converged: sol.converged,
        })
    }

    /// Discrepancy-principle choice of `μ` by safeguarded Newton steps from
    /// `mu0`. Iterates are clamped to `[1e-8·μ₀, 1e8·μ₀]` and a step is
    /// limited to a factor 10. Once a sign change of `f` has been bracketed,
    /// the geometric midpoint of the bracket replaces any step that leaves it,
    /// and any step taken after `|f|` failed to halve.
    pub fn select_mu(&self, mu0: f64) -> Result<IntensityResult> {
        if !(mu0 > 0.0) || !mu0.is_finite() {
            return Err(Error::Precondition(format!("mu0 must be positive, got {mu0}")));
        }
        if self.support.is_empty() {
            return Err(Error::Precondition("no support to estimate on".into()));
        }
        let (lo_clamp, hi_clamp) = (1e-8 * mu0, 1e8 * mu0);
        let target = self.discrepancy_target();
        let tol = self.settings.dp_tol * target;

        let (l, m) = (self.fine(), self.coarse());
        let (mut x, mut b) = (Array2::zeros((l, l)), Array2::zeros((m, m)));
        let mut mu = mu0;
        // f increases with μ: `below` holds the largest μ with f < 0 and
        // `above` the smallest μ with f > 0.
        let mut below: Option<f64> = None;
        let mut above: Option<f64> = None;
        let mut best: Option<IntensityResult> = None;
        let mut outer_total = 0;
        let mut last_abs_f = f64::INFINITY;

        for newton in 1..=self.settings.newton_max {
            let p = self.with_mu(mu)?;
            let sol = p.solve_from(x, b)?;
            outer_total += sol.outer_iterations;
            let f = p.discrepancy_f(&sol.x, &sol.b);
            log::debug!("discrepancy step {newton}: mu = {mu:.6e}, f = {f:.6e}");

            let candidate = IntensityResult {
                x: sol.x.clone(),
                b: sol.b.clone(),
                mu_hat: mu,
                f_residual: f,
                iterations: IntensityIterations { outer: outer_total, newton },
                trace: sol.trace.clone(),
                converged: f.abs() <= tol,
            };
            if best.as_ref().is_none_or(|bst| f.abs() < bst.f_residual.abs()) {
                best = Some(candidate);
            }
            if f.abs() <= tol {
                return Ok(best.expect("just stored"));
            }

            if f < 0.0 {
                below = Some(below.map_or(mu, |v: f64| v.max(mu)));
            } else {
                above = Some(above.map_or(mu, |v: f64| v.min(mu)));
            }

            let x_prime = p.solve_x_prime(&sol.x)?;
            let fp = p.discrepancy_derivative(&sol.x, &sol.b, &x_prime);
            if fp.abs() < 1e-30 {
                return Err(Error::FlatDerivative { mu });
            }
            let mut next = mu - f / fp;
            let inside = |v: f64| below.is_none_or(|lo| v > lo) && above.is_none_or(|hi| v < hi);
            let stalled = below.is_some() && above.is_some() && f.abs() > 0.5 * last_abs_f;
            last_abs_f = f.abs();
            if !next.is_finite() || next <= 0.0 || !inside(next) || stalled {
                next = match (below, above) {
                    (Some(lo), Some(hi)) => (lo * hi).sqrt(),
                    (Some(_), None) => mu * 10.0,
                    (None, Some(_)) => mu / 10.0,
                    (None, None) => unreachable!("f was classified above"),
                };
            }
            next = next.clamp(mu / 10.0, mu * 10.0).clamp(lo_clamp, hi_clamp);
            if (next - mu).abs() <= 1e-12 * mu {
                break;
            }
            mu = next;
            x = sol.x;
            b = sol.b;
        }

        let mut res = best.expect("at least one Newton step runs");
        res.converged = false;
        log::warn!(
            "discrepancy principle did not reach |f| <= {tol:.3e}; returning mu = {:.6e} with f = {:.3e}",
            res.mu_hat,
            res.f_residual
        );
        Ok(res)
    }
}

/// Off-support fraction `Σ_{i∉Ω}|x_i| / Σ_i|x_i|`.
pub fn off_support_mass(x: &Array2<f64>, support: &Support) -> f64 {
    let mask = support.mask();
    let total: f64 = x.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let off: f64 = Zip::from(x).and(&mask).fold(0.0, |acc, &v, &m| acc + (1.0 - m) * v.abs());
    off / total
}

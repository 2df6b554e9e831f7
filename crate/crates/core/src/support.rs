//! Sparse support estimation in the covariance domain.
//!
//! Minimizes `½‖r_y − A r_x − s v_I‖² + penalty(r_x)` over `r_x ≥ 0` and
//! `s ≥ 0` by alternating a closed-form `s` update with a regularized solve
//! for `r_x`. The residual norm is expanded through the Gram identities of
//! [`ForwardModel`], so neither `A` nor the residual is ever formed:
//!
//! `½‖r_y − Ar − s v_I‖² = ½(‖r_y‖² − 2s·tr R_y + s²M²) − ⟨Aᵀr_y − s·d, r⟩ + ½⟨r, W r W⟩`
//!
//! with `d = Aᵀv_I` the column norms.

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceData;
use crate::error::{Error, Result};
use crate::grid::{
    diff_norm_sq, dot, gradient, gradient_adjoint, norm_sq, total_variation, Support,
};
use crate::operators::ForwardModel;
use crate::solver::{fista, FistaSettings, Quadratic};

/// Relative level below which a variance entry counts as zero.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;

/// Upper bound on `‖∇‖²` for forward differences on a 2-D grid.
const GRADIENT_NORM_SQ: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    Cel0,
    L1,
    Tv,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::Cel0 => "cel0",
            RegularizerKind::L1 => "l1",
            RegularizerKind::Tv => "tv",
        }
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cel0" => Ok(RegularizerKind::Cel0),
            "l1" => Ok(RegularizerKind::L1),
            "tv" => Ok(RegularizerKind::Tv),
            other => Err(Error::Config(format!("unknown regularizer '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub lambda: f64,
}

impl Regularizer {
    pub fn new(kind: RegularizerKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        Ok(Regularizer { kind, lambda })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub outer_max: usize,
    pub inner_max: usize,
    pub rel_tol: f64,
    pub irl1_rounds: usize,
    pub seed: u64,
    /// Weight of an optional `(ρ/2)‖r − r_prev‖²` term in each `r_x` solve.
    pub proximal_weight: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            outer_max: 50,
            inner_max: 500,
            rel_tol: 1e-5,
            irl1_rounds: 10,
            seed: 0,
            proximal_weight: 0.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.outer_max == 0 || self.inner_max == 0 || self.irl1_rounds == 0 {
            return Err(Error::Config("iteration counts must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if !(self.proximal_weight >= 0.0) {
            return Err(Error::Config("proximal_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SupportResult {
    /// Fine-grid variance map, zero off the support.
    pub r_x: Array2<f64>,
    pub support: Support,
    pub s: f64,
    /// Objective after each outer iteration.
    pub trace: Vec<f64>,
    pub outer_iterations: usize,
    pub restarts: usize,
    pub converged: bool,
}

/// Precomputed data-fit quantities for one covariance vector.
pub struct SupportProblem<'a> {
    model: &'a ForwardModel,
    /// `Aᵀ r_y`.
    correlation: Array2<f64>,
    trace_ry: f64,
    ry_norm_sq: f64,
    lipschitz: f64,
}

impl<'a> SupportProblem<'a> {
    pub fn new(model: &'a ForwardModel, r_y: &ArrayView1<f64>) -> Result<Self> {
        let m2 = model.coarse_size().pow(2);
        let correlation = model.apply_a_adjoint(r_y)?;
        let trace_ry = (0..m2).map(|i| r_y[i + i * m2]).sum();
        let ry_norm_sq = r_y.iter().map(|v| v * v).sum();
        Ok(SupportProblem {
            model,
            correlation,
            trace_ry,
            ry_norm_sq,
            lipschitz: model.gram_lipschitz(),
        })
    }

    pub fn from_covariance(model: &'a ForwardModel, cov: &CovarianceData) -> Result<Self> {
        if cov.size() != model.coarse_size() {
            return Err(Error::dimension("covariance grid", model.coarse_size(), cov.size()));
        }
        Self::new(model, &cov.r_y())
    }

    pub fn model(&self) -> &ForwardModel {
        self.model
    }

    /// `Aᵀ r_y` as a fine-grid image.
    pub fn correlation(&self) -> &Array2<f64> {
        &self.correlation
    }

    fn grid(&self) -> usize {
        self.model.fine_size()
    }

    fn m2(&self) -> f64 {
        self.model.coarse_size().pow(2) as f64
    }

    /// Closed-form minimizer over `s ≥ 0` for fixed `r_x`.
    pub fn update_noise_variance(&self, r_x: &ArrayView2<f64>) -> f64 {
        ((self.trace_ry - self.model.trace_a(r_x)) / self.m2()).max(0.0)
    }

    /// `½‖r_y − A r_x − s v_I‖²`.
    pub fn data_fit(&self, r_x: &ArrayView2<f64>, s: f64) -> f64 {
        let wrw = self.model.gram_unchecked(r_x);
        let quad = Zip::from(r_x).and(&wrw).fold(0.0, |acc, &a, &b| acc + a * b);
        let lin = Zip::from(r_x)
            .and(&self.correlation)
            .and(self.model.column_norms())
            .fold(0.0, |acc, &r, &g, &d| acc + r * (g - s * d));
        let value =
            0.5 * (self.ry_norm_sq - 2.0 * s * self.trace_ry + s * s * self.m2()) - lin + 0.5 * quad;
        value.max(0.0)
    }

    /// Penalty value of `reg` at `r_x`.
    pub fn penalty(&self, reg: &Regularizer, r_x: &ArrayView2<f64>) -> f64 {
        match reg.kind {
            RegularizerKind::L1 => reg.lambda * r_x.iter().map(|v| v.abs()).sum::<f64>(),
            RegularizerKind::Tv => reg.lambda * total_variation(r_x),
            RegularizerKind::Cel0 => Zip::from(r_x)
                .and(self.model.column_norms())
                .fold(0.0, |acc, &r, &a| acc + cel0_term(a, reg.lambda, r)),
        }
    }

    pub fn objective(&self, reg: &Regularizer, r_x: &ArrayView2<f64>, s: f64) -> f64 {
        self.data_fit(r_x, s) + self.penalty(reg, r_x)
    }

    /// Smallest `λ` for which zero solves the problem with `s = 0`.
    pub fn lambda_max(&self, kind: RegularizerKind) -> Result<f64> {
        let g = &self.correlation;
        match kind {
            RegularizerKind::L1 => Ok(g.iter().fold(0.0f64, |m, &v| m.max(v))),
            RegularizerKind::Cel0 => Ok(Zip::from(g)
                .and(self.model.column_norms())
                .fold(0.0f64, |m, &v, &c| m.max(v * v / (2.0 * c * c)))),
            RegularizerKind::Tv => Err(Error::UnsupportedRegularizer("tv")),
        }
    }

    fn smooth_linear(&self, s: f64, anchor: Option<(&Array2<f64>, f64)>) -> Array2<f64> {
        let mut c = &self.correlation - &(self.model.column_norms() * s);
        if let Some((prev, rho)) = anchor {
            c.scaled_add(rho, prev);
        }
        c
    }

    fn solve_weighted_l1(
        &self,
        s: f64,
        weights: &Array2<f64>,
        init: Array2<f64>,
        opts: &SolverOptions,
        anchor: Option<(&Array2<f64>, f64)>,
    ) -> Result<Array2<f64>> {
        let rho = anchor.map_or(0.0, |a| a.1);
        let linear = self.smooth_linear(s, anchor);
        let model = self.model;
        let apply = |x: &ArrayView2<f64>| {
            let mut h = model.gram_unchecked(x);
            if rho > 0.0 {
                h.scaled_add(rho, x);
            }
            h
        };
        let quad = Quadratic { apply: &apply, linear: &linear, constant: 0.0 };
        let out = fista(
            "support fista",
            &quad,
            init,
            |u, tau| {
                Zip::from(u).and(weights).for_each(|v, &w| *v = (*v - tau * w).max(0.0));
            },
            |x| dot(x, weights),
            FistaSettings {
                step: 1.0 / (self.lipschitz + rho),
                max_iter: opts.inner_max,
                rel_tol: opts.rel_tol,
            },
        )?;
        Ok(out.into_x("support fista"))
    }

    /// Nonnegative ℓ1-regularized solve for fixed `s`.
    pub fn solve_l1(
        &self,
        s: f64,
        lambda: f64,
        opts: &SolverOptions,
        init: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let n = self.grid();
        let weights = Array2::from_elem((n, n), lambda);
        let x0 = init.cloned().unwrap_or_else(|| Array2::zeros((n, n)));
        let anchor = init.filter(|_| opts.proximal_weight > 0.0).map(|p| (p, opts.proximal_weight));
        self.solve_weighted_l1(s, &weights, x0, opts, anchor)
    }

    /// CEL0-regularized solve for fixed `s` by iteratively reweighted ℓ1.
    pub fn solve_cel0(
        &self,
        s: f64,
        lambda: f64,
        opts: &SolverOptions,
        init: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let n = self.grid();
        let mut r = init.cloned().unwrap_or_else(|| Array2::zeros((n, n)));
        let anchor = init.filter(|_| opts.proximal_weight > 0.0).map(|p| (p, opts.proximal_weight));
        let root = (2.0 * lambda).sqrt();
        let mut support = Support::nonzero(&r.view());
        for _ in 0..opts.irl1_rounds {
            let weights = Zip::from(&r)
                .and(self.model.column_norms())
                .map_collect(|&v, &a| (a * (root - a * v.abs())).max(0.0));
            let next = self.solve_weighted_l1(s, &weights, r.clone(), opts, anchor)?;
            let next_support = Support::nonzero(&next.view());
            let moved = diff_norm_sq(&next, &r).sqrt();
            let scale = norm_sq(&next).sqrt();
            r = next;
            if next_support == support && moved <= opts.rel_tol * scale.max(f64::MIN_POSITIVE) {
                break;
            }
            support = next_support;
        }
        Ok(r)
    }

    /// Nonnegative TV-regularized solve for fixed `s` by a primal–dual
    /// splitting (forward step on the quadratic, projection for `r ≥ 0`,
    /// dual-ball projection for the isotropic TV term).
    pub fn solve_tv(
        &self,
        s: f64,
        lambda: f64,
        opts: &SolverOptions,
        init: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let n = self.grid();
        let rho = if init.is_some() { opts.proximal_weight } else { 0.0 };
        let anchor = init.filter(|_| rho > 0.0).map(|p| (p, rho));
        let linear = self.smooth_linear(s, anchor);
        let lf = self.lipschitz + rho;
        let tau = 1.0 / lf;
        let sigma = lf / (2.0 * GRADIENT_NORM_SQ);

        let apply = |x: &ArrayView2<f64>| {
            let mut h = self.model.gram_unchecked(x);
            if rho > 0.0 {
                h.scaled_add(rho, x);
            }
            h
        };

        let mut x = init.cloned().unwrap_or_else(|| Array2::zeros((n, n)));
        let mut hx = apply(&x.view());
        let mut pr = Array2::<f64>::zeros((n, n));
        let mut pc = Array2::<f64>::zeros((n, n));

        for it in 1..=opts.inner_max {
            let div = gradient_adjoint(&pr.view(), &pc.view());
            let mut x_new = x.clone();
            Zip::from(&mut x_new)
                .and(&hx)
                .and(&linear)
                .and(&div)
                .for_each(|v, &h, &c, &d| *v = (*v - tau * (h - c + d)).max(0.0));

            let extrap = &x_new * 2.0 - &x;
            let (gr, gc) = gradient(&extrap.view());
            Zip::from(&mut pr).and(&mut pc).and(&gr).and(&gc).for_each(|a, b, &da, &db| {
                let (ua, ub) = (*a + sigma * da, *b + sigma * db);
                let mag = (ua * ua + ub * ub).sqrt();
                let shrink = if mag > lambda { lambda / mag } else { 1.0 };
                *a = ua * shrink;
                *b = ub * shrink;
            });

            let change = diff_norm_sq(&x_new, &x).sqrt();
            let scale = norm_sq(&x_new).sqrt();
            x = x_new;
            hx = apply(&x.view());
            if !hx.iter().all(|v| v.is_finite()) {
                return Err(Error::SolverFailure {
                    solver: "support primal-dual",
                    reason: format!("non-finite iterate at iteration {it}"),
                });
            }
            if it > 1 && (change <= opts.rel_tol * scale || (scale == 0.0 && change == 0.0)) {
                break;
            }
        }
        Ok(x)
    }

    /// One `r_x` solve of the kind given by `reg`.
    pub fn solve(
        &self,
        reg: &Regularizer,
        s: f64,
        opts: &SolverOptions,
        init: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        match reg.kind {
            RegularizerKind::L1 => self.solve_l1(s, reg.lambda, opts, init),
            RegularizerKind::Cel0 => self.solve_cel0(s, reg.lambda, opts, init),
            RegularizerKind::Tv => self.solve_tv(s, reg.lambda, opts, init),
        }
    }

    /// Alternates the `s` update and the `r_x` solve, starting from `init`
    /// (zero when absent).
    pub fn estimate(
        &self,
        reg: &Regularizer,
        opts: &SolverOptions,
        init: Option<&Array2<f64>>,
    ) -> Result<SupportResult> {
        opts.validate()?;
        let n = self.grid();
        let mut r = init.cloned().unwrap_or_else(|| Array2::zeros((n, n)));
        if r.dim() != (n, n) {
            return Err(Error::dimension("initial variance map", format!("{n}x{n}"), format!("{:?}", r.dim())));
        }
        let mut s = self.update_noise_variance(&r.view());
        let mut trace = Vec::with_capacity(opts.outer_max);
        let mut converged = false;
        let mut outer = 0;

        while outer < opts.outer_max {
            outer += 1;
            let r_new = self.solve(reg, s, opts, Some(&r))?;
            let s_new = self.update_noise_variance(&r_new.view());
            trace.push(self.objective(reg, &r_new.view(), s_new));

            let dr = diff_norm_sq(&r_new, &r).sqrt();
            let scale = norm_sq(&r_new).sqrt();
            let ds = (s_new - s).abs() / s_new.max(1.0);
            r = r_new;
            s = s_new;
            if (dr <= opts.rel_tol * scale || (dr == 0.0 && scale == 0.0)) && ds <= opts.rel_tol {
                converged = true;
                break;
            }
        }

        let support = threshold_support(&mut r);
        log::debug!(
            "support estimate: {} pixels, s = {s:.6e}, {outer} outer iterations",
            support.len()
        );
        Ok(SupportResult {
            r_x: r,
            support,
            s,
            trace,
            outer_iterations: outer,
            restarts: 0,
            converged,
        })
    }
}

/// One CEL0 penalty term `φ(a, λ; u)`.
pub fn cel0_term(a: f64, lambda: f64, u: f64) -> f64 {
    let bound = (2.0 * lambda).sqrt() / a;
    let u = u.abs();
    if u <= bound {
        lambda - 0.5 * a * a * (u - bound).powi(2)
    } else {
        lambda
    }
}

/// Zeroes entries below the relative threshold and returns the support.
fn threshold_support(r: &mut Array2<f64>) -> Support {
    let max = r.iter().fold(0.0f64, |m, &v| m.max(v));
    let cut = SUPPORT_THRESHOLD * max;
    r.mapv_inplace(|v| if v > cut { v } else { 0.0 });
    if max > 0.0 {
        Support::above(&r.view(), cut)
    } else {
        Support::empty(r.nrows())
    }
}

pub fn update_noise_variance(
    model: &ForwardModel,
    r_y: &ArrayView1<f64>,
    r_x: &ArrayView2<f64>,
) -> Result<f64> {
    let m2 = model.coarse_size().pow(2);
    if r_y.len() != m2 * m2 {
        return Err(Error::dimension("covariance vector", m2 * m2, r_y.len()));
    }
    crate::grid::check_square("fine-grid variance map", r_x, model.fine_size())?;
    let trace: f64 = (0..m2).map(|i| r_y[i + i * m2]).sum();
    Ok(((trace - model.trace_a(r_x)) / m2 as f64).max(0.0))
}

pub fn lambda_max(model: &ForwardModel, r_y: &ArrayView1<f64>, kind: RegularizerKind) -> Result<f64> {
    if kind == RegularizerKind::Tv {
        return Err(Error::UnsupportedRegularizer("tv"));
    }
    SupportProblem::new(model, r_y)?.lambda_max(kind)
}

fn check_solve_args(s: f64, lambda: f64) -> Result<()> {
    if !(s >= 0.0) || !(lambda >= 0.0) {
        return Err(Error::Precondition(format!(
            "s and lambda must be nonnegative, got s = {s}, lambda = {lambda}"
        )));
    }
    Ok(())
}

pub fn solve_rx_l1(
    model: &ForwardModel,
    r_y: &ArrayView1<f64>,
    s: f64,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<Array2<f64>> {
    check_solve_args(s, lambda)?;
    SupportProblem::new(model, r_y)?.solve_l1(s, lambda, opts, None)
}

pub fn solve_rx_cel0(
    model: &ForwardModel,
    r_y: &ArrayView1<f64>,
    s: f64,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<Array2<f64>> {
    check_solve_args(s, lambda)?;
    SupportProblem::new(model, r_y)?.solve_cel0(s, lambda, opts, None)
}

pub fn solve_rx_tv(
    model: &ForwardModel,
    r_y: &ArrayView1<f64>,
    s: f64,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<Array2<f64>> {
    check_solve_args(s, lambda)?;
    SupportProblem::new(model, r_y)?.solve_tv(s, lambda, opts, None)
}

pub fn estimate_support(
    model: &ForwardModel,
    cov: &CovarianceData,
    reg: &Regularizer,
    opts: &SolverOptions,
) -> Result<SupportResult> {
    SupportProblem::from_covariance(model, cov)?.estimate(reg, opts, None)
}

/// For every support pixel, marks the rounded midpoint between it and its
/// nearest other support pixel. Ties go to the smaller column-major index and
/// halves round up.
pub fn restart_initialization(prev: &Support) -> Array2<f64> {
    let n = prev.grid();
    let mut init = Array2::zeros((n, n));
    let pts: Vec<(usize, usize)> = prev.coords().collect();
    for (k, &(r, c)) in pts.iter().enumerate() {
        let mut best: Option<(usize, usize)> = None;
        for (j, &(rr, cc)) in pts.iter().enumerate() {
            if j == k {
                continue;
            }
            let d = r.abs_diff(rr).pow(2) + c.abs_diff(cc).pow(2);
            // Indices are visited in increasing column-major order, so a
            // strict comparison keeps the smallest index among ties.
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            let (rr, cc) = pts[j];
            init[[(r + rr + 1) / 2, (c + cc + 1) / 2]] = 1.0;
        }
    }
    init
}

/// Restarted CEL0 support estimation. Each restart is initialized from the
/// midpoints of the accumulated support, scaled to the mean nonzero variance
/// of the previous run. Stops when a restart adds no pixel or after
/// `max_restarts` restarts.
pub fn estimate_support_with_restarts(
    model: &ForwardModel,
    cov: &CovarianceData,
    reg: &Regularizer,
    opts: &SolverOptions,
    max_restarts: usize,
) -> Result<SupportResult> {
    if reg.kind != RegularizerKind::Cel0 {
        return Err(Error::UnsupportedRegularizer(reg.kind.name()));
    }
    let problem = SupportProblem::from_covariance(model, cov)?;
    let first = problem.estimate(reg, opts, None)?;
    let mut union = first.support.clone();
    let mut r_max = first.r_x.clone();
    let mut trace = first.trace.clone();
    let mut last = first;
    let mut restarts = 0;

    while restarts < max_restarts {
        let marks = restart_initialization(&union);
        let level = mean_nonzero(&last.r_x);
        if level == 0.0 || marks.iter().all(|&v| v == 0.0) {
            break;
        }
        let run = problem.estimate(reg, opts, Some(&(marks * level)))?;
        restarts += 1;
        trace.extend_from_slice(&run.trace);
        Zip::from(&mut r_max).and(&run.r_x).for_each(|a, &b| *a = a.max(b));
        let grown = union.union(&run.support);
        let added = grown.len() - union.len();
        log::debug!("restart {restarts}: {added} new support pixels");
        last = run;
        union = grown;
        if added == 0 {
            break;
        }
    }

    Ok(SupportResult {
        r_x: r_max,
        support: union,
        s: last.s,
        trace,
        outer_iterations: last.outer_iterations,
        restarts,
        converged: last.converged,
    })
}

fn mean_nonzero(r: &Array2<f64>) -> f64 {
    let (sum, count) = r
        .iter()
        .filter(|&&v| v != 0.0)
        .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

//! Weighted energy errors, loss/error ratios and the gradient-error total variation.

use crate::assembly::{map_chunks, FieldValues};
use crate::error::{FoslsError, Result};
use crate::fields::{ExactSolution, ProblemSpec};
use crate::network::SpanningBatch;
use crate::quadrature::QuadratureRule;
use crate::training::DiscreteSolution;
use serde::{Deserialize, Serialize};

/// Lower and upper bound of `sqrt(L) / |||e|||`.
pub const RATIO_BOUNDS: (f64, f64) = (0.353_553_390_593_273_8, std::f64::consts::SQRT_2);

/// Raw quadrature sums behind an [`ErrorReport`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSums {
    /// `∫ κ |∇(u - u*)|²`
    pub err_grad_kappa: f64,
    /// `∫ κ⁻¹ |q - q*|²`
    pub err_flux_kappa: f64,
    /// `∫ (div q - div q*)²`
    pub err_div: f64,
    pub norm_grad_kappa: f64,
    pub norm_flux_kappa: f64,
    pub norm_div: f64,
    /// `∫ |κ^{-1/2} q + κ^{1/2} ∇u|²`
    pub first_residual: f64,
    /// `∫ (div q - f)²`
    pub second_residual: f64,
    /// `∫ |∇(u - u*)|²`
    pub err_grad: f64,
    /// `∫ |q - q*|²`
    pub err_flux: f64,
}

impl ErrorSums {
    fn add(&mut self, o: &ErrorSums) {
        self.err_grad_kappa += o.err_grad_kappa;
        self.err_flux_kappa += o.err_flux_kappa;
        self.err_div += o.err_div;
        self.norm_grad_kappa += o.norm_grad_kappa;
        self.norm_flux_kappa += o.norm_flux_kappa;
        self.norm_div += o.norm_div;
        self.first_residual += o.first_residual;
        self.second_residual += o.second_residual;
        self.err_grad += o.err_grad;
        self.err_flux += o.err_flux;
    }

    /// `|||e|||²` with Poincaré weight `c`.
    pub fn energy_error_sq(&self, c: f64) -> f64 {
        self.err_grad_kappa + self.err_flux_kappa + c * c * self.err_div
    }

    pub fn loss(&self, c: f64) -> f64 {
        self.first_residual + 2.0 * c * c * self.second_residual
    }

    /// Loss with unit weight on the divergence residual.
    pub fn unweighted_loss(&self) -> f64 {
        self.first_residual + self.second_residual
    }

    /// `‖∇e_u‖² + ‖e_q‖² + ‖div e_q‖²`.
    pub fn unweighted_error_sq(&self) -> f64 {
        self.err_grad + self.err_flux + self.err_div
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rel_u: f64,
    pub rel_q: f64,
    pub rel_total: f64,
    pub loss_fine: f64,
    /// `sqrt(loss_fine) / |||e|||`; `None` when the error vanishes
    pub ratio: Option<f64>,
    /// same ratio for the unweighted loss against the unweighted norm
    pub ratio_unweighted: Option<f64>,
    pub poincare: f64,
    pub sums: ErrorSums,
}

impl ErrorReport {
    pub fn from_sums(sums: ErrorSums, poincare: f64) -> Result<Self> {
        let c2 = poincare * poincare;
        let norm_u = sums.norm_grad_kappa;
        let norm_q = sums.norm_flux_kappa + c2 * sums.norm_div;
        if !(norm_u > 0.0 && norm_q > 0.0) {
            return Err(FoslsError::InvalidArgument("exact solution has zero norm".into()));
        }
        let err_u = sums.err_grad_kappa;
        let err_q = sums.err_flux_kappa + c2 * sums.err_div;
        let loss = sums.loss(poincare);
        let err = err_u + err_q;
        let nr_err = sums.unweighted_error_sq();
        Ok(Self {
            rel_u: (err_u / norm_u).sqrt(),
            rel_q: (err_q / norm_q).sqrt(),
            rel_total: (err / (norm_u + norm_q)).sqrt(),
            loss_fine: loss,
            ratio: (err > 0.0).then(|| (loss / err).sqrt()),
            ratio_unweighted: (nr_err > 0.0).then(|| (sums.unweighted_loss() / nr_err).sqrt()),
            poincare,
            sums,
        })
    }
}

fn sums_on_batch(
    fields: &FieldValues,
    points: &[f64],
    weights: &[f64],
    problem: &ProblemSpec,
    exact: &ExactSolution,
) -> ErrorSums {
    let d = problem.dim();
    let mut s = ErrorSums::default();
    for p in 0..weights.len() {
        let x = &points[p * d..(p + 1) * d];
        let w = weights[p];
        let kappa = problem.kappa.eval(x);
        let f = (problem.source)(x);
        let gu = (exact.grad_u)(x);
        let qs = (exact.q)(x);
        let dq = (exact.div_q)(x);
        let (sk, isk) = (kappa.sqrt(), 1.0 / kappa.sqrt());
        let mut r1 = 0.0;
        for k in 0..d {
            let eg = fields.grad_u[k][p] - gu[k];
            let eq = fields.q[k][p] - qs[k];
            s.err_grad_kappa += w * kappa * eg * eg;
            s.err_flux_kappa += w * eq * eq / kappa;
            s.err_grad += w * eg * eg;
            s.err_flux += w * eq * eq;
            s.norm_grad_kappa += w * kappa * gu[k] * gu[k];
            s.norm_flux_kappa += w * qs[k] * qs[k] / kappa;
            let r = isk * fields.q[k][p] + sk * fields.grad_u[k][p];
            r1 += r * r;
        }
        let ed = fields.div_q[p] - dq;
        s.err_div += w * ed * ed;
        s.norm_div += w * dq * dq;
        s.first_residual += w * r1;
        let r2 = fields.div_q[p] - f;
        s.second_residual += w * r2 * r2;
    }
    s
}

/// Error sums of a discrete solution against the exact pair on a (fine) rule.
pub fn error_sums(sol: &DiscreteSolution, problem: &ProblemSpec, rule: &QuadratureRule) -> Result<ErrorSums> {
    let exact = problem
        .exact
        .as_ref()
        .ok_or_else(|| FoslsError::InvalidArgument(format!("problem '{}' has no exact solution", problem.id)))?;
    let parts = map_chunks(rule, |points, weights| {
        let batch = SpanningBatch::evaluate(&sol.net, &problem.lifting, points);
        let fields = FieldValues::from_batch(&batch, &sol.coefficients);
        sums_on_batch(&fields, points, weights, problem, exact)
    });
    let mut total = ErrorSums::default();
    for p in &parts {
        total.add(p);
    }
    Ok(total)
}

/// Relative errors in the weighted norms, loss and loss/error ratio, all on `rule`.
pub fn energy_errors(
    sol: &DiscreteSolution,
    problem: &ProblemSpec,
    poincare: f64,
    rule: &QuadratureRule,
) -> Result<ErrorReport> {
    ErrorReport::from_sums(error_sums(sol, problem, rule)?, poincare)
}

/// `sqrt(loss)/|||e|||`, `None` for a vanishing error.
pub fn robustness_ratio(report: &ErrorReport) -> Option<f64> {
    report.ratio
}

/// Total variation of a gradient error on `[a, b]`, sampled at `nodes` half-step-offset points.
pub fn tv_of_gradient_error<F>(gradient_error: F, window: (f64, f64), nodes: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let xs = tv_grid(window, nodes)?;
    let mut tv = 0.0;
    let mut prev = gradient_error(xs[0]);
    for &x in &xs[1..] {
        let e = gradient_error(x);
        tv += (e - prev).abs();
        prev = e;
    }
    Ok(tv)
}

fn tv_grid(window: (f64, f64), nodes: usize) -> Result<Vec<f64>> {
    let (a, b) = window;
    if !(a < b) || nodes < 2 {
        return Err(FoslsError::InvalidArgument(format!("bad TV window [{a}, {b}] with {nodes} nodes")));
    }
    let h = (b - a) / nodes as f64;
    Ok((0..nodes).map(|i| a + (i as f64 + 0.5) * h).collect())
}

/// `(x, (u* - u)'(x))` on the TV grid of a 1D solution.
pub fn gradient_error_profile(
    sol: &DiscreteSolution,
    problem: &ProblemSpec,
    window: (f64, f64),
    nodes: usize,
) -> Result<Vec<(f64, f64)>> {
    if problem.dim() != 1 {
        return Err(FoslsError::InvalidArgument("gradient-error profiles are one-dimensional".into()));
    }
    let (lo, hi) = (problem.domain.lower()[0], problem.domain.upper()[0]);
    if window.0 < lo || window.1 > hi {
        return Err(FoslsError::InvalidArgument(format!(
            "window [{}, {}] leaves the domain [{lo}, {hi}]",
            window.0, window.1
        )));
    }
    let exact = problem
        .exact
        .as_ref()
        .ok_or_else(|| FoslsError::InvalidArgument(format!("problem '{}' has no exact solution", problem.id)))?;
    let xs = tv_grid(window, nodes)?;
    let fields = sol.evaluate(&problem.lifting, &xs);
    Ok(xs
        .iter()
        .enumerate()
        .map(|(i, &x)| (x, (exact.grad_u)(&[x])[0] - fields.grad_u[0][i]))
        .collect())
}

/// Total variation of `(u* - u_NN)'` over `window`.
pub fn tv_gradient_error(
    sol: &DiscreteSolution,
    problem: &ProblemSpec,
    window: (f64, f64),
    nodes: usize,
) -> Result<f64> {
    let profile = gradient_error_profile(sol, problem, window, nodes)?;
    Ok(profile.windows(2).map(|w| (w[1].1 - w[0].1).abs()).sum())
}

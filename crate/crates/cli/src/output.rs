//! CSV and JSON writers for run directories.

use crate::error::{io_err, CliError};
use fosls::assembly::Coefficients;
use fosls::fields::ProblemSpec;
use fosls::poincare::PoincareEstimate;
use fosls::training::DiscreteSolution;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

pub const POINCARE_HEADER: &str = "iteration,lambda_min,value,running_max,alpha_sensitivity";
pub const VARIANCE_HEADER: &str = "iteration,loss_fine,max_variance,max_bound,max_ratio,max_c_grad";
pub const SAMPLES_HEADER_1D: &str = "x,u,du_dx,q_x,div_q";
pub const SAMPLES_HEADER_2D: &str = "x,y,u,du_dx,du_dy,q_x,q_y,div_q";
pub const FIELDS_HEADER_2D: &str = "x,y,u,grad_u_norm,q_x,q_y,err_grad_u_kappa,err_q_kappa";
pub const ROBUSTNESS_HEADER: &str = "iteration,kappa0,ratio,ratio_nonrobust,lower,upper";
pub const POINCARE_SWEEP_HEADER: &str = "kappa0,estimate,last_value,reference,rel_error,ill_conditioned";
pub const PROFILE_HEADER: &str = "x,gradient_error,jump_reference";
pub const TV_HEADER: &str = "variant,tv,jump_reference";

pub fn write(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, content).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    write(path, &(text + "\n"))
}

pub fn poincare_csv(log: &[PoincareEstimate]) -> String {
    let mut s = String::from(POINCARE_HEADER);
    s.push('\n');
    for e in log {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e}",
            e.iteration, e.lambda_min, e.value, e.running_max, e.alpha_sensitivity
        );
    }
    s
}

/// Nodes `lo, ..., hi` with `n` points.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn grid(problem: &ProblemSpec, nodes: usize) -> Vec<f64> {
    let (lo, hi) = (problem.domain.lower(), problem.domain.upper());
    match problem.dim() {
        1 => linspace(lo[0], hi[0], nodes),
        _ => {
            let xs = linspace(lo[0], hi[0], nodes);
            let ys = linspace(lo[1], hi[1], nodes);
            ys.iter().flat_map(|&y| xs.iter().flat_map(move |&x| [x, y])).collect()
        }
    }
}

/// `u, ∇u, q, div q` on a uniform grid including the boundary.
pub fn samples_csv(sol: &DiscreteSolution, problem: &ProblemSpec, nodes: usize) -> String {
    let d = problem.dim();
    let points = grid(problem, nodes);
    let f = sol.evaluate(&problem.lifting, &points);
    let mut s = String::from(if d == 1 { SAMPLES_HEADER_1D } else { SAMPLES_HEADER_2D });
    s.push('\n');
    for p in 0..points.len() / d {
        let x = &points[p * d..(p + 1) * d];
        let mut cols: Vec<f64> = x.to_vec();
        cols.push(f.u[p]);
        cols.extend((0..d).map(|k| f.grad_u[k][p]));
        cols.extend((0..d).map(|k| f.q[k][p]));
        cols.push(f.div_q[p]);
        let row: Vec<String> = cols.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// 2D field dump with pointwise weighted errors `κ^{1/2}|∇(u-u*)|` and `κ^{-1/2}|q-q*|` (empty without an exact solution).
pub fn fields_2d_csv(sol: &DiscreteSolution, problem: &ProblemSpec, nodes: usize) -> String {
    let points = grid(problem, nodes);
    let f = sol.evaluate(&problem.lifting, &points);
    let mut s = String::from(FIELDS_HEADER_2D);
    s.push('\n');
    for p in 0..points.len() / 2 {
        let x = &points[2 * p..2 * p + 2];
        let g = [f.grad_u[0][p], f.grad_u[1][p]];
        let q = [f.q[0][p], f.q[1][p]];
        let (eu, eq) = match &problem.exact {
            Some(exact) => {
                let k = problem.kappa.eval(x);
                let (gs, qs) = ((exact.grad_u)(x), (exact.q)(x));
                let eu = (k * ((g[0] - gs[0]).powi(2) + (g[1] - gs[1]).powi(2))).sqrt();
                let eq = (((q[0] - qs[0]).powi(2) + (q[1] - qs[1]).powi(2)) / k).sqrt();
                (format!("{eu:e}"), format!("{eq:e}"))
            }
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            s,
            "{:e},{:e},{:e},{:e},{:e},{:e},{eu},{eq}",
            x[0],
            x[1],
            f.u[p],
            g[0].hypot(g[1]),
            q[0],
            q[1]
        );
    }
    s
}

#[derive(Debug, Serialize)]
pub struct Checkpoint<'a> {
    pub iteration: usize,
    pub config_hash: &'a str,
    pub network: serde_json::Value,
    pub c_u: Vec<f64>,
    /// flux coefficients, axis-major
    pub c_q: Vec<f64>,
    pub poincare: f64,
}

impl<'a> Checkpoint<'a> {
    pub fn new(
        iteration: usize,
        config_hash: &'a str,
        net: &fosls::network::Network,
        c: &Coefficients,
        poincare: f64,
    ) -> Result<Self, CliError> {
        let text = net.to_json()?;
        Ok(Self {
            iteration,
            config_hash,
            network: serde_json::from_str(&text).map_err(|e| CliError::Numerical(e.to_string()))?,
            c_u: c.c_u.iter().copied().collect(),
            c_q: c.c_q.iter().copied().collect(),
            poincare,
        })
    }
}

pub const OUTPUT_README: &str = "\
# Output files

All CSV files have a header row; numbers use Rust's `{:e}` formatting.
Empty cells mean the quantity was not evaluated at that row.

- `history.csv`: iteration, train_loss, val_loss, err_u_H1k, err_q_Hdivk, err_total, lr, poincare, grad_norm, wall_ms.
  Errors are relative weighted errors on the fine rule, logged every `log_every` iterations.
- `poincare_updates.csv`: iteration, lambda_min, value, running_max, alpha_sensitivity.
- `variance.csv`: iteration, loss_fine, max_variance, max_bound, max_ratio, max_c_grad (only with a variance probe).
- `samples.csv`: x, u, du_dx, q_x, div_q in 1D; x, y, u, du_dx, du_dy, q_x, q_y, div_q in 2D.
- `fields.csv` (2D): x, y, u, grad_u_norm, q_x, q_y, err_grad_u_kappa, err_q_kappa.
- `robustness.csv` (sweep): iteration, kappa0, ratio, ratio_nonrobust, lower, upper.
- `poincare.csv` (sweep): kappa0, estimate, last_value, reference, rel_error, ill_conditioned.
- `tv.csv` (gibbs study): variant, tv, jump_reference.
- `gradient_error_<variant>.csv` (gibbs study): x, gradient_error, jump_reference.
- `traj_<loss>_<points>.csv` (variance study): same columns as `history.csv`.

JSON files: `report.json` (final errors and ratios), `stability.json` (variance study),
`poincare_check.json`, and `checkpoints/*.json` (network, coefficients, config hash).
";

//! Outer optimization of the trial spaces: inner least-squares solve, envelope gradient, Adam.

use crate::assembly::{
    map_chunks, scale, scale_matrix, CHUNK_POINTS, solve_ls, solve_scaled, Coefficients, FieldValues, GramParts, EPSILON_DEFAULT,
    MU_DEFAULT,
};
use crate::error::{FoslsError, Result};
use crate::fields::{Lifting, ProblemSpec};
use crate::geometry::{partition_uniform, Partition};
use crate::metrics::{error_sums, ErrorReport};
use crate::network::{
    backprop_parameter_gradient, Network, ParameterGradient, SpanningBatch, SpanningCotangents, SpanningSample,
};
use crate::poincare::{estimate_poincare_checked, PoincareEstimate, ALPHA1_DEFAULT, ALPHA2_DEFAULT};
use crate::quadrature::{derive_seed, sample_mc, sample_p1, trapezoid_rule, QuadratureRule};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Seed tags of the derived streams.
pub const TAG_TRAIN: u64 = 1;
pub const TAG_PROBE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Fosls,
    DeepRitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decay {
    None,
    /// multiply by `factor` every iteration from `start` on
    Exponential { factor: f64, start: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadSpec {
    /// two reflected points per cell
    P1 { cells: Vec<usize> },
    MonteCarlo { points: usize },
}

impl QuadSpec {
    pub fn n_points(&self) -> usize {
        match self {
            QuadSpec::P1 { cells } => 2 * cells.iter().product::<usize>(),
            QuadSpec::MonteCarlo { points } => *points,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoincareMode {
    /// discrete eigenvalue estimate with a running maximum
    Estimate,
    /// the problem's reference constant
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub decay: Decay,
    pub adam: AdamParams,
    pub mu: f64,
    pub epsilon: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub poincare_period: usize,
    pub poincare_mode: PoincareMode,
    pub quadrature: QuadSpec,
    pub loss: LossKind,
    /// validation and error evaluation every `log_every` iterations; 0 disables it
    pub log_every: usize,
    pub fine_nodes: Vec<usize>,
    pub base_seed: u64,
    /// terminal solve on the fine rule instead of a fresh sample
    pub terminal_on_fine: bool,
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(quadrature: QuadSpec, fine_nodes: Vec<usize>) -> Self {
        Self {
            iterations: 0,
            learning_rate: 1e-4,
            decay: Decay::None,
            adam: AdamParams::default(),
            mu: MU_DEFAULT,
            epsilon: EPSILON_DEFAULT,
            alpha1: ALPHA1_DEFAULT,
            alpha2: ALPHA2_DEFAULT,
            poincare_period: 100,
            poincare_mode: PoincareMode::Estimate,
            quadrature,
            loss: LossKind::Fosls,
            log_every: 0,
            fine_nodes,
            base_seed: 0,
            terminal_on_fine: false,
            record_wall_time: false,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(FoslsError::Configuration(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.adam.beta1 > 0.0 && self.adam.beta1 < 1.0 && self.adam.beta2 > 0.0 && self.adam.beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)".into());
        }
        if !(self.adam.eps > 0.0 && self.mu > 0.0 && self.epsilon > 0.0 && self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return bad("mu, epsilon, alpha1, alpha2 and the Adam epsilon must be positive".into());
        }
        if let Decay::Exponential { factor, .. } = self.decay {
            if !(factor > 0.0 && factor <= 1.0) {
                return bad(format!("decay factor must lie in (0, 1], got {factor}"));
            }
        }
        if self.poincare_period == 0 {
            return bad("Poincaré update period must be positive".into());
        }
        match &self.quadrature {
            QuadSpec::P1 { cells } if cells.len() != dim || cells.contains(&0) => {
                return bad(format!("P1 rule needs {dim} positive cell counts, got {cells:?}"))
            }
            QuadSpec::MonteCarlo { points: 0 } => return bad("Monte Carlo rule needs at least one point".into()),
            _ => {}
        }
        if self.fine_nodes.len() != dim || self.fine_nodes.iter().any(|&n| n < 2) {
            return bad(format!("fine rule needs {dim} node counts >= 2, got {:?}", self.fine_nodes));
        }
        Ok(())
    }

    /// Learning rate used at iteration `i`.
    pub fn learning_rate_at(&self, i: usize) -> f64 {
        match self.decay {
            Decay::None => self.learning_rate,
            Decay::Exponential { factor, start } => {
                if i < start {
                    self.learning_rate
                } else {
                    self.learning_rate * factor.powi((i - start + 1) as i32)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, p: &AdamParams) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - p.beta1.powi(t);
    let c2 = 1.0 - p.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = p.beta1 * state.m[i] + (1.0 - p.beta1) * g;
        state.v[i] = p.beta2 * state.v[i] + (1.0 - p.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + p.eps);
    }
}

/// Network plus coefficients: `u = Σ c_u φ`, `q = Σ c_q τ`.
#[derive(Debug, Clone)]
pub struct DiscreteSolution {
    pub net: Network,
    pub coefficients: Coefficients,
    pub poincare: f64,
    pub problem_id: String,
}

impl DiscreteSolution {
    pub fn evaluate(&self, lifting: &Lifting, points: &[f64]) -> FieldValues {
        let d = self.net.input_dim();
        let rule_like = QuadratureRule::from_parts(
            d,
            points.to_vec(),
            vec![1.0; points.len() / d],
            crate::quadrature::RuleKind::TensorTrapezoid,
        )
        .expect("point list with positive unit weights");
        let parts = map_chunks(&rule_like, |pts, _| {
            let batch = SpanningBatch::evaluate(&self.net, lifting, pts);
            FieldValues::from_batch(&batch, &self.coefficients)
        });
        concat_fields(parts, d)
    }
}

fn concat_fields(parts: Vec<FieldValues>, d: usize) -> FieldValues {
    let cat = |get: &dyn Fn(&FieldValues) -> &DVector<f64>| {
        DVector::from_iterator(
            parts.iter().map(|p| get(p).len()).sum(),
            parts.iter().flat_map(|p| get(p).iter().copied()),
        )
    };
    FieldValues {
        u: cat(&|p| &p.u),
        grad_u: (0..d).map(|k| cat(&|p| &p.grad_u[k])).collect(),
        q: (0..d).map(|k| cat(&|p| &p.q[k])).collect(),
        div_q: cat(&|p| &p.div_q),
    }
}

/// Integrand of the weighted loss at one point.
pub fn fosls_loss_pointwise(sample: &SpanningSample, c: &Coefficients, kappa: f64, f: f64, poincare: f64) -> f64 {
    let n = sample.phi.len();
    let d = sample.grad_phi.ncols();
    let (sk, isk) = (kappa.sqrt(), 1.0 / kappa.sqrt());
    let mut r1 = 0.0;
    let mut div = 0.0;
    for k in 0..d {
        let mut q = 0.0;
        let mut gu = 0.0;
        for j in 0..n {
            q += c.q(j, k) * sample.tau_component_values[j];
            gu += c.c_u[j] * sample.grad_phi[(j, k)];
            div += c.q(j, k) * sample.div_tau[(j, k)];
        }
        let r = isk * q + sk * gu;
        r1 += r * r;
    }
    let r2 = div - f;
    r1 + 2.0 * poincare * poincare * r2 * r2
}

/// Per-point residual channels `R_k = κ^{-1/2} q_k + κ^{1/2} ∂_k u` and `R_d = √2 C (div q - f)`.
pub fn residual_channels(fields: &FieldValues, kappa: &[f64], f: &[f64], poincare: f64) -> Vec<DVector<f64>> {
    let d = fields.q.len();
    let n_pts = kappa.len();
    let mut out: Vec<DVector<f64>> = (0..d)
        .map(|k| DVector::from_fn(n_pts, |p, _| fields.q[k][p] / kappa[p].sqrt() + kappa[p].sqrt() * fields.grad_u[k][p]))
        .collect();
    let s = std::f64::consts::SQRT_2 * poincare;
    out.push(DVector::from_fn(n_pts, |p, _| s * (fields.div_q[p] - f[p])));
    out
}

/// Cotangents of `Σ_p Σ_ch a_ch[p] R_ch(x_p)` with respect to the spanning fields.
pub fn residual_cotangents(
    batch: &SpanningBatch,
    c: &Coefficients,
    kappa: &[f64],
    poincare: f64,
    a: &[DVector<f64>],
) -> SpanningCotangents {
    let n = batch.width();
    let d = batch.dim();
    let n_pts = batch.len();
    let mut cot = SpanningCotangents::zeros(n, d, n_pts);
    let s = std::f64::consts::SQRT_2 * poincare;
    for p in 0..n_pts {
        let (sk, isk) = (kappa[p].sqrt(), 1.0 / kappa[p].sqrt());
        let a_div = a[d][p] * s;
        for k in 0..d {
            let ak = a[k][p];
            for j in 0..n {
                let cq = c.q(j, k);
                cot.grad_phi[k][(j, p)] = ak * sk * c.c_u[j];
                cot.tau[(j, p)] += ak * isk * cq;
                cot.div_tau[k][(j, p)] = a_div * cq;
            }
        }
    }
    cot
}

fn point_data(problem: &ProblemSpec, points: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = problem.dim();
    let n = points.len() / d;
    let kappa = (0..n).map(|p| problem.kappa.eval(&points[p * d..(p + 1) * d])).collect();
    let f = (0..n).map(|p| (problem.source)(&points[p * d..(p + 1) * d])).collect();
    (kappa, f)
}

/// Loss and envelope gradient on one evaluated batch, coefficients frozen.
fn fosls_batch(
    net: &Network,
    batch: &SpanningBatch,
    weights: &[f64],
    kappa: &[f64],
    f: &[f64],
    c: &Coefficients,
    poincare: f64,
    with_gradient: bool,
) -> Result<(f64, Option<ParameterGradient>)> {
    let fields = FieldValues::from_batch(batch, c);
    let r = residual_channels(&fields, kappa, f, poincare);
    let loss: f64 = (0..weights.len())
        .map(|p| weights[p] * r.iter().map(|ch| ch[p] * ch[p]).sum::<f64>())
        .sum();
    if !with_gradient {
        return Ok((loss, None));
    }
    let a: Vec<DVector<f64>> = r
        .iter()
        .map(|ch| DVector::from_fn(ch.len(), |p, _| 2.0 * weights[p] * ch[p]))
        .collect();
    let cot = residual_cotangents(batch, c, kappa, poincare, &a);
    Ok((loss, Some(backprop_parameter_gradient(net, batch, &cot)?)))
}

/// Ritz energy and its gradient on one batch, scalar coefficients frozen.
fn ritz_batch(
    net: &Network,
    batch: &SpanningBatch,
    weights: &[f64],
    kappa: &[f64],
    f: &[f64],
    c: &Coefficients,
    with_gradient: bool,
) -> Result<(f64, Option<ParameterGradient>)> {
    let fields = FieldValues::from_batch(batch, c);
    let d = batch.dim();
    let n = batch.width();
    let mut energy = 0.0;
    for p in 0..weights.len() {
        let g2: f64 = (0..d).map(|k| fields.grad_u[k][p] * fields.grad_u[k][p]).sum();
        energy += weights[p] * (0.5 * kappa[p] * g2 - f[p] * fields.u[p]);
    }
    if !with_gradient {
        return Ok((energy, None));
    }
    let mut cot = SpanningCotangents::zeros(n, d, weights.len());
    for p in 0..weights.len() {
        for j in 0..n {
            cot.phi[(j, p)] = -weights[p] * f[p] * c.c_u[j];
            for k in 0..d {
                cot.grad_phi[k][(j, p)] = weights[p] * kappa[p] * fields.grad_u[k][p] * c.c_u[j];
            }
        }
    }
    Ok((energy, Some(backprop_parameter_gradient(net, batch, &cot)?)))
}

fn over_rule<F>(net: &Network, problem: &ProblemSpec, rule: &QuadratureRule, with_gradient: bool, eval: F) -> Result<(f64, Option<ParameterGradient>)>
where
    F: Fn(&SpanningBatch, &[f64], &[f64], &[f64]) -> Result<(f64, Option<ParameterGradient>)> + Sync,
{
    let parts = map_chunks(rule, |points, weights| {
        let batch = SpanningBatch::evaluate(net, &problem.lifting, points);
        let (kappa, f) = point_data(problem, points);
        eval(&batch, weights, &kappa, &f)
    });
    let mut total = 0.0;
    let mut grad = with_gradient.then(|| ParameterGradient::zeros_like(net));
    for part in parts {
        let (l, g) = part?;
        total += l;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.add_assign(&g);
        }
    }
    Ok((total, grad))
}

/// Quadrature value of the weighted loss at frozen coefficients, summed pointwise.
pub fn fosls_loss(net: &Network, problem: &ProblemSpec, rule: &QuadratureRule, c: &Coefficients, poincare: f64) -> Result<f64> {
    Ok(over_rule(net, problem, rule, false, |b, w, k, f| fosls_batch(net, b, w, k, f, c, poincare, false))?.0)
}

/// Gradient in θ of the quadrature loss with coefficients and Poincaré weight frozen.
pub fn envelope_gradient(
    net: &Network,
    problem: &ProblemSpec,
    rule: &QuadratureRule,
    c: &Coefficients,
    poincare: f64,
) -> Result<ParameterGradient> {
    let (_, g) = over_rule(net, problem, rule, true, |b, w, k, f| fosls_batch(net, b, w, k, f, c, poincare, true))?;
    Ok(g.expect("gradient requested"))
}

/// Quadrature value of `∫ ½κ|∇u|² − f u`.
pub fn deep_ritz_loss(net: &Network, problem: &ProblemSpec, rule: &QuadratureRule, c: &Coefficients) -> Result<f64> {
    Ok(over_rule(net, problem, rule, false, |b, w, k, f| ritz_batch(net, b, w, k, f, c, false))?.0)
}

pub fn deep_ritz_gradient(net: &Network, problem: &ProblemSpec, rule: &QuadratureRule, c: &Coefficients) -> Result<ParameterGradient> {
    let (_, g) = over_rule(net, problem, rule, true, |b, w, k, f| ritz_batch(net, b, w, k, f, c, true))?;
    Ok(g.expect("gradient requested"))
}

/// Least-squares coefficients for the weighted loss.
pub fn solve_fosls(parts: &GramParts, poincare: f64, epsilon: f64, mu: f64) -> Result<Coefficients> {
    let system = parts.finish(poincare);
    let scaled = scale(&system, epsilon)?;
    solve_ls(&system, &scaled, mu)
}

/// Ritz minimizer over the scalar space: `(H̃_uu + μ) c̃ = F̃`, flux coefficients zero.
pub fn solve_ritz(parts: &GramParts, epsilon: f64, mu: f64) -> Result<Coefficients> {
    let scaled = scale_matrix(&parts.h_uu, &parts.f_phi, epsilon);
    let c_u = solve_scaled(&scaled, mu)?;
    Ok(Coefficients {
        c_u,
        c_q: DVector::zeros(parts.n * parts.dim),
    })
}

/// Discrete Poincaré estimate from assembled sums that include the mass matrix.
pub fn poincare_from_parts(parts: &GramParts, config: &TrainConfig) -> Result<PoincareEstimate> {
    let mass = parts
        .mass
        .as_ref()
        .ok_or_else(|| FoslsError::InvalidArgument("mass matrix was not assembled".into()))?;
    let d_u = DVector::from_fn(parts.n, |i, _| (parts.h_uu[(i, i)] + config.epsilon).sqrt());
    estimate_poincare_checked(&parts.h_uu, mass, &d_u, config.alpha1, config.alpha2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub err_u: Option<f64>,
    pub err_q: Option<f64>,
    pub err_total: Option<f64>,
    pub lr: f64,
    pub poincare: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
    #[serde(skip)]
    pub report: Option<ErrorReport>,
}

pub const HISTORY_HEADER: &str = "iteration,train_loss,val_loss,err_u_H1k,err_q_Hdivk,err_total,lr,poincare,grad_norm,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl HistoryRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{},{},{},{:e},{:e},{:e},{}",
            self.iteration,
            self.train_loss,
            opt(self.val_loss),
            opt(self.err_u),
            opt(self.err_q),
            opt(self.err_total),
            self.lr,
            self.poincare,
            self.grad_norm,
            self.wall_ms
        )
    }
}

pub fn history_csv(history: &[HistoryRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Network,
    pub adam: AdamState,
    pub iteration: usize,
    pub poincare: PoincareEstimate,
    pub coefficients: Option<Coefficients>,
}

/// Stepwise driver of the training loop.
pub struct Trainer<'a> {
    problem: &'a ProblemSpec,
    config: TrainConfig,
    partition: Option<Partition>,
    fine: Option<QuadratureRule>,
    pub state: TrainState,
    pub history: Vec<HistoryRecord>,
    pub poincare_log: Vec<PoincareEstimate>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(problem: &'a ProblemSpec, net: Network, config: TrainConfig) -> Result<Self> {
        config.validate(problem.dim())?;
        if net.input_dim() != problem.dim() {
            return Err(FoslsError::Configuration(format!(
                "network input dimension {} does not match the {}D problem",
                net.input_dim(),
                problem.dim()
            )));
        }
        let partition = match &config.quadrature {
            QuadSpec::P1 { cells } => Some(partition_uniform(&problem.domain, cells)?),
            QuadSpec::MonteCarlo { .. } => None,
        };
        let poincare = match config.poincare_mode {
            PoincareMode::Reference => PoincareEstimate::fixed(problem.poincare_reference.ok_or_else(|| {
                FoslsError::Configuration(format!("problem '{}' has no reference Poincaré constant", problem.id))
            })?),
            PoincareMode::Estimate => PoincareEstimate::fixed(f64::NAN),
        };
        let n_params = net.param_count();
        Ok(Self {
            problem,
            config,
            partition,
            fine: None,
            state: TrainState {
                net,
                adam: AdamState::new(n_params),
                iteration: 0,
                poincare,
                coefficients: None,
            },
            history: Vec::new(),
            poincare_log: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn problem(&self) -> &ProblemSpec {
        self.problem
    }

    /// The deterministic fine rule, built on first use.
    pub fn fine_rule(&mut self) -> Result<&QuadratureRule> {
        if self.fine.is_none() {
            self.fine = Some(trapezoid_rule(&self.problem.domain, &self.config.fine_nodes)?);
        }
        Ok(self.fine.as_ref().unwrap())
    }

    pub fn sample_rule(&self, seed: u64) -> Result<QuadratureRule> {
        match (&self.config.quadrature, &self.partition) {
            (QuadSpec::P1 { .. }, Some(p)) => Ok(sample_p1(p, seed)),
            (QuadSpec::MonteCarlo { points }, _) => sample_mc(&self.problem.domain, *points, seed),
            _ => unreachable!("partition exists for P1 rules"),
        }
    }

    /// Current Poincaré weight used by loss and norm.
    pub fn poincare(&self) -> f64 {
        self.state.poincare.running_max
    }

    fn update_poincare(&mut self, parts: &GramParts, iteration: usize) -> Result<()> {
        let fresh = poincare_from_parts(parts, &self.config)?;
        self.state.poincare = if self.state.poincare.running_max.is_nan() {
            PoincareEstimate { iteration, ..fresh }
        } else {
            self.state.poincare.updated(fresh, iteration)
        };
        self.poincare_log.push(self.state.poincare);
        Ok(())
    }

    fn solve(&self, parts: &GramParts) -> Result<Coefficients> {
        match self.config.loss {
            LossKind::Fosls => solve_fosls(parts, self.poincare(), self.config.epsilon, self.config.mu),
            LossKind::DeepRitz => solve_ritz(parts, self.config.epsilon, self.config.mu),
        }
    }

    /// One outer iteration: sample, (maybe) update C, solve, log, Adam step.
    pub fn step(&mut self) -> Result<()> {
        let i = self.state.iteration;
        let seed = derive_seed(self.config.base_seed, TAG_TRAIN, i as u64);
        let rule = self.sample_rule(seed)?;
        let update = self.config.poincare_mode == PoincareMode::Estimate && i % self.config.poincare_period == 0;
        let abort = |_: FoslsError| FoslsError::NonFiniteLoss { iteration: i, seed };
        let (parts, batches) =
            GramParts::from_rule_keeping(&self.state.net, self.problem, &rule, update, true).map_err(abort)?;
        if update {
            self.update_poincare(&parts, i).map_err(abort)?;
        }
        let c = self.solve(&parts).map_err(abort)?;
        let net = &self.state.net;
        let problem = self.problem;
        let (loss_kind, poincare) = (self.config.loss, self.poincare());
        let d = rule.dim();
        let pieces: Vec<Result<(f64, Option<ParameterGradient>)>> = batches
            .par_iter()
            .enumerate()
            .map(|(chunk, batch)| {
                let start = chunk * CHUNK_POINTS;
                let end = start + batch.len();
                let (kappa, f) = point_data(problem, &rule.points()[start * d..end * d]);
                let weights = &rule.weights()[start..end];
                match loss_kind {
                    LossKind::Fosls => fosls_batch(net, batch, weights, &kappa, &f, &c, poincare, true),
                    LossKind::DeepRitz => ritz_batch(net, batch, weights, &kappa, &f, &c, true),
                }
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = Some(ParameterGradient::zeros_like(net));
        for piece in pieces {
            let (l, g) = piece.map_err(abort)?;
            loss += l;
            if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                acc.add_assign(&g);
            }
        }
        let grad = grad.expect("gradient requested");
        if !loss.is_finite() || !grad.is_finite() {
            return Err(FoslsError::NonFiniteLoss { iteration: i, seed });
        }
        let lr = self.config.learning_rate_at(i);
        let mut record = HistoryRecord {
            iteration: i,
            train_loss: loss,
            val_loss: None,
            err_u: None,
            err_q: None,
            err_total: None,
            lr,
            poincare: self.poincare(),
            grad_norm: grad.norm(),
            wall_ms: 0,
            report: None,
        };
        if self.config.log_every > 0 && i % self.config.log_every == 0 {
            self.validate_into(&mut record, &c)?;
        }
        if self.config.record_wall_time {
            record.wall_ms = self.started.elapsed().as_millis() as u64;
        }
        self.history.push(record);

        let mut theta = self.state.net.params();
        adam_step(&mut theta, &grad.to_flat(), &mut self.state.adam, lr, &self.config.adam);
        self.state.net.set_params(&theta)?;
        self.state.coefficients = Some(c);
        self.state.iteration += 1;
        Ok(())
    }

    fn validate_into(&mut self, record: &mut HistoryRecord, c: &Coefficients) -> Result<()> {
        let sol = DiscreteSolution {
            net: self.state.net.clone(),
            coefficients: c.clone(),
            poincare: self.poincare(),
            problem_id: self.problem.id.clone(),
        };
        let poincare = self.poincare();
        let loss_kind = self.config.loss;
        let problem = self.problem;
        let fine = self.fine_rule()?.clone();
        if problem.exact.is_some() {
            let sums = error_sums(&sol, problem, &fine)?;
            let report = ErrorReport::from_sums(sums, poincare)?;
            record.val_loss = Some(match loss_kind {
                LossKind::Fosls => report.loss_fine,
                LossKind::DeepRitz => deep_ritz_loss(&sol.net, problem, &fine, c)?,
            });
            record.err_u = Some(report.rel_u);
            record.err_q = Some(report.rel_q);
            record.err_total = Some(report.rel_total);
            record.report = Some(report);
        } else {
            record.val_loss = Some(match loss_kind {
                LossKind::Fosls => fosls_loss(&sol.net, problem, &fine, c, poincare)?,
                LossKind::DeepRitz => deep_ritz_loss(&sol.net, problem, &fine, c)?,
            });
        }
        Ok(())
    }

    pub fn run(&mut self, iterations: usize) -> Result<()> {
        for _ in 0..iterations {
            self.step()?;
        }
        Ok(())
    }

    /// Coefficients for the current network from a given rule.
    pub fn solve_on(&mut self, rule: &QuadratureRule) -> Result<Coefficients> {
        let needs_estimate = self.state.poincare.running_max.is_nan();
        let parts = GramParts::from_rule(&self.state.net, self.problem, rule, needs_estimate)?;
        if needs_estimate {
            self.update_poincare(&parts, self.state.iteration)?;
        }
        self.solve(&parts)
    }

    /// Terminal least-squares solve in the final space.
    pub fn finish(&mut self) -> Result<DiscreteSolution> {
        let rule = if self.config.terminal_on_fine {
            self.fine_rule()?.clone()
        } else {
            self.sample_rule(derive_seed(self.config.base_seed, TAG_TRAIN, self.state.iteration as u64))?
        };
        let c = self.solve_on(&rule)?;
        Ok(DiscreteSolution {
            net: self.state.net.clone(),
            coefficients: c,
            poincare: self.poincare(),
            problem_id: self.problem.id.clone(),
        })
    }

    /// Error report of a solution on the fine rule, if the problem has an exact solution.
    pub fn report(&mut self, sol: &DiscreteSolution) -> Result<Option<ErrorReport>> {
        if self.problem.exact.is_none() {
            return Ok(None);
        }
        let poincare = sol.poincare;
        let problem = self.problem;
        let fine = self.fine_rule()?.clone();
        Ok(Some(ErrorReport::from_sums(error_sums(sol, problem, &fine)?, poincare)?))
    }

    /// Gradient-variance probe at the current parameters.
    pub fn probe_variance(&mut self, resamples: usize, seed: u64) -> Result<VarianceReport> {
        let fine = self.fine_rule()?.clone();
        let net = self.state.net.clone();
        // before the first update the probe estimates C on the fine rule without storing it
        let poincare = if self.poincare().is_nan() {
            let parts = GramParts::from_rule(&net, self.problem, &fine, true)?;
            poincare_from_parts(&parts, &self.config)?.value
        } else {
            self.poincare()
        };
        let problem = self.problem;
        let config = self.config.clone();
        gradient_variance_probe(&net, problem, &config, poincare, &fine, resamples, seed, |s| self.sample_rule(s))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub solution: DiscreteSolution,
    pub history: Vec<HistoryRecord>,
    pub poincare_log: Vec<PoincareEstimate>,
    pub report: Option<ErrorReport>,
}

/// Runs the configured number of iterations and the terminal solve.
pub fn train(problem: &ProblemSpec, net: Network, config: TrainConfig) -> Result<TrainOutput> {
    let iterations = config.iterations;
    let mut trainer = Trainer::new(problem, net, config)?;
    trainer.run(iterations)?;
    let solution = trainer.finish()?;
    let report = trainer.report(&solution)?;
    Ok(TrainOutput {
        solution,
        history: trainer.history,
        poincare_log: trainer.poincare_log,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub resamples: usize,
    /// `L` on the fine rule at the fine-rule minimizer
    pub loss_fine: f64,
    pub variances: Vec<f64>,
    pub c_grad: Vec<f64>,
    /// `4 C_grad² |Ω| L` per component
    pub bounds: Vec<f64>,
    pub max_variance: f64,
    /// largest `variance / bound`
    pub max_ratio: f64,
}

/// Empirical per-component variance of the stochastic gradient against its a-priori bound.
#[allow(clippy::too_many_arguments)]
pub fn gradient_variance_probe<S>(
    net: &Network,
    problem: &ProblemSpec,
    config: &TrainConfig,
    poincare: f64,
    fine: &QuadratureRule,
    resamples: usize,
    seed: u64,
    sample: S,
) -> Result<VarianceReport>
where
    S: Fn(u64) -> Result<QuadratureRule>,
{
    if resamples < 2 {
        return Err(FoslsError::InvalidArgument("variance probe needs at least two resamples".into()));
    }
    let parts = GramParts::from_rule(net, problem, fine, false)?;
    let c = solve_fosls(&parts, poincare, config.epsilon, config.mu)?;
    let loss_fine = fosls_loss(net, problem, fine, &c, poincare)?;
    let n_params = net.param_count();
    let d = problem.dim();
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(resamples);
    let mut c_grad = vec![0.0f64; n_params];
    for r in 0..resamples {
        let rule = sample(derive_seed(seed, TAG_PROBE, r as u64))?;
        samples.push(envelope_gradient(net, problem, &rule, &c, poincare)?.to_flat());
        // per-point residual derivatives, one channel at a time
        for p in 0..rule.len() {
            let x = rule.point(p);
            let batch = SpanningBatch::evaluate(net, &problem.lifting, x);
            let (kappa, _) = point_data(problem, x);
            let mut sq = vec![0.0; n_params];
            for ch in 0..=d {
                let a: Vec<DVector<f64>> = (0..=d)
                    .map(|j| DVector::from_element(1, if j == ch { 1.0 } else { 0.0 }))
                    .collect();
                let cot = residual_cotangents(&batch, &c, &kappa, poincare, &a);
                let g = backprop_parameter_gradient(net, &batch, &cot)?.to_flat();
                for (s, v) in sq.iter_mut().zip(&g) {
                    *s += v * v;
                }
            }
            for (cg, s) in c_grad.iter_mut().zip(&sq) {
                *cg = cg.max(s.sqrt());
            }
        }
    }
    let m = resamples as f64;
    let mut variances = vec![0.0; n_params];
    for (j, var) in variances.iter_mut().enumerate() {
        let mean = samples.iter().map(|s| s[j]).sum::<f64>() / m;
        *var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (m - 1.0);
    }
    let volume = problem.domain.volume();
    let bounds: Vec<f64> = c_grad.iter().map(|cg| 4.0 * cg * cg * volume * loss_fine).collect();
    let max_variance = variances.iter().copied().fold(0.0, f64::max);
    let max_ratio = variances
        .iter()
        .zip(&bounds)
        .map(|(v, b)| if *b > 0.0 { v / b } else if *v > 0.0 { f64::INFINITY } else { 0.0 })
        .fold(0.0, f64::max);
    Ok(VarianceReport {
        resamples,
        loss_fine,
        variances,
        c_grad,
        bounds,
        max_variance,
        max_ratio,
    })
}

/// Dense normal-equations minimizer of `cᵀHc − 2cᵀf`, used as an independent check of the scaled solve.
pub fn brute_force_minimizer(h: &DMatrix<f64>, f: &DVector<f64>) -> Option<DVector<f64>> {
    h.clone().lu().solve(f)
}

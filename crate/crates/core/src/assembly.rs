//! Block Gram system of the weighted least-squares functional, scaling and the Tikhonov solve.
//!
//! Coefficient layout: the `n` scalar coefficients first, then the flux
//! coefficients grouped by direction `k` and, within a direction, by unit `j`
//! (flat index `n + k n + j`).

use crate::error::{FoslsError, Result};
use crate::fields::ProblemSpec;
use crate::linalg::{gemm, Op};
use crate::network::{Network, SpanningBatch};
use crate::poincare::mass_from_batch;
use crate::quadrature::{QuadratureRule, RuleKind};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

pub const MU_DEFAULT: f64 = 1e-12;
pub const EPSILON_DEFAULT: f64 = 1e-15;

/// Points per batch when a rule is evaluated piecewise.
pub const CHUNK_POINTS: usize = 1024;

/// Applies `f` to consecutive chunks of a rule; results come back in point order.
pub fn map_chunks<T, F>(rule: &QuadratureRule, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[f64], &[f64]) -> T + Sync,
{
    let d = rule.dim();
    let n = rule.len();
    let n_chunks = n.div_ceil(CHUNK_POINTS).max(1);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK_POINTS;
            let end = ((c + 1) * CHUNK_POINTS).min(n);
            f(&rule.points()[start * d..end * d], &rule.weights()[start..end])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub c_u: DVector<f64>,
    /// index `k n + j`
    pub c_q: DVector<f64>,
}

impl Coefficients {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            c_u: DVector::zeros(n),
            c_q: DVector::zeros(n * dim),
        }
    }

    pub fn width(&self) -> usize {
        self.c_u.len()
    }

    pub fn dim(&self) -> usize {
        self.c_q.len() / self.c_u.len().max(1)
    }

    /// Flux coefficient of unit `j` along axis `k`.
    pub fn q(&self, j: usize, k: usize) -> f64 {
        self.c_q[k * self.c_u.len() + j]
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.c_u.len() + self.c_q.len(), self.c_u.iter().chain(self.c_q.iter()).copied())
    }

    pub fn from_vector(n: usize, v: &DVector<f64>) -> Self {
        Self {
            c_u: v.rows(0, n).into_owned(),
            c_q: v.rows(n, v.len() - n).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.c_u.iter().chain(self.c_q.iter()).all(|v| v.is_finite())
    }
}

/// Quadrature sums that do not depend on the Poincaré weight.
#[derive(Debug, Clone)]
pub struct GramParts {
    pub n: usize,
    pub dim: usize,
    /// `∫ κ ∇φ_i·∇φ_j`
    pub h_uu: DMatrix<f64>,
    /// `∫ ∂_k φ_i Φ_j`, column `k n + j`
    pub h_uq: DMatrix<f64>,
    /// `∫ κ⁻¹ Φ_i Φ_j`
    pub q_mass: DMatrix<f64>,
    /// `∫ ∂_k Φ_i ∂_l Φ_j`, row `k n + i`, column `l n + j`
    pub div: DMatrix<f64>,
    /// `∫ f ∂_k Φ_j`
    pub f_div: DVector<f64>,
    /// `∫ f φ_j`
    pub f_phi: DVector<f64>,
    /// `∫ f²`
    pub ff: f64,
    /// `∫ φ_i φ_j` when requested
    pub mass: Option<DMatrix<f64>>,
    pub rule_kind: RuleKind,
    pub rule_seed: Option<u64>,
}

impl GramParts {
    fn zeros(n: usize, dim: usize, with_mass: bool, rule: &QuadratureRule) -> Self {
        Self {
            n,
            dim,
            h_uu: DMatrix::zeros(n, n),
            h_uq: DMatrix::zeros(n, n * dim),
            q_mass: DMatrix::zeros(n, n),
            div: DMatrix::zeros(n * dim, n * dim),
            f_div: DVector::zeros(n * dim),
            f_phi: DVector::zeros(n),
            ff: 0.0,
            mass: with_mass.then(|| DMatrix::zeros(n, n)),
            rule_kind: rule.kind(),
            rule_seed: rule.seed(),
        }
    }

    fn add(&mut self, other: &GramParts) {
        self.h_uu += &other.h_uu;
        self.h_uq += &other.h_uq;
        self.q_mass += &other.q_mass;
        self.div += &other.div;
        self.f_div += &other.f_div;
        self.f_phi += &other.f_phi;
        self.ff += other.ff;
        if let (Some(m), Some(om)) = (self.mass.as_mut(), other.mass.as_ref()) {
            *m += om;
        }
    }

    /// Sums over one evaluated batch.
    pub fn from_batch(
        batch: &SpanningBatch,
        points: &[f64],
        weights: &[f64],
        problem: &ProblemSpec,
        with_mass: bool,
        rule: &QuadratureRule,
    ) -> Result<Self> {
        let n = batch.width();
        let d = batch.dim();
        let n_pts = batch.len();
        let mut out = Self::zeros(n, d, with_mass, rule);
        let mut kappa = Vec::with_capacity(n_pts);
        let mut f = Vec::with_capacity(n_pts);
        for p in 0..n_pts {
            let x = &points[p * d..(p + 1) * d];
            kappa.push(problem.kappa.eval(x));
            f.push((problem.source)(x));
        }
        check_batch(batch, &f)?;

        let mut gw: Vec<DMatrix<f64>> = batch.grad_phi.clone();
        for k in 0..d {
            for (p, mut col) in gw[k].column_iter_mut().enumerate() {
                col *= weights[p];
            }
        }
        for k in 0..d {
            let mut gk = gw[k].clone();
            for (p, mut col) in gk.column_iter_mut().enumerate() {
                col *= kappa[p];
            }
            gemm(&mut out.h_uu, 1.0, &gk, Op::N, &batch.grad_phi[k], Op::T, 1.0);
            let mut block = DMatrix::zeros(n, n);
            gemm(&mut block, 1.0, &gw[k], Op::N, &batch.raw, Op::T, 0.0);
            out.h_uq.columns_mut(k * n, n).copy_from(&block);
        }
        let mut raw_w = batch.raw.clone();
        for (p, mut col) in raw_w.column_iter_mut().enumerate() {
            col *= weights[p] / kappa[p];
        }
        gemm(&mut out.q_mass, 1.0, &raw_w, Op::N, &batch.raw, Op::T, 0.0);

        let mut stacked = DMatrix::zeros(n * d, n_pts);
        for k in 0..d {
            stacked.rows_mut(k * n, n).copy_from(&batch.raw_grad[k]);
        }
        let mut stacked_w = stacked.clone();
        for (p, mut col) in stacked_w.column_iter_mut().enumerate() {
            col *= weights[p];
        }
        gemm(&mut out.div, 1.0, &stacked_w, Op::N, &stacked, Op::T, 0.0);
        let wf = DVector::from_fn(n_pts, |p, _| weights[p] * f[p]);
        out.f_div = &stacked * &wf;
        out.f_phi = &batch.phi * &wf;
        out.ff = (0..n_pts).map(|p| weights[p] * f[p] * f[p]).sum();
        if let Some(m) = out.mass.as_mut() {
            *m = mass_from_batch(batch, weights);
        }
        Ok(out)
    }

    /// Sums over a whole rule, chunk by chunk.
    pub fn from_rule(net: &Network, problem: &ProblemSpec, rule: &QuadratureRule, with_mass: bool) -> Result<Self> {
        Ok(Self::from_rule_keeping(net, problem, rule, with_mass, false)?.0)
    }

    /// Like [`GramParts::from_rule`], optionally handing back the evaluated chunks for reuse.
    pub fn from_rule_keeping(
        net: &Network,
        problem: &ProblemSpec,
        rule: &QuadratureRule,
        with_mass: bool,
        keep: bool,
    ) -> Result<(Self, Vec<SpanningBatch>)> {
        let d = rule.dim();
        let chunks = map_chunks(rule, |points, weights| {
            let batch = SpanningBatch::evaluate(net, &problem.lifting, points);
            let parts = GramParts::from_batch(&batch, points, weights, problem, with_mass, rule);
            (parts, keep.then_some(batch))
        });
        let mut total = Self::zeros(net.output_dim(), d, with_mass, rule);
        let mut batches = Vec::with_capacity(if keep { chunks.len() } else { 0 });
        for (c, (part, batch)) in chunks.into_iter().enumerate() {
            match part {
                Ok(p) => total.add(&p),
                Err(FoslsError::Assembly { block, point }) => {
                    return Err(FoslsError::Assembly {
                        block,
                        point: point + c * CHUNK_POINTS,
                    })
                }
                Err(e) => return Err(e),
            }
            batches.extend(batch);
        }
        Ok((total, batches))
    }

    /// Full system with Poincaré weight `poincare`.
    pub fn finish(&self, poincare: f64) -> AssembledSystem {
        let n = self.n;
        let d = self.dim;
        let total = n * (d + 1);
        let w = 2.0 * poincare * poincare;
        let mut h = DMatrix::zeros(total, total);
        h.view_mut((0, 0), (n, n)).copy_from(&self.h_uu);
        h.view_mut((0, n), (n, n * d)).copy_from(&self.h_uq);
        h.view_mut((n, 0), (n * d, n)).copy_from(&self.h_uq.transpose());
        let mut qq = &self.div * w;
        for k in 0..d {
            let mut blk = qq.view_mut((k * n, k * n), (n, n));
            blk += &self.q_mass;
        }
        h.view_mut((n, n), (n * d, n * d)).copy_from(&qq);
        let mut f = DVector::zeros(total);
        f.rows_mut(n, n * d).copy_from(&(&self.f_div * w));
        AssembledSystem {
            n_u: n,
            dim: d,
            h,
            f,
            ell: w * self.ff,
            poincare,
            rule_kind: self.rule_kind,
            rule_seed: self.rule_seed,
        }
    }
}

fn check_batch(batch: &SpanningBatch, f: &[f64]) -> Result<()> {
    for p in 0..batch.len() {
        let col_ok = |m: &DMatrix<f64>| m.column(p).iter().all(|v| v.is_finite());
        if !col_ok(&batch.phi) || !batch.grad_phi.iter().all(col_ok) {
            return Err(FoslsError::Assembly { block: "H_uu", point: p });
        }
        if !col_ok(&batch.raw) || !batch.raw_grad.iter().all(col_ok) {
            return Err(FoslsError::Assembly { block: "H_qq", point: p });
        }
        if !f[p].is_finite() {
            return Err(FoslsError::Assembly { block: "f", point: p });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub n_u: usize,
    pub dim: usize,
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub ell: f64,
    pub poincare: f64,
    pub rule_kind: RuleKind,
    pub rule_seed: Option<u64>,
}

impl AssembledSystem {
    pub fn size(&self) -> usize {
        self.h.nrows()
    }

    pub fn h_uu(&self) -> DMatrix<f64> {
        self.h.view((0, 0), (self.n_u, self.n_u)).into_owned()
    }

    pub fn h_uq(&self) -> DMatrix<f64> {
        self.h.view((0, self.n_u), (self.n_u, self.size() - self.n_u)).into_owned()
    }

    pub fn h_qq(&self) -> DMatrix<f64> {
        let m = self.size() - self.n_u;
        self.h.view((self.n_u, self.n_u), (m, m)).into_owned()
    }
}

pub fn assemble(net: &Network, problem: &ProblemSpec, rule: &QuadratureRule, poincare: f64) -> Result<AssembledSystem> {
    if !(poincare > 0.0) {
        return Err(FoslsError::InvalidArgument(format!("Poincaré weight must be positive, got {poincare}")));
    }
    Ok(GramParts::from_rule(net, problem, rule, false)?.finish(poincare))
}

#[derive(Debug, Clone)]
pub struct ScaledSystem {
    pub d: DVector<f64>,
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
}

/// Symmetric diagonal scaling by `D_i = sqrt(H_ii + ε)`.
pub fn scale_matrix(h: &DMatrix<f64>, f: &DVector<f64>, epsilon: f64) -> ScaledSystem {
    let d = DVector::from_fn(h.nrows(), |i, _| (h[(i, i)] + epsilon).sqrt());
    let hs = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] / (d[i] * d[j]));
    let fs = DVector::from_fn(f.len(), |i, _| f[i] / d[i]);
    ScaledSystem { d, h: hs, f: fs }
}

pub fn scale(system: &AssembledSystem, epsilon: f64) -> Result<ScaledSystem> {
    if !(epsilon > 0.0) {
        return Err(FoslsError::InvalidArgument(format!("scaling floor must be positive, got {epsilon}")));
    }
    Ok(scale_matrix(&system.h, &system.f, epsilon))
}

/// Solves `(H̃ + μI) c̃ = f̃` by Cholesky and returns the unscaled `D⁻¹ c̃`.
pub fn solve_scaled(scaled: &ScaledSystem, mu: f64) -> Result<DVector<f64>> {
    if !(mu > 0.0) {
        return Err(FoslsError::InvalidArgument(format!("Tikhonov parameter must be positive, got {mu}")));
    }
    let n = scaled.h.nrows();
    let mut a = scaled.h.clone();
    for i in 0..n {
        a[(i, i)] += mu;
    }
    let chol = a.clone().cholesky().ok_or_else(|| {
        let diag_max = (0..n).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
        FoslsError::Numerical(format!(
            "Cholesky failed for the regularized system (size {n}, largest diagonal {diag_max:.3e}, mu {mu:.1e})"
        ))
    })?;
    let ct = chol.solve(&scaled.f);
    if ct.iter().any(|v| !v.is_finite()) {
        return Err(FoslsError::Numerical("non-finite least-squares coefficients".into()));
    }
    Ok(DVector::from_fn(n, |i, _| ct[i] / scaled.d[i]))
}

pub fn solve_ls(system: &AssembledSystem, scaled: &ScaledSystem, mu: f64) -> Result<Coefficients> {
    let c = solve_scaled(scaled, mu)?;
    Ok(Coefficients::from_vector(system.n_u, &c))
}

/// `cᵀHc − 2cᵀf + ℓ`.
pub fn loss_at(system: &AssembledSystem, c: &Coefficients) -> Result<f64> {
    let v = c.to_vector();
    if v.len() != system.size() {
        return Err(FoslsError::InvalidArgument(format!(
            "coefficient vector has {} entries, system has {}",
            v.len(),
            system.size()
        )));
    }
    let value = v.dot(&(&system.h * &v)) - 2.0 * v.dot(&system.f) + system.ell;
    if value < 0.0 {
        if value >= -1e-12 * system.ell {
            return Ok(0.0);
        }
        return Err(FoslsError::Numerical(format!(
            "quadratic form is negative ({value:.3e}, constant term {:.3e})",
            system.ell
        )));
    }
    Ok(value)
}

/// Flat debug bundle; matrices row-major.
#[derive(Debug, Serialize)]
pub struct SystemDump {
    pub n_u: usize,
    pub dim: usize,
    pub size: usize,
    pub h: Vec<f64>,
    pub f: Vec<f64>,
    pub ell: f64,
    pub poincare: f64,
    pub d: Vec<f64>,
    pub c: Vec<f64>,
}

impl SystemDump {
    pub fn new(system: &AssembledSystem, scaled: &ScaledSystem, c: &Coefficients) -> Self {
        let n = system.size();
        Self {
            n_u: system.n_u,
            dim: system.dim,
            size: n,
            h: (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| system.h[(i, j)]).collect(),
            f: system.f.iter().copied().collect(),
            ell: system.ell,
            poincare: system.poincare,
            d: scaled.d.iter().copied().collect(),
            c: c.to_vector().iter().copied().collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Discrete fields `u, ∇u, q, div q` at the points of a batch.
#[derive(Debug, Clone)]
pub struct FieldValues {
    pub u: DVector<f64>,
    pub grad_u: Vec<DVector<f64>>,
    pub q: Vec<DVector<f64>>,
    pub div_q: DVector<f64>,
}

impl FieldValues {
    pub fn from_batch(batch: &SpanningBatch, c: &Coefficients) -> Self {
        let n = batch.width();
        let d = batch.dim();
        let u = batch.phi.tr_mul(&c.c_u);
        let grad_u = (0..d).map(|k| batch.grad_phi[k].tr_mul(&c.c_u)).collect();
        let mut q = Vec::with_capacity(d);
        let mut div_q = DVector::zeros(batch.len());
        for k in 0..d {
            let ck = c.c_q.rows(k * n, n).into_owned();
            q.push(batch.raw.tr_mul(&ck));
            div_q += batch.raw_grad[k].tr_mul(&ck);
        }
        Self { u, grad_u, q, div_q }
    }
}

//! Energy-norm Poincaré constant: discrete estimate from the trial space and a 1D two-material reference.

use crate::assembly::map_chunks;
use crate::error::{FoslsError, Result};
use crate::fields::Lifting;
use crate::linalg::{gemm, Op};
use crate::network::{Network, SpanningBatch};
use crate::quadrature::QuadratureRule;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub const ALPHA1_DEFAULT: f64 = 1e-8;
pub const ALPHA2_DEFAULT: f64 = 1e-10;
/// Relative shift of `λ_min` under halved regularization above which a space counts as ill-conditioned.
pub const ALPHA_SENSITIVITY_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareEstimate {
    pub value: f64,
    pub lambda_min: f64,
    pub iteration: usize,
    pub running_max: f64,
    /// `|λ(α/2) - λ(α)| / λ(α)`, NaN when not measured
    #[serde(default = "nan")]
    pub alpha_sensitivity: f64,
}

fn nan() -> f64 {
    f64::NAN
}

impl PoincareEstimate {
    /// Folds a fresh estimate into the running maximum.
    pub fn updated(&self, fresh: PoincareEstimate, iteration: usize) -> PoincareEstimate {
        PoincareEstimate {
            value: fresh.value,
            lambda_min: fresh.lambda_min,
            iteration,
            running_max: self.running_max.max(fresh.value),
            alpha_sensitivity: fresh.alpha_sensitivity,
        }
    }

    /// True when halving the regularization moved `λ_min` by more than [`ALPHA_SENSITIVITY_LIMIT`].
    pub fn ill_conditioned(&self) -> bool {
        self.alpha_sensitivity > ALPHA_SENSITIVITY_LIMIT
    }

    /// A constant known in advance; no eigen-solve involved.
    pub fn fixed(value: f64) -> PoincareEstimate {
        PoincareEstimate {
            value,
            lambda_min: 1.0 / (value * value),
            iteration: 0,
            running_max: value,
            alpha_sensitivity: 0.0,
        }
    }
}

/// `M_ij = ∫ φ_i φ_j` with the given rule.
pub fn assemble_mass(net: &Network, lifting: &Lifting, rule: &QuadratureRule) -> DMatrix<f64> {
    let n = net.output_dim();
    let parts = map_chunks(rule, |points, weights| {
        let batch = SpanningBatch::evaluate(net, lifting, points);
        mass_from_batch(&batch, weights)
    });
    parts.into_iter().fold(DMatrix::zeros(n, n), |acc, m| acc + m)
}

pub(crate) fn mass_from_batch(batch: &SpanningBatch, weights: &[f64]) -> DMatrix<f64> {
    let mut scaled = batch.phi.clone();
    for (p, mut col) in scaled.column_iter_mut().enumerate() {
        col *= weights[p];
    }
    let n = batch.width();
    let mut m = DMatrix::zeros(n, n);
    gemm(&mut m, 1.0, &scaled, Op::N, &batch.phi, Op::T, 0.0);
    m
}

/// Smallest eigenvalue of `(D⁻¹HD⁻¹ + α₁I) a = λ (D⁻¹MD⁻¹ + α₂I) a` and `C = λ^{-1/2}`.
pub fn estimate_poincare(
    h_uu: &DMatrix<f64>,
    mass: &DMatrix<f64>,
    d_u: &DVector<f64>,
    alpha1: f64,
    alpha2: f64,
) -> Result<PoincareEstimate> {
    let n = h_uu.nrows();
    if mass.shape() != (n, n) || d_u.len() != n {
        return Err(FoslsError::InvalidArgument("Poincaré pencil dimensions differ".into()));
    }
    if !(alpha1 >= 0.0 && alpha2 >= 0.0) {
        return Err(FoslsError::InvalidArgument("regularization parameters must be nonnegative".into()));
    }
    let a = DMatrix::from_fn(n, n, |i, j| h_uu[(i, j)] / (d_u[i] * d_u[j]) + if i == j { alpha1 } else { 0.0 });
    let b = DMatrix::from_fn(n, n, |i, j| mass[(i, j)] / (d_u[i] * d_u[j]) + if i == j { alpha2 } else { 0.0 });
    let chol = b
        .cholesky()
        .ok_or_else(|| FoslsError::Numerical("mass pencil is not positive definite".into()))?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ
    let y = l
        .solve_lower_triangular(&a)
        .ok_or_else(|| FoslsError::Numerical("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| FoslsError::Numerical("singular Cholesky factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(FoslsError::Numerical("non-finite reduced pencil".into()));
    }
    let eig = SymmetricEigen::try_new(c, f64::EPSILON, 10_000)
        .ok_or_else(|| FoslsError::Numerical("symmetric eigensolver did not converge".into()))?;
    let lambda_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(lambda_min > 0.0) {
        return Err(FoslsError::Numerical(format!("non-positive smallest eigenvalue {lambda_min}")));
    }
    let value = lambda_min.powf(-0.5);
    Ok(PoincareEstimate {
        value,
        lambda_min,
        iteration: 0,
        running_max: value,
        alpha_sensitivity: f64::NAN,
    })
}

/// [`estimate_poincare`] plus the relative shift of `λ_min` when both `α` are halved.
pub fn estimate_poincare_checked(
    h_uu: &DMatrix<f64>,
    mass: &DMatrix<f64>,
    d_u: &DVector<f64>,
    alpha1: f64,
    alpha2: f64,
) -> Result<PoincareEstimate> {
    let mut e = estimate_poincare(h_uu, mass, d_u, alpha1, alpha2)?;
    let half = estimate_poincare(h_uu, mass, d_u, 0.5 * alpha1, 0.5 * alpha2)?;
    e.alpha_sensitivity = (half.lambda_min - e.lambda_min).abs() / e.lambda_min;
    if e.ill_conditioned() {
        log::warn!(
            "ill-conditioned trial space: halving the regularization moves lambda_min by {:.2}%",
            100.0 * e.alpha_sensitivity
        );
    }
    Ok(e)
}

/// Sign-regular form of the interface condition, free of tangent poles.
fn interface_function(s: f64, kappa1: f64, kappa2: f64, x0: f64) -> f64 {
    let (r1, r2) = (kappa1.sqrt(), kappa2.sqrt());
    let a = s * x0 / r1;
    let b = s * (1.0 - x0) / r2;
    r2 * a.sin() * b.cos() + r1 * a.cos() * b.sin()
}

/// Smallest eigenvalue of `-(κ u')' = λ u` on (0,1) with `κ = κ₁` left of `x0`, `κ₂` right of it.
pub fn oracle_lambda1(kappa1: f64, kappa2: f64, x0: f64) -> Result<f64> {
    if !(kappa1 > 0.0 && kappa2 > 0.0 && x0 > 0.0 && x0 < 1.0) {
        return Err(FoslsError::InvalidArgument(format!(
            "need positive coefficients and interior interface, got ({kappa1}, {kappa2}, {x0})"
        )));
    }
    // Both phases stay in [0, π] up to s_max, and the function is <= 0 there.
    let s_max = std::f64::consts::PI * (kappa1.sqrt() / x0).min(kappa2.sqrt() / (1.0 - x0));
    let g = |s: f64| interface_function(s, kappa1, kappa2, x0);
    let steps = 10_000;
    let mut lo = s_max / steps as f64;
    let mut g_lo = g(lo);
    let mut bracket = None;
    for i in 2..=steps {
        let s = s_max * i as f64 / steps as f64;
        let gs = g(s);
        if gs == 0.0 {
            return Ok(s * s);
        }
        if g_lo.signum() != gs.signum() {
            bracket = Some((lo, s));
            break;
        }
        lo = s;
        g_lo = gs;
    }
    let (mut a, mut b) = bracket.ok_or_else(|| {
        FoslsError::Numerical(format!("no sign change of the interface condition on (0, {s_max}]"))
    })?;
    let mut ga = g(a);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let gm = g(mid);
        if gm == 0.0 {
            return Ok(mid * mid);
        }
        if gm.signum() == ga.signum() {
            a = mid;
            ga = gm;
        } else {
            b = mid;
        }
        if (b - a) <= 1e-15 * b {
            break;
        }
    }
    let s = 0.5 * (a + b);
    Ok(s * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn diagonal_pencil() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0]));
        let m = DMatrix::identity(2, 2);
        let d = DVector::from_element(2, 1.0);
        let e = estimate_poincare(&h, &m, &d, 0.0, 0.0).unwrap();
        assert!((e.lambda_min - 2.0).abs() < 1e-12);
        assert!((e.value - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn oracle_constant_cases() {
        let l = oracle_lambda1(1.0, 1.0, 0.5).unwrap();
        assert!((l / (PI * PI) - 1.0).abs() < 1e-10);
        for x0 in [0.1, 0.37, 0.5, 0.9] {
            let l = oracle_lambda1(4.0, 4.0, x0).unwrap();
            assert!((l / (4.0 * PI * PI) - 1.0).abs() < 1e-10, "x0 = {x0}");
        }
    }

    #[test]
    fn oracle_mirror_symmetry() {
        for (a, b, x0) in [(3.0, 1.0, 0.5), (1e-6, 1.0, 0.5), (1e6, 1.0, 0.3), (2.0, 7.0, 0.8)] {
            let l1 = oracle_lambda1(a, b, x0).unwrap();
            let l2 = oracle_lambda1(b, a, 1.0 - x0).unwrap();
            assert!((l1 / l2 - 1.0).abs() < 1e-12, "{a} {b} {x0}");
        }
    }

    #[test]
    fn oracle_rejects_bad_input() {
        assert!(oracle_lambda1(0.0, 1.0, 0.5).is_err());
        assert!(oracle_lambda1(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn running_max_is_monotone() {
        let mut e = PoincareEstimate::fixed(0.3);
        for (i, v) in [0.2, 0.35, 0.31, 0.4].iter().enumerate() {
            let prev = e.running_max;
            e = e.updated(PoincareEstimate::fixed(*v), i);
            assert!(e.running_max >= prev);
        }
        assert_eq!(e.running_max, 0.4);
        assert_eq!(e.value, 0.4);
    }
}

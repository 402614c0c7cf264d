//! Material coefficients, sources, Dirichlet liftings and the benchmark problems.

use crate::error::{FoslsError, Result};
use crate::geometry::BoxDomain;
use crate::poincare::oracle_lambda1;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

/// Fixed-size spatial vector; entries beyond the problem dimension are zero.
pub type Vec3 = [f64; 3];

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec3 + Send + Sync>;

/// Membership predicate of one coefficient region. Both variants are closed sets.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// `x[axis] <= threshold`
    HalfSpace { axis: usize, threshold: f64 },
    /// `|x - center| <= radius`
    Ball { center: Vec<f64>, radius: f64 },
}

impl Region {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::HalfSpace { axis, threshold } => x[*axis] <= *threshold,
            Region::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                r2 <= radius * radius
            }
        }
    }
}

/// Piecewise-constant positive coefficient; the first region containing a point wins.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstantCoefficient {
    regions: Vec<(Region, f64)>,
    default: f64,
}

impl PiecewiseConstantCoefficient {
    pub fn new(regions: Vec<(Region, f64)>, default: f64) -> Result<Self> {
        let all = regions.iter().map(|(_, v)| *v).chain(std::iter::once(default));
        for v in all {
            if !(v.is_finite() && v > 0.0) {
                return Err(FoslsError::InvalidArgument(format!(
                    "coefficient values must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Self { regions, default })
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(Vec::new(), value)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.regions
            .iter()
            .find(|(r, _)| r.contains(x))
            .map_or(self.default, |(_, v)| *v)
    }

    /// Lower bound κ₀.
    pub fn min_value(&self) -> f64 {
        self.regions.iter().map(|(_, v)| *v).fold(self.default, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.regions.iter().map(|(_, v)| *v).fold(self.default, f64::max)
    }

    /// Multiplies every value by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(
            self.regions.iter().map(|(r, v)| (r.clone(), v * s)).collect(),
            self.default * s,
        )
    }
}

/// Cutoff `g_D` vanishing on the boundary and positive inside.
#[derive(Debug, Clone, PartialEq)]
pub enum Lifting {
    /// `Π_k (x_k - a_k)(b_k - x_k)` on the box `Π (a_k, b_k)`.
    Bubble(BoxDomain),
}

impl Lifting {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Lifting::Bubble(b) => (0..b.dim())
                .map(|k| (x[k] - b.lower()[k]) * (b.upper()[k] - x[k]))
                .product(),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec3 {
        match self {
            Lifting::Bubble(b) => {
                let d = b.dim();
                let mut factors = [1.0; 3];
                let mut derivs = [0.0; 3];
                for k in 0..d {
                    let (lo, hi) = (b.lower()[k], b.upper()[k]);
                    factors[k] = (x[k] - lo) * (hi - x[k]);
                    derivs[k] = lo + hi - 2.0 * x[k];
                }
                let mut g = [0.0; 3];
                for k in 0..d {
                    g[k] = derivs[k] * (0..d).filter(|&j| j != k).map(|j| factors[j]).product::<f64>();
                }
                g
            }
        }
    }
}

/// Closed-form solution pair `(u*, q*)` of a benchmark problem.
#[derive(Clone)]
pub struct ExactSolution {
    pub u: ScalarField,
    pub grad_u: VectorField,
    pub q: VectorField,
    pub div_q: ScalarField,
}

impl fmt::Debug for ExactSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ExactSolution { .. }")
    }
}

/// `-div(κ ∇u) = f` in the box with `u = 0` on its boundary.
#[derive(Clone)]
pub struct ProblemSpec {
    pub id: String,
    pub domain: BoxDomain,
    pub kappa: PiecewiseConstantCoefficient,
    pub source: ScalarField,
    pub lifting: Lifting,
    pub exact: Option<ExactSolution>,
    pub poincare_reference: Option<f64>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("id", &self.id)
            .field("domain", &self.domain)
            .field("kappa", &self.kappa)
            .field("poincare_reference", &self.poincare_reference)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }
}

/// Identifiers accepted by [`problem_by_id`].
pub const PROBLEM_IDS: [&str; 4] = ["interface1d", "circle2d", "plane2d", "smooth1d"];

/// Looks a benchmark up by its string identifier. `kappa0` only applies to `interface1d`.
pub fn problem_by_id(id: &str, kappa0: Option<f64>) -> Result<ProblemSpec> {
    match id {
        "interface1d" => problem_interface_1d(kappa0.unwrap_or(3.0)),
        "smooth1d" => Ok(problem_smooth_1d()),
        "circle2d" => Ok(problem_circle_2d()),
        "plane2d" => Ok(problem_plane_2d()),
        other => Err(FoslsError::Configuration(format!(
            "unknown problem '{other}', expected one of {PROBLEM_IDS:?}"
        ))),
    }
}

/// κ = κ₀ on (0,½], 1 on (½,1), f = 4π² sin(2πx).
pub fn problem_interface_1d(kappa0: f64) -> Result<ProblemSpec> {
    if !(kappa0.is_finite() && kappa0 > 0.0) {
        return Err(FoslsError::InvalidArgument(format!("kappa0 must be positive, got {kappa0}")));
    }
    let domain = BoxDomain::unit(1);
    let kappa = PiecewiseConstantCoefficient::new(
        vec![(Region::HalfSpace { axis: 0, threshold: 0.5 }, kappa0)],
        1.0,
    )?;
    let k_u = kappa.clone();
    let k_g = kappa.clone();
    let exact = ExactSolution {
        u: Arc::new(move |x| (2.0 * PI * x[0]).sin() / k_u.eval(x)),
        grad_u: Arc::new(move |x| [2.0 * PI * (2.0 * PI * x[0]).cos() / k_g.eval(x), 0.0, 0.0]),
        q: Arc::new(|x| [-2.0 * PI * (2.0 * PI * x[0]).cos(), 0.0, 0.0]),
        div_q: Arc::new(|x| 4.0 * PI * PI * (2.0 * PI * x[0]).sin()),
    };
    let lambda1 = oracle_lambda1(kappa0, 1.0, 0.5)?;
    Ok(ProblemSpec {
        id: "interface1d".into(),
        domain: domain.clone(),
        kappa,
        source: Arc::new(|x| 4.0 * PI * PI * (2.0 * PI * x[0]).sin()),
        lifting: Lifting::Bubble(domain),
        exact: Some(exact),
        poincare_reference: Some(1.0 / lambda1.sqrt()),
    })
}

/// κ = 1, u* = sin(2πx).
pub fn problem_smooth_1d() -> ProblemSpec {
    let domain = BoxDomain::unit(1);
    let exact = ExactSolution {
        u: Arc::new(|x| (2.0 * PI * x[0]).sin()),
        grad_u: Arc::new(|x| [2.0 * PI * (2.0 * PI * x[0]).cos(), 0.0, 0.0]),
        q: Arc::new(|x| [-2.0 * PI * (2.0 * PI * x[0]).cos(), 0.0, 0.0]),
        div_q: Arc::new(|x| 4.0 * PI * PI * (2.0 * PI * x[0]).sin()),
    };
    ProblemSpec {
        id: "smooth1d".into(),
        domain: domain.clone(),
        kappa: PiecewiseConstantCoefficient::constant(1.0).expect("positive"),
        source: Arc::new(|x| 4.0 * PI * PI * (2.0 * PI * x[0]).sin()),
        lifting: Lifting::Bubble(domain),
        exact: Some(exact),
        poincare_reference: Some(1.0 / PI),
    }
}

const CIRCLE_CENTER: [f64; 2] = [0.5, 0.5];
const CIRCLE_RADIUS: f64 = 0.25;

/// κ = 1 inside the disk of radius ¼ about (½,½), 3 outside;
/// u* = sin(2πx) sin(2πy)(|x-c|² - 1/16)/κ.
pub fn problem_circle_2d() -> ProblemSpec {
    let domain = BoxDomain::unit(2);
    let kappa = PiecewiseConstantCoefficient::new(
        vec![(
            Region::Ball { center: CIRCLE_CENTER.to_vec(), radius: CIRCLE_RADIUS },
            1.0,
        )],
        3.0,
    )
    .expect("positive");

    // s = sin(2πx) sin(2πy), ρ = |x-c|² - r²; q* = -(ρ ∇s + s ∇ρ) does not depend on κ.
    fn parts(x: &[f64]) -> (f64, [f64; 2], f64, [f64; 2]) {
        let (sx, cx) = (2.0 * PI * x[0]).sin_cos();
        let (sy, cy) = (2.0 * PI * x[1]).sin_cos();
        let s = sx * sy;
        let grad_s = [2.0 * PI * cx * sy, 2.0 * PI * sx * cy];
        let dx = x[0] - CIRCLE_CENTER[0];
        let dy = x[1] - CIRCLE_CENTER[1];
        let rho = dx * dx + dy * dy - CIRCLE_RADIUS * CIRCLE_RADIUS;
        (s, grad_s, rho, [2.0 * dx, 2.0 * dy])
    }
    fn flux(x: &[f64]) -> Vec3 {
        let (s, gs, rho, gr) = parts(x);
        [-(rho * gs[0] + s * gr[0]), -(rho * gs[1] + s * gr[1]), 0.0]
    }
    // -(ρ Δs + 2 ∇s·∇ρ + s Δρ) with Δs = -8π² s and Δρ = 4.
    fn divergence(x: &[f64]) -> f64 {
        let (s, gs, rho, gr) = parts(x);
        8.0 * PI * PI * s * rho - 2.0 * (gs[0] * gr[0] + gs[1] * gr[1]) - 4.0 * s
    }

    let k_u = kappa.clone();
    let k_g = kappa.clone();
    let exact = ExactSolution {
        u: Arc::new(move |x| {
            let (s, _, rho, _) = parts(x);
            s * rho / k_u.eval(x)
        }),
        grad_u: Arc::new(move |x| {
            let q = flux(x);
            let k = k_g.eval(x);
            [-q[0] / k, -q[1] / k, 0.0]
        }),
        q: Arc::new(flux),
        div_q: Arc::new(divergence),
    };
    ProblemSpec {
        id: "circle2d".into(),
        domain: domain.clone(),
        kappa,
        source: Arc::new(divergence),
        lifting: Lifting::Bubble(domain),
        exact: Some(exact),
        poincare_reference: None,
    }
}

/// κ = 1 on (0,½]×(0,1), 3 on (½,1)×(0,1); u* = (cos(2πx) - 1) sin(πy).
pub fn problem_plane_2d() -> ProblemSpec {
    let domain = BoxDomain::unit(2);
    let kappa = PiecewiseConstantCoefficient::new(
        vec![(Region::HalfSpace { axis: 0, threshold: 0.5 }, 1.0)],
        3.0,
    )
    .expect("positive");

    fn grad(x: &[f64]) -> [f64; 2] {
        let (s2x, c2x) = (2.0 * PI * x[0]).sin_cos();
        let (sy, cy) = (PI * x[1]).sin_cos();
        [-2.0 * PI * s2x * sy, PI * (c2x - 1.0) * cy]
    }
    fn laplacian(x: &[f64]) -> f64 {
        let c2x = (2.0 * PI * x[0]).cos();
        let sy = (PI * x[1]).sin();
        -4.0 * PI * PI * c2x * sy - PI * PI * (c2x - 1.0) * sy
    }

    let k_q = kappa.clone();
    let k_d = kappa.clone();
    let k_f = kappa.clone();
    let exact = ExactSolution {
        u: Arc::new(|x| ((2.0 * PI * x[0]).cos() - 1.0) * (PI * x[1]).sin()),
        grad_u: Arc::new(|x| {
            let g = grad(x);
            [g[0], g[1], 0.0]
        }),
        q: Arc::new(move |x| {
            let g = grad(x);
            let k = k_q.eval(x);
            [-k * g[0], -k * g[1], 0.0]
        }),
        div_q: Arc::new(move |x| -k_d.eval(x) * laplacian(x)),
    };
    ProblemSpec {
        id: "plane2d".into(),
        domain: domain.clone(),
        kappa,
        source: Arc::new(move |x| -k_f.eval(x) * laplacian(x)),
        lifting: Lifting::Bubble(domain),
        exact: Some(exact),
        poincare_reference: None,
    }
}

//! Monte Carlo, stratified antithetic (P1) and tensor trapezoid quadrature.
//!
//! Stochastic rules draw from ChaCha streams keyed by `(seed, cell)`, so a rule
//! depends only on its arguments and never on evaluation order or threading.

use crate::error::{FoslsError, Result};
use crate::geometry::{BoxDomain, Partition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    MonteCarlo,
    StratifiedP1,
    TensorTrapezoid,
}

/// Points (flattened, `dim` coordinates each) with positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    kind: RuleKind,
    seed: Option<u64>,
}

impl QuadratureRule {
    /// Builds a rule from raw data; weights must be positive and finite.
    pub fn from_parts(dim: usize, points: Vec<f64>, weights: Vec<f64>, kind: RuleKind) -> Result<Self> {
        if dim == 0 || points.len() != dim * weights.len() {
            return Err(FoslsError::InvalidArgument(format!(
                "{} coordinates do not describe {} points in dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(FoslsError::InvalidArgument(format!("non-positive weight {w}")));
        }
        Ok(Self { dim, points, weights, kind, seed: None })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Contiguous sub-rule over points `start..end`, used for chunked evaluation.
    pub fn slice(&self, start: usize, end: usize) -> QuadratureRule {
        QuadratureRule {
            dim: self.dim,
            points: self.points[start * self.dim..end * self.dim].to_vec(),
            weights: self.weights[start..end].to_vec(),
            kind: self.kind,
            seed: self.seed,
        }
    }
}

/// SplitMix64 finalizer; used to derive independent child seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed `index` of stream `tag` under `base`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    mix_seed(mix_seed(base ^ mix_seed(tag)).wrapping_add(index))
}

fn cell_stream(seed: u64, cell: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell as u64);
    rng
}

/// Stratified antithetic rule: two reflected points per cell, each with weight `|J_K| 2^(d-1)`.
pub fn sample_p1(partition: &Partition, seed: u64) -> QuadratureRule {
    let dim = partition.domain().dim();
    let n = 2 * partition.len();
    let mut points = vec![0.0; n * dim];
    let mut weights = Vec::with_capacity(n);
    let reference_weight = (1u32 << (dim - 1)) as f64;
    let mut reference = [0.0f64; 3];
    let mut reflected = [0.0f64; 3];
    for (c, cell) in partition.cells().iter().enumerate() {
        let mut rng = cell_stream(seed, c);
        for k in 0..dim {
            reference[k] = rng.random_range(-1.0..1.0);
            reflected[k] = -reference[k];
        }
        let base = 2 * c * dim;
        cell.map_reference(&reference[..dim], &mut points[base..base + dim]);
        cell.map_reference(&reflected[..dim], &mut points[base + dim..base + 2 * dim]);
        let w = cell.reference_jacobian() * reference_weight;
        weights.push(w);
        weights.push(w);
    }
    QuadratureRule {
        dim,
        points,
        weights,
        kind: RuleKind::StratifiedP1,
        seed: Some(seed),
    }
}

/// Plain Monte Carlo with equal weights `|Ω|/N`.
pub fn sample_mc(domain: &BoxDomain, n_points: usize, seed: u64) -> Result<QuadratureRule> {
    if n_points == 0 {
        return Err(FoslsError::InvalidArgument("Monte Carlo rule needs at least one point".into()));
    }
    let dim = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_points * dim);
    for _ in 0..n_points {
        for k in 0..dim {
            let t: f64 = rng.random();
            points.push(domain.lower()[k] + t * domain.extent(k));
        }
    }
    let w = domain.volume() / n_points as f64;
    Ok(QuadratureRule {
        dim,
        points,
        weights: vec![w; n_points],
        kind: RuleKind::MonteCarlo,
        seed: Some(seed),
    })
}

/// Tensor-product trapezoid rule on a uniform grid, axis 0 varying fastest.
pub fn trapezoid_rule(domain: &BoxDomain, nodes_per_axis: &[usize]) -> Result<QuadratureRule> {
    let dim = domain.dim();
    if nodes_per_axis.len() != dim || nodes_per_axis.iter().any(|&n| n < 2) {
        return Err(FoslsError::InvalidArgument(format!(
            "trapezoid rule needs >= 2 nodes on each of {dim} axes, got {nodes_per_axis:?}"
        )));
    }
    let axis_nodes: Vec<Vec<(f64, f64)>> = (0..dim)
        .map(|k| {
            let n = nodes_per_axis[k];
            let h = domain.extent(k) / (n - 1) as f64;
            (0..n)
                .map(|i| {
                    let x = if i + 1 == n {
                        domain.upper()[k]
                    } else {
                        domain.lower()[k] + h * i as f64
                    };
                    let w = if i == 0 || i + 1 == n { 0.5 * h } else { h };
                    (x, w)
                })
                .collect()
        })
        .collect();
    let total: usize = nodes_per_axis.iter().product();
    let mut points = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    let mut index = vec![0usize; dim];
    for _ in 0..total {
        let mut w = 1.0;
        for k in 0..dim {
            let (x, wk) = axis_nodes[k][index[k]];
            points.push(x);
            w *= wk;
        }
        weights.push(w);
        for k in 0..dim {
            index[k] += 1;
            if index[k] < nodes_per_axis[k] {
                break;
            }
            index[k] = 0;
        }
    }
    Ok(QuadratureRule {
        dim,
        points,
        weights,
        kind: RuleKind::TensorTrapezoid,
        seed: None,
    })
}

/// `Σ w_i f(x_i)`, accumulated in point order.
pub fn integrate<F>(rule: &QuadratureRule, integrand: F) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut acc = 0.0;
    for (i, w) in rule.weights.iter().enumerate() {
        let x = rule.point(i);
        let v = integrand(x);
        if !v.is_finite() {
            return Err(FoslsError::NonFiniteSample { point: x.to_vec(), value: v });
        }
        acc += w * v;
    }
    Ok(acc)
}

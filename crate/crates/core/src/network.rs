//! Feedforward trial-space generator and its spanning functions.
//!
//! Evaluation is batched over quadrature points. A batch of `N` points is
//! carried through the network as an `n_l x N(d+1)` matrix whose first `N`
//! columns hold values and whose `k`-th following block of `N` columns holds
//! the spatial derivative along axis `k`. In column-major storage each block is
//! a contiguous slice, so the activation step is a flat elementwise loop.

use crate::error::{FoslsError, Result};
use crate::fields::Lifting;
use crate::geometry::BoxDomain;
use crate::linalg::{gemm, matmul, Op};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Default slope of the scaled tanh activation at initialization.
pub const TANH_M_INIT: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// `max(0, x)^2`
    ReQU,
    /// `tanh(m x)` with trainable `m`
    ScaledTanh { m: f64 },
}

impl Activation {
    /// Parses an activation name. Only `C^{1,1}` activations are accepted.
    pub fn from_name(name: &str, tanh_m: f64) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "requ" => Ok(Activation::ReQU),
            "tanh" | "scaled-tanh" | "scaled_tanh" => {
                if !(tanh_m.is_finite() && tanh_m > 0.0) {
                    return Err(FoslsError::Configuration(format!("tanh slope must be positive, got {tanh_m}")));
                }
                Ok(Activation::ScaledTanh { m: tanh_m })
            }
            "relu" => Err(FoslsError::Configuration(
                "relu is not admissible: its derivative jumps, so the flux divergence carries point masses".into(),
            )),
            other => Err(FoslsError::Configuration(format!("unknown activation '{other}' (expected requ or tanh)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::ReQU => "requ",
            Activation::ScaledTanh { .. } => "tanh",
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Activation::ScaledTanh { .. })
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        match *self {
            Activation::ReQU => {
                let p = z.max(0.0);
                p * p
            }
            Activation::ScaledTanh { m } => (m * z).tanh(),
        }
    }

    #[inline]
    pub fn d1(&self, z: f64) -> f64 {
        match *self {
            Activation::ReQU => 2.0 * z.max(0.0),
            Activation::ScaledTanh { m } => {
                let t = (m * z).tanh();
                m * (1.0 - t * t)
            }
        }
    }

    /// Second derivative; for ReQU the value at exactly zero is taken as 0.
    #[inline]
    pub fn d2(&self, z: f64) -> f64 {
        match *self {
            Activation::ReQU => {
                if z > 0.0 {
                    2.0
                } else {
                    0.0
                }
            }
            Activation::ScaledTanh { m } => {
                let t = (m * z).tanh();
                -2.0 * m * m * t * (1.0 - t * t)
            }
        }
    }

    /// `(d1, d2, dσ/dm, dσ'/dm)` in one evaluation.
    #[inline]
    fn all(&self, z: f64) -> (f64, f64, f64, f64) {
        match *self {
            Activation::ReQU => (self.d1(z), self.d2(z), 0.0, 0.0),
            Activation::ScaledTanh { m } => {
                let t = (m * z).tanh();
                let s = 1.0 - t * t;
                (m * s, -2.0 * m * m * t * s, z * s, s - 2.0 * m * z * t * s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
    activation: Activation,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(FoslsError::Configuration("network needs at least one hidden layer".into()));
        }
        let mut fan_in = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.ncols() != fan_in || layer.bias.len() != layer.weights.nrows() {
                return Err(FoslsError::Configuration(format!(
                    "layer {} has shape {}x{} with bias {}, expected fan-in {fan_in}",
                    l + 1,
                    layer.weights.nrows(),
                    layer.weights.ncols(),
                    layer.bias.len()
                )));
            }
            fan_in = layer.weights.nrows();
        }
        let net = Self { input_dim, layers, activation };
        net.check_finite()?;
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Width of the last hidden layer, i.e. the number of spanning functions per field.
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(FoslsError::Numerical(format!("non-finite parameter in layer {}", l + 1)));
            }
        }
        if let Activation::ScaledTanh { m } = self.activation {
            if !m.is_finite() {
                return Err(FoslsError::Numerical("non-finite tanh slope".into()));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let own: usize = self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum();
        own + usize::from(self.activation.is_trainable())
    }

    /// Flat parameters: each layer's weights row-major then its bias, then `m` if trainable.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for i in 0..layer.weights.nrows() {
                for j in 0..layer.weights.ncols() {
                    out.push(layer.weights[(i, j)]);
                }
            }
            out.extend(layer.bias.iter());
        }
        if let Activation::ScaledTanh { m } = self.activation {
            out.push(m);
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(FoslsError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                theta.len()
            )));
        }
        let mut it = theta.iter().copied();
        for layer in &mut self.layers {
            for i in 0..layer.weights.nrows() {
                for j in 0..layer.weights.ncols() {
                    layer.weights[(i, j)] = it.next().unwrap();
                }
            }
            for b in layer.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        if let Activation::ScaledTanh { m } = &mut self.activation {
            *m = it.next().unwrap();
        }
        Ok(())
    }

    /// Adds independent `N(0, scale^2)` noise to every weight and bias.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        if scale <= 0.0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("positive scale");
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w += normal.sample(&mut rng);
            }
            for b in layer.bias.iter_mut() {
                *b += normal.sample(&mut rng);
            }
        }
    }

    /// Runs a batch of points (flat, `dim` coordinates each) through the network.
    pub fn trace(&self, points: &[f64]) -> ForwardTrace {
        let d = self.input_dim;
        let n_pts = points.len() / d;
        let cols = n_pts * (d + 1);
        let mut x0 = DMatrix::zeros(d, cols);
        for p in 0..n_pts {
            for k in 0..d {
                x0[(k, p)] = points[p * d + k];
                x0[(k, (k + 1) * n_pts + p)] = 1.0;
            }
        }
        let mut inputs = vec![x0];
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x_prev = inputs.last().unwrap();
            let width = layer.weights.nrows();
            let mut z = DMatrix::zeros(width, cols);
            gemm(&mut z, 1.0, &layer.weights, Op::N, x_prev, Op::N, 0.0);
            for p in 0..n_pts {
                for i in 0..width {
                    z[(i, p)] += layer.bias[i];
                }
            }
            let mut x = DMatrix::zeros(width, cols);
            let block = width * n_pts;
            {
                let zs = z.as_slice();
                let xs = x.as_mut_slice();
                for e in 0..block {
                    let zv = zs[e];
                    xs[e] = self.activation.value(zv);
                    let sp = self.activation.d1(zv);
                    for k in 1..=d {
                        xs[k * block + e] = sp * zs[k * block + e];
                    }
                }
            }
            pre.push(z);
            inputs.push(x);
        }
        ForwardTrace { n_points: n_pts, dim: d, inputs, pre }
    }

    /// Reverse pass: gradient of `<xbar, Φ_L>` (all channels) with respect to the parameters.
    pub fn backward(&self, trace: &ForwardTrace, xbar: DMatrix<f64>) -> ParameterGradient {
        let d = trace.dim;
        let n_pts = trace.n_points;
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        let mut dm = 0.0;
        let mut xbar = xbar;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let width = layer.weights.nrows();
            let block = width * n_pts;
            let z = &trace.pre[l];
            let mut zbar = DMatrix::zeros(width, z.ncols());
            {
                let zs = z.as_slice();
                let xb = xbar.as_slice();
                let zb = zbar.as_mut_slice();
                for e in 0..block {
                    let (sp, spp, ds_dm, dsp_dm) = self.activation.all(zs[e]);
                    let mut sbar = 0.0;
                    for k in 1..=d {
                        sbar += xb[k * block + e] * zs[k * block + e];
                        zb[k * block + e] = sp * xb[k * block + e];
                    }
                    zb[e] = xb[e] * sp + sbar * spp;
                    dm += xb[e] * ds_dm + sbar * dsp_dm;
                }
            }
            let x_prev = &trace.inputs[l];
            let gw = matmul(&zbar, Op::N, x_prev, Op::T);
            let mut gb = DVector::zeros(width);
            for p in 0..n_pts {
                for i in 0..width {
                    gb[i] += zbar[(i, p)];
                }
            }
            grads.push((gw, gb));
            if l > 0 {
                xbar = matmul(&layer.weights, Op::T, &zbar, Op::N);
            }
        }
        grads.reverse();
        ParameterGradient {
            layers: grads,
            dm: self.activation.is_trainable().then_some(dm),
        }
    }

    /// `Φ_L(x)` and its spatial Jacobian `∂Φ_L/∂x` at a single point.
    pub fn forward_with_jacobian(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_finite()?;
        if x.len() != self.input_dim || x.iter().any(|v| !v.is_finite()) {
            return Err(FoslsError::InvalidArgument(format!("bad evaluation point {x:?}")));
        }
        let t = self.trace(x);
        let out = t.output();
        let n = out.nrows();
        let values = DVector::from_fn(n, |i, _| out[(i, 0)]);
        let jac = DMatrix::from_fn(n, self.input_dim, |i, k| out[(i, k + 1)]);
        Ok((values, jac))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NetworkDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDoc = serde_json::from_str(text)?;
        doc.into_network()
    }
}

/// Intermediate matrices of a batched forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    n_points: usize,
    dim: usize,
    /// `X_0 .. X_L`
    inputs: Vec<DMatrix<f64>>,
    /// `Z_1 .. Z_L`
    pre: Vec<DMatrix<f64>>,
}

impl ForwardTrace {
    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Last-layer channels, `n_L x N(d+1)`.
    pub fn output(&self) -> &DMatrix<f64> {
        self.inputs.last().unwrap()
    }
}

/// Gradient with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradient {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub dm: Option<f64>,
}

impl ParameterGradient {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.bias.len())))
                .collect(),
            dm: net.activation.is_trainable().then_some(0.0),
        }
    }

    /// Flattened in the order of [`Network::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out.push(w[(i, j)]);
                }
            }
            out.extend(b.iter());
        }
        if let Some(m) = self.dm {
            out.push(m);
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParameterGradient) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
        if let (Some(m), Some(om)) = (self.dm.as_mut(), other.dm) {
            *m += om;
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Breaking-hyperplane first layer on a box: `n_per_axis` units per axis, alternating signs.
pub fn init_breaking_layer(domain: &BoxDomain, n_per_axis: usize) -> Result<Layer> {
    if n_per_axis == 0 {
        return Err(FoslsError::Configuration("need at least one unit per axis".into()));
    }
    let d = domain.dim();
    let width = d * n_per_axis;
    let mut weights = DMatrix::zeros(width, d);
    let mut bias = DVector::zeros(width);
    for k in 0..d {
        for i in 1..=n_per_axis {
            let row = k * n_per_axis + (i - 1);
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            let t = domain.lower()[k] + domain.extent(k) * i as f64 / (n_per_axis + 1) as f64;
            weights[(row, k)] = sign;
            bias[row] = -sign * t;
        }
    }
    Ok(Layer { weights, bias })
}

/// One hidden layer with breaking points `i/(n1+1)` on the unit interval.
pub fn init_1d(n1: usize, activation: Activation) -> Result<Network> {
    let layer = init_breaking_layer(&BoxDomain::unit(1), n1)?;
    Network::new(1, vec![layer], activation)
}

/// One hidden layer of `d * n_per_axis` axis-aligned breaking hyperplanes on the unit cube.
pub fn init_tensor(n_per_axis: usize, d: usize, activation: Activation) -> Result<Network> {
    if !(2..=3).contains(&d) {
        return Err(FoslsError::Configuration(format!("tensor initialization needs d in 2..=3, got {d}")));
    }
    let layer = init_breaking_layer(&BoxDomain::unit(d), n_per_axis)?;
    Network::new(d, vec![layer], activation)
}

/// Sets layers `2..L` to identity weights and zero biases.
pub fn init_identity_tail(mut net: Network) -> Result<Network> {
    let width = net.layers[0].weights.nrows();
    for (l, layer) in net.layers.iter_mut().enumerate().skip(1) {
        if layer.weights.nrows() != width || layer.weights.ncols() != width {
            return Err(FoslsError::Configuration(format!(
                "identity initialization needs equal widths, layer {} is {}x{}",
                l + 1,
                layer.weights.nrows(),
                layer.weights.ncols()
            )));
        }
        layer.weights = DMatrix::identity(width, width);
        layer.bias = DVector::zeros(width);
    }
    Ok(net)
}

/// The standard network on `domain`: breaking-hyperplane first layer, identity deeper layers.
pub fn build_network(domain: &BoxDomain, depth: usize, width: usize, activation: Activation) -> Result<Network> {
    let d = domain.dim();
    if depth == 0 {
        return Err(FoslsError::Configuration("network depth must be at least 1".into()));
    }
    if width == 0 || width % d != 0 {
        return Err(FoslsError::Configuration(format!(
            "width {width} cannot be split into {d} equal groups of axis-aligned units"
        )));
    }
    let first = init_breaking_layer(domain, width / d)?;
    let mut layers = vec![first];
    for _ in 1..depth {
        layers.push(Layer {
            weights: DMatrix::zeros(width, width),
            bias: DVector::zeros(width),
        });
    }
    init_identity_tail(Network::new(d, layers, activation)?)
}

/// Spanning functions and their derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanningSample {
    pub phi: DVector<f64>,
    pub grad_phi: DMatrix<f64>,
    pub tau_component_values: DVector<f64>,
    pub div_tau: DMatrix<f64>,
}

pub fn spanning_sample(net: &Network, lifting: &Lifting, x: &[f64]) -> Result<SpanningSample> {
    let (values, jac) = net.forward_with_jacobian(x)?;
    let g = lifting.value(x);
    let dg = lifting.gradient(x);
    let phi = &values * g;
    let grad_phi = DMatrix::from_fn(values.len(), x.len(), |i, k| g * jac[(i, k)] + values[i] * dg[k]);
    Ok(SpanningSample {
        phi,
        grad_phi,
        tau_component_values: values,
        div_tau: jac,
    })
}

/// Spanning functions evaluated on a batch of points, each field `n_L x N`.
#[derive(Debug, Clone)]
pub struct SpanningBatch {
    pub trace: ForwardTrace,
    /// `Φ_L`
    pub raw: DMatrix<f64>,
    /// `∂_k Φ_L`
    pub raw_grad: Vec<DMatrix<f64>>,
    /// `g_D Φ_L`
    pub phi: DMatrix<f64>,
    /// `∂_k (g_D Φ_L)`
    pub grad_phi: Vec<DMatrix<f64>>,
    pub lift: Vec<f64>,
    pub lift_grad: Vec<[f64; 3]>,
}

impl SpanningBatch {
    pub fn evaluate(net: &Network, lifting: &Lifting, points: &[f64]) -> Self {
        let trace = net.trace(points);
        let d = trace.dim;
        let n_pts = trace.n_points;
        let out = trace.output();
        let raw = out.columns(0, n_pts).into_owned();
        let raw_grad: Vec<DMatrix<f64>> = (0..d).map(|k| out.columns((k + 1) * n_pts, n_pts).into_owned()).collect();
        let lift: Vec<f64> = (0..n_pts).map(|p| lifting.value(&points[p * d..(p + 1) * d])).collect();
        let lift_grad: Vec<[f64; 3]> = (0..n_pts).map(|p| lifting.gradient(&points[p * d..(p + 1) * d])).collect();
        let mut phi = raw.clone();
        for (p, mut col) in phi.column_iter_mut().enumerate() {
            col *= lift[p];
        }
        let grad_phi = (0..d)
            .map(|k| {
                DMatrix::from_fn(raw.nrows(), n_pts, |i, p| lift[p] * raw_grad[k][(i, p)] + lift_grad[p][k] * raw[(i, p)])
            })
            .collect();
        Self {
            trace,
            raw,
            raw_grad,
            phi,
            grad_phi,
            lift,
            lift_grad,
        }
    }

    pub fn len(&self) -> usize {
        self.trace.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.trace.n_points == 0
    }

    pub fn width(&self) -> usize {
        self.raw.nrows()
    }

    pub fn dim(&self) -> usize {
        self.trace.dim
    }
}

/// Adjoints of the spanning fields of a batch, same shapes as in [`SpanningBatch`].
#[derive(Debug, Clone)]
pub struct SpanningCotangents {
    pub phi: DMatrix<f64>,
    pub grad_phi: Vec<DMatrix<f64>>,
    pub tau: DMatrix<f64>,
    pub div_tau: Vec<DMatrix<f64>>,
}

impl SpanningCotangents {
    pub fn zeros(width: usize, dim: usize, n_points: usize) -> Self {
        Self {
            phi: DMatrix::zeros(width, n_points),
            grad_phi: vec![DMatrix::zeros(width, n_points); dim],
            tau: DMatrix::zeros(width, n_points),
            div_tau: vec![DMatrix::zeros(width, n_points); dim],
        }
    }

    fn all_finite(&self) -> bool {
        std::iter::once(&self.phi)
            .chain(&self.grad_phi)
            .chain(std::iter::once(&self.tau))
            .chain(&self.div_tau)
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Gradient of `Σ_points <cotangent, spanning fields>` with respect to the network parameters.
pub fn backprop_parameter_gradient(
    net: &Network,
    batch: &SpanningBatch,
    cot: &SpanningCotangents,
) -> Result<ParameterGradient> {
    if !cot.all_finite() {
        return Err(FoslsError::Numerical("non-finite cotangent".into()));
    }
    let d = batch.dim();
    let n_pts = batch.len();
    let width = batch.width();
    let mut xbar = DMatrix::zeros(width, n_pts * (d + 1));
    for p in 0..n_pts {
        let g = batch.lift[p];
        let dg = batch.lift_grad[p];
        for i in 0..width {
            let mut v = cot.tau[(i, p)] + cot.phi[(i, p)] * g;
            for k in 0..d {
                v += cot.grad_phi[k][(i, p)] * dg[k];
                xbar[(i, (k + 1) * n_pts + p)] = cot.div_tau[k][(i, p)] + cot.grad_phi[k][(i, p)] * g;
            }
            xbar[(i, p)] = v;
        }
    }
    Ok(net.backward(&batch.trace, xbar))
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    /// row-major
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    input_dim: usize,
    activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<f64>,
    layers: Vec<LayerDoc>,
}

impl From<&Network> for NetworkDoc {
    fn from(net: &Network) -> Self {
        Self {
            input_dim: net.input_dim,
            activation: net.activation.name().into(),
            m: match net.activation {
                Activation::ScaledTanh { m } => Some(m),
                Activation::ReQU => None,
            },
            layers: net
                .layers
                .iter()
                .map(|l| LayerDoc {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: (0..l.weights.nrows())
                        .flat_map(|i| (0..l.weights.ncols()).map(move |j| (i, j)))
                        .map(|(i, j)| l.weights[(i, j)])
                        .collect(),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl NetworkDoc {
    fn into_network(self) -> Result<Network> {
        let activation = Activation::from_name(&self.activation, self.m.unwrap_or(TANH_M_INIT))?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in self.layers {
            if l.weights.len() != l.rows * l.cols {
                return Err(FoslsError::InvalidArgument(format!(
                    "layer payload has {} weights for a {}x{} matrix",
                    l.weights.len(),
                    l.rows,
                    l.cols
                )));
            }
            layers.push(Layer {
                weights: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                bias: DVector::from_vec(l.bias),
            });
        }
        Network::new(self.input_dim, layers, activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_unit(w: f64, b: f64) -> Network {
        Network::new(
            1,
            vec![Layer {
                weights: DMatrix::from_element(1, 1, w),
                bias: DVector::from_element(1, b),
            }],
            Activation::ReQU,
        )
        .unwrap()
    }

    #[test]
    fn single_unit_values() {
        let net = single_unit(1.0, -0.5);
        let (v, j) = net.forward_with_jacobian(&[0.75]).unwrap();
        assert!((v[0] - 0.0625).abs() < 1e-15);
        assert!((j[(0, 0)] - 0.5).abs() < 1e-15);
        let (v, j) = net.forward_with_jacobian(&[0.25]).unwrap();
        assert_eq!((v[0], j[(0, 0)]), (0.0, 0.0));
    }

    #[test]
    fn relu_rejected_and_unknown_names() {
        assert!(matches!(Activation::from_name("relu", 1.0), Err(FoslsError::Configuration(_))));
        assert!(Activation::from_name("sigmoid", 1.0).is_err());
        assert_eq!(Activation::from_name("ReQU", 1.0).unwrap(), Activation::ReQU);
    }

    #[test]
    fn requ_second_derivative_at_zero() {
        assert_eq!(Activation::ReQU.d2(0.0), 0.0);
        assert_eq!(Activation::ReQU.d2(1e-300), 2.0);
    }

    #[test]
    fn breaking_points_1d() {
        for n in [10usize, 16] {
            let net = init_1d(n, Activation::ReQU).unwrap();
            let l = &net.layers()[0];
            for i in 1..=n {
                let t = i as f64 / (n + 1) as f64;
                let z = l.weights[(i - 1, 0)] * t + l.bias[i - 1];
                assert!(z.abs() < 1e-14);
                let expected_sign = if i % 2 == 1 { 1.0 } else { -1.0 };
                assert_eq!(l.weights[(i - 1, 0)], expected_sign);
            }
        }
        let net = init_1d(10, Activation::ReQU).unwrap();
        assert_eq!(net.layers()[0].weights[(1, 0)], -1.0);
        assert!((net.layers()[0].bias[1] - 2.0 / 11.0).abs() < 1e-16);
    }

    #[test]
    fn tensor_lines() {
        let net = init_tensor(2, 2, Activation::ReQU).unwrap();
        let l = &net.layers()[0];
        assert_eq!(l.weights.nrows(), 4);
        for (row, (axis, t)) in [(0, 1.0 / 3.0), (0, 2.0 / 3.0), (1, 1.0 / 3.0), (1, 2.0 / 3.0)].iter().enumerate() {
            let other = 1 - axis;
            assert_eq!(l.weights[(row, other)], 0.0);
            assert!((l.weights[(row, *axis)] * t + l.bias[row]).abs() < 1e-15);
        }
        let wide = build_network(&BoxDomain::unit(2), 2, 32, Activation::ReQU).unwrap();
        assert_eq!(wide.layers()[0].weights.nrows(), 32);
        assert_eq!(wide.layers()[1].weights, DMatrix::identity(32, 32));
        assert!(build_network(&BoxDomain::unit(2), 1, 33, Activation::ReQU).is_err());
    }

    #[test]
    fn identity_tail_composes() {
        let net = build_network(&BoxDomain::unit(1), 2, 16, Activation::ReQU).unwrap();
        let shallow = init_1d(16, Activation::ReQU).unwrap();
        for x in [0.03, 0.31, 0.5, 0.77, 0.99] {
            let (v1, j1) = shallow.forward_with_jacobian(&[x]).unwrap();
            let (v2, j2) = net.forward_with_jacobian(&[x]).unwrap();
            for i in 0..16 {
                let a = v1[i];
                let p = a.max(0.0);
                assert!((v2[i] - p * p).abs() < 1e-15);
                assert!((j2[(i, 0)] - 2.0 * p * j1[(i, 0)]).abs() < 1e-13);
            }
        }
        let mismatched = Network::new(
            1,
            vec![
                Layer { weights: DMatrix::zeros(3, 1), bias: DVector::zeros(3) },
                Layer { weights: DMatrix::zeros(2, 3), bias: DVector::zeros(2) },
            ],
            Activation::ReQU,
        )
        .unwrap();
        assert!(init_identity_tail(mismatched).is_err());
    }

    #[test]
    fn spanning_values_by_hand() {
        let net = single_unit(1.0, -1.0 / 3.0);
        let lift = Lifting::Bubble(BoxDomain::unit(1));
        let s = spanning_sample(&net, &lift, &[2.0 / 3.0]).unwrap();
        assert!((s.phi[0] - 2.0 / 81.0).abs() < 1e-15);
        let s = spanning_sample(&net, &lift, &[1.0]).unwrap();
        assert_eq!(s.phi[0], 0.0);
    }

    #[test]
    fn params_roundtrip_and_json() {
        let mut net = build_network(&BoxDomain::unit(2), 2, 4, Activation::ScaledTanh { m: 50.0 }).unwrap();
        net.jitter(0.1, 7);
        let theta = net.params();
        assert_eq!(theta.len(), net.param_count());
        assert_eq!(*theta.last().unwrap(), 50.0);
        let mut other = build_network(&BoxDomain::unit(2), 2, 4, Activation::ScaledTanh { m: 1.0 }).unwrap();
        other.set_params(&theta).unwrap();
        assert_eq!(other, net);
        let back = Network::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn one_unit_phi_gradient_by_hand() {
        let (w, b, x) = (1.3, -0.4, 0.7);
        let net = single_unit(w, b);
        let lift = Lifting::Bubble(BoxDomain::unit(1));
        let batch = SpanningBatch::evaluate(&net, &lift, &[x]);
        let mut cot = SpanningCotangents::zeros(1, 1, 1);
        cot.phi[(0, 0)] = 1.0;
        let g = backprop_parameter_gradient(&net, &batch, &cot).unwrap();
        let z = w * x + b;
        let gd = x * (1.0 - x);
        assert!((g.layers[0].0[(0, 0)] - gd * 2.0 * z * x).abs() < 1e-14);
        assert!((g.layers[0].1[0] - gd * 2.0 * z).abs() < 1e-14);
        let zero = backprop_parameter_gradient(&net, &batch, &SpanningCotangents::zeros(1, 1, 1)).unwrap();
        assert_eq!(zero.norm(), 0.0);
    }
}

//! Run configuration: a TOML file with one table per concern.
//!
//! Every key is optional. Omitted network and training keys fall back to
//! dimension-dependent defaults (the 1D interface setup or the 2D setup).

use crate::error::CliError;
use fosls::assembly::{EPSILON_DEFAULT, MU_DEFAULT};
use fosls::fields::{problem_by_id, ProblemSpec};
use fosls::network::{build_network, Activation, Network, TANH_M_INIT};
use fosls::poincare::{ALPHA1_DEFAULT, ALPHA2_DEFAULT};
use fosls::training::{AdamParams, Decay, LossKind, PoincareMode, QuadSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub base_seed: u64,
    pub problem: ProblemSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub metrics: MetricsSection,
    pub outputs: OutputSection,
    pub sweep: SweepSection,
    pub variance: VarianceSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub id: String,
    /// interface1d only
    pub kappa0: Option<f64>,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            id: "interface1d".into(),
            kappa0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// hidden layers; 1 in 1D, 2 in 2D when omitted
    pub layers: Option<usize>,
    /// width of every hidden layer; 16 in 1D, 32 in 2D when omitted
    pub width: Option<usize>,
    pub activation: String,
    /// initial slope of the tanh activation
    pub tanh_m: f64,
    /// standard deviation of a Gaussian perturbation of the initial parameters
    pub jitter: f64,
    pub jitter_seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            layers: None,
            width: None,
            activation: "requ".into(),
            tanh_m: TANH_M_INIT,
            jitter: 0.0,
            jitter_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    P1,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: Option<usize>,
    /// iteration count used with `--full`
    pub full_iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub decay_factor: f64,
    /// length of the decay window at the end of training; 0 disables decay
    pub decay_tail: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub poincare_period: usize,
    pub poincare_mode: PoincareMode,
    pub rule: RuleName,
    /// P1 cells per axis
    pub cells: Option<Vec<usize>>,
    /// Monte Carlo points
    pub points: usize,
    pub loss: LossKind,
    pub log_every: usize,
    pub terminal_on_fine: bool,
    pub record_wall_time: bool,
    pub variance_probe: Option<ProbeSection>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: None,
            full_iterations: None,
            learning_rate: None,
            decay_factor: 0.995,
            decay_tail: 1000,
            beta1: AdamParams::default().beta1,
            beta2: AdamParams::default().beta2,
            eps_adam: AdamParams::default().eps,
            mu: MU_DEFAULT,
            epsilon: EPSILON_DEFAULT,
            alpha1: ALPHA1_DEFAULT,
            alpha2: ALPHA2_DEFAULT,
            poincare_period: 100,
            poincare_mode: PoincareMode::Estimate,
            rule: RuleName::P1,
            cells: None,
            points: 2000,
            loss: LossKind::Fosls,
            log_every: 10,
            terminal_on_fine: false,
            record_wall_time: false,
            variance_probe: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// probe every `period` iterations, starting at 0
    pub period: usize,
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// fine trapezoid nodes per axis; 100001 in 1D, 1001 in 2D when omitted
    pub fine_nodes: Option<Vec<usize>>,
    pub tv_window: [f64; 2],
    pub tv_nodes: usize,
    /// uniform grid nodes per axis of the solution samples
    pub sample_nodes: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            fine_nodes: None,
            tv_window: [0.4, 0.6],
            tv_nodes: 4001,
            sample_nodes: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// checkpoint every this many iterations; 0 writes only the final one
    pub checkpoint_period: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            checkpoint_period: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub kappa0: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kappa0: vec![1e-6, 1e-3, 1e3, 1e6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceSection {
    pub fosls_points: Vec<usize>,
    pub ritz_points: Vec<usize>,
    pub iterations: usize,
    pub rule: RuleName,
    /// final relative energy error above which a completed run counts as unstable
    pub plateau_threshold: f64,
}

impl Default for VarianceSection {
    fn default() -> Self {
        Self {
            fosls_points: vec![50, 100, 200, 400, 600],
            ritz_points: vec![300, 400, 600, 1000, 2000],
            iterations: 10_000,
            rule: RuleName::Mc,
            plateau_threshold: 0.1,
        }
    }
}

/// Optional overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub full: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.base_seed = s;
        }
        if let Some(out) = &o.out {
            self.outputs.dir = out.clone();
        }
        if o.full {
            if let Some(n) = self.train.full_iterations {
                self.train.iterations = Some(n);
            }
        }
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn problem(&self) -> Result<ProblemSpec, CliError> {
        if self.problem.id != "interface1d" && self.problem.kappa0.is_some() {
            return Err(CliError::Config(format!("kappa0 only applies to interface1d, not '{}'", self.problem.id)));
        }
        Ok(problem_by_id(&self.problem.id, self.problem.kappa0)?)
    }

    pub fn network(&self, problem: &ProblemSpec) -> Result<Network, CliError> {
        let two_d = problem.dim() == 2;
        let n = &self.network;
        let layers = n.layers.unwrap_or(if two_d { 2 } else { 1 });
        let width = n.width.unwrap_or(if two_d { 32 } else { 16 });
        let activation = Activation::from_name(&n.activation, n.tanh_m)?;
        let mut net = build_network(&problem.domain, layers, width, activation)?;
        if n.jitter < 0.0 || !n.jitter.is_finite() {
            return Err(CliError::Config(format!("jitter must be a nonnegative number, got {}", n.jitter)));
        }
        if n.jitter > 0.0 {
            net.jitter(n.jitter, n.jitter_seed);
        }
        Ok(net)
    }

    pub fn iterations(&self) -> usize {
        self.train.iterations.unwrap_or(2500)
    }

    pub fn fine_nodes(&self, dim: usize) -> Vec<usize> {
        self.metrics
            .fine_nodes
            .clone()
            .unwrap_or_else(|| vec![if dim == 2 { 1001 } else { 100_001 }; dim])
    }

    pub fn quadrature(&self, rule: RuleName, dim: usize) -> QuadSpec {
        match rule {
            RuleName::P1 => QuadSpec::P1 {
                cells: self
                    .train
                    .cells
                    .clone()
                    .unwrap_or_else(|| vec![if dim == 2 { 100 } else { 1000 }; dim]),
            },
            RuleName::Mc => QuadSpec::MonteCarlo { points: self.train.points },
        }
    }

    pub fn train_config(&self, dim: usize) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let iterations = self.iterations();
        let mut c = TrainConfig::new(self.quadrature(t.rule, dim), self.fine_nodes(dim));
        c.iterations = iterations;
        c.learning_rate = t.learning_rate.unwrap_or(if dim == 2 { 1e-3 } else { 1e-4 });
        c.decay = if t.decay_tail == 0 {
            Decay::None
        } else {
            Decay::Exponential {
                factor: t.decay_factor,
                start: iterations.saturating_sub(t.decay_tail),
            }
        };
        c.adam = AdamParams {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps_adam,
        };
        c.mu = t.mu;
        c.epsilon = t.epsilon;
        c.alpha1 = t.alpha1;
        c.alpha2 = t.alpha2;
        c.poincare_period = t.poincare_period;
        c.poincare_mode = t.poincare_mode;
        c.loss = t.loss;
        c.log_every = t.log_every;
        c.base_seed = self.base_seed;
        c.terminal_on_fine = t.terminal_on_fine;
        c.record_wall_time = t.record_wall_time;
        c.validate(dim)?;
        if let Some(p) = t.variance_probe {
            if p.period == 0 || p.resamples < 2 {
                return Err(CliError::Config("variance_probe needs period >= 1 and resamples >= 2".into()));
            }
        }
        let [a, b] = self.metrics.tv_window;
        if !(a < b) || self.metrics.tv_nodes < 2 || self.metrics.sample_nodes < 2 {
            return Err(CliError::Config("metrics need a nonempty TV window and at least two nodes".into()));
        }
        Ok(c)
    }
}

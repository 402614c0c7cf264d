//! The experiment commands. Each writes into an output directory and returns
//! an in-memory summary so callers can inspect results without parsing files.

use crate::config::{RuleName, RunConfig};
use crate::error::CliError;
use crate::output::{self, Checkpoint};
use fosls::assembly::GramParts;
use fosls::fields::ProblemSpec;
use fosls::metrics::{gradient_error_profile, tv_gradient_error, ErrorReport, RATIO_BOUNDS};
use fosls::network::Network;
use fosls::poincare::{estimate_poincare_checked, PoincareEstimate};
use fosls::quadrature::{derive_seed, trapezoid_rule};
use fosls::training::{history_csv, DiscreteSolution, HistoryRecord, LossKind, Trainer, VarianceReport, TAG_PROBE};
use nalgebra::DVector;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize)]
pub struct ProbeRecord {
    pub iteration: usize,
    pub loss_fine: f64,
    pub max_variance: f64,
    pub max_bound: f64,
    pub max_ratio: f64,
    pub max_c_grad: f64,
    #[serde(skip)]
    pub full: Option<VarianceReport>,
}

/// Everything a training run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub history: Vec<HistoryRecord>,
    pub poincare_log: Vec<PoincareEstimate>,
    pub probes: Vec<ProbeRecord>,
    pub solution: Option<DiscreteSolution>,
    pub report: Option<ErrorReport>,
    pub tv: Option<f64>,
    /// diagnostics of a non-finite abort
    pub aborted: Option<String>,
}

#[derive(Debug, Serialize)]
struct ReportDoc<'a> {
    problem: &'a str,
    kappa0: Option<f64>,
    config_hash: String,
    base_seed: u64,
    iterations_completed: usize,
    aborted: Option<&'a str>,
    report: Option<&'a ErrorReport>,
    poincare: Option<&'a PoincareEstimate>,
    ill_conditioned: bool,
    tv_gradient_error: Option<f64>,
}

fn probe(trainer: &mut Trainer, resamples: usize, seed: u64) -> Result<ProbeRecord, CliError> {
    let iteration = trainer.state.iteration;
    let r = trainer.probe_variance(resamples, derive_seed(seed, TAG_PROBE, iteration as u64))?;
    Ok(ProbeRecord {
        iteration,
        loss_fine: r.loss_fine,
        max_variance: r.max_variance,
        max_bound: r.bounds.iter().copied().fold(0.0, f64::max),
        max_ratio: r.max_ratio,
        max_c_grad: r.c_grad.iter().copied().fold(0.0, f64::max),
        full: Some(r),
    })
}

fn probe_csv(probes: &[ProbeRecord]) -> String {
    let mut s = String::from(output::VARIANCE_HEADER);
    s.push('\n');
    for p in probes {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e}",
            p.iteration, p.loss_fine, p.max_variance, p.max_bound, p.max_ratio, p.max_c_grad
        );
    }
    s
}

fn is_numerical(e: &CliError) -> bool {
    matches!(e, CliError::Numerical(_))
}

fn diagnostics(e: CliError) -> String {
    match e {
        CliError::Numerical(m) => m,
        other => other.to_string(),
    }
}

/// Trains `net` on `problem` and writes the run directory. Non-finite aborts are
/// recorded in the outcome instead of being returned as errors.
pub fn train_into(cfg: &RunConfig, problem: &ProblemSpec, net: Network, dir: &Path) -> Result<RunOutcome, CliError> {
    let tc = cfg.train_config(problem.dim())?;
    let iterations = tc.iterations;
    let hash = cfg.hash();
    let mut trainer = Trainer::new(problem, net, tc)?;
    let mut probes = Vec::new();
    let mut aborted = None;
    let period = cfg.outputs.checkpoint_period;
    output::write(&dir.join("config.toml"), &cfg.to_toml())?;

    for i in 0..iterations {
        if let Some(p) = cfg.train.variance_probe {
            if i % p.period == 0 {
                match probe(&mut trainer, p.resamples, cfg.base_seed) {
                    Ok(r) => probes.push(r),
                    Err(e) if is_numerical(&e) => {
                        aborted = Some(diagnostics(e));
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if let Err(e) = trainer.step() {
            let e = CliError::from(e);
            if !is_numerical(&e) {
                return Err(e);
            }
            log::warn!("{e}");
            aborted = Some(diagnostics(e));
            break;
        }
        if period > 0 && (i + 1) % period == 0 {
            if let Some(c) = &trainer.state.coefficients {
                let ck = Checkpoint::new(i + 1, &hash, &trainer.state.net, c, trainer.poincare())?;
                output::write_json(&dir.join(format!("checkpoints/iter_{:06}.json", i + 1)), &ck)?;
            }
        }
    }

    let (solution, report) = if aborted.is_none() {
        match trainer.finish().and_then(|s| trainer.report(&s).map(|r| (s, r))) {
            Ok((s, r)) => (Some(s), r),
            Err(e) => {
                let e = CliError::from(e);
                if !is_numerical(&e) {
                    return Err(e);
                }
                aborted = Some(diagnostics(e));
                (None, None)
            }
        }
    } else {
        (None, None)
    };

    let tv = match (&solution, problem.dim(), &problem.exact) {
        (Some(s), 1, Some(_)) => {
            let [a, b] = cfg.metrics.tv_window;
            Some(tv_gradient_error(s, problem, (a, b), cfg.metrics.tv_nodes)?)
        }
        _ => None,
    };

    output::write(&dir.join("history.csv"), &history_csv(&trainer.history))?;
    output::write(&dir.join("poincare_updates.csv"), &output::poincare_csv(&trainer.poincare_log))?;
    if !probes.is_empty() {
        output::write(&dir.join("variance.csv"), &probe_csv(&probes))?;
    }
    if let Some(s) = &solution {
        output::write(&dir.join("samples.csv"), &output::samples_csv(s, problem, cfg.metrics.sample_nodes))?;
        let ck = Checkpoint::new(trainer.state.iteration, &hash, &s.net, &s.coefficients, s.poincare)?;
        output::write_json(&dir.join("checkpoints/final.json"), &ck)?;
    }
    let last = trainer.poincare_log.last();
    output::write_json(
        &dir.join("report.json"),
        &ReportDoc {
            problem: &problem.id,
            kappa0: cfg.problem.kappa0,
            config_hash: hash.clone(),
            base_seed: cfg.base_seed,
            iterations_completed: trainer.state.iteration,
            aborted: aborted.as_deref(),
            report: report.as_ref(),
            poincare: last,
            ill_conditioned: trainer.poincare_log.iter().any(|e| e.ill_conditioned()),
            tv_gradient_error: tv,
        },
    )?;
    output::write(&dir.join("README.md"), output::OUTPUT_README)?;

    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        history: trainer.history,
        poincare_log: trainer.poincare_log,
        probes,
        solution,
        report,
        tv,
        aborted,
    })
}

/// `run`: one training run; a non-finite abort becomes a numerical error after the files are written.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let problem = cfg.problem()?;
    let net = cfg.network(&problem)?;
    let out = train_into(cfg, &problem, net, &cfg.outputs.dir)?;
    match &out.aborted {
        Some(m) => Err(CliError::Numerical(m.clone())),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessRow {
    pub iteration: usize,
    pub kappa0: f64,
    pub ratio: f64,
    pub ratio_nonrobust: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoincareRow {
    pub kappa0: f64,
    pub estimate: f64,
    pub last_value: f64,
    pub reference: f64,
    pub rel_error: f64,
    pub ill_conditioned: bool,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub runs: Vec<(f64, RunOutcome)>,
    pub robustness: Vec<RobustnessRow>,
    pub poincare: Vec<PoincareRow>,
}

fn kappa_dir(k: f64) -> String {
    format!("kappa0_{k:e}")
}

/// `sweep-kappa`: one interface run per κ₀, with combined ratio and Poincaré tables.
pub fn cmd_sweep_kappa(cfg: &RunConfig, kappas: &[f64]) -> Result<SweepOutcome, CliError> {
    if cfg.problem.id != "interface1d" {
        return Err(CliError::Config(format!("sweep-kappa needs interface1d, got '{}'", cfg.problem.id)));
    }
    if kappas.is_empty() {
        return Err(CliError::Config("empty kappa0 list".into()));
    }
    let mut runs = Vec::new();
    let mut robustness = Vec::new();
    let mut poincare = Vec::new();
    for &k in kappas {
        let mut c = cfg.clone();
        c.problem.kappa0 = Some(k);
        let problem = c.problem()?;
        let net = c.network(&problem)?;
        let out = train_into(&c, &problem, net, &cfg.outputs.dir.join(kappa_dir(k)))?;
        if let Some(m) = &out.aborted {
            return Err(CliError::Numerical(format!("kappa0 = {k}: {m}")));
        }
        for r in &out.history {
            if let Some(rep) = &r.report {
                robustness.push(RobustnessRow {
                    iteration: r.iteration,
                    kappa0: k,
                    ratio: rep.ratio.unwrap_or(f64::NAN),
                    ratio_nonrobust: rep.ratio_unweighted.unwrap_or(f64::NAN),
                });
            }
        }
        let reference = problem.poincare_reference.expect("interface problems carry a reference");
        if let Some(last) = out.poincare_log.last() {
            poincare.push(PoincareRow {
                kappa0: k,
                estimate: last.running_max,
                last_value: last.value,
                reference,
                rel_error: (last.running_max - reference).abs() / reference,
                ill_conditioned: out.poincare_log.iter().any(|e| e.ill_conditioned()),
            });
        }
        runs.push((k, out));
    }
    let mut s = String::from(output::ROBUSTNESS_HEADER);
    s.push('\n');
    for r in &robustness {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.iteration,
            r.kappa0,
            r.ratio,
            r.ratio_nonrobust,
            RATIO_BOUNDS.0,
            RATIO_BOUNDS.1
        );
    }
    output::write(&cfg.outputs.dir.join("robustness.csv"), &s)?;
    let mut s = String::from(output::POINCARE_SWEEP_HEADER);
    s.push('\n');
    for r in &poincare {
        let _ = writeln!(
            s,
            "{:e},{:e},{:e},{:e},{:e},{}",
            r.kappa0, r.estimate, r.last_value, r.reference, r.rel_error, r.ill_conditioned
        );
    }
    output::write(&cfg.outputs.dir.join("poincare.csv"), &s)?;
    output::write(&cfg.outputs.dir.join("README.md"), output::OUTPUT_README)?;
    Ok(SweepOutcome {
        runs,
        robustness,
        poincare,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityEntry {
    pub loss: LossKind,
    pub points: usize,
    pub iterations_completed: usize,
    pub aborted: Option<String>,
    pub final_rel_u: Option<f64>,
    /// aborted, or finished above the plateau threshold
    pub unstable: bool,
}

/// `variance-study`: FOSLS and Deep Ritz over the configured point counts.
pub fn cmd_variance_study(cfg: &RunConfig) -> Result<Vec<StabilityEntry>, CliError> {
    let v = &cfg.variance;
    let problem = cfg.problem()?;
    let mut entries = Vec::new();
    let runs = v
        .fosls_points
        .iter()
        .map(|&n| (LossKind::Fosls, n))
        .chain(v.ritz_points.iter().map(|&n| (LossKind::DeepRitz, n)));
    for (loss, n) in runs {
        let mut c = cfg.clone();
        c.train.loss = loss;
        c.train.iterations = Some(v.iterations);
        c.train.rule = v.rule;
        match v.rule {
            RuleName::Mc => c.train.points = n,
            RuleName::P1 => {
                if n % 2 != 0 || problem.dim() != 1 {
                    return Err(CliError::Config(format!("P1 point count {n} must be even and one-dimensional")));
                }
                c.train.cells = Some(vec![n / 2]);
            }
        }
        let tag = match loss {
            LossKind::Fosls => "fosls",
            LossKind::DeepRitz => "deep-ritz",
        };
        let dir = cfg.outputs.dir.join(format!("{tag}_{n}"));
        let net = c.network(&problem)?;
        let out = train_into(&c, &problem, net, &dir)?;
        output::write(&cfg.outputs.dir.join(format!("traj_{tag}_{n}.csv")), &history_csv(&out.history))?;
        let final_rel_u = out.report.map(|r| r.rel_u);
        let unstable = out.aborted.is_some() || final_rel_u.is_none_or(|e| !(e <= v.plateau_threshold));
        entries.push(StabilityEntry {
            loss,
            points: n,
            iterations_completed: out.history.len(),
            aborted: out.aborted,
            final_rel_u,
            unstable,
        });
    }
    output::write_json(&cfg.outputs.dir.join("stability.json"), &entries)?;
    output::write(&cfg.outputs.dir.join("README.md"), output::OUTPUT_README)?;
    Ok(entries)
}

#[derive(Debug, Clone, Serialize)]
pub struct GibbsEntry {
    pub variant: String,
    pub tv: f64,
    pub rel_u: f64,
    pub rel_q: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GibbsOutcome {
    pub jump_reference: f64,
    pub entries: Vec<GibbsEntry>,
}

/// `|u*'(x₀⁺) - u*'(x₀⁻)|` at the 1D interface `x₀ = ½`.
pub fn gradient_jump(problem: &ProblemSpec) -> Option<f64> {
    let exact = problem.exact.as_ref()?;
    let x0 = 0.5;
    let h = 1e-12;
    Some(((exact.grad_u)(&[x0 + h])[0] - (exact.grad_u)(&[x0 - h])[0]).abs())
}

/// `gibbs-study`: ReQU with one and two hidden layers and a trainable-slope tanh layer.
pub fn cmd_gibbs_study(cfg: &RunConfig) -> Result<GibbsOutcome, CliError> {
    let problem = cfg.problem()?;
    if problem.dim() != 1 || problem.exact.is_none() {
        return Err(CliError::Config("gibbs-study needs a 1D problem with an exact solution".into()));
    }
    let jump = gradient_jump(&problem).expect("exact solution present");
    let [a, b] = cfg.metrics.tv_window;
    let mut entries = Vec::new();
    let mut tv_csv = String::from(output::TV_HEADER);
    tv_csv.push('\n');
    for (variant, activation, layers) in [("requ_L1", "requ", 1), ("requ_L2", "requ", 2), ("tanh_L1", "tanh", 1)] {
        let mut c = cfg.clone();
        c.network.activation = activation.into();
        c.network.layers = Some(layers);
        let net = c.network(&problem)?;
        let out = train_into(&c, &problem, net, &cfg.outputs.dir.join(variant))?;
        if let Some(m) = &out.aborted {
            return Err(CliError::Numerical(format!("{variant}: {m}")));
        }
        let sol = out.solution.as_ref().expect("completed run has a solution");
        let tv = out.tv.expect("1D run with exact solution has a TV");
        let profile = gradient_error_profile(sol, &problem, (a, b), cfg.metrics.tv_nodes)?;
        let mut s = String::from(output::PROFILE_HEADER);
        s.push('\n');
        for (x, e) in profile {
            let _ = writeln!(s, "{x:e},{e:e},{jump:e}");
        }
        output::write(&cfg.outputs.dir.join(format!("gradient_error_{variant}.csv")), &s)?;
        let _ = writeln!(tv_csv, "{variant},{tv:e},{jump:e}");
        let rep = out.report.expect("exact solution present");
        entries.push(GibbsEntry {
            variant: variant.into(),
            tv,
            rel_u: rep.rel_u,
            rel_q: rep.rel_q,
        });
    }
    output::write(&cfg.outputs.dir.join("tv.csv"), &tv_csv)?;
    output::write(&cfg.outputs.dir.join("README.md"), output::OUTPUT_README)?;
    Ok(GibbsOutcome {
        jump_reference: jump,
        entries,
    })
}

/// Desk-scale and full iteration counts of the 2D benchmarks.
pub fn iterations_2d(problem_id: &str) -> (usize, usize) {
    match problem_id {
        "circle2d" => (5000, 25_000),
        _ => (5000, 10_000),
    }
}

/// `run2d`: a 2D run plus field dumps. `full` picks the long iteration count when the config does not set one.
pub fn cmd_run2d(cfg: &RunConfig, problem_id: &str, full: bool) -> Result<RunOutcome, CliError> {
    if !matches!(problem_id, "circle2d" | "plane2d") {
        return Err(CliError::Config(format!("run2d expects circle2d or plane2d, got '{problem_id}'")));
    }
    let mut c = cfg.clone();
    c.problem.id = problem_id.into();
    let (desk, long) = iterations_2d(problem_id);
    let long = c.train.full_iterations.unwrap_or(long);
    if full {
        c.train.iterations = Some(long);
    } else if c.train.iterations.is_none() {
        c.train.iterations = Some(desk);
    }
    let problem = c.problem()?;
    let net = c.network(&problem)?;
    let out = train_into(&c, &problem, net, &c.outputs.dir)?;
    if let Some(m) = &out.aborted {
        return Err(CliError::Numerical(m.clone()));
    }
    let sol = out.solution.as_ref().expect("completed run has a solution");
    output::write(
        &c.outputs.dir.join("fields.csv"),
        &output::fields_2d_csv(sol, &problem, c.metrics.sample_nodes),
    )?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PoincareCheck {
    pub problem: String,
    pub lambda_min: f64,
    pub estimate: f64,
    pub reference: Option<f64>,
    pub rel_error: Option<f64>,
    pub alpha_sensitivity: f64,
    pub ill_conditioned: bool,
}

/// `poincare-check`: discrete estimate in the initial space on the fine rule against the reference constant.
pub fn cmd_poincare_check(cfg: &RunConfig) -> Result<PoincareCheck, CliError> {
    let problem = cfg.problem()?;
    let net = cfg.network(&problem)?;
    let tc = cfg.train_config(problem.dim())?;
    let rule = trapezoid_rule(&problem.domain, &cfg.fine_nodes(problem.dim()))?;
    let parts = GramParts::from_rule(&net, &problem, &rule, true)?;
    let d_u = DVector::from_fn(parts.n, |i, _| (parts.h_uu[(i, i)] + tc.epsilon).sqrt());
    let mass = parts.mass.as_ref().expect("mass requested");
    let e = estimate_poincare_checked(&parts.h_uu, mass, &d_u, tc.alpha1, tc.alpha2)?;
    let reference = problem.poincare_reference;
    let check = PoincareCheck {
        problem: problem.id.clone(),
        lambda_min: e.lambda_min,
        estimate: e.value,
        reference,
        rel_error: reference.map(|r| (e.value - r).abs() / r),
        alpha_sensitivity: e.alpha_sensitivity,
        ill_conditioned: e.ill_conditioned(),
    };
    output::write_json(&cfg.outputs.dir.join("poincare_check.json"), &check)?;
    Ok(check)
}

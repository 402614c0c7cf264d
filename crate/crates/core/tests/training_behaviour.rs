use fosls::assembly::{assemble, loss_at, scale, solve_ls, Coefficients, GramParts, EPSILON_DEFAULT, MU_DEFAULT};
use fosls::error::FoslsError;
use fosls::fields::{problem_interface_1d, problem_smooth_1d, ProblemSpec};
use fosls::geometry::{partition_uniform, BoxDomain};
use fosls::network::{build_network, init_1d, spanning_sample, Activation, Network};
use fosls::quadrature::{sample_p1, trapezoid_rule, QuadratureRule};
use fosls::training::*;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::Arc;

const C_P: f64 = 0.18;

fn p1(cells: usize, seed: u64) -> QuadratureRule {
    sample_p1(&partition_uniform(&BoxDomain::unit(1), &[cells]).unwrap(), seed)
}

fn optimal(net: &Network, problem: &ProblemSpec, rule: &QuadratureRule) -> (Coefficients, f64) {
    let sys = assemble(net, problem, rule, C_P).unwrap();
    let scaled = scale(&sys, EPSILON_DEFAULT).unwrap();
    let c = solve_ls(&sys, &scaled, MU_DEFAULT).unwrap();
    let l = loss_at(&sys, &c).unwrap();
    (c, l)
}

fn interface_config(iterations: usize) -> TrainConfig {
    let mut c = TrainConfig::new(QuadSpec::P1 { cells: vec![500] }, vec![20_001]);
    c.iterations = iterations;
    c
}

fn with_param(net: &Network, theta: &[f64], i: usize, delta: f64) -> Network {
    let mut t = theta.to_vec();
    t[i] += delta;
    let mut other = net.clone();
    other.set_params(&t).unwrap();
    other
}

#[test]
fn envelope_gradient_matches_finite_differences_along_training() {
    let problem = problem_interface_1d(3.0).unwrap();
    let net = init_1d(16, Activation::ReQU).unwrap();
    let mut trainer = Trainer::new(&problem, net, interface_config(0)).unwrap();
    let h = 1e-7;
    for snapshot in 0..10 {
        trainer.run(if snapshot == 0 { 1 } else { 25 }).unwrap();
        let net = trainer.state.net.clone();
        let rule = p1(500, 1000 + snapshot);
        let (c, _) = optimal(&net, &problem, &rule);
        let g = envelope_gradient(&net, &problem, &rule, &c, C_P).unwrap().to_flat();
        let theta = net.params();
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..theta.len() {
            let lp = fosls_loss(&with_param(&net, &theta, i, h), &problem, &rule, &c, C_P).unwrap();
            let lm = fosls_loss(&with_param(&net, &theta, i, -h), &problem, &rule, &c, C_P).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()) + 1e-6 * scale,
                "snapshot {snapshot}, param {i}: fd {fd} vs {}",
                g[i]
            );
        }
    }
}

#[test]
fn envelope_gradient_matches_gradient_through_the_solve() {
    let problem = problem_interface_1d(3.0).unwrap();
    let mut net = init_1d(16, Activation::ReQU).unwrap();
    net.jitter(0.02, 3);
    let rule = p1(500, 77);
    let (c, _) = optimal(&net, &problem, &rule);
    let g = DVector::from_vec(envelope_gradient(&net, &problem, &rule, &c, C_P).unwrap().to_flat());
    let theta = net.params();
    let h = 1e-6;
    let fd = DVector::from_fn(theta.len(), |i, _| {
        let (_, lp) = optimal(&with_param(&net, &theta, i, h), &problem, &rule);
        let (_, lm) = optimal(&with_param(&net, &theta, i, -h), &problem, &rule);
        (lp - lm) / (2.0 * h)
    });
    let rel = (&fd - &g).norm() / g.norm();
    assert!(rel < 1e-3, "relative difference {rel}");
}

#[test]
fn ritz_minimizer_energy_approaches_minus_pi_squared() {
    let problem = problem_smooth_1d();
    let net = init_1d(16, Activation::ReQU).unwrap();
    let rule = trapezoid_rule(&problem.domain, &[100_001]).unwrap();
    let parts = GramParts::from_rule(&net, &problem, &rule, false).unwrap();
    let c = solve_ritz(&parts, EPSILON_DEFAULT, MU_DEFAULT).unwrap();
    let e = deep_ritz_loss(&net, &problem, &rule, &c).unwrap();
    // E(u_h) - E(u*) = |u* - u_h|²/2 >= 0 with E(u*) = π² - 2π²
    assert!(e >= -PI * PI * (1.0 + 1e-9), "{e}");
    assert!(e <= -PI * PI * (1.0 - 1e-2), "{e}");
    assert_eq!(deep_ritz_loss(&net, &problem, &rule, &Coefficients::zeros(16, 1)).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let mut other = c.clone();
        for v in other.c_u.iter_mut() {
            *v += rng.random_range(-1e-3..1e-3);
        }
        assert!(deep_ritz_loss(&net, &problem, &rule, &other).unwrap() >= e - 1e-12);
    }
}

#[test]
fn ritz_gradient_matches_finite_differences() {
    let problem = problem_smooth_1d();
    let mut net = init_1d(8, Activation::ReQU).unwrap();
    net.jitter(0.02, 8);
    let rule = p1(300, 3);
    let parts = GramParts::from_rule(&net, &problem, &rule, false).unwrap();
    let c = solve_ritz(&parts, EPSILON_DEFAULT, MU_DEFAULT).unwrap();
    let g = deep_ritz_gradient(&net, &problem, &rule, &c).unwrap().to_flat();
    let theta = net.params();
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let h = 1e-7;
    for i in 0..theta.len() {
        let ep = deep_ritz_loss(&with_param(&net, &theta, i, h), &problem, &rule, &c).unwrap();
        let em = deep_ritz_loss(&with_param(&net, &theta, i, -h), &problem, &rule, &c).unwrap();
        let fd = (ep - em) / (2.0 * h);
        assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()) + 1e-6 * scale, "param {i}: fd {fd} vs {}", g[i]);
    }
}

#[test]
fn pointwise_loss_with_zero_coefficients() {
    let problem = problem_smooth_1d();
    let net = init_1d(4, Activation::ReQU).unwrap();
    let x = [0.3];
    let s = spanning_sample(&net, &problem.lifting, &x).unwrap();
    let f = (problem.source)(&x);
    let v = fosls_loss_pointwise(&s, &Coefficients::zeros(4, 1), 1.0, f, C_P);
    assert!((v - 2.0 * C_P * C_P * f * f).abs() < 1e-12 * v);
}

#[test]
fn zero_iterations_return_the_initial_space_solution() {
    let problem = problem_interface_1d(3.0).unwrap();
    let net = init_1d(16, Activation::ReQU).unwrap();
    let out = train(&problem, net.clone(), interface_config(0)).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.solution.net, net);
    let mut trainer = Trainer::new(&problem, net, interface_config(0)).unwrap();
    let rule = trainer.sample_rule(fosls::quadrature::derive_seed(0, TAG_TRAIN, 0)).unwrap();
    let c = trainer.solve_on(&rule).unwrap();
    assert_eq!(c, out.solution.coefficients);
    assert!(out.report.unwrap().rel_u < 1.0);
}

#[test]
fn identical_seeds_give_identical_histories() {
    let problem = problem_interface_1d(3.0).unwrap();
    let run = |seed: u64| {
        let mut config = interface_config(60);
        config.base_seed = seed;
        config.log_every = 20;
        config.poincare_period = 25;
        history_csv(&train(&problem, init_1d(16, Activation::ReQU).unwrap(), config).unwrap().history)
    };
    let a = run(4);
    assert_eq!(a, run(4));
    assert_ne!(a, run(5));
    assert_eq!(a.lines().next().unwrap(), HISTORY_HEADER);
    assert_eq!(a.lines().count(), 61);
}

#[test]
fn running_poincare_maximum_is_monotone() {
    let problem = problem_interface_1d(3.0).unwrap();
    let mut config = interface_config(200);
    config.poincare_period = 10;
    let out = train(&problem, init_1d(16, Activation::ReQU).unwrap(), config).unwrap();
    assert_eq!(out.poincare_log.len(), 20);
    for w in out.poincare_log.windows(2) {
        assert!(w[1].running_max >= w[0].running_max);
        assert!(w[1].running_max >= w[1].value);
    }
    assert!(out.history.windows(2).all(|w| w[1].poincare >= w[0].poincare));
}

#[test]
fn zero_residual_has_zero_gradient_variance() {
    let mut problem = problem_interface_1d(3.0).unwrap();
    problem.source = Arc::new(|_| 0.0);
    problem.exact = None;
    let mut config = interface_config(0);
    config.quadrature = QuadSpec::P1 { cells: vec![100] };
    let mut trainer = Trainer::new(&problem, init_1d(8, Activation::ReQU).unwrap(), config).unwrap();
    let report = trainer.probe_variance(10, 1).unwrap();
    assert!(report.max_variance <= 1e-12);
    assert_eq!(report.variances.len(), trainer.state.net.param_count());
}

#[test]
fn variance_stays_below_its_bound_mid_training() {
    let problem = problem_interface_1d(3.0).unwrap();
    let mut trainer = Trainer::new(&problem, init_1d(16, Activation::ReQU).unwrap(), interface_config(0)).unwrap();
    trainer.run(150).unwrap();
    let report = trainer.probe_variance(30, 8).unwrap();
    assert!(report.max_ratio <= 1.0, "ratio {}", report.max_ratio);
    assert!(report.variances.iter().zip(&report.bounds).all(|(v, b)| v <= b));
    assert!(report.max_variance > 0.0);
}

#[test]
fn non_finite_source_aborts_with_iteration_and_seed() {
    let mut problem = problem_smooth_1d();
    problem.source = Arc::new(|x| if x[0] > 0.9 { f64::INFINITY } else { 1.0 });
    let mut config = interface_config(5);
    config.base_seed = 12;
    let err = train(&problem, init_1d(4, Activation::ReQU).unwrap(), config).unwrap_err();
    match err {
        FoslsError::NonFiniteLoss { iteration, seed } => {
            assert_eq!(iteration, 0);
            assert_eq!(seed, fosls::quadrature::derive_seed(12, TAG_TRAIN, 0));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn two_dimensional_zero_iteration_run_reports() {
    let problem = fosls::fields::problem_plane_2d();
    let net = build_network(&problem.domain, 2, 8, Activation::ReQU).unwrap();
    let mut config = TrainConfig::new(QuadSpec::P1 { cells: vec![10, 10] }, vec![51, 51]);
    config.iterations = 3;
    config.log_every = 1;
    let out = train(&problem, net, config).unwrap();
    assert_eq!(out.history.len(), 3);
    assert!(out.history.iter().all(|r| r.err_u.is_some()));
    assert!(out.report.unwrap().rel_u.is_finite());
}

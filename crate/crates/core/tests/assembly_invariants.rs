use fosls::assembly::{
    assemble, loss_at, scale, solve_ls, Coefficients, GramParts, CHUNK_POINTS, EPSILON_DEFAULT, MU_DEFAULT,
};
use fosls::fields::{problem_circle_2d, problem_interface_1d, problem_smooth_1d, ProblemSpec};
use fosls::geometry::{partition_uniform, BoxDomain};
use fosls::linalg::max_abs;
use fosls::network::{build_network, spanning_sample, Activation, Layer, Network, SpanningBatch};
use fosls::poincare::assemble_mass;
use fosls::quadrature::{sample_mc, sample_p1, trapezoid_rule, QuadratureRule};
use fosls::training::{brute_force_minimizer, fosls_loss_pointwise, DiscreteSolution};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn jittered(d: usize, width: usize, seed: u64) -> Network {
    let mut net = build_network(&BoxDomain::unit(d), 1, width, Activation::ReQU).unwrap();
    net.jitter(0.05, seed);
    net
}

fn p1_rule(d: usize, cells: usize, seed: u64) -> QuadratureRule {
    let partition = partition_uniform(&BoxDomain::unit(d), &vec![cells; d]).unwrap();
    sample_p1(&partition, seed)
}

/// One spanning function equal to the bubble itself.
fn bubble_only() -> Network {
    Network::new(
        1,
        vec![Layer {
            weights: DMatrix::zeros(1, 1),
            bias: DVector::from_element(1, 1.0),
        }],
        Activation::ReQU,
    )
    .unwrap()
}

fn random_coefficients(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Coefficients {
    let v = DVector::from_fn(n * (d + 1), |_, _| rng.random_range(-2.0..2.0));
    Coefficients::from_vector(n, &v)
}

#[test]
fn hand_basis_blocks() {
    let problem = problem_smooth_1d();
    let rule = trapezoid_rule(&problem.domain, &[100_001]).unwrap();
    let net = bubble_only();
    let sys = assemble(&net, &problem, &rule, 0.3).unwrap();
    assert!((sys.h_uu()[(0, 0)] - 1.0 / 3.0).abs() < 1e-9);
    let mass = assemble_mass(&net, &problem.lifting, &rule);
    assert!((mass[(0, 0)] - 1.0 / 30.0).abs() < 1e-10);
}

#[test]
fn zero_source_gives_zero_load() {
    let mut problem = problem_interface_1d(3.0).unwrap();
    problem.source = Arc::new(|_| 0.0);
    let sys = assemble(&jittered(1, 8, 1), &problem, &p1_rule(1, 100, 3), 0.2).unwrap();
    assert!(sys.f.iter().all(|v| *v == 0.0));
    assert_eq!(sys.ell, 0.0);
    let scaled = scale(&sys, EPSILON_DEFAULT).unwrap();
    let c = solve_ls(&sys, &scaled, MU_DEFAULT).unwrap();
    assert!(c.to_vector().iter().all(|v| *v == 0.0));
}

#[test]
fn kappa_scaling() {
    let problem = problem_interface_1d(3.0).unwrap();
    let mut scaled_problem = problem.clone();
    let s = 7.0;
    scaled_problem.kappa = problem.kappa.scaled(s).unwrap();
    let net = jittered(1, 8, 2);
    let rule = p1_rule(1, 200, 5);
    let a = GramParts::from_rule(&net, &problem, &rule, false).unwrap();
    let b = GramParts::from_rule(&net, &scaled_problem, &rule, false).unwrap();
    assert!(max_abs(&(&b.h_uu - &a.h_uu * s)) <= 1e-13 * max_abs(&b.h_uu));
    assert!(max_abs(&(&b.q_mass - &a.q_mass / s)) <= 1e-13 * max_abs(&a.q_mass));
    assert_eq!(a.div, b.div);
}

fn check_structure(problem: &ProblemSpec, net: &Network, rule: &QuadratureRule, poincare: f64) {
    let sys = assemble(net, problem, rule, poincare).unwrap();
    let h = &sys.h;
    assert!(max_abs(&(h - h.transpose())) <= 1e-12 * max_abs(h));
    let eig = SymmetricEigen::new(h.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, u), v| (l.min(*v), u.max(*v)));
    assert!(lo >= -1e-10 * hi, "min eigenvalue {lo}, max {hi}");
    assert!(sys.f.rows(0, sys.n_u).iter().all(|v| *v == 0.0));

    let scaled = scale(&sys, EPSILON_DEFAULT).unwrap();
    let n = sys.size();
    assert!((0..n).all(|i| scaled.h[(i, i)] <= 1.0 + 1e-12));
    assert!(scaled.h.trace() <= n as f64 + 1e-9);

    // optimality of the regularized solve in scaled variables
    let c = solve_ls(&sys, &scaled, MU_DEFAULT).unwrap().to_vector();
    let ct = c.component_mul(&scaled.d);
    let mut a = scaled.h.clone();
    for i in 0..n {
        a[(i, i)] += MU_DEFAULT;
    }
    let residual = &a * &ct - &scaled.f;
    assert!(residual.amax() <= 1e-10 * scaled.f.amax().max(1.0), "residual {}", residual.amax());
}

#[test]
fn symmetric_psd_and_optimal_1d_and_2d() {
    check_structure(&problem_interface_1d(3.0).unwrap(), &jittered(1, 16, 3), &p1_rule(1, 1000, 7), 0.17);
    check_structure(&problem_circle_2d(), &jittered(2, 8, 4), &p1_rule(2, 30, 8), 0.14);
}

#[test]
fn minimizer_beats_random_coefficients_and_brute_force() {
    let problem = problem_interface_1d(3.0).unwrap();
    let net = build_network(&problem.domain, 1, 16, Activation::ReQU).unwrap();
    let rule = trapezoid_rule(&problem.domain, &[20_001]).unwrap();
    let sys = assemble(&net, &problem, &rule, 0.18).unwrap();
    let scaled = scale(&sys, EPSILON_DEFAULT).unwrap();
    let c_star = solve_ls(&sys, &scaled, MU_DEFAULT).unwrap();
    let best = loss_at(&sys, &c_star).unwrap();
    assert!(best < sys.ell);
    assert_eq!(loss_at(&sys, &Coefficients::zeros(16, 1)).unwrap(), sys.ell);

    let brute = brute_force_minimizer(&sys.h, &sys.f).unwrap();
    let brute_loss = loss_at(&sys, &Coefficients::from_vector(16, &brute)).unwrap();
    assert!((best - brute_loss).abs() <= 1e-8 * sys.ell, "{best} vs {brute_loss}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = c_star.to_vector();
    for _ in 0..100 {
        let scale = 10f64.powf(rng.random_range(-6.0..0.0));
        let pert = DVector::from_fn(base.len(), |_, _| rng.random_range(-1.0..1.0) * scale * base.amax());
        let other = loss_at(&sys, &Coefficients::from_vector(16, &(&base + pert))).unwrap();
        assert!(best <= other * (1.0 + 1e-12));
    }
}

#[test]
fn quadratic_form_matches_pointwise_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (problem, net, rule) in [
        (problem_interface_1d(3.0).unwrap(), jittered(1, 16, 5), p1_rule(1, 500, 1)),
        (problem_circle_2d(), jittered(2, 8, 6), sample_mc(&BoxDomain::unit(2), 400, 2).unwrap()),
    ] {
        let d = problem.dim();
        let c_p = 0.21;
        let sys = assemble(&net, &problem, &rule, c_p).unwrap();
        for _ in 0..3 {
            let c = random_coefficients(net.output_dim(), d, &mut rng);
            let mut direct = 0.0;
            for (i, w) in rule.weights().iter().enumerate() {
                let x = rule.point(i);
                let s = spanning_sample(&net, &problem.lifting, x).unwrap();
                direct += w * fosls_loss_pointwise(&s, &c, problem.kappa.eval(x), (problem.source)(x), c_p);
            }
            let form = loss_at(&sys, &c).unwrap();
            assert!((form - direct).abs() <= 1e-10 * direct, "{form} vs {direct}");
        }
    }
}

#[test]
fn rescaled_spanning_function_leaves_solution_unchanged() {
    let problem = problem_interface_1d(3.0).unwrap();
    let net = jittered(1, 16, 7);
    let rule = p1_rule(1, 1000, 11);
    let solve = |net: &Network| {
        let sys = assemble(net, &problem, &rule, 0.18).unwrap();
        let scaled = scale(&sys, EPSILON_DEFAULT).unwrap();
        solve_ls(&sys, &scaled, MU_DEFAULT).unwrap()
    };
    let c = solve(&net);
    // ReQU is 2-homogeneous: scaling a unit's affine map by t scales its output by t²
    let (unit, t) = (5usize, 3.0);
    let mut theta = net.params();
    let width = net.output_dim();
    theta[unit] *= t;
    theta[width + unit] *= t;
    let mut other = net.clone();
    other.set_params(&theta).unwrap();
    let c2 = solve(&other);
    assert!((c2.c_u[unit] * t * t / c.c_u[unit] - 1.0).abs() < 1e-6);

    let xs: Vec<f64> = (0..200).map(|i| (i as f64 + 0.5) / 200.0).collect();
    let sol = |net: &Network, c: &Coefficients| DiscreteSolution {
        net: net.clone(),
        coefficients: c.clone(),
        poincare: 0.18,
        problem_id: problem.id.clone(),
    };
    let a = sol(&net, &c).evaluate(&problem.lifting, &xs);
    let b = sol(&other, &c2).evaluate(&problem.lifting, &xs);
    let rel = |x: &DVector<f64>, y: &DVector<f64>| (x - y).amax() / x.amax();
    assert!(rel(&a.u, &b.u) < 1e-8);
    assert!(rel(&a.q[0], &b.q[0]) < 1e-8);
    assert!(rel(&a.div_q, &b.div_q) < 1e-8);
}

#[test]
fn chunked_assembly_matches_single_batch() {
    let problem = problem_circle_2d();
    let net = jittered(2, 8, 12);
    let rule = sample_mc(&problem.domain, 3 * CHUNK_POINTS + 17, 4).unwrap();
    let chunked = GramParts::from_rule(&net, &problem, &rule, true).unwrap();
    let batch = SpanningBatch::evaluate(&net, &problem.lifting, rule.points());
    let whole = GramParts::from_batch(&batch, rule.points(), rule.weights(), &problem, true, &rule).unwrap();
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| max_abs(&(a - b)) / max_abs(b);
    assert!(rel(&chunked.h_uu, &whole.h_uu) < 1e-12);
    assert!(rel(&chunked.h_uq, &whole.h_uq) < 1e-12);
    assert!(rel(&chunked.q_mass, &whole.q_mass) < 1e-12);
    assert!(rel(&chunked.div, &whole.div) < 1e-12);
    assert!(rel(chunked.mass.as_ref().unwrap(), whole.mass.as_ref().unwrap()) < 1e-12);
    assert!((chunked.ff - whole.ff).abs() < 1e-12 * whole.ff);
}

#[test]
fn non_finite_entries_name_block_and_point() {
    let mut problem = problem_smooth_1d();
    problem.source = Arc::new(|x| if x[0] > 0.5 { f64::NAN } else { 1.0 });
    let rule = QuadratureRule::from_parts(
        1,
        vec![0.1, 0.2, 0.7],
        vec![0.3, 0.3, 0.4],
        fosls::quadrature::RuleKind::MonteCarlo,
    )
    .unwrap();
    let err = assemble(&bubble_only(), &problem, &rule, 0.3).unwrap_err();
    match err {
        fosls::error::FoslsError::Assembly { block, point } => {
            assert_eq!(block, "f");
            assert_eq!(point, 2);
        }
        other => panic!("unexpected error {other}"),
    }
}

mod common;

use common::*;
use mfckit::linalg::{max_abs, Mat, Vector};
use mfckit::solver::value_closed_form;
use mfckit::*;

fn without_affine(mut p: ProblemSpec) -> ProblemSpec {
    let (n, d) = (p.dims.n, p.dims.d);
    p.forcing = CoeffPath::zeros(n, 1);
    p.state_lin = CoeffPath::zeros(n, 1);
    p.control_lin = CoeffPath::zeros(d, 1);
    p.terminal_lin = Vector::zeros(n);
    p
}

fn zero_controls(p: &ProblemSpec, ens: &std::sync::Arc<Ensemble>) -> FieldPath {
    FieldPath::new(vec![Mat::zeros(p.dims.d, ens.len()); p.steps() + 1], ens.clone()).unwrap()
}

#[test]
fn cost_vanishes_without_weights_or_without_motion() {
    let mut p = generic(50);
    let ens = generic_ensemble();
    let x0 = Field::identity(&ens);
    let v = zero_controls(&p, &ens);

    let mut q = without_affine(p.clone());
    q.state_cost = CoeffPath::zeros(2, 2);
    q.mean_cost = CoeffPath::zeros(2, 2);
    q.terminal_cost = Mat::zeros(2, 2);
    q.terminal_mean_cost = Mat::zeros(2, 2);
    assert_eq!(cost(&q, &x0, &v).unwrap(), 0.0);

    p = without_affine(p);
    assert_eq!(cost(&p, &Field::zeros(2, &ens), &v).unwrap(), 0.0);
}

#[test]
fn uncontrolled_scalar_cost_matches_hand_quadrature() {
    let k = |v: f64| CoeffPath::constant(Mat::from_element(1, 1, v));
    let mut p = scalar(1.1, 400);
    p.drift = k(0.4);
    p.mean_drift = k(-0.25);
    p.state_cost = k(1.3);
    p.mean_cost = k(0.2);
    p.mean_shift = k(0.6);
    p.terminal_cost = Mat::from_element(1, 1, 0.5);
    p.terminal_mean_cost = Mat::from_element(1, 1, 0.3);
    p.terminal_shift = Mat::from_element(1, 1, 0.2);
    let ens = Ensemble::new(Mat::from_row_slice(1, 3, &[-1.0, 0.5, 2.0]), Some(Vector::from_vec(vec![0.5, 0.3, 0.2]))).unwrap();
    let x0 = Field::identity(&ens);

    // Deviation and mean evolve as exp(F s) and exp((F+Fbar) s).
    let xs = [-1.0, 0.5, 2.0];
    let ws = [0.5, 0.3, 0.2];
    let mean: f64 = xs.iter().zip(&ws).map(|(x, w)| x * w).sum();
    let var: f64 = xs.iter().zip(&ws).map(|(x, w)| w * (x - mean) * (x - mean)).sum();
    let (f, ft, horizon) = (0.4, 0.15, 1.1);
    let dev_w = 1.5;
    let mean_w = dev_w + 0.6 * 0.2 * 0.6 - 2.0 * 0.6 * 0.2;
    let int = |a: f64| ((2.0 * a * horizon).exp() - 1.0) / (2.0 * a);
    let running = 0.5 * (dev_w * var * int(f) + mean_w * mean * mean * int(ft));
    let tdev = 0.8;
    let tmean = tdev + 0.2 * 0.3 * 0.2 - 2.0 * 0.2 * 0.3;
    let terminal = 0.5 * (tdev * var * (2.0 * f * horizon).exp() + tmean * mean * mean * (2.0 * ft * horizon).exp());
    let got = cost(&p, &x0, &zero_controls(&p, &ens)).unwrap();
    assert!((got - running - terminal).abs() < 1e-10, "{got} vs {}", running + terminal);
}

#[test]
fn scalar_value_is_tanh_of_the_horizon() {
    for horizon in [0.5, 1.0, 2.0] {
        let sol = solve_cos(&scalar(horizon, 400), &pair()).unwrap();
        let v = sol.value_closed_form.unwrap();
        assert!((v - 0.5 * horizon.tanh()).abs() < 1e-10, "{horizon} {v} {}", 0.5 * horizon.tanh());
        assert!((sol.cost - v).abs() < 1e-9);
        let kern = solve_kernel_lq(&scalar(horizon, 400), &pair()).unwrap();
        assert!((kern.cost - v).abs() <= 1e-6 * v.abs());
    }
}

#[test]
fn zero_data_gives_zero_solutions() {
    let p = without_affine(generic(60));
    let ens = generic_ensemble();
    let x0 = Field::zeros(2, &ens);
    for sol in [solve_cos(&p, &x0).unwrap(), solve_kernel_lq(&p, &x0).unwrap()] {
        assert_eq!(sol.cost, 0.0, "{:?}", sol.method);
        assert!(sol.state.nodes.iter().all(|m| max_abs(m) == 0.0));
        assert!(sol.control.start.iter().all(|m| max_abs(m) == 0.0));
    }
    assert_eq!(solve_cos(&p, &x0).unwrap().value_closed_form, Some(0.0));
    let oracle = brute_force_oracle(&p, &x0, None, 20).unwrap();
    assert_eq!(oracle.cost, 0.0);
    assert!(oracle.control.start.iter().all(|m| max_abs(m) == 0.0));
}

/// The mean of a constant field follows a classical LQR problem with the
/// mean weights; the test solves it on its own.
#[test]
fn mean_only_problem_is_classical_lqr() {
    let steps = 200;
    let p = without_affine(generic(steps));
    let ens = generic_ensemble();
    let c = Vector::from_vec(vec![0.7, -0.4]);
    let x0 = Field::constant(&c, &ens);

    let a = p.drift.node(0) + p.mean_drift.node(0);
    let g = p.input.node(0).clone();
    let r = &g * p.control_cost.node(0).clone().try_inverse().unwrap() * g.transpose();
    let (mb, s) = (p.mean_cost.node(0), p.mean_shift.node(0));
    let q = p.state_cost.node(0) + mb + s.transpose() * mb * s - s.transpose() * mb - mb * s;
    let sigma = rk4_back(p.terminal_mean_weight(), p.grid.horizon, 2 * steps, |_, y| {
        -(y * &a + a.transpose() * y - y * &r * y + &q)
    });
    let h = p.h();
    let mut x = Mat::from_columns(&[c.clone()]);
    let mut path = vec![x.clone()];
    for k in 0..steps {
        let m = |j: usize| &a - &r * &sigma[j];
        let (m0, m1, m2) = (m(2 * k), m(2 * k + 1), m(2 * k + 2));
        let k1 = &m0 * &x;
        let k2 = &m1 * (&x + &k1 * (h / 2.0));
        let k3 = &m1 * (&x + &k2 * (h / 2.0));
        let k4 = &m2 * (&x + &k3 * h);
        x = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        path.push(x.clone());
    }
    let value = 0.5 * c.dot(&(&sigma[0] * &c));

    let sol = solve_cos(&p, &x0).unwrap();
    assert!((sol.value_closed_form.unwrap() - value).abs() < 1e-10);
    for k in 0..=steps {
        for col in sol.state.nodes[k].column_iter() {
            assert!((col - path[k].column(0)).amax() < 1e-10);
        }
    }
    let oracle = brute_force_oracle(&p, &x0, None, 100).unwrap();
    let gap = (oracle.cost - value) / value;
    assert!(gap > -1e-9 && gap < 0.02, "{gap}");
}

#[test]
fn drift_trajectory_cases() {
    let ens = generic_ensemble();
    let x0 = Field::identity(&ens);
    let mut p = ProblemSpec::zeros(Dims { n: 2, d: 1 }, TimeGrid::new(1.0, 40).unwrap());
    p.input = CoeffPath::constant(Mat::from_row_slice(2, 1, &[1.0, 0.0]));
    let path = drift_trajectory(&p, &x0).unwrap();
    assert!(path.raw_values().iter().all(|m| m == x0.values()));

    let f = Vector::from_vec(vec![0.5, -2.0]);
    p.forcing = CoeffPath::from_vector(f.clone());
    let path = drift_trajectory(&p, &x0).unwrap();
    for k in 0..=40 {
        let mut want = x0.values().clone();
        for mut col in want.column_iter_mut() {
            col += &f * p.grid.t(k);
        }
        assert!(max_abs(&(&path.raw_values()[k] - want)) < 1e-13);
    }
}

#[test]
fn generic_drift_matches_a_refined_oracle() {
    let p = generic(100);
    let ens = generic_ensemble();
    let x0 = Field::identity(&ens);
    let got = drift_trajectory(&p, &x0).unwrap();
    let f = p.drift.node(0).clone();
    let ft = &f + p.mean_drift.node(0);
    let shift = p.forcing.vec_node(0)
        - p.input.node(0) * p.control_cost.node(0).clone().try_inverse().unwrap() * p.control_lin.vec_node(0);
    let xbar = x0.mean();
    let fine_mean = rk4_fwd(Mat::from_columns(&[xbar.clone()]), 1.3, 1000, |_, y| &ft * y + Mat::from_columns(&[shift.clone()]));
    let fine_dev = rk4_fwd(x0.deviation().into_values(), 1.3, 1000, |_, y| &f * y);
    for k in 0..=100 {
        let mut want = fine_dev[10 * k].clone();
        for mut col in want.column_iter_mut() {
            col += fine_mean[10 * k].column(0);
        }
        assert!(max_abs(&(&got.raw_values()[k] - want)) < 1e-9);
    }
}

#[test]
fn quadratic_phi_gradient_is_identity_for_unit_terminal_weight() {
    let mut p = scalar(1.0, 10);
    p.terminal_cost = Mat::identity(1, 1);
    let ens = generic_ensemble();
    let mut q = generic(10);
    q.terminal_cost = Mat::identity(2, 2);
    q.terminal_mean_cost = Mat::zeros(2, 2);
    q.terminal_lin = Vector::zeros(2);
    let x = Field::new(Lcg::new(2).mat(2, 3), ens).unwrap();
    let g = phi_gradient(&PhiSpec::Quadratic, &q, &x).unwrap();
    assert!(max_abs(&(g.values() - x.values())) < 1e-15);
}

#[test]
fn quadratic_phi_gradient_matches_finite_differences() {
    let p = generic(10);
    let c = Coefficients::new(&p).unwrap();
    let ens = generic_ensemble();
    let mut r = Lcg::new(12);
    let x = Field::new(r.mat(2, 3), ens.clone()).unwrap();
    let grad = PhiSpec::Quadratic.gradient(&c, &x).unwrap();
    for _ in 0..5 {
        let d = Field::new(r.mat(2, 3), ens.clone()).unwrap();
        let eps = 1e-5;
        let at = |e: f64| PhiSpec::Quadratic.value(&c, &x.add(&d.scale(e)).unwrap()).unwrap();
        let fd = (at(eps) - at(-eps)) / (2.0 * eps);
        let exact = grad.inner_h(&d).unwrap();
        assert!((fd - exact).abs() <= 1e-6, "{fd} {exact}");
    }
}

#[test]
fn zero_phi_is_the_problem_without_terminal_cost() {
    let p = generic(200);
    let mut bare = p.clone();
    bare.terminal_cost = Mat::zeros(2, 2);
    bare.terminal_mean_cost = Mat::zeros(2, 2);
    bare.terminal_shift = Mat::zeros(2, 2);
    bare.terminal_lin = Vector::zeros(2);
    let x0 = Field::identity(&generic_ensemble());
    let a = solve_nonlinear(&p, &x0, &PhiSpec::Zero, FixedPointOptions::default()).unwrap();
    let b = solve_kernel_lq(&bare, &x0).unwrap();
    assert!(path_gap(&a.state.nodes, &b.state.nodes) < 1e-10);
    assert!((a.cost - b.cost).abs() < 1e-10);
}

#[test]
fn scalar_oracle_approaches_the_value() {
    let p = scalar(1.0, 400);
    let value = value_closed_form(&RiccatiBundle::new(&p, TerminalMode::Lq).unwrap(), &pair());
    let gaps: Vec<f64> = [50, 100, 200]
        .iter()
        .map(|&k| brute_force_oracle(&p, &pair(), None, k).unwrap().cost - value)
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2] && gaps[2] > -1e-12, "{gaps:?}");
    // First order in the coarse step.
    assert!(gaps[0] < 1.0 / 50.0);
}

#[test]
fn cross_method_on_random_problems() {
    for seed in 0..5 {
        let (p, ens) = mfckit::verify::random_problem(seed, 300);
        let x0 = Field::identity(&ens);
        let a = solve_cos(&p, &x0).unwrap();
        let b = solve_kernel_lq(&p, &x0).unwrap();
        assert!((a.cost - b.cost).abs() <= 1e-6 * (1.0 + a.cost.abs()));
        assert!(path_gap(&a.state.nodes, &b.state.nodes) <= 1e-6);
        assert!(b.residual("euler_residual").unwrap() <= 1e-6);
    }
}

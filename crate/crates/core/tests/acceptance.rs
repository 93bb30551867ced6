//! Acceptance criteria. Each test prints one `criterion N [PASS|FAIL]` line
//! (run with `--nocapture` to see them) and then asserts.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::*;
use mfckit::linalg::{max_abs, Mat};
use mfckit::solver::{cost_with_phi, value_closed_form};
use mfckit::verify::{noiseless_gap, random_control, random_problem, riccati_residuals, Draws};
use mfckit::*;

const BIG_K: usize = 1000;

#[test]
fn criterion_01_cross_method_value_agreement() {
    let mut worst = 0.0_f64;
    let mut slowest = 0.0_f64;
    for seed in 0..10u64 {
        let (p, ens) = random_problem(1000 + seed, BIG_K);
        assert!(p.dims.n <= 3 && p.dims.d <= 2 && ens.len() <= 50);
        let x0 = Field::identity(&ens);
        let clock = Instant::now();
        let a = solve_cos(&p, &x0).unwrap();
        let b = solve_kernel_lq(&p, &x0).unwrap();
        slowest = slowest.max(clock.elapsed().as_secs_f64());
        worst = worst.max((a.cost - b.cost).abs() / (1.0 + a.cost.abs()));
    }
    let pass = worst <= 1e-5 && slowest <= 5.0;
    report(1, "cross-method value", pass, format!("worst rel gap {worst:.2e} (tol 1e-5), slowest {slowest:.2}s (max 5s)"));
    assert!(pass);
}

#[test]
fn criterion_02_oracle_bound() {
    let clock = Instant::now();
    let p = generic(BIG_K);
    let x0 = Field::identity(&generic_ensemble());
    let value = value_closed_form(&RiccatiBundle::new(&p, TerminalMode::Lq).unwrap(), &x0);
    let gaps: Vec<f64> = [50, 100, 200]
        .iter()
        .map(|&ck| (brute_force_oracle(&p, &x0, None, ck).unwrap().cost - value) / value.abs())
        .collect();
    let secs = clock.elapsed().as_secs_f64();
    // The oracle cost is that of an admissible control, so it cannot beat
    // the value by more than quadrature noise.
    let pass = gaps.iter().all(|&g| g > -1e-9)
        && gaps[2] <= 0.02
        && gaps[0] > gaps[1]
        && gaps[1] > gaps[2]
        && secs <= 60.0;
    report(2, "oracle bound", pass, format!("rel gaps at 50/100/200 = {:.3e}/{:.3e}/{:.3e}, {secs:.1}s", gaps[0], gaps[1], gaps[2]));
    assert!(pass);
}

#[test]
fn criterion_03_reproducing_property() {
    let mut worst = 0.0_f64;
    for trial in 0..20u64 {
        let (p, ens) = random_problem(3000 + trial, BIG_K);
        let with_initial = trial % 2 == 1;
        let kh = KernelHandle::new(&p, TerminalMode::Lq, with_initial).unwrap();
        let c = kh.coeffs().clone();
        let mut r = Draws::new(trial, 7);
        let x0 = if with_initial {
            Field::new(r.mat(c.n, ens.len()), ens.clone()).unwrap()
        } else {
            Field::zeros(c.n, &ens)
        };
        let xi = TrajectoryWithControl::from_control(&c, &x0, random_control(&c, ens.len(), &mut r)).unwrap();
        let k = r.index(BIG_K + 1);
        let z = Field::new(r.mat(c.n, ens.len()), ens.clone()).unwrap();
        let exact = xi.state_at(k).inner_h(&z).unwrap();
        let res = kh.reproducing_residual(&xi, c.grid.t(k), &z).unwrap();
        worst = worst.max(res / (1.0 + exact.abs()));
    }
    let pass = worst <= 1e-6;
    report(3, "reproducing property", pass, format!("worst rel residual {worst:.2e} (tol 1e-6)"));
    assert!(pass);
}

/// `(P, Gamma)` integrated as one coupled system by the test's own RK4,
/// from the raw problem data (time-invariant problems only).
fn coupled_riccati(p: &ProblemSpec) -> (Vec<Mat>, Vec<Mat>) {
    let n = p.dims.n;
    let f = p.drift.node(0).clone();
    let fbar = p.mean_drift.node(0).clone();
    let g = p.input.node(0).clone();
    let r = &g * p.control_cost.node(0).clone().try_inverse().unwrap() * g.transpose();
    let dev = p.state_cost.node(0) + p.mean_cost.node(0);
    let sm = p.mean_shift.node(0);
    let mb = p.mean_cost.node(0);
    let penalty = sm.transpose() * mb * sm - sm.transpose() * mb - mb * sm;
    let rhs = |_: f64, y: &Mat| -> Mat {
        let pp = y.view((0, 0), (n, n)).into_owned();
        let gg = y.view((0, n), (n, n)).into_owned();
        let dp = -(&pp * &f + f.transpose() * &pp - &pp * &r * &pp + &dev);
        let a = &f + &fbar - &r * &pp;
        let pf = &pp * &fbar;
        let dg = -(&gg * &a + a.transpose() * &gg - &gg * &r * &gg + &penalty + &pf + pf.transpose());
        let mut out = Mat::zeros(n, 2 * n);
        out.view_mut((0, 0), (n, n)).copy_from(&dp);
        out.view_mut((0, n), (n, n)).copy_from(&dg);
        out
    };
    let mut end = Mat::zeros(n, 2 * n);
    end.view_mut((0, 0), (n, n)).copy_from(&p.terminal_dev_weight());
    end.view_mut((0, n), (n, n)).copy_from(&p.terminal_mean_penalty());
    let path = rk4_back(end, p.grid.horizon, p.steps(), rhs);
    let split = |c: usize| path.iter().map(|y| y.view((0, c), (n, n)).into_owned()).collect();
    (split(0), split(n))
}

#[test]
fn criterion_04_riccati_identities() {
    let mut identity = 0.0_f64;
    let mut oracle_gap = 0.0_f64;
    let mut weak = 0.0_f64;
    let mut problems = vec![(generic(BIG_K), generic_ensemble())];
    for seed in 0..4 {
        problems.push(random_problem(4000 + seed, BIG_K));
    }
    for (i, (p, ens)) in problems.iter().enumerate() {
        let b = RiccatiBundle::new(p, TerminalMode::Lq).unwrap();
        let diff: Vec<Mat> = b.sigma.nodes.iter().zip(&b.p.nodes).map(|(s, q)| s - q).collect();
        identity = identity.max(path_gap(&b.gamma.nodes, &diff));
        if p.is_time_invariant() {
            let (po, go) = coupled_riccati(p);
            oracle_gap = oracle_gap.max(path_gap(&po, &b.p.nodes)).max(path_gap(&go, &b.gamma.nodes));
        }
        let (self_consistency, w) = riccati_residuals(&b, ens, &mut Draws::new(i as u64, 11), None);
        identity = identity.max(self_consistency);
        weak = weak.max(w);
    }
    let h = generic(BIG_K).h();
    let err = |k: usize| (RiccatiBundle::new(&scalar(1.0, k), TerminalMode::Lq).unwrap().p.nodes[0][(0, 0)] - 1f64.tanh()).abs();
    let ratio = err(10) / err(20);
    let pass = identity <= 1e-8 && oracle_gap <= 1e-8 && weak <= 10.0 * h * h && (12.0..=20.0).contains(&ratio);
    report(
        4,
        "riccati identities",
        pass,
        format!(
            "Gamma identity {identity:.2e}, independent RK4 {oracle_gap:.2e} (tol 1e-8); weak residual {weak:.2e} (tol {:.1e}); tanh ratio {ratio:.2}",
            10.0 * h * h
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_quadratic_phi_consistency() {
    let mut worst = 0.0_f64;
    let mut iters = 0;
    let mut cases = vec![(generic(400), generic_ensemble())];
    for seed in 0..3 {
        cases.push(random_problem(5000 + seed, 400));
    }
    for (p, ens) in &cases {
        let x0 = Field::identity(ens);
        let lin = solve_kernel_lq(p, &x0).unwrap();
        let opts = FixedPointOptions { damping: 0.5, ..FixedPointOptions::default() };
        let non = solve_nonlinear(p, &x0, &PhiSpec::Quadratic, opts).unwrap();
        worst = worst.max(path_gap(&non.state.nodes, &lin.state.nodes));
        iters = iters.max(non.iterations);
    }
    let pass = worst <= 1e-6 && iters <= 30;
    report(5, "quadratic phi consistency", pass, format!("state gap {worst:.2e} (tol 1e-6), {iters} iterations (max 30)"));
    assert!(pass);
}

#[test]
fn criterion_06_nonlinear_terminal_optimality() {
    let p = scalar(1.0, 200);
    let ens = mfckit::Ensemble::new(Mat::from_row_slice(1, 4, &[-1.5, -0.2, 0.4, 2.0]), None).unwrap();
    let x0 = Field::identity(&ens);
    let phi = PhiSpec::standard_gaussian_cross_entropy(1);
    let sol = solve_nonlinear(&p, &x0, &phi, FixedPointOptions::default()).unwrap();
    let euler = sol.residual("euler_residual").unwrap();

    let c = Coefficients::new(&p).unwrap();
    let base = cost_with_phi(&c, &x0, &sol.control, &phi).unwrap();
    let scale = sol.control.start.iter().map(max_abs).fold(0.0, f64::max).max(1.0);
    let mut r = Lcg::new(6);
    let mut best_gain = f64::NEG_INFINITY;
    for _ in 0..50 {
        let coef = r.mat(4, ens.len());
        let dir = ControlPath::from_fn(c.steps, |j, _| {
            let t = c.t_half(j);
            Mat::from_fn(1, ens.len(), |_, i| {
                coef[(0, i)] + coef[(1, i)] * t + coef[(2, i)] * (3.0 * t).sin() + coef[(3, i)] * (5.0 * t).cos()
            })
        });
        let size = dir.start.iter().chain(&dir.mid).map(max_abs).fold(0.0, f64::max);
        let moved = sol.control.combine(1.0, &dir, 1e-3 * scale / size);
        let j = cost_with_phi(&c, &x0, &moved, &phi).unwrap();
        best_gain = best_gain.max(base - j);
    }
    let pass = euler <= 1e-6 && best_gain <= 1e-8;
    report(
        6,
        "nonlinear terminal optimality",
        pass,
        format!("euler residual {euler:.2e} (tol 1e-6), best improvement {best_gain:.2e} (max 1e-8)"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_stochastic_value() {
    let clock = Instant::now();
    let p = scalar(1.0, 500);
    let x0 = pair();
    let noise = NoiseSpec::new(Mat::identity(1, 1), 10_000, 7).unwrap();
    let fb = solve_stochastic(&p).unwrap();
    let mc = monte_carlo(&p, &x0, &noise, Policy::Feedback(&fb)).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    let value = stochastic_value(&p, &x0, &noise).unwrap();
    // ½ tanh(T) E[x²] + ½ ∫ tanh(T - s) ds with E[x²] = 1, T = 1.
    let analytic = 0.5 * 1f64.tanh() + 0.5 * 1f64.cosh().ln();
    let bound = 3.0 * mc.stderr + 5.0 / 500.0;
    let gap = (mc.mean - value).abs();
    let pass = gap <= bound && (value - analytic).abs() <= 1e-9 && secs <= 30.0;
    report(
        7,
        "stochastic value",
        pass,
        format!(
            "MC {:.5} ± {:.5}, value {value:.6} (analytic {analytic:.6}), gap {gap:.2e} <= {bound:.2e}, {secs:.1}s",
            mc.mean, mc.stderr
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_stochastic_kernel_equivalence() {
    let p = generic(200);
    let x0 = Field::identity(&generic_ensemble());
    let noise = NoiseSpec::new(Mat::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.8]), 1000, 8).unwrap();
    let fb = solve_stochastic(&p).unwrap();
    let paths = simulate(&p, &x0, &noise, Policy::Feedback(&fb)).unwrap();
    let mut worst = 0.0_f64;
    let mut visited = 0;
    for_each_kernel_stochastic_path(&p, &x0, &noise, |i, sol| {
        for k in 0..=p.steps() {
            worst = worst.max(max_abs(&(sol.control.node(k) - paths.control(i, k))));
        }
        visited += 1;
        Ok(())
    })
    .unwrap();
    let pass = visited == 1000 && worst <= 1e-6;
    report(8, "stochastic kernel equivalence", pass, format!("{visited} paths, sup control gap {worst:.2e} (tol 1e-6)"));
    assert!(pass);
}

#[test]
fn criterion_09_stochastic_reproducing() {
    let mut worst = 0.0_f64;
    for trial in 0..20u64 {
        let (p, ens) = random_problem(9000 + trial, 120);
        let kh = KernelHandle::new(&p, TerminalMode::Lq, false).unwrap();
        let c = kh.coeffs().clone();
        let mut r = Draws::new(trial, 9);
        let q = 1 + r.index(2);
        let base =
            TrajectoryWithControl::from_control(&c, &Field::zeros(c.n, &ens), random_control(&c, ens.len(), &mut r))
                .unwrap();
        let mut controls = BTreeMap::new();
        let mut z = AffineRandomField::deterministic(Field::new(r.mat(c.n, ens.len()), ens.clone()).unwrap(), c.grid, q);
        for _ in 0..3 {
            let k = r.index(c.steps);
            let u = random_control(&c, q, &mut r);
            let u = ControlPath::from_fn(c.steps, |j, m| if m <= k { Mat::zeros(c.d, q) } else { u.stage(m, j).clone() });
            controls.insert(k, u);
            z = z.with_loading(k, r.mat(c.n, q)).unwrap();
        }
        let traj = AdaptedTrajectory::new(&c, base, controls, q).unwrap();
        let kt = r.index(c.steps + 1);
        let exact = traj.at(kt, c.grid).inner(&z).unwrap();
        let res = reproducing_residual_stochastic(&kh, &traj, c.grid.t(kt), &z).unwrap();
        worst = worst.max(res / (1.0 + exact.abs()));
    }
    let pass = worst <= 1e-6;
    report(9, "stochastic reproducing", pass, format!("worst rel residual {worst:.2e} over 20 triples (tol 1e-6)"));
    assert!(pass);
}

#[test]
fn criterion_10_noiseless_reduction() {
    let mut worst = noiseless_gap(&generic(300), &Field::identity(&generic_ensemble())).unwrap();
    worst = worst.max(noiseless_gap(&scalar(1.0, 300), &pair()).unwrap());
    for seed in 0..5 {
        let (p, ens) = random_problem(10_000 + seed, 300);
        worst = worst.max(noiseless_gap(&p, &Field::identity(&ens)).unwrap());
    }
    // Conditioning a field without loadings is the identity.
    let ens = generic_ensemble();
    let grid = generic(300).grid;
    let z = AffineRandomField::deterministic(Field::identity(&ens), grid, 2);
    let cz = conditional_expectation(&z, grid.t(120)).unwrap();
    worst = worst.max(max_abs(&(cz.base.values() - z.base.values())));
    let pass = worst <= 1e-10;
    report(10, "noiseless reduction", pass, format!("worst rel gap {worst:.2e} (tol 1e-10)"));
    assert!(pass);
}

//! Deterministic solution routes and the cost functional.
//!
//! * completion of square: closed-loop feedback from `P`, `Sigma`, `lambda`;
//! * kernel route: the optimal displacement from the uncontrolled drift is
//!   obtained from an adjoint `r` (backward) and a forward sweep, which is the
//!   ODE form of the kernel integral in the optimality condition;
//! * non-quadratic terminal cost: damped fixed point on the terminal value;
//! * a brute-force discretized oracle that shares no code with the above.

use std::sync::Arc;

use serde::Serialize;

use crate::ensemble::{add_to_columns, split, split_apply, winner, Ensemble, Field, FieldPath};
use crate::error::{MfcError, Result};
use crate::export::write_trajectory_csv;
use crate::kernel::{Block, KernelHandle};
use crate::linalg::{Mat, Vector};
use crate::ode::{integrate_backward, integrate_forward, rk4_forward, Track};
use crate::phi::PhiSpec;
use crate::problem::ProblemSpec;
use crate::propagator::{Coefficients, RiccatiBundle, TerminalMode};
use crate::trajectory::{homogeneous_rhs, split_quad, ControlPath, StatePath};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cos,
    Kernel,
    Nonlinear,
    Oracle,
    Stochastic,
    KernelStochastic,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Cos => "cos",
            Method::Kernel => "kernel",
            Method::Nonlinear => "nonlinear",
            Method::Oracle => "oracle",
            Method::Stochastic => "stochastic",
            Method::KernelStochastic => "kernel-stochastic",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub method: Method,
    pub ens: Arc<Ensemble>,
    pub times: Vec<f64>,
    pub state: StatePath,
    pub control: ControlPath,
    pub cost: f64,
    pub value_closed_form: Option<f64>,
    pub iterations: usize,
    pub residuals: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct Summary<'a> {
    method: &'a str,
    cost: f64,
    value_closed_form: Option<f64>,
    residuals: serde_json::Map<String, serde_json::Value>,
    iterations: usize,
}

impl Solution {
    pub fn states(&self) -> FieldPath {
        self.state.field_path(&self.ens)
    }

    pub fn controls(&self) -> FieldPath {
        self.control.field_path(&self.ens)
    }

    pub fn residual(&self, name: &str) -> Option<f64> {
        self.residuals.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_trajectory_csv(out, &self.times, &self.state, &self.control)
    }

    pub fn summary(&self) -> serde_json::Value {
        let residuals = self
            .residuals
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        serde_json::to_value(Summary {
            method: self.method.as_str(),
            cost: self.cost,
            value_closed_form: self.value_closed_form,
            residuals,
            iterations: self.iterations,
        })
        .expect("summary serializes")
    }
}

/// Cost split along the orthogonal decomposition into deviations and mean.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CostParts {
    pub running_dev: f64,
    pub running_mean: f64,
    pub terminal_dev: f64,
    pub terminal_mean: f64,
}

impl CostParts {
    pub fn total(&self) -> f64 {
        self.running() + self.terminal_dev + self.terminal_mean
    }

    pub fn running(&self) -> f64 {
        self.running_dev + self.running_mean
    }

    pub fn deviation(&self) -> f64 {
        self.running_dev + self.terminal_dev
    }

    pub fn mean(&self) -> f64 {
        self.running_mean + self.terminal_mean
    }
}

/// Running-cost integrand at half-node `j`, as (deviation part, mean part).
pub(crate) fn running_parts(c: &Coefficients, j: usize, x: &Mat, v: &Mat, w: &Vector) -> (f64, f64) {
    let (xd, xm) = split(x, w);
    let (vd, vm) = split(v, w);
    let n = &c.control_cost[j];
    let dev = 0.5 * (winner(&xd, &(&c.dev_weight[j] * &xd), w) + winner(&vd, &(n * &vd), w));
    let mean = 0.5 * (xm.dot(&(&c.mean_weight[j] * &xm)) + vm.dot(&(n * &vm)))
        + c.state_lin[j].dot(&xm)
        + c.control_lin[j].dot(&vm);
    (dev, mean)
}

/// Quadratic terminal cost as (deviation part, mean part).
pub(crate) fn terminal_parts(c: &Coefficients, x: &Mat, w: &Vector) -> (f64, f64) {
    let (xd, xm) = split(x, w);
    (
        0.5 * winner(&xd, &(&c.terminal_dev * &xd), w),
        0.5 * xm.dot(&(&c.terminal_mean * &xm)) + c.terminal_lin.dot(&xm),
    )
}

/// Full dynamics `F x + Fbar mean(x) + G v + f` at half-node `j`.
pub(crate) fn dynamics_rhs(c: &Coefficients, j: usize, x: &Mat, v: &Mat, w: &Vector) -> Mat {
    let mut d = homogeneous_rhs(c, j, x, v, w);
    add_to_columns(&mut d, &c.forcing[j]);
    d
}

/// Simulate the state under `v` and integrate the running cost along with it
/// (RK4 on the augmented system).
pub fn evaluate_control(c: &Coefficients, x0: &Field, v: &ControlPath) -> Result<(StatePath, CostParts)> {
    if v.steps() != c.steps || v.dim() != c.d || x0.dim() != c.n {
        return Err(MfcError::dims(
            "control",
            format!("{} intervals of dimension {} from an {}-dim state", c.steps, c.d, c.n),
            format!("{} intervals of dimension {} from an {}-dim state", v.steps(), v.dim(), x0.dim()),
        ));
    }
    let w = x0.weights().clone();
    let mut y = (x0.values().clone(), 0.0_f64, 0.0_f64);
    let mut nodes = vec![y.0.clone()];
    let mut mids = Vec::with_capacity(c.steps);
    for k in 0..c.steps {
        let st = rk4_forward(&y, k, c.h, |j, s: &(Mat, f64, f64)| {
            let vj = v.stage(k, j);
            let (a, b) = running_parts(c, j, &s.0, vj, &w);
            (dynamics_rhs(c, j, &s.0, vj, &w), a, b)
        });
        let mut mid = &y.0 + &st.value.0;
        mid *= 0.5;
        mid += (&st.d_start.0 - &st.d_end.0) * (c.h / 8.0);
        mids.push(mid);
        nodes.push(st.value.0.clone());
        y = st.value;
    }
    let (td, tm) = terminal_parts(c, &y.0, &w);
    Ok((
        StatePath { nodes, mids },
        CostParts {
            running_dev: y.1,
            running_mean: y.2,
            terminal_dev: td,
            terminal_mean: tm,
        },
    ))
}

/// Cost of a control given at the grid nodes (linear in between).
pub fn cost(p: &ProblemSpec, x0: &Field, v: &FieldPath) -> Result<f64> {
    Ok(cost_parts(p, x0, v)?.total())
}

pub fn cost_parts(p: &ProblemSpec, x0: &Field, v: &FieldPath) -> Result<CostParts> {
    let c = Coefficients::new(p)?;
    if v.len() != c.steps + 1 {
        return Err(MfcError::dims("V", format!("{} nodes", c.steps + 1), format!("{} nodes", v.len())));
    }
    Ok(evaluate_control(&c, x0, &ControlPath::from_nodes(v))?.1)
}

/// Running cost plus a general terminal cost.
pub fn cost_with_phi(c: &Coefficients, x0: &Field, v: &ControlPath, phi: &PhiSpec) -> Result<f64> {
    let (state, parts) = evaluate_control(c, x0, v)?;
    let xt = Field::raw(state.nodes[c.steps].clone(), x0.ensemble());
    let term = phi.value(c, &xt).ok_or_else(|| {
        MfcError::InvalidArgument("terminal cost value is not available for this terminal cost".into())
    })?;
    Ok(parts.running() + term)
}

/// Uncontrolled flow with the control-offset forcing `f - G N⁻¹ beta`.
pub(crate) fn drift_track(c: &Coefficients, x0: &Mat, w: &Vector) -> Track<Mat> {
    integrate_forward(x0.clone(), c.steps, c.h, |j, x: &Mat| {
        let mut d = split_apply(&c.drift[j], &c.mean_drift_total[j], x, w);
        add_to_columns(&mut d, &c.shifted_forcing[j]);
        d
    })
}

pub fn drift_trajectory(p: &ProblemSpec, x0: &Field) -> Result<FieldPath> {
    let c = Coefficients::new(p)?;
    check_field(&c, x0)?;
    let tr = drift_track(&c, x0.values(), x0.weights());
    Ok(FieldPath::raw(tr.nodes, x0.ensemble()))
}

fn check_field(c: &Coefficients, x0: &Field) -> Result<()> {
    if x0.dim() != c.n {
        return Err(MfcError::dims("X0", format!("{} rows", c.n), format!("{} rows", x0.dim())));
    }
    Ok(())
}

/// Optimal feedback `-N⁻¹Gᵀ(P x + Gamma mean(x) + lambda) - N⁻¹ beta` at half-node `j`.
pub(crate) fn feedback(b: &RiccatiBundle, j: usize, x: &Mat, w: &Vector) -> Mat {
    let c = &b.coeffs;
    let mut q = split_apply(&b.p_half[j], &b.sigma_half[j], x, w);
    add_to_columns(&mut q, &b.lambda_half[j]);
    let mut v = -(&c.ninv_gt[j] * q);
    add_to_columns(&mut v, &(-&c.ninv_beta[j]));
    v
}

/// Closed-loop path from `x0` on the grid of `b`, with the feedback sampled
/// at nodes and Hermite midpoints.
pub(crate) fn closed_loop_path(b: &RiccatiBundle, x0: &Mat, w: &Vector) -> (StatePath, ControlPath) {
    let c = &b.coeffs;
    let mut nodes = vec![x0.clone()];
    let mut mids = Vec::with_capacity(c.steps);
    let mut ctrl = ControlPath {
        start: Vec::with_capacity(c.steps),
        mid: Vec::with_capacity(c.steps),
        end: Vec::with_capacity(c.steps),
    };
    for k in 0..c.steps {
        let (x1, mid) = closed_loop_step(b, k, &nodes[k], w);
        ctrl.start.push(feedback(b, 2 * k, &nodes[k], w));
        ctrl.mid.push(feedback(b, 2 * k + 1, &mid, w));
        ctrl.end.push(feedback(b, 2 * k + 2, &x1, w));
        mids.push(mid);
        nodes.push(x1);
    }
    (StatePath { nodes, mids }, ctrl)
}

/// One RK4 step of the closed loop; returns (end value, Hermite midpoint).
pub(crate) fn closed_loop_step(b: &RiccatiBundle, k: usize, x: &Mat, w: &Vector) -> (Mat, Mat) {
    let c = &b.coeffs;
    let st = rk4_forward(x, k, c.h, |j, y: &Mat| dynamics_rhs(c, j, y, &feedback(b, j, y, w), w));
    let mut mid = x + &st.value;
    mid *= 0.5;
    mid += (&st.d_start - &st.d_end) * (c.h / 8.0);
    (st.value, mid)
}

/// `½(P(0) X0, X0) + (lambda(0), X0) + C0`.
pub fn value_closed_form(b: &RiccatiBundle, x0: &Field) -> f64 {
    let c = &b.coeffs;
    let w = x0.weights();
    let quad = 0.5 * split_quad(&b.p.nodes[0], &b.sigma.nodes[0], x0.values(), w);
    let lin = b.lambda.nodes[0].dot(&x0.mean());
    let g = |j: usize| {
        let lam = &b.lambda_half[j];
        let u = c.input[j].transpose() * lam + &c.control_lin[j];
        c.forcing[j].dot(lam) - 0.5 * u.dot(&(&c.ninv[j] * &u))
    };
    let c0: f64 = (0..c.steps)
        .map(|k| c.h / 6.0 * (g(2 * k) + 4.0 * g(2 * k + 1) + g(2 * k + 2)))
        .sum();
    quad + lin + c0
}

pub fn solve_cos(p: &ProblemSpec, x0: &Field) -> Result<Solution> {
    let b = RiccatiBundle::new(p, TerminalMode::Lq)?;
    solve_cos_with(&b, x0)
}

pub fn solve_cos_with(b: &RiccatiBundle, x0: &Field) -> Result<Solution> {
    let c = &b.coeffs;
    check_field(c, x0)?;
    let (state, control) = closed_loop_path(b, x0.values(), x0.weights());
    let cost = evaluate_control(c, x0, &control)?.1.total();
    let value = value_closed_form(b, x0);
    Ok(Solution {
        method: Method::Cos,
        ens: x0.ensemble().clone(),
        times: c.grid.times(),
        state,
        control,
        cost,
        value_closed_form: Some(value),
        iterations: 0,
        residuals: vec![("value_gap".into(), (cost - value).abs())],
    })
}

/// Output of the kernel route: drift `X0`, displacement `xi`, adjoint `r`,
/// all as half-node values.
pub(crate) struct KernelRoute {
    pub drift: Vec<Mat>,
    pub xi: Vec<Mat>,
    pub r: Vec<Mat>,
}

/// Backward sweep for `-r' = L* r + M X0 + alpha` from `r_end`, with `X0`
/// given at half-nodes.
pub(crate) fn adjoint_sweep(b: &RiccatiBundle, drift_half: &[Mat], r_end: Mat, w: &Vector) -> Result<Track<Mat>> {
    let c = &b.coeffs;
    let adj: Vec<(Mat, Mat)> = b
        .a_p
        .iter()
        .zip(&b.a_sigma)
        .map(|(a, s)| (a.transpose(), s.transpose()))
        .collect();
    integrate_backward(
        r_end,
        c.steps,
        c.h,
        |j, r: &Mat| {
            let mut d = split_apply(&adj[j].0, &adj[j].1, r, w)
                + split_apply(&c.dev_weight[j], &c.mean_weight[j], &drift_half[j], w);
            add_to_columns(&mut d, &c.state_lin[j]);
            -d
        },
        |_, _| Ok::<(), MfcError>(()),
    )
}

/// Forward sweep `xi' = L xi - R r` from zero; `r_at(k, j)` gives the adjoint
/// at half-node `j` seen from interval `k`.
pub(crate) fn displacement_step(
    b: &RiccatiBundle,
    k: usize,
    xi: &Mat,
    w: &Vector,
    r_at: &dyn Fn(usize) -> Mat,
) -> (Mat, Mat) {
    let c = &b.coeffs;
    let st = rk4_forward(xi, k, c.h, |j, y: &Mat| {
        split_apply(&b.a_p[j], &b.a_sigma[j], y, w) - &c.gain[j] * r_at(j)
    });
    let mut mid = xi + &st.value;
    mid *= 0.5;
    mid += (&st.d_start - &st.d_end) * (c.h / 8.0);
    (st.value, mid)
}

pub(crate) fn kernel_route(b: &RiccatiBundle, x0: &Field, r_end: impl FnOnce(&Mat) -> Mat) -> Result<KernelRoute> {
    let c = &b.coeffs;
    let w = x0.weights();
    let drift = drift_track(c, x0.values(), w).half_values();
    let rt = r_end(&drift[2 * c.steps]);
    let r = adjoint_sweep(b, &drift, rt, w)?.half_values();
    let mut xi = vec![Mat::zeros(c.n, x0.values().ncols()); 2 * c.steps + 1];
    for k in 0..c.steps {
        let (x1, mid) = displacement_step(b, k, &xi[2 * k], w, &|j| r[j].clone());
        xi[2 * k + 1] = mid;
        xi[2 * k + 2] = x1;
    }
    Ok(KernelRoute { drift, xi, r })
}

impl KernelRoute {
    /// Total state and the control `-N⁻¹Gᵀ(P xi + r) - N⁻¹ beta`.
    pub fn assemble(&self, b: &RiccatiBundle, w: &Vector) -> (StatePath, ControlPath) {
        let c = &b.coeffs;
        let x: Vec<Mat> = self.drift.iter().zip(&self.xi).map(|(a, b)| a + b).collect();
        let state = StatePath {
            nodes: x.iter().step_by(2).cloned().collect(),
            mids: x.iter().skip(1).step_by(2).cloned().collect(),
        };
        let control = ControlPath::from_fn(c.steps, |j, _| {
            let q = split_apply(&b.p_half[j], &b.sigma_half[j], &self.xi[j], w) + &self.r[j];
            let mut v = -(&c.ninv_gt[j] * q);
            add_to_columns(&mut v, &(-&c.ninv_beta[j]));
            v
        });
        (state, control)
    }
}

/// Gradient of the quadratic terminal cost, `M_T x + alpha_T`.
pub(crate) fn adjoint_terminal(c: &Coefficients, xt: &Mat, w: &Vector) -> Mat {
    let mut r = split_apply(&c.terminal_dev, &c.terminal_mean, xt, w);
    add_to_columns(&mut r, &c.terminal_lin);
    r
}

pub fn solve_kernel_lq(p: &ProblemSpec, x0: &Field) -> Result<Solution> {
    let kh = KernelHandle::new(p, TerminalMode::Lq, false)?;
    solve_kernel_lq_with(&kh, x0)
}

/// Kernel route on a handle whose terminal weight is the problem's terminal cost.
pub fn solve_kernel_lq_with(kh: &KernelHandle, x0: &Field) -> Result<Solution> {
    let b = &kh.bundle;
    let c = &b.coeffs;
    check_field(c, x0)?;
    let w = x0.weights();
    let route = kernel_route(b, x0, |xt| adjoint_terminal(c, xt, w))?;
    let (state, control) = route.assemble(b, w);
    let cost = evaluate_control(c, x0, &control)?.1.total();
    let terminal_forcing = adjoint_terminal(c, &route.drift[2 * c.steps], w);
    let sample: Vec<usize> = (0..=10).map(|i| i * c.steps / 10).collect();
    let euler = euler_residual_direct(kh, &route, &terminal_forcing, &sample, w);
    Ok(Solution {
        method: Method::Kernel,
        ens: x0.ensemble().clone(),
        times: c.grid.times(),
        state,
        control,
        cost,
        value_closed_form: None,
        iterations: 0,
        residuals: vec![("euler_residual".into(), euler)],
    })
}

/// Largest particle norm of `xi(s) + ∫ K(s,t) (M X0 + alpha)(t) dt + K(s,T) g_T`
/// at the sampled nodes, with the kernel integral done by direct quadrature.
fn euler_residual_direct(kh: &KernelHandle, route: &KernelRoute, g_t: &Mat, sample: &[usize], w: &Vector) -> f64 {
    let c = kh.coeffs();
    let forcing: Vec<Mat> = (0..=2 * c.steps)
        .map(|j| {
            let mut g = split_apply(&c.dev_weight[j], &c.mean_weight[j], &route.drift[j], w);
            add_to_columns(&mut g, &c.state_lin[j]);
            g
        })
        .collect();
    let mut worst = 0.0_f64;
    for &ks in sample {
        let q = kernel_integral(kh, ks, &forcing, w)
            + apply_blocks(kh, ks, c.steps, g_t, w);
        let res = &route.xi[2 * ks] + q;
        worst = worst.max(col_sup(&res));
    }
    worst
}

fn apply_blocks(kh: &KernelHandle, ks: usize, kt: usize, z: &Mat, w: &Vector) -> Mat {
    let kp = kh.kernel_block_nodes(Block::Deviation, ks, kt);
    let ksg = kh.kernel_block_nodes(Block::Mean, ks, kt);
    split_apply(&kp, &ksg, z, w)
}

/// `∫₀ᵀ K(t_ks, t) g(t) dt` by Simpson's rule per interval (the kink of the
/// kernel sits on a node).
pub(crate) fn kernel_integral(kh: &KernelHandle, ks: usize, g_half: &[Mat], w: &Vector) -> Mat {
    let c = kh.coeffs();
    let s = c.grid.t(ks);
    let term = |j: usize| {
        let t = c.t_half(j);
        let kp = kh.kernel_block(Block::Deviation, s, t);
        let ksg = kh.kernel_block(Block::Mean, s, t);
        split_apply(&kp, &ksg, &g_half[j], w)
    };
    let mut acc = Mat::zeros(c.n, g_half[0].ncols());
    for k in 0..c.steps {
        acc += (term(2 * k) + term(2 * k + 1) * 4.0 + term(2 * k + 2)) * (c.h / 6.0);
    }
    acc
}

pub(crate) fn col_sup(m: &Mat) -> f64 {
    m.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Options for the terminal fixed point.
#[derive(Clone, Copy, Debug)]
pub struct FixedPointOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Optimal control with a general terminal cost.
///
/// The optimal displacement satisfies
/// `xi(s) = -q(s) - K(s,T) D(X0(T) + xi(T))` with `q(s) = ∫K(s,t)(M X0 + alpha)dt`
/// and the kernel built with zero terminal weight. The terminal value is
/// found by damped iteration at `s = T`; the path is then rebuilt from the
/// adjoint with terminal value `D(X(T))`.
pub fn solve_nonlinear(p: &ProblemSpec, x0: &Field, phi: &PhiSpec, opts: FixedPointOptions) -> Result<Solution> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(MfcError::InvalidArgument(format!("damping {} not in (0,1]", opts.damping)));
    }
    let kh = KernelHandle::new(p, TerminalMode::Zero, false)?;
    let b = &kh.bundle;
    let c = b.coeffs.clone();
    check_field(&c, x0)?;
    let w = x0.weights().clone();
    let ens = x0.ensemble();
    let kk = c.steps;

    // q from the ODE route: with zero terminal data the route gives -q.
    let free = kernel_route(b, x0, |xt| Mat::zeros(xt.nrows(), xt.ncols()))?;
    let q_t = -&free.xi[2 * kk];
    let x0_t = free.drift[2 * kk].clone();

    let ktt = (
        kh.kernel_block_nodes(Block::Deviation, kk, kk),
        kh.kernel_block_nodes(Block::Mean, kk, kk),
    );
    let grad = |xi_t: &Mat| -> Result<Mat> {
        Ok(phi.gradient(&c, &Field::raw(&x0_t + xi_t, ens))?.into_values())
    };
    let map = |xi_t: &Mat| -> Result<Mat> { Ok(-&q_t - split_apply(&ktt.0, &ktt.1, &grad(xi_t)?, &w)) };

    let mut theta = opts.damping;
    // Start from the optimum without terminal cost.
    let mut xi_t = -&q_t;
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let target = map(&xi_t)?;
        let res = col_sup(&(&target - &xi_t));
        if let Some(&prev) = history.last() {
            if res > prev {
                theta *= 0.5;
            }
        }
        history.push(res);
        if res <= opts.tol {
            converged = true;
            xi_t = target;
            break;
        }
        xi_t = &xi_t * (1.0 - theta) + target * theta;
    }
    if !converged {
        return Err(MfcError::NonConvergence {
            iterations: history.len(),
            last_residual: *history.last().unwrap_or(&f64::NAN),
            history,
        });
    }
    let d_star = grad(&xi_t)?;
    let route = kernel_route(b, x0, |_| d_star.clone())?;
    let (state, control) = route.assemble(b, &w);

    // First-order condition at every node, with q from the free route and
    // K(s,T) D* from the closed-form kernel.
    let mut euler = 0.0_f64;
    for k in 0..=kk {
        let res = &route.xi[2 * k] - &free.xi[2 * k] + apply_blocks(&kh, k, kk, &d_star, &w);
        euler = euler.max(col_sup(&res));
    }
    let (_, parts) = evaluate_control(&c, x0, &control)?;
    let xt = Field::raw(state.nodes[kk].clone(), ens);
    let cost = match phi.value(&c, &xt) {
        Some(v) => parts.running() + v,
        None => f64::NAN,
    };
    let iterations = history.len();
    Ok(Solution {
        method: Method::Nonlinear,
        ens: ens.clone(),
        times: c.grid.times(),
        state,
        control,
        cost,
        value_closed_form: None,
        iterations,
        residuals: vec![
            ("euler_residual".into(), euler),
            ("fixed_point_residual".into(), *history.last().unwrap()),
        ],
    })
}

/// Per-particle piecewise-constant controls on a coarse grid, forward Euler
/// dynamics, rectangle-rule cost, minimized by nonlinear conjugate gradients.
///
/// The returned `cost` is the cost of the resulting control evaluated
/// accurately on the problem grid (so it is an upper bound on the optimal
/// value); the discrete objective is reported as a residual.
pub fn brute_force_oracle(p: &ProblemSpec, x0: &Field, phi: Option<&PhiSpec>, coarse_k: usize) -> Result<Solution> {
    let c = Coefficients::new(p)?;
    check_field(&c, x0)?;
    if coarse_k == 0 || c.steps % coarse_k != 0 {
        return Err(MfcError::InvalidArgument(format!(
            "coarse grid of {coarse_k} steps must divide the problem grid of {} steps",
            c.steps
        )));
    }
    let phi = phi.cloned().unwrap_or(PhiSpec::Quadratic);
    let oracle = crate::oracle::DiscreteProblem::new(&c, x0, &phi, coarse_k);
    let out = oracle.minimize(1e-8, 20_000)?;
    let ratio = c.steps / coarse_k;
    let control = ControlPath::from_fn(c.steps, |_, k| out.controls[k / ratio].clone());
    let (state, parts) = evaluate_control(&c, x0, &control)?;
    let xt = Field::raw(state.nodes[c.steps].clone(), x0.ensemble());
    let cost = match phi.value(&c, &xt) {
        Some(v) => parts.running() + v,
        None => f64::NAN,
    };
    Ok(Solution {
        method: Method::Oracle,
        ens: x0.ensemble().clone(),
        times: c.grid.times(),
        state,
        control,
        cost,
        value_closed_form: None,
        iterations: out.iterations,
        residuals: vec![
            ("discrete_cost".into(), out.cost),
            ("gradient_norm".into(), out.gradient_norm),
            ("gradient_check".into(), out.gradient_check),
        ],
    })
}

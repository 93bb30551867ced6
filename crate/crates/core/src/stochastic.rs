//! Additive common noise: `dX = (F X + Fbar mean(X) + G V + f) ds + eta dw`
//! with one Wiener process per path shared by every particle.
//!
//! Uniform noise moves only the mean. Under the policies handled here the
//! deviations from the mean are deterministic, so a path ensemble stores
//! them once and keeps one mean trajectory per path.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::ensemble::{add_to_columns, split, split_apply, winner, Ensemble, Field};
use crate::error::{MfcError, Result};
use crate::export::fmt_f64;
use crate::kernel::{Blocks, KernelHandle};
use crate::linalg::{Mat, Vector};
use crate::ode::rk4_forward;
use crate::problem::{ProblemSpec, TimeGrid};
use crate::propagator::{Coefficients, RiccatiBundle, TerminalMode, VectorPath};
use crate::rng::NormalSource;
use crate::solver::{
    adjoint_terminal, displacement_step, kernel_route, running_parts, terminal_parts, value_closed_form, Method,
    Solution,
};
use crate::trajectory::{ControlPath, StatePath, TrajectoryWithControl};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    /// n×q loading of the q-dimensional Wiener process.
    pub eta: Mat,
    pub n_paths: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(eta: Mat, n_paths: usize, seed: u64) -> Result<Self> {
        if n_paths == 0 {
            return Err(MfcError::Validation("at least one path is required".into()));
        }
        if eta.ncols() == 0 || eta.iter().any(|v| !v.is_finite()) {
            return Err(MfcError::Validation("noise loading must be finite with at least one column".into()));
        }
        Ok(NoiseSpec { eta, n_paths, seed })
    }

    /// No noise, one path.
    pub fn none(n: usize) -> Self {
        NoiseSpec {
            eta: Mat::zeros(n, n),
            n_paths: 1,
            seed: 0,
        }
    }

    /// Dimension of the Wiener process.
    pub fn width(&self) -> usize {
        self.eta.ncols()
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.eta.nrows() != n {
            return Err(MfcError::dims("eta", format!("{n} rows"), format!("{} rows", self.eta.nrows())));
        }
        Ok(())
    }

    /// Brownian increments of `path`, one column per interval, variance `h`.
    /// Draw `k` of stream `path` under the seed is increment `k`.
    pub fn increments(&self, path: usize, steps: usize, h: f64) -> Mat {
        let q = self.width();
        let mut src = NormalSource::new(self.seed, path as u64, q);
        let mut out = Mat::zeros(q, steps);
        let mut buf = vec![0.0; q];
        let sh = h.sqrt();
        for k in 0..steps {
            src.fill(k as u64, &mut buf);
            for (i, z) in buf.iter().enumerate() {
                out[(i, k)] = z * sh;
            }
        }
        out
    }
}

/// Optimal feedback for the noisy problem: the noise does not enter it.
#[derive(Clone, Debug)]
pub struct StochasticFeedback {
    pub bundle: Arc<RiccatiBundle>,
}

impl StochasticFeedback {
    pub fn lambda(&self) -> &VectorPath {
        &self.bundle.lambda
    }

    /// `-N⁻¹Gᵀ(P x + Gamma mean(x) + lambda) - N⁻¹ beta` at grid node `node`.
    pub fn control(&self, node: usize, x: &Field) -> Result<Field> {
        let c = &self.bundle.coeffs;
        if node > c.steps || x.dim() != c.n {
            return Err(MfcError::InvalidArgument(format!(
                "node {node} of {} or state dimension {} (expected {})",
                c.steps,
                x.dim(),
                c.n
            )));
        }
        let v = crate::solver::feedback(&self.bundle, 2 * node, x.values(), x.weights());
        Ok(Field::raw(v, x.ensemble()))
    }
}

pub fn solve_stochastic(p: &ProblemSpec) -> Result<StochasticFeedback> {
    Ok(StochasticFeedback {
        bundle: Arc::new(RiccatiBundle::new(p, TerminalMode::Lq)?),
    })
}

/// Control applied along simulated paths.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    Zero,
    /// Deterministic control, the same on every path.
    OpenLoop(&'a ControlPath),
    Feedback(&'a StochasticFeedback),
}

/// Simulated paths. Field at node `k` of path `p`: `deviation.nodes[k]` plus
/// column `k` of `means[p]` on every particle.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub ens: Arc<Ensemble>,
    pub times: Vec<f64>,
    pub noise: NoiseSpec,
    pub deviation: StatePath,
    pub deviation_control: ControlPath,
    /// n×(K+1) per path, right limits at the nodes.
    pub means: Vec<Mat>,
    /// d×(K+1) per path, the control applied from each node on; at `T` the
    /// left limit, before the last increment.
    pub mean_controls: Vec<Mat>,
    /// q×K per path.
    pub increments: Vec<Mat>,
    pub costs: Vec<f64>,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.means.len()
    }

    pub fn field(&self, path: usize, k: usize) -> Field {
        let mut x = self.deviation.nodes[k].clone();
        add_to_columns(&mut x, &self.means[path].column(k).into_owned());
        Field::raw(x, &self.ens)
    }

    pub fn control(&self, path: usize, k: usize) -> Mat {
        let mut v = self.deviation_control.node(k).clone();
        add_to_columns(&mut v, &self.mean_controls[path].column(k).into_owned());
        v
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.deviation.nodes[0].nrows();
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = vec!["path_id".into(), "node_time".into(), "particle_id".into()];
        header.extend((0..n).map(|i| format!("x_{i}")));
        w.write_record(&header)?;
        for p in 0..self.n_paths() {
            for (k, t) in self.times.iter().enumerate() {
                let x = self.field(p, k);
                for (i, col) in x.values().column_iter().enumerate() {
                    let mut row = vec![p.to_string(), fmt_f64(*t), i.to_string()];
                    row.extend(col.iter().map(|v| fmt_f64(*v)));
                    w.write_record(&row)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct Simulator<'a> {
    c: &'a Coefficients,
    policy: Policy<'a>,
    // open-loop mean control at the three stages of every interval
    open_mean: Vec<[Vector; 3]>,
}

impl<'a> Simulator<'a> {
    fn new(c: &'a Coefficients, policy: Policy<'a>, w: &Vector) -> Result<Self> {
        let open_mean = match policy {
            Policy::OpenLoop(v) => {
                if v.steps() != c.steps || v.dim() != c.d || v.start[0].ncols() != w.len() {
                    return Err(MfcError::dims(
                        "control",
                        format!("{} intervals of dimension {} over {} particles", c.steps, c.d, w.len()),
                        format!("{} intervals of dimension {} over {} particles", v.steps(), v.dim(), v.start[0].ncols()),
                    ));
                }
                (0..c.steps)
                    .map(|k| [0, 1, 2].map(|i| v.stage(k, 2 * k + i) * w))
                    .collect()
            }
            _ => Vec::new(),
        };
        Ok(Simulator { c, policy, open_mean })
    }

    fn mean_control(&self, k: usize, j: usize, x: &Vector) -> Vector {
        let c = self.c;
        match self.policy {
            Policy::Zero => Vector::zeros(c.d),
            Policy::OpenLoop(_) => self.open_mean[k][j - 2 * k].clone(),
            Policy::Feedback(fb) => {
                let b = &fb.bundle;
                let q = &b.sigma_half[j] * x + &b.lambda_half[j];
                -(&c.ninv_gt[j] * q) - &c.ninv_beta[j]
            }
        }
    }

    fn dev_control(&self, k: usize, j: usize, x: &Mat, w: &Vector) -> Mat {
        let c = self.c;
        match self.policy {
            Policy::Zero => Mat::zeros(c.d, x.ncols()),
            Policy::OpenLoop(v) => split(v.stage(k, j), w).0,
            Policy::Feedback(fb) => -(&c.ninv_gt[j] * (&fb.bundle.p_half[j] * x)),
        }
    }

    /// Deviation path with its running and terminal cost.
    fn deviation(&self, x0: &Field) -> (StatePath, ControlPath, f64) {
        let c = self.c;
        let w = x0.weights();
        let mut y = (split(x0.values(), w).0, 0.0_f64);
        let mut nodes = vec![y.0.clone()];
        let mut mids = Vec::with_capacity(c.steps);
        let mut ctrl = ControlPath {
            start: Vec::with_capacity(c.steps),
            mid: Vec::with_capacity(c.steps),
            end: Vec::with_capacity(c.steps),
        };
        for k in 0..c.steps {
            let st = rk4_forward(&y, k, c.h, |j, s: &(Mat, f64)| {
                let v = self.dev_control(k, j, &s.0, w);
                let run = 0.5
                    * (winner(&s.0, &(&c.dev_weight[j] * &s.0), w) + winner(&v, &(&c.control_cost[j] * &v), w));
                (&c.drift[j] * &s.0 + &c.input[j] * v, run)
            });
            let mut mid = &y.0 + &st.value.0;
            mid *= 0.5;
            mid += (&st.d_start.0 - &st.d_end.0) * (c.h / 8.0);
            ctrl.start.push(self.dev_control(k, 2 * k, &y.0, w));
            ctrl.mid.push(self.dev_control(k, 2 * k + 1, &mid, w));
            ctrl.end.push(self.dev_control(k, 2 * k + 2, &st.value.0, w));
            mids.push(mid);
            nodes.push(st.value.0.clone());
            y = st.value;
        }
        let xt = &y.0;
        let cost = y.1 + 0.5 * winner(xt, &(&c.terminal_dev * xt), w);
        (StatePath { nodes, mids }, ctrl, cost)
    }

    /// Mean path of one realization: node values, node controls, cost.
    fn mean(&self, x0: &Vector, eta: &Mat, dw: &Mat) -> (Mat, Mat, f64) {
        let c = self.c;
        let kk = c.steps;
        let mut nodes = Mat::zeros(c.n, kk + 1);
        let mut ctrl = Mat::zeros(c.d, kk + 1);
        nodes.set_column(0, x0);
        let mut y = (x0.clone(), 0.0_f64);
        for k in 0..kk {
            ctrl.set_column(k, &self.mean_control(k, 2 * k, &y.0));
            let st = rk4_forward(&y, k, c.h, |j, s: &(Vector, f64)| {
                let v = self.mean_control(k, j, &s.0);
                let x = &s.0;
                let run = 0.5 * (x.dot(&(&c.mean_weight[j] * x)) + v.dot(&(&c.control_cost[j] * &v)))
                    + c.state_lin[j].dot(x)
                    + c.control_lin[j].dot(&v);
                (&c.mean_drift_total[j] * x + &c.input[j] * v + &c.forcing[j], run)
            });
            y = st.value;
            if k + 1 == kk {
                ctrl.set_column(kk, &self.mean_control(k, 2 * kk, &y.0));
            }
            y.0 += eta * dw.column(k);
            nodes.set_column(k + 1, &y.0);
        }
        let x = &y.0;
        let cost = y.1 + 0.5 * x.dot(&(&c.terminal_mean * x)) + c.terminal_lin.dot(x);
        (nodes, ctrl, cost)
    }
}

fn coefficients_for(p: &ProblemSpec, policy: &Policy) -> Result<Arc<Coefficients>> {
    match policy {
        Policy::Feedback(fb) => Ok(fb.bundle.coeffs.clone()),
        _ => Coefficients::new(p),
    }
}

fn check_state(c: &Coefficients, x0: &Field, noise: &NoiseSpec) -> Result<()> {
    if x0.dim() != c.n {
        return Err(MfcError::dims("X0", format!("{} rows", c.n), format!("{} rows", x0.dim())));
    }
    noise.check(c.n)
}

/// Simulate every path of `noise` under `policy`. Drift by RK4 within each
/// interval; `eta Δw_k` is added exactly at the end of interval `k`. With
/// a feedback policy the coefficients come from its bundle.
pub fn simulate(p: &ProblemSpec, x0: &Field, noise: &NoiseSpec, policy: Policy) -> Result<PathEnsemble> {
    let c = coefficients_for(p, &policy)?;
    check_state(&c, x0, noise)?;
    let sim = Simulator::new(&c, policy, x0.weights())?;
    let (deviation, deviation_control, dev_cost) = sim.deviation(x0);
    let xbar = x0.mean();
    let mut out = PathEnsemble {
        ens: x0.ensemble().clone(),
        times: c.grid.times(),
        noise: noise.clone(),
        deviation,
        deviation_control,
        means: Vec::with_capacity(noise.n_paths),
        mean_controls: Vec::with_capacity(noise.n_paths),
        increments: Vec::with_capacity(noise.n_paths),
        costs: Vec::with_capacity(noise.n_paths),
    };
    for path in 0..noise.n_paths {
        let dw = noise.increments(path, c.steps, c.h);
        let (m, v, cost) = sim.mean(&xbar, &noise.eta, &dw);
        out.means.push(m);
        out.mean_controls.push(v);
        out.increments.push(dw);
        out.costs.push(dev_cost + cost);
    }
    Ok(out)
}

/// Sample mean and standard error of the per-path costs (each integrated
/// along its path with the control realized there).
pub fn estimate_cost_mc(paths: &PathEnsemble) -> (f64, f64) {
    mean_and_stderr(&paths.costs)
}

/// Sample mean and standard error, shifted by the first sample so that
/// identical samples give a standard error of exactly 0.
pub fn mean_and_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let x0 = x[0];
    let d_mean = x.iter().map(|v| v - x0).sum::<f64>() / n as f64;
    if n == 1 {
        return (x0 + d_mean, 0.0);
    }
    let var = x.iter().map(|v| (v - x0 - d_mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (x0 + d_mean, (var / n as f64).sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct McReport {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub closed_form: Option<f64>,
    pub z_score: Option<f64>,
}

/// Monte Carlo cost without storing the paths. The closed-form value is
/// attached when the policy is the optimal feedback.
pub fn monte_carlo(p: &ProblemSpec, x0: &Field, noise: &NoiseSpec, policy: Policy) -> Result<McReport> {
    let c = coefficients_for(p, &policy)?;
    check_state(&c, x0, noise)?;
    let sim = Simulator::new(&c, policy, x0.weights())?;
    let dev_cost = sim.deviation(x0).2;
    let xbar = x0.mean();
    let costs: Vec<f64> = (0..noise.n_paths)
        .map(|path| {
            let dw = noise.increments(path, c.steps, c.h);
            dev_cost + sim.mean(&xbar, &noise.eta, &dw).2
        })
        .collect();
    let closed_form = match policy {
        Policy::Feedback(fb) => Some(value_closed_form(&fb.bundle, x0) + noise_value(&fb.bundle, &noise.eta)),
        _ => None,
    };
    Ok(McReport::from_costs(&costs, noise.seed, closed_form))
}

impl McReport {
    pub fn from_costs(costs: &[f64], seed: u64, closed_form: Option<f64>) -> Self {
        let (mean, stderr) = mean_and_stderr(costs);
        let z_score = closed_form.map(|v| {
            if stderr > 0.0 {
                (mean - v) / stderr
            } else if mean == v {
                0.0
            } else {
                f64::INFINITY.copysign(mean - v)
            }
        });
        McReport {
            mean,
            stderr,
            n_paths: costs.len(),
            seed,
            closed_form,
            z_score,
        }
    }
}

/// `½ ∫ tr(ηᵀ Sigma η) ds` by Simpson per interval.
fn noise_value(b: &RiccatiBundle, eta: &Mat) -> f64 {
    let c = &b.coeffs;
    let g = |j: usize| (eta.transpose() * &b.sigma_half[j] * eta).trace();
    0.5 * (0..c.steps)
        .map(|k| c.h / 6.0 * (g(2 * k) + 4.0 * g(2 * k + 1) + g(2 * k + 2)))
        .sum::<f64>()
}

/// Optimal expected cost: the noiseless value plus `½ ∫ tr(ηᵀ Sigma η) ds`.
pub fn stochastic_value(p: &ProblemSpec, x0: &Field, noise: &NoiseSpec) -> Result<f64> {
    let b = RiccatiBundle::new(p, TerminalMode::Lq)?;
    check_state(&b.coeffs, x0, noise)?;
    Ok(value_closed_form(&b, x0) + noise_value(&b, &noise.eta))
}

/// `base + Σ_k A_k Δw_k`, where `A_k` (n×q) acts the same on every particle.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineRandomField {
    pub base: Field,
    loadings: BTreeMap<usize, Mat>,
    grid: TimeGrid,
    noise_dim: usize,
}

impl AffineRandomField {
    pub fn deterministic(base: Field, grid: TimeGrid, noise_dim: usize) -> Self {
        AffineRandomField {
            base,
            loadings: BTreeMap::new(),
            grid,
            noise_dim,
        }
    }

    pub fn with_loading(mut self, k: usize, a: Mat) -> Result<Self> {
        if k >= self.grid.steps {
            return Err(MfcError::InvalidArgument(format!(
                "increment {k} outside a grid of {} intervals",
                self.grid.steps
            )));
        }
        if a.shape() != (self.base.dim(), self.noise_dim) {
            return Err(MfcError::dims(
                "loading",
                format!("{}x{}", self.base.dim(), self.noise_dim),
                format!("{}x{}", a.nrows(), a.ncols()),
            ));
        }
        self.loadings.insert(k, a);
        Ok(self)
    }

    pub fn loadings(&self) -> &BTreeMap<usize, Mat> {
        &self.loadings
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// `E[(z, z')_H]` from `E[Δw_j Δw_kᵀ] = δ_jk h I`.
    pub fn inner(&self, other: &AffineRandomField) -> Result<f64> {
        let mut acc = self.base.inner_h(&other.base)?;
        for (k, a) in &self.loadings {
            if let Some(b) = other.loadings.get(k) {
                acc += self.grid.h() * a.dot(b);
            }
        }
        Ok(acc)
    }

    /// The realization for increments `dw` (q×K).
    pub fn sample(&self, dw: &Mat) -> Field {
        let mut shift = Vector::zeros(self.base.dim());
        for (k, a) in &self.loadings {
            shift += a * dw.column(*k);
        }
        let mut x = self.base.values().clone();
        add_to_columns(&mut x, &shift);
        Field::raw(x, self.base.ensemble())
    }
}

/// `E[z | information at tau]`: keeps the increments complete by `tau`.
pub fn conditional_expectation(z: &AffineRandomField, tau: f64) -> Result<AffineRandomField> {
    let node = z.grid.node_of(tau).ok_or_else(|| {
        MfcError::InvalidArgument(format!("time {tau} is not a grid node"))
    })?;
    Ok(AffineRandomField {
        loadings: z
            .loadings
            .iter()
            .filter(|(k, _)| **k < node)
            .map(|(k, a)| (*k, a.clone()))
            .collect(),
        ..z.clone()
    })
}

fn zero_start_kernel(kh: &KernelHandle) -> Result<()> {
    if kh.include_initial_term {
        return Err(MfcError::InvalidArgument(
            "the adapted kernel is defined for trajectories starting at zero".into(),
        ));
    }
    Ok(())
}

/// `K₁(s,t) z = ∫₀^{min(s,t)} Psi(s,τ) R Psi(t,τ)ᵀ E[z | τ] dτ`. A loading on
/// increment `k` is seen only from `t_{k+1}` on.
pub fn kernel_apply_stochastic(kh: &KernelHandle, s: f64, t: f64, z: &AffineRandomField) -> Result<AffineRandomField> {
    zero_start_kernel(kh)?;
    let c = kh.coeffs();
    let ks = c.node_of(s)?;
    let kt = c.node_of(t)?;
    let fl = &kh.bundle.flow_sigma;
    let m = ks.min(kt);
    let mut out = AffineRandomField::deterministic(kh.kernel_apply(s, t, &z.base), z.grid, z.noise_dim);
    for (k, a) in &z.loadings {
        if m > k + 1 {
            let inner = &fl.gramian.nodes[m] - &fl.gramian.nodes[k + 1];
            let block = &fl.fwd.nodes[ks] * inner * fl.fwd.nodes[kt].transpose();
            out.loadings.insert(*k, block * a);
        }
    }
    Ok(out)
}

/// An adapted trajectory generated by a control affine in the increments.
/// Loading `k` of state (n×q) and control (d×q) vanishes before `t_{k+1}`.
#[derive(Clone, Debug)]
pub struct AdaptedTrajectory {
    pub base: TrajectoryWithControl,
    loadings: BTreeMap<usize, (StatePath, ControlPath)>,
    noise_dim: usize,
}

impl AdaptedTrajectory {
    /// Each loading control must be zero on intervals `0..=k`: the increment
    /// is not known before `t_{k+1}`.
    pub fn new(
        c: &Coefficients,
        base: TrajectoryWithControl,
        loading_controls: BTreeMap<usize, ControlPath>,
        noise_dim: usize,
    ) -> Result<Self> {
        let mut loadings = BTreeMap::new();
        for (k, u) in loading_controls {
            if k >= c.steps {
                return Err(MfcError::NotAdapted(format!("increment {k} outside the grid")));
            }
            if u.steps() != c.steps || u.dim() != c.d || u.start[0].ncols() != noise_dim {
                return Err(MfcError::dims(
                    "loading control",
                    format!("{} intervals of {}x{}", c.steps, c.d, noise_dim),
                    format!("{} intervals of {}x{}", u.steps(), u.dim(), u.start[0].ncols()),
                ));
            }
            for m in 0..=k {
                if [&u.start[m], &u.mid[m], &u.end[m]].iter().any(|v| v.iter().any(|x| *x != 0.0)) {
                    return Err(MfcError::NotAdapted(format!(
                        "loading on increment {k} is nonzero on interval {m}, before the increment is observed"
                    )));
                }
            }
            let state = uniform_state(c, k + 1, &u);
            loadings.insert(k, (state, u));
        }
        Ok(AdaptedTrajectory {
            base,
            loadings,
            noise_dim,
        })
    }

    pub fn at(&self, node: usize, grid: TimeGrid) -> AffineRandomField {
        AffineRandomField {
            base: self.base.state_at(node),
            loadings: self
                .loadings
                .iter()
                .map(|(k, (s, _))| (*k, s.nodes[node].clone()))
                .collect(),
            grid,
            noise_dim: self.noise_dim,
        }
    }
}

/// `B' = (F + Fbar) B + G U` from zero at node `k_start`.
fn uniform_state(c: &Coefficients, k_start: usize, u: &ControlPath) -> StatePath {
    let cols = u.start[0].ncols();
    let zero = Mat::zeros(c.n, cols);
    let mut nodes = vec![zero.clone()];
    let mut mids = Vec::with_capacity(c.steps);
    for k in 0..c.steps {
        if k < k_start {
            nodes.push(zero.clone());
            mids.push(zero.clone());
            continue;
        }
        let st = rk4_forward(&nodes[k], k, c.h, |j, y: &Mat| {
            &c.mean_drift_total[j] * y + &c.input[j] * u.stage(k, j)
        });
        let mut mid = &nodes[k] + &st.value;
        mid *= 0.5;
        mid += (&st.d_start - &st.d_end) * (c.h / 8.0);
        mids.push(mid);
        nodes.push(st.value);
    }
    StatePath { nodes, mids }
}

/// Norm bilinear form on columns that are uniform across particles.
fn uniform_inner(kh: &KernelHandle, a: (&StatePath, &ControlPath), b: (&StatePath, &ControlPath)) -> f64 {
    let c = kh.coeffs();
    let q = |k: usize, j: usize| {
        let x = a.0.half(j);
        let y = b.0.half(j);
        let u = kh.projector(j) * a.1.stage(k, j);
        let v = kh.projector(j) * b.1.stage(k, j);
        x.dot(&(&c.mean_weight[j] * y)) + u.dot(&(&c.control_cost[j] * v))
    };
    let mut total = 0.0;
    for k in 0..c.steps {
        total += c.h / 6.0 * (q(k, 2 * k) + 4.0 * q(k, 2 * k + 1) + q(k, 2 * k + 2));
    }
    let (_, tm) = kh.bundle.terminal_weights();
    total + a.0.nodes[c.steps].dot(&(tm * &b.0.nodes[c.steps]))
}

/// `|E(ξ(t), z) - <K₁(·,t) z, ξ>|`, both sides exact on the affine representations.
pub fn reproducing_residual_stochastic(
    kh: &KernelHandle,
    traj: &AdaptedTrajectory,
    t: f64,
    z: &AffineRandomField,
) -> Result<f64> {
    zero_start_kernel(kh)?;
    let c = kh.coeffs();
    let kt = c.node_of(t)?;
    if traj.noise_dim != z.noise_dim {
        return Err(MfcError::dims("noise dimension", traj.noise_dim.to_string(), z.noise_dim.to_string()));
    }
    let lhs = traj.at(kt, c.grid).inner(z)?;
    let y = kh.kernel_apply_ode(t, &z.base)?;
    let mut rhs = kh.rkhs_inner(&traj.base, &y)?;
    let w = Vector::from_element(z.noise_dim, 1.0 / z.noise_dim as f64);
    for (k, a) in &z.loadings {
        if let Some((bs, bc)) = traj.loadings.get(k) {
            if kt > k + 1 {
                let (ys, yc) = kh.kernel_column(kt, k + 1, a, &w, Blocks::Uniform)?;
                rhs += c.h * uniform_inner(kh, (bs, bc), (&ys, &yc));
            }
        }
    }
    Ok((lhs - rhs).abs())
}

/// Optimal trajectory of every path by the kernel route.
///
/// The uncontrolled state `X0` carries the noise. Its adjoint is the
/// noiseless adjoint plus `Sigma` times the noise-driven shift of the mean,
/// and the displacement from `X0` then follows the noiseless forward sweep.
pub fn for_each_kernel_stochastic_path(
    p: &ProblemSpec,
    x0: &Field,
    noise: &NoiseSpec,
    mut visit: impl FnMut(usize, Solution) -> Result<()>,
) -> Result<()> {
    let b = RiccatiBundle::new(p, TerminalMode::Lq)?;
    let c = b.coeffs.clone();
    check_state(&c, x0, noise)?;
    let w = x0.weights();
    let det = kernel_route(&b, x0, |xt| adjoint_terminal(&c, xt, w))?;
    let value = value_closed_form(&b, x0) + noise_value(&b, &noise.eta);
    let control_at = |j: usize, xi: &Mat, r: &Mat| {
        let q = split_apply(&b.p_half[j], &b.sigma_half[j], xi, w) + r;
        let mut v = -(&c.ninv_gt[j] * q);
        add_to_columns(&mut v, &(-&c.ninv_beta[j]));
        v
    };
    let cols = x0.values().ncols();
    for path in 0..noise.n_paths {
        let dw = noise.increments(path, c.steps, c.h);
        let mut e = Vector::zeros(c.n);
        let mut xi = Mat::zeros(c.n, cols);
        let mut nodes = vec![x0.values().clone()];
        let mut mids = Vec::with_capacity(c.steps);
        let mut control = ControlPath {
            start: Vec::with_capacity(c.steps),
            mid: Vec::with_capacity(c.steps),
            end: Vec::with_capacity(c.steps),
        };
        let mut running = 0.0;
        for k in 0..c.steps {
            let st = rk4_forward(&e, k, c.h, |j, y: &Vector| &c.mean_drift_total[j] * y);
            let mut e_mid = &e + &st.value;
            e_mid *= 0.5;
            e_mid += (&st.d_start - &st.d_end) * (c.h / 8.0);
            let shifts = [e.clone(), e_mid, st.value];
            let r_at = |j: usize| {
                let mut r = det.r[j].clone();
                add_to_columns(&mut r, &(&b.sigma_half[j] * &shifts[j - 2 * k]));
                r
            };
            let (xi_end, xi_mid) = displacement_step(&b, k, &xi, w, &r_at);
            let xis = [&xi, &xi_mid, &xi_end];
            let mut cost_k = [0.0; 3];
            let mut states = Vec::with_capacity(3);
            let mut ctrls = Vec::with_capacity(3);
            for i in 0..3 {
                let j = 2 * k + i;
                let mut x = &det.drift[j] + xis[i];
                add_to_columns(&mut x, &shifts[i]);
                let v = control_at(j, xis[i], &r_at(j));
                let (a, bm) = running_parts(&c, j, &x, &v, w);
                cost_k[i] = a + bm;
                states.push(x);
                ctrls.push(v);
            }
            running += c.h / 6.0 * (cost_k[0] + 4.0 * cost_k[1] + cost_k[2]);
            let [v0, v1, v2]: [Mat; 3] = ctrls.try_into().expect("three stages");
            control.start.push(v0);
            control.mid.push(v1);
            control.end.push(v2);
            mids.push(states.swap_remove(1));
            e = shifts[2].clone() + &noise.eta * dw.column(k);
            let mut x1 = &det.drift[2 * k + 2] + &xi_end;
            add_to_columns(&mut x1, &e);
            nodes.push(x1);
            xi = xi_end;
        }
        let (td, tm) = terminal_parts(&c, &nodes[c.steps], w);
        let sol = Solution {
            method: Method::KernelStochastic,
            ens: x0.ensemble().clone(),
            times: c.grid.times(),
            state: StatePath { nodes, mids },
            control,
            cost: running + td + tm,
            value_closed_form: Some(value),
            iterations: 0,
            residuals: Vec::new(),
        };
        visit(path, sol)?;
    }
    Ok(())
}

pub fn solve_kernel_stochastic(p: &ProblemSpec, x0: &Field, noise: &NoiseSpec) -> Result<Vec<Solution>> {
    let mut out = Vec::with_capacity(noise.n_paths);
    for_each_kernel_stochastic_path(p, x0, noise, |_, s| {
        out.push(s);
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{CoeffPath, Dims};

    fn scalar(steps: usize) -> ProblemSpec {
        let mut p = ProblemSpec::zeros(Dims { n: 1, d: 1 }, TimeGrid::new(1.0, steps).unwrap());
        p.input = CoeffPath::constant(Mat::identity(1, 1));
        p.state_cost = CoeffPath::constant(Mat::identity(1, 1));
        p
    }

    fn pair() -> Field {
        let ens = Ensemble::new(Mat::from_row_slice(1, 2, &[-1.0, 1.0]), None).unwrap();
        Field::identity(&ens)
    }

    #[test]
    fn brownian_marginals() {
        let p = ProblemSpec::zeros(Dims { n: 2, d: 1 }, TimeGrid::new(1.0, 10).unwrap());
        let ens = Ensemble::new(Mat::zeros(2, 1), None).unwrap();
        let x0 = Field::zeros(2, &ens);
        let noise = NoiseSpec::new(Mat::identity(2, 2), 4000, 11).unwrap();
        let paths = simulate(&p, &x0, &noise, Policy::Zero).unwrap();
        for k in [3, 10] {
            let t = k as f64 / 10.0;
            let mut cov = Mat::zeros(2, 2);
            for m in &paths.means {
                let x = m.column(k);
                cov += x * x.transpose();
            }
            cov /= noise.n_paths as f64;
            let tol = 4.0 / (noise.n_paths as f64).sqrt();
            assert!(((cov[(0, 0)] / t) - 1.0).abs() < tol, "{cov}");
            assert!(((cov[(1, 1)] / t) - 1.0).abs() < tol, "{cov}");
            assert!((cov[(0, 1)] / t).abs() < tol, "{cov}");
        }
    }

    #[test]
    fn noiseless_feedback_is_closed_loop() {
        let p = scalar(100);
        let x0 = pair();
        let fb = solve_stochastic(&p).unwrap();
        let paths = simulate(&p, &x0, &NoiseSpec::none(1), Policy::Feedback(&fb)).unwrap();
        let cos = crate::solver::solve_cos(&p, &x0).unwrap();
        for k in 0..=100 {
            assert!((paths.field(0, k).values() - &cos.state.nodes[k]).amax() < 1e-12);
        }
        let (mean, se) = estimate_cost_mc(&paths);
        assert_eq!(se, 0.0);
        // closed-loop versus replayed-control cost quadrature
        assert!((mean - cos.cost).abs() < 1e-10);
    }

    #[test]
    fn conditioning_truncates() {
        let x0 = pair();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let z = AffineRandomField::deterministic(x0, grid, 1)
            .with_loading(2, Mat::from_element(1, 1, 1.0))
            .unwrap()
            .with_loading(7, Mat::from_element(1, 1, 2.0))
            .unwrap();
        assert_eq!(conditional_expectation(&z, 0.0).unwrap().loadings().len(), 0);
        assert_eq!(conditional_expectation(&z, 0.3).unwrap().loadings().len(), 1);
        assert_eq!(conditional_expectation(&z, 1.0).unwrap(), z);
    }

    #[test]
    fn scalar_adapted_kernel_is_shifted_min() {
        let mut p = ProblemSpec::zeros(Dims { n: 1, d: 1 }, TimeGrid::new(1.0, 10).unwrap());
        p.input = CoeffPath::constant(Mat::identity(1, 1));
        let kh = KernelHandle::new(&p, TerminalMode::Lq, false).unwrap();
        let z = AffineRandomField::deterministic(pair(), p.grid, 1)
            .with_loading(2, Mat::from_element(1, 1, 3.0))
            .unwrap();
        let out = kernel_apply_stochastic(&kh, 0.8, 0.6, &z).unwrap();
        assert!((out.base.values() - z.base.values() * 0.6).amax() < 1e-13);
        assert!((out.loadings()[&2][(0, 0)] - 3.0 * (0.6 - 0.3)).abs() < 1e-13);
        let early = kernel_apply_stochastic(&kh, 0.3, 0.9, &z).unwrap();
        assert!(early.loadings().is_empty());
    }
}

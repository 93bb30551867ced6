//! Backward Riccati and affine-term integration, and the forward
//! fundamental matrices of the two closed-loop flows.
//!
//! The H-operator Riccati solution acts as `P` on deviations and
//! `Sigma = P + Gamma` on the mean; likewise the closed-loop semigroup acts
//! through `Psi_P` on deviations and `Psi_Sigma` on the mean. Every
//! operator in this crate with that structure is stored as such a pair.

use std::io::Write;
use std::sync::Arc;

use crate::ensemble::{split_apply, Field};
use crate::error::{MfcError, Result};
use crate::export::fmt_f64;
use crate::linalg::{max_abs, spd_inverse, symmetrize, Mat, Vector};
use crate::ode::{integrate_backward, integrate_forward, Track};
use crate::problem::{ProblemSpec, TimeGrid};

pub type MatrixPath = Track<Mat>;
pub type VectorPath = Track<Vector>;

const BLOW_UP: f64 = 1e12;
const CONDITIONING_LIMIT: f64 = 1e8;

/// Problem coefficients evaluated once on the half grid (`2K+1` entries).
#[derive(Clone, Debug)]
pub struct Coefficients {
    pub n: usize,
    pub d: usize,
    pub h: f64,
    pub steps: usize,
    pub horizon: f64,
    /// F
    pub drift: Vec<Mat>,
    /// F + Fbar
    pub mean_drift_total: Vec<Mat>,
    /// G
    pub input: Vec<Mat>,
    /// N
    pub control_cost: Vec<Mat>,
    /// N⁻¹
    pub ninv: Vec<Mat>,
    /// N⁻¹ Gᵀ
    pub ninv_gt: Vec<Mat>,
    /// G N⁻¹ Gᵀ
    pub gain: Vec<Mat>,
    /// M + Mbar
    pub dev_weight: Vec<Mat>,
    /// M + Mbar + MbarS
    pub mean_weight: Vec<Mat>,
    /// f
    pub forcing: Vec<Vector>,
    /// alpha
    pub state_lin: Vec<Vector>,
    /// beta
    pub control_lin: Vec<Vector>,
    /// N⁻¹ beta
    pub ninv_beta: Vec<Vector>,
    /// f - G N⁻¹ beta
    pub shifted_forcing: Vec<Vector>,
    pub terminal_dev: Mat,
    pub terminal_mean: Mat,
    pub terminal_lin: Vector,
    /// J0 (deviation weight at time 0)
    pub initial_dev: Mat,
    /// J0 + Jbar0
    pub initial_mean: Mat,
    pub grid: TimeGrid,
}

impl Coefficients {
    pub fn new(p: &ProblemSpec) -> Result<Arc<Self>> {
        p.check_shapes()?;
        let steps = p.steps();
        let count = 2 * steps + 1;
        let mut c = Coefficients {
            n: p.dims.n,
            d: p.dims.d,
            h: p.h(),
            steps,
            horizon: p.grid.horizon,
            drift: Vec::with_capacity(count),
            mean_drift_total: Vec::with_capacity(count),
            input: Vec::with_capacity(count),
            control_cost: Vec::with_capacity(count),
            ninv: Vec::with_capacity(count),
            ninv_gt: Vec::with_capacity(count),
            gain: Vec::with_capacity(count),
            dev_weight: Vec::with_capacity(count),
            mean_weight: Vec::with_capacity(count),
            forcing: Vec::with_capacity(count),
            state_lin: Vec::with_capacity(count),
            control_lin: Vec::with_capacity(count),
            ninv_beta: Vec::with_capacity(count),
            shifted_forcing: Vec::with_capacity(count),
            terminal_dev: p.terminal_dev_weight(),
            terminal_mean: p.terminal_mean_weight(),
            terminal_lin: p.terminal_lin.clone(),
            initial_dev: p.initial_weight.clone(),
            initial_mean: &p.initial_weight + &p.initial_mean_weight,
            grid: p.grid,
        };
        for j in 0..count {
            let f = p.drift.half(j);
            let fbar = p.mean_drift.half(j);
            let g = p.input.half(j);
            let nn = p.control_cost.half(j);
            let ninv = spd_inverse(&nn).ok_or_else(|| {
                MfcError::Validation(format!("N not invertible at half-node {j}"))
            })?;
            let ninv_gt = &ninv * g.transpose();
            let mut gain = &g * &ninv_gt;
            symmetrize(&mut gain);
            let dev = p.state_cost.half(j) + p.mean_cost.half(j);
            let mean = &dev + p.running_mean_penalty_half(j);
            let forcing = p.forcing.vec_half(j);
            let beta = p.control_lin.vec_half(j);
            let ninv_beta = &ninv * &beta;
            c.shifted_forcing.push(&forcing - &g * &ninv_beta);
            c.mean_drift_total.push(&f + fbar);
            c.drift.push(f);
            c.input.push(g);
            c.control_cost.push(nn);
            c.ninv.push(ninv);
            c.ninv_gt.push(ninv_gt);
            c.gain.push(gain);
            c.dev_weight.push(dev);
            c.mean_weight.push(mean);
            c.forcing.push(forcing);
            c.state_lin.push(p.state_lin.vec_half(j));
            c.control_lin.push(beta);
            c.ninv_beta.push(ninv_beta);
        }
        Ok(Arc::new(c))
    }

    /// Time of half-node `j`.
    pub fn t_half(&self, j: usize) -> f64 {
        self.grid.t_half(j)
    }

    /// Node index of `t`, or an error if `t` is off the grid.
    pub fn node_of(&self, t: f64) -> Result<usize> {
        self.grid
            .node_of(t)
            .ok_or_else(|| MfcError::InvalidArgument(format!("time {t} is not a grid node")))
    }
}

/// Terminal data of the operator Riccati equation.
#[derive(Clone, Debug, PartialEq)]
pub enum TerminalMode {
    /// The quadratic terminal cost of the problem.
    Lq,
    /// No terminal weight (used with non-quadratic terminal costs).
    Zero,
    /// Explicit weights on deviations and on the mean.
    Custom { dev: Mat, mean: Mat },
}

impl TerminalMode {
    pub fn weights(&self, c: &Coefficients) -> (Mat, Mat) {
        match self {
            TerminalMode::Lq => (c.terminal_dev.clone(), c.terminal_mean.clone()),
            TerminalMode::Zero => (Mat::zeros(c.n, c.n), Mat::zeros(c.n, c.n)),
            TerminalMode::Custom { dev, mean } => (dev.clone(), mean.clone()),
        }
    }
}

fn riccati_track(
    a: &[Mat],
    gain: &[Mat],
    weight: &[Mat],
    terminal: Mat,
    h: f64,
    steps: usize,
    what: &'static str,
) -> Result<MatrixPath> {
    let rhs = |j: usize, p: &Mat| -> Mat {
        let pa = p * &a[j];
        let prp = p * &gain[j] * p;
        -(&pa + pa.transpose() - prp + &weight[j])
    };
    let mut terminal = terminal;
    symmetrize(&mut terminal);
    integrate_backward(terminal, steps, h, rhs, |k, v: &mut Mat| {
        symmetrize(v);
        if !v.iter().all(|x| x.is_finite()) || max_abs(v) > BLOW_UP {
            return Err(MfcError::BlowUp { what, node: k });
        }
        Ok(())
    })
}

pub(crate) fn riccati_pair(
    c: &Coefficients,
    terminal_dev: &Mat,
    terminal_mean: &Mat,
) -> Result<(MatrixPath, MatrixPath)> {
    let p = riccati_track(
        &c.drift,
        &c.gain,
        &c.dev_weight,
        terminal_dev.clone(),
        c.h,
        c.steps,
        "P",
    )?;
    let s = riccati_track(
        &c.mean_drift_total,
        &c.gain,
        &c.mean_weight,
        terminal_mean.clone(),
        c.h,
        c.steps,
        "Sigma",
    )?;
    Ok((p, s))
}

/// Backward RK4 for the deviation and mean Riccati equations with the given
/// terminal values.
pub fn integrate_riccati(
    p: &ProblemSpec,
    terminal_p: &Mat,
    terminal_sigma: &Mat,
) -> Result<(MatrixPath, MatrixPath)> {
    let c = Coefficients::new(p)?;
    riccati_pair(&c, terminal_p, terminal_sigma)
}

pub fn gamma_path(p: &MatrixPath, sigma: &MatrixPath) -> MatrixPath {
    let diff = |a: &[Mat], b: &[Mat]| -> Vec<Mat> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    Track {
        h: p.h,
        nodes: diff(&sigma.nodes, &p.nodes),
        d_start: diff(&sigma.d_start, &p.d_start),
        d_end: diff(&sigma.d_end, &p.d_end),
    }
}

pub(crate) fn lambda_track(c: &Coefficients, sigma_half: &[Mat]) -> Result<VectorPath> {
    let rhs = |j: usize, l: &Vector| -> Vector {
        let a = &c.mean_drift_total[j] - &c.gain[j] * &sigma_half[j];
        -(a.transpose() * l + &c.state_lin[j] + &sigma_half[j] * &c.shifted_forcing[j])
    };
    integrate_backward(c.terminal_lin.clone(), c.steps, c.h, rhs, |k, v: &mut Vector| {
        if !v.iter().all(|x| x.is_finite() && x.abs() <= BLOW_UP) {
            return Err(MfcError::BlowUp { what: "lambda", node: k });
        }
        Ok(())
    })
}

/// Backward RK4 for the affine term of the value function; `lambda(T) = alpha_T`.
pub fn integrate_lambda(p: &ProblemSpec, sigma: &MatrixPath) -> Result<VectorPath> {
    let c = Coefficients::new(p)?;
    lambda_track(&c, &sigma.half_values())
}

/// Fundamental matrices of `y' = A(s) y`: `fwd(t) = Psi(t,0)`,
/// `inv(t) = Psi(0,t)`, and `gramian(t) = ∫₀ᵗ inv R invᵀ`.
#[derive(Clone, Debug)]
pub struct FlowPair {
    pub fwd: MatrixPath,
    pub inv: MatrixPath,
    pub gramian: MatrixPath,
}

impl FlowPair {
    /// `Psi(s,t) = fwd(s) inv(t)`.
    pub fn transition(&self, s: f64, t: f64) -> Mat {
        // fwd and inv are integrated separately, so their product is the
        // identity only up to the step error.
        if s == t {
            let n = self.fwd.nodes[0].nrows();
            return Mat::identity(n, n);
        }
        self.fwd.at(s) * self.inv.at(t)
    }

    /// Largest `‖fwd(t)‖ ‖inv(t)‖` over the nodes.
    pub fn condition(&self) -> f64 {
        self.fwd
            .nodes
            .iter()
            .zip(&self.inv.nodes)
            .map(|(a, b)| a.norm() * b.norm())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn flow_pair(c: &Coefficients, a_half: &[Mat]) -> FlowPair {
    let n = c.n;
    let id = Mat::identity(n, n);
    let rhs = |j: usize, y: &(Mat, Mat, Mat)| -> (Mat, Mat, Mat) {
        let a = &a_half[j];
        let fwd = a * &y.0;
        let inv = -(&y.1 * a);
        let w = &y.1 * &c.gain[j] * y.1.transpose();
        (fwd, inv, w)
    };
    let tr = integrate_forward((id.clone(), id, Mat::zeros(n, n)), c.steps, c.h, rhs);
    let pick = |i: usize| -> MatrixPath {
        let sel = |v: &Vec<(Mat, Mat, Mat)>| -> Vec<Mat> {
            v.iter()
                .map(|t| match i {
                    0 => t.0.clone(),
                    1 => t.1.clone(),
                    _ => t.2.clone(),
                })
                .collect()
        };
        Track {
            h: tr.h,
            nodes: sel(&tr.nodes),
            d_start: sel(&tr.d_start),
            d_end: sel(&tr.d_end),
        }
    };
    let mut gramian = pick(2);
    for w in gramian.nodes.iter_mut() {
        symmetrize(w);
    }
    FlowPair {
        fwd: pick(0),
        inv: pick(1),
        gramian,
    }
}

/// The flows of `F - R P` (deviations) and `F + Fbar - R Sigma` (mean).
pub fn fundamental_flows(
    p: &ProblemSpec,
    pp: &MatrixPath,
    sigma: &MatrixPath,
) -> Result<(FlowPair, FlowPair)> {
    let c = Coefficients::new(p)?;
    let (ap, asg) = closed_loop(&c, &pp.half_values(), &sigma.half_values());
    let fp = flow_pair(&c, &ap);
    let fs = flow_pair(&c, &asg);
    warn_conditioning(&fp, &fs);
    Ok((fp, fs))
}

fn closed_loop(c: &Coefficients, p_half: &[Mat], s_half: &[Mat]) -> (Vec<Mat>, Vec<Mat>) {
    let ap = (0..p_half.len())
        .map(|j| &c.drift[j] - &c.gain[j] * &p_half[j])
        .collect();
    let asg = (0..s_half.len())
        .map(|j| &c.mean_drift_total[j] - &c.gain[j] * &s_half[j])
        .collect();
    (ap, asg)
}

fn warn_conditioning(fp: &FlowPair, fs: &FlowPair) {
    for (name, f) in [("deviation", fp), ("mean", fs)] {
        let cond = f.condition();
        if cond > CONDITIONING_LIMIT {
            log::warn!(
                "{name} flow is ill-conditioned: ‖fwd‖·‖inv‖ = {cond:.3e} exceeds {CONDITIONING_LIMIT:.0e}"
            );
        }
    }
}

/// Everything derived from the Riccati equations for one choice of terminal
/// data.
#[derive(Clone, Debug)]
pub struct RiccatiBundle {
    pub coeffs: Arc<Coefficients>,
    pub terminal: TerminalMode,
    pub p: MatrixPath,
    pub sigma: MatrixPath,
    pub gamma: MatrixPath,
    pub lambda: VectorPath,
    pub flow_p: FlowPair,
    pub flow_sigma: FlowPair,
    pub(crate) p_half: Vec<Mat>,
    pub(crate) sigma_half: Vec<Mat>,
    pub(crate) a_p: Vec<Mat>,
    pub(crate) a_sigma: Vec<Mat>,
    pub(crate) lambda_half: Vec<Vector>,
}

impl RiccatiBundle {
    pub fn new(p: &ProblemSpec, terminal: TerminalMode) -> Result<Self> {
        let c = Coefficients::new(p)?;
        Self::from_coefficients(c, terminal)
    }

    pub fn from_coefficients(c: Arc<Coefficients>, terminal: TerminalMode) -> Result<Self> {
        let (td, tm) = terminal.weights(&c);
        let (pp, sigma) = riccati_pair(&c, &td, &tm)?;
        let p_half = pp.half_values();
        let sigma_half = sigma.half_values();
        let lambda = lambda_track(&c, &sigma_half)?;
        let lambda_half = lambda.half_values();
        let (a_p, a_sigma) = closed_loop(&c, &p_half, &sigma_half);
        let flow_p = flow_pair(&c, &a_p);
        let flow_sigma = flow_pair(&c, &a_sigma);
        warn_conditioning(&flow_p, &flow_sigma);
        let gamma = gamma_path(&pp, &sigma);
        Ok(RiccatiBundle {
            coeffs: c,
            terminal,
            p: pp,
            sigma,
            gamma,
            lambda,
            flow_p,
            flow_sigma,
            p_half,
            sigma_half,
            a_p,
            a_sigma,
            lambda_half,
        })
    }

    pub fn steps(&self) -> usize {
        self.coeffs.steps
    }

    pub fn h(&self) -> f64 {
        self.coeffs.h
    }

    pub fn n(&self) -> usize {
        self.coeffs.n
    }

    /// Terminal weights (deviation, mean) of this bundle.
    pub fn terminal_weights(&self) -> (Mat, Mat) {
        self.terminal.weights(&self.coeffs)
    }

    pub fn p_half(&self, j: usize) -> &Mat {
        &self.p_half[j]
    }

    pub fn sigma_half(&self, j: usize) -> &Mat {
        &self.sigma_half[j]
    }

    pub fn lambda_half(&self, j: usize) -> &Vector {
        &self.lambda_half[j]
    }

    /// Closed-loop matrices at half-node `j`: (deviation, mean).
    pub fn closed_loop_half(&self, j: usize) -> (&Mat, &Mat) {
        (&self.a_p[j], &self.a_sigma[j])
    }

    /// The H-semigroup `Phi(s,t)` applied to a field.
    pub fn apply_flow(&self, s: f64, t: f64, x: &Field) -> Field {
        let dev = self.flow_p.transition(s, t);
        let mean = self.flow_sigma.transition(s, t);
        Field::raw(
            split_apply(&dev, &mean, x.values(), x.weights()),
            x.ensemble(),
        )
    }

    /// CSV with one row per node: P, Sigma, Gamma entries (row-major) and lambda.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.n();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["node".to_string(), "t".to_string()];
        for name in ["P", "Sigma", "Gamma"] {
            for i in 0..n {
                for j in 0..n {
                    header.push(format!("{name}_{i}{j}"));
                }
            }
        }
        for i in 0..n {
            header.push(format!("lambda_{i}"));
        }
        w.write_record(&header)?;
        for k in 0..=self.steps() {
            let mut row = vec![k.to_string(), fmt_f64(self.coeffs.t_half(2 * k))];
            for m in [&self.p.nodes[k], &self.sigma.nodes[k], &self.gamma.nodes[k]] {
                for i in 0..n {
                    for j in 0..n {
                        row.push(fmt_f64(m[(i, j)]));
                    }
                }
            }
            for v in self.lambda.nodes[k].iter() {
                row.push(fmt_f64(*v));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fundamental-matrix-based apply of `Phi(s,t)` (free function form).
pub fn apply_flow(bundle: &RiccatiBundle, s: f64, t: f64, x: &Field) -> Field {
    bundle.apply_flow(s, t, x)
}

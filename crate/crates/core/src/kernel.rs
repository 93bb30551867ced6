//! Operator-valued reproducing kernels in explicit form.
//!
//! Both kernels act on fields through two n×n blocks: one for deviations
//! (built on the `P` flow) and one for the mean (built on the `Sigma` flow):
//!
//! `K(s,t) = Psi(s,0) [C0 + ∫₀^{min(s,t)} Psi(0,τ) R Psi(0,τ)ᵀ dτ] Psi(t,0)ᵀ`
//!
//! with `C0 = (J0 + P(0))⁻¹` (resp. `(J0 + Jbar0 + Sigma(0))⁻¹`) for the full
//! kernel and `C0 = 0` for the kernel of trajectories starting at zero.

use std::io::Write;
use std::sync::Arc;

use crate::ensemble::{split_apply, winner, Field, FieldPath};
use crate::error::{MfcError, Result};
use crate::export::fmt_f64;
use crate::linalg::{max_abs, spd_inverse, sym_pinv, symmetrized, Mat, Vector};
use crate::ode::{integrate_backward, rk4_forward};
use crate::problem::ProblemSpec;
use crate::propagator::{Coefficients, FlowPair, RiccatiBundle, TerminalMode};
use crate::trajectory::{split_quad, ControlPath, StatePath, TrajectoryWithControl};

/// Relative eigenvalue cutoff for the pseudo-inverse of `G N⁻¹ Gᵀ`.
pub const PINV_CUTOFF: f64 = 1e-12;

/// How an n-row matrix is read: as a field over the particles, or as
/// columns that are each the same for every particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Blocks {
    Split,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    /// Acts on deviations from the mean.
    Deviation,
    /// Acts on the mean.
    Mean,
}

#[derive(Clone, Debug)]
pub struct KernelHandle {
    pub bundle: Arc<RiccatiBundle>,
    pub include_initial_term: bool,
    init_dev: Mat,
    init_mean: Mat,
    projector: Vec<Mat>,
    adj_dev: Vec<Mat>,
    adj_mean: Vec<Mat>,
}

/// `N⁻¹ Gᵀ (G N⁻¹ Gᵀ)⁺ G` at every half-node.
pub(crate) fn projectors(c: &Coefficients) -> Vec<Mat> {
    (0..c.gain.len())
        .map(|j| &c.ninv_gt[j] * sym_pinv(&c.gain[j], PINV_CUTOFF) * &c.input[j])
        .collect()
}

impl KernelHandle {
    /// Kernel whose Riccati terminal data is `terminal`.
    pub fn new(p: &ProblemSpec, terminal: TerminalMode, include_initial_term: bool) -> Result<Self> {
        Self::from_bundle(Arc::new(RiccatiBundle::new(p, terminal)?), include_initial_term)
    }

    pub fn from_bundle(bundle: Arc<RiccatiBundle>, include_initial_term: bool) -> Result<Self> {
        let c = &bundle.coeffs;
        let n = c.n;
        let (init_dev, init_mean) = if include_initial_term {
            let inv = |a: Mat, what: &str| {
                spd_inverse(&a).ok_or_else(|| {
                    MfcError::Validation(format!("{what} is not positive definite"))
                })
            };
            (
                inv(&c.initial_dev + &bundle.p.nodes[0], "J0 + P(0)")?,
                inv(&c.initial_mean + &bundle.sigma.nodes[0], "J0 + Jbar0 + Sigma(0)")?,
            )
        } else {
            (Mat::zeros(n, n), Mat::zeros(n, n))
        };
        let projector = projectors(c);
        let adj_dev = bundle.a_p.iter().map(|a| a.transpose()).collect();
        let adj_mean = bundle.a_sigma.iter().map(|a| a.transpose()).collect();
        Ok(KernelHandle {
            bundle,
            include_initial_term,
            init_dev,
            init_mean,
            projector,
            adj_dev,
            adj_mean,
        })
    }

    pub fn coeffs(&self) -> &Arc<Coefficients> {
        &self.bundle.coeffs
    }

    fn flow(&self, block: Block) -> (&FlowPair, &Mat) {
        match block {
            Block::Deviation => (&self.bundle.flow_p, &self.init_dev),
            Block::Mean => (&self.bundle.flow_sigma, &self.init_mean),
        }
    }

    pub fn kernel_block(&self, block: Block, s: f64, t: f64) -> Mat {
        let (fl, c0) = self.flow(block);
        let mid = c0 + fl.gramian.at(s.min(t));
        fl.fwd.at(s) * mid * fl.fwd.at(t).transpose()
    }

    /// Block at grid nodes (no interpolation).
    pub fn kernel_block_nodes(&self, block: Block, ks: usize, kt: usize) -> Mat {
        let (fl, c0) = self.flow(block);
        let mid = c0 + &fl.gramian.nodes[ks.min(kt)];
        &fl.fwd.nodes[ks] * mid * fl.fwd.nodes[kt].transpose()
    }

    pub fn kernel_apply(&self, s: f64, t: f64, z: &Field) -> Field {
        let kp = self.kernel_block(Block::Deviation, s, t);
        let ks = self.kernel_block(Block::Mean, s, t);
        Field::raw(split_apply(&kp, &ks, z.values(), z.weights()), z.ensemble())
    }

    /// The trajectory `s ↦ K(s,t) Z` with its representative control, by
    /// integrating the adjoint of the closed-loop flow backward from `t` and
    /// the state forward from 0.
    ///
    /// The general construction also carries the uncontrolled adjoint `χ`,
    /// but it enters the state equation and the control only through
    /// `r - χ = -ρ`, so `ρ` alone is integrated.
    pub fn kernel_apply_ode(&self, t: f64, z: &Field) -> Result<TrajectoryWithControl> {
        let c = self.coeffs();
        let kt = c.node_of(t)?;
        if z.dim() != c.n {
            return Err(MfcError::dims("Z", format!("{} rows", c.n), format!("{} rows", z.dim())));
        }
        let (state, control) = self.kernel_column(kt, 0, z.values(), z.weights(), Blocks::Split)?;
        Ok(TrajectoryWithControl {
            state,
            control,
            ens: z.ensemble().clone(),
        })
    }

    /// `s ↦ ∫_{t_start}^{min(s,t)} Psi(s,τ) R Psi(t,τ)ᵀ dτ z` (plus the initial
    /// term when `k_start = 0` for the full kernel), with its control.
    pub(crate) fn kernel_column(
        &self,
        kt: usize,
        k_start: usize,
        z: &Mat,
        w: &Vector,
        blocks: Blocks,
    ) -> Result<(StatePath, ControlPath)> {
        let c = self.coeffs();
        let b = &self.bundle;
        let uniform = blocks == Blocks::Uniform;
        let (adj_dev, a_dev, p_dev) = if uniform {
            (&self.adj_mean, &b.a_sigma, &b.sigma_half)
        } else {
            (&self.adj_dev, &b.a_p, &b.p_half)
        };
        let rho = integrate_backward(
            z.clone(),
            kt,
            c.h,
            |j, y: &Mat| -split_apply(&adj_dev[j], &self.adj_mean[j], y, w),
            |_, _| Ok::<(), MfcError>(()),
        )?;
        let zero = Mat::zeros(c.n, z.ncols());
        let y0 = if self.include_initial_term && k_start == 0 {
            let init_dev = if uniform { &self.init_mean } else { &self.init_dev };
            split_apply(init_dev, &self.init_mean, &rho.nodes[0], w)
        } else {
            zero.clone()
        };
        let mut nodes = vec![y0];
        let mut mids = Vec::with_capacity(c.steps);
        let mut control = ControlPath {
            start: Vec::with_capacity(c.steps),
            mid: Vec::with_capacity(c.steps),
            end: Vec::with_capacity(c.steps),
        };
        let zero_u = Mat::zeros(c.d, z.ncols());
        for k in 0..c.steps {
            if k < k_start {
                nodes.push(zero.clone());
                mids.push(zero.clone());
                control.start.push(zero_u.clone());
                control.mid.push(zero_u.clone());
                control.end.push(zero_u.clone());
                continue;
            }
            let active = k < kt;
            let rh: Vec<Option<Mat>> = (0..3).map(|i| active.then(|| rho.half(2 * k + i))).collect();
            let st = rk4_forward(&nodes[k], k, c.h, |j, y: &Mat| {
                let mut d = split_apply(&a_dev[j], &b.a_sigma[j], y, w);
                if let Some(r) = &rh[j - 2 * k] {
                    d += &c.gain[j] * r;
                }
                d
            });
            let mut mid = &nodes[k] + &st.value;
            mid *= 0.5;
            mid += (&st.d_start - &st.d_end) * (c.h / 8.0);
            let v = |j: usize, y: &Mat| {
                let mut q = split_apply(&p_dev[j], &b.sigma_half[j], y, w);
                if let Some(r) = &rh[j - 2 * k] {
                    q -= r;
                }
                -(&c.ninv_gt[j] * q)
            };
            control.start.push(v(2 * k, &nodes[k]));
            control.mid.push(v(2 * k + 1, &mid));
            control.end.push(v(2 * k + 2, &st.value));
            mids.push(mid);
            nodes.push(st.value);
        }
        Ok((StatePath { nodes, mids }, control))
    }

    /// Representative projection at half-node `j`.
    pub(crate) fn projector(&self, j: usize) -> &Mat {
        &self.projector[j]
    }

    /// Minimum-energy control with the same effect `G v` as `v`.
    pub fn representative_control(&self, v: &ControlPath) -> ControlPath {
        v.map(|j, m| &self.projector[j] * m)
    }

    /// Tolerance on the dynamics defect of a trajectory of the given magnitude.
    pub fn defect_tolerance(&self, magnitude: f64) -> f64 {
        let h = self.coeffs().h;
        h * h * (1.0 + magnitude)
    }

    /// Squared norm of the trajectory space: running state and control
    /// energy, terminal weight and (full kernel only) initial weight.
    pub fn rkhs_norm_sq(&self, traj: &TrajectoryWithControl) -> Result<f64> {
        let c = self.coeffs();
        if traj.steps() != c.steps {
            return Err(MfcError::dims(
                "trajectory",
                format!("{} intervals", c.steps),
                format!("{} intervals", traj.steps()),
            ));
        }
        let tol = self.defect_tolerance(traj.magnitude());
        let defect = traj.dynamics_defect(c);
        if !(defect <= tol) {
            return Err(MfcError::Dynamics(format!(
                "trajectory does not follow the controlled dynamics: defect {defect:.3e} > {tol:.3e}"
            )));
        }
        if !self.include_initial_term && max_abs(&traj.state.nodes[0]) > tol {
            return Err(MfcError::Dynamics(
                "trajectory must start at zero for this kernel".into(),
            ));
        }
        Ok(self.energy(traj))
    }

    fn energy(&self, traj: &TrajectoryWithControl) -> f64 {
        let c = self.coeffs();
        let w = traj.ens.weights();
        let q = |k: usize, j: usize| {
            let x = traj.state.half(j);
            let v = &self.projector[j] * traj.control.stage(k, j);
            split_quad(&c.dev_weight[j], &c.mean_weight[j], x, w)
                + winner(&v, &(&c.control_cost[j] * &v), w)
        };
        let mut total = 0.0;
        for k in 0..c.steps {
            total += c.h / 6.0 * (q(k, 2 * k) + 4.0 * q(k, 2 * k + 1) + q(k, 2 * k + 2));
        }
        let (td, tm) = self.bundle.terminal_weights();
        total += split_quad(&td, &tm, &traj.state.nodes[c.steps], w);
        if self.include_initial_term {
            total += split_quad(&c.initial_dev, &c.initial_mean, &traj.state.nodes[0], w);
        }
        total
    }

    /// Inner product by polarization of the squared norm.
    pub fn rkhs_inner(&self, a: &TrajectoryWithControl, b: &TrajectoryWithControl) -> Result<f64> {
        let plus = self.rkhs_norm_sq(&a.combine(1.0, b, 1.0))?;
        let minus = self.rkhs_norm_sq(&a.combine(1.0, b, -1.0))?;
        Ok(0.25 * (plus - minus))
    }

    /// `|(ξ(t), Z)_H - <ξ, K(·,t) Z>|`.
    pub fn reproducing_residual(&self, traj: &TrajectoryWithControl, t: f64, z: &Field) -> Result<f64> {
        let kt = self.coeffs().node_of(t)?;
        let y = self.kernel_apply_ode(t, z)?;
        let lhs = traj.state_at(kt).inner_h(z)?;
        let rhs = self.rkhs_inner(traj, &y)?;
        Ok((lhs - rhs).abs())
    }

    /// Long-format CSV of both blocks on the node lattice `0, stride, 2·stride, ...`
    /// (the last node is always included).
    pub fn write_csv<W: Write>(&self, stride: usize, out: W) -> Result<()> {
        if stride == 0 {
            return Err(MfcError::InvalidArgument("stride must be positive".into()));
        }
        let c = self.coeffs();
        let n = c.n;
        let mut idx: Vec<usize> = (0..=c.steps).step_by(stride).collect();
        if *idx.last().unwrap() != c.steps {
            idx.push(c.steps);
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["s_node", "t_node", "s", "t"].iter().map(|s| s.to_string()).collect();
        for name in ["KP", "KSigma"] {
            for i in 0..n {
                for j in 0..n {
                    header.push(format!("{name}_{i}{j}"));
                }
            }
        }
        w.write_record(&header)?;
        for &a in &idx {
            for &b in &idx {
                let mut row = vec![
                    a.to_string(),
                    b.to_string(),
                    fmt_f64(c.grid.t(a)),
                    fmt_f64(c.grid.t(b)),
                ];
                for block in [Block::Deviation, Block::Mean] {
                    let m = self.kernel_block_nodes(block, a, b);
                    for i in 0..n {
                        for j in 0..n {
                            row.push(fmt_f64(m[(i, j)]));
                        }
                    }
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per node, the control of least `N`-energy with the same `G v`:
/// `N⁻¹ Gᵀ (G N⁻¹ Gᵀ)⁺ G v`.
pub fn representative_control(p: &ProblemSpec, v: &FieldPath) -> Result<FieldPath> {
    if v.len() != p.steps() + 1 {
        return Err(MfcError::dims(
            "control path",
            format!("{} nodes", p.steps() + 1),
            format!("{} nodes", v.len()),
        ));
    }
    let out = (0..v.len())
        .map(|k| {
            let g = p.input.node(k);
            let ninv = spd_inverse(p.control_cost.node(k)).ok_or_else(|| {
                MfcError::Validation(format!("N not invertible at node {k}"))
            })?;
            let ngt = &ninv * g.transpose();
            let gain = symmetrized(&(g * &ngt));
            Ok(ngt * sym_pinv(&gain, PINV_CUTOFF) * g * &v.raw_values()[k])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldPath::raw(out, v.ensemble()))
}

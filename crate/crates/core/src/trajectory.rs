//! State paths with interval midpoints and piecewise control samples.
//!
//! Controls are stored per interval as (start, mid, end) samples so that
//! feedback controls, which jump wherever their inputs jump, keep their
//! one-sided values at the nodes. States are continuous and stored at nodes
//! and interval midpoints.

use std::sync::Arc;

use crate::ensemble::{mf_apply, winner, Ensemble, Field, FieldPath};
use crate::error::{MfcError, Result};
use crate::linalg::Mat;
use crate::ode::{rk4_forward, Track};
use crate::propagator::Coefficients;

#[derive(Clone, Debug)]
pub struct StatePath {
    pub nodes: Vec<Mat>,
    pub mids: Vec<Mat>,
}

impl StatePath {
    pub fn from_track(tr: &Track<Mat>) -> Self {
        StatePath {
            mids: (0..tr.intervals()).map(|k| tr.mid(k)).collect(),
            nodes: tr.nodes.clone(),
        }
    }

    pub fn zeros(rows: usize, cols: usize, steps: usize) -> Self {
        StatePath {
            nodes: vec![Mat::zeros(rows, cols); steps + 1],
            mids: vec![Mat::zeros(rows, cols); steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.mids.len()
    }

    /// Value at half-node `j`.
    pub fn half(&self, j: usize) -> &Mat {
        if j % 2 == 0 {
            &self.nodes[j / 2]
        } else {
            &self.mids[j / 2]
        }
    }

    pub fn combine(&self, a: f64, other: &StatePath, b: f64) -> StatePath {
        let lin = |x: &Vec<Mat>, y: &Vec<Mat>| x.iter().zip(y).map(|(p, q)| p * a + q * b).collect();
        StatePath {
            nodes: lin(&self.nodes, &other.nodes),
            mids: lin(&self.mids, &other.mids),
        }
    }

    pub fn map(&self, f: impl Fn(usize, &Mat) -> Mat) -> StatePath {
        StatePath {
            nodes: self.nodes.iter().enumerate().map(|(k, m)| f(2 * k, m)).collect(),
            mids: self.mids.iter().enumerate().map(|(k, m)| f(2 * k + 1, m)).collect(),
        }
    }

    pub fn field_path(&self, ens: &Arc<Ensemble>) -> FieldPath {
        FieldPath::raw(self.nodes.clone(), ens)
    }
}

/// Control samples at the start, midpoint and end of each interval.
#[derive(Clone, Debug)]
pub struct ControlPath {
    pub start: Vec<Mat>,
    pub mid: Vec<Mat>,
    pub end: Vec<Mat>,
}

impl ControlPath {
    pub fn zeros(d: usize, particles: usize, steps: usize) -> Self {
        let z = vec![Mat::zeros(d, particles); steps];
        ControlPath {
            start: z.clone(),
            mid: z.clone(),
            end: z,
        }
    }

    /// Sample `f(half_node, interval)` at the three points of every interval.
    pub fn from_fn(steps: usize, mut f: impl FnMut(usize, usize) -> Mat) -> Self {
        let mut c = ControlPath {
            start: Vec::with_capacity(steps),
            mid: Vec::with_capacity(steps),
            end: Vec::with_capacity(steps),
        };
        for k in 0..steps {
            c.start.push(f(2 * k, k));
            c.mid.push(f(2 * k + 1, k));
            c.end.push(f(2 * k + 2, k));
        }
        c
    }

    /// Continuous piecewise-linear control through node values.
    pub fn from_nodes(path: &FieldPath) -> Self {
        let v = path.raw_values();
        Self::from_fn(v.len() - 1, |j, k| {
            if j == 2 * k {
                v[k].clone()
            } else if j == 2 * k + 2 {
                v[k + 1].clone()
            } else {
                (&v[k] + &v[k + 1]) * 0.5
            }
        })
    }

    pub fn steps(&self) -> usize {
        self.start.len()
    }

    pub fn dim(&self) -> usize {
        self.start[0].nrows()
    }

    /// Sample at half-node `j` seen from inside interval `k`.
    pub fn stage(&self, k: usize, j: usize) -> &Mat {
        match j - 2 * k {
            0 => &self.start[k],
            1 => &self.mid[k],
            _ => &self.end[k],
        }
    }

    /// Node value: right limit for `k < K`, left limit at `K`.
    pub fn node(&self, k: usize) -> &Mat {
        if k < self.steps() {
            &self.start[k]
        } else {
            &self.end[k - 1]
        }
    }

    pub fn field_path(&self, ens: &Arc<Ensemble>) -> FieldPath {
        FieldPath::raw((0..=self.steps()).map(|k| self.node(k).clone()).collect(), ens)
    }

    pub fn combine(&self, a: f64, other: &ControlPath, b: f64) -> ControlPath {
        let lin = |x: &Vec<Mat>, y: &Vec<Mat>| x.iter().zip(y).map(|(p, q)| p * a + q * b).collect();
        ControlPath {
            start: lin(&self.start, &other.start),
            mid: lin(&self.mid, &other.mid),
            end: lin(&self.end, &other.end),
        }
    }

    pub fn map(&self, mut f: impl FnMut(usize, &Mat) -> Mat) -> ControlPath {
        let steps = self.steps();
        Self::from_fn(steps, |j, k| f(j, self.stage(k, j)))
    }

    /// Largest particle-wise Euclidean difference over all samples.
    pub fn sup_distance(&self, other: &ControlPath) -> f64 {
        let mut m = 0.0_f64;
        for (a, b) in [
            (&self.start, &other.start),
            (&self.mid, &other.mid),
            (&self.end, &other.end),
        ] {
            for (x, y) in a.iter().zip(b) {
                for c in (x - y).column_iter() {
                    m = m.max(c.norm());
                }
            }
        }
        m
    }
}

/// A trajectory of the homogeneous dynamics `ξ' = F ξ + Fbar mean(ξ) + G v`
/// together with a control generating it.
#[derive(Clone, Debug)]
pub struct TrajectoryWithControl {
    pub state: StatePath,
    pub control: ControlPath,
    pub ens: Arc<Ensemble>,
}

/// `F x + Fbar mean(x) + G v` at half-node `j`.
pub(crate) fn homogeneous_rhs(c: &Coefficients, j: usize, x: &Mat, v: &Mat, w: &crate::linalg::Vector) -> Mat {
    let fbar = &c.mean_drift_total[j] - &c.drift[j];
    mf_apply(&c.drift[j], &fbar, x, w) + &c.input[j] * v
}

impl TrajectoryWithControl {
    /// Integrate the homogeneous dynamics from `x0` under `control` (RK4,
    /// midpoints by Hermite interpolation).
    pub fn from_control(
        c: &Coefficients,
        x0: &Field,
        control: ControlPath,
    ) -> Result<Self> {
        if control.steps() != c.steps || control.dim() != c.d {
            return Err(MfcError::dims(
                "control",
                format!("{} intervals of dimension {}", c.steps, c.d),
                format!("{} intervals of dimension {}", control.steps(), control.dim()),
            ));
        }
        let ens = x0.ensemble().clone();
        let w = ens.weights().clone();
        let mut nodes = Vec::with_capacity(c.steps + 1);
        let mut mids = Vec::with_capacity(c.steps);
        nodes.push(x0.values().clone());
        for k in 0..c.steps {
            let st = rk4_forward(&nodes[k], k, c.h, |j, y: &Mat| {
                homogeneous_rhs(c, j, y, control.stage(k, j), &w)
            });
            let mut mid = &nodes[k] + &st.value;
            mid *= 0.5;
            mid += (&st.d_start - &st.d_end) * (c.h / 8.0);
            mids.push(mid);
            nodes.push(st.value);
        }
        Ok(TrajectoryWithControl {
            state: StatePath { nodes, mids },
            control,
            ens,
        })
    }

    pub fn zeros(c: &Coefficients, ens: &Arc<Ensemble>) -> Self {
        TrajectoryWithControl {
            state: StatePath::zeros(c.n, ens.len(), c.steps),
            control: ControlPath::zeros(c.d, ens.len(), c.steps),
            ens: ens.clone(),
        }
    }

    pub fn steps(&self) -> usize {
        self.control.steps()
    }

    pub fn state_at(&self, k: usize) -> Field {
        Field::raw(self.state.nodes[k].clone(), &self.ens)
    }

    pub fn state_path(&self) -> FieldPath {
        self.state.field_path(&self.ens)
    }

    pub fn control_path(&self) -> FieldPath {
        self.control.field_path(&self.ens)
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        TrajectoryWithControl {
            state: self.state.combine(a, &other.state, b),
            control: self.control.combine(a, &other.control, b),
            ens: self.ens.clone(),
        }
    }

    /// Largest per-interval Simpson defect of `ξ(t_{k+1}) - ξ(t_k) - ∫(Fξ + Gv)`
    /// (particle-wise Euclidean norm).
    pub fn dynamics_defect(&self, c: &Coefficients) -> f64 {
        let w = self.ens.weights();
        let mut worst = 0.0_f64;
        for k in 0..self.steps() {
            let d0 = homogeneous_rhs(c, 2 * k, &self.state.nodes[k], &self.control.start[k], w);
            let dm = homogeneous_rhs(c, 2 * k + 1, &self.state.mids[k], &self.control.mid[k], w);
            let d1 = homogeneous_rhs(c, 2 * k + 2, &self.state.nodes[k + 1], &self.control.end[k], w);
            let inc = &self.state.nodes[k + 1] - &self.state.nodes[k];
            let quad = (d0 + dm * 4.0 + d1) * (c.h / 6.0);
            for col in (inc - quad).column_iter() {
                worst = worst.max(col.norm());
            }
        }
        worst
    }

    /// Scale used to judge defects: largest state or control magnitude.
    pub fn magnitude(&self) -> f64 {
        let s = self
            .state
            .nodes
            .iter()
            .map(crate::linalg::max_abs)
            .fold(0.0, f64::max);
        let v = self
            .control
            .start
            .iter()
            .chain(&self.control.end)
            .map(crate::linalg::max_abs)
            .fold(0.0, f64::max);
        s.max(v)
    }
}

/// `Σ w_i x_i · (dev x_i + (mean - dev) x̄)`.
pub(crate) fn split_quad(dev: &Mat, mean: &Mat, x: &Mat, w: &crate::linalg::Vector) -> f64 {
    winner(x, &crate::ensemble::split_apply(dev, mean, x, w), w)
}

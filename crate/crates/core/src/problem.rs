//! Problem data: dimensions, grid, coefficient paths, terminal and initial
//! weights, and the positivity checks the solvers rely on.

use serde::Serialize;

use crate::error::{MfcError, Result};
use crate::linalg::{asymmetry, min_sym_eigenvalue, Mat, Vector};

/// Tolerance on the smallest eigenvalue in PSD checks.
pub const PSD_TOL: f64 = -1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub n: usize,
    pub d: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(MfcError::schema("grid.T", "horizon must be positive"));
        }
        if steps == 0 {
            return Err(MfcError::schema("grid.K", "step count must be positive"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.h()
        }
    }

    /// Time of half-node `j`.
    pub fn t_half(&self, j: usize) -> f64 {
        if j == 2 * self.steps {
            self.horizon
        } else {
            j as f64 * 0.5 * self.h()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }

    /// Node index of `t` if it lies on the grid (within 1e-9 h).
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let x = t / self.h();
        let k = x.round();
        if (x - k).abs() < 1e-9 && k >= 0.0 && k as usize <= self.steps {
            Some(k as usize)
        } else {
            None
        }
    }
}

/// A matrix-valued coefficient given either once (constant) or at every
/// node, linearly interpolated in between.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffPath {
    rows: usize,
    cols: usize,
    values: Vec<Mat>,
}

impl CoeffPath {
    pub fn constant(m: Mat) -> Self {
        CoeffPath {
            rows: m.nrows(),
            cols: m.ncols(),
            values: vec![m],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Mat::zeros(rows, cols))
    }

    pub fn from_vector(v: Vector) -> Self {
        let n = v.len();
        Self::constant(Mat::from_column_slice(n, 1, v.as_slice()))
    }

    /// One matrix per node; all must share a shape.
    pub fn from_nodes(values: Vec<Mat>) -> Result<Self> {
        let first = values
            .first()
            .ok_or_else(|| MfcError::InvalidArgument("empty coefficient path".into()))?;
        let (rows, cols) = first.shape();
        for (k, m) in values.iter().enumerate() {
            if m.shape() != (rows, cols) {
                return Err(MfcError::dims(
                    format!("node {k}"),
                    format!("{rows}x{cols}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
        }
        Ok(CoeffPath { rows, cols, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_constant(&self) -> bool {
        self.values.len() == 1
    }

    pub fn raw(&self) -> &[Mat] {
        &self.values
    }

    pub fn node(&self, k: usize) -> &Mat {
        if self.is_constant() {
            &self.values[0]
        } else {
            &self.values[k]
        }
    }

    /// Value at half-node `j` (midpoints are averages of the neighbours).
    pub fn half(&self, j: usize) -> Mat {
        if self.is_constant() || j % 2 == 0 {
            self.node(j / 2).clone()
        } else {
            (self.node(j / 2) + self.node(j / 2 + 1)) * 0.5
        }
    }

    pub fn at(&self, grid: &TimeGrid, t: f64) -> Mat {
        if self.is_constant() {
            return self.values[0].clone();
        }
        let x = (t / grid.h()).clamp(0.0, grid.steps as f64);
        let k = (x.floor() as usize).min(grid.steps - 1);
        let th = x - k as f64;
        self.values[k].scale(1.0 - th) + self.values[k + 1].scale(th)
    }

    pub fn vec_node(&self, k: usize) -> Vector {
        Vector::from_column_slice(self.node(k).as_slice())
    }

    pub fn vec_half(&self, j: usize) -> Vector {
        Vector::from_column_slice(self.half(j).as_slice())
    }

    fn is_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Complete data of a linear-quadratic mean-field control problem.
///
/// Dynamics per particle: `X' = F X + Fbar mean(X) + G V + f`. Running cost
/// `½(M X,X) + ½ Mbar|X - S mean(X)|² + ½(N V,V) + alpha·X + beta·V`,
/// terminal cost analogous with the `terminal_*` data.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub dims: Dims,
    pub grid: TimeGrid,
    /// F
    pub drift: CoeffPath,
    /// Fbar
    pub mean_drift: CoeffPath,
    /// G
    pub input: CoeffPath,
    /// f
    pub forcing: CoeffPath,
    /// M
    pub state_cost: CoeffPath,
    /// Mbar
    pub mean_cost: CoeffPath,
    /// S
    pub mean_shift: CoeffPath,
    /// N
    pub control_cost: CoeffPath,
    /// alpha
    pub state_lin: CoeffPath,
    /// beta
    pub control_lin: CoeffPath,
    pub terminal_cost: Mat,
    pub terminal_mean_cost: Mat,
    pub terminal_shift: Mat,
    pub terminal_lin: Vector,
    /// J0
    pub initial_weight: Mat,
    /// Jbar0
    pub initial_mean_weight: Mat,
}

/// `Sᵀ Mbar S - Sᵀ Mbar - Mbar S`.
pub fn mean_penalty(mbar: &Mat, s: &Mat) -> Mat {
    let st = s.transpose();
    &st * mbar * s - &st * mbar - mbar * s
}

impl ProblemSpec {
    /// A problem with every coefficient zero except `N = I`, `J0 = I`.
    pub fn zeros(dims: Dims, grid: TimeGrid) -> Self {
        let (n, d) = (dims.n, dims.d);
        ProblemSpec {
            dims,
            grid,
            drift: CoeffPath::zeros(n, n),
            mean_drift: CoeffPath::zeros(n, n),
            input: CoeffPath::zeros(n, d),
            forcing: CoeffPath::zeros(n, 1),
            state_cost: CoeffPath::zeros(n, n),
            mean_cost: CoeffPath::zeros(n, n),
            mean_shift: CoeffPath::zeros(n, n),
            control_cost: CoeffPath::constant(Mat::identity(d, d)),
            state_lin: CoeffPath::zeros(n, 1),
            control_lin: CoeffPath::zeros(d, 1),
            terminal_cost: Mat::zeros(n, n),
            terminal_mean_cost: Mat::zeros(n, n),
            terminal_shift: Mat::zeros(n, n),
            terminal_lin: Vector::zeros(n),
            initial_weight: Mat::identity(n, n),
            initial_mean_weight: Mat::zeros(n, n),
        }
    }

    pub fn h(&self) -> f64 {
        self.grid.h()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub(crate) fn paths(&self) -> [(&'static str, &CoeffPath); 10] {
        [
            ("F", &self.drift),
            ("Fbar", &self.mean_drift),
            ("G", &self.input),
            ("f", &self.forcing),
            ("M", &self.state_cost),
            ("Mbar", &self.mean_cost),
            ("S", &self.mean_shift),
            ("N", &self.control_cost),
            ("alpha", &self.state_lin),
            ("beta", &self.control_lin),
        ]
    }

    /// Check every shape against `dims` and the node count against the grid.
    pub fn check_shapes(&self) -> Result<()> {
        let (n, d) = (self.dims.n, self.dims.d);
        let want = |name: &str| -> (usize, usize) {
            match name {
                "G" => (n, d),
                "f" | "alpha" => (n, 1),
                "beta" => (d, 1),
                "N" => (d, d),
                _ => (n, n),
            }
        };
        for (name, p) in self.paths() {
            let w = want(name);
            if p.shape() != w {
                return Err(MfcError::dims(
                    format!("coefficients.{name}"),
                    format!("{}x{}", w.0, w.1),
                    format!("{}x{}", p.rows, p.cols),
                ));
            }
            let c = p.values.len();
            if c != 1 && c != self.grid.steps + 1 {
                return Err(MfcError::schema(
                    format!("coefficients.{name}"),
                    format!(
                        "expected 1 or {} node values, found {c}",
                        self.grid.steps + 1
                    ),
                ));
            }
            if !p.is_finite() {
                return Err(MfcError::schema(
                    format!("coefficients.{name}"),
                    "non-finite entry",
                ));
            }
        }
        for (name, m) in [
            ("terminal.M_T", &self.terminal_cost),
            ("terminal.Mbar_T", &self.terminal_mean_cost),
            ("terminal.S_T", &self.terminal_shift),
            ("initial_weights.J0", &self.initial_weight),
            ("initial_weights.Jbar0", &self.initial_mean_weight),
        ] {
            if m.shape() != (n, n) {
                return Err(MfcError::dims(
                    name,
                    format!("{n}x{n}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
        }
        if self.terminal_lin.len() != n {
            return Err(MfcError::dims(
                "terminal.alpha_T",
                format!("{n}"),
                format!("{}", self.terminal_lin.len()),
            ));
        }
        Ok(())
    }

    /// True when every coefficient is given once for the whole horizon.
    pub fn is_time_invariant(&self) -> bool {
        self.paths().iter().all(|(_, p)| p.is_constant())
    }

    /// Replace the step count. Only allowed for time-invariant data.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        if !self.is_time_invariant() {
            return Err(MfcError::InvalidArgument(
                "cannot change the grid of a problem with time-varying coefficients".into(),
            ));
        }
        let mut p = self.clone();
        p.grid = TimeGrid::new(self.grid.horizon, steps)?;
        Ok(p)
    }

    /// Mean penalty of the running cost at node `k`.
    pub fn running_mean_penalty(&self, k: usize) -> Mat {
        mean_penalty(self.mean_cost.node(k), self.mean_shift.node(k))
    }

    /// Mean penalty of the running cost at half-node `j`.
    pub fn running_mean_penalty_half(&self, j: usize) -> Mat {
        mean_penalty(&self.mean_cost.half(j), &self.mean_shift.half(j))
    }

    pub fn terminal_mean_penalty(&self) -> Mat {
        mean_penalty(&self.terminal_mean_cost, &self.terminal_shift)
    }

    /// Terminal weight on deviations, `M_T + Mbar_T`.
    pub fn terminal_dev_weight(&self) -> Mat {
        &self.terminal_cost + &self.terminal_mean_cost
    }

    /// Terminal weight on the mean, `M_T + Mbar_T + MbarS(T)`.
    pub fn terminal_mean_weight(&self) -> Mat {
        self.terminal_dev_weight() + self.terminal_mean_penalty()
    }
}

/// The mean penalty at time `t`; at the horizon the terminal data is used.
pub fn mbar_s(p: &ProblemSpec, t: f64) -> Mat {
    if t >= p.grid.horizon {
        return p.terminal_mean_penalty();
    }
    mean_penalty(&p.mean_cost.at(&p.grid, t), &p.mean_shift.at(&p.grid, t))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub constraint: String,
    pub node: Option<usize>,
    /// Smallest eigenvalue (or asymmetry for symmetry checks).
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn into_result(self) -> Result<()> {
        if self.ok {
            return Ok(());
        }
        // One line per constraint; the full list stays in the report.
        let mut groups: Vec<(&str, Vec<&Violation>)> = Vec::new();
        for v in &self.violations {
            match groups.iter_mut().find(|(c, _)| *c == v.constraint) {
                Some((_, g)) => g.push(v),
                None => groups.push((&v.constraint, vec![v])),
            }
        }
        let msg = groups
            .iter()
            .map(|(c, g)| match (g.len(), g[0].node) {
                (1, Some(k)) => format!("{c} at node {k} ({:.3e})", g[0].value),
                (1, None) => format!("{c} ({:.3e})", g[0].value),
                (count, _) => format!("{c} at {count} nodes from node {} ({:.3e})", g[0].node.unwrap_or(0), g[0].value),
            })
            .collect::<Vec<_>>()
            .join("; ");
        Err(MfcError::Validation(msg))
    }
}

pub fn validate(p: &ProblemSpec) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |c: &str, node: Option<usize>, value: f64| {
        out.push(Violation {
            constraint: c.to_string(),
            node,
            value,
        })
    };
    let sym_tol = 1e-10;
    for k in 0..=p.grid.steps {
        let nn = p.control_cost.node(k);
        let asym = asymmetry(nn);
        if asym > sym_tol {
            push("N not symmetric", Some(k), asym);
        }
        let e = min_sym_eigenvalue(nn);
        if e <= 0.0 {
            push("N not PD", Some(k), e);
        }
        for (name, m) in [("M", p.state_cost.node(k)), ("Mbar", p.mean_cost.node(k))] {
            let asym = asymmetry(m);
            if asym > sym_tol {
                push(&format!("{name} not symmetric"), Some(k), asym);
            }
        }
        let dev = p.state_cost.node(k) + p.mean_cost.node(k);
        let e = min_sym_eigenvalue(&dev);
        if e < PSD_TOL {
            push("M+Mbar not PSD", Some(k), e);
        }
        let mean = dev + p.running_mean_penalty(k);
        let e = min_sym_eigenvalue(&mean);
        if e < PSD_TOL {
            push("M+Mbar+MbarS not PSD", Some(k), e);
        }
    }
    for (name, m) in [
        ("M_T", &p.terminal_cost),
        ("Mbar_T", &p.terminal_mean_cost),
    ] {
        let asym = asymmetry(m);
        if asym > sym_tol {
            push(&format!("{name} not symmetric"), None, asym);
        }
    }
    let e = min_sym_eigenvalue(&p.terminal_dev_weight());
    if e < PSD_TOL {
        push("M_T+Mbar_T not PSD", None, e);
    }
    let e = min_sym_eigenvalue(&p.terminal_mean_weight());
    if e < PSD_TOL {
        push("M_T+Mbar_T+MbarS(T) not PSD", None, e);
    }
    let asym = asymmetry(&p.initial_weight);
    if asym > sym_tol {
        push("J0 not symmetric", None, asym);
    }
    let e = min_sym_eigenvalue(&p.initial_weight);
    if e <= 0.0 {
        push("J0 not PD", None, e);
    }
    let e = min_sym_eigenvalue(&p.initial_mean_weight);
    if e < PSD_TOL {
        push("Jbar0 not PSD", None, e);
    }
    ValidationReport {
        ok: out.is_empty(),
        violations: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(m: f64, mbar: f64, n: f64) -> ProblemSpec {
        let mut p = ProblemSpec::zeros(Dims { n: 1, d: 1 }, TimeGrid::new(1.0, 10).unwrap());
        p.state_cost = CoeffPath::constant(Mat::from_element(1, 1, m));
        p.mean_cost = CoeffPath::constant(Mat::from_element(1, 1, mbar));
        p.control_cost = CoeffPath::constant(Mat::from_element(1, 1, n));
        p
    }

    #[test]
    fn positive_scalars_pass() {
        let r = validate(&scalar(1.0, 1.0, 1.0));
        assert!(r.ok, "{:?}", r.violations);
    }

    #[test]
    fn zero_control_weight_at_one_node() {
        let mut p = scalar(1.0, 1.0, 1.0);
        let mut nodes = vec![Mat::identity(1, 1); 11];
        nodes[4] = Mat::zeros(1, 1);
        p.control_cost = CoeffPath::from_nodes(nodes).unwrap();
        let r = validate(&p);
        assert!(!r.ok);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].constraint, "N not PD");
        assert_eq!(r.violations[0].node, Some(4));
    }

    #[test]
    fn negative_state_cost_flagged() {
        let r = validate(&scalar(-1.0, 0.5, 1.0));
        assert!(r
            .violations
            .iter()
            .any(|v| v.constraint == "M+Mbar not PSD"));
    }

    #[test]
    fn mean_penalty_special_cases() {
        let mbar = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(mean_penalty(&mbar, &Mat::zeros(2, 2)), Mat::zeros(2, 2));
        let d = mean_penalty(&mbar, &Mat::identity(2, 2)) + &mbar;
        assert!(crate::linalg::max_abs(&d) < 1e-15);
    }

    #[test]
    fn interpolation_is_linear_between_nodes() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let p = CoeffPath::from_nodes(vec![
            Mat::from_element(1, 1, 0.0),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 3.0),
        ])
        .unwrap();
        assert_eq!(p.at(&g, 0.25)[(0, 0)], 0.5);
        assert_eq!(p.at(&g, 0.75)[(0, 0)], 2.0);
        assert_eq!(p.half(3)[(0, 0)], 2.0);
    }
}

//! TOML problem files.
//!
//! ```toml
//! [dims]
//! n = 1
//! d = 1
//!
//! [grid]
//! T = 1.0
//! K = 100
//!
//! [coefficients]          # F, G, N required; the rest default to zero
//! F = [[0.0]]             # matrix: list of rows
//! G = [[1.0]]
//! N = 1.0                 # a bare number is a 1x1 matrix
//! M = [[[1.0]], [[1.1]]]  # or K+1 matrices, linear in between
//! f = [0.0]               # vectors are flat lists (or K+1 of them)
//!
//! [terminal]              # M_T, Mbar_T, S_T, alpha_T
//! [initial_weights]       # J0 (default identity), Jbar0
//!
//! [ensemble]              # points = [[x...], ...], optional weights
//! [ensemble.gaussian]     # or mean, covariance, N, seed
//!
//! [noise]                 # eta (n x q), paths, seed
//! [phi]                   # kind = "quadratic" | "zero" | "gaussian-cross-entropy"
//! ```
//!
//! Unknown keys are rejected so that typos do not silently fall back to
//! defaults.

use std::sync::Arc;

use toml::{Table, Value};

use crate::ensemble::Ensemble;
use crate::error::{MfcError, Result};
use crate::linalg::{Mat, Vector};
use crate::phi::PhiSpec;
use crate::problem::{CoeffPath, Dims, ProblemSpec, TimeGrid};

const COEFFICIENTS: [&str; 10] = ["F", "Fbar", "G", "f", "M", "Mbar", "S", "N", "alpha", "beta"];
const VECTOR_COEFFICIENTS: [&str; 3] = ["f", "alpha", "beta"];

#[derive(Clone, Debug, PartialEq)]
pub enum EnsembleSpec {
    /// Points as columns.
    Points { points: Mat, weights: Option<Vector> },
    Gaussian { mean: Vector, covariance: Mat, count: usize, seed: u64 },
}

impl EnsembleSpec {
    pub fn build(&self) -> Result<Arc<Ensemble>> {
        match self {
            EnsembleSpec::Points { points, weights } => Ensemble::new(points.clone(), weights.clone()),
            EnsembleSpec::Gaussian {
                mean,
                covariance,
                count,
                seed,
            } => Ensemble::gaussian(mean, covariance, *count, *seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    pub eta: Mat,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PhiConfig {
    Quadratic,
    Zero,
    GaussianCrossEntropy { mean: Vector, covariance: Mat },
}

impl PhiConfig {
    pub fn build(&self) -> Result<PhiSpec> {
        match self {
            PhiConfig::Quadratic => Ok(PhiSpec::Quadratic),
            PhiConfig::Zero => Ok(PhiSpec::Zero),
            PhiConfig::GaussianCrossEntropy { mean, covariance } => {
                PhiSpec::gaussian_cross_entropy(mean.clone(), covariance)
            }
        }
    }
}

/// Everything a problem file can hold.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub ensemble: Option<EnsembleSpec>,
    pub noise: Option<NoiseConfig>,
    pub phi: PhiConfig,
}

pub fn parse_problem(text: &str) -> Result<ProblemSpec> {
    Ok(parse_config(text, None)?.problem)
}

/// Parse a full problem file. `grid_k` replaces `grid.K`; that is only
/// allowed when every coefficient is constant.
pub fn parse_config(text: &str, grid_k: Option<usize>) -> Result<RunConfig> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| MfcError::schema("<file>", e.to_string()))?;
    check_keys(&root, "", &["dims", "grid", "coefficients", "terminal", "initial_weights", "ensemble", "noise", "phi"])?;

    let dims_t = table(&root, "dims")?.ok_or_else(|| MfcError::schema("dims", "missing table"))?;
    check_keys(dims_t, "dims", &["n", "d"])?;
    let n = positive(dims_t, "dims", "n")?;
    let d = positive(dims_t, "dims", "d")?;

    let grid_t = table(&root, "grid")?.ok_or_else(|| MfcError::schema("grid", "missing table"))?;
    check_keys(grid_t, "grid", &["T", "K"])?;
    let horizon = number(req(grid_t, "grid", "T")?, "grid.T")?;
    let steps = positive(grid_t, "grid", "K")?;
    let grid = TimeGrid::new(horizon, steps)?;

    let mut p = ProblemSpec::zeros(Dims { n, d }, grid);
    let coeffs = table(&root, "coefficients")?.ok_or_else(|| MfcError::schema("coefficients", "missing table"))?;
    check_keys(coeffs, "coefficients", &COEFFICIENTS)?;
    for name in ["F", "G", "N"] {
        req(coeffs, "coefficients", name)?;
    }
    for (key, v) in coeffs {
        let path = format!("coefficients.{key}");
        let cp = if VECTOR_COEFFICIENTS.contains(&key.as_str()) {
            vector_path(v, &path)?
        } else {
            matrix_path(v, &path)?
        };
        *coefficient_mut(&mut p, key) = cp;
    }

    if let Some(t) = table(&root, "terminal")? {
        check_keys(t, "terminal", &["M_T", "Mbar_T", "S_T", "alpha_T"])?;
        if let Some(v) = t.get("M_T") {
            p.terminal_cost = matrix(v, "terminal.M_T")?;
        }
        if let Some(v) = t.get("Mbar_T") {
            p.terminal_mean_cost = matrix(v, "terminal.Mbar_T")?;
        }
        if let Some(v) = t.get("S_T") {
            p.terminal_shift = matrix(v, "terminal.S_T")?;
        }
        if let Some(v) = t.get("alpha_T") {
            p.terminal_lin = vector(v, "terminal.alpha_T")?;
        }
    }
    if let Some(t) = table(&root, "initial_weights")? {
        check_keys(t, "initial_weights", &["J0", "Jbar0"])?;
        if let Some(v) = t.get("J0") {
            p.initial_weight = matrix(v, "initial_weights.J0")?;
        }
        if let Some(v) = t.get("Jbar0") {
            p.initial_mean_weight = matrix(v, "initial_weights.Jbar0")?;
        }
    }
    p.check_shapes()?;
    if let Some(k) = grid_k {
        p = p.with_steps(k).map_err(|_| {
            MfcError::schema("grid.K", "the step count cannot be overridden when coefficients vary in time")
        })?;
    }

    let ensemble = match table(&root, "ensemble")? {
        None => None,
        Some(t) => Some(parse_ensemble(t, n)?),
    };
    let noise = match table(&root, "noise")? {
        None => None,
        Some(t) => {
            check_keys(t, "noise", &["eta", "paths", "seed"])?;
            let eta = matrix(req(t, "noise", "eta")?, "noise.eta")?;
            if eta.nrows() != n {
                return Err(MfcError::dims("noise.eta", format!("{n} rows"), format!("{} rows", eta.nrows())));
            }
            Some(NoiseConfig {
                eta,
                paths: t.get("paths").map(|_| positive(t, "noise", "paths")).transpose()?,
                seed: t.get("seed").map(|v| seed(v, "noise.seed")).transpose()?,
            })
        }
    };
    let phi = match table(&root, "phi")? {
        None => PhiConfig::Quadratic,
        Some(t) => parse_phi(t, n)?,
    };
    Ok(RunConfig {
        problem: p,
        ensemble,
        noise,
        phi,
    })
}

fn parse_ensemble(t: &Table, n: usize) -> Result<EnsembleSpec> {
    check_keys(t, "ensemble", &["points", "weights", "gaussian"])?;
    match (t.get("points"), t.get("gaussian")) {
        (Some(_), Some(_)) => Err(MfcError::schema("ensemble", "give either points or gaussian, not both")),
        (None, None) => Err(MfcError::schema("ensemble", "missing points or gaussian")),
        (Some(v), None) => {
            // one row per particle in the file, one column per particle in memory
            let rows = matrix(v, "ensemble.points")?;
            if rows.ncols() != n {
                return Err(MfcError::dims(
                    "ensemble.points",
                    format!("points with {n} coordinates"),
                    format!("points with {} coordinates", rows.ncols()),
                ));
            }
            let weights = t.get("weights").map(|w| vector(w, "ensemble.weights")).transpose()?;
            Ok(EnsembleSpec::Points {
                points: rows.transpose(),
                weights,
            })
        }
        (None, Some(g)) => {
            let g = g
                .as_table()
                .ok_or_else(|| MfcError::schema("ensemble.gaussian", "expected a table"))?;
            check_keys(g, "ensemble.gaussian", &["mean", "covariance", "N", "seed"])?;
            let mean = vector(req(g, "ensemble.gaussian", "mean")?, "ensemble.gaussian.mean")?;
            if mean.len() != n {
                return Err(MfcError::dims("ensemble.gaussian.mean", n.to_string(), mean.len().to_string()));
            }
            Ok(EnsembleSpec::Gaussian {
                mean,
                covariance: matrix(req(g, "ensemble.gaussian", "covariance")?, "ensemble.gaussian.covariance")?,
                count: positive(g, "ensemble.gaussian", "N")?,
                seed: seed(req(g, "ensemble.gaussian", "seed")?, "ensemble.gaussian.seed")?,
            })
        }
    }
}

fn parse_phi(t: &Table, n: usize) -> Result<PhiConfig> {
    check_keys(t, "phi", &["kind", "mean", "covariance"])?;
    let kind = req(t, "phi", "kind")?
        .as_str()
        .ok_or_else(|| MfcError::schema("phi.kind", "expected a string"))?;
    match kind {
        "quadratic" => Ok(PhiConfig::Quadratic),
        "zero" => Ok(PhiConfig::Zero),
        "gaussian-cross-entropy" => {
            let mean = match t.get("mean") {
                Some(v) => vector(v, "phi.mean")?,
                None => Vector::zeros(n),
            };
            let covariance = match t.get("covariance") {
                Some(v) => matrix(v, "phi.covariance")?,
                None => Mat::identity(n, n),
            };
            if mean.len() != n || covariance.shape() != (n, n) {
                return Err(MfcError::dims(
                    "phi",
                    format!("mean of length {n} and {n}x{n} covariance"),
                    format!("mean of length {} and {}x{} covariance", mean.len(), covariance.nrows(), covariance.ncols()),
                ));
            }
            Ok(PhiConfig::GaussianCrossEntropy { mean, covariance })
        }
        other => Err(MfcError::schema("phi.kind", format!("unknown kind `{other}`"))),
    }
}

fn coefficient_mut<'a>(p: &'a mut ProblemSpec, key: &str) -> &'a mut CoeffPath {
    match key {
        "F" => &mut p.drift,
        "Fbar" => &mut p.mean_drift,
        "G" => &mut p.input,
        "f" => &mut p.forcing,
        "M" => &mut p.state_cost,
        "Mbar" => &mut p.mean_cost,
        "S" => &mut p.mean_shift,
        "N" => &mut p.control_cost,
        "alpha" => &mut p.state_lin,
        "beta" => &mut p.control_lin,
        _ => unreachable!("keys checked"),
    }
}

fn check_keys(t: &Table, prefix: &str, allowed: &[&str]) -> Result<()> {
    for key in t.keys() {
        if !allowed.contains(&key.as_str()) {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            return Err(MfcError::schema(path, "unknown key"));
        }
    }
    Ok(())
}

fn table<'a>(t: &'a Table, key: &str) -> Result<Option<&'a Table>> {
    match t.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_table()
            .map(Some)
            .ok_or_else(|| MfcError::schema(key, "expected a table")),
    }
}

fn req<'a>(t: &'a Table, prefix: &str, key: &str) -> Result<&'a Value> {
    t.get(key)
        .ok_or_else(|| MfcError::schema(format!("{prefix}.{key}"), "missing key"))
}

fn number(v: &Value, path: &str) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(MfcError::schema(path, "expected a number")),
    }
}

fn positive(t: &Table, prefix: &str, key: &str) -> Result<usize> {
    let path = format!("{prefix}.{key}");
    match req(t, prefix, key)? {
        Value::Integer(i) if *i > 0 => Ok(*i as usize),
        _ => Err(MfcError::schema(path, "expected a positive integer")),
    }
}

fn seed(v: &Value, path: &str) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(MfcError::schema(path, "expected a non-negative integer")),
    }
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| MfcError::schema(path, "expected a number or an array"))
}

fn vector(v: &Value, path: &str) -> Result<Vector> {
    if let Ok(x) = number(v, path) {
        return Ok(Vector::from_element(1, x));
    }
    let items = array(v, path)?;
    let xs = items
        .iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("{path}[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    if xs.is_empty() {
        return Err(MfcError::schema(path, "empty vector"));
    }
    Ok(Vector::from_vec(xs))
}

fn matrix(v: &Value, path: &str) -> Result<Mat> {
    if let Ok(x) = number(v, path) {
        return Ok(Mat::from_element(1, 1, x));
    }
    let rows = array(v, path)?;
    if rows.is_empty() {
        return Err(MfcError::schema(path, "empty matrix"));
    }
    let parsed = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let p = format!("{path}[{i}]");
            match r {
                Value::Array(_) => vector(r, &p).map(|v| v.as_slice().to_vec()),
                _ => Err(MfcError::schema(p, "expected a row (list of numbers)")),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let cols = parsed[0].len();
    if let Some(i) = parsed.iter().position(|r| r.len() != cols) {
        return Err(MfcError::schema(format!("{path}[{i}]"), format!("row length differs from {cols}")));
    }
    let flat: Vec<f64> = parsed.into_iter().flatten().collect();
    Ok(Mat::from_row_slice(rows.len(), cols, &flat))
}

fn depth(v: &Value) -> usize {
    match v {
        Value::Array(a) => 1 + a.first().map(depth).unwrap_or(0),
        _ => 0,
    }
}

fn matrix_path(v: &Value, path: &str) -> Result<CoeffPath> {
    if depth(v) == 3 {
        let nodes = array(v, path)?
            .iter()
            .enumerate()
            .map(|(k, m)| matrix(m, &format!("{path}[{k}]")))
            .collect::<Result<Vec<_>>>()?;
        CoeffPath::from_nodes(nodes)
    } else {
        Ok(CoeffPath::constant(matrix(v, path)?))
    }
}

fn vector_path(v: &Value, path: &str) -> Result<CoeffPath> {
    if depth(v) == 2 {
        let nodes = array(v, path)?
            .iter()
            .enumerate()
            .map(|(k, x)| vector(x, &format!("{path}[{k}]")).map(|x| Mat::from_column_slice(x.len(), 1, x.as_slice())))
            .collect::<Result<Vec<_>>>()?;
        CoeffPath::from_nodes(nodes)
    } else {
        Ok(CoeffPath::from_vector(vector(v, path)?))
    }
}

fn emit_matrix(m: &Mat) -> Value {
    Value::Array(
        m.row_iter()
            .map(|r| Value::Array(r.iter().map(|x| Value::Float(*x)).collect()))
            .collect(),
    )
}

fn emit_vector(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn emit_path(name: &str, p: &CoeffPath) -> Value {
    let one = |m: &Mat| {
        if VECTOR_COEFFICIENTS.contains(&name) {
            emit_vector(m.as_slice())
        } else {
            emit_matrix(m)
        }
    };
    if p.is_constant() {
        one(&p.raw()[0])
    } else {
        Value::Array(p.raw().iter().map(one).collect())
    }
}

/// Canonical TOML for `p`; `parse_problem` reads it back bit for bit.
pub fn emit_problem(p: &ProblemSpec) -> String {
    let mut root = Table::new();
    let mut dims = Table::new();
    dims.insert("n".into(), Value::Integer(p.dims.n as i64));
    dims.insert("d".into(), Value::Integer(p.dims.d as i64));
    root.insert("dims".into(), Value::Table(dims));
    let mut grid = Table::new();
    grid.insert("T".into(), Value::Float(p.grid.horizon));
    grid.insert("K".into(), Value::Integer(p.grid.steps as i64));
    root.insert("grid".into(), Value::Table(grid));
    let mut coeffs = Table::new();
    for (name, path) in p.paths() {
        coeffs.insert(name.into(), emit_path(name, path));
    }
    root.insert("coefficients".into(), Value::Table(coeffs));
    let mut term = Table::new();
    term.insert("M_T".into(), emit_matrix(&p.terminal_cost));
    term.insert("Mbar_T".into(), emit_matrix(&p.terminal_mean_cost));
    term.insert("S_T".into(), emit_matrix(&p.terminal_shift));
    term.insert("alpha_T".into(), emit_vector(p.terminal_lin.as_slice()));
    root.insert("terminal".into(), Value::Table(term));
    let mut init = Table::new();
    init.insert("J0".into(), emit_matrix(&p.initial_weight));
    init.insert("Jbar0".into(), emit_matrix(&p.initial_mean_weight));
    root.insert("initial_weights".into(), Value::Table(init));
    toml::to_string(&root).expect("problem tables serialize")
}

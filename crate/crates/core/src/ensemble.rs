//! Weighted particle clouds and the fields living on them.
//!
//! A field stores one `k`-vector per particle as the columns of a `k × N`
//! matrix. All empirical integrals are fixed-order weighted sums.

use std::sync::Arc;

use crate::error::{MfcError, Result};
use crate::linalg::{psd_factor, Mat, Vector};
use crate::rng::{NormalSource, ENSEMBLE_STREAM};

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    points: Mat,
    weights: Vector,
    pub seed: Option<u64>,
}

impl Ensemble {
    /// Points are columns. Weights default to uniform and are normalized.
    pub fn new(points: Mat, weights: Option<Vector>) -> Result<Arc<Self>> {
        let count = points.ncols();
        if count == 0 {
            return Err(MfcError::schema("ensemble.points", "at least one particle required"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(MfcError::schema("ensemble.points", "non-finite coordinate"));
        }
        let w = match weights {
            None => Vector::from_element(count, 1.0 / count as f64),
            Some(w) => {
                if w.len() != count {
                    return Err(MfcError::dims(
                        "ensemble.weights",
                        format!("{count}"),
                        format!("{}", w.len()),
                    ));
                }
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(MfcError::schema("ensemble.weights", "weights must be finite and non-negative"));
                }
                let s: f64 = w.iter().sum();
                if s <= 0.0 {
                    return Err(MfcError::schema("ensemble.weights", "weights sum to zero"));
                }
                w / s
            }
        };
        Ok(Arc::new(Ensemble {
            points,
            weights: w,
            seed: None,
        }))
    }

    /// `count` equally weighted draws from N(mean, cov).
    pub fn gaussian(mean: &Vector, cov: &Mat, count: usize, seed: u64) -> Result<Arc<Self>> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(MfcError::dims(
                "ensemble.gaussian.covariance",
                format!("{n}x{n}"),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        if crate::linalg::min_sym_eigenvalue(cov) < crate::problem::PSD_TOL {
            return Err(MfcError::schema("ensemble.gaussian.covariance", "covariance not PSD"));
        }
        let l = psd_factor(cov);
        let mut src = NormalSource::new(seed, ENSEMBLE_STREAM, n);
        let mut points = Mat::zeros(n, count);
        let mut z = vec![0.0; n];
        for i in 0..count {
            src.fill(i as u64, &mut z);
            let x = mean + &l * Vector::from_column_slice(&z);
            points.set_column(i, &x);
        }
        let mut e = Ensemble::new(points, None)?;
        Arc::make_mut(&mut e).seed = Some(seed);
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> &Mat {
        &self.points
    }

    pub fn weights(&self) -> &Vector {
        &self.weights
    }
}

/// Weighted column average.
pub fn wmean(x: &Mat, w: &Vector) -> Vector {
    x * w
}

/// `Σ_i w_i x_i · y_i`.
pub fn winner(x: &Mat, y: &Mat, w: &Vector) -> f64 {
    let k = x.nrows();
    let mut acc = 0.0;
    for i in 0..x.ncols() {
        let mut dot = 0.0;
        for r in 0..k {
            dot += x[(r, i)] * y[(r, i)];
        }
        acc += w[i] * dot;
    }
    acc
}

pub fn add_to_columns(x: &mut Mat, v: &Vector) {
    for mut c in x.column_iter_mut() {
        c += v;
    }
}

/// Subtract the weighted mean from every column; returns (deviation, mean).
pub fn split(x: &Mat, w: &Vector) -> (Mat, Vector) {
    let m = wmean(x, w);
    let mut d = x.clone();
    add_to_columns(&mut d, &(-&m));
    (d, m)
}

/// `a x_i + abar mean(x)` for every column.
pub fn mf_apply(a: &Mat, abar: &Mat, x: &Mat, w: &Vector) -> Mat {
    let m = wmean(x, w);
    let mut out = a * x;
    add_to_columns(&mut out, &(abar * m));
    out
}

/// Operator acting as `dev` on deviations and `mean` on the average:
/// `dev x_i + (mean - dev) mean(x)`.
pub fn split_apply(dev: &Mat, mean: &Mat, x: &Mat, w: &Vector) -> Mat {
    let m = wmean(x, w);
    let mut out = dev * x;
    add_to_columns(&mut out, &((mean - dev) * m));
    out
}

/// Broadcast a vector into a `k × count` matrix.
pub fn broadcast(v: &Vector, count: usize) -> Mat {
    let mut out = Mat::zeros(v.len(), count);
    add_to_columns(&mut out, v);
    out
}

/// An element of `L²_m(Rⁿ; Rᵏ)` sampled on the particles.
#[derive(Clone, Debug)]
pub struct Field {
    values: Mat,
    ens: Arc<Ensemble>,
}

impl PartialEq for Field {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values && Arc::ptr_eq(&self.ens, &other.ens)
    }
}

impl Field {
    pub fn new(values: Mat, ens: Arc<Ensemble>) -> Result<Self> {
        if values.ncols() != ens.len() {
            return Err(MfcError::dims(
                "field",
                format!("{} particles", ens.len()),
                format!("{} columns", values.ncols()),
            ));
        }
        Ok(Field { values, ens })
    }

    pub(crate) fn raw(values: Mat, ens: &Arc<Ensemble>) -> Self {
        debug_assert_eq!(values.ncols(), ens.len());
        Field {
            values,
            ens: ens.clone(),
        }
    }

    pub fn zeros(k: usize, ens: &Arc<Ensemble>) -> Self {
        Field::raw(Mat::zeros(k, ens.len()), ens)
    }

    pub fn constant(v: &Vector, ens: &Arc<Ensemble>) -> Self {
        Field::raw(broadcast(v, ens.len()), ens)
    }

    /// The identity map `x ↦ x`.
    pub fn identity(ens: &Arc<Ensemble>) -> Self {
        Field::raw(ens.points().clone(), ens)
    }

    /// `x ↦ A x + b`.
    pub fn affine(a: &Mat, b: &Vector, ens: &Arc<Ensemble>) -> Self {
        let mut v = a * ens.points();
        add_to_columns(&mut v, b);
        Field::raw(v, ens)
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn into_values(self) -> Mat {
        self.values
    }

    pub fn ensemble(&self) -> &Arc<Ensemble> {
        &self.ens
    }

    pub fn weights(&self) -> &Vector {
        self.ens.weights()
    }

    pub fn mean(&self) -> Vector {
        wmean(&self.values, self.ens.weights())
    }

    fn compatible(&self, other: &Field) -> Result<()> {
        if self.values.shape() != other.values.shape() {
            return Err(MfcError::dims(
                "field",
                format!("{}x{}", self.values.nrows(), self.values.ncols()),
                format!("{}x{}", other.values.nrows(), other.values.ncols()),
            ));
        }
        Ok(())
    }

    pub fn inner_h(&self, other: &Field) -> Result<f64> {
        self.compatible(other)?;
        Ok(winner(&self.values, &other.values, self.ens.weights()))
    }

    pub fn norm_sq(&self) -> f64 {
        winner(&self.values, &self.values, self.ens.weights())
    }

    pub fn deviation(&self) -> Field {
        Field::raw(split(&self.values, self.ens.weights()).0, &self.ens)
    }

    /// `A X_x + Abar mean(X)`.
    pub fn apply_mf_operator(&self, a: &Mat, abar: &Mat) -> Result<Field> {
        if a.ncols() != self.dim() || abar.ncols() != self.dim() || a.nrows() != abar.nrows() {
            return Err(MfcError::dims(
                "operator",
                format!("?x{}", self.dim()),
                format!("{}x{} / {}x{}", a.nrows(), a.ncols(), abar.nrows(), abar.ncols()),
            ));
        }
        Ok(Field::raw(
            mf_apply(a, abar, &self.values, self.ens.weights()),
            &self.ens,
        ))
    }

    /// Weighted mean and covariance of the push-forward measure.
    pub fn push_forward_stats(&self) -> (Vector, Mat) {
        let (d, m) = split(&self.values, self.ens.weights());
        let w = self.ens.weights();
        let k = self.dim();
        let mut cov = Mat::zeros(k, k);
        for (i, c) in d.column_iter().enumerate() {
            cov += (c * c.transpose()) * w[i];
        }
        (m, cov)
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.compatible(other)?;
        Ok(Field::raw(&self.values + &other.values, &self.ens))
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.compatible(other)?;
        Ok(Field::raw(&self.values - &other.values, &self.ens))
    }

    pub fn scale(&self, a: f64) -> Field {
        Field::raw(&self.values * a, &self.ens)
    }

    /// Largest Euclidean norm over particles.
    pub fn sup_norm(&self) -> f64 {
        self.values
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }
}

/// One field per grid node.
#[derive(Clone, Debug)]
pub struct FieldPath {
    values: Vec<Mat>,
    ens: Arc<Ensemble>,
}

impl FieldPath {
    pub fn new(values: Vec<Mat>, ens: Arc<Ensemble>) -> Result<Self> {
        if let Some(first) = values.first() {
            for v in &values {
                if v.shape() != first.shape() || v.ncols() != ens.len() {
                    return Err(MfcError::dims(
                        "field path",
                        format!("{}x{}", first.nrows(), ens.len()),
                        format!("{}x{}", v.nrows(), v.ncols()),
                    ));
                }
            }
        }
        Ok(FieldPath { values, ens })
    }

    pub(crate) fn raw(values: Vec<Mat>, ens: &Arc<Ensemble>) -> Self {
        FieldPath {
            values,
            ens: ens.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, k: usize) -> Field {
        Field::raw(self.values[k].clone(), &self.ens)
    }

    pub fn raw_values(&self) -> &[Mat] {
        &self.values
    }

    pub fn ensemble(&self) -> &Arc<Ensemble> {
        &self.ens
    }

    /// Largest particle-wise distance to another path over all nodes.
    pub fn sup_distance(&self, other: &FieldPath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                (a - b)
                    .column_iter()
                    .map(|c| c.norm())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

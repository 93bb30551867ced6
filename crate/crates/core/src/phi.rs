//! Terminal costs given through their gradient (non-quadratic case).

use std::fmt;
use std::sync::Arc;

use crate::ensemble::{add_to_columns, split, split_apply, Field};
use crate::error::{MfcError, Result};
use crate::linalg::{Mat, Vector};
use crate::problem::ProblemSpec;
use crate::propagator::Coefficients;

pub type PointGradient = Arc<dyn Fn(&[f64]) -> std::result::Result<Vec<f64>, String> + Send + Sync>;
pub type PointValue = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type FieldGradient = Arc<dyn Fn(&Field) -> std::result::Result<Field, String> + Send + Sync>;
pub type FieldValue = Arc<dyn Fn(&Field) -> f64 + Send + Sync>;

/// A terminal cost `Phi(mu_T)` of the terminal distribution.
#[derive(Clone)]
pub enum PhiSpec {
    /// The problem's own quadratic terminal cost.
    Quadratic,
    /// No terminal cost.
    Zero,
    /// Cross-entropy `-∫ ln π dμ` against a density given by `∇ ln π`
    /// (and optionally `ln π`, needed only to report costs).
    GradientLogDensity {
        grad_log_density: PointGradient,
        log_density: Option<PointValue>,
    },
    /// Arbitrary gradient map on fields.
    CustomGradient {
        gradient: FieldGradient,
        value: Option<FieldValue>,
    },
}

impl fmt::Debug for PhiSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PhiSpec::Quadratic => "Quadratic",
            PhiSpec::Zero => "Zero",
            PhiSpec::GradientLogDensity { .. } => "GradientLogDensity",
            PhiSpec::CustomGradient { .. } => "CustomGradient",
        };
        f.write_str(name)
    }
}

impl PhiSpec {
    /// Cross-entropy against `N(mean, cov)`.
    pub fn gaussian_cross_entropy(mean: Vector, cov: &Mat) -> Result<Self> {
        let n = mean.len();
        let chol = cov.clone().cholesky().ok_or_else(|| {
            MfcError::Validation("Gaussian covariance must be positive definite".into())
        })?;
        let prec = chol.inverse();
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let norm = 0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        let (m1, p1) = (mean.clone(), prec.clone());
        let grad = move |x: &[f64]| -> std::result::Result<Vec<f64>, String> {
            if x.len() != m1.len() {
                return Err(format!("expected {} components, got {}", m1.len(), x.len()));
            }
            let dx = Vector::from_column_slice(x) - &m1;
            Ok((-(&p1 * dx)).as_slice().to_vec())
        };
        let value = move |x: &[f64]| -> f64 {
            let dx = Vector::from_column_slice(x) - &mean;
            -0.5 * dx.dot(&(&prec * &dx)) - norm
        };
        Ok(PhiSpec::GradientLogDensity {
            grad_log_density: Arc::new(grad),
            log_density: Some(Arc::new(value)),
        })
    }

    pub fn standard_gaussian_cross_entropy(n: usize) -> Self {
        Self::gaussian_cross_entropy(Vector::zeros(n), &Mat::identity(n, n))
            .expect("identity covariance")
    }

    /// Whether the gradient is affine in the field.
    pub fn is_quadratic(&self) -> bool {
        matches!(self, PhiSpec::Quadratic | PhiSpec::Zero)
    }

    /// The x-gradient of the functional derivative at the particles of `xt`.
    pub fn gradient(&self, c: &Coefficients, xt: &Field) -> Result<Field> {
        let ens = xt.ensemble();
        match self {
            PhiSpec::Quadratic => {
                let mut g = split_apply(&c.terminal_dev, &c.terminal_mean, xt.values(), xt.weights());
                add_to_columns(&mut g, &c.terminal_lin);
                Ok(Field::raw(g, ens))
            }
            PhiSpec::Zero => Ok(Field::zeros(xt.dim(), ens)),
            PhiSpec::GradientLogDensity { grad_log_density, .. } => {
                let x = xt.values();
                let mut out = Mat::zeros(x.nrows(), x.ncols());
                for i in 0..x.ncols() {
                    let col: Vec<f64> = x.column(i).iter().copied().collect();
                    let g = grad_log_density(&col)
                        .map_err(|message| MfcError::Callback { particle: i, message })?;
                    check_point(i, &g, x.nrows())?;
                    for (r, v) in g.iter().enumerate() {
                        out[(r, i)] = -v;
                    }
                }
                Ok(Field::raw(out, ens))
            }
            PhiSpec::CustomGradient { gradient, .. } => {
                let g = gradient(xt).map_err(|message| MfcError::Callback { particle: 0, message })?;
                if g.values().shape() != xt.values().shape() {
                    return Err(MfcError::Callback {
                        particle: 0,
                        message: format!(
                            "gradient has shape {:?}, expected {:?}",
                            g.values().shape(),
                            xt.values().shape()
                        ),
                    });
                }
                for (i, col) in g.values().column_iter().enumerate() {
                    if col.iter().any(|v| !v.is_finite()) {
                        return Err(MfcError::Callback {
                            particle: i,
                            message: "non-finite gradient".into(),
                        });
                    }
                }
                Ok(g)
            }
        }
    }

    /// `Phi(X_# m)` when the variant can evaluate it.
    pub fn value(&self, c: &Coefficients, xt: &Field) -> Option<f64> {
        match self {
            PhiSpec::Quadratic => {
                let (dev, mean) = split(xt.values(), xt.weights());
                let w = xt.weights();
                let td = &c.terminal_dev * &dev;
                Some(
                    0.5 * crate::ensemble::winner(&dev, &td, w)
                        + 0.5 * mean.dot(&(&c.terminal_mean * &mean))
                        + c.terminal_lin.dot(&mean),
                )
            }
            PhiSpec::Zero => Some(0.0),
            PhiSpec::GradientLogDensity { log_density, .. } => log_density.as_ref().map(|f| {
                let x = xt.values();
                (0..x.ncols())
                    .map(|i| {
                        let col: Vec<f64> = x.column(i).iter().copied().collect();
                        -xt.weights()[i] * f(&col)
                    })
                    .sum()
            }),
            PhiSpec::CustomGradient { value, .. } => value.as_ref().map(|f| f(xt)),
        }
    }
}

fn check_point(i: usize, g: &[f64], n: usize) -> Result<()> {
    if g.len() != n {
        return Err(MfcError::Callback {
            particle: i,
            message: format!("gradient has {} components, expected {n}", g.len()),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(MfcError::Callback {
            particle: i,
            message: "non-finite gradient".into(),
        });
    }
    Ok(())
}

/// Gradient of the terminal cost at the terminal field.
pub fn phi_gradient(phi: &PhiSpec, p: &ProblemSpec, xt: &Field) -> Result<Field> {
    let c = Coefficients::new(p)?;
    phi.gradient(&c, xt)
}

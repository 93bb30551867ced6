//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn symmetrize(a: &mut Mat) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn symmetrized(a: &Mat) -> Mat {
    let mut b = a.clone();
    symmetrize(&mut b);
    b
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_sym_eigenvalue(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let eig = SymmetricEigen::new(symmetrized(a));
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn asymmetry(a: &Mat) -> f64 {
    max_abs(&(a - a.transpose()))
}

/// Moore–Penrose inverse of a symmetric PSD matrix; eigenvalues below
/// `rel_cutoff * max|eigenvalue|` are treated as zero.
pub fn sym_pinv(a: &Mat, rel_cutoff: f64) -> Mat {
    let n = a.nrows();
    let eig = SymmetricEigen::new(symmetrized(a));
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut out = Mat::zeros(n, n);
    if top == 0.0 {
        return out;
    }
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() > rel_cutoff * top {
            let q = eig.eigenvectors.column(i);
            out += (q * q.transpose()) / ev;
        }
    }
    out
}

/// Inverse of a symmetric positive definite matrix (Cholesky), symmetrized.
pub fn spd_inverse(a: &Mat) -> Option<Mat> {
    let chol = symmetrized(a).cholesky()?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

/// A factor `L` with `L Lᵀ = a` for symmetric PSD `a` (Cholesky when possible,
/// eigen square root otherwise).
pub fn psd_factor(a: &Mat) -> Mat {
    let s = symmetrized(a);
    if let Some(ch) = s.clone().cholesky() {
        return ch.l();
    }
    let eig = SymmetricEigen::new(s);
    let mut d = eig.eigenvalues.clone();
    for v in d.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * Mat::from_diagonal(&d)
}

/// Trace of `aᵀ b` (Frobenius inner product).
pub fn frob(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

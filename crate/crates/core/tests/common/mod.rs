//! Problem builders and independent reference computations shared by the
//! integration tests. Nothing here calls the library's integrators.

#![allow(dead_code)]

use std::sync::Arc;

use mfckit::linalg::{Mat, Vector};
use mfckit::problem::{CoeffPath, Dims, ProblemSpec, TimeGrid};
use mfckit::{Ensemble, Field};

/// `n = d = 1`, `G = N = M = 1`, everything else zero: `P(s) = tanh(T - s)`.
pub fn scalar(horizon: f64, steps: usize) -> ProblemSpec {
    let mut p = ProblemSpec::zeros(Dims { n: 1, d: 1 }, TimeGrid::new(horizon, steps).unwrap());
    p.input = CoeffPath::constant(Mat::identity(1, 1));
    p.state_cost = CoeffPath::constant(Mat::identity(1, 1));
    p
}

/// Two-point ensemble {-1, +1} with the identity field.
pub fn pair() -> Field {
    let ens = Ensemble::new(Mat::from_row_slice(1, 2, &[-1.0, 1.0]), None).unwrap();
    Field::identity(&ens)
}

fn c(r: usize, k: usize, v: &[f64]) -> CoeffPath {
    CoeffPath::constant(Mat::from_row_slice(r, k, v))
}

/// Two states, one control, every coefficient and affine term nonzero.
pub fn generic(steps: usize) -> ProblemSpec {
    let mut p = ProblemSpec::zeros(Dims { n: 2, d: 1 }, TimeGrid::new(1.3, steps).unwrap());
    p.drift = c(2, 2, &[0.1, 0.5, -0.4, -0.2]);
    p.mean_drift = c(2, 2, &[0.3, 0.0, 0.1, -0.2]);
    p.input = c(2, 1, &[0.2, 1.0]);
    p.forcing = c(2, 1, &[0.3, -0.2]);
    p.state_lin = c(2, 1, &[0.1, 0.4]);
    p.control_lin = c(1, 1, &[-0.3]);
    p.state_cost = c(2, 2, &[1.0, 0.2, 0.2, 0.5]);
    p.mean_cost = c(2, 2, &[0.4, 0.0, 0.0, 0.3]);
    p.mean_shift = c(2, 2, &[0.5, 0.1, 0.0, 0.5]);
    p.control_cost = c(1, 1, &[0.7]);
    p.terminal_cost = Mat::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.9]);
    p.terminal_mean_cost = Mat::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.2]);
    p.terminal_shift = Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.5]);
    p.terminal_lin = Vector::from_vec(vec![0.2, -0.1]);
    p
}

pub fn generic_ensemble() -> Arc<Ensemble> {
    Ensemble::new(
        Mat::from_row_slice(2, 3, &[0.3, -1.0, 0.8, 1.2, 0.1, -0.6]),
        Some(Vector::from_vec(vec![0.2, 0.5, 0.3])),
    )
    .unwrap()
}

/// Classical RK4 backward from `y_end` at `t = T` with `steps` steps of
/// `y' = f(t, y)`; returns values at the nodes, `out[k]` at `t_k`.
pub fn rk4_back(y_end: Mat, horizon: f64, steps: usize, f: impl Fn(f64, &Mat) -> Mat) -> Vec<Mat> {
    let h = horizon / steps as f64;
    let mut out = vec![y_end.clone(); steps + 1];
    let mut y = y_end;
    for k in (0..steps).rev() {
        let t = (k + 1) as f64 * h;
        let k1 = f(t, &y);
        let k2 = f(t - h / 2.0, &(&y - &k1 * (h / 2.0)));
        let k3 = f(t - h / 2.0, &(&y - &k2 * (h / 2.0)));
        let k4 = f(t - h, &(&y - &k3 * h));
        y = &y - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out[k] = y.clone();
    }
    out
}

/// Classical RK4 forward from `y0` at 0.
pub fn rk4_fwd(y0: Mat, horizon: f64, steps: usize, f: impl Fn(f64, &Mat) -> Mat) -> Vec<Mat> {
    let h = horizon / steps as f64;
    let mut out = vec![y0.clone()];
    let mut y = y0;
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = f(t, &y);
        let k2 = f(t + h / 2.0, &(&y + &k1 * (h / 2.0)));
        let k3 = f(t + h / 2.0, &(&y + &k2 * (h / 2.0)));
        let k4 = f(t + h, &(&y + &k3 * h));
        y = &y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out.push(y.clone());
    }
    out
}

/// Matrix exponential by scaling and squaring of a degree-12 Taylor sum.
pub fn expm(a: &Mat) -> Mat {
    let norm = a.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
    let s = (norm.log2().ceil().max(0.0) as i32) + 1;
    let b = a / 2f64.powi(s);
    let n = a.nrows();
    let mut term = Mat::identity(n, n);
    let mut sum = Mat::identity(n, n);
    for k in 1..=12 {
        term = &term * &b / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Deterministic uniform numbers in [-1, 1] (xorshift), independent of the
/// library's generator.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    pub fn next(&mut self) -> f64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        (self.0 >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    pub fn mat(&mut self, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| self.next())
    }

    pub fn index(&mut self, n: usize) -> usize {
        (((self.next() + 1.0) * 0.5 * n as f64) as usize).min(n - 1)
    }
}

/// `max_k |a_k - b_k|` entrywise.
pub fn path_gap(a: &[Mat], b: &[Mat]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// One line per acceptance criterion.
pub fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {id:>2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

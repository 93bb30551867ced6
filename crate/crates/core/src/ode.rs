//! Fixed-step RK4 on the uniform grid, plus node/derivative tracks with
//! cubic Hermite interpolation.
//!
//! Right-hand sides are indexed by *half-node* `j`: time `j * h / 2`. A step
//! over interval `k` evaluates at half-nodes `2k`, `2k+1`, `2k+2`, so all
//! time-dependent coefficients can be cached once on the half grid.

use nalgebra::{DMatrix, DVector};

pub trait OdeState: Clone {
    /// `self += a * x`
    fn add_scaled(&mut self, a: f64, x: &Self);

    fn scale(&mut self, a: f64);

    fn max_abs(&self) -> f64;
}

impl OdeState for DMatrix<f64> {
    fn add_scaled(&mut self, a: f64, x: &Self) {
        self.zip_apply(x, |s, v| *s += a * v);
    }
    fn scale(&mut self, a: f64) {
        *self *= a;
    }
    fn max_abs(&self) -> f64 {
        crate::linalg::max_abs(self)
    }
}

impl OdeState for DVector<f64> {
    fn add_scaled(&mut self, a: f64, x: &Self) {
        self.zip_apply(x, |s, v| *s += a * v);
    }
    fn scale(&mut self, a: f64) {
        *self *= a;
    }
    fn max_abs(&self) -> f64 {
        self.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl OdeState for f64 {
    fn add_scaled(&mut self, a: f64, x: &Self) {
        *self += a * x;
    }
    fn scale(&mut self, a: f64) {
        *self *= a;
    }
    fn max_abs(&self) -> f64 {
        self.abs()
    }
}

impl<A: OdeState, B: OdeState> OdeState for (A, B) {
    fn add_scaled(&mut self, a: f64, x: &Self) {
        self.0.add_scaled(a, &x.0);
        self.1.add_scaled(a, &x.1);
    }
    fn scale(&mut self, a: f64) {
        self.0.scale(a);
        self.1.scale(a);
    }
    fn max_abs(&self) -> f64 {
        self.0.max_abs().max(self.1.max_abs())
    }
}

impl<A: OdeState, B: OdeState, C: OdeState> OdeState for (A, B, C) {
    fn add_scaled(&mut self, a: f64, x: &Self) {
        self.0.add_scaled(a, &x.0);
        self.1.add_scaled(a, &x.1);
        self.2.add_scaled(a, &x.2);
    }
    fn scale(&mut self, a: f64) {
        self.0.scale(a);
        self.1.scale(a);
        self.2.scale(a);
    }
    fn max_abs(&self) -> f64 {
        self.0.max_abs().max(self.1.max_abs()).max(self.2.max_abs())
    }
}

fn shifted<S: OdeState>(y: &S, a: f64, d: &S) -> S {
    let mut out = y.clone();
    out.add_scaled(a, d);
    out
}

/// Result of one step: the new value and the one-sided derivatives at both
/// ends of the interval (for Hermite reconstruction).
pub struct Step<S> {
    pub value: S,
    pub d_start: S,
    pub d_end: S,
}

/// One forward step over interval `k` from `y` at `t_k`.
pub fn rk4_forward<S, F>(y: &S, k: usize, h: f64, mut rhs: F) -> Step<S>
where
    S: OdeState,
    F: FnMut(usize, &S) -> S,
{
    let (j0, jm, j1) = (2 * k, 2 * k + 1, 2 * k + 2);
    let k1 = rhs(j0, y);
    let k2 = rhs(jm, &shifted(y, 0.5 * h, &k1));
    let k3 = rhs(jm, &shifted(y, 0.5 * h, &k2));
    let k4 = rhs(j1, &shifted(y, h, &k3));
    let mut value = y.clone();
    value.add_scaled(h / 6.0, &k1);
    value.add_scaled(h / 3.0, &k2);
    value.add_scaled(h / 3.0, &k3);
    value.add_scaled(h / 6.0, &k4);
    let d_end = rhs(j1, &value);
    Step {
        value,
        d_start: k1,
        d_end,
    }
}

/// One backward step over interval `k` from `y` at `t_{k+1}`; `rhs` returns
/// the ordinary time derivative.
pub fn rk4_backward<S, F>(y: &S, k: usize, h: f64, mut rhs: F) -> Step<S>
where
    S: OdeState,
    F: FnMut(usize, &S) -> S,
{
    let (j0, jm, j1) = (2 * k, 2 * k + 1, 2 * k + 2);
    let k1 = rhs(j1, y);
    let k2 = rhs(jm, &shifted(y, -0.5 * h, &k1));
    let k3 = rhs(jm, &shifted(y, -0.5 * h, &k2));
    let k4 = rhs(j0, &shifted(y, -h, &k3));
    let mut value = y.clone();
    value.add_scaled(-h / 6.0, &k1);
    value.add_scaled(-h / 3.0, &k2);
    value.add_scaled(-h / 3.0, &k3);
    value.add_scaled(-h / 6.0, &k4);
    let d_start = rhs(j0, &value);
    Step {
        value,
        d_start,
        d_end: k1,
    }
}

/// Grid samples of a solution with per-interval end derivatives.
#[derive(Clone, Debug)]
pub struct Track<S> {
    pub h: f64,
    pub nodes: Vec<S>,
    pub d_start: Vec<S>,
    pub d_end: Vec<S>,
}

impl<S: OdeState> Track<S> {
    pub fn intervals(&self) -> usize {
        self.d_start.len()
    }

    pub fn node(&self, k: usize) -> &S {
        &self.nodes[k]
    }

    /// Hermite midpoint of interval `k`: (y0+y1)/2 + h/8 (d0-d1).
    pub fn mid(&self, k: usize) -> S {
        let mut out = self.nodes[k].clone();
        out.add_scaled(1.0, &self.nodes[k + 1]);
        out.scale(0.5);
        out.add_scaled(self.h / 8.0, &self.d_start[k]);
        out.add_scaled(-self.h / 8.0, &self.d_end[k]);
        out
    }

    /// Value at half-node `j`.
    pub fn half(&self, j: usize) -> S {
        if j % 2 == 0 {
            self.nodes[j / 2].clone()
        } else {
            self.mid(j / 2)
        }
    }

    /// All half-node values, `2K+1` entries.
    pub fn half_values(&self) -> Vec<S> {
        (0..=2 * self.intervals()).map(|j| self.half(j)).collect()
    }

    /// Cubic Hermite evaluation at time `t` (clamped to the grid). At a node
    /// the node value is returned exactly.
    pub fn at(&self, t: f64) -> S {
        let kk = self.intervals();
        let x = (t / self.h).clamp(0.0, kk as f64);
        let mut k = x.floor() as usize;
        if k >= kk {
            return self.nodes[kk].clone();
        }
        let th = x - k as f64;
        if th == 0.0 {
            return self.nodes[k].clone();
        }
        if th > 1.0 - 1e-15 {
            k += 1;
            return self.nodes[k].clone();
        }
        let t2 = th * th;
        let t3 = t2 * th;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + th;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let mut out = self.nodes[k].clone();
        out.scale(h00);
        out.add_scaled(h01, &self.nodes[k + 1]);
        out.add_scaled(h10 * self.h, &self.d_start[k]);
        out.add_scaled(h11 * self.h, &self.d_end[k]);
        out
    }
}

/// Integrate forward over all `kk` intervals.
pub fn integrate_forward<S, F>(y0: S, kk: usize, h: f64, mut rhs: F) -> Track<S>
where
    S: OdeState,
    F: FnMut(usize, &S) -> S,
{
    let mut nodes = Vec::with_capacity(kk + 1);
    let mut d_start = Vec::with_capacity(kk);
    let mut d_end = Vec::with_capacity(kk);
    nodes.push(y0);
    for k in 0..kk {
        let st = rk4_forward(&nodes[k], k, h, &mut rhs);
        nodes.push(st.value);
        d_start.push(st.d_start);
        d_end.push(st.d_end);
    }
    Track {
        h,
        nodes,
        d_start,
        d_end,
    }
}

/// Integrate backward from the terminal value; `check` is called with each
/// new node index and value and may abort the integration.
pub fn integrate_backward<S, F, C, E>(
    y_end: S,
    kk: usize,
    h: f64,
    mut rhs: F,
    mut check: C,
) -> Result<Track<S>, E>
where
    S: OdeState,
    F: FnMut(usize, &S) -> S,
    C: FnMut(usize, &mut S) -> Result<(), E>,
{
    let mut nodes = vec![y_end.clone(); kk + 1];
    let mut d_start = vec![y_end.clone(); kk];
    let mut d_end = vec![y_end; kk];
    for k in (0..kk).rev() {
        let mut st = rk4_backward(&nodes[k + 1], k, h, &mut rhs);
        check(k, &mut st.value)?;
        nodes[k] = st.value;
        d_start[k] = st.d_start;
        d_end[k] = st.d_end;
    }
    Ok(Track {
        h,
        nodes,
        d_start,
        d_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_is_fourth_order_on_exponential() {
        let err = |kk: usize| {
            let h = 1.0 / kk as f64;
            let tr = integrate_forward(1.0_f64, kk, h, |_, y| -2.0 * y);
            (tr.nodes[kk] - (-2.0_f64).exp()).abs()
        };
        let ratio = err(20) / err(40);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn hermite_mid_is_accurate() {
        let kk = 50;
        let h = 1.0 / kk as f64;
        let tr = integrate_forward(0.0_f64, kk, h, |j, _| (j as f64 * h / 2.0).cos());
        for k in [0, 10, 49] {
            let tm = (k as f64 + 0.5) * h;
            assert!((tr.mid(k) - tm.sin()).abs() < 1e-9);
            assert!((tr.at(tm) - tm.sin()).abs() < 1e-9);
        }
        assert_eq!(tr.at(10.0 * h), tr.nodes[10]);
    }

    #[test]
    fn backward_matches_forward_reversal() {
        let kk = 40;
        let h = 0.025;
        let tr: Result<Track<f64>, ()> =
            integrate_backward(1.0, kk, h, |_, y| 0.5 * y, |_, _| Ok(()));
        let tr = tr.unwrap();
        assert!((tr.nodes[0] - (-0.5_f64).exp()).abs() < 1e-9);
    }
}

//! Discretize-then-optimize reference solver.
//!
//! Unknowns are per-particle controls, constant on each coarse interval. The
//! state follows forward Euler and the running cost the left rectangle rule,
//! so the discrete objective is an explicit function of the unknowns. Its
//! gradient comes from a reverse sweep through the Euler recursion and is
//! checked against central differences before optimizing.

use crate::ensemble::{add_to_columns, mf_apply, split_apply, winner, Field};
use crate::error::{MfcError, Result};
use crate::linalg::{Mat, Vector};
use crate::phi::PhiSpec;
use crate::propagator::Coefficients;
use crate::rng::uniform;

pub(crate) struct DiscreteProblem<'a> {
    c: &'a Coefficients,
    x0: &'a Field,
    phi: &'a PhiSpec,
    steps: usize,
    ratio: usize,
    dt: f64,
    adj: Vec<(Mat, Mat)>,
}

pub(crate) struct OracleOutput {
    pub controls: Vec<Mat>,
    pub cost: f64,
    pub gradient_norm: f64,
    pub gradient_check: f64,
    pub iterations: usize,
}

type Controls = Vec<Mat>;

fn axpy(a: &mut Controls, s: f64, b: &Controls) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y * s;
    }
}

fn lin(a: &Controls, s: f64, b: &Controls) -> Controls {
    a.iter().zip(b).map(|(x, y)| x + y * s).collect()
}

impl<'a> DiscreteProblem<'a> {
    pub fn new(c: &'a Coefficients, x0: &'a Field, phi: &'a PhiSpec, steps: usize) -> Self {
        let ratio = c.steps / steps;
        let adj = (0..steps)
            .map(|m| {
                let j = 2 * m * ratio;
                let fbar = &c.mean_drift_total[j] - &c.drift[j];
                (c.drift[j].transpose(), fbar.transpose())
            })
            .collect();
        DiscreteProblem {
            c,
            x0,
            phi,
            steps,
            ratio,
            dt: c.horizon / steps as f64,
            adj,
        }
    }

    fn w(&self) -> &Vector {
        self.x0.weights()
    }

    fn half(&self, m: usize) -> usize {
        2 * m * self.ratio
    }

    fn states(&self, u: &Controls) -> Vec<Mat> {
        let c = self.c;
        let w = self.w();
        let mut xs = Vec::with_capacity(self.steps + 1);
        xs.push(self.x0.values().clone());
        for m in 0..self.steps {
            let j = self.half(m);
            let x = &xs[m];
            let fbar = &c.mean_drift_total[j] - &c.drift[j];
            let mut dx = mf_apply(&c.drift[j], &fbar, x, w) + &c.input[j] * &u[m];
            add_to_columns(&mut dx, &c.forcing[j]);
            xs.push(x + dx * self.dt);
        }
        xs
    }

    fn terminal_field(&self, x: &Mat) -> Field {
        Field::raw(x.clone(), self.x0.ensemble())
    }

    fn objective(&self, u: &Controls) -> Result<f64> {
        let c = self.c;
        let w = self.w();
        let xs = self.states(u);
        let mut total = 0.0;
        for m in 0..self.steps {
            let j = self.half(m);
            let x = &xs[m];
            let xm = x * w;
            let um = &u[m] * w;
            total += self.dt
                * (0.5 * winner(x, &split_apply(&c.dev_weight[j], &c.mean_weight[j], x, w), w)
                    + 0.5 * winner(&u[m], &(&c.control_cost[j] * &u[m]), w)
                    + c.state_lin[j].dot(&xm)
                    + c.control_lin[j].dot(&um));
        }
        let term = self
            .phi
            .value(c, &self.terminal_field(&xs[self.steps]))
            .ok_or_else(|| {
                MfcError::InvalidArgument("the oracle needs a terminal cost with a value".into())
            })?;
        Ok(total + term)
    }

    /// Gradient with respect to the inner product `dt Σ_m (a_m, b_m)_U`.
    fn gradient(&self, u: &Controls) -> Result<Controls> {
        let c = self.c;
        let w = self.w();
        let xs = self.states(u);
        let mut p = self.phi.gradient(c, &self.terminal_field(&xs[self.steps]))?.into_values();
        let mut g = vec![Mat::zeros(0, 0); self.steps];
        for m in (0..self.steps).rev() {
            let j = self.half(m);
            let mut gm = &c.control_cost[j] * &u[m] + c.input[j].transpose() * &p;
            add_to_columns(&mut gm, &c.control_lin[j]);
            g[m] = gm;
            let x = &xs[m];
            let mut run = split_apply(&c.dev_weight[j], &c.mean_weight[j], x, w);
            add_to_columns(&mut run, &c.state_lin[j]);
            let prop = mf_apply(&self.adj[m].0, &self.adj[m].1, &p, w);
            p = &p + (prop + run) * self.dt;
        }
        Ok(g)
    }

    fn inner(&self, a: &Controls, b: &Controls) -> f64 {
        let w = self.w();
        self.dt * a.iter().zip(b).map(|(x, y)| winner(x, y, w)).sum::<f64>()
    }

    fn zeros(&self) -> Controls {
        vec![Mat::zeros(self.c.d, self.x0.values().ncols()); self.steps]
    }

    /// Relative mismatch between the reverse-sweep gradient and a central
    /// difference along a fixed pseudo-random direction.
    fn check_gradient(&self, u: &Controls) -> Result<f64> {
        let mut counter = 0u64;
        let dir: Controls = self
            .zeros()
            .into_iter()
            .map(|m| {
                m.map(|_| {
                    counter += 1;
                    2.0 * uniform(0x5eed, 7, counter) - 1.0
                })
            })
            .collect();
        let eps = 1e-5;
        let plus = self.objective(&lin(u, eps, &dir))?;
        let minus = self.objective(&lin(u, -eps, &dir))?;
        let fd = (plus - minus) / (2.0 * eps);
        let an = self.inner(&self.gradient(u)?, &dir);
        Ok((fd - an).abs() / (1.0 + an.abs()))
    }

    pub fn minimize(&self, tol: f64, max_iter: usize) -> Result<OracleOutput> {
        let quadratic = self.phi.is_quadratic();
        let mut u = self.zeros();
        let gradient_check = self.check_gradient(&u)?;
        let mut g = self.gradient(&u)?;
        let mut d: Controls = g.iter().map(|m| -m).collect();
        let mut gg = self.inner(&g, &g);
        let mut history = Vec::new();
        let mut iterations = 0;
        while gg.sqrt() > tol {
            if iterations == max_iter {
                return Err(MfcError::NonConvergence {
                    iterations,
                    last_residual: gg.sqrt(),
                    history,
                });
            }
            iterations += 1;
            let mut gd = self.inner(&g, &d);
            if gd >= 0.0 {
                d = g.iter().map(|m| -m).collect();
                gd = -gg;
            }
            // Curvature along d from a gradient difference (exact when the
            // objective is quadratic).
            let hd: Controls = {
                let g1 = self.gradient(&lin(&u, 1.0, &d))?;
                g1.iter().zip(&g).map(|(a, b)| a - b).collect()
            };
            let curv = self.inner(&d, &hd);
            let mut step = if curv > 0.0 { -gd / curv } else { 1.0 };
            if !quadratic {
                let f0 = self.objective(&u)?;
                let mut accepted = false;
                for _ in 0..40 {
                    if self.objective(&lin(&u, step, &d))? <= f0 + 1e-4 * step * gd {
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                if !accepted {
                    // Rounding dominates the decrease; stop at the best point.
                    break;
                }
            }
            axpy(&mut u, step, &d);
            let g_new = self.gradient(&u)?;
            let gg_new = self.inner(&g_new, &g_new);
            let y: Controls = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let beta = (self.inner(&g_new, &y) / gg).max(0.0);
            d = d.iter().zip(&g_new).map(|(dm, gm)| dm * beta - gm).collect();
            g = g_new;
            gg = gg_new;
            history.push(gg.sqrt());
        }
        Ok(OracleOutput {
            cost: self.objective(&u)?,
            controls: u,
            gradient_norm: gg.sqrt(),
            gradient_check,
            iterations,
        })
    }
}

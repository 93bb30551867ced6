//! Browser front end: three operations on a TOML problem, each returning JSON.
//!
//! The plain functions are what the page calls through the `wasm` wrappers
//! below; they are ordinary Rust so the tests run natively.

use mfckit::{
    parse_config, simulate, solve_cos, solve_kernel_lq, solve_stochastic, stochastic_value, validate, Block, Field,
    KernelHandle, McReport, NoiseSpec, Policy, RunConfig, TerminalMode,
};
use serde_json::{json, Value};

/// Upper bound on lattice side and plotted samples, to keep the page responsive.
const MAX_SIDE: usize = 120;
const MAX_SHOWN_PATHS: usize = 20;

fn load(text: &str) -> Result<(RunConfig, Field), String> {
    let cfg = parse_config(text, None).map_err(|e| e.to_string())?;
    validate(&cfg.problem).into_result().map_err(|e| e.to_string())?;
    let ens = cfg
        .ensemble
        .as_ref()
        .ok_or("the problem needs an [ensemble] section")?
        .build()
        .map_err(|e| e.to_string())?;
    let x0 = Field::identity(&ens);
    Ok((cfg, x0))
}

/// Every `every`-th index of `0..=last`, always ending at `last`.
fn thin(last: usize, every: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..=last).step_by(every.max(1)).collect();
    if idx.last() != Some(&last) {
        idx.push(last);
    }
    idx
}

/// Riccati and kernel solutions side by side, with the first state and
/// control component of every particle.
pub fn solve_both(text: &str) -> Result<Value, String> {
    let (cfg, x0) = load(text)?;
    let p = &cfg.problem;
    let cos = solve_cos(p, &x0).map_err(|e| e.to_string())?;
    let ker = solve_kernel_lq(p, &x0).map_err(|e| e.to_string())?;
    let steps = p.steps();
    let nodes = thin(steps, steps.div_ceil(400));
    let particles = x0.values().ncols();
    let series = |pick: &dyn Fn(usize) -> f64| nodes.iter().map(|&k| pick(k)).collect::<Vec<_>>();
    let state: Vec<Vec<f64>> = (0..particles).map(|i| series(&|k| cos.state.nodes[k][(0, i)])).collect();
    let control: Vec<Vec<f64>> = (0..particles).map(|i| series(&|k| cos.control.node(k)[(0, i)])).collect();
    let gap = nodes
        .iter()
        .map(|&k| (&cos.state.nodes[k] - &ker.state.nodes[k]).amax())
        .fold(0.0, f64::max);
    Ok(json!({
        "times": nodes.iter().map(|&k| cos.times[k]).collect::<Vec<_>>(),
        "state": state,
        "control": control,
        "cost_riccati": cos.cost,
        "cost_kernel": ker.cost,
        "value_closed_form": cos.value_closed_form,
        "trajectory_gap": gap,
    }))
}

/// The (0, 0) entry of the deviation kernel block on a square lattice of
/// nodes, at most `MAX_SIDE` per side.
pub fn kernel_lattice(text: &str, include_initial_term: bool) -> Result<Value, String> {
    let (cfg, _) = load(text)?;
    let p = &cfg.problem;
    let kh = KernelHandle::new(p, TerminalMode::Lq, include_initial_term).map_err(|e| e.to_string())?;
    let steps = p.steps();
    let nodes = thin(steps, steps.div_ceil(MAX_SIDE));
    let rows: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&a| nodes.iter().map(|&b| kh.kernel_block_nodes(Block::Deviation, a, b)[(0, 0)]).collect())
        .collect();
    Ok(json!({
        "times": nodes.iter().map(|&k| p.grid.t(k)).collect::<Vec<_>>(),
        "values": rows,
    }))
}

/// Monte Carlo under the optimal feedback against the closed-form value,
/// with the first mean component of a few paths.
pub fn monte_carlo(text: &str, paths: usize, seed: u64) -> Result<Value, String> {
    let (cfg, x0) = load(text)?;
    let p = &cfg.problem;
    let eta = cfg.noise.as_ref().ok_or("the problem needs a [noise] section")?.eta.clone();
    let noise = NoiseSpec::new(eta, paths, seed).map_err(|e| e.to_string())?;
    let fb = solve_stochastic(p).map_err(|e| e.to_string())?;
    let ens = simulate(p, &x0, &noise, Policy::Feedback(&fb)).map_err(|e| e.to_string())?;
    let value = stochastic_value(p, &x0, &noise).map_err(|e| e.to_string())?;
    let report = McReport::from_costs(&ens.costs, seed, Some(value));
    let steps = p.steps();
    let nodes = thin(steps, steps.div_ceil(200));
    let shown: Vec<Vec<f64>> = ens
        .means
        .iter()
        .take(MAX_SHOWN_PATHS)
        .map(|m| nodes.iter().map(|&k| m[(0, k)]).collect())
        .collect();
    Ok(json!({
        "report": report,
        "costs": ens.costs,
        "times": nodes.iter().map(|&k| p.grid.t(k)).collect::<Vec<_>>(),
        "mean_paths": shown,
    }))
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    fn out(r: Result<serde_json::Value, String>) -> Result<String, JsError> {
        r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen]
    pub fn solve(text: &str) -> Result<String, JsError> {
        out(super::solve_both(text))
    }

    #[wasm_bindgen]
    pub fn kernel(text: &str, include_initial_term: bool) -> Result<String, JsError> {
        out(super::kernel_lattice(text, include_initial_term))
    }

    #[wasm_bindgen]
    pub fn monte_carlo(text: &str, paths: usize, seed: u64) -> Result<String, JsError> {
        out(super::monte_carlo(text, paths, seed))
    }
}

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mfckit::export::fmt_f64;
use mfckit::stochastic::mean_and_stderr;
use mfckit::verify::{run_check, CheckKind, CheckReport, Fault, VerifyOptions};
use mfckit::{
    brute_force_oracle, for_each_kernel_stochastic_path, parse_config, simulate, solve_cos, solve_kernel_lq,
    solve_nonlinear, solve_stochastic, stochastic_value, validate, Ensemble, Field, FixedPointOptions, KernelHandle,
    McReport, MfcError, NoiseSpec, Policy, ProblemSpec, RunConfig, Solution, TerminalMode,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::RunManifest;
use crate::{ExportArgs, Method, SolveArgs, VerifyArgs};

pub const EXIT_CHECKS_FAILED: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_NO_INPUT: u8 = 66;
pub const EXIT_IO: u8 = 74;

const DEFAULT_PATHS: usize = 1000;
const DEFAULT_VERIFY_SEED: u64 = 20240;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    NoInput(String),
    /// Malformed or inadmissible problem data.
    Invalid { error: MfcError, details: Value },
    Solver(MfcError),
    Io(String),
    ChecksFailed(usize),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::NoInput(_) => EXIT_NO_INPUT,
            Failure::Invalid { .. } => EXIT_INVALID,
            Failure::Solver(_) => EXIT_SOLVER,
            Failure::Io(_) => EXIT_IO,
            Failure::ChecksFailed(_) => EXIT_CHECKS_FAILED,
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::NoInput(m) | Failure::Io(m) => m.clone(),
            Failure::Invalid { error, .. } => error.to_string(),
            Failure::Solver(e) => e.to_string(),
            Failure::ChecksFailed(n) => format!("{n} check(s) failed"),
        }
    }
}

/// Sort library errors by who is at fault.
fn classify(e: MfcError) -> Failure {
    match e {
        MfcError::Schema { .. } | MfcError::Dimension { .. } | MfcError::Validation(_) => Failure::Invalid {
            error: e,
            details: Value::Null,
        },
        MfcError::InvalidArgument(m) => Failure::Usage(m),
        MfcError::Io(e) => Failure::Io(e.to_string()),
        MfcError::Csv(e) => Failure::Io(e.to_string()),
        MfcError::Json(e) => Failure::Io(e.to_string()),
        other => Failure::Solver(other),
    }
}

fn error_kind(e: &MfcError) -> &'static str {
    match e {
        MfcError::Schema { .. } => "schema",
        MfcError::Dimension { .. } => "dimension",
        MfcError::Validation(_) => "validation",
        MfcError::BlowUp { .. } => "blow-up",
        MfcError::Dynamics(_) => "dynamics",
        MfcError::Callback { .. } => "callback",
        MfcError::NonConvergence { .. } => "non-convergence",
        MfcError::NotAdapted(_) => "not-adapted",
        MfcError::InvalidArgument(_) => "invalid-argument",
        MfcError::Io(_) | MfcError::Csv(_) | MfcError::Json(_) => "io",
    }
}

fn error_details(e: &MfcError) -> Value {
    match e {
        MfcError::NonConvergence {
            iterations,
            last_residual,
            history,
        } => json!({ "iterations": iterations, "last_residual": last_residual, "history": history }),
        MfcError::BlowUp { what, node } => json!({ "what": what, "node": node }),
        MfcError::Callback { particle, .. } => json!({ "particle": particle }),
        MfcError::Schema { path, .. } | MfcError::Dimension { path, .. } => json!({ "path": path }),
        _ => Value::Null,
    }
}

/// Writes `diagnostics.json` for data and solver failures; other failures
/// only go to standard error.
pub fn write_diagnostics(manifest: &RunManifest, failure: &Failure) {
    let (error, details) = match failure {
        Failure::Invalid { error, details } => {
            let d = if details.is_null() { error_details(error) } else { details.clone() };
            (error, d)
        }
        Failure::Solver(error) => (error, error_details(error)),
        _ => return,
    };
    let body = json!({
        "manifest": manifest,
        "exit_code": failure.code(),
        "error_kind": error_kind(error),
        "message": error.to_string(),
        "details": details,
    });
    if let Err(e) = write_json(Path::new(&manifest.output_dir), "diagnostics.json", &body) {
        log::error!("could not write diagnostics: {}", e.message());
    }
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::NoInput(format!("cannot read {}: {e}", path.display())))
}

fn load(path: &Path, grid_k: Option<usize>) -> Result<RunConfig, Failure> {
    let text = read_input(path)?;
    let cfg = parse_config(&text, grid_k).map_err(classify)?;
    let report = validate(&cfg.problem);
    if !report.ok {
        let details = serde_json::to_value(&report).unwrap_or(Value::Null);
        return Err(Failure::Invalid {
            error: report.into_result().unwrap_err(),
            details,
        });
    }
    Ok(cfg)
}

fn initial_field(cfg: &RunConfig) -> Result<(Arc<Ensemble>, Field), Failure> {
    let spec = cfg.ensemble.as_ref().ok_or_else(|| Failure::Invalid {
        error: MfcError::Schema {
            path: "ensemble".into(),
            message: "an [ensemble] section is required to solve".into(),
        },
        details: Value::Null,
    })?;
    let ens = spec.build().map_err(classify)?;
    let x0 = Field::identity(&ens);
    Ok((ens, x0))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf, Failure> {
    create_dir(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn write_csv(dir: &Path, name: &str, f: impl FnOnce(BufWriter<fs::File>) -> mfckit::Result<()>) -> Result<PathBuf, Failure> {
    create_dir(dir)?;
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|e| Failure::Io(format!("cannot create {}: {e}", path.display())))?;
    f(BufWriter::new(file)).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn with_manifest(manifest: &RunManifest, body: Value) -> Value {
    let mut out = serde_json::Map::new();
    out.insert("manifest".into(), serde_json::to_value(manifest).expect("manifest serializes"));
    if let Value::Object(fields) = body {
        out.extend(fields);
    }
    Value::Object(out)
}

fn noise_for(cfg: &RunConfig, args: &SolveArgs, manifest: &mut RunManifest) -> Result<NoiseSpec, Failure> {
    let nc = cfg.noise.as_ref().ok_or_else(|| Failure::Invalid {
        error: MfcError::Schema {
            path: "noise".into(),
            message: format!("method {} needs a [noise] section", args.method.name()),
        },
        details: Value::Null,
    })?;
    let paths = args.paths.or(nc.paths).unwrap_or(DEFAULT_PATHS);
    let seed = args.common.seed.or(nc.seed).unwrap_or(0);
    manifest.seed = Some(seed);
    manifest.paths = Some(paths);
    NoiseSpec::new(nc.eta.clone(), paths, seed).map_err(classify)
}

/// Largest divisor of `steps` not above 200.
fn default_coarse(steps: usize) -> usize {
    (1..=steps.min(200)).rev().find(|c| steps % c == 0).unwrap_or(1)
}

pub fn solve(args: &SolveArgs, manifest: &mut RunManifest) -> Result<(), Failure> {
    let cfg = load(&args.file, args.common.grid_k)?;
    let (_, x0) = initial_field(&cfg)?;
    let p = &cfg.problem;
    let out = &args.common.out;
    match args.method {
        Method::Stochastic => return solve_stochastic_paths(&cfg, &x0, args, manifest),
        Method::KernelStochastic => return solve_kernel_paths(&cfg, &x0, args, manifest),
        _ => {}
    }
    let phi = cfg.phi.build().map_err(classify)?;
    let sol: Solution = match args.method {
        Method::Cos => solve_cos(p, &x0),
        Method::Kernel => solve_kernel_lq(p, &x0),
        Method::Nonlinear => {
            let mut opts = FixedPointOptions::default();
            if let Some(t) = args.common.tol {
                opts.tol = t;
            }
            solve_nonlinear(p, &x0, &phi, opts)
        }
        Method::Oracle => {
            let coarse = args.coarse_k.unwrap_or_else(|| default_coarse(p.steps()));
            brute_force_oracle(p, &x0, Some(&phi), coarse)
        }
        Method::Stochastic | Method::KernelStochastic => unreachable!(),
    }
    .map_err(classify)?;
    let csv = write_csv(out, "trajectories.csv", |w| sol.write_csv(w))?;
    let json = write_json(out, "summary.json", &with_manifest(manifest, sol.summary()))?;
    log::info!("wrote {} and {}", csv.display(), json.display());
    eprintln!("{}: cost {:.12e}", sol.method.as_str(), sol.cost);
    Ok(())
}

fn solve_stochastic_paths(cfg: &RunConfig, x0: &Field, args: &SolveArgs, manifest: &mut RunManifest) -> Result<(), Failure> {
    let p = &cfg.problem;
    let noise = noise_for(cfg, args, manifest)?;
    let fb = solve_stochastic(p).map_err(classify)?;
    let paths = simulate(p, x0, &noise, Policy::Feedback(&fb)).map_err(classify)?;
    let value = stochastic_value(p, x0, &noise).map_err(classify)?;
    let report = McReport::from_costs(&paths.costs, noise.seed, Some(value));
    let out = &args.common.out;
    write_csv(out, "paths.csv", |w| paths.write_csv(w))?;
    let body = with_manifest(manifest, serde_json::to_value(&report).expect("report serializes"));
    write_json(out, "summary.json", &body)?;
    eprintln!(
        "stochastic: MC cost {:.6e} ± {:.2e} over {} paths, closed form {:.6e}",
        report.mean, report.stderr, report.n_paths, value
    );
    Ok(())
}

fn solve_kernel_paths(cfg: &RunConfig, x0: &Field, args: &SolveArgs, manifest: &mut RunManifest) -> Result<(), Failure> {
    let p = &cfg.problem;
    let noise = noise_for(cfg, args, manifest)?;
    let out = &args.common.out;
    let n = p.dims.n;
    let d = p.dims.d;
    let mut costs = Vec::with_capacity(noise.n_paths);
    write_csv(out, "paths.csv", |file| {
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<String> = vec!["path_id".into(), "node_time".into(), "particle_id".into()];
        header.extend((0..n).map(|i| format!("x_{i}")));
        header.extend((0..d).map(|i| format!("v_{i}")));
        w.write_record(&header)?;
        for_each_kernel_stochastic_path(p, x0, &noise, |path, sol| {
            costs.push(sol.cost);
            for (k, t) in sol.times.iter().enumerate() {
                let x = &sol.state.nodes[k];
                let v = sol.control.node(k);
                for i in 0..x.ncols() {
                    let mut row = vec![path.to_string(), fmt_f64(*t), i.to_string()];
                    row.extend(x.column(i).iter().map(|a| fmt_f64(*a)));
                    row.extend(v.column(i).iter().map(|a| fmt_f64(*a)));
                    w.write_record(&row)?;
                }
            }
            Ok(())
        })?;
        w.flush()?;
        Ok(())
    })?;
    let (mean, stderr) = mean_and_stderr(&costs);
    let value = stochastic_value(p, x0, &noise).map_err(classify)?;
    let body = json!({
        "method": "kernel-stochastic",
        "n_paths": noise.n_paths,
        "seed": noise.seed,
        "mean_cost": mean,
        "stderr": stderr,
        "value_closed_form": value,
        "path_costs": costs,
    });
    write_json(out, "summary.json", &with_manifest(manifest, body))?;
    eprintln!("kernel-stochastic: mean path cost {mean:.6e} ± {stderr:.2e}, closed form {value:.6e}");
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    manifest: &'a RunManifest,
    passed: bool,
    checks: &'a [CheckReport],
}

pub fn verify(args: &VerifyArgs, manifest: &mut RunManifest) -> Result<(), Failure> {
    let mut opts = VerifyOptions {
        seed: args.common.seed.unwrap_or(DEFAULT_VERIFY_SEED),
        fault: args.inject_fault.map(|_| Fault::FlipGammaSign),
        tolerance: args.common.tol,
        ..VerifyOptions::default()
    };
    if let Some(t) = args.trials {
        opts.trials = t;
    }
    if let Some(k) = args.common.grid_k {
        opts.steps = k;
    }
    manifest.seed = Some(opts.seed);
    let given: Option<(ProblemSpec, Field)> = match &args.file {
        Some(path) => {
            let cfg = load(path, args.common.grid_k)?;
            let (_, x0) = initial_field(&cfg)?;
            Some((cfg.problem, x0))
        }
        None => None,
    };
    let kinds: Vec<CheckKind> = if args.check.is_empty() {
        CheckKind::ALL.to_vec()
    } else {
        args.check.iter().map(|s| s.parse().map_err(classify)).collect::<Result<_, _>>()?
    };
    let mut reports = Vec::new();
    for kind in kinds {
        let r = run_check(kind, &opts, given.as_ref().map(|(p, x)| (p, x))).map_err(classify)?;
        eprintln!(
            "{:<24} {}  worst {:.3e}  tol {:.1e}  trials {}",
            r.check_name, r.status, r.worst_residual, r.tolerance, r.trials
        );
        reports.push(r);
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    let report = VerifyReport {
        manifest,
        passed: failed == 0,
        checks: &reports,
    };
    write_json(&args.common.out, "verify.json", &report)?;
    if failed > 0 {
        return Err(Failure::ChecksFailed(failed));
    }
    Ok(())
}

pub fn export_kernel(args: &ExportArgs, manifest: &mut RunManifest) -> Result<(), Failure> {
    if args.stride == 0 {
        return Err(Failure::Usage("--stride must be positive".into()));
    }
    let cfg = load(&args.file, args.common.grid_k)?;
    let kh = KernelHandle::new(&cfg.problem, TerminalMode::Lq, args.initial_term).map_err(classify)?;
    let out = &args.common.out;
    write_csv(out, "kernel.csv", |w| kh.write_csv(args.stride, w))?;
    let steps = cfg.problem.steps();
    let side = steps.div_ceil(args.stride) + usize::from(steps % args.stride == 0);
    let body = json!({
        "stride": args.stride,
        "include_initial_term": args.initial_term,
        "lattice_side": side,
        "n": cfg.problem.dims.n,
    });
    write_json(out, "summary.json", &with_manifest(manifest, body))?;
    eprintln!("kernel: {side}x{side} lattice written");
    Ok(())
}

use std::fmt::Write as _;
use std::time::Instant;

use conquer::inference::{
    bootstrap_fit, mb_norm_ci, normal_ci, percentile_ci, pivotal_ci, CiMethod, ConfidenceIntervals,
};
use conquer::model::load_csv_path;
use conquer::onestep::{one_step_fit, OneStepConfig, OneStepResult};
use conquer::simulate::{generate_dataset, true_coefficients, ExperimentSpec, Model, Noise};
use conquer::{fit_conquer, ConquerError, Dataset, FitConfig, FitResult};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{BenchArgs, BootstrapArgs, DataArgs, FitArgs, OneStepArgs, RefineArgs, SimulateArgs, SolverArgs};

/// Command output, either a JSON document or raw text (CSV).
pub enum Output {
    Json(Value),
    Text(String),
}

pub type CmdResult = Result<Output, ConquerError>;

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("output types serialize")
}

fn fit_config(args: &SolverArgs) -> Result<FitConfig, ConquerError> {
    let cfg = FitConfig {
        tau: args.tau,
        kernel: args.kernel,
        bandwidth: args.h,
        tol: args.tol,
        max_iter: args.max_iter,
        standardize: !args.no_standardize,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn one_step_config(solver: &SolverArgs, refine: &RefineArgs) -> Result<OneStepConfig, ConquerError> {
    let cfg = OneStepConfig {
        pilot: fit_config(solver)?,
        order: refine.order,
        refinement: refine.b,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load(args: &DataArgs) -> Result<Dataset, ConquerError> {
    load_csv_path(&args.data, &args.y_col)
}

/// Resolved configuration echoed with every result.
fn echo(data_args: &DataArgs, data: &Dataset, cfg: &FitConfig, h: f64) -> Value {
    json!({
        "data": data_args.data.display().to_string(),
        "y_col": data_args.y_col,
        "n": data.n(),
        "p": data.p(),
        "tau": cfg.tau,
        "kernel": cfg.kernel,
        "h": h,
        "h_rule": cfg.bandwidth,
        "tol": cfg.tol,
        "max_iter": cfg.max_iter,
        "standardize": cfg.standardize,
    })
}

fn coefficients(names: &[String], beta: &ndarray::Array1<f64>) -> Value {
    Value::Array(
        names
            .iter()
            .zip(beta.iter())
            .map(|(name, b)| json!({ "name": name, "estimate": b }))
            .collect(),
    )
}

fn fit_value(fit: &FitResult, names: &[String]) -> Value {
    let mut v = to_value(fit);
    v["coefficients"] = coefficients(names, &fit.beta);
    v
}

fn one_step_value(res: &OneStepResult, names: &[String]) -> Value {
    json!({
        "beta": res.beta.to_vec(),
        "coefficients": coefficients(names, &res.beta),
        "order": res.order,
        "b": res.b_used,
        "solve": res.solve,
        "solve_path": res.solve.to_string(),
        "residual_norm": res.residual_norm,
        "score_norm": res.score_norm,
    })
}

pub fn fit(args: &FitArgs) -> CmdResult {
    if args.one_step {
        let cfg = one_step_config(&args.solver, &args.refine)?;
        let data = load(&args.data)?;
        let res = one_step_fit(&data, &cfg)?;
        let mut config = echo(&args.data, &data, &cfg.pilot, res.pilot.h_used);
        config["order"] = json!(cfg.order);
        config["b"] = json!(res.b_used);
        config["b_rule"] = to_value(&cfg.refinement);
        return Ok(Output::Json(json!({
            "command": "fit",
            "config": config,
            "result": fit_value(&res.pilot, data.names()),
            "one_step": one_step_value(&res, data.names()),
        })));
    }
    let cfg = fit_config(&args.solver)?;
    let data = load(&args.data)?;
    let res = fit_conquer(&data, &cfg, None)?;
    Ok(Output::Json(json!({
        "command": "fit",
        "config": echo(&args.data, &data, &cfg, res.h_used),
        "result": fit_value(&res, data.names()),
    })))
}

pub fn onestep(args: &OneStepArgs) -> CmdResult {
    let cfg = one_step_config(&args.solver, &args.refine)?;
    let data = load(&args.data)?;
    let res = one_step_fit(&data, &cfg)?;
    let mut config = echo(&args.data, &data, &cfg.pilot, res.pilot.h_used);
    config["order"] = json!(cfg.order);
    config["b"] = json!(res.b_used);
    config["b_rule"] = to_value(&cfg.refinement);
    Ok(Output::Json(json!({
        "command": "onestep",
        "config": config,
        "pilot": fit_value(&res.pilot, data.names()),
        "result": one_step_value(&res, data.names()),
    })))
}

pub fn bootstrap(args: &BootstrapArgs, threads: Option<usize>) -> CmdResult {
    let cfg = fit_config(&args.solver)?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(ConquerError::Domain(format!("alpha must lie in (0, 1), got {}", args.alpha)));
    }
    if args.method.is_empty() {
        return Err(ConquerError::Domain("at least one interval method is required".into()));
    }
    let data = load(&args.data)?;
    let res = bootstrap_fit(&data, &cfg, args.reps, args.seed)?;
    let mut intervals: Vec<ConfidenceIntervals> = Vec::new();
    for m in &args.method {
        let ci = match m {
            CiMethod::Percentile => percentile_ci(&res, args.alpha)?,
            CiMethod::Pivotal => pivotal_ci(&res, args.alpha)?,
            CiMethod::BootstrapNormal => mb_norm_ci(&res, args.alpha)?,
            CiMethod::Normal => normal_ci(&data, res.base.beta.view(), cfg.tau, cfg.kernel, res.base.h_used, args.alpha)?,
        };
        intervals.push(ci);
    }
    let mut config = echo(&args.data, &data, &cfg, res.base.h_used);
    config["B"] = json!(args.reps);
    config["seed"] = json!(args.seed);
    config["alpha"] = json!(args.alpha);
    config["methods"] = json!(args.method.iter().map(|m| m.name()).collect::<Vec<_>>());
    config["threads"] = json!(threads);
    Ok(Output::Json(json!({
        "command": "bootstrap",
        "config": config,
        "estimate": fit_value(&res.base, data.names()),
        "usable_draws": res.usable(),
        "failed_draws": res.failed,
        "unreliable": res.unreliable(),
        "intervals": intervals,
    })))
}

pub fn simulate(args: &SimulateArgs) -> CmdResult {
    let spec = ExperimentSpec::from_path(&args.spec)?;
    let mut report = conquer::simulate::run_experiment(&spec)?;
    if args.no_timing {
        report.strip_timing();
    }
    if let Some(path) = &args.csv {
        let f = std::fs::File::create(path)?;
        report.write_tidy_csv(std::io::BufWriter::new(f))?;
    }
    let mut v = to_value(&report);
    v["command"] = json!("simulate");
    v["resolved_methods"] = to_value(&spec.resolved_methods());
    Ok(Output::Json(v))
}

pub fn bench(args: &BenchArgs) -> CmdResult {
    if args.sizes.is_empty() {
        return Err(ConquerError::Domain("at least one sample size is required".into()));
    }
    let noise = Noise::StudentT { df: 2.0 };
    let mut out = String::from("n,p,h,seconds,l2_error,iterations,converged\n");
    for (k, &n) in args.sizes.iter().enumerate() {
        let p = ((n as f64).sqrt().floor() as usize).max(2);
        let data = generate_dataset(Model::Homogeneous, n, p, args.tau, noise, args.seed.wrapping_add(k as u64))?;
        let cfg = FitConfig::new(args.tau).kernel(args.kernel);
        cfg.validate()?;
        let start = Instant::now();
        let fit = fit_conquer(&data, &cfg, None)?;
        let secs = start.elapsed().as_secs_f64();
        let truth = true_coefficients(Model::Homogeneous, p, args.tau, noise);
        let err = (&fit.beta - &truth).mapv(|v| v * v).sum().sqrt();
        writeln!(
            out,
            "{n},{p},{},{secs:.6},{err},{},{}",
            fit.h_used, fit.iterations, fit.converged
        )
        .expect("writing to a String");
    }
    Ok(Output::Text(out))
}

/// Exit status for a library error: 1 domain/config, 2 data, 3 numerical.
pub fn exit_code(e: &ConquerError) -> i32 {
    match e {
        ConquerError::Domain(_) | ConquerError::Config(_) => 1,
        ConquerError::DimensionMismatch { .. }
        | ConquerError::DegenerateDesign { .. }
        | ConquerError::InvalidData(_)
        | ConquerError::Parse { .. }
        | ConquerError::Io(_) => 2,
        ConquerError::NumericalDivergence { .. }
        | ConquerError::SingularHessian { .. }
        | ConquerError::NonPositiveDefiniteHessian
        | ConquerError::UnreliableInference { .. }
        | ConquerError::BudgetExceeded { .. }
        | ConquerError::AllSubsetsSingular
        | ConquerError::Quadrature { .. } => 3,
    }
}

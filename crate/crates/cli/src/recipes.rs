//! Named experiments. Each recipe reads a resolved [`RunConfig`], writes its
//! CSV tables to memory and returns the checks it asserts.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use varfric::diagnose::{diagnostic_sweep, DiagnosticRow};
use varfric::gendiff1d::{
    aligned_grid, averaging_check, compute_scale_speed, exit_stats_analytic, glued_exit_probability, simulate_gendiff,
    write_exit_csv, ExitRow, StoppingRule,
};
use varfric::homogenize::{
    effective_coefficients, invariant_density_residual, mc_effective_diffusivity, solve_cell, TorusGrid,
};
use varfric::integrate::{
    simulate_classical_limit, simulate_langevin_mollified, simulate_langevin_white, simulate_smooth_limit,
    simulate_stratonovich_limit,
};
use varfric::model::{validate_model, DriftField, FrictionField, ModelSpec};
use varfric::noise::{build_kernel, mollify, sample_wiener};
use varfric::stats::{
    map_streams, mean_se, pair_sup_distance, summarize_distances, weak_error, Ensemble, Estimate, Functional,
    SupDistance, SweepPlan, SweepResult, SweptParameter,
};

use crate::config::{Kind, RunConfig, Value};

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("{0}")]
    Simulation(String),
}

fn sim<E: std::fmt::Display>(e: E) -> RecipeError {
    RecipeError::Simulation(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

/// What a recipe produces before anything touches the disk.
#[derive(Clone, Debug)]
pub struct RecipeOutput {
    /// (file name, contents), in a fixed order
    pub files: Vec<(String, String)>,
    pub results: serde_json::Value,
    pub checks: Vec<Check>,
}

#[derive(Clone, Copy, Debug)]
pub enum Rule {
    Any,
    Positive,
    NonNegative,
    /// integer at least 1
    Count,
    /// non-empty, positive, strictly decreasing
    Decreasing,
    /// non-empty, positive integers, strictly increasing
    IncreasingInts,
}

#[derive(Clone, Copy, Debug)]
pub struct Param {
    pub key: &'static str,
    pub kind: Kind,
    pub default: Option<&'static str>,
    pub rule: Rule,
}

const fn p(key: &'static str, kind: Kind, default: &'static str, rule: Rule) -> Param {
    Param { key, kind, default: Some(default), rule }
}

impl Param {
    pub fn check(&self, v: &Value) -> Result<(), String> {
        let num = match v {
            Value::Float(x) => Some(*x),
            Value::Int(n) => Some(*n as f64),
            _ => None,
        };
        match (self.rule, v) {
            (Rule::Any, _) => Ok(()),
            (Rule::Positive, _) if num.is_some_and(|x| x > 0.0) => Ok(()),
            (Rule::Positive, _) => Err("must be positive".into()),
            (Rule::NonNegative, _) if num.is_some_and(|x| x >= 0.0) => Ok(()),
            (Rule::NonNegative, _) => Err("must be non-negative".into()),
            (Rule::Count, Value::Int(n)) if *n >= 1 => Ok(()),
            (Rule::Count, _) => Err("must be at least 1".into()),
            (Rule::Decreasing, Value::List(l)) => {
                if l.iter().all(|x| *x > 0.0) && l.windows(2).all(|w| w[1] < w[0]) {
                    Ok(())
                } else {
                    Err("values must be positive and strictly decreasing".into())
                }
            }
            (Rule::IncreasingInts, Value::List(l)) => {
                if l.iter().all(|x| *x >= 1.0 && x.fract() == 0.0) && l.windows(2).all(|w| w[1] > w[0]) {
                    Ok(())
                } else {
                    Err("values must be positive integers in increasing order".into())
                }
            }
            _ => Err("wrong value kind".into()),
        }
    }
}

type Validate = fn(&RunConfig) -> Result<(), (&'static str, String)>;
type Run = fn(&RunConfig) -> Result<RecipeOutput, RecipeError>;

pub struct Recipe {
    pub name: &'static str,
    pub aliases: &'static [&'static str],
    pub summary: &'static str,
    /// drives a trajectory integrator, so step friction is rejected
    pub integrator: bool,
    pub params: &'static [Param],
    pub validate: Validate,
    pub run: Run,
}

impl Recipe {
    pub fn param(&self, key: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.key == key)
    }
}

pub fn find(name: &str) -> Option<&'static Recipe> {
    REGISTRY.iter().find(|r| r.name == name || r.aliases.contains(&name))
}

use Kind::{Field, Float, Int, List, Sampler};
use Rule::{Any, Count, Decreasing, IncreasingInts, NonNegative, Positive};

pub static REGISTRY: &[Recipe] = &[
    Recipe {
        name: "sk-constant",
        aliases: &[],
        summary: "constant friction: terminal mean and variance of the inertial system against the first-order limit",
        integrator: true,
        params: &[
            p("lambda", Field, "constant(2)", Any),
            p("b", Float, "0", Any),
            p("sigma", Float, "1", Positive),
            p("mu", Float, "1e-4", Positive),
            p("h", Float, "1e-3", Positive),
            p("t_end", Float, "1", Positive),
            p("q0", Float, "0", Any),
            p("n_paths", Int, "10000", Count),
            p("z_max", Float, "4", Positive),
        ],
        validate: validate_sk_constant,
        run: run_sk_constant,
    },
    Recipe {
        name: "sk-fails-variable",
        aliases: &["gamma-gap"],
        summary: "gamma-gap of the decomposition for clipped-linear friction, with a constant-friction control",
        integrator: true,
        params: &[
            p("lambda", Field, "clipped_linear(0.7)", Any),
            p("control", Field, "constant(2)", Any),
            p("b", Float, "0", Any),
            p("sigma", Float, "1", Positive),
            p("p0", Float, "1", Any),
            p("t_end", Float, "1", Positive),
            p("mu_list", List, "1e-2, 1e-3, 1e-4", Decreasing),
            p("n_paths", Int, "4000", Count),
            p("steps_per_relaxation", Float, "8", Positive),
            p("floor_ratio", Float, "0.5", Positive),
            p("control_drop", Float, "10", Positive),
        ],
        validate: validate_diagnostic,
        run: run_gamma_gap,
    },
    Recipe {
        name: "alpha-beta-residuals",
        aliases: &[],
        summary: "alpha and beta residuals of the decomposition under a constant drift",
        integrator: true,
        params: &[
            p("lambda", Field, "clipped_linear(0.7)", Any),
            p("b", Float, "0.5", Any),
            p("sigma", Float, "1", Positive),
            p("p0", Float, "1", Any),
            p("t_end", Float, "1", Positive),
            p("mu_list", List, "1e-2, 1e-3, 1e-4", Decreasing),
            p("n_paths", Int, "4000", Count),
            p("steps_per_relaxation", Float, "8", Positive),
        ],
        validate: validate_diagnostic,
        run: run_alpha_beta,
    },
    Recipe {
        name: "regularized-limit-mu",
        aliases: &[],
        summary: "coupled sup-distance between the mollified inertial system and the smooth limit as mu decreases",
        integrator: true,
        params: &[
            p("lambda", Field, "sine(2, 0.5, 1)", Any),
            p("b", Float, "0", Any),
            p("sigma", Float, "1", Positive),
            p("t_end", Float, "1", Positive),
            p("delta", Float, "0.05", Positive),
            p("mu_list", List, "1e-2, 3e-3, 1e-3", Decreasing),
            p("dt", Float, "1.25e-4", Positive),
            p("h", Float, "2.5e-4", Positive),
            p("kernel_nodes", Int, "1024", Count),
            p("kappa", Float, "0.05", Positive),
            p("n_paths", Int, "1000", Count),
        ],
        validate: validate_regularized,
        run: run_regularized_mu,
    },
    Recipe {
        name: "regularized-limit-delta",
        aliases: &[],
        summary: "coupled sup-distance and terminal-mean gap between the smooth limit and the Stratonovich limit as delta decreases",
        integrator: true,
        params: &[
            p("lambda", Field, "sine(2, 0.5, 1)", Any),
            p("b", Float, "0", Any),
            p("sigma", Float, "1", Positive),
            p("t_end", Float, "1", Positive),
            p("delta_list", List, "0.1, 0.05, 0.025", Decreasing),
            p("dt", Float, "1.25e-4", Positive),
            p("h", Float, "2.5e-4", Positive),
            p("kernel_nodes", Int, "1024", Count),
            p("kappa", Float, "0.05", Positive),
            p("n_paths", Int, "1000", Count),
            p("z_max", Float, "4", Positive),
        ],
        validate: validate_regularized,
        run: run_regularized_delta,
    },
    Recipe {
        name: "ito-vs-strat",
        aliases: &[],
        summary: "terminal-mean shift between the Stratonovich and uncorrected limits against the correction integral",
        integrator: true,
        params: &[
            p("lambda", Field, "sine(2, 0.5, 1)", Any),
            p("b", Float, "0", Any),
            p("sigma", Float, "1", Positive),
            p("t_end", Float, "1", Positive),
            p("q0", Float, "0", Any),
            p("h", Float, "1e-3", Positive),
            p("n_paths", Int, "20000", Count),
            p("z_max", Float, "4", Positive),
        ],
        validate: validate_one_dim,
        run: run_ito_vs_strat,
    },
    Recipe {
        name: "gendiff-exit",
        aliases: &[],
        summary: "exit statistics of the generalized diffusion chain for unit and step friction",
        integrator: false,
        params: &[
            p("step", Field, "step(1, 2)", Any),
            p("lo", Float, "-1", Any),
            p("hi", Float, "1", Any),
            p("x0", Float, "0", Any),
            p("grid_n", Int, "200", Count),
            p("n_chains", Int, "100000", Count),
            p("z_max", Float, "4", Positive),
            p("time_rel_tol", Float, "0.02", Positive),
        ],
        validate: validate_exit,
        run: run_gendiff_exit,
    },
    Recipe {
        name: "glued-step",
        aliases: &[],
        summary: "tanh-ramp exit probabilities converging to the glued step value",
        integrator: false,
        params: &[
            p("left", Float, "1", Positive),
            p("right", Float, "2", Positive),
            p("widths", List, "0.2, 0.05, 0.0125", Decreasing),
            p("lo", Float, "-1", Any),
            p("hi", Float, "1", Any),
            p("x0", Float, "0", Any),
            p("grid_n", Int, "4000", Count),
            p("final_gap", Float, "0.01", Positive),
        ],
        validate: validate_glued,
        run: run_glued_step,
    },
    Recipe {
        name: "averaging-1d",
        aliases: &[],
        summary: "terminal variance of the limit equation with rapidly oscillating friction",
        integrator: true,
        params: &[
            p("lambda", Field, "sinusoidal(2, 1, 1)", Any),
            p("eps_list", List, "0.1, 0.03, 0.01", Decreasing),
            p("t_end", Float, "1", Positive),
            p("h", Float, "1e-3", Positive),
            p("sampler", Sampler, "scale", Any),
            p("n_paths", Int, "10000", Count),
            p("rel_tol", Float, "0.05", Positive),
        ],
        validate: validate_periodic_1d,
        run: run_averaging,
    },
    Recipe {
        name: "homog-1d-sine",
        aliases: &[],
        summary: "cell problem in one dimension against the closed form 1/mean(lambda)^2",
        integrator: false,
        params: &[
            p("lambda", Field, "sinusoidal(2, 1, 1)", Any),
            p("grid_n", Int, "128", Count),
            p("tol", Float, "1e-6", Positive),
        ],
        validate: validate_periodic_1d,
        run: run_homog_1d,
    },
    Recipe {
        name: "homog-2d-separable",
        aliases: &[],
        summary: "cell problem on the two-dimensional torus for a field depending on y1 only",
        integrator: false,
        params: &[
            p("lambda", Field, "sinusoidal(2, 1, 1, 0)", Any),
            p("grid_n", Int, "128", Count),
            p("tol_11", Float, "1e-6", Positive),
            p("tol_22", Float, "1e-5", Positive),
            p("tol_12", Float, "1e-8", Positive),
        ],
        validate: validate_separable,
        run: run_homog_2d,
    },
    Recipe {
        name: "invariant-density",
        aliases: &[],
        summary: "discrete adjoint residual of lambda under grid refinement",
        integrator: false,
        params: &[
            p("lambda", Field, "sinusoidal(2, 1, 1)", Any),
            p("lambda2", Field, "sinusoidal(2, 1, 1, 1)", Any),
            p("n_list", List, "32, 64, 128", IncreasingInts),
            p("ratio", Float, "4", Positive),
            p("ratio_tol", Float, "1", NonNegative),
        ],
        validate: validate_torus_pair,
        run: run_invariant_density,
    },
    Recipe {
        name: "cell-identity-5859",
        aliases: &[],
        summary: "gap between the quadratic-form and simplified effective diffusivities under grid refinement",
        integrator: false,
        params: &[
            p("lambda", Field, "sinusoidal(2, 1, 1)", Any),
            p("lambda2", Field, "trig(3, 0.8, 1, 0.5, 2)", Any),
            p("n_list", List, "32, 64, 128", IncreasingInts),
            p("gap_tol", Float, "1e-6", Positive),
            p("ratio", Float, "4", Positive),
            p("ratio_tol", Float, "1", NonNegative),
        ],
        validate: validate_torus_pair,
        run: run_cell_identity,
    },
    Recipe {
        name: "homog-mc",
        aliases: &[],
        summary: "Monte Carlo effective diffusivity against the cell-problem value",
        integrator: true,
        params: &[
            p("lambda", Field, "sinusoidal(2, 1, 1)", Any),
            p("eps", Float, "1e-2", Positive),
            p("t_end", Float, "1", Positive),
            p("h", Float, "1e-3", Positive),
            p("sampler", Sampler, "scale", Any),
            p("n_paths", Int, "10000", Count),
            p("grid_n", Int, "128", Count),
            p("z_max", Float, "3", Positive),
            p("abs_tol", Float, "0.01", NonNegative),
        ],
        validate: validate_periodic_1d,
        run: run_homog_mc,
    },
];

// ---------------------------------------------------------------- helpers

fn has(cfg: &RunConfig, key: &str) -> bool {
    cfg.params.contains_key(key)
}

/// One-dimensional model from the common keys.
fn spec_of(cfg: &RunConfig, friction: FrictionField) -> ModelSpec {
    let b = if has(cfg, "b") { cfg.float("b") } else { 0.0 };
    let mut s = ModelSpec::new(friction, DriftField::constant(vec![b]));
    for (key, slot) in [("sigma", &mut s.sigma), ("t_end", &mut s.t_end)] {
        if has(cfg, key) {
            *slot = cfg.float(key);
        }
    }
    if has(cfg, "q0") {
        s.q0 = vec![cfg.float("q0")];
    }
    if has(cfg, "p0") {
        s.p0 = vec![cfg.float("p0")];
    }
    s
}

fn check_spec(cfg: &RunConfig, key: &'static str) -> Result<(), (&'static str, String)> {
    let f = cfg.field(key);
    if f.dim() != 1 {
        return Err((key, "this recipe needs a one-dimensional field".into()));
    }
    let r = validate_model(&spec_of(cfg, f));
    if r.is_ok() {
        Ok(())
    } else {
        Err((key, r.violations.join("; ")))
    }
}

fn validate_one_dim(cfg: &RunConfig) -> Result<(), (&'static str, String)> {
    check_spec(cfg, "lambda")
}

fn validate_sk_constant(cfg: &RunConfig) -> Result<(), (&'static str, String)> {
    check_spec(cfg, "lambda")?;
    let f = cfg.field("lambda");
    if f.lower_bound() != f.upper_bound() {
        return Err(("lambda", "the closed-form oracles need constant friction".into()));
    }
    Ok(())
}

fn validate_diagnostic(cfg: &RunConfig) -> Result<(), (&'static str, String)> {
    check_spec(cfg, "lambda")?;
    if has(cfg, "control") {
        check_spec(cfg, "control")?;
    }
    Ok(())
}

fn validate_regularized(cfg: &RunConfig) -> Result<(), (&'static str, String)> {
    check_spec(cfg, "lambda")?;
    let (dt, h) = (cfg.float("dt"), cfg.float("h"));
    let stride = h / dt;
    if (stride - stride.round()).abs() > 1e-9 * stride || (stride.round() as u64) % 2 != 0 {
        return Err(("h", "h must be an even multiple of dt".into()));
    }
    let deltas: Vec<f64> = if has(cfg, "delta") { vec![cfg.float("delta")] } else { cfg.list("delta_list").to_vec() };
    let smallest = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    if h > smallest / 20.0 * (1.0 + 1e-9) {
        return Err(("h", format!("h must not exceed delta/20 = {}", smallest / 20.0)));
    }
    if cfg.count("kernel_nodes") < 512 {
        return Err(("kernel_nodes", "the mollifier table needs at least 512 nodes".into()));
    }
    Ok(())
}

fn validate_exit(cfg: &RunConfig) -> Result<(), (&'static str, String)> {
    let (lo, hi, x0) = (cfg.float("lo"), cfg.float("hi"), cfg.float("x0"));
    if !(lo < x0 && x0 < hi) {
        return Err(("x0", "start must lie strictly inside (lo, hi)".into()));
    }
    if !(lo < 0.0 && hi > 0.0) {
        return Err(("lo", "the interval must contain the jump at 0".into()));
    }
    if !cfg.field("step").is_step() {
        return Err(("step", "expected a step(left, right) field".into()));
    }
    Ok(())
}

fn validate_glued(cfg: &RunConfig) -> Result<(), (&'static str, String)> {
    let (lo, hi, x0) = (cfg.float("lo"), cfg.float("hi"), cfg.float("x0"));
    if !(lo < 0.0 && hi > 0.0) {
        return Err(("lo", "the interval must contain the ramp centre 0".into()));
    }
    if x0 != 0.0 {
        return Err(("x0", "the glued formula is for a start at the jump".into()));
    }
    Ok(())
}

/// Mean of lambda over the unit cell along q1, via its primitive.
fn cell_mean(f: &FrictionField) -> Option<f64> {
    Some(f.primitive_q1(1.0)? - f.primitive_q1(0.0)?)
}

fn periodic(f: &FrictionField) -> bool {
    let pts = [0.1234, 0.5, 0.777];
    f.is_smooth()
        && pts.iter().all(|&x| {
            let mut a = vec![x; f.dim()];
            let mut b = a.clone();
            b[0] += 1.0;
            if f.dim() > 1 {
                a[1] = 0.3;
                b[1] = 1.3;
            }
            (f.eval(&a) - f.eval(&b)).abs() < 1e-12
        })
}

fn validate_periodic_1d(cfg: &RunConfig) -> Result<(), (&'static str, String)> {
    let f = cfg.field("lambda");
    if f.dim() != 1 {
        return Err(("lambda", "this recipe needs a one-dimensional field".into()));
    }
    if !periodic(&f) || cell_mean(&f).is_none() {
        return Err(("lambda", "expected a smooth 1-periodic field with a closed-form primitive".into()));
    }
    Ok(())
}

fn validate_separable(cfg: &RunConfig) -> Result<(), (&'static str, String)> {
    let e = cfg.field_expr("lambda");
    let f = cfg.field("lambda");
    if f.dim() != 2 || e.name != "sinusoidal" || e.args[3] != 0.0 || !periodic(&f) {
        return Err(("lambda", "expected sinusoidal(c0, c1, k, 0) with integer k".into()));
    }
    Ok(())
}

fn validate_torus_pair(cfg: &RunConfig) -> Result<(), (&'static str, String)> {
    for key in ["lambda", "lambda2"] {
        if !periodic(&cfg.field(key)) {
            return Err((key, "expected a smooth field, 1-periodic in every coordinate".into()));
        }
    }
    if cfg.list("n_list").iter().any(|&n| n < 8.0) {
        return Err(("n_list", "grids need at least 8 points per side".into()));
    }
    Ok(())
}

fn sweep(parameter: SweptParameter, values: &[f64], pairing: &str, statistic: &str, cfg: &RunConfig, est: &[(f64, f64)]) -> Result<SweepResult, RecipeError> {
    let plan = SweepPlan {
        parameter,
        values: values.to_vec(),
        pairing: pairing.into(),
        statistic: statistic.into(),
        n_paths: if has(cfg, "n_paths") { cfg.count("n_paths") } else { 0 },
        seed: cfg.seed,
    };
    SweepResult::from_estimates(plan, est.iter().map(|&(value, std_error)| Estimate { value, std_error }).collect()).map_err(sim)
}

fn flag(x: Option<bool>) -> &'static str {
    match x {
        Some(true) => "true",
        Some(false) => "false",
        None => "undefined",
    }
}

fn trend_check(name: &str, s: &SweepResult) -> Check {
    Check::new(
        name,
        s.trend_decreasing == Some(true),
        format!("{} = {:?} +- {:?}", s.plan.statistic, s.statistic, s.std_error),
    )
}

fn table(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s += &r;
        s.push('\n');
    }
    s
}

fn ratios(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[0] / w[1]).collect()
}

// ---------------------------------------------------------------- recipes

fn run_sk_constant(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let mut spec = spec_of(cfg, cfg.field("lambda"));
    spec.mu = cfg.float("mu");
    let (h, seed, n) = (cfg.float("h"), cfg.seed, cfg.count("n_paths"));
    let ens = Ensemble::generate(spec.clone(), seed, n, |k| {
        let path = sample_wiener(1, spec.t_end, h, seed, k).map_err(|e| e.to_string())?;
        simulate_langevin_white(&spec, &path, h).map_err(|e| e.to_string())
    })
    .map_err(sim)?;
    let lam = spec.friction.lower_bound();
    let b = spec.drift.as_constant().map_or(0.0, |c| c[0]);
    let mean_ref = spec.q0[0] + b / lam * spec.t_end;
    let var_ref = spec.t_end * spec.sigma * spec.sigma / (lam * lam);
    let m = weak_error(&ens, Functional::TerminalMean { coord: 0 }, mean_ref);
    let v = weak_error(&ens, Functional::TerminalVariance { coord: 0 }, var_ref);
    let z_max = cfg.float("z_max");
    let csv = table(
        "functional,estimate,std_error,reference,z,n_paths",
        [("terminal_mean", &m), ("terminal_variance", &v)]
            .iter()
            .map(|(name, w)| format!("{name},{},{},{},{},{}", w.estimate, w.std_error, w.reference, w.z, w.n)),
    );
    Ok(RecipeOutput {
        files: vec![("sk_constant.csv".into(), csv)],
        results: json!({ "terminal_mean": m, "terminal_variance": v }),
        checks: vec![
            Check::new("terminal_variance", v.z.abs() <= z_max, format!("z = {:.3}, |z| <= {z_max}", v.z)),
            Check::new("terminal_mean", m.z.abs() <= z_max, format!("z = {:.3}, |z| <= {z_max}", m.z)),
        ],
    })
}

fn diagnostic_rows(cfg: &RunConfig, friction: FrictionField) -> Result<(ModelSpec, Vec<DiagnosticRow>), RecipeError> {
    let spec = spec_of(cfg, friction);
    let rows = diagnostic_sweep(&spec, cfg.list("mu_list"), cfg.count("n_paths"), cfg.seed, cfg.float("steps_per_relaxation"))
        .map_err(sim)?;
    Ok((spec, rows))
}

fn residual_check(rows: &[DiagnosticRow]) -> Check {
    let worst = rows.iter().map(|r| r.max_residual / r.tol_quad).fold(0.0, f64::max);
    Check::new("reconstruction", worst <= 1.0, format!("max residual / tol_quad = {worst:.3e}"))
}

fn run_gamma_gap(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let mus = cfg.list("mu_list");
    let (_, rows) = diagnostic_rows(cfg, cfg.field("lambda"))?;
    let (_, ctrl) = diagnostic_rows(cfg, cfg.field("control"))?;
    let gap = |rs: &[DiagnosticRow]| rs.iter().map(|r| (r.gamma_gap, r.gamma_gap_se)).collect::<Vec<_>>();
    let pairing = "langevin-white/decomposition";
    let main = sweep(SweptParameter::Mu, mus, pairing, "gamma_gap", cfg, &gap(&rows))?;
    let control = sweep(SweptParameter::Mu, mus, pairing, "gamma_gap", cfg, &gap(&ctrl))?;
    let alpha = sweep(SweptParameter::Mu, mus, pairing, "alpha_sq", cfg, &rows.iter().map(|r| (r.alpha_sq, r.alpha_sq_se)).collect::<Vec<_>>())?;

    let mut rows_out = Vec::new();
    for (key, rs, s) in [("lambda", &rows, &main), ("control", &ctrl, &control)] {
        let name = cfg.field_expr(key).to_string();
        for r in rs.iter() {
            rows_out.push(format!(
                "\"{name}\",{},{},{},{},{},{},{},{},{},{}",
                r.mu,
                r.h,
                r.gamma_gap,
                r.gamma_gap_se,
                r.alpha_sq,
                r.alpha_sq_se,
                r.max_residual,
                r.tol_quad,
                r.n_paths,
                flag(s.trend_decreasing)
            ));
        }
    }
    let csv = table("field,mu,h,gamma_gap,std_error,alpha_sq,alpha_sq_se,max_residual,tol_quad,n_paths,trend_decreasing", rows_out);

    let floor = cfg.float("floor_ratio") * rows[0].gamma_gap;
    let floor_ok = rows.iter().skip(1).all(|r| r.gamma_gap >= floor);
    let drop = ctrl[0].gamma_gap / ctrl[ctrl.len() - 1].gamma_gap;
    let need = cfg.float("control_drop");
    let mut checks = vec![
        Check::new("gamma_gap_floor", floor_ok, format!("G = {:?}, floor {floor:.4e}", main.statistic)),
        Check::new("control_drop", mus.len() >= 2 && drop >= need, format!("control G ratio {drop:.3e}, need >= {need}")),
        residual_check(&rows),
        residual_check(&ctrl),
    ];
    checks[3].name = "control_reconstruction".into();
    if cfg.float("p0") != 0.0 {
        checks.push(trend_check("alpha_sq_decreasing", &alpha));
    }
    Ok(RecipeOutput {
        files: vec![("gamma_gap.csv".into(), csv)],
        results: json!({
            "gamma_gap": main.to_json(),
            "control_gamma_gap": control.to_json(),
            "alpha_sq": alpha.to_json(),
            "rows": rows,
            "control_rows": ctrl,
        }),
        checks,
    })
}

fn run_alpha_beta(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let mus = cfg.list("mu_list");
    let (_, rows) = diagnostic_rows(cfg, cfg.field("lambda"))?;
    let pairing = "langevin-white/decomposition";
    let alpha = sweep(SweptParameter::Mu, mus, pairing, "alpha_sq", cfg, &rows.iter().map(|r| (r.alpha_sq, r.alpha_sq_se)).collect::<Vec<_>>())?;
    let beta = sweep(SweptParameter::Mu, mus, pairing, "beta_residual", cfg, &rows.iter().map(|r| (r.beta_residual, r.beta_residual_se)).collect::<Vec<_>>())?;
    let csv = table(
        "mu,h,alpha_sq,alpha_sq_se,beta_residual,beta_residual_se,max_residual,tol_quad,n_paths",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                r.mu, r.h, r.alpha_sq, r.alpha_sq_se, r.beta_residual, r.beta_residual_se, r.max_residual, r.tol_quad, r.n_paths
            )
        }),
    );
    Ok(RecipeOutput {
        files: vec![("alpha_beta.csv".into(), csv)],
        results: json!({ "alpha_sq": alpha.to_json(), "beta_residual": beta.to_json(), "rows": rows }),
        checks: vec![trend_check("alpha_sq_decreasing", &alpha), trend_check("beta_residual_decreasing", &beta), residual_check(&rows)],
    })
}

fn sup_row(x: f64, d: &SupDistance) -> String {
    format!("{x},{},{},{},{},{},{},{}", d.mean, d.std_error, d.median, d.q95, d.kappa, d.p_exceed, d.n)
}

fn run_regularized_mu(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let spec = spec_of(cfg, cfg.field("lambda"));
    let (delta, dt, h, seed) = (cfg.float("delta"), cfg.float("dt"), cfg.float("h"), cfg.seed);
    let mus = cfg.list("mu_list").to_vec();
    let kernel = build_kernel(cfg.count("kernel_nodes")).map_err(sim)?;
    // per stream: one smooth-limit path shared by every mass
    let per_stream = map_streams(cfg.count("n_paths"), |k| -> Result<Vec<f64>, String> {
        let path = sample_wiener(1, spec.t_end + delta, dt, seed, k).map_err(|e| e.to_string())?;
        let w = mollify(&path, &kernel, delta, spec.t_end).map_err(|e| e.to_string())?;
        let smooth = simulate_smooth_limit(&spec, &w, h).map_err(|e| e.to_string())?;
        mus.iter()
            .map(|&mu| {
                let mut s = spec.clone();
                s.mu = mu;
                let a = simulate_langevin_mollified(&s, &w, h).map_err(|e| e.to_string())?;
                pair_sup_distance(&a, &smooth).map_err(|e| e.to_string())
            })
            .collect()
    })
    .map_err(sim)?;
    let kappa = cfg.float("kappa");
    let dists: Vec<SupDistance> = (0..mus.len()).map(|j| summarize_distances(per_stream.iter().map(|d| d[j]).collect(), kappa)).collect();
    let s = sweep(
        SweptParameter::Mu,
        &mus,
        "langevin-mollified/smooth-limit",
        "mean_sup_distance",
        cfg,
        &dists.iter().map(|d| (d.mean, d.std_error)).collect::<Vec<_>>(),
    )?;
    let csv = table("mu,mean,std_error,median,q95,kappa,p_exceed,n_paths", mus.iter().zip(&dists).map(|(m, d)| sup_row(*m, d)));
    Ok(RecipeOutput {
        files: vec![("sup_distance.csv".into(), csv)],
        results: json!({ "sweep": s.to_json(), "distances": dists }),
        checks: vec![trend_check("sup_distance_decreasing", &s)],
    })
}

fn run_regularized_delta(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let spec = spec_of(cfg, cfg.field("lambda"));
    let (dt, h, seed) = (cfg.float("dt"), cfg.float("h"), cfg.seed);
    let deltas = cfg.list("delta_list").to_vec();
    let widest = deltas[0];
    let kernel = build_kernel(cfg.count("kernel_nodes")).map_err(sim)?;
    // per stream and delta: (sup distance, terminal difference)
    let per_stream = map_streams(cfg.count("n_paths"), |k| -> Result<Vec<(f64, f64)>, String> {
        let path = sample_wiener(1, spec.t_end + widest, dt, seed, k).map_err(|e| e.to_string())?;
        let strat = simulate_stratonovich_limit(&spec, &path, dt).map_err(|e| e.to_string())?;
        deltas
            .iter()
            .map(|&delta| {
                let w = mollify(&path, &kernel, delta, spec.t_end).map_err(|e| e.to_string())?;
                let smooth = simulate_smooth_limit(&spec, &w, h).map_err(|e| e.to_string())?;
                let d = pair_sup_distance(&smooth, &strat).map_err(|e| e.to_string())?;
                Ok((d, smooth.terminal()[0] - strat.terminal()[0]))
            })
            .collect()
    })
    .map_err(sim)?;
    let kappa = cfg.float("kappa");
    let mut dists = Vec::new();
    let mut weak = Vec::new();
    for j in 0..deltas.len() {
        dists.push(summarize_distances(per_stream.iter().map(|d| d[j].0).collect(), kappa));
        weak.push(mean_se(&per_stream.iter().map(|d| d[j].1).collect::<Vec<_>>()));
    }
    let pairing = "smooth-limit/stratonovich-limit";
    let sup = sweep(SweptParameter::Delta, &deltas, pairing, "mean_sup_distance", cfg, &dists.iter().map(|d| (d.mean, d.std_error)).collect::<Vec<_>>())?;
    let mut checks = vec![trend_check("sup_distance_decreasing", &sup)];
    let exact = terminal_mean_gap_exact(&spec, &kernel, &deltas);
    let z_max = cfg.float("z_max");
    let mc = sweep(SweptParameter::Delta, &deltas, pairing, "terminal_mean_gap", cfg, &weak.iter().map(|w| (w.0.abs(), w.1)).collect::<Vec<_>>())?;
    let exact_col: Vec<String> = match &exact {
        Some(g) => {
            let abs: Vec<f64> = g.iter().map(|x| x.abs()).collect();
            checks.push(Check::new("terminal_mean_gap_decreasing", abs.windows(2).all(|w| w[1] < w[0]), format!("|E q^delta_T - E q_T| = {abs:?}")));
            let worst = weak.iter().zip(g).map(|(w, x)| (w.0 - x).abs() / w.1).fold(0.0, f64::max);
            checks.push(Check::new("terminal_mean_gap_consistent", worst <= z_max, format!("max |MC - quadrature| / se = {worst:.3}")));
            g.iter().map(|x| x.to_string()).collect()
        }
        None => {
            checks.push(trend_check("terminal_mean_gap_decreasing", &mc));
            vec![String::new(); deltas.len()]
        }
    };
    let csv = table(
        "delta,mean,std_error,median,q95,kappa,p_exceed,n_paths,terminal_mean_gap,terminal_mean_gap_se,terminal_mean_gap_quadrature",
        deltas.iter().zip(&dists).zip(&weak).zip(&exact_col).map(|(((x, d), w), e)| format!("{},{},{},{e}", sup_row(*x, d), w.0, w.1)),
    );
    Ok(RecipeOutput {
        files: vec![("sup_distance.csv".into(), csv)],
        results: json!({ "sup_distance": sup.to_json(), "terminal_mean_gap": mc.to_json(), "terminal_mean_gap_quadrature": exact, "distances": dists }),
        checks,
    })
}

/// E q^delta_T - E q_T without Monte Carlo, for b = 0 in one dimension. Both
/// limits solve through the primitive F of lambda: F(q_T) - F(q0) is sigma W_T
/// and, for the smooth limit, sigma (W^delta_T - W^delta_0), a centred Gaussian
/// of variance T - delta E|S - S'| with S, S' independent draws from the
/// kernel (T >= delta). The Gaussian means are trapezoid sums over z.
fn terminal_mean_gap_exact(spec: &ModelSpec, kernel: &varfric::noise::MollifierKernel, deltas: &[f64]) -> Option<Vec<f64>> {
    let f = &spec.friction;
    if spec.drift.as_constant() != Some(&[0.0][..]) || f.dim() != 1 || deltas.iter().any(|&d| d > spec.t_end) {
        return None;
    }
    let f0 = f.primitive_q1(spec.q0[0])?;
    // E|S - S'| = 2 int G(1 - G) for the kernel's distribution function G
    let ds = 1.0 / (kernel.nodes() - 1) as f64;
    let (mut g, mut spread) = (0.0, 0.0);
    for w in kernel.rho.windows(2) {
        let g_next = g + 0.5 * (w[0] + w[1]) * ds;
        spread += (g * (1.0 - g) + g_next * (1.0 - g_next)) * ds;
        g = g_next;
    }
    let mean = |var: f64| {
        const M: usize = 2400;
        let (zmax, dz) = (12.0, 24.0 / M as f64);
        let mut acc = 0.0;
        let mut guess = spec.q0[0];
        for i in 0..=M {
            let z = -zmax + i as f64 * dz;
            let x = varfric::integrate::invert_primitive(f, f0 + spec.sigma * var.sqrt() * z, guess);
            guess = x;
            acc += x * (-0.5 * z * z).exp();
        }
        acc * dz / (2.0 * std::f64::consts::PI).sqrt()
    };
    let reference = mean(spec.t_end);
    Some(deltas.iter().map(|&d| mean(spec.t_end - d * spread) - reference).collect())
}

fn run_ito_vs_strat(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let spec = spec_of(cfg, cfg.field("lambda"));
    let (h, seed) = (cfg.float("h"), cfg.seed);
    let s2 = spec.sigma * spec.sigma;
    let rows = map_streams(cfg.count("n_paths"), |k| -> Result<[f64; 3], String> {
        let path = sample_wiener(1, spec.t_end, h, seed, k).map_err(|e| e.to_string())?;
        let st = simulate_stratonovich_limit(&spec, &path, h).map_err(|e| e.to_string())?;
        let cl = simulate_classical_limit(&spec, &path, h).map_err(|e| e.to_string())?;
        // left-point sum of sigma^2 lambda'/(2 lambda^3) along the Stratonovich path
        let mut integral = 0.0;
        for n in 0..st.steps() {
            let (l, dl) = spec.friction.eval_deriv1(st.q(n)[0]);
            integral += s2 * dl / (2.0 * l * l * l) * h;
        }
        Ok([st.terminal()[0], cl.terminal()[0], integral])
    })
    .map_err(sim)?;
    let col = |j: usize| mean_se(&rows.iter().map(|r| r[j]).collect::<Vec<_>>());
    let (ms, ses) = col(0);
    let (mc, sec) = col(1);
    let (mi, sei) = col(2);
    let (md, sed) = mean_se(&rows.iter().map(|r| r[0] - r[1]).collect::<Vec<_>>());
    let combined = (ses * ses + sec * sec + sei * sei).sqrt();
    let diff = ms - mc;
    let predicted = -mi;
    let z_max = cfg.float("z_max");
    let csv = table(
        "quantity,estimate,std_error",
        [
            ("stratonovich_mean", ms, ses),
            ("uncorrected_mean", mc, sec),
            ("difference", diff, combined),
            ("paired_difference", md, sed),
            ("correction_integral", mi, sei),
            ("predicted_difference", predicted, sei),
        ]
        .iter()
        .map(|(n, e, s)| format!("{n},{e},{s}")),
    );
    Ok(RecipeOutput {
        files: vec![("ito_vs_strat.csv".into(), csv)],
        results: json!({
            "difference": diff,
            "combined_std_error": combined,
            "correction_integral": mi,
            "correction_integral_se": sei,
            "paired_difference": md,
            "paired_difference_se": sed,
        }),
        checks: vec![Check::new(
            "correction_matches",
            (diff - predicted).abs() <= z_max * combined,
            format!("difference {diff:.5} vs predicted {predicted:.5}, tolerance {:.5}", z_max * combined),
        )],
    })
}

fn run_gendiff_exit(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let (lo, hi, x0) = (cfg.float("lo"), cfg.float("hi"), cfg.float("x0"));
    let (n, chains, z_max) = (cfg.count("grid_n"), cfg.count("n_chains"), cfg.float("z_max"));
    let step = cfg.field("step");
    let grid = aligned_grid(lo, hi, n, &[x0]);
    let zero = DriftField::zero(1);
    let rule = StoppingRule { lo, hi, horizon: None };

    let unit = compute_scale_speed(&zero, &FrictionField::constant(1, 1.0), &grid).map_err(sim)?;
    let unit_run = simulate_gendiff(&unit, x0, rule, cfg.seed, chains).map_err(sim)?;
    let glued = compute_scale_speed(&zero, &step, &grid).map_err(sim)?;
    let glued_run = simulate_gendiff(&glued, x0, rule, cfg.seed.wrapping_add(1), chains).map_err(sim)?;
    let glued_time = exit_stats_analytic(&glued, -lo, hi, x0).map_err(sim)?.mean_time;

    // closed forms for Brownian motion, and the gluing condition at the jump
    let p_unit = (x0 - lo) / (hi - lo);
    let t_unit = (x0 - lo) * (hi - x0);
    let (l1, l2) = (step.eval_side(0.0, varfric::model::Side::Left), step.eval_side(0.0, varfric::model::Side::Right));
    let p_step = if x0 == 0.0 { glued_exit_probability(l1, l2, -lo, hi) } else { exit_stats_analytic(&glued, -lo, hi, x0).map_err(sim)?.p_right };
    let binom = |p: f64| (p * (1.0 - p) / chains as f64).sqrt();

    let (us, gs) = (&unit_run.stats, &glued_run.stats);
    let rows = vec![
        ExitRow { case: "unit_exit_right".into(), analytic: p_unit, empirical: us.p_right, std_error: binom(p_unit) },
        ExitRow { case: "unit_mean_time".into(), analytic: t_unit, empirical: us.mean_time, std_error: us.mean_time_se.unwrap_or(f64::NAN) },
        ExitRow { case: "step_exit_right".into(), analytic: p_step, empirical: gs.p_right, std_error: binom(p_step) },
        ExitRow { case: "step_mean_time".into(), analytic: glued_time, empirical: gs.mean_time, std_error: gs.mean_time_se.unwrap_or(f64::NAN) },
    ];
    let mut csv = Vec::new();
    write_exit_csv(&rows, &mut csv).map_err(sim)?;
    let rel = cfg.float("time_rel_tol");
    let within = |r: &ExitRow| (r.empirical - r.analytic).abs() <= z_max * r.std_error;
    let checks = vec![
        Check::new("unit_exit_right", within(&rows[0]), format!("{} vs {}", rows[0].empirical, rows[0].analytic)),
        Check::new(
            "unit_mean_time",
            (rows[1].empirical - t_unit).abs() <= rel * t_unit,
            format!("{} vs {t_unit}, relative tolerance {rel}", rows[1].empirical),
        ),
        Check::new("step_exit_right", within(&rows[2]), format!("{} vs {p_step}", rows[2].empirical)),
    ];
    Ok(RecipeOutput {
        files: vec![("exit.csv".into(), String::from_utf8(csv).map_err(sim)?)],
        results: json!({ "rows": rows, "unit": unit_run.stats, "step": glued_run.stats }),
        checks,
    })
}

fn run_glued_step(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let (l1, l2) = (cfg.float("left"), cfg.float("right"));
    let (lo, hi, x0) = (cfg.float("lo"), cfg.float("hi"), cfg.float("x0"));
    let grid = aligned_grid(lo, hi, cfg.count("grid_n"), &[x0]);
    let zero = DriftField::zero(1);
    let target = glued_exit_probability(l1, l2, -lo, hi);
    let step = compute_scale_speed(&zero, &FrictionField::step(l1, l2), &grid).map_err(sim)?;
    let step_p = exit_stats_analytic(&step, -lo, hi, x0).map_err(sim)?.p_right;
    let widths = cfg.list("widths");
    let mut ps = Vec::new();
    let mut csv = String::from("width,p_right,gap,mean_time\n");
    for &w in widths {
        let ss = compute_scale_speed(&zero, &FrictionField::tanh_ramp(1, l1, l2, w), &grid).map_err(sim)?;
        let e = exit_stats_analytic(&ss, -lo, hi, x0).map_err(sim)?;
        let _ = writeln!(csv, "{w},{},{},{}", e.p_right, (e.p_right - target).abs(), e.mean_time);
        ps.push(e.p_right);
    }
    let gaps: Vec<f64> = ps.iter().map(|p| (p - target).abs()).collect();
    let final_gap = *gaps.last().expect("widths is non-empty");
    let tol = cfg.float("final_gap");
    Ok(RecipeOutput {
        files: vec![("glued_step.csv".into(), csv)],
        results: json!({ "widths": widths, "p_right": ps, "gaps": gaps, "glued": target, "step_scale_speed": step_p }),
        checks: vec![
            Check::new("monotone_convergence", gaps.windows(2).all(|g| g[1] < g[0]), format!("gaps {gaps:?}")),
            Check::new("final_gap", final_gap < tol, format!("{final_gap:.3e} < {tol}")),
            Check::new("step_matches_gluing", (step_p - target).abs() <= 1e-10, format!("{step_p} vs {target}")),
        ],
    })
}

fn run_averaging(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let eps = cfg.list("eps_list");
    let rows = averaging_check(&cfg.field("lambda"), eps, cfg.float("t_end"), cfg.count("n_paths"), cfg.seed, cfg.float("h"), cfg.sampler("sampler"))
        .map_err(sim)?;
    let gap = sweep(SweptParameter::Eps, eps, "limit/averaged", "coupled_gap", cfg, &rows.iter().map(|r| (r.coupled_gap, r.coupled_gap_se)).collect::<Vec<_>>())?;
    let csv = table(
        "eps,variance,variance_se,oracle,coupled_gap,coupled_gap_se,n_paths",
        rows.iter().map(|r| format!("{},{},{},{},{},{},{}", r.eps, r.variance, r.variance_se, r.oracle, r.coupled_gap, r.coupled_gap_se, r.n_paths)),
    );
    let last = rows.last().expect("eps_list is non-empty");
    let tol = cfg.float("rel_tol");
    let mut checks = vec![Check::new(
        "variance",
        (last.variance - last.oracle).abs() <= tol * last.oracle,
        format!("Var = {:.5} at eps = {}, oracle {:.5} +- {}%", last.variance, last.eps, last.oracle, tol * 100.0),
    )];
    if rows.len() >= 2 {
        checks.push(trend_check("coupled_gap_decreasing", &gap));
    }
    Ok(RecipeOutput { files: vec![("averaging.csv".into(), csv)], results: json!({ "rows": rows, "coupled_gap": gap.to_json() }), checks })
}

fn coefficient_csv(e: &varfric::homogenize::EffectiveCoefficients) -> String {
    let mut s = String::from("i,j,a_bar,a_bar_simplified\n");
    for i in 0..e.d {
        for j in 0..e.d {
            let _ = writeln!(s, "{},{},{},{}", i + 1, j + 1, e.a(i, j), e.a_bar_simplified[i * e.d + j]);
        }
    }
    s
}

fn cell_problem(f: &FrictionField, n: usize) -> Result<(varfric::homogenize::CellSolution, varfric::homogenize::EffectiveCoefficients), RecipeError> {
    let grid = TorusGrid::new(f.dim(), n).map_err(sim)?;
    let cell = solve_cell(f, grid).map_err(sim)?;
    let e = effective_coefficients(f, &DriftField::zero(f.dim()), &cell).map_err(sim)?;
    Ok((cell, e))
}

fn run_homog_1d(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let f = cfg.field("lambda");
    let (cell, e) = cell_problem(&f, cfg.count("grid_n"))?;
    let bar = cell_mean(&f).expect("validated");
    let oracle = 1.0 / (bar * bar);
    let tol = cfg.float("tol");
    let mut cell_csv = Vec::new();
    cell.write_csv(&mut cell_csv).map_err(sim)?;
    Ok(RecipeOutput {
        files: vec![("coefficients.csv".into(), coefficient_csv(&e)), ("cell.csv".into(), String::from_utf8(cell_csv).map_err(sim)?)],
        results: json!({ "a_bar": e.a(0, 0), "oracle": oracle, "coefficients": e }),
        checks: vec![Check::new("a_bar", (e.a(0, 0) - oracle).abs() <= tol, format!("{} vs {oracle}", e.a(0, 0)))],
    })
}

/// Periodic trapezoid mean along y1, spectrally accurate for smooth fields.
fn line_mean(f: &FrictionField, g: impl Fn(f64) -> f64) -> f64 {
    const M: usize = 4096;
    (0..M).map(|i| g(f.eval(&[i as f64 / M as f64, 0.0]))).sum::<f64>() / M as f64
}

fn run_homog_2d(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let f = cfg.field("lambda");
    let (_, e) = cell_problem(&f, cfg.count("grid_n"))?;
    let mean = line_mean(&f, |l| l);
    let mean_inv = line_mean(&f, |l| 1.0 / l);
    let (o11, o22) = (1.0 / (mean * mean), mean_inv / mean);
    let (t11, t22, t12) = (cfg.float("tol_11"), cfg.float("tol_22"), cfg.float("tol_12"));
    Ok(RecipeOutput {
        files: vec![("coefficients.csv".into(), coefficient_csv(&e))],
        results: json!({ "a_bar": e.a_bar, "oracle_11": o11, "oracle_22": o22, "coefficients": e }),
        checks: vec![
            Check::new("a11", (e.a(0, 0) - o11).abs() <= t11, format!("{} vs {o11}", e.a(0, 0))),
            Check::new("a22", (e.a(1, 1) - o22).abs() <= t22, format!("{} vs {o22}", e.a(1, 1))),
            Check::new("a12", e.a(0, 1).abs().max(e.a(1, 0).abs()) <= t12, format!("{} / {}", e.a(0, 1), e.a(1, 0))),
        ],
    })
}

fn ratio_ok(r: &[f64], target: f64, tol: f64) -> bool {
    !r.is_empty() && r.iter().all(|x| (x - target).abs() <= tol)
}

fn run_invariant_density(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let ns: Vec<usize> = cfg.list("n_list").iter().map(|&n| n as usize).collect();
    let (target, tol) = (cfg.float("ratio"), cfg.float("ratio_tol"));
    let mut csv = String::from("field,n,residual,ratio\n");
    let mut checks = Vec::new();
    let mut results = serde_json::Map::new();
    for key in ["lambda", "lambda2"] {
        let f = cfg.field(key);
        let name = cfg.field_expr(key).to_string();
        let res = ns
            .iter()
            .map(|&n| invariant_density_residual(&f, TorusGrid::new(f.dim(), n).map_err(sim)?).map_err(sim))
            .collect::<Result<Vec<_>, _>>()?;
        let r = ratios(&res);
        for (i, n) in ns.iter().enumerate() {
            let ratio = if i == 0 { String::new() } else { r[i - 1].to_string() };
            let _ = writeln!(csv, "\"{name}\",{n},{},{ratio}", res[i]);
        }
        checks.push(Check::new(&format!("{key}_ratio"), ratio_ok(&r, target, tol), format!("residuals {res:?}, ratios {r:?}")));
        results.insert(key.into(), json!({ "field": name, "n": ns, "residual": res, "ratio": r }));
    }
    Ok(RecipeOutput { files: vec![("invariant_density.csv".into(), csv)], results: results.into(), checks })
}

fn run_cell_identity(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let ns: Vec<usize> = cfg.list("n_list").iter().map(|&n| n as usize).collect();
    let (target, tol, gap_tol) = (cfg.float("ratio"), cfg.float("ratio_tol"), cfg.float("gap_tol"));
    let mut csv = String::from("field,n,a_bar,a_bar_simplified,gap,ratio\n");
    let mut checks = Vec::new();
    let mut results = serde_json::Map::new();
    for key in ["lambda", "lambda2"] {
        let f = cfg.field(key);
        let name = cfg.field_expr(key).to_string();
        let mut coeffs = Vec::new();
        for &n in &ns {
            coeffs.push(cell_problem(&f, n)?.1);
        }
        let gaps: Vec<f64> = coeffs.iter().map(|e| e.form_gap).collect();
        let r = ratios(&gaps);
        for (i, e) in coeffs.iter().enumerate() {
            let ratio = if i == 0 { String::new() } else { r[i - 1].to_string() };
            let _ = writeln!(csv, "\"{name}\",{},{},{},{},{ratio}", ns[i], e.a(0, 0), e.a_bar_simplified[0], e.form_gap);
        }
        let last = *gaps.last().expect("n_list is non-empty");
        checks.push(Check::new(&format!("{key}_gap"), last <= gap_tol, format!("gap {last:.3e} at n = {}, need <= {gap_tol:e}", ns[ns.len() - 1])));
        checks.push(Check::new(&format!("{key}_ratio"), ratio_ok(&r, target, tol), format!("gaps {gaps:?}, ratios {r:?}")));
        results.insert(key.into(), json!({ "field": name, "n": ns, "gap": gaps, "ratio": r }));
    }
    Ok(RecipeOutput { files: vec![("cell_identity.csv".into(), csv)], results: results.into(), checks })
}

fn run_homog_mc(cfg: &RunConfig) -> Result<RecipeOutput, RecipeError> {
    let f = cfg.field("lambda");
    let (_, e) = cell_problem(&f, cfg.count("grid_n"))?;
    let pde = e.a(0, 0);
    let mc = mc_effective_diffusivity(&f, &DriftField::zero(1), cfg.float("eps"), cfg.float("t_end"), cfg.count("n_paths"), cfg.seed, cfg.float("h"), cfg.sampler("sampler"))
        .map_err(sim)?;
    let (est, se) = (mc.a_bar[0], mc.a_bar_se[0]);
    let tol = cfg.float("z_max") * se + cfg.float("abs_tol");
    let csv = table(
        "quantity,estimate,std_error",
        [
            ("a_bar_pde".to_string(), pde, 0.0),
            ("a_bar_mc".to_string(), est, se),
            ("drift_raw".to_string(), mc.drift_raw[0], mc.drift_raw_se[0]),
            ("drift_corrected".to_string(), mc.drift_corrected[0], mc.drift_raw_se[0]),
        ]
        .iter()
        .map(|(n, x, s)| format!("{n},{x},{s}")),
    );
    Ok(RecipeOutput {
        files: vec![("homog_mc.csv".into(), csv)],
        results: json!({ "a_bar_pde": pde, "mc": mc }),
        checks: vec![Check::new("mc_matches_pde", (est - pde).abs() <= tol, format!("{est:.5} +- {se:.5} vs {pde:.6}, tolerance {tol:.5}"))],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn names_and_aliases_are_unique() {
        let mut all: Vec<&str> = REGISTRY.iter().flat_map(|r| std::iter::once(r.name).chain(r.aliases.iter().copied())).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn every_default_passes_its_rule() {
        for r in REGISTRY {
            for p in r.params {
                let v = crate::config::parse_value(p.kind, p.key, p.default.unwrap()).unwrap();
                p.check(&v).unwrap_or_else(|e| panic!("{}.{}: {e}", r.name, p.key));
            }
        }
    }

    #[test]
    fn homog_1d_hits_the_closed_form() {
        let cfg = parse_config("[homog-1d-sine]\n").unwrap();
        let out = (cfg.recipe().run)(&cfg).unwrap();
        let a = out.results["a_bar"].as_f64().unwrap();
        assert!((a - 0.25).abs() <= 1e-6, "{a}");
        assert!(out.checks.iter().all(|c| c.passed));
    }

    #[test]
    fn small_sk_constant_run_is_reproducible() {
        let cfg = parse_config("[sk-constant]\nn_paths = 200\nmu = 1e-2\n").unwrap();
        let a = (cfg.recipe().run)(&cfg).unwrap();
        let b = (cfg.recipe().run)(&cfg).unwrap();
        assert_eq!(a.files, b.files);
        assert!(a.files[0].1.starts_with("functional,estimate,std_error,reference,z,n_paths\n"));
    }

    #[test]
    fn glued_step_converges() {
        let cfg = parse_config("[glued-step]\ngrid_n = 2000\n").unwrap();
        let out = (cfg.recipe().run)(&cfg).unwrap();
        assert!(out.checks.iter().all(|c| c.passed), "{:?}", out.checks);
    }

    #[test]
    fn separable_validation_rejects_coupled_fields() {
        assert!(parse_config("[homog-2d-separable]\nlambda = sinusoidal(2, 1, 1, 1)\n").is_err());
        assert!(parse_config("[homog-1d-sine]\nlambda = sine(2, 1, 1)\n").is_err());
        assert!(parse_config("[gendiff-exit]\nstep = constant(1)\n").is_err());
        assert!(parse_config("[regularized-limit-mu]\nh = 1e-4\ndt = 1e-4\n").is_err());
    }
}

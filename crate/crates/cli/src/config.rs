//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! [gamma-gap]
//! mu_list = 1e-2, 1e-3, 1e-4
//! lambda = clipped_linear(0.7)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;
use varfric::integrate::LimitSampler;
use varfric::model::{FrictionField, SineTerm};

use crate::recipes::{self, Recipe};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {kind}")]
pub struct ConfigError {
    pub line: usize,
    pub kind: ErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErrorKind {
    #[error("expected a [recipe] section header before any key")]
    MissingSection,
    #[error("only one [recipe] section per file")]
    ExtraSection,
    #[error("unknown recipe `{0}`")]
    UnknownRecipe(String),
    #[error("unknown key `{key}` for recipe {recipe}")]
    UnknownKey { key: String, recipe: String },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("`{key}` expects {expected}, got `{got}`")]
    TypeMismatch { key: String, expected: &'static str, got: String },
    #[error("{0}")]
    Syntax(String),
    #[error("step friction unsupported by integrators")]
    StepUnsupported,
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn err(line: usize, kind: ErrorKind) -> ConfigError {
    ConfigError { line, kind }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// non-negative integer; `1e4` is accepted
    Int,
    Float,
    List,
    Field,
    Sampler,
    Text,
}

impl Kind {
    fn describe(self) -> &'static str {
        match self {
            Kind::Int => "a non-negative integer",
            Kind::Float => "a number",
            Kind::List => "a comma-separated list of numbers",
            Kind::Field => "a friction field such as sine(2, 0.5, 1)",
            Kind::Sampler => "`scale` or `ito`",
            Kind::Text => "text",
        }
    }
}

/// Catalog friction expression as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldExpr {
    pub name: String,
    pub args: Vec<f64>,
}

pub const FIELD_CATALOG: &[&str] = &[
    "constant(c)",
    "sine(c0, c1, omega)",
    "sinusoidal(c0, c1, k1[, k2])",
    "trig(c0, a1, k1[, a2, k2 ...])",
    "tanh_ramp(lo, hi, width)",
    "step(left, right)",
    "clipped_linear(radius)",
];

impl FieldExpr {
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let open = s.find('(').ok_or("missing `(`")?;
        if !s.ends_with(')') {
            return Err("missing `)`".into());
        }
        let name = s[..open].trim().to_string();
        let inner = &s[open + 1..s.len() - 1];
        let args = if inner.trim().is_empty() { Vec::new() } else { parse_list(inner)? };
        let f = Self { name, args };
        f.build()?;
        Ok(f)
    }

    /// Builds the field; every catalog field except `sinusoidal` with a
    /// two-component wavevector is one-dimensional.
    pub fn build(&self) -> Result<FrictionField, String> {
        let a = &self.args;
        let arity = |n: usize| {
            if a.len() == n {
                Ok(())
            } else {
                Err(format!("{} takes {n} argument(s), got {}", self.name, a.len()))
            }
        };
        let f = match self.name.as_str() {
            "constant" => {
                arity(1)?;
                FrictionField::constant(1, a[0])
            }
            "sine" => {
                arity(3)?;
                FrictionField::sine_angular(a[0], a[1], a[2])
            }
            "sinusoidal" => {
                if !(3..=4).contains(&a.len()) {
                    return Err("sinusoidal takes c0, c1 and one or two wavevector components".into());
                }
                FrictionField::sinusoidal(a[0], a[1], a[2..].to_vec())
            }
            "trig" => {
                if a.len() < 3 || a.len() % 2 == 0 {
                    return Err("trig takes c0 followed by (amplitude, wavenumber) pairs".into());
                }
                let terms = a[1..].chunks(2).map(|p| SineTerm { amp: p[0], k: vec![p[1]] }).collect();
                FrictionField::trigonometric(a[0], terms)
            }
            "tanh_ramp" => {
                arity(3)?;
                if !(a[2] > 0.0) {
                    return Err("tanh_ramp width must be positive".into());
                }
                FrictionField::tanh_ramp(1, a[0], a[1], a[2])
            }
            "step" => {
                arity(2)?;
                FrictionField::step(a[0], a[1])
            }
            "clipped_linear" => {
                arity(1)?;
                if !(a[0] >= 0.0) {
                    return Err("clipped_linear radius must be non-negative".into());
                }
                FrictionField::clipped_linear(1, a[0])
            }
            other => return Err(format!("unknown field `{other}`; catalog: {}", FIELD_CATALOG.join(", "))),
        };
        if !(f.lower_bound() > 0.0) || !f.upper_bound().is_finite() {
            return Err("friction must be bounded and bounded away from zero".into());
        }
        Ok(f)
    }
}

impl fmt::Display for FieldExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let args: Vec<String> = self.args.iter().map(|x| x.to_string()).collect();
        write!(f, "{}({})", self.name, args.join(", "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Value {
    Int(u64),
    Float(f64),
    List(Vec<f64>),
    Field(FieldExpr),
    Sampler(LimitSampler),
    Text(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::List(v) => {
                let s: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "{}", s.join(", "))
            }
            Value::Field(e) => write!(f, "{e}"),
            Value::Sampler(LimitSampler::ScaleTransform) => write!(f, "scale"),
            Value::Sampler(LimitSampler::ItoEuler) => write!(f, "ito"),
            Value::Text(s) => write!(f, "{s}"),
        }
    }
}

fn parse_float(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|t| parse_float(t).ok_or_else(|| format!("`{}` is not a number", t.trim()))).collect()
}

fn parse_int(s: &str) -> Option<u64> {
    if let Ok(n) = s.parse::<u64>() {
        return Some(n);
    }
    // 1e4 style counts
    let x = parse_float(s)?;
    (x >= 0.0 && x.fract() == 0.0 && x <= 9.007_199_254_740_992e15).then_some(x as u64)
}

pub fn parse_value(kind: Kind, key: &str, raw: &str) -> Result<Value, ErrorKind> {
    let mismatch = || ErrorKind::TypeMismatch { key: key.to_string(), expected: kind.describe(), got: raw.to_string() };
    match kind {
        Kind::Int => parse_int(raw).map(Value::Int).ok_or_else(mismatch),
        Kind::Float => parse_float(raw).map(Value::Float).ok_or_else(mismatch),
        Kind::List => parse_list(raw).map(Value::List).map_err(|_| mismatch()),
        Kind::Field => {
            if !raw.contains('(') {
                return Err(mismatch());
            }
            FieldExpr::parse(raw).map(Value::Field).map_err(|m| ErrorKind::Invalid { key: key.into(), message: m })
        }
        Kind::Sampler => match raw {
            "scale" => Ok(Value::Sampler(LimitSampler::ScaleTransform)),
            "ito" => Ok(Value::Sampler(LimitSampler::ItoEuler)),
            _ => Err(mismatch()),
        },
        Kind::Text => {
            if raw.is_empty() {
                Err(mismatch())
            } else {
                Ok(Value::Text(raw.to_string()))
            }
        }
    }
}

/// Fully resolved configuration: every key the recipe accepts has a value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub recipe: String,
    pub seed: u64,
    pub out: PathBuf,
    /// thread cap for the Monte Carlo fan-out; None uses the global pool
    pub workers: Option<usize>,
    pub params: BTreeMap<String, Value>,
}

pub const DEFAULT_SEED: u64 = 20240601;
pub const DEFAULT_OUT: &str = "runs";

impl RunConfig {
    pub fn recipe(&self) -> &'static Recipe {
        recipes::find(&self.recipe).expect("resolved configs name registered recipes")
    }

    fn get(&self, key: &str) -> &Value {
        self.params.get(key).unwrap_or_else(|| panic!("recipe {} reads undeclared key {key}", self.recipe))
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(x) => *x,
            Value::Int(n) => *n as f64,
            v => panic!("{key} is not a number: {v:?}"),
        }
    }

    pub fn count(&self, key: &str) -> usize {
        match self.get(key) {
            Value::Int(n) => *n as usize,
            v => panic!("{key} is not an integer: {v:?}"),
        }
    }

    pub fn list(&self, key: &str) -> &[f64] {
        match self.get(key) {
            Value::List(v) => v,
            v => panic!("{key} is not a list: {v:?}"),
        }
    }

    pub fn field_expr(&self, key: &str) -> &FieldExpr {
        match self.get(key) {
            Value::Field(e) => e,
            v => panic!("{key} is not a field: {v:?}"),
        }
    }

    pub fn field(&self, key: &str) -> FrictionField {
        self.field_expr(key).build().expect("fields are validated at parse time")
    }

    pub fn sampler(&self, key: &str) -> LimitSampler {
        match self.get(key) {
            Value::Sampler(s) => *s,
            v => panic!("{key} is not a sampler: {v:?}"),
        }
    }

    /// Canonical text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = format!("[{}]\nseed = {}\nout = {}\n", self.recipe, self.seed, self.out.display());
        if let Some(w) = self.workers {
            s += &format!("workers = {w}\n");
        }
        for (k, v) in &self.params {
            s += &format!("{k} = {v}\n");
        }
        s
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
    .trim()
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut section: Option<(usize, &'static Recipe)> = None;
    let mut seen: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| err(line_no, ErrorKind::Syntax("unterminated section header".into())))?.trim();
            if section.is_some() {
                return Err(err(line_no, ErrorKind::ExtraSection));
            }
            let r = recipes::find(name).ok_or_else(|| err(line_no, ErrorKind::UnknownRecipe(name.to_string())))?;
            section = Some((line_no, r));
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| err(line_no, ErrorKind::Syntax(format!("expected `key = value`, got `{line}`"))))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(err(line_no, ErrorKind::Syntax(format!("bad key `{key}`"))));
        }
        let Some((_, recipe)) = section else {
            return Err(err(line_no, ErrorKind::MissingSection));
        };
        if !is_global(key) && recipe.param(key).is_none() {
            return Err(err(line_no, ErrorKind::UnknownKey { key: key.into(), recipe: recipe.name.into() }));
        }
        if seen.insert(key.to_string(), (line_no, value.to_string())).is_some() {
            return Err(err(line_no, ErrorKind::DuplicateKey(key.into())));
        }
    }
    let Some((header, recipe)) = section else {
        return Err(err(text.lines().count().max(1), ErrorKind::MissingSection));
    };
    resolve(recipe, header, &seen)
}

fn is_global(key: &str) -> bool {
    matches!(key, "seed" | "out" | "workers")
}

fn resolve(recipe: &'static Recipe, header: usize, seen: &BTreeMap<String, (usize, String)>) -> Result<RunConfig, ConfigError> {
    let global = |key: &str, kind: Kind| -> Result<Option<Value>, ConfigError> {
        seen.get(key).map(|(l, raw)| parse_value(kind, key, raw).map_err(|k| err(*l, k))).transpose()
    };
    let seed = match global("seed", Kind::Int)? {
        Some(Value::Int(n)) => n,
        _ => DEFAULT_SEED,
    };
    let out = match global("out", Kind::Text)? {
        Some(Value::Text(s)) => PathBuf::from(s),
        _ => PathBuf::from(DEFAULT_OUT),
    };
    let workers = match global("workers", Kind::Int)? {
        Some(Value::Int(0)) => {
            return Err(err(seen["workers"].0, ErrorKind::Invalid { key: "workers".into(), message: "must be at least 1".into() }))
        }
        Some(Value::Int(n)) => Some(n as usize),
        _ => None,
    };
    let mut params = BTreeMap::new();
    let mut lines = BTreeMap::new();
    for p in recipe.params {
        let (line, value) = match (seen.get(p.key), p.default) {
            (Some((l, raw)), _) => (*l, parse_value(p.kind, p.key, raw).map_err(|k| err(*l, k))?),
            (None, Some(d)) => (header, parse_value(p.kind, p.key, d).expect("registry defaults parse")),
            (None, None) => return Err(err(header, ErrorKind::MissingKey(p.key.into()))),
        };
        p.check(&value).map_err(|m| err(line, ErrorKind::Invalid { key: p.key.into(), message: m }))?;
        if recipe.integrator {
            if let Value::Field(e) = &value {
                if e.name == "step" {
                    return Err(err(line, ErrorKind::StepUnsupported));
                }
            }
        }
        params.insert(p.key.to_string(), value);
        lines.insert(p.key, line);
    }
    let cfg = RunConfig { recipe: recipe.name.to_string(), seed, out, workers, params };
    if let Err((key, message)) = (recipe.validate)(&cfg) {
        let line = lines.get(key).copied().unwrap_or(header);
        return Err(err(line, ErrorKind::Invalid { key: key.into(), message }));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse_config("[sk-constant]\n").unwrap();
        assert_eq!(c.recipe, "sk-constant");
        assert_eq!(c.seed, DEFAULT_SEED);
        assert_eq!(c.float("mu"), 1e-4);
        assert_eq!(c.count("n_paths"), 10_000);
        assert_eq!(c.field_expr("lambda").to_string(), "constant(2)");
    }

    #[test]
    fn mu_list_is_a_three_value_sweep() {
        let c = parse_config("[sk-fails-variable]\nmu_list = 1e-2, 1e-3, 1e-4\n").unwrap();
        assert_eq!(c.list("mu_list"), &[1e-2, 1e-3, 1e-4]);
    }

    #[test]
    fn step_friction_rejected_under_integrators() {
        let e = parse_config("[sk-constant]\n\nlambda = step(1,2)\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert_eq!(e.kind, ErrorKind::StepUnsupported);
        assert!(e.to_string().contains("step friction unsupported by integrators"));
        // but fine for the generalized diffusion
        assert!(parse_config("[gendiff-exit]\nstep = step(1, 2)\n").is_ok());
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let e = parse_config("# header comment\n[sk-constant]\nmu = 1e-3\nn_pahts = 10\n").unwrap_err();
        assert_eq!(e.line, 4);
        assert!(matches!(e.kind, ErrorKind::UnknownKey { ref key, .. } if key == "n_pahts"));
    }

    #[test]
    fn type_mismatch_reports_its_line() {
        let e = parse_config("[sk-constant]\nn_paths = many\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(matches!(e.kind, ErrorKind::TypeMismatch { .. }));
        let e = parse_config("[sk-constant]\nn_paths = 2.5\n").unwrap_err();
        assert!(matches!(e.kind, ErrorKind::TypeMismatch { .. }));
        let e = parse_config("[sk-constant]\nlambda = 2\n").unwrap_err();
        assert!(matches!(e.kind, ErrorKind::TypeMismatch { .. }));
    }

    #[test]
    fn counts_accept_exponent_notation() {
        let c = parse_config("[sk-constant]\nn_paths = 1e4\n").unwrap();
        assert_eq!(c.count("n_paths"), 10_000);
    }

    #[test]
    fn structural_errors() {
        assert_eq!(parse_config("mu = 1\n").unwrap_err().kind, ErrorKind::MissingSection);
        assert_eq!(parse_config("# nothing\n").unwrap_err().kind, ErrorKind::MissingSection);
        let e = parse_config("[no-such]\n").unwrap_err();
        assert_eq!(e.kind, ErrorKind::UnknownRecipe("no-such".into()));
        let e = parse_config("[sk-constant]\nmu = 1e-3\nmu = 1e-2\n").unwrap_err();
        assert_eq!((e.line, e.kind), (3, ErrorKind::DuplicateKey("mu".into())));
        let e = parse_config("[sk-constant]\n[sk-constant]\n").unwrap_err();
        assert_eq!((e.line, e.kind), (2, ErrorKind::ExtraSection));
        assert!(matches!(parse_config("[sk-constant]\nmu 1e-3\n").unwrap_err().kind, ErrorKind::Syntax(_)));
    }

    #[test]
    fn model_validation_is_applied() {
        let e = parse_config("[sk-constant]\nmu = -1\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(matches!(e.kind, ErrorKind::Invalid { .. }));
        let e = parse_config("[regularized-limit-mu]\nlambda = sine(0.5, 1, 1)\n").unwrap_err();
        assert!(matches!(e.kind, ErrorKind::Invalid { .. }), "{e}");
        assert!(parse_config("[regularized-limit-mu]\nmu_list = 1e-3, 1e-2\n").is_err());
    }

    #[test]
    fn alias_resolves_to_the_registered_recipe() {
        let c = parse_config("[gamma-gap]\n").unwrap();
        assert_eq!(c.recipe, "sk-fails-variable");
    }

    #[test]
    fn globals_and_comments() {
        let c = parse_config("[homog-1d-sine]  # trailing\nseed = 9 # x\nworkers = 2\nout = /tmp/o\n").unwrap();
        assert_eq!((c.seed, c.workers), (9, Some(2)));
        assert_eq!(c.out, PathBuf::from("/tmp/o"));
        assert!(parse_config("[homog-1d-sine]\nworkers = 0\n").is_err());
    }

    #[test]
    fn every_recipe_parses_with_defaults_and_round_trips() {
        for r in recipes::REGISTRY {
            let c = parse_config(&format!("[{}]\n", r.name)).unwrap();
            assert_eq!(parse_config(&c.to_text()).unwrap(), c, "{}", r.name);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lists_round_trip(v in proptest::collection::vec(-1e6f64..1e6, 1..6)) {
                let raw = Value::List(v.clone()).to_string();
                prop_assert_eq!(parse_value(Kind::List, "x", &raw).unwrap(), Value::List(v));
            }

            #[test]
            fn canonical_text_round_trips(seed in any::<u64>(), mu in 1e-6f64..1.0, n in 1u64..100_000, workers in proptest::option::of(1usize..16)) {
                let text = format!("[sk-constant]\nseed = {seed}\nmu = {mu}\nn_paths = {n}\n");
                let mut c = parse_config(&text).unwrap();
                c.workers = workers;
                prop_assert_eq!(parse_config(&c.to_text()).unwrap(), c);
            }

            #[test]
            fn unknown_keys_never_pass(key in "[a-z]{3,10}") {
                prop_assume!(recipes::find("sk-constant").unwrap().param(&key).is_none() && !is_global(&key));
                let e = parse_config(&format!("[sk-constant]\n{key} = 1\n")).unwrap_err();
                prop_assert_eq!(e.line, 2);
                let is_unknown = matches!(e.kind, ErrorKind::UnknownKey { .. });
                prop_assert!(is_unknown);
            }

            #[test]
            fn garbage_never_panics(text in "\\PC{0,200}") {
                let _ = parse_config(&text);
            }
        }
    }
}

//! Monte Carlo harness: ensembles over (seed, stream), coupled sup distances,
//! weak-error functionals and parameter sweeps.
//!
//! Paths are generated in parallel but every reduction runs in stream order,
//! so results do not depend on the number of worker threads.

use crate::integrate::Trajectory;
use crate::model::ModelSpec;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Display;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("ensembles are not built from the same noise: {0}")]
    StreamMismatch(String),
    #[error("trajectories do not share a grid: {0}")]
    GridMismatch(String),
    #[error("stream {0} appears twice")]
    DuplicateStream(u64),
    #[error("empty ensemble")]
    Empty,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("simulation failed on stream {stream}: {message}")]
    Simulation { stream: u64, message: String },
}

/// Runs `f` on streams 0..n in parallel and returns the results in stream order.
pub fn map_streams<T, E, F>(n: usize, f: F) -> Result<Vec<T>, StatsError>
where
    T: Send,
    E: Display,
    F: Fn(u64) -> Result<T, E> + Sync,
{
    (0..n as u64)
        .into_par_iter()
        .map(|s| f(s).map_err(|e| StatsError::Simulation { stream: s, message: e.to_string() }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub spec: ModelSpec,
    pub seed: u64,
    members: Vec<(u64, Trajectory)>,
}

impl Ensemble {
    pub fn new(spec: ModelSpec, seed: u64, members: Vec<(u64, Trajectory)>) -> Result<Self, StatsError> {
        let first = &members.first().ok_or(StatsError::Empty)?.1;
        let mut seen = std::collections::HashSet::new();
        for (s, t) in &members {
            if !seen.insert(*s) {
                return Err(StatsError::DuplicateStream(*s));
            }
            if t.h != first.h || t.len() != first.len() || t.dim != first.dim {
                return Err(StatsError::GridMismatch(format!("stream {s}")));
            }
            if t.seed != seed || t.stream != *s {
                return Err(StatsError::StreamMismatch(format!("stream {s} carries ({}, {})", t.seed, t.stream)));
            }
        }
        Ok(Self { spec, seed, members })
    }

    /// Simulates streams 0..n_paths with `sim` and collects them in order.
    pub fn generate<E: Display>(
        spec: ModelSpec,
        seed: u64,
        n_paths: usize,
        sim: impl Fn(u64) -> Result<Trajectory, E> + Sync,
    ) -> Result<Self, StatsError> {
        let trs = map_streams(n_paths, sim)?;
        Self::new(spec, seed, trs.into_iter().enumerate().map(|(s, t)| (s as u64, t)).collect())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
    pub fn members(&self) -> &[(u64, Trajectory)] {
        &self.members
    }
    pub fn streams(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.0).collect()
    }
    pub fn terminals(&self, coord: usize) -> Vec<f64> {
        self.members.iter().map(|m| m.1.terminal()[coord]).collect()
    }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos.fract());
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Mean and CLT standard error.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if x.iter().all(|v| *v == x[0]) {
        return (x[0], 0.0);
    }
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupDistance {
    pub n: usize,
    pub mean: f64,
    pub std_error: f64,
    pub median: f64,
    pub q95: f64,
    pub kappa: f64,
    pub p_exceed: f64,
}

/// Summary of per-pair sup distances.
pub fn summarize_distances(mut d: Vec<f64>, kappa: f64) -> SupDistance {
    let (mean, std_error) = mean_se(&d);
    let p_exceed = d.iter().filter(|x| **x > kappa).count() as f64 / d.len() as f64;
    d.sort_by(|a, b| a.total_cmp(b));
    SupDistance { n: d.len(), mean, std_error, median: quantile(&d, 0.5), q95: quantile(&d, 0.95), kappa, p_exceed }
}

/// max_t |a(t) - b(t)| over the nodes of the coarser grid up to the common
/// horizon. The steps must be integer multiples of one another.
pub fn pair_sup_distance(a: &Trajectory, b: &Trajectory) -> Result<f64, StatsError> {
    if a.dim != b.dim {
        return Err(StatsError::GridMismatch("dimension".into()));
    }
    let (coarse, fine) = if a.h >= b.h { (a, b) } else { (b, a) };
    let r = (coarse.h / fine.h).round();
    if r < 1.0 || (r * fine.h - coarse.h).abs() > 1e-9 * coarse.h {
        return Err(StatsError::GridMismatch(format!("steps {} and {} are not commensurate", a.h, b.h)));
    }
    let r = r as usize;
    let nodes = coarse.len().min((fine.len() - 1) / r + 1);
    let mut sup = 0.0f64;
    for k in 0..nodes {
        let (x, y) = (coarse.q(k), fine.q(k * r));
        let dist = x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        sup = sup.max(dist);
    }
    Ok(sup)
}

pub fn coupled_sup_distance(a: &Ensemble, b: &Ensemble, kappa: f64) -> Result<SupDistance, StatsError> {
    if a.seed != b.seed || a.streams() != b.streams() {
        return Err(StatsError::StreamMismatch(format!("seeds {} / {}, {} / {} streams", a.seed, b.seed, a.len(), b.len())));
    }
    let d = a
        .members
        .par_iter()
        .zip(b.members.par_iter())
        .map(|((_, x), (_, y))| pair_sup_distance(x, y))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize_distances(d, kappa))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum TestFunction {
    /// cos(omega x)
    Cosine(f64),
    /// 1{x > threshold}
    Above(f64),
}

impl TestFunction {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            TestFunction::Cosine(w) => (w * x).cos(),
            TestFunction::Above(t) => f64::from(x > t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Functional {
    TerminalMean { coord: usize },
    TerminalSecondMoment { coord: usize },
    TerminalVariance { coord: usize },
    TestFunction { coord: usize, f: TestFunction },
}

impl Functional {
    pub fn coord(self) -> usize {
        match self {
            Functional::TerminalMean { coord }
            | Functional::TerminalSecondMoment { coord }
            | Functional::TerminalVariance { coord }
            | Functional::TestFunction { coord, .. } => coord,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeakError {
    pub estimate: f64,
    pub std_error: f64,
    pub reference: f64,
    pub z: f64,
    pub n: usize,
}

fn z_score(est: f64, se: f64, reference: f64) -> f64 {
    let diff = est - reference;
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Estimate with error bar from terminal samples.
pub fn weak_error_samples(x: &[f64], functional: Functional, reference: f64) -> WeakError {
    let (estimate, std_error) = match functional {
        Functional::TerminalMean { .. } => mean_se(x),
        Functional::TerminalSecondMoment { .. } => mean_se(&x.iter().map(|v| v * v).collect::<Vec<_>>()),
        Functional::TestFunction { f, .. } => mean_se(&x.iter().map(|v| f.eval(*v)).collect::<Vec<_>>()),
        Functional::TerminalVariance { .. } => {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
            let unbiased = if x.len() > 1 { m2 * n / (n - 1.0) } else { 0.0 };
            (unbiased, ((m4 - m2 * m2) / n).max(0.0).sqrt())
        }
    };
    WeakError { estimate, std_error, reference, z: z_score(estimate, std_error, reference), n: x.len() }
}

pub fn weak_error(ens: &Ensemble, functional: Functional, reference: f64) -> WeakError {
    weak_error_samples(&ens.terminals(functional.coord()), functional, reference)
}

/// Difference of two estimates with independent error bars combined in quadrature.
pub fn difference_z(a: &WeakError, b: &WeakError, reference: f64) -> (f64, f64, f64) {
    let d = a.estimate - b.estimate;
    let se = a.std_error.hypot(b.std_error);
    (d, se, z_score(d, se, reference))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweptParameter {
    Mu,
    Delta,
    Eps,
    H,
    N,
}

impl SweptParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweptParameter::Mu => "mu",
            SweptParameter::Delta => "delta",
            SweptParameter::Eps => "eps",
            SweptParameter::H => "h",
            SweptParameter::N => "n",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPlan {
    pub parameter: SweptParameter,
    /// in the order the limit is approached
    pub values: Vec<f64>,
    /// simulators being compared, e.g. "langevin-mollified/smooth-limit"
    pub pairing: String,
    pub statistic: String,
    pub n_paths: usize,
    pub seed: u64,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<(), StatsError> {
        if self.values.is_empty() {
            return Err(StatsError::InvalidPlan("no values".into()));
        }
        if self.n_paths == 0 {
            return Err(StatsError::InvalidPlan("n_paths must be positive".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::InvalidPlan("non-finite value".into()));
        }
        let up = self.values.windows(2).all(|w| w[1] > w[0]);
        let down = self.values.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            return Err(StatsError::InvalidPlan("values must be strictly monotone".into()));
        }
        Ok(())
    }
}

/// One value's statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub plan: SweepPlan,
    pub statistic: Vec<f64>,
    pub std_error: Vec<f64>,
    /// strictly decreasing with non-overlapping one-standard-error bars; None
    /// for fewer than two values
    pub trend_decreasing: Option<bool>,
    /// strictly decreasing point estimates, ignoring error bars
    pub point_decreasing: Option<bool>,
}

impl SweepResult {
    pub fn from_estimates(plan: SweepPlan, est: Vec<Estimate>) -> Result<Self, StatsError> {
        plan.validate()?;
        if est.len() != plan.values.len() {
            return Err(StatsError::InvalidPlan("one estimate per value required".into()));
        }
        if est.iter().any(|e| !e.std_error.is_finite() || e.std_error < 0.0) {
            return Err(StatsError::InvalidPlan("standard errors must be finite".into()));
        }
        let (statistic, std_error): (Vec<f64>, Vec<f64>) = est.iter().map(|e| (e.value, e.std_error)).unzip();
        let pairs = || statistic.windows(2).zip(std_error.windows(2));
        let (trend_decreasing, point_decreasing) = if statistic.len() < 2 {
            (None, None)
        } else {
            (
                Some(pairs().all(|(s, e)| s[1] + e[1] < s[0] - e[0])),
                Some(statistic.windows(2).all(|s| s[1] < s[0])),
            )
        };
        Ok(Self { plan, statistic, std_error, trend_decreasing, point_decreasing })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{},{},std_error,n_paths", self.plan.parameter.name(), self.plan.statistic)?;
        for i in 0..self.statistic.len() {
            writeln!(w, "{},{},{},{}", self.plan.values[i], self.statistic[i], self.std_error[i], self.plan.n_paths)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("sweep result serialises")
    }
}

/// Evaluates the statistic at every plan value, in order.
pub fn run_sweep<E: Display>(plan: &SweepPlan, eval: impl Fn(f64, &SweepPlan) -> Result<Estimate, E>) -> Result<SweepResult, StatsError> {
    plan.validate()?;
    let est = plan
        .values
        .iter()
        .map(|&v| eval(v, plan).map_err(|e| StatsError::Simulation { stream: 0, message: format!("at {} = {v}: {e}", plan.parameter.name()) }))
        .collect::<Result<Vec<_>, _>>()?;
    SweepResult::from_estimates(plan.clone(), est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnose::gamma_gap;
    use crate::integrate::{simulate_ito_limit, simulate_langevin_white};
    use crate::model::{DriftField, FrictionField};
    use crate::noise::{build_kernel, mollification_error, sample_wiener};

    fn const_spec() -> ModelSpec {
        let mut s = ModelSpec::new(FrictionField::constant(1, 2.0), DriftField::constant(vec![0.6]));
        s.q0 = vec![0.1];
        s
    }

    fn ito_ensemble(spec: &ModelSpec, seed: u64, n: usize, h: f64) -> Ensemble {
        Ensemble::generate(spec.clone(), seed, n, |s| {
            let p = sample_wiener(1, spec.t_end, h, seed, s).map_err(|e| e.to_string())?;
            simulate_ito_limit(spec, &p, h).map_err(|e| e.to_string())
        })
        .unwrap()
    }

    #[test]
    fn identical_ensembles_have_zero_distance() {
        let e = ito_ensemble(&const_spec(), 1, 50, 0.01);
        let d = coupled_sup_distance(&e, &e, 0.1).unwrap();
        assert_eq!((d.mean, d.median, d.q95, d.p_exceed, d.std_error), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn stream_and_grid_checks() {
        let s = const_spec();
        let a = ito_ensemble(&s, 1, 10, 0.01);
        let b = ito_ensemble(&s, 2, 10, 0.01);
        assert!(matches!(coupled_sup_distance(&a, &b, 0.1), Err(StatsError::StreamMismatch(_))));
        let c = ito_ensemble(&s, 1, 10, 0.003);
        assert!(matches!(coupled_sup_distance(&a, &c, 0.1), Err(StatsError::GridMismatch(_))));
        let m = a.members().to_vec();
        let dup = vec![m[0].clone(), m[0].clone()];
        assert_eq!(Ensemble::new(s.clone(), 1, dup), Err(StatsError::DuplicateStream(0)));
        assert_eq!(Ensemble::new(s, 1, vec![]), Err(StatsError::Empty));
    }

    #[test]
    fn commensurate_grids_compare_at_coarse_nodes() {
        let s = const_spec();
        let sim = |h: f64| {
            Ensemble::generate(s.clone(), 3, 20, |k| {
                let p = sample_wiener(1, 1.0, 0.005, 3, k).map_err(|e| e.to_string())?;
                simulate_ito_limit(&s, &p, h).map_err(|e| e.to_string())
            })
            .unwrap()
        };
        let (a, b) = (sim(0.01), sim(0.005));
        // constant coefficients: Euler is exact at nodes, so the coupled paths agree there
        let d = coupled_sup_distance(&a, &b, 1e-9).unwrap();
        assert!(d.mean < 1e-12, "{d:?}");
    }

    #[test]
    fn quantiles() {
        let d = summarize_distances((1..=101).map(f64::from).collect(), 50.0);
        assert_eq!(d.median, 51.0);
        assert_eq!(d.q95, 96.0);
        assert!((d.p_exceed - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn exact_mean_and_variance_oracles() {
        let s = const_spec();
        let e = ito_ensemble(&s, 4, 10_000, 0.05);
        let m = weak_error(&e, Functional::TerminalMean { coord: 0 }, 0.1 + 0.3);
        assert!(m.z.abs() <= 4.0, "{m:?}");
        let v = weak_error(&e, Functional::TerminalVariance { coord: 0 }, 0.25);
        assert!(v.z.abs() <= 4.0, "{v:?}");
        let m2 = weak_error(&e, Functional::TerminalSecondMoment { coord: 0 }, 0.25 + 0.16);
        assert!(m2.z.abs() <= 4.0, "{m2:?}");
        let c = weak_error(&e, Functional::TestFunction { coord: 0, f: TestFunction::Cosine(1.0) }, 0.4f64.cos() * (-0.125f64).exp());
        assert!(c.z.abs() <= 4.0, "{c:?}");
    }

    #[test]
    fn zero_noise_exact_match() {
        let mut s = const_spec();
        s.sigma = 0.0;
        let e = ito_ensemble(&s, 5, 10, 0.1);
        let w = weak_error(&e, Functional::TerminalMean { coord: 0 }, e.terminals(0)[0]);
        assert_eq!((w.std_error, w.z), (0.0, 0.0));
        let w = weak_error(&e, Functional::TerminalMean { coord: 0 }, 1.0);
        assert!(w.z.is_infinite());
    }

    fn plan(values: Vec<f64>) -> SweepPlan {
        SweepPlan { parameter: SweptParameter::Mu, values, pairing: "x".into(), statistic: "s".into(), n_paths: 1, seed: 0 }
    }

    #[test]
    fn plan_validation_and_single_value() {
        assert!(plan(vec![]).validate().is_err());
        assert!(plan(vec![1.0, 2.0, 1.5]).validate().is_err());
        assert!(plan(vec![1.0, 1.0]).validate().is_err());
        let r = run_sweep(&plan(vec![1e-2]), |v, _| Ok::<_, String>(Estimate { value: v, std_error: 0.0 })).unwrap();
        assert_eq!((r.trend_decreasing, r.point_decreasing), (None, None));
        let bad = SweepResult::from_estimates(plan(vec![1.0]), vec![Estimate { value: 1.0, std_error: f64::NAN }]);
        assert!(bad.is_err());
    }

    #[test]
    fn trend_uses_error_bars() {
        let est = |v: &[(f64, f64)]| v.iter().map(|&(value, std_error)| Estimate { value, std_error }).collect();
        let r = SweepResult::from_estimates(plan(vec![3.0, 2.0, 1.0]), est(&[(1.0, 0.1), (0.5, 0.1), (0.2, 0.05)])).unwrap();
        assert_eq!(r.trend_decreasing, Some(true));
        let r = SweepResult::from_estimates(plan(vec![3.0, 2.0, 1.0]), est(&[(1.0, 0.3), (0.5, 0.3), (0.2, 0.05)])).unwrap();
        assert_eq!((r.trend_decreasing, r.point_decreasing), (Some(false), Some(true)));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("mu,s,std_error,n_paths\n3,1,0.3,1\n"));
        assert_eq!(r.to_json()["plan"]["parameter"], "mu");
    }

    #[test]
    fn mollification_width_sweep_decreases() {
        let kernel = build_kernel(1024).unwrap();
        let mut p = plan(vec![0.1, 0.05, 0.025]);
        p.parameter = SweptParameter::Delta;
        p.n_paths = 200;
        let r = run_sweep(&p, |delta, pl| {
            let errs = map_streams(pl.n_paths, |s| {
                let w = sample_wiener(1, 1.0 + delta, delta / 20.0, pl.seed, s)?;
                mollification_error(&w, &kernel, delta, 1.0)
            })?;
            let (value, std_error) = mean_se(&errs);
            Ok::<_, StatsError>(Estimate { value, std_error })
        })
        .unwrap();
        assert_eq!(r.trend_decreasing, Some(true), "{r:?}");
    }

    #[test]
    fn gamma_gap_sweep_does_not_vanish() {
        let s = ModelSpec::new(FrictionField::clipped_linear(1, 0.7), DriftField::zero(1));
        let mut p = plan(vec![1e-2, 1e-3, 1e-4]);
        p.n_paths = 200;
        let r = run_sweep(&p, |mu, pl| {
            let row = &gamma_gap(&s, &[mu], pl.n_paths, pl.seed)?[0];
            Ok::<_, crate::diagnose::DiagnoseError>(Estimate { value: row.estimate, std_error: row.std_error })
        })
        .unwrap();
        assert_eq!(r.trend_decreasing, Some(false), "{r:?}");
    }

    #[test]
    fn independent_of_worker_count() {
        let s = const_spec();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let a = Ensemble::generate(s.clone(), 9, 64, |k| {
                    let p = sample_wiener(1, 1.0, 0.01, 9, k).map_err(|e| e.to_string())?;
                    simulate_langevin_white(&s, &p, 0.01).map_err(|e| e.to_string())
                })
                .unwrap();
                let b = ito_ensemble(&s, 9, 64, 0.01);
                (coupled_sup_distance(&a, &b, 0.05).unwrap(), weak_error(&a, Functional::TerminalVariance { coord: 0 }, 0.25))
            })
        };
        let (x, y) = (run(1), run(3));
        assert_eq!(x, y);
        assert_eq!(x.0.mean.to_bits(), y.0.mean.to_bits());
    }

    #[test]
    fn error_bar_calibration() {
        // exact one-step sampler: q_T ~ N(q0 + bT/lambda, T/lambda^2)
        let s = const_spec();
        let mut exceed = 0;
        for sweep in 0..100u64 {
            let e = ito_ensemble(&s, 1000 + sweep, 400, 1.0);
            if weak_error(&e, Functional::TerminalMean { coord: 0 }, 0.4).z.abs() > 2.0 {
                exceed += 1;
            }
        }
        assert!(exceed <= 10, "{exceed} of 100 sweeps with |z| > 2");
    }
}

//! One-dimensional generalized diffusions D_v D_u built from b and lambda.
//!
//! u(q) = int_0^q lambda e^{-2I}, v(q) = 2 int_0^q lambda e^{2I}, with
//! I(x) = int_0^x b lambda. Only lambda itself enters, never its derivative,
//! so step frictions are handled directly as long as the jumps sit on grid
//! nodes.

use crate::integrate::{simulate_limit, IntegrateError, LimitSampler};
use crate::model::{DriftField, FrictionField, ModelSpec};
use crate::noise::{sample_wiener, stream_rng, NoiseError};
use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GendiffError {
    #[error("jump of lambda at {0} is not a grid node")]
    JumpNotOnGrid(f64),
    #[error("0 must be a grid node")]
    ZeroNotOnGrid,
    #[error("grid must be strictly increasing with at least 3 nodes")]
    BadGrid,
    #[error("{0} is not a grid node")]
    NotOnGrid(f64),
    #[error("start {x0} outside ({lo}, {hi})")]
    StartOutside { x0: f64, lo: f64, hi: f64 },
    #[error("chain leaves grid range [{0}, {1}]")]
    LeavesGrid(f64, f64),
    #[error("scale/speed not strictly increasing at node {0}")]
    NotMonotone(usize),
    #[error("one-dimensional fields required")]
    Dimension,
    #[error("friction has no closed-form primitive")]
    NoPrimitive,
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

const GL_X: [f64; 5] = [0.0, -0.538_469_310_105_683_1, 0.538_469_310_105_683_1, -0.906_179_845_938_664, 0.906_179_845_938_664];
const GL_W: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

fn gauss(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (m, r) = (0.5 * (a + b), 0.5 * (b - a));
    GL_X.iter().zip(GL_W).map(|(x, w)| w * f(m + r * x)).sum::<f64>() * r
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSpeed {
    x: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    pub drift: DriftField,
    pub friction: FrictionField,
}

impl ScaleSpeed {
    pub fn grid(&self) -> &[f64] {
        &self.x
    }
    pub fn u(&self) -> &[f64] {
        &self.u
    }
    pub fn v(&self) -> &[f64] {
        &self.v
    }
    pub fn len(&self) -> usize {
        self.x.len()
    }
    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
    pub fn node_index(&self, y: f64) -> Option<usize> {
        node_index(&self.x, y)
    }
}

fn node_index(x: &[f64], y: f64) -> Option<usize> {
    let tol = 1e-12 * (1.0 + y.abs());
    let i = x.partition_point(|&g| g < y - tol);
    (i < x.len() && (x[i] - y).abs() <= tol).then_some(i)
}

/// Uniform grid of `n` cells on [lo, hi] that also contains 0 (and any
/// requested extra points) as nodes.
pub fn aligned_grid(lo: f64, hi: f64, n: usize, extra: &[f64]) -> Vec<f64> {
    let mut x: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    for &e in std::iter::once(&0.0).chain(extra) {
        if e > lo && e < hi && node_index(&x, e).is_none() {
            let i = x.partition_point(|&g| g < e);
            // snap the nearest node when it is close, to avoid sliver cells
            let near = if i > 0 && (e - x[i - 1]) < (x[i] - e) { i - 1 } else { i };
            if (x[near] - e).abs() < 0.25 * (hi - lo) / n as f64 && near != 0 && near != n {
                x[near] = e;
            } else {
                x.insert(i, e);
            }
        }
    }
    for v in x.iter_mut() {
        if v.abs() < 1e-14 * (hi - lo) {
            *v = 0.0;
        }
    }
    x
}

/// Nested Gauss-Legendre quadrature on each grid panel. Panels never straddle
/// a jump, so each panel integrand is smooth.
pub fn compute_scale_speed(b: &DriftField, lam: &FrictionField, grid: &[f64]) -> Result<ScaleSpeed, GendiffError> {
    if b.dim() != 1 || lam.dim() != 1 {
        return Err(GendiffError::Dimension);
    }
    if grid.len() < 3 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GendiffError::BadGrid);
    }
    for j in lam.jumps() {
        if j > grid[0] && j < grid[grid.len() - 1] && node_index(grid, j).is_none() {
            return Err(GendiffError::JumpNotOnGrid(j));
        }
    }
    let z = node_index(grid, 0.0).ok_or(GendiffError::ZeroNotOnGrid)?;
    let n = grid.len();
    let bl = |y: f64| b.eval1(y) * lam.eval(&[y]);
    // per panel: integral of b lambda, and the u, v increments relative to I at the left node
    let mut d_i = vec![0.0; n - 1];
    let mut du = vec![0.0; n - 1];
    let mut dv = vec![0.0; n - 1];
    for k in 0..n - 1 {
        let (a, c) = (grid[k], grid[k + 1]);
        d_i[k] = gauss(a, c, bl);
        du[k] = gauss(a, c, |y| lam.eval(&[y]) * (-2.0 * gauss(a, y, bl)).exp());
        dv[k] = 2.0 * gauss(a, c, |y| lam.eval(&[y]) * (2.0 * gauss(a, y, bl)).exp());
    }
    let mut i_node = vec![0.0; n];
    for k in z..n - 1 {
        i_node[k + 1] = i_node[k] + d_i[k];
    }
    for k in (0..z).rev() {
        i_node[k] = i_node[k + 1] - d_i[k];
    }
    let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
    for k in z..n - 1 {
        u[k + 1] = u[k] + (-2.0 * i_node[k]).exp() * du[k];
        v[k + 1] = v[k] + (2.0 * i_node[k]).exp() * dv[k];
    }
    for k in (0..z).rev() {
        u[k] = u[k + 1] - (-2.0 * i_node[k]).exp() * du[k];
        v[k] = v[k + 1] - (2.0 * i_node[k]).exp() * dv[k];
    }
    for k in 0..n - 1 {
        if u[k + 1] <= u[k] || v[k + 1] <= v[k] {
            return Err(GendiffError::NotMonotone(k));
        }
    }
    Ok(ScaleSpeed { x: grid.to_vec(), u, v, drift: b.clone(), friction: lam.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExitStats {
    pub lo: f64,
    pub hi: f64,
    pub x0: f64,
    pub p_right: f64,
    pub mean_time: f64,
    pub p_right_se: Option<f64>,
    pub mean_time_se: Option<f64>,
    pub n_chains: Option<usize>,
}

fn interval_nodes(ss: &ScaleSpeed, lo: f64, hi: f64, x0: f64) -> Result<(usize, usize, usize), GendiffError> {
    if !(x0 > lo && x0 < hi) {
        return Err(GendiffError::StartOutside { x0, lo, hi });
    }
    let (g0, g1) = (ss.x[0], ss.x[ss.len() - 1]);
    if lo < g0 - 1e-12 || hi > g1 + 1e-12 {
        return Err(GendiffError::LeavesGrid(g0, g1));
    }
    let idx = |y| ss.node_index(y).ok_or(GendiffError::NotOnGrid(y));
    Ok((idx(lo)?, idx(hi)?, idx(x0)?))
}

/// Exit statistics of (-a, b) from x0 by the scale/speed identities. The
/// Green-function integral against dv uses the Stieltjes trapezoid rule.
pub fn exit_stats_analytic(ss: &ScaleSpeed, a: f64, b: f64, x0: f64) -> Result<ExitStats, GendiffError> {
    let (ia, ib, i0) = interval_nodes(ss, -a, b, x0)?;
    let (ua, ub, u0) = (ss.u[ia], ss.u[ib], ss.u[i0]);
    let span = ub - ua;
    let green = |k: usize| {
        let (lo, hi) = if k <= i0 { (ss.u[k], u0) } else { (u0, ss.u[k]) };
        (lo - ua) * (ub - hi) / span
    };
    let mut t = 0.0;
    for k in ia..ib {
        t += 0.5 * (green(k) + green(k + 1)) * (ss.v[k + 1] - ss.v[k]);
    }
    Ok(ExitStats {
        lo: -a,
        hi: b,
        x0,
        p_right: (u0 - ua) / span,
        mean_time: t,
        p_right_se: None,
        mean_time_se: None,
        n_chains: None,
    })
}

/// Exit-right probability from 0 for step(l1, l2) on (-a, b).
pub fn glued_exit_probability(l1: f64, l2: f64, a: f64, b: f64) -> f64 {
    l1 * a / (l1 * a + l2 * b)
}

/// Interval exit, optionally cut off at a time horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StoppingRule {
    pub lo: f64,
    pub hi: f64,
    pub horizon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GendiffRun {
    pub stats: ExitStats,
    /// (time, position) of chain 0, including the final node
    pub sample_path: Vec<(f64, f64)>,
    /// chains that hit an end of the interval before the horizon
    pub n_exited: usize,
}

struct Chain {
    right: Vec<u64>,
    hold: Vec<f64>,
}

fn chain_tables(ss: &ScaleSpeed, ia: usize, ib: usize) -> Chain {
    let n = ss.len();
    let (mut right, mut hold) = (vec![0u64; n], vec![0.0; n]);
    for i in ia + 1..ib {
        let (ul, uc, ur) = (ss.u[i - 1], ss.u[i], ss.u[i + 1]);
        let p = (uc - ul) / (ur - ul);
        right[i] = if p >= 1.0 { u64::MAX } else { (p * 18_446_744_073_709_551_616.0) as u64 };
        let g = (uc - ul) * (ur - uc) / (ur - ul);
        hold[i] = 0.5 * g * (ss.v[i + 1] - ss.v[i - 1]);
    }
    Chain { right, hold }
}

/// Embedded-chain simulation with deterministic per-cell mean holding times.
/// Chain k draws from stream k of `seed`; results are reduced in chain order.
pub fn simulate_gendiff(ss: &ScaleSpeed, x0: f64, rule: StoppingRule, seed: u64, n_chains: usize) -> Result<GendiffRun, GendiffError> {
    let (ia, ib, i0) = interval_nodes(ss, rule.lo, rule.hi, x0)?;
    let tab = chain_tables(ss, ia, ib);
    let horizon = rule.horizon.unwrap_or(f64::INFINITY);
    let walk = |k: usize, mut record: Option<&mut Vec<(f64, f64)>>| -> (usize, f64) {
        let mut rng = stream_rng(seed, k as u64, 0);
        let (mut i, mut t) = (i0, 0.0);
        while i != ia && i != ib {
            let next_t = t + tab.hold[i];
            if next_t > horizon {
                t = horizon;
                break;
            }
            t = next_t;
            let up = (rng.next_u64() < tab.right[i]) as usize;
            i = i + 2 * up - 1;
            if let Some(r) = record.as_deref_mut() {
                r.push((t, ss.x[i]));
            }
        }
        (i, t)
    };
    let mut sample_path = vec![(0.0, x0)];
    walk(0, Some(&mut sample_path));
    let outcomes: Vec<(usize, f64)> = (0..n_chains).into_par_iter().map(|k| walk(k, None)).collect();
    let n = n_chains as f64;
    let hits = outcomes.iter().filter(|o| o.0 == ib).count() as f64;
    let n_exited = outcomes.iter().filter(|o| o.0 == ia || o.0 == ib).count();
    let p = hits / n;
    let mean_t = outcomes.iter().map(|o| o.1).sum::<f64>() / n;
    let var_t = outcomes.iter().map(|o| (o.1 - mean_t).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(GendiffRun {
        stats: ExitStats {
            lo: rule.lo,
            hi: rule.hi,
            x0,
            p_right: p,
            mean_time: mean_t,
            p_right_se: Some((p * (1.0 - p) / n).sqrt()),
            mean_time_se: Some((var_t / n).sqrt()),
            n_chains: Some(n_chains),
        },
        sample_path,
        n_exited,
    })
}

/// Exact expected exit clock of the embedded chain (no Monte Carlo), from the
/// tridiagonal first-step equations. Isolates the grid bias of the chain.
pub fn chain_expected_exit(ss: &ScaleSpeed, lo: f64, hi: f64, x0: f64) -> Result<f64, GendiffError> {
    let (ia, ib, i0) = interval_nodes(ss, lo, hi, x0)?;
    let m = ib - ia - 1;
    // T_i - p_i T_{i+1} - (1 - p_i) T_{i-1} = H_i, T = 0 at both ends
    let (mut c_prime, mut d_prime) = (vec![0.0; m], vec![0.0; m]);
    for j in 0..m {
        let i = ia + 1 + j;
        let (ul, uc, ur) = (ss.u[i - 1], ss.u[i], ss.u[i + 1]);
        let p = (uc - ul) / (ur - ul);
        let hold = 0.5 * (uc - ul) * (ur - uc) / (ur - ul) * (ss.v[i + 1] - ss.v[i - 1]);
        let (a, c) = (-(1.0 - p), -p);
        let (cp, dp) = if j == 0 { (0.0, 0.0) } else { (c_prime[j - 1], d_prime[j - 1]) };
        let denom = 1.0 - a * cp;
        c_prime[j] = c / denom;
        d_prime[j] = (hold - a * dp) / denom;
    }
    let mut t = vec![0.0; m];
    for j in (0..m).rev() {
        t[j] = d_prime[j] - if j + 1 < m { c_prime[j] * t[j + 1] } else { 0.0 };
    }
    Ok(t[i0 - ia - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExitRow {
    pub case: String,
    pub analytic: f64,
    pub empirical: f64,
    pub std_error: f64,
}

pub fn write_exit_csv<W: Write>(rows: &[ExitRow], mut w: W) -> io::Result<()> {
    writeln!(w, "case,analytic,empirical,std_error")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.case, r.analytic, r.empirical, r.std_error)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AveragingRow {
    pub eps: f64,
    pub variance: f64,
    pub variance_se: f64,
    /// sigma^2 T / lambda_bar^2
    pub oracle: f64,
    /// RMS of q_T - sigma W_T / lambda_bar on the same noise
    pub coupled_gap: f64,
    pub coupled_gap_se: f64,
    pub n_paths: usize,
}

/// Var(q_T) for the limit equation with lambda(q) = cell(q/eps), b = 0,
/// sigma = 1, q0 = 0, one row per eps.
pub fn averaging_check(
    cell: &FrictionField,
    eps_list: &[f64],
    t_end: f64,
    n_paths: usize,
    seed: u64,
    h: f64,
    sampler: LimitSampler,
) -> Result<Vec<AveragingRow>, GendiffError> {
    if cell.dim() != 1 {
        return Err(GendiffError::Dimension);
    }
    let bar = match (cell.primitive_q1(1.0), cell.primitive_q1(0.0)) {
        (Some(a), Some(b)) => a - b,
        _ => return Err(GendiffError::NoPrimitive),
    };
    let mut rows = Vec::new();
    for &eps in eps_list {
        let mut spec = ModelSpec::new(FrictionField::rescaled(cell.clone(), eps), DriftField::zero(1));
        spec.t_end = t_end;
        let pairs: Vec<(f64, f64)> = (0..n_paths as u64)
            .into_par_iter()
            .map(|stream| -> Result<(f64, f64), GendiffError> {
                let path = sample_wiener(1, t_end, h, seed, stream)?;
                let tr = simulate_limit(sampler, &spec, &path, h)?;
                let q = tr.terminal()[0];
                let w = path.node(tr.steps() * (h / path.dt()).round() as usize)[0];
                Ok((q, q - spec.sigma * w / bar))
            })
            .collect::<Result<_, _>>()?;
        let n = n_paths as f64;
        let m = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let m2 = pairs.iter().map(|p| (p.0 - m).powi(2)).sum::<f64>() / n;
        let m4 = pairs.iter().map(|p| (p.0 - m).powi(4)).sum::<f64>() / n;
        let g2: Vec<f64> = pairs.iter().map(|p| p.1 * p.1).collect();
        let gm = g2.iter().sum::<f64>() / n;
        let gv = g2.iter().map(|g| (g - gm).powi(2)).sum::<f64>() / (n - 1.0);
        let rms = gm.sqrt();
        rows.push(AveragingRow {
            eps,
            variance: m2 * n / (n - 1.0),
            variance_se: ((m4 - m2 * m2) / n).max(0.0).sqrt(),
            oracle: spec.sigma * spec.sigma * t_end / (bar * bar),
            coupled_gap: rms,
            // delta method for the square root of a mean
            coupled_gap_se: if rms > 0.0 { (gv / n).sqrt() / (2.0 * rms) } else { 0.0 },
            n_paths,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ss(b: DriftField, lam: FrictionField, n: usize) -> ScaleSpeed {
        compute_scale_speed(&b, &lam, &aligned_grid(-1.0, 2.0, n, &[])).unwrap()
    }

    #[test]
    fn constant_friction_scale() {
        let s = ss(DriftField::zero(1), FrictionField::constant(1, 3.0), 30);
        for k in 0..s.len() {
            assert!((s.u()[k] - 3.0 * s.grid()[k]).abs() < 1e-13);
            assert!((s.v()[k] - 6.0 * s.grid()[k]).abs() < 1e-13);
        }
    }

    #[test]
    fn step_friction_scale() {
        let s = ss(DriftField::zero(1), FrictionField::step(1.0, 2.0), 30);
        for k in 0..s.len() {
            let x = s.grid()[k];
            let want = if x <= 0.0 { x } else { 2.0 * x };
            assert!((s.u()[k] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn unit_drift_scale_closed_form() {
        let s = ss(DriftField::constant(vec![1.0]), FrictionField::constant(1, 1.0), 60);
        for k in 0..s.len() {
            let x = s.grid()[k];
            assert!((s.u()[k] - 0.5 * (1.0 - (-2.0 * x).exp())).abs() < 1e-12);
            assert!((s.v()[k] - ((2.0 * x).exp() - 1.0)).abs() < 1e-10 * (2.0 * x).exp());
        }
    }

    #[test]
    fn grid_errors() {
        let b = DriftField::zero(1);
        let off: Vec<f64> = (0..11).map(|i| -1.05 + 0.2 * i as f64).collect();
        assert_eq!(compute_scale_speed(&b, &FrictionField::step(1.0, 2.0), &off), Err(GendiffError::JumpNotOnGrid(0.0)));
        assert_eq!(compute_scale_speed(&b, &FrictionField::constant(1, 1.0), &off), Err(GendiffError::ZeroNotOnGrid));
        assert_eq!(compute_scale_speed(&b, &FrictionField::constant(1, 1.0), &[0.0, 1.0]), Err(GendiffError::BadGrid));
        let s = ss(b, FrictionField::constant(1, 1.0), 30);
        assert!(matches!(exit_stats_analytic(&s, 1.0, 1.0, 1.5), Err(GendiffError::StartOutside { .. })));
        assert!(matches!(exit_stats_analytic(&s, 3.0, 1.0, 0.0), Err(GendiffError::LeavesGrid(..))));
    }

    #[test]
    fn analytic_exit_examples() {
        let g = aligned_grid(-1.0, 2.0, 300, &[]);
        let z = DriftField::zero(1);
        let one = compute_scale_speed(&z, &FrictionField::constant(1, 1.0), &g).unwrap();
        let e = exit_stats_analytic(&one, 1.0, 1.0, 0.0).unwrap();
        assert!((e.p_right - 0.5).abs() < 1e-12 && (e.mean_time - 1.0).abs() < 1e-12);
        for c in [0.5, 1.0, 3.0] {
            let s = compute_scale_speed(&z, &FrictionField::constant(1, c), &g).unwrap();
            let e = exit_stats_analytic(&s, 1.0, 2.0, 0.0).unwrap();
            assert!((e.mean_time - 2.0 * c * c).abs() < 1e-11 * c * c);
        }
        let st = compute_scale_speed(&z, &FrictionField::step(1.0, 2.0), &g).unwrap();
        let e = exit_stats_analytic(&st, 1.0, 1.0, 0.0).unwrap();
        assert!((e.p_right - 1.0 / 3.0).abs() < 1e-13);
        assert!((e.p_right - glued_exit_probability(1.0, 2.0, 1.0, 1.0)).abs() < 1e-13);
    }

    #[test]
    fn glued_formula() {
        assert!((glued_exit_probability(2.0, 2.0, 1.0, 3.0) - 0.25).abs() < 1e-15);
        assert!((glued_exit_probability(1.0, 2.0, 1.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!(glued_exit_probability(1.0, 2.0, 1e-12, 1.0) < 1e-11);
    }

    #[test]
    fn smoothed_step_converges() {
        // reference values from an independent high-precision quadrature
        let oracle = [(0.2, 0.356436726055357616), (0.05, 0.339109559837999545), (0.0125, 0.334777389959499886)];
        let g = aligned_grid(-1.0, 1.0, 4000, &[]);
        let mut prev = f64::INFINITY;
        for (w, want) in oracle {
            let s = compute_scale_speed(&DriftField::zero(1), &FrictionField::tanh_ramp(1, 1.0, 2.0, w), &g).unwrap();
            let p = exit_stats_analytic(&s, 1.0, 1.0, 0.0).unwrap().p_right;
            assert!((p - want).abs() < 1e-10, "w {w}: {p}");
            let gap = p - 1.0 / 3.0;
            assert!(gap > 0.0 && gap < prev);
            prev = gap;
        }
        assert!(prev < 0.01);
    }

    #[test]
    fn chain_matches_analytic() {
        let g = aligned_grid(-1.0, 1.0, 200, &[]);
        let z = DriftField::zero(1);
        let rule = StoppingRule { lo: -1.0, hi: 1.0, horizon: None };
        let one = compute_scale_speed(&z, &FrictionField::constant(1, 1.0), &g).unwrap();
        let r = simulate_gendiff(&one, 0.0, rule, 11, 20_000).unwrap();
        let (p, se) = (r.stats.p_right, r.stats.p_right_se.unwrap());
        assert!((p - 0.5).abs() < 4.0 * se);
        assert!((r.stats.mean_time - 1.0).abs() < 4.0 * r.stats.mean_time_se.unwrap());
        assert_eq!(r.n_exited, 20_000);
        assert!(r.sample_path.last().unwrap().1.abs() == 1.0);

        let st = compute_scale_speed(&z, &FrictionField::step(1.0, 2.0), &g).unwrap();
        let r = simulate_gendiff(&st, 0.0, rule, 12, 20_000).unwrap();
        assert!((r.stats.p_right - 1.0 / 3.0).abs() < 4.0 * r.stats.p_right_se.unwrap());
    }

    #[test]
    fn chain_is_deterministic_and_respects_horizon() {
        let g = aligned_grid(-1.0, 1.0, 100, &[]);
        let s = compute_scale_speed(&DriftField::zero(1), &FrictionField::step(1.0, 2.0), &g).unwrap();
        let rule = StoppingRule { lo: -1.0, hi: 1.0, horizon: Some(0.05) };
        let a = simulate_gendiff(&s, 0.0, rule, 5, 500).unwrap();
        let b = simulate_gendiff(&s, 0.0, rule, 5, 500).unwrap();
        assert_eq!(a, b);
        assert!(a.stats.mean_time <= 0.05 + 1e-15);
        assert!(a.n_exited < 500);
    }

    #[test]
    fn chain_mean_clock_exact_for_brownian() {
        let g = aligned_grid(-1.0, 1.0, 200, &[]);
        let s = compute_scale_speed(&DriftField::zero(1), &FrictionField::constant(1, 1.0), &g).unwrap();
        assert!((chain_expected_exit(&s, -1.0, 1.0, 0.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn chain_bias_shrinks_under_refinement() {
        let lam = FrictionField::sine_angular(2.0, 0.8, 3.0);
        let b = DriftField::constant(vec![0.3]);
        let fine = compute_scale_speed(&b, &lam, &aligned_grid(-1.0, 1.0, 8000, &[])).unwrap();
        let truth = exit_stats_analytic(&fine, 1.0, 1.0, 0.0).unwrap().mean_time;
        let mut prev = f64::INFINITY;
        for n in [50, 100, 200] {
            let s = compute_scale_speed(&b, &lam, &aligned_grid(-1.0, 1.0, n, &[])).unwrap();
            let gap = (chain_expected_exit(&s, -1.0, 1.0, 0.0).unwrap() - truth).abs();
            assert!(gap < prev, "n {n}: {gap}");
            prev = gap;
        }
    }

    #[test]
    fn averaging_constant_and_sine() {
        let two = FrictionField::constant(1, 2.0);
        let r = averaging_check(&two, &[0.1], 1.0, 4000, 1, 0.25, LimitSampler::ScaleTransform).unwrap();
        assert!((r[0].variance - 0.25).abs() < 4.0 * r[0].variance_se);
        assert!(r[0].coupled_gap < 1e-12);

        let sine = FrictionField::sinusoidal(2.0, 1.0, vec![1.0]);
        let rows = averaging_check(&sine, &[0.1, 0.03, 0.01], 1.0, 4000, 2, 0.25, LimitSampler::ScaleTransform).unwrap();
        assert!((rows[2].variance - 0.25).abs() < 0.05 * 0.25);
        assert!(rows.windows(2).all(|w| w[1].coupled_gap < w[0].coupled_gap));
        assert!((rows[0].oracle - 0.25).abs() < 1e-12);
    }

    #[test]
    fn euler_sampler_runs() {
        let two = FrictionField::constant(1, 2.0);
        let r = averaging_check(&two, &[0.1], 1.0, 2000, 1, 0.01, LimitSampler::ItoEuler).unwrap();
        assert!((r[0].variance - 0.25).abs() < 4.0 * r[0].variance_se);
    }

    #[test]
    fn exit_csv_header() {
        let mut buf = Vec::new();
        write_exit_csv(&[ExitRow { case: "bm".into(), analytic: 0.5, empirical: 0.49, std_error: 0.01 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "case,analytic,empirical,std_error\nbm,0.5,0.49,0.01\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn monotone_and_probability_in_range(l1 in 0.3f64..4.0, l2 in 0.3f64..4.0, b0 in -1.0f64..1.0, x0i in 1usize..59) {
                let g = aligned_grid(-1.0, 2.0, 60, &[]);
                let s = compute_scale_speed(&DriftField::constant(vec![b0]), &FrictionField::step(l1, l2), &g).unwrap();
                prop_assert!(s.u().windows(2).all(|w| w[1] > w[0]));
                prop_assert!(s.v().windows(2).all(|w| w[1] > w[0]));
                let z = s.node_index(0.0).unwrap();
                prop_assert!(s.u()[z] == 0.0 && s.v()[z] == 0.0);
                let x0 = g[x0i];
                let e = exit_stats_analytic(&s, 1.0, 2.0, x0).unwrap();
                prop_assert!((0.0..=1.0).contains(&e.p_right));
                prop_assert!(e.mean_time >= 0.0);
            }

            #[test]
            fn glued_matches_scale_ratio(l1 in 0.3f64..4.0, l2 in 0.3f64..4.0, ai in 1usize..30, bi in 1usize..30) {
                let g = aligned_grid(-1.0, 1.0, 60, &[]);
                let s = compute_scale_speed(&DriftField::zero(1), &FrictionField::step(l1, l2), &g).unwrap();
                let (a, b) = (ai as f64 / 30.0, bi as f64 / 30.0);
                let e = exit_stats_analytic(&s, a, b, 0.0).unwrap();
                prop_assert!((e.p_right - glued_exit_probability(l1, l2, a, b)).abs() < 1e-12);
            }
        }
    }
}

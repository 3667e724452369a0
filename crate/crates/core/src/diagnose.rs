//! Path decomposition q_t = q + alpha + beta + gamma of the inertial system and
//! the Monte Carlo diagnostics built on it.
//!
//! alpha carries the initial momentum, beta the drift and gamma the noise,
//! each filtered through exp(-(A(t) - A(s))/mu) with A the friction action.
//! The nested integrals are evaluated by product integration with lambda and
//! b frozen on each step, i.e. exactly for the dynamics the white-noise
//! integrator realises, so the reconstruction residual is at roundoff level.

use crate::integrate::{ou_coeffs, simulate_langevin_white, EquationTag, IntegrateError, Trajectory};
use crate::model::{FrictionField, ModelSpec};
use crate::noise::{sample_wiener, NoiseError, WienerPath};
use rayon::prelude::*;
use serde::Serialize;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnoseError {
    #[error("trajectory and path do not share grid and stream: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// A(mu, t) = integral of lambda(q_s) ds by the trapezoid rule on the grid.
pub fn friction_action(traj: &Trajectory, friction: &FrictionField) -> Vec<f64> {
    let mut a = Vec::with_capacity(traj.len());
    a.push(0.0);
    let mut prev = friction.eval(traj.q(0));
    for n in 1..traj.len() {
        let cur = friction.eval(traj.q(n));
        a.push(a[n - 1] + 0.5 * (prev + cur) * traj.h);
        prev = cur;
    }
    a
}

/// Quadrature allowance 10 h (1 + T)(sigma + |b|_inf + |p0|).
pub fn tol_quad(spec: &ModelSpec, h: f64) -> f64 {
    let p0 = spec.p0.iter().map(|x| x * x).sum::<f64>().sqrt();
    10.0 * h * (1.0 + spec.t_end) * (spec.sigma + spec.drift.bound() + p0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub dim: usize,
    pub h: f64,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    /// Friction action with lambda frozen on steps (slope lambda_n on step n).
    pub action: Vec<f64>,
    residual: Vec<f64>,
    /// Running sigma * sum dW / lambda(q_n): the Ito integral the naive limit predicts.
    ito_noise: Vec<f64>,
    /// Running sum of h b(q_n)/lambda(q_n).
    drift_integral: Vec<f64>,
}

impl Decomposition {
    fn row(v: &[f64], n: usize, d: usize) -> &[f64] {
        &v[n * d..(n + 1) * d]
    }
    pub fn len(&self) -> usize {
        self.action.len()
    }
    pub fn is_empty(&self) -> bool {
        self.action.is_empty()
    }
    pub fn alpha(&self, n: usize) -> &[f64] {
        Self::row(&self.alpha, n, self.dim)
    }
    pub fn beta(&self, n: usize) -> &[f64] {
        Self::row(&self.beta, n, self.dim)
    }
    pub fn gamma(&self, n: usize) -> &[f64] {
        Self::row(&self.gamma, n, self.dim)
    }
    pub fn residual(&self, n: usize) -> &[f64] {
        Self::row(&self.residual, n, self.dim)
    }
    pub fn ito_noise(&self, n: usize) -> &[f64] {
        Self::row(&self.ito_noise, n, self.dim)
    }
    pub fn drift_integral(&self, n: usize) -> &[f64] {
        Self::row(&self.drift_integral, n, self.dim)
    }
    pub fn max_residual(&self) -> f64 {
        self.residual.iter().fold(0.0f64, |m, r| m.max(r.abs()))
    }
    pub fn last(&self) -> usize {
        self.len() - 1
    }
}

pub fn decompose(spec: &ModelSpec, traj: &Trajectory, path: &WienerPath) -> Result<Decomposition, DiagnoseError> {
    if traj.tag != EquationTag::LangevinWhite {
        return Err(DiagnoseError::GridMismatch(format!("expected a langevin-white trajectory, got {}", traj.tag.name())));
    }
    if traj.seed != path.seed() || traj.stream != path.stream() {
        return Err(DiagnoseError::GridMismatch("seed/stream differ".into()));
    }
    let stride = (traj.h / path.dt()).round() as usize;
    if stride == 0 || (stride as f64 * path.dt() - traj.h).abs() > 1e-9 * traj.h || traj.steps() * stride > path.n_steps() {
        return Err(DiagnoseError::GridMismatch(format!("h = {} against dt = {}", traj.h, path.dt())));
    }
    if traj.dim != spec.dim || path.dim() != spec.dim {
        return Err(DiagnoseError::GridMismatch("dimension".into()));
    }
    let d = spec.dim;
    let (h, mu, sigma) = (traj.h, spec.mu, spec.sigma);
    let len = traj.len();
    let mut out = Decomposition {
        dim: d,
        h,
        alpha: vec![0.0; len * d],
        beta: vec![0.0; len * d],
        gamma: vec![0.0; len * d],
        action: vec![0.0; len],
        residual: vec![0.0; len * d],
        ito_noise: vec![0.0; len * d],
        drift_integral: vec![0.0; len * d],
    };
    // momentum pieces driven by drift (bm) and by noise (gm, per unit sigma)
    let (mut bm, mut gm) = (vec![0.0; d], vec![0.0; d]);
    let (mut b, mut dw) = (vec![0.0; d], vec![0.0; d]);
    // exp(-A_n / mu), updated multiplicatively
    let mut decay = 1.0;
    for n in 0..traj.steps() {
        let q = traj.q(n);
        let lam = spec.friction.eval(q);
        spec.drift.eval_into(q, &mut b);
        let (e, p1, _) = ou_coeffs(lam * h / mu);
        let c = h * p1;
        path.increment(n, stride, &mut dw);
        let (p0, p1) = (traj.p(n).expect("momentum"), traj.p(n + 1).expect("momentum"));
        for i in 0..d {
            let (cur, next) = (n * d + i, (n + 1) * d + i);
            let bl = b[i] / lam;
            out.alpha[next] = out.alpha[cur] + spec.p0[i] * decay * c;
            out.beta[next] = out.beta[cur] + bm[i] * c + bl * (h - c);
            bm[i] = e * bm[i] + bl * (1.0 - e);
            let big_x = if sigma > 0.0 { mu / sigma * (p1[i] - e * p0[i] - bl * (1.0 - e)) } else { 0.0 };
            out.gamma[next] = out.gamma[cur] + sigma * (gm[i] * c + (dw[i] - big_x) / lam);
            gm[i] = e * gm[i] + big_x / mu;
            out.ito_noise[next] = out.ito_noise[cur] + sigma * dw[i] / lam;
            out.drift_integral[next] = out.drift_integral[cur] + bl * h;
        }
        out.action[n + 1] = out.action[n] + lam * h;
        decay *= e;
    }
    for n in 0..len {
        for i in 0..d {
            let k = n * d + i;
            out.residual[k] = traj.q(n)[i] - spec.q0[i] - out.alpha[k] - out.beta[k] - out.gamma[k];
        }
    }
    Ok(out)
}

/// Step used for a given mass: s steps per fastest relaxation time mu/Lambda,
/// never coarser than 1e-3, adjusted so that T is a whole number of steps.
/// Constant friction needs no resolution of the relaxation, since the
/// frozen-coefficient step is then exact.
pub fn resolving_step(spec: &ModelSpec, mu: f64, steps_per_relaxation: f64) -> f64 {
    let f = &spec.friction;
    let raw = if f.lower_bound() == f.upper_bound() {
        1e-3
    } else {
        (mu / (steps_per_relaxation * f.upper_bound())).min(1e-3)
    };
    let n = (spec.t_end / raw).ceil();
    spec.t_end / n
}

/// One row per mass of the decomposition diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub mu: f64,
    pub h: f64,
    pub n_paths: usize,
    /// E|gamma(T) - sigma int lambda^{-1} dW|^2
    pub gamma_gap: f64,
    pub gamma_gap_se: f64,
    /// E|alpha(T)|^2
    pub alpha_sq: f64,
    pub alpha_sq_se: f64,
    /// E|beta(T) - int b/lambda ds|^2
    pub beta_residual: f64,
    pub beta_residual_se: f64,
    /// worst reconstruction residual over all paths, and its allowance
    pub max_residual: f64,
    pub tol_quad: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, (v / n).sqrt())
}

/// Simulates `n_paths` inertial paths per mass (stream = path index) and
/// reduces the decomposition observables at T in stream order.
pub fn diagnostic_sweep(
    spec: &ModelSpec,
    mu_list: &[f64],
    n_paths: usize,
    seed: u64,
    steps_per_relaxation: f64,
) -> Result<Vec<DiagnosticRow>, DiagnoseError> {
    let mut rows = Vec::new();
    for &mu in mu_list {
        let mut s = spec.clone();
        s.mu = mu;
        let h = resolving_step(&s, mu, steps_per_relaxation);
        let per_path: Vec<[f64; 4]> = (0..n_paths as u64)
            .into_par_iter()
            .map(|stream| -> Result<[f64; 4], DiagnoseError> {
                let path = sample_wiener(s.dim, s.t_end, h, seed, stream)?;
                let tr = simulate_langevin_white(&s, &path, h)?;
                let dec = decompose(&s, &tr, &path)?;
                let n = dec.last();
                let sq = |f: &dyn Fn(usize) -> f64| (0..s.dim).map(f).map(|x| x * x).sum::<f64>();
                Ok([
                    sq(&|i| dec.gamma(n)[i] - dec.ito_noise(n)[i]),
                    sq(&|i| dec.alpha(n)[i]),
                    sq(&|i| dec.beta(n)[i] - dec.drift_integral(n)[i]),
                    dec.max_residual(),
                ])
            })
            .collect::<Result<_, _>>()?;
        let col = |k: usize| per_path.iter().map(|r| r[k]).collect::<Vec<_>>();
        let (g, gse) = mean_se(&col(0));
        let (a, ase) = mean_se(&col(1));
        let (b, bse) = mean_se(&col(2));
        let max_residual = col(3).into_iter().fold(0.0, f64::max);
        rows.push(DiagnosticRow {
            mu,
            h,
            n_paths,
            gamma_gap: g,
            gamma_gap_se: gse,
            alpha_sq: a,
            alpha_sq_se: ase,
            beta_residual: b,
            beta_residual_se: bse,
            max_residual,
            tol_quad: tol_quad(&s, h),
        });
    }
    Ok(rows)
}

/// One Monte Carlo estimate per swept value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McRow {
    pub mu: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// G(mu) = E|gamma(mu) - int_0^T lambda(q_s)^{-1} dW_s|^2 (sigma-scaled).
pub fn gamma_gap(spec: &ModelSpec, mu_list: &[f64], n_paths: usize, seed: u64) -> Result<Vec<McRow>, DiagnoseError> {
    Ok(diagnostic_sweep(spec, mu_list, n_paths, seed, 8.0)?
        .into_iter()
        .map(|r| McRow { mu: r.mu, estimate: r.gamma_gap, std_error: r.gamma_gap_se, n_paths })
        .collect())
}

/// (E|alpha|^2, E|beta - int b/lambda|^2) per mass.
pub fn alpha_beta_residuals(
    spec: &ModelSpec,
    mu_list: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<(McRow, McRow)>, DiagnoseError> {
    Ok(diagnostic_sweep(spec, mu_list, n_paths, seed, 8.0)?
        .into_iter()
        .map(|r| {
            (
                McRow { mu: r.mu, estimate: r.alpha_sq, std_error: r.alpha_sq_se, n_paths },
                McRow { mu: r.mu, estimate: r.beta_residual, std_error: r.beta_residual_se, n_paths },
            )
        })
        .collect())
}

pub fn write_mc_csv<W: Write>(rows: &[McRow], mut w: W) -> io::Result<()> {
    writeln!(w, "mu,estimate,std_error,n_paths")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.mu, r.estimate, r.std_error, r.n_paths)?;
    }
    Ok(())
}

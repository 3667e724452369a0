//! Time steppers for the inertial system (white or mollified forcing) and for
//! the first-order candidate limits.

use crate::model::{validate_model, FrictionField, ModelSpec};
use crate::noise::{MollifiedNoise, WienerPath};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

/// |q| beyond this aborts the run; bounded coefficients make it unreachable.
pub const BLOW_UP: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("step friction unsupported by integrators")]
    Unsupported,
    #[error("blow-up at step {step}: |q| = {norm}")]
    BlowUp { step: usize, norm: f64 },
    #[error("step h = {h} is not a positive multiple of the noise step {dt}")]
    StepMismatch { h: f64, dt: f64 },
    #[error("step h = {h} exceeds the resolution limit {limit}")]
    StepTooLarge { h: f64, limit: f64 },
    #[error("noise is tabulated up to t = {have}, the run needs t = {need}")]
    ShortNoise { have: f64, need: f64 },
    #[error("noise dimension {got} differs from model dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("scale-transform sampling needs friction depending on q1 alone with a closed-form primitive")]
    NoPrimitive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquationTag {
    LangevinWhite,
    LangevinMollified,
    ItoLimit,
    StratonovichLimit,
    SmoothLimitOde,
    /// Euler-Maruyama on dq = (b/lambda) dt + (sigma/lambda) dW, no correction.
    ClassicalLimit,
    /// Exact-in-law sampler of the Ito limit through the primitive of lambda.
    ScaleTransform,
}

impl EquationTag {
    pub fn name(self) -> &'static str {
        match self {
            Self::LangevinWhite => "langevin-white",
            Self::LangevinMollified => "langevin-mollified",
            Self::ItoLimit => "ito-limit",
            Self::StratonovichLimit => "stratonovich-limit",
            Self::SmoothLimitOde => "smooth-limit-ode",
            Self::ClassicalLimit => "classical-limit",
            Self::ScaleTransform => "scale-transform",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub tag: EquationTag,
    pub h: f64,
    pub dim: usize,
    pub seed: u64,
    pub stream: u64,
    q: Vec<f64>,
    p: Option<Vec<f64>>,
}

impl Trajectory {
    /// Assembles a trajectory from row-major node values.
    pub fn from_parts(tag: EquationTag, h: f64, dim: usize, seed: u64, stream: u64, q: Vec<f64>, p: Option<Vec<f64>>) -> Self {
        assert!(dim > 0 && q.len() % dim == 0 && !q.is_empty());
        assert!(p.as_ref().map_or(true, |p| p.len() == q.len()));
        Trajectory { tag, h, dim, seed, stream, q, p }
    }

    /// Number of grid nodes (steps + 1).
    pub fn len(&self) -> usize {
        self.q.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
    pub fn steps(&self) -> usize {
        self.len() - 1
    }
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.h
    }
    pub fn q(&self, n: usize) -> &[f64] {
        &self.q[n * self.dim..(n + 1) * self.dim]
    }
    pub fn p(&self, n: usize) -> Option<&[f64]> {
        self.p.as_ref().map(|p| &p[n * self.dim..(n + 1) * self.dim])
    }
    pub fn has_momentum(&self) -> bool {
        self.p.is_some()
    }
    pub fn terminal(&self) -> &[f64] {
        self.q(self.len() - 1)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "t")?;
        for k in 1..=self.dim {
            write!(w, ",q_{k}")?;
        }
        if self.p.is_some() {
            for k in 1..=self.dim {
                write!(w, ",p_{k}")?;
            }
        }
        writeln!(w)?;
        for n in 0..self.len() {
            write!(w, "{}", self.time(n))?;
            for x in self.q(n).iter().chain(self.p(n).unwrap_or(&[])) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// JSON sidecar: equation tag, provenance and the full parameter set.
    pub fn sidecar(&self, spec: &ModelSpec) -> serde_json::Value {
        serde_json::json!({
            "equation": self.tag.name(),
            "h": self.h,
            "steps": self.steps(),
            "seed": self.seed,
            "stream": self.stream,
            "model": spec,
        })
    }
}

// phi_1(x) = (1 - e^{-x})/x
pub(crate) fn phi1(x: f64) -> f64 {
    if x < 1e-8 {
        1.0 - 0.5 * x
    } else {
        -(-x).exp_m1() / x
    }
}

// phi_2(x) = (x - 1 + e^{-x})/x^2
pub(crate) fn phi2(x: f64) -> f64 {
    if x < 1e-2 {
        1.0 / 2.0 - x / 6.0 + x * x / 24.0 - x.powi(3) / 120.0 + x.powi(4) / 720.0 - x.powi(5) / 5040.0
    } else {
        (x + (-x).exp_m1()) / (x * x)
    }
}

// phi_3(x) = (x^2/2 - x + 1 - e^{-x})/x^3
pub(crate) fn phi3(x: f64) -> f64 {
    if x < 1e-2 {
        1.0 / 6.0 - x / 24.0 + x * x / 120.0 - x.powi(3) / 720.0 + x.powi(4) / 5040.0 - x.powi(5) / 40320.0
    } else {
        (0.5 * x * x - x - (-x).exp_m1()) / x.powi(3)
    }
}

// Conditional variance of the OU integral given the Wiener increment, over h.
pub(crate) fn cond_var_over_h(x: f64) -> f64 {
    if x < 1e-2 {
        x * x / 12.0 - x.powi(3) / 12.0 + 17.0 * x.powi(4) / 360.0 - 7.0 * x.powi(5) / 360.0
            + 43.0 * x.powi(6) / 6720.0
    } else {
        let a = phi1(x);
        (phi1(2.0 * x) - a * a).max(0.0)
    }
}

// (e^{-x}, phi_1(x), conditional variance over h) from one exponential.
#[inline]
pub(crate) fn ou_coeffs(x: f64) -> (f64, f64, f64) {
    if x < 1e-2 {
        return ((-x).exp(), phi1(x), cond_var_over_h(x));
    }
    let e = (-x).exp();
    let p1 = (1.0 - e) / x;
    let p2x = (1.0 - e * e) / (2.0 * x);
    (e, p1, (p2x - p1 * p1).max(0.0))
}

struct Plan {
    steps: usize,
    stride: usize,
}

fn check_spec(spec: &ModelSpec) -> Result<(), IntegrateError> {
    if !spec.friction.is_smooth() || spec.friction.is_step() {
        return Err(IntegrateError::Unsupported);
    }
    // sigma = 0 is allowed here for deterministic checks
    let r = if spec.sigma == 0.0 {
        validate_model(&ModelSpec { sigma: 1.0, ..spec.clone() })
    } else {
        validate_model(spec)
    };
    if !r.is_ok() {
        return Err(IntegrateError::InvalidModel(r.violations.join("; ")));
    }
    Ok(())
}

fn plan(spec: &ModelSpec, h: f64, dt: f64, dim: usize, nodes_available: usize) -> Result<Plan, IntegrateError> {
    check_spec(spec)?;
    if dim != spec.dim {
        return Err(IntegrateError::Dimension { expected: spec.dim, got: dim });
    }
    let stride = (h / dt).round();
    if !(h > 0.0) || stride < 1.0 || (stride * dt - h).abs() > 1e-9 * h {
        return Err(IntegrateError::StepMismatch { h, dt });
    }
    let stride = stride as usize;
    let steps = ((spec.t_end / h) - 1e-9).ceil().max(1.0) as usize;
    if steps * stride > nodes_available - 1 {
        return Err(IntegrateError::ShortNoise {
            have: (nodes_available - 1) as f64 * dt,
            need: steps as f64 * h,
        });
    }
    Ok(Plan { steps, stride })
}

fn guard(q: &[f64], step: usize) -> Result<(), IntegrateError> {
    let norm = q.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if norm <= BLOW_UP {
        Ok(())
    } else {
        Err(IntegrateError::BlowUp { step, norm })
    }
}

/// Inertial system with white noise. Each step freezes lambda and b at the
/// left node and applies the exact Gaussian transition of the resulting
/// Ornstein-Uhlenbeck pair. The Wiener increment comes from the path; the
/// part of the OU integral not determined by it comes from the path's
/// auxiliary stream.
pub fn simulate_langevin_white(spec: &ModelSpec, path: &WienerPath, h: f64) -> Result<Trajectory, IntegrateError> {
    let pl = plan(spec, h, path.dt(), path.dim(), path.n_steps() + 1)?;
    let d = spec.dim;
    let (mu, sigma) = (spec.mu, spec.sigma);
    let mut q = Vec::with_capacity((pl.steps + 1) * d);
    let mut p = Vec::with_capacity((pl.steps + 1) * d);
    q.extend_from_slice(&spec.q0);
    p.extend_from_slice(&spec.p0);
    let mut aux = path.aux_rng();
    let (mut b, mut dw) = (vec![0.0; d], vec![0.0; d]);
    for n in 0..pl.steps {
        let (qn, pn) = (n * d, n * d);
        let lam = spec.friction.eval(&q[qn..qn + d]);
        spec.drift.eval_into(&q[qn..qn + d], &mut b);
        let (e, p1, cvh) = ou_coeffs(lam * h / mu);
        let c = h * p1;
        let sd = (h * cvh).sqrt();
        path.increment(n, pl.stride, &mut dw);
        for i in 0..d {
            let xi: f64 = StandardNormal.sample(&mut aux);
            let big_x = c / h * dw[i] + sd * xi;
            let bl = b[i] / lam;
            let (q0, p0) = (q[qn + i], p[pn + i]);
            p.push(e * p0 + bl * (1.0 - e) + sigma / mu * big_x);
            q.push(q0 + p0 * c + bl * (h - c) + sigma / lam * (dw[i] - big_x));
        }
        guard(&q[qn + d..], n + 1)?;
    }
    Ok(Trajectory {
        tag: EquationTag::LangevinWhite,
        h,
        dim: d,
        seed: path.seed(),
        stream: path.stream(),
        q,
        p: Some(p),
    })
}

/// Inertial system driven by mollified noise. Over a step lambda and b are
/// frozen and the forcing b + sigma W'^delta is linear in time between its
/// node values; the linear system is then integrated exactly.
pub fn simulate_langevin_mollified(spec: &ModelSpec, noise: &MollifiedNoise, h: f64) -> Result<Trajectory, IntegrateError> {
    let limit = noise.delta() / 20.0;
    if h > limit * (1.0 + 1e-9) {
        return Err(IntegrateError::StepTooLarge { h, limit });
    }
    let pl = plan(spec, h, noise.dt(), noise.dim(), noise.n_nodes())?;
    let d = spec.dim;
    let (mu, sigma) = (spec.mu, spec.sigma);
    let mut q = Vec::with_capacity((pl.steps + 1) * d);
    let mut p = Vec::with_capacity((pl.steps + 1) * d);
    q.extend_from_slice(&spec.q0);
    p.extend_from_slice(&spec.p0);
    let mut b = vec![0.0; d];
    for n in 0..pl.steps {
        let base = n * d;
        let lam = spec.friction.eval(&q[base..base + d]);
        spec.drift.eval_into(&q[base..base + d], &mut b);
        let x = lam * h / mu;
        let e = (-x).exp();
        let (f1, f2, f3) = (phi1(x), phi2(x), phi3(x));
        let (w0, w1) = (noise.deriv(n * pl.stride), noise.deriv((n + 1) * pl.stride));
        for i in 0..d {
            let g0 = (b[i] + sigma * w0[i]) / lam;
            let g1 = sigma * (w1[i] - w0[i]) / lam;
            let (q0, p0) = (q[base + i], p[base + i]);
            p.push(e * p0 + g0 * (1.0 - e) + g1 * x * f2);
            q.push(q0 + p0 * h * f1 + g0 * h * x * f2 + g1 * h * x * f3);
        }
        guard(&q[base + d..], n + 1)?;
    }
    Ok(Trajectory {
        tag: EquationTag::LangevinMollified,
        h,
        dim: d,
        seed: noise.path().seed(),
        stream: noise.path().stream(),
        q,
        p: Some(p),
    })
}

/// Pathwise ODE q' = (b(q) + sigma W'^delta(t))/lambda(q) by classical RK4.
/// The half steps must land on noise nodes, so h is an even multiple of dt.
pub fn simulate_smooth_limit(spec: &ModelSpec, noise: &MollifiedNoise, h: f64) -> Result<Trajectory, IntegrateError> {
    let limit = noise.delta() / 20.0;
    if h > limit * (1.0 + 1e-9) {
        return Err(IntegrateError::StepTooLarge { h, limit });
    }
    let pl = plan(spec, h, noise.dt(), noise.dim(), noise.n_nodes())?;
    if pl.stride % 2 != 0 {
        return Err(IntegrateError::StepMismatch { h, dt: 2.0 * noise.dt() });
    }
    let d = spec.dim;
    let sigma = spec.sigma;
    let mut q = Vec::with_capacity((pl.steps + 1) * d);
    q.extend_from_slice(&spec.q0);
    let mut b = vec![0.0; d];
    let mut rhs = |x: &[f64], node: usize, out: &mut [f64]| {
        let lam = spec.friction.eval(x);
        spec.drift.eval_into(x, &mut b);
        let w = noise.deriv(node);
        for i in 0..d {
            out[i] = (b[i] + sigma * w[i]) / lam;
        }
    };
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    let half = pl.stride / 2;
    for n in 0..pl.steps {
        let base = n * d;
        let x0: Vec<f64> = q[base..base + d].to_vec();
        let node = n * pl.stride;
        rhs(&x0, node, &mut k1);
        for i in 0..d {
            tmp[i] = x0[i] + 0.5 * h * k1[i];
        }
        rhs(&tmp, node + half, &mut k2);
        for i in 0..d {
            tmp[i] = x0[i] + 0.5 * h * k2[i];
        }
        rhs(&tmp, node + half, &mut k3);
        for i in 0..d {
            tmp[i] = x0[i] + h * k3[i];
        }
        rhs(&tmp, node + pl.stride, &mut k4);
        for i in 0..d {
            q.push(x0[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        }
        guard(&q[base + d..], n + 1)?;
    }
    Ok(Trajectory {
        tag: EquationTag::SmoothLimitOde,
        h,
        dim: d,
        seed: noise.path().seed(),
        stream: noise.path().stream(),
        q,
        p: None,
    })
}

fn euler_maruyama(spec: &ModelSpec, path: &WienerPath, h: f64, corrected: bool) -> Result<Trajectory, IntegrateError> {
    let pl = plan(spec, h, path.dt(), path.dim(), path.n_steps() + 1)?;
    let d = spec.dim;
    let sigma = spec.sigma;
    let mut q = Vec::with_capacity((pl.steps + 1) * d);
    q.extend_from_slice(&spec.q0);
    let (mut b, mut g, mut dw) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for n in 0..pl.steps {
        let base = n * d;
        let x = &q[base..base + d];
        let lam = spec.friction.eval(x);
        spec.drift.eval_into(x, &mut b);
        if corrected {
            spec.friction.grad_into(x, &mut g).map_err(|_| IntegrateError::Unsupported)?;
        }
        path.increment(n, pl.stride, &mut dw);
        let l3 = 2.0 * lam * lam * lam;
        for i in 0..d {
            let corr = if corrected { sigma * sigma * g[i] / l3 } else { 0.0 };
            let v = q[base + i] + (b[i] / lam - corr) * h + sigma / lam * dw[i];
            q.push(v);
        }
        guard(&q[base + d..], n + 1)?;
    }
    Ok(Trajectory {
        tag: if corrected { EquationTag::ItoLimit } else { EquationTag::ClassicalLimit },
        h,
        dim: d,
        seed: path.seed(),
        stream: path.stream(),
        q,
        p: None,
    })
}

/// Euler-Maruyama on dq = (b/lambda - sigma^2 grad lambda/(2 lambda^3)) dt + (sigma/lambda) dW.
pub fn simulate_ito_limit(spec: &ModelSpec, path: &WienerPath, h: f64) -> Result<Trajectory, IntegrateError> {
    euler_maruyama(spec, path, h, true)
}

/// Euler-Maruyama on dq = (b/lambda) dt + (sigma/lambda) dW, the naive limit.
pub fn simulate_classical_limit(spec: &ModelSpec, path: &WienerPath, h: f64) -> Result<Trajectory, IntegrateError> {
    euler_maruyama(spec, path, h, false)
}

/// Heun predictor-corrector for dq = (b/lambda) dt + (sigma/lambda) o dW.
pub fn simulate_stratonovich_limit(spec: &ModelSpec, path: &WienerPath, h: f64) -> Result<Trajectory, IntegrateError> {
    let pl = plan(spec, h, path.dt(), path.dim(), path.n_steps() + 1)?;
    let d = spec.dim;
    let sigma = spec.sigma;
    let mut q = Vec::with_capacity((pl.steps + 1) * d);
    q.extend_from_slice(&spec.q0);
    let (mut b, mut bs, mut dw, mut pred) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for n in 0..pl.steps {
        let base = n * d;
        let x: Vec<f64> = q[base..base + d].to_vec();
        let lam = spec.friction.eval(&x);
        spec.drift.eval_into(&x, &mut b);
        path.increment(n, pl.stride, &mut dw);
        for i in 0..d {
            pred[i] = x[i] + b[i] / lam * h + sigma / lam * dw[i];
        }
        let lam_s = spec.friction.eval(&pred);
        spec.drift.eval_into(&pred, &mut bs);
        for i in 0..d {
            let drift = 0.5 * (b[i] / lam + bs[i] / lam_s);
            let diff = 0.5 * sigma * (1.0 / lam + 1.0 / lam_s);
            q.push(x[i] + drift * h + diff * dw[i]);
        }
        guard(&q[base + d..], n + 1)?;
    }
    Ok(Trajectory {
        tag: EquationTag::StratonovichLimit,
        h,
        dim: d,
        seed: path.seed(),
        stream: path.stream(),
        q,
        p: None,
    })
}

/// Sampler for the corrected Ito limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimitSampler {
    /// Euler-Maruyama with the correction drift
    ItoEuler,
    /// exact transform through the primitive of lambda along q1
    ScaleTransform,
}

pub fn simulate_limit(sampler: LimitSampler, spec: &ModelSpec, path: &WienerPath, h: f64) -> Result<Trajectory, IntegrateError> {
    match sampler {
        LimitSampler::ItoEuler => simulate_ito_limit(spec, path, h),
        LimitSampler::ScaleTransform => simulate_scale_transform(spec, path, h),
    }
}

/// Solves F(x) = target for the increasing primitive F of lambda, starting
/// from `guess`. Newton with a bisection fallback; F(0) = 0 supplies the
/// bracket [target/Lambda, target/lambda_0].
pub fn invert_primitive(f: &FrictionField, target: f64, guess: f64) -> f64 {
    let (l0, l1) = (f.lower_bound(), f.upper_bound());
    let (mut a, mut b) = if target >= 0.0 { (target / l1, target / l0) } else { (target / l0, target / l1) };
    if a == b {
        return a;
    }
    let prim = |x: f64| f.primitive_q1(x).expect("primitive checked by caller");
    let mut x = guess.clamp(a, b);
    for _ in 0..200 {
        let g = prim(x) - target;
        if g == 0.0 {
            return x;
        }
        if g > 0.0 {
            b = x;
        } else {
            a = x;
        }
        let mut next = x - g / f.eval(&[x]);
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * (1.0 + x.abs()) || b - a <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
            return next;
        }
        x = next;
    }
    x
}

/// Samples the Ito limit through Y = F(q1)/sigma, where F is the primitive of
/// lambda along q1: Y moves as Brownian motion with drift b1/sigma, so for
/// constant b1 the q1 marginals are exact for any h. Remaining coordinates
/// take Euler-Maruyama steps with the left-point lambda (no correction is
/// needed because lambda does not depend on them).
pub fn simulate_scale_transform(spec: &ModelSpec, path: &WienerPath, h: f64) -> Result<Trajectory, IntegrateError> {
    let pl = plan(spec, h, path.dt(), path.dim(), path.n_steps() + 1)?;
    let f = &spec.friction;
    if f.primitive_q1(spec.q0[0]).is_none() {
        return Err(IntegrateError::NoPrimitive);
    }
    let d = spec.dim;
    let sigma = spec.sigma;
    let mut q = Vec::with_capacity((pl.steps + 1) * d);
    q.extend_from_slice(&spec.q0);
    let (mut b, mut dw) = (vec![0.0; d], vec![0.0; d]);
    let mut y = f.primitive_q1(spec.q0[0]).unwrap_or(0.0) / sigma;
    for n in 0..pl.steps {
        let base = n * d;
        let x: Vec<f64> = q[base..base + d].to_vec();
        let lam = f.eval(&x);
        spec.drift.eval_into(&x, &mut b);
        path.increment(n, pl.stride, &mut dw);
        y += b[0] / sigma * h + dw[0];
        q.push(invert_primitive(f, sigma * y, x[0]));
        for i in 1..d {
            q.push(x[i] + b[i] / lam * h + sigma / lam * dw[i]);
        }
        guard(&q[base + d..], n + 1)?;
    }
    Ok(Trajectory {
        tag: EquationTag::ScaleTransform,
        h,
        dim: d,
        seed: path.seed(),
        stream: path.stream(),
        q,
        p: None,
    })
}

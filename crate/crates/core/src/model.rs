//! Friction and drift fields, plus the validated problem description shared
//! by the simulators.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("gradient requested at a jump of a piecewise-constant field (q1 = {0})")]
    GradientAtJump(f64),
    #[error("operation needs a smooth friction field")]
    Unsupported,
    #[error("dimension mismatch: field has d = {expected}, argument has {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothness {
    Smooth,
    PiecewiseConstant,
}

/// Which one-sided limit to take at a jump.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineTerm {
    pub amp: f64,
    pub k: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrictionKind {
    Constant { c: f64 },
    /// c0 + sum of amp * sin(2 pi k.q)
    Trigonometric { c0: f64, terms: Vec<SineTerm> },
    TanhRamp { lo: f64, hi: f64, width: f64 },
    Step { left: f64, right: f64 },
    /// center + slope * s(q1), where s is the identity on |q1| <= radius and
    /// saturates smoothly over a band of the given width.
    ClippedLinear { center: f64, slope: f64, radius: f64, band: f64 },
    Rescaled { inner: Box<FrictionField>, eps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrictionField {
    kind: FrictionKind,
    dim: usize,
    lower: f64,
    upper: f64,
    smoothness: Smoothness,
}

// Saturation profile used by clipped_linear; g'(y) = (1 - (y/w)^2)^2 on [0, w].
fn sat_g(y: f64, w: f64) -> f64 {
    let r = y / w;
    y * (1.0 - 2.0 * r * r / 3.0 + r.powi(4) / 5.0)
}

fn sat_dg(y: f64, w: f64) -> f64 {
    let r = y / w;
    (1.0 - r * r).powi(2)
}

// Integral of sat_g from 0 to y.
fn sat_gi(y: f64, w: f64) -> f64 {
    let r = y / w;
    y * y * (0.5 - r * r / 6.0 + r.powi(4) / 30.0)
}

fn ln_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn clipped_profile(x: f64, radius: f64, band: f64) -> (f64, f64) {
    let a = x.abs();
    let sgn = x.signum();
    if a <= radius {
        (x, 1.0)
    } else if band > 0.0 && a < radius + band {
        (sgn * (radius + sat_g(a - radius, band)), sat_dg(a - radius, band))
    } else {
        (sgn * (radius + 8.0 * band / 15.0), 0.0)
    }
}

fn clipped_primitive(x: f64, radius: f64, band: f64) -> f64 {
    let a = x.abs();
    if a <= radius {
        return 0.5 * a * a;
    }
    let base = 0.5 * radius * radius;
    if band > 0.0 && a < radius + band {
        let y = a - radius;
        return base + radius * y + sat_gi(y, band);
    }
    let top = radius + 8.0 * band / 15.0;
    base + radius * band + sat_gi(band, band) + top * (a - radius - band)
}

fn dot(k: &[f64], q: &[f64]) -> f64 {
    k.iter().zip(q).map(|(a, b)| a * b).sum()
}

impl FrictionField {
    pub fn constant(dim: usize, c: f64) -> Self {
        Self::build(FrictionKind::Constant { c }, dim, c, c, Smoothness::Smooth)
    }

    /// c0 + c1 sin(2 pi k.q); the dimension is the length of `k`.
    pub fn sinusoidal(c0: f64, c1: f64, k: Vec<f64>) -> Self {
        Self::trigonometric(c0, vec![SineTerm { amp: c1, k }])
    }

    /// One-dimensional c0 + c1 sin(omega q).
    pub fn sine_angular(c0: f64, c1: f64, omega: f64) -> Self {
        Self::sinusoidal(c0, c1, vec![omega / (2.0 * PI)])
    }

    pub fn trigonometric(c0: f64, terms: Vec<SineTerm>) -> Self {
        let dim = terms.first().map_or(1, |t| t.k.len());
        let spread: f64 = terms.iter().map(|t| t.amp.abs()).sum();
        Self::build(
            FrictionKind::Trigonometric { c0, terms },
            dim,
            c0 - spread,
            c0 + spread,
            Smoothness::Smooth,
        )
    }

    pub fn tanh_ramp(dim: usize, lo: f64, hi: f64, width: f64) -> Self {
        Self::build(
            FrictionKind::TanhRamp { lo, hi, width },
            dim,
            lo.min(hi),
            lo.max(hi),
            Smoothness::Smooth,
        )
    }

    pub fn step(left: f64, right: f64) -> Self {
        Self::build(
            FrictionKind::Step { left, right },
            1,
            left.min(right),
            left.max(right),
            Smoothness::PiecewiseConstant,
        )
    }

    /// The adversarial field: centre 2, slope 1, saturating band 0.5.
    pub fn clipped_linear(dim: usize, radius: f64) -> Self {
        Self::clipped_linear_with(dim, 2.0, 1.0, radius, 0.5)
    }

    pub fn clipped_linear_with(dim: usize, center: f64, slope: f64, radius: f64, band: f64) -> Self {
        let reach = slope.abs() * (radius + 8.0 * band / 15.0);
        Self::build(
            FrictionKind::ClippedLinear { center, slope, radius, band },
            dim,
            center - reach,
            center + reach,
            Smoothness::Smooth,
        )
    }

    /// lambda(q) = inner(q / eps).
    pub fn rescaled(inner: FrictionField, eps: f64) -> Self {
        let (dim, lo, hi, sm) = (inner.dim, inner.lower, inner.upper, inner.smoothness);
        Self::build(FrictionKind::Rescaled { inner: Box::new(inner), eps }, dim, lo, hi, sm)
    }

    fn build(kind: FrictionKind, dim: usize, lower: f64, upper: f64, smoothness: Smoothness) -> Self {
        Self { kind, dim, lower, upper, smoothness }
    }

    /// Overrides the declared smoothness; validation reports inconsistent flags.
    pub fn with_smoothness(mut self, s: Smoothness) -> Self {
        self.smoothness = s;
        self
    }

    pub fn kind(&self) -> &FrictionKind {
        &self.kind
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn lower_bound(&self) -> f64 {
        self.lower
    }
    pub fn upper_bound(&self) -> f64 {
        self.upper
    }
    pub fn smoothness(&self) -> Smoothness {
        self.smoothness
    }
    pub fn is_smooth(&self) -> bool {
        self.smoothness == Smoothness::Smooth
    }

    pub fn eval(&self, q: &[f64]) -> f64 {
        let v = self.eval_raw(q);
        debug_assert!(
            v >= self.lower - 1e-12 * self.upper.abs() && v <= self.upper + 1e-12 * self.upper.abs(),
            "friction {v} outside [{}, {}]",
            self.lower,
            self.upper
        );
        v
    }

    fn eval_raw(&self, q: &[f64]) -> f64 {
        match &self.kind {
            FrictionKind::Constant { c } => *c,
            FrictionKind::Trigonometric { c0, terms } => {
                c0 + terms.iter().map(|t| t.amp * (2.0 * PI * dot(&t.k, q)).sin()).sum::<f64>()
            }
            FrictionKind::TanhRamp { lo, hi, width } => {
                0.5 * (lo + hi) + 0.5 * (hi - lo) * (q[0] / width).tanh()
            }
            FrictionKind::Step { left, right } => {
                if q[0] < 0.0 {
                    *left
                } else {
                    *right
                }
            }
            FrictionKind::ClippedLinear { center, slope, radius, band } => {
                center + slope * clipped_profile(q[0], *radius, *band).0
            }
            FrictionKind::Rescaled { inner, eps } => {
                let mut y = [0.0; 3];
                let y = scaled(q, *eps, &mut y);
                inner.eval_raw(y)
            }
        }
    }

    /// One-sided evaluation along q1 in one dimension; differs from `eval`
    /// only at jumps.
    pub fn eval_side(&self, x: f64, side: Side) -> f64 {
        match &self.kind {
            FrictionKind::Step { left, right } if x == 0.0 => match side {
                Side::Left => *left,
                Side::Right => *right,
            },
            FrictionKind::Rescaled { inner, eps } => inner.eval_side(x / eps, side),
            _ => self.eval(&[x]),
        }
    }

    /// Writes the gradient into `out`. Piecewise-constant fields have zero
    /// gradient off their jumps and refuse to answer on them.
    pub fn grad_into(&self, q: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        out.iter_mut().for_each(|g| *g = 0.0);
        match &self.kind {
            FrictionKind::Constant { .. } => {}
            FrictionKind::Trigonometric { terms, .. } => {
                for t in terms {
                    let c = t.amp * 2.0 * PI * (2.0 * PI * dot(&t.k, q)).cos();
                    for (o, k) in out.iter_mut().zip(&t.k) {
                        *o += c * k;
                    }
                }
            }
            FrictionKind::TanhRamp { lo, hi, width } => {
                let s = 1.0 / (q[0] / width).cosh();
                out[0] = 0.5 * (hi - lo) * s * s / width;
            }
            FrictionKind::Step { .. } => {
                if q[0] == 0.0 {
                    return Err(ModelError::GradientAtJump(q[0]));
                }
            }
            FrictionKind::ClippedLinear { slope, radius, band, .. } => {
                out[0] = slope * clipped_profile(q[0], *radius, *band).1;
            }
            FrictionKind::Rescaled { inner, eps } => {
                let mut y = [0.0; 3];
                let y = scaled(q, *eps, &mut y);
                if let Err(ModelError::GradientAtJump(_)) = inner.grad_into(y, out) {
                    return Err(ModelError::GradientAtJump(q[0]));
                }
                out.iter_mut().for_each(|g| *g /= eps);
            }
        }
        Ok(())
    }

    pub fn gradient(&self, q: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut g = vec![0.0; self.dim];
        self.grad_into(q, &mut g)?;
        Ok(g)
    }

    /// lambda and d lambda / d q1 at a one-dimensional point.
    pub fn eval_deriv1(&self, x: f64) -> (f64, f64) {
        let mut g = [0.0];
        let q = [x];
        // Off-jump queries only; at a jump the derivative is reported as 0.
        let _ = self.grad_into(&q, &mut g);
        (self.eval(&q), g[0])
    }

    /// True when lambda depends on q1 alone.
    pub fn depends_on_q1_only(&self) -> bool {
        match &self.kind {
            FrictionKind::Trigonometric { terms, .. } => {
                terms.iter().all(|t| t.k.iter().skip(1).all(|&k| k == 0.0))
            }
            FrictionKind::Rescaled { inner, .. } => inner.depends_on_q1_only(),
            _ => true,
        }
    }

    /// F(x) = integral of lambda(s e1) over [0, x], when available in closed form.
    pub fn primitive_q1(&self, x: f64) -> Option<f64> {
        if !self.depends_on_q1_only() {
            return None;
        }
        Some(match &self.kind {
            FrictionKind::Constant { c } => c * x,
            FrictionKind::Trigonometric { c0, terms } => {
                let mut f = c0 * x;
                for t in terms {
                    let w = 2.0 * PI * t.k[0];
                    if w != 0.0 {
                        f += t.amp * (1.0 - (w * x).cos()) / w;
                    }
                }
                f
            }
            FrictionKind::TanhRamp { lo, hi, width } => {
                0.5 * (lo + hi) * x + 0.5 * (hi - lo) * width * ln_cosh(x / width)
            }
            FrictionKind::Step { left, right } => {
                if x < 0.0 {
                    left * x
                } else {
                    right * x
                }
            }
            FrictionKind::ClippedLinear { center, slope, radius, band } => {
                center * x + slope * clipped_primitive(x, *radius, *band)
            }
            FrictionKind::Rescaled { inner, eps } => eps * inner.primitive_q1(x / eps)?,
        })
    }

    /// Locations (in q1) of jump discontinuities.
    pub fn jumps(&self) -> Vec<f64> {
        match &self.kind {
            FrictionKind::Step { left, right } if left != right => vec![0.0],
            FrictionKind::Rescaled { inner, eps } => inner.jumps().iter().map(|j| j * eps).collect(),
            _ => Vec::new(),
        }
    }

    pub fn is_step(&self) -> bool {
        match &self.kind {
            FrictionKind::Step { .. } => true,
            FrictionKind::Rescaled { inner, .. } => inner.is_step(),
            _ => false,
        }
    }
}

fn scaled<'a>(q: &[f64], eps: f64, buf: &'a mut [f64; 3]) -> &'a [f64] {
    for (b, x) in buf.iter_mut().zip(q) {
        *b = x / eps;
    }
    &buf[..q.len().min(3)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftKind {
    Constant { value: Vec<f64> },
    /// b_i = offset_i + amp_i cos(2 pi k.q)
    Cosine { offset: Vec<f64>, amp: Vec<f64>, k: Vec<f64> },
    Rescaled { inner: Box<DriftField>, eps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftField {
    kind: DriftKind,
    dim: usize,
    bound: f64,
}

impl DriftField {
    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let bound = value.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dim = value.len();
        Self { kind: DriftKind::Constant { value }, dim, bound }
    }

    pub fn cosine(offset: Vec<f64>, amp: Vec<f64>, k: Vec<f64>) -> Self {
        let bound = offset.iter().zip(&amp).fold(0.0f64, |m, (o, a)| m.max(o.abs() + a.abs()));
        let dim = offset.len();
        Self { kind: DriftKind::Cosine { offset, amp, k }, dim, bound }
    }

    pub fn rescaled(inner: DriftField, eps: f64) -> Self {
        let (dim, bound) = (inner.dim, inner.bound);
        Self { kind: DriftKind::Rescaled { inner: Box::new(inner), eps }, dim, bound }
    }

    pub fn kind(&self) -> &DriftKind {
        &self.kind
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    /// The sup norm bound on |b|.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Constant value, if the drift is constant.
    pub fn as_constant(&self) -> Option<&[f64]> {
        match &self.kind {
            DriftKind::Constant { value } => Some(value),
            _ => None,
        }
    }

    pub fn eval_into(&self, q: &[f64], out: &mut [f64]) {
        match &self.kind {
            DriftKind::Constant { value } => out.copy_from_slice(value),
            DriftKind::Cosine { offset, amp, k } => {
                let c = (2.0 * PI * dot(k, q)).cos();
                for i in 0..out.len() {
                    out[i] = offset[i] + amp[i] * c;
                }
            }
            DriftKind::Rescaled { inner, eps } => {
                let mut y = [0.0; 3];
                let y = scaled(q, *eps, &mut y);
                inner.eval_into(y, out);
            }
        }
        debug_assert!(out.iter().all(|b| b.abs() <= self.bound * (1.0 + 1e-12)));
    }

    pub fn eval(&self, q: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.dim];
        self.eval_into(q, &mut b);
        b
    }

    /// First component at a one-dimensional point.
    pub fn eval1(&self, x: f64) -> f64 {
        let mut b = [0.0];
        self.eval_into(&[x], &mut b);
        b[0]
    }
}

/// Full problem description: mu q'' = b(q) - lambda(q) q' + sigma W'.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    pub friction: FrictionField,
    pub drift: DriftField,
    pub sigma: f64,
    pub mu: f64,
    pub delta: f64,
    pub eps: f64,
    pub q0: Vec<f64>,
    pub p0: Vec<f64>,
    pub t_end: f64,
}

impl ModelSpec {
    /// Unit noise, unit mass, no mollification, start at rest at the origin, T = 1.
    pub fn new(friction: FrictionField, drift: DriftField) -> Self {
        let dim = friction.dim();
        Self {
            dim,
            friction,
            drift,
            sigma: 1.0,
            mu: 1.0,
            delta: 0.0,
            eps: 1.0,
            q0: vec![0.0; dim],
            p0: vec![0.0; dim],
            t_end: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_field(f: &FrictionField, out: &mut Vec<String>) {
    if !(f.lower > 0.0) {
        out.push("λ lower bound ≤ 0".into());
    }
    if !f.upper.is_finite() || f.upper < f.lower {
        out.push("λ upper bound must be finite and not below the lower bound".into());
    }
    match &f.kind {
        FrictionKind::Step { .. } if f.smoothness == Smoothness::Smooth => {
            out.push("step field must be piecewise-constant".into())
        }
        FrictionKind::Step { .. } => {}
        FrictionKind::Rescaled { inner, eps } => {
            if !(*eps > 0.0) {
                out.push("rescaling factor must be positive".into());
            }
            if inner.smoothness != f.smoothness {
                out.push("rescaled field smoothness differs from its inner field".into());
            }
            check_field(inner, out);
        }
        _ if f.smoothness == Smoothness::PiecewiseConstant => {
            out.push("smooth catalog field flagged piecewise-constant".into())
        }
        FrictionKind::TanhRamp { width, .. } if !(*width > 0.0) => {
            out.push("tanh_ramp width must be positive".into())
        }
        FrictionKind::ClippedLinear { radius, band, .. } if !(*radius >= 0.0 && *band > 0.0) => {
            out.push("clipped_linear needs radius ≥ 0 and a positive band".into())
        }
        FrictionKind::Trigonometric { terms, .. } if terms.iter().any(|t| t.k.len() != f.dim) => {
            out.push("wavevector length differs from the field dimension".into())
        }
        _ => {}
    }
}

/// Lists every violated invariant; an empty report means the spec is usable
/// everywhere downstream.
pub fn validate_model(spec: &ModelSpec) -> ValidationReport {
    let mut v = Vec::new();
    if spec.dim == 0 {
        v.push("dimension must be at least 1".into());
    }
    check_field(&spec.friction, &mut v);
    if spec.friction.dim() != spec.dim {
        v.push(format!("friction dimension {} differs from d = {}", spec.friction.dim(), spec.dim));
    }
    if spec.drift.dim() != spec.dim {
        v.push(format!("drift dimension {} differs from d = {}", spec.drift.dim(), spec.dim));
    }
    if !spec.drift.bound().is_finite() {
        v.push("drift bound is not finite".into());
    }
    for (name, x) in [("μ", spec.mu), ("σ", spec.sigma), ("T", spec.t_end), ("ε", spec.eps)] {
        if !(x > 0.0 && x.is_finite()) {
            v.push(format!("{name} must be positive"));
        }
    }
    if !(spec.delta >= 0.0 && spec.delta.is_finite()) {
        v.push("δ must be non-negative".into());
    }
    if spec.q0.len() != spec.dim || spec.p0.len() != spec.dim {
        v.push("initial position/momentum length differs from d".into());
    } else if spec.q0.iter().chain(&spec.p0).any(|x| !x.is_finite()) {
        v.push("initial state is not finite".into());
    }
    ValidationReport { violations: v }
}

/// max over points of |FD gradient - gradient| / (1 + |gradient|), sup norms,
/// central differences with step 1e-5.
pub fn gradient_check(field: &FrictionField, points: &[Vec<f64>]) -> Result<f64, ModelError> {
    if !field.is_smooth() {
        return Err(ModelError::Unsupported);
    }
    const H: f64 = 1e-5;
    let d = field.dim();
    let mut worst = 0.0f64;
    let mut g = vec![0.0; d];
    for p in points {
        if p.len() != d {
            return Err(ModelError::Dimension { expected: d, got: p.len() });
        }
        field.grad_into(p, &mut g)?;
        let mut x = p.clone();
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for k in 0..d {
            x[k] = p[k] + H;
            let fp = field.eval(&x);
            x[k] = p[k] - H;
            let fm = field.eval(&x);
            x[k] = p[k];
            num = num.max(((fp - fm) / (2.0 * H) - g[k]).abs());
            den = den.max(g[k].abs());
        }
        worst = worst.max(num / (1.0 + den));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn base_spec() -> ModelSpec {
        let mut s = ModelSpec::new(FrictionField::constant(1, 2.0), DriftField::zero(1));
        s.mu = 0.1;
        s
    }

    #[test]
    fn constant_spec_is_valid() {
        assert!(validate_model(&base_spec()).is_ok());
    }

    #[test]
    fn sinusoid_with_large_amplitude_is_rejected() {
        let mut s = base_spec();
        s.friction = FrictionField::sinusoidal(1.0, 2.0, vec![1.0]);
        let r = validate_model(&s);
        assert!(r.violations.iter().any(|v| v == "λ lower bound ≤ 0"), "{r:?}");
    }

    #[test]
    fn step_flagged_smooth_is_rejected() {
        let mut s = base_spec();
        s.friction = FrictionField::step(1.0, 2.0).with_smoothness(Smoothness::Smooth);
        let r = validate_model(&s);
        assert!(r.violations.iter().any(|v| v == "step field must be piecewise-constant"));
        s.friction = FrictionField::step(1.0, 2.0);
        assert!(validate_model(&s).is_ok());
    }

    #[test]
    fn bad_scalars_reported() {
        let mut s = base_spec();
        s.mu = 0.0;
        s.delta = -1.0;
        s.q0 = vec![0.0, 1.0];
        let r = validate_model(&s);
        assert_eq!(r.violations.len(), 3, "{r:?}");
    }

    #[test]
    fn gradient_check_constant_is_zero() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.3]).collect();
        assert_eq!(gradient_check(&FrictionField::constant(1, 2.0), &pts).unwrap(), 0.0);
    }

    #[test]
    fn gradient_check_sine() {
        let f = FrictionField::sinusoidal(2.0, 0.5, vec![1.0]);
        let pts: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 100.0]).collect();
        assert!(gradient_check(&f, &pts).unwrap() < 1e-6);
        // against the analytic derivative directly
        for p in &pts {
            let g = f.gradient(p).unwrap()[0];
            assert!((g - 0.5 * 2.0 * PI * (2.0 * PI * p[0]).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_check_tanh_near_zero() {
        let f = FrictionField::tanh_ramp(1, 1.0, 2.0, 0.1);
        let pts: Vec<Vec<f64>> = (-20..=20).map(|i| vec![i as f64 * 0.01]).collect();
        assert!(gradient_check(&f, &pts).unwrap() < 1e-5);
        let g = f.gradient(&[0.0]).unwrap()[0];
        assert!((g - 5.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_rejects_step() {
        assert_eq!(gradient_check(&FrictionField::step(1.0, 2.0), &[vec![0.5]]), Err(ModelError::Unsupported));
    }

    #[test]
    fn step_gradient_only_off_jump() {
        let f = FrictionField::step(1.0, 2.0);
        assert_eq!(f.gradient(&[0.3]).unwrap(), vec![0.0]);
        assert!(matches!(f.gradient(&[0.0]), Err(ModelError::GradientAtJump(_))));
        assert_eq!(f.eval_side(0.0, Side::Left), 1.0);
        assert_eq!(f.eval_side(0.0, Side::Right), 2.0);
        assert_eq!(f.jumps(), vec![0.0]);
    }

    #[test]
    fn clipped_linear_is_linear_near_origin() {
        let f = FrictionField::clipped_linear(2, 0.7);
        for x in [-0.7, -0.3, 0.0, 0.2, 0.69] {
            assert_eq!(f.gradient(&[x, 5.0]).unwrap(), vec![1.0, 0.0]);
            assert!((f.eval(&[x, -1.0]) - (2.0 + x)).abs() < 1e-15);
        }
        assert!(f.upper_bound() <= 3.0);
        assert!(f.lower_bound() >= 1.0);
    }

    #[test]
    fn primitives_match_quadrature() {
        let fields = [
            FrictionField::constant(1, 2.0),
            FrictionField::sinusoidal(2.0, 1.0, vec![1.0]),
            FrictionField::tanh_ramp(1, 1.0, 2.0, 0.2),
            FrictionField::clipped_linear(1, 0.7),
            FrictionField::rescaled(FrictionField::sinusoidal(2.0, 1.0, vec![1.0]), 0.1),
        ];
        for f in &fields {
            for &x in &[-1.7, -0.4, 0.0, 0.3, 1.25] {
                // composite Simpson on a fine grid
                let n = 20_000;
                let h = x / n as f64;
                let mut s = f.eval(&[0.0]) + f.eval(&[x]);
                for i in 1..n {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    s += w * f.eval(&[i as f64 * h]);
                }
                let quad = s * h / 3.0;
                let got = f.primitive_q1(x).unwrap();
                assert!((got - quad).abs() < 1e-10, "{f:?} at {x}: {got} vs {quad}");
            }
        }
        assert!(FrictionField::sinusoidal(2.0, 1.0, vec![1.0, 1.0]).primitive_q1(0.5).is_none());
    }

    #[test]
    fn tanh_ramp_approaches_step() {
        let s = FrictionField::step(1.0, 2.0);
        for &x in &[-0.5, -0.1, 0.1, 0.5] {
            let errs: Vec<f64> = [0.2, 0.05, 0.0125]
                .iter()
                .map(|&w| (FrictionField::tanh_ramp(1, 1.0, 2.0, w).eval(&[x]) - s.eval(&[x])).abs())
                .collect();
            assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
            assert!(errs[2] < 1e-6);
        }
    }

    fn catalog() -> Vec<FrictionField> {
        vec![
            FrictionField::constant(1, 2.0),
            FrictionField::sinusoidal(2.0, 0.5, vec![1.0]),
            FrictionField::sinusoidal(2.0, 1.0, vec![1.0, 0.0]),
            FrictionField::trigonometric(
                3.0,
                vec![SineTerm { amp: 1.0, k: vec![1.0, 1.0] }, SineTerm { amp: 0.5, k: vec![0.0, 2.0] }],
            ),
            FrictionField::tanh_ramp(1, 1.0, 2.0, 0.1),
            FrictionField::clipped_linear(2, 0.7),
            FrictionField::sine_angular(2.0, 0.5, 1.0),
        ]
    }

    #[test]
    fn catalog_bounds_hold_on_many_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for f in catalog() {
            let (lo, hi) = (f.lower_bound(), f.upper_bound());
            let mut q = vec![0.0; f.dim()];
            for _ in 0..1_000_000 {
                for x in q.iter_mut() {
                    *x = rng.random_range(-5.0..5.0);
                }
                let v = f.eval(&q);
                assert!(v >= lo && v <= hi, "{f:?}: {v}");
            }
        }
    }

    #[test]
    fn catalog_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for f in catalog() {
            let pts: Vec<Vec<f64>> =
                (0..200).map(|_| (0..f.dim()).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let e = gradient_check(&f, &pts).unwrap();
            assert!(e < 1e-5, "{f:?}: {e}");
        }
    }

    proptest! {
        #[test]
        fn sinusoid_bounds(c0 in 0.5f64..5.0, frac in -0.99f64..0.99, k in -3.0f64..3.0, x in -10.0f64..10.0) {
            let f = FrictionField::sinusoidal(c0, frac * c0, vec![k]);
            let v = f.eval(&[x]);
            prop_assert!(f.lower_bound() > 0.0);
            prop_assert!(v >= f.lower_bound() && v <= f.upper_bound());
        }

        #[test]
        fn rescaled_gradient_scales(eps in 0.01f64..1.0, x in -3.0f64..3.0) {
            let inner = FrictionField::sinusoidal(2.0, 0.7, vec![1.0]);
            let g0 = inner.gradient(&[x / eps]).unwrap()[0];
            let f = FrictionField::rescaled(inner, eps);
            let g = f.gradient(&[x]).unwrap()[0];
            prop_assert!((g - g0 / eps).abs() <= 1e-9 * (1.0 + g.abs()));
        }

        #[test]
        fn primitive_is_increasing(a in -3.0f64..3.0, d in 0.001f64..1.0, w in 0.01f64..1.0) {
            let f = FrictionField::tanh_ramp(1, 1.0, 3.0, w);
            let (fa, fb) = (f.primitive_q1(a).unwrap(), f.primitive_q1(a + d).unwrap());
            prop_assert!(fb - fa >= d * f.lower_bound() * (1.0 - 1e-9));
            prop_assert!(fb - fa <= d * f.upper_bound() * (1.0 + 1e-9));
        }
    }
}

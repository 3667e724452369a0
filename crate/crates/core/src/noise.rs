//! Wiener paths on a uniform grid and their smooth mollifications.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("time step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("dimension must be at least 1")]
    BadDimension,
    #[error("kernel needs at least 512 nodes, got {0}")]
    KernelTooCoarse(usize),
    #[error("mollifier width {delta} must be at least two path steps ({dt})")]
    WidthTooSmall { delta: f64, dt: f64 },
    #[error("path horizon {have} is shorter than the required {need}")]
    ShortPath { have: f64, need: f64 },
    #[error("noise invariant violated: {0}")]
    Invariant(String),
}

/// Random source for one (seed, stream) pair. Lane 0 feeds the path itself,
/// higher lanes feed auxiliary draws, so consumers never perturb the path.
pub fn stream_rng(seed: u64, stream: u64, lane: u64) -> ChaCha8Rng {
    assert!(lane < 16, "lane {lane} out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((lane as u128) << 64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct WienerPath {
    dim: usize,
    dt: f64,
    // row-major, (n_steps + 1) x dim
    values: Vec<f64>,
    seed: u64,
    stream: u64,
}

impl WienerPath {
    /// Wraps precomputed values (rows of length `dim`, first row the origin).
    pub fn from_values(dim: usize, dt: f64, values: Vec<f64>) -> Result<Self, NoiseError> {
        if dim == 0 {
            return Err(NoiseError::BadDimension);
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(NoiseError::BadStep(dt));
        }
        if values.len() < 2 * dim || values.len() % dim != 0 {
            return Err(NoiseError::BadHorizon(values.len() as f64 * dt / dim as f64));
        }
        Ok(Self { dim, dt, values, seed: 0, stream: 0 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn stream(&self) -> u64 {
        self.stream
    }
    pub fn n_steps(&self) -> usize {
        self.values.len() / self.dim - 1
    }
    pub fn horizon(&self) -> f64 {
        self.n_steps() as f64 * self.dt
    }
    pub fn node(&self, n: usize) -> &[f64] {
        &self.values[n * self.dim..(n + 1) * self.dim]
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// W at node (n+1)*stride minus W at node n*stride.
    pub fn increment(&self, n: usize, stride: usize, out: &mut [f64]) {
        let (a, b) = (n * stride * self.dim, (n + 1) * stride * self.dim);
        for k in 0..self.dim {
            out[k] = self.values[b + k] - self.values[a + k];
        }
    }

    /// Generator for auxiliary Gaussian draws tied to this path.
    pub fn aux_rng(&self) -> ChaCha8Rng {
        stream_rng(self.seed, self.stream, 1)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "t")?;
        for k in 1..=self.dim {
            write!(w, ",W_{k}")?;
        }
        writeln!(w)?;
        for n in 0..=self.n_steps() {
            write!(w, "{}", n as f64 * self.dt)?;
            for x in self.node(n) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Samples W on t_n = n dt up to (at least) `t_ext`.
pub fn sample_wiener(dim: usize, t_ext: f64, dt: f64, seed: u64, stream: u64) -> Result<WienerPath, NoiseError> {
    if dim == 0 {
        return Err(NoiseError::BadDimension);
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(NoiseError::BadStep(dt));
    }
    if !(t_ext > 0.0 && t_ext.is_finite()) {
        return Err(NoiseError::BadHorizon(t_ext));
    }
    let n = ((t_ext / dt) - 1e-9).ceil().max(1.0) as usize;
    let mut rng = stream_rng(seed, stream, 0);
    let sd = dt.sqrt();
    let mut values = vec![0.0; (n + 1) * dim];
    for i in dim..values.len() {
        let z: f64 = StandardNormal.sample(&mut rng);
        values[i] = values[i - dim] + sd * z;
    }
    Ok(WienerPath { dim, dt, values, seed, stream })
}

/// Bump kernel rho(s) = C exp(-1/(s(1-s))) tabulated on [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct MollifierKernel {
    pub s: Vec<f64>,
    pub rho: Vec<f64>,
    pub rho_dot: Vec<f64>,
    /// Normalisation constant, fixed by the tabulated quadrature.
    pub c: f64,
}

impl MollifierKernel {
    pub fn nodes(&self) -> usize {
        self.s.len()
    }

    // trapezoid weight (the end values vanish)
    fn weight(&self) -> f64 {
        1.0 / (self.s.len() - 1) as f64
    }

    pub fn mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.weight()
    }

    pub fn derivative_mass(&self) -> f64 {
        self.rho_dot.iter().sum::<f64>() * self.weight()
    }

    pub fn first_moment(&self) -> f64 {
        self.s.iter().zip(&self.rho).map(|(s, r)| s * r).sum::<f64>() * self.weight()
    }

    pub fn max_abs_derivative(&self) -> f64 {
        self.rho_dot.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// rho at an arbitrary point, using the tabulated constant.
    pub fn rho_at(&self, s: f64) -> f64 {
        if s <= 0.0 || s >= 1.0 {
            0.0
        } else {
            self.c * (-1.0 / (s * (1.0 - s))).exp()
        }
    }

    pub fn rho_dot_at(&self, s: f64) -> f64 {
        if s <= 0.0 || s >= 1.0 {
            0.0
        } else {
            let u = s * (1.0 - s);
            self.rho_at(s) * (1.0 - 2.0 * s) / (u * u)
        }
    }
}

pub fn build_kernel(m: usize) -> Result<MollifierKernel, NoiseError> {
    if m < 512 {
        return Err(NoiseError::KernelTooCoarse(m));
    }
    let s: Vec<f64> = (0..m).map(|i| i as f64 / (m - 1) as f64).collect();
    let bump = |x: f64| if x <= 0.0 || x >= 1.0 { 0.0 } else { (-1.0 / (x * (1.0 - x))).exp() };
    let raw: f64 = s.iter().map(|&x| bump(x)).sum::<f64>() / (m - 1) as f64;
    let c = 1.0 / raw;
    let mut k = MollifierKernel { s: Vec::new(), rho: Vec::new(), rho_dot: Vec::new(), c };
    k.rho = s.iter().map(|&x| k.rho_at(x)).collect();
    k.rho_dot = s.iter().map(|&x| k.rho_dot_at(x)).collect();
    k.s = s;
    Ok(k)
}

/// Kernel-grid trapezoid with W linearly interpolated between path nodes,
/// folded into fixed weights on path offsets 0..=J. When delta/dt is an
/// integer the bump is re-tabulated on a grid (at least as fine as the
/// kernel's) whose nodes include every path node, so the interpolation kinks
/// never fall inside a quadrature panel.
fn path_weights(kernel: &MollifierKernel, delta: f64, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let r = delta / dt;
    let j = (r - 1e-9).ceil() as usize;
    let mut w = vec![0.0; j + 1];
    let mut v = vec![0.0; j + 1];
    let aligned = (r - r.round()).abs() < 1e-9 * r;
    let panels = if aligned {
        let per = ((kernel.nodes() - 1) as f64 / r.round()).ceil() as usize;
        per * r.round() as usize
    } else {
        kernel.nodes() - 1
    };
    let tau = 1.0 / panels as f64;
    for i in 0..=panels {
        let s = i as f64 * tau;
        let (rho, rho_dot) = if aligned {
            (kernel.rho_at(s), kernel.rho_dot_at(s))
        } else {
            (kernel.rho[i], kernel.rho_dot[i])
        };
        let x = s * r;
        let j0 = (x.floor() as usize).min(j.saturating_sub(1));
        let f = x - j0 as f64;
        let (a, b) = (tau * rho, -tau * rho_dot / delta);
        w[j0] += a * (1.0 - f);
        w[j0 + 1] += a * f;
        v[j0] += b * (1.0 - f);
        v[j0 + 1] += b * f;
    }
    (w, v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MollifiedNoise {
    path: WienerPath,
    delta: f64,
    value: Vec<f64>,
    deriv: Vec<f64>,
    max_rho_dot: f64,
}

/// W^delta and its derivative on path nodes t_n <= t_end.
pub fn mollify(path: &WienerPath, kernel: &MollifierKernel, delta: f64, t_end: f64) -> Result<MollifiedNoise, NoiseError> {
    let dt = path.dt();
    if !(delta >= 2.0 * dt * (1.0 - 1e-12)) {
        return Err(NoiseError::WidthTooSmall { delta, dt });
    }
    let need = t_end + delta;
    if path.horizon() < need * (1.0 - 1e-12) {
        return Err(NoiseError::ShortPath { have: path.horizon(), need });
    }
    let (w, v) = path_weights(kernel, delta, dt);
    let d = path.dim();
    let nodes = ((t_end / dt) + 1e-9).floor() as usize + 1;
    let nodes = nodes.min(path.n_steps() + 2 - w.len());
    let mut value = vec![0.0; nodes * d];
    let mut deriv = vec![0.0; nodes * d];
    let pv = path.values();
    for n in 0..nodes {
        for k in 0..d {
            let (mut a, mut b) = (0.0, 0.0);
            for (j, (wj, vj)) in w.iter().zip(&v).enumerate() {
                let x = pv[(n + j) * d + k];
                a += wj * x;
                b += vj * x;
            }
            value[n * d + k] = a;
            deriv[n * d + k] = b;
        }
    }
    let out = MollifiedNoise { path: path.clone(), delta, value, deriv, max_rho_dot: kernel.max_abs_derivative() };
    debug_assert!(out.check_derivative_bound().is_ok());
    Ok(out)
}

impl MollifiedNoise {
    pub fn path(&self) -> &WienerPath {
        &self.path
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn dt(&self) -> f64 {
        self.path.dt()
    }
    pub fn dim(&self) -> usize {
        self.path.dim()
    }
    pub fn n_nodes(&self) -> usize {
        self.value.len() / self.dim()
    }
    /// Last time at which W^delta is tabulated.
    pub fn horizon(&self) -> f64 {
        (self.n_nodes() - 1) as f64 * self.dt()
    }
    pub fn value(&self, n: usize) -> &[f64] {
        let d = self.dim();
        &self.value[n * d..(n + 1) * d]
    }
    pub fn deriv(&self, n: usize) -> &[f64] {
        let d = self.dim();
        &self.deriv[n * d..(n + 1) * d]
    }

    /// max over tabulated nodes of |W^delta - W|.
    pub fn sup_error(&self) -> f64 {
        let mut m = 0.0f64;
        for n in 0..self.n_nodes() {
            for (a, b) in self.value(n).iter().zip(self.path.node(n)) {
                m = m.max((a - b).abs());
            }
        }
        m
    }

    /// Pathwise bound |W'^delta_t| <= (1/delta) max|rho'| max_{[t, t+delta]} |W|.
    pub fn check_derivative_bound(&self) -> Result<(), NoiseError> {
        let span = (self.delta / self.dt() - 1e-9).ceil() as usize;
        for n in 0..self.n_nodes() {
            let mut wmax = 0.0f64;
            for m in n..=(n + span).min(self.path.n_steps()) {
                let row = self.path.node(m);
                wmax = wmax.max(row.iter().map(|x| x * x).sum::<f64>().sqrt());
            }
            let g: f64 = self.deriv(n).iter().map(|x| x * x).sum::<f64>().sqrt();
            let bound = self.max_rho_dot * wmax / self.delta;
            if g > bound * (1.0 + 1e-9) + 1e-12 {
                return Err(NoiseError::Invariant(format!("derivative {g} above bound {bound} at node {n}")));
            }
        }
        Ok(())
    }

    /// Integral of W'^delta over nodes [a, b] by trapezoid with the
    /// Euler-Maclaurin end correction.
    pub fn integrate_derivative(&self, a: usize, b: usize, k: usize) -> f64 {
        let dt = self.dt();
        let f = |n: usize| self.deriv(n)[k];
        let mut s = 0.5 * (f(a) + f(b));
        for n in a + 1..b {
            s += f(n);
        }
        let slope = |n: usize| {
            let last = self.n_nodes() - 1;
            if n == 0 {
                (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * dt)
            } else if n == last {
                (3.0 * f(n) - 4.0 * f(n - 1) + f(n - 2)) / (2.0 * dt)
            } else {
                (f(n + 1) - f(n - 1)) / (2.0 * dt)
            }
        };
        s * dt - dt * dt / 12.0 * (slope(b) - slope(a))
    }

    /// Value/derivative consistency on [t_a, t_b]; returns the worst mismatch
    /// relative to its allowance 1e-6 (t_b - t_a + 1).
    pub fn consistency_ratio(&self, a: usize, b: usize) -> f64 {
        let len = (b - a) as f64 * self.dt();
        (0..self.dim())
            .map(|k| {
                let diff = self.value(b)[k] - self.value(a)[k];
                (self.integrate_derivative(a, b, k) - diff).abs() / (1e-6 * (len + 1.0))
            })
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "t")?;
        for k in 1..=self.dim() {
            write!(w, ",Wd_{k}")?;
        }
        for k in 1..=self.dim() {
            write!(w, ",dWd_{k}")?;
        }
        writeln!(w)?;
        for n in 0..self.n_nodes() {
            write!(w, "{}", n as f64 * self.dt())?;
            for x in self.value(n).iter().chain(self.deriv(n)) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// max over t in [0, t_end] of |W^delta_t - W_t| for one path.
pub fn mollification_error(path: &WienerPath, kernel: &MollifierKernel, delta: f64, t_end: f64) -> Result<f64, NoiseError> {
    Ok(mollify(path, kernel, delta, t_end)?.sup_error())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Normalisation constant and rho(1/2) from a 30-digit quadrature.
    const C_ORACLE: f64 = 142.250375777095868134485183695;
    const RHO_HALF_ORACLE: f64 = 2.60540651452002772477762398744;

    #[test]
    fn deterministic_paths() {
        let a = sample_wiener(1, 1.0, 1e-3, 7, 0).unwrap();
        let b = sample_wiener(1, 1.0, 1e-3, 7, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.node(0), &[0.0]);
        assert_eq!(a.n_steps(), 1000);
        let c = sample_wiener(1, 1.0, 1e-3, 7, 1).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn rejects_bad_step() {
        assert_eq!(sample_wiener(1, 1.0, 0.0, 1, 0), Err(NoiseError::BadStep(0.0)));
        assert!(sample_wiener(1, 1.0, -1e-3, 1, 0).is_err());
    }

    #[test]
    fn terminal_variance_and_increments() {
        let n = 10_000;
        let dt = 1e-2;
        let (mut s, mut s2) = (0.0, 0.0);
        let (mut inc, mut inc2, mut m) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let p = sample_wiener(2, 1.0, dt, 99, i).unwrap();
            let w = p.node(p.n_steps())[1];
            s += w;
            s2 += w * w;
            let mut d = [0.0; 2];
            for j in 0..p.n_steps() {
                p.increment(j, 1, &mut d);
                inc += d[0];
                inc2 += d[0] * d[0];
                m += 1.0;
            }
        }
        let var = s2 / n as f64 - (s / n as f64).powi(2);
        assert!((var - 1.0).abs() < 0.04 * 2f64.sqrt(), "{var}");
        let mean = inc / m;
        let v = inc2 / m - mean * mean;
        assert!(mean.abs() < 4.0 * (dt / m).sqrt());
        assert!((v - dt).abs() < 4.0 * dt * (2.0 / m).sqrt());
    }

    #[test]
    fn kernel_constants() {
        assert_eq!(build_kernel(511), Err(NoiseError::KernelTooCoarse(511)));
        let k = build_kernel(512).unwrap();
        assert!((k.mass() - 1.0).abs() < 1e-12);
        assert!(k.derivative_mass().abs() < 1e-8);
        assert!((k.c - C_ORACLE).abs() / C_ORACLE < 1e-9, "{}", k.c);
        assert!((k.rho_at(0.5) - k.c * (-4.0f64).exp()).abs() < 1e-12);
        assert!((k.rho_at(0.5) - RHO_HALF_ORACLE).abs() < 1e-8);
        assert_eq!(k.rho_dot_at(0.5), 0.0);
        assert_eq!(k.rho[0], 0.0);
        assert_eq!(*k.rho.last().unwrap(), 0.0);
        assert!(k.rho.iter().all(|&r| r >= 0.0));
    }

    fn linear_path(dt: f64, n: usize) -> WienerPath {
        WienerPath::from_values(1, dt, (0..=n).map(|i| i as f64 * dt).collect()).unwrap()
    }

    #[test]
    fn zero_path_mollifies_to_zero() {
        let p = WienerPath::from_values(1, 1e-3, vec![0.0; 1201]).unwrap();
        let m = mollify(&p, &build_kernel(512).unwrap(), 0.1, 1.0).unwrap();
        assert!((0..m.n_nodes()).all(|n| m.value(n)[0] == 0.0 && m.deriv(n)[0] == 0.0));
    }

    #[test]
    fn linear_path_oracle() {
        let k = build_kernel(1024).unwrap();
        let delta = 0.05;
        let p = linear_path(1e-3, 1100);
        let m = mollify(&p, &k, delta, 1.0).unwrap();
        assert!((k.first_moment() - 0.5).abs() < 1e-12);
        for n in (0..m.n_nodes()).step_by(37) {
            let t = n as f64 * 1e-3;
            assert!((m.value(n)[0] - (t + delta * 0.5)).abs() < 1e-10);
            assert!((m.deriv(n)[0] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn short_path_and_narrow_width_rejected() {
        let k = build_kernel(512).unwrap();
        let p = sample_wiener(1, 1.05, 1e-3, 1, 0).unwrap();
        assert!(matches!(mollify(&p, &k, 0.1, 1.0), Err(NoiseError::ShortPath { .. })));
        assert!(matches!(mollify(&p, &k, 1.5e-3, 1.0), Err(NoiseError::WidthTooSmall { .. })));
    }

    #[test]
    fn error_shrinks_with_width_on_one_path() {
        let k = build_kernel(512).unwrap();
        let p = sample_wiener(1, 1.2, 1e-4, 5, 0).unwrap();
        let e: Vec<f64> = [0.1, 0.05, 0.025].iter().map(|&d| mollification_error(&p, &k, d, 1.0).unwrap()).collect();
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
    }

    #[test]
    fn ensemble_error_monotone_in_width() {
        let k = build_kernel(512).unwrap();
        let mut acc = [0.0; 3];
        for i in 0..1000 {
            let p = sample_wiener(1, 1.11, 1e-3, 17, i).unwrap();
            for (a, d) in acc.iter_mut().zip([0.1, 0.05, 0.025]) {
                *a += mollification_error(&p, &k, d, 1.0).unwrap().powi(2);
            }
        }
        assert!(acc[0] > acc[1] && acc[1] > acc[2], "{acc:?}");
    }

    #[test]
    fn error_at_minimal_width_bounded_by_window_increment() {
        let k = build_kernel(512).unwrap();
        let p = sample_wiener(1, 1.01, 1e-3, 8, 3).unwrap();
        let e = mollification_error(&p, &k, 2e-3, 1.0).unwrap();
        let mut worst = 0.0f64;
        for n in 0..=1000 {
            for j in 1..=2 {
                worst = worst.max((p.node(n + j)[0] - p.node(n)[0]).abs());
            }
        }
        assert!(e <= worst, "{e} > {worst}");
    }

    #[test]
    fn value_and_derivative_consistent() {
        let k = build_kernel(512).unwrap();
        for (seed, delta, dt) in [(1, 0.1, 2e-4), (2, 0.05, 2.5e-4), (3, 0.025, 2e-4)] {
            let p = sample_wiener(2, 1.0 + delta, dt, seed, 0).unwrap();
            let m = mollify(&p, &k, delta, 1.0).unwrap();
            m.check_derivative_bound().unwrap();
            let last = m.n_nodes() - 1;
            for (a, b) in [(0, last), (10, last / 2), (last / 3, last - 7)] {
                let r = m.consistency_ratio(a, b);
                assert!(r <= 1.0, "delta {delta}: ratio {r}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn stream_determinism(seed in any::<u64>(), stream in 0u64..1000) {
            let a = sample_wiener(1, 0.1, 1e-2, seed, stream).unwrap();
            let b = sample_wiener(1, 0.1, 1e-2, seed, stream).unwrap();
            prop_assert_eq!(a.values(), b.values());
            let mut aux1 = a.aux_rng();
            let mut aux2 = b.aux_rng();
            let x: f64 = StandardNormal.sample(&mut aux1);
            let y: f64 = StandardNormal.sample(&mut aux2);
            prop_assert_eq!(x, y);
        }

        #[test]
        fn mollified_bound_holds(seed in any::<u64>(), r in 2usize..40) {
            let dt = 1e-3;
            let k = build_kernel(512).unwrap();
            let delta = r as f64 * dt;
            let p = sample_wiener(1, 0.2 + delta, dt, seed, 0).unwrap();
            let m = mollify(&p, &k, delta, 0.2).unwrap();
            prop_assert!(m.check_derivative_bound().is_ok());
        }
    }
}

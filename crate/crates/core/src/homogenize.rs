//! Periodic homogenization on the unit torus, d in {1, 2}.
//!
//! A0 f = (1/(2 lambda^2)) lap f - (grad lambda / (2 lambda^3)) . grad f,
//! discretised with centered second-order differences and the analytic
//! gradient of lambda. Cell problems A0 N_k = d_k lambda / (2 lambda^3) are
//! solved by right-preconditioned GMRES with an FFT inverse of the discrete
//! Laplacian.

use crate::integrate::{simulate_limit, IntegrateError, LimitSampler};
use crate::model::{DriftField, FrictionField, ModelSpec};
use crate::noise::{sample_wiener, NoiseError};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;
use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomogenizeError {
    #[error("torus grid needs d in {{1, 2}} and n >= 16 (got d = {d}, n = {n})")]
    BadGrid { d: usize, n: usize },
    #[error("field dimension {field} does not match grid dimension {grid}")]
    Dimension { field: usize, grid: usize },
    #[error("friction must be smooth on the torus")]
    NotSmooth,
    #[error("cell solve did not converge: relative residual {residual:e} after {iterations} iterations")]
    NonConvergent { residual: f64, iterations: usize },
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TorusGrid {
    pub d: usize,
    pub n: usize,
}

impl TorusGrid {
    pub fn new(d: usize, n: usize) -> Result<Self, HomogenizeError> {
        if !(1..=2).contains(&d) || n < 16 {
            return Err(HomogenizeError::BadGrid { d, n });
        }
        Ok(Self { d, n })
    }
    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }
    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Coordinates of flat node p; the first coordinate varies fastest.
    pub fn point(&self, p: usize) -> [f64; 2] {
        let h = self.spacing();
        [(p % self.n) as f64 * h, (p / self.n) as f64 * h]
    }
    /// Periodic neighbour of p one step along axis k, forward or backward.
    #[inline]
    fn shift(&self, p: usize, k: usize, forward: bool) -> usize {
        let n = self.n;
        let stride = if k == 0 { 1 } else { n };
        let i = (p / stride) % n;
        if forward {
            if i + 1 == n {
                p + stride - n * stride
            } else {
                p + stride
            }
        } else if i == 0 {
            p + (n - 1) * stride
        } else {
            p - stride
        }
    }
    pub fn mean(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() / f.len() as f64
    }
    /// Centered difference along axis k.
    pub fn diff(&self, f: &[f64], k: usize) -> Vec<f64> {
        let s = 0.5 * self.n as f64;
        (0..self.len()).map(|p| s * (f[self.shift(p, k, true)] - f[self.shift(p, k, false)])).collect()
    }
    fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|p| f(&self.point(p)[..self.d])).collect()
    }
}

/// Matrix-free A0 on a torus grid: coefficient a = 1/(2 lambda^2) on the
/// Laplacian and v_k = d_k lambda / (2 lambda^3) on the first-order term.
#[derive(Clone, Debug)]
pub struct A0Operator {
    pub grid: TorusGrid,
    lambda: Vec<f64>,
    grad: Vec<Vec<f64>>,
    a: Vec<f64>,
    v: Vec<Vec<f64>>,
}

fn check_field(lambda: &FrictionField, grid: TorusGrid) -> Result<(), HomogenizeError> {
    if lambda.dim() != grid.d {
        return Err(HomogenizeError::Dimension { field: lambda.dim(), grid: grid.d });
    }
    if !lambda.is_smooth() {
        return Err(HomogenizeError::NotSmooth);
    }
    Ok(())
}

pub fn assemble_a0(lambda: &FrictionField, grid: TorusGrid) -> Result<A0Operator, HomogenizeError> {
    check_field(lambda, grid)?;
    let lam = grid.sample(|y| lambda.eval(y));
    let mut grad = vec![vec![0.0; grid.len()]; grid.d];
    let mut g = vec![0.0; grid.d];
    for p in 0..grid.len() {
        lambda.grad_into(&grid.point(p)[..grid.d], &mut g).map_err(|_| HomogenizeError::NotSmooth)?;
        for k in 0..grid.d {
            grad[k][p] = g[k];
        }
    }
    let a = lam.iter().map(|l| 0.5 / (l * l)).collect();
    let v = grad.iter().map(|gk| gk.iter().zip(&lam).map(|(g, l)| 0.5 * g / (l * l * l)).collect()).collect();
    Ok(A0Operator { grid, lambda: lam, grad, a, v })
}

impl A0Operator {
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }
    pub fn grad_lambda(&self, k: usize) -> &[f64] {
        &self.grad[k]
    }

    fn lap_at(&self, f: &[f64], p: usize, k: usize) -> f64 {
        let g = &self.grid;
        f[g.shift(p, k, true)] - 2.0 * f[p] + f[g.shift(p, k, false)]
    }
    fn cdiff_at(&self, f: &[f64], p: usize, k: usize) -> f64 {
        let g = &self.grid;
        f[g.shift(p, k, true)] - f[g.shift(p, k, false)]
    }

    pub fn apply(&self, f: &[f64], out: &mut [f64]) {
        let n = self.grid.n as f64;
        for p in 0..self.grid.len() {
            let mut s = 0.0;
            for k in 0..self.grid.d {
                s += self.a[p] * n * n * self.lap_at(f, p, k) - self.v[k][p] * 0.5 * n * self.cdiff_at(f, p, k);
            }
            out[p] = s;
        }
    }

    /// Discrete adjoint: lap(a g) + sum_k D_k(v_k g).
    pub fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        let n = self.grid.n as f64;
        let ag: Vec<f64> = self.a.iter().zip(g).map(|(a, g)| a * g).collect();
        let vg: Vec<Vec<f64>> = self.v.iter().map(|vk| vk.iter().zip(g).map(|(v, g)| v * g).collect()).collect();
        for p in 0..self.grid.len() {
            let mut s = 0.0;
            for k in 0..self.grid.d {
                s += n * n * self.lap_at(&ag, p, k) + 0.5 * n * self.cdiff_at(&vg[k], p, k);
            }
            out[p] = s;
        }
    }
}

/// FFT pseudo-inverse of the periodic second-order Laplacian (mean mode
/// mapped to zero).
struct LaplaceInverse {
    grid: TorusGrid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    eig: Vec<f64>,
}

impl LaplaceInverse {
    fn new(grid: TorusGrid) -> Self {
        let mut planner = FftPlanner::new();
        let n = grid.n;
        let eig = (0..n).map(|m| -4.0 * (n * n) as f64 * (PI * m as f64 / n as f64).sin().powi(2)).collect();
        Self { grid, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n), eig }
    }

    fn transform(&self, buf: &mut [Complex<f64>], plan: &Arc<dyn Fft<f64>>) {
        let n = self.grid.n;
        if self.grid.d == 1 {
            plan.process(buf);
            return;
        }
        for row in buf.chunks_mut(n) {
            plan.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for i in 0..n {
            for j in 0..n {
                col[j] = buf[i + n * j];
            }
            plan.process(&mut col);
            for j in 0..n {
                buf[i + n * j] = col[j];
            }
        }
    }

    fn solve(&self, f: &[f64], out: &mut [f64]) {
        let n = self.grid.n;
        let mut buf: Vec<Complex<f64>> = f.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.transform(&mut buf, &self.fwd);
        for (p, z) in buf.iter_mut().enumerate() {
            let e = if self.grid.d == 1 { self.eig[p] } else { self.eig[p % n] + self.eig[p / n] };
            *z = if p == 0 { Complex::new(0.0, 0.0) } else { *z / e };
        }
        self.transform(&mut buf, &self.inv);
        let scale = 1.0 / f.len() as f64;
        for (o, z) in out.iter_mut().zip(&buf) {
            *o = z.re * scale;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Restarted GMRES from x = 0. Returns (x, iterations, relative residual).
fn gmres(apply: impl Fn(&[f64], &mut [f64]), b: &[f64], tol: f64, restart: usize, max_iter: usize) -> (Vec<f64>, usize, f64) {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return (x, 0, 0.0);
    }
    let mut r = b.to_vec();
    let mut ax = vec![0.0; n];
    let mut iters = 0;
    loop {
        let beta = dot(&r, &r).sqrt();
        if beta / bnorm <= tol || iters >= max_iter {
            return (x, iters, beta / bnorm);
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess = vec![vec![0.0; restart]; restart + 1];
        let (mut cs, mut sn) = (vec![0.0; restart], vec![0.0; restart]);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut k_used = 0;
        for j in 0..restart {
            let mut w = vec![0.0; n];
            apply(&basis[j], &mut w);
            for (i, vi) in basis.iter().enumerate() {
                let hij = dot(&w, vi);
                hess[i][j] = hij;
                w.iter_mut().zip(vi).for_each(|(a, b)| *a -= hij * b);
            }
            let hn = dot(&w, &w).sqrt();
            hess[j + 1][j] = hn;
            for i in 0..j {
                let t = cs[i] * hess[i][j] + sn[i] * hess[i + 1][j];
                hess[i + 1][j] = -sn[i] * hess[i][j] + cs[i] * hess[i + 1][j];
                hess[i][j] = t;
            }
            let den = hess[j][j].hypot(hess[j + 1][j]);
            cs[j] = hess[j][j] / den;
            sn[j] = hess[j + 1][j] / den;
            hess[j][j] = den;
            hess[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            iters += 1;
            k_used = j + 1;
            if g[j + 1].abs() / bnorm <= tol * 0.1 || hn == 0.0 || iters >= max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|l| hess[i][l] * y[l]).sum();
            y[i] = (g[i] - s) / hess[i][i];
        }
        for (yi, vi) in y.iter().zip(&basis) {
            x.iter_mut().zip(vi).for_each(|(a, b)| *a += yi * b);
        }
        apply(&x, &mut ax);
        r.iter_mut().zip(b.iter().zip(&ax)).for_each(|(ri, (bi, ai))| *ri = bi - ai);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSolution {
    pub grid: TorusGrid,
    /// N_k on the grid, first coordinate fastest
    pub correctors: Vec<Vec<f64>>,
    /// ||A0 N_k - (rhs_k - c_k)||_inf / ||rhs_k||_inf
    pub residuals: Vec<f64>,
    pub means: Vec<f64>,
    /// constant c_k removed from rhs_k to put it in the range of discrete A0
    pub projections: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl CellSolution {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.grid.d;
        let cols: Vec<String> = (0..d).map(|k| format!("y{}", k + 1)).chain((0..d).map(|k| format!("N{}", k + 1))).collect();
        writeln!(w, "{}", cols.join(","))?;
        for p in 0..self.grid.len() {
            let y = self.grid.point(p);
            let row: Vec<String> = y[..d].iter().map(|v| v.to_string()).chain(self.correctors.iter().map(|n| n[p].to_string())).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

const CELL_TOL: f64 = 1e-10;

/// Solves A0 N_k = d_k lambda / (2 lambda^3) with mean(N_k) = 0. The singular
/// system is bordered: unknowns (N, c) satisfy A0 N + c = rhs, which is the
/// projection of rhs onto the range of discrete A0; c is reported.
pub fn solve_cell(lambda: &FrictionField, grid: TorusGrid) -> Result<CellSolution, HomogenizeError> {
    let op = assemble_a0(lambda, grid)?;
    let lap = LaplaceInverse::new(grid);
    let m = grid.len();
    let two_l2: Vec<f64> = op.lambda.iter().map(|l| 2.0 * l * l).collect();
    // K(w) = 2 lambda^2 (A0 lap^+ w + mean(w))
    let k_op = |w: &[f64], out: &mut [f64]| {
        let mut nv = vec![0.0; m];
        lap.solve(w, &mut nv);
        op.apply(&nv, out);
        let c = grid.mean(w);
        for p in 0..m {
            out[p] = two_l2[p] * (out[p] + c);
        }
    };
    let mut sol = CellSolution {
        grid,
        correctors: Vec::new(),
        residuals: Vec::new(),
        means: Vec::new(),
        projections: Vec::new(),
        iterations: Vec::new(),
    };
    for k in 0..grid.d {
        let rhs: Vec<f64> = (0..m).map(|p| op.v[k][p]).collect();
        let scaled: Vec<f64> = (0..m).map(|p| two_l2[p] * rhs[p]).collect();
        let (w, iters, _) = gmres(k_op, &scaled, 1e-14, 80, 2000);
        let mut nk = vec![0.0; m];
        lap.solve(&w, &mut nk);
        let shift = grid.mean(&nk);
        nk.iter_mut().for_each(|x| *x -= shift);
        let c = grid.mean(&w);
        let mut an = vec![0.0; m];
        op.apply(&nk, &mut an);
        let rnorm = rhs.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        let res = (0..m).fold(0.0f64, |a, p| a.max((an[p] - rhs[p] + c).abs()));
        let rel = if rnorm > 0.0 { res / rnorm } else { res };
        if rel > CELL_TOL {
            return Err(HomogenizeError::NonConvergent { residual: rel, iterations: iters });
        }
        sol.means.push(grid.mean(&nk));
        sol.correctors.push(nk);
        sol.residuals.push(rel);
        sol.projections.push(c);
        sol.iterations.push(iters);
    }
    Ok(sol)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EffectiveCoefficients {
    pub d: usize,
    pub n: usize,
    /// row-major d x d, from the quadratic (first) form
    pub a_bar: Vec<f64>,
    /// row-major d x d, from the simplified (second) form
    pub a_bar_simplified: Vec<f64>,
    pub b_bar: Vec<f64>,
    /// max |a_bar - a_bar_simplified|
    pub form_gap: f64,
    /// max |a_ij - a_ji| of the quadratic form
    pub asymmetry: f64,
    pub min_eigenvalue: f64,
    pub cell_residuals: Vec<f64>,
}

impl EffectiveCoefficients {
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a_bar[i * self.d + j]
    }
    /// Coefficients for noise intensity sigma: the correctors do not change,
    /// the diffusion matrix scales by sigma^2 and the drift is unaffected.
    pub fn with_sigma(&self, sigma: f64) -> Self {
        let s2 = sigma * sigma;
        let mut out = self.clone();
        out.a_bar.iter_mut().for_each(|a| *a *= s2);
        out.a_bar_simplified.iter_mut().for_each(|a| *a *= s2);
        out.form_gap *= s2;
        out.asymmetry *= s2;
        out.min_eigenvalue *= s2;
        out
    }
}

fn min_eig(a: &[f64], d: usize) -> f64 {
    if d == 1 {
        return a[0];
    }
    let (p, q, r) = (a[0], 0.5 * (a[1] + a[2]), a[3]);
    0.5 * (p + r) - (0.25 * (p - r).powi(2) + q * q).sqrt()
}

/// Both diffusion formulas and the drift, by the periodic rectangle rule.
/// Derivatives of N use the same centered differences as the solver.
pub fn effective_coefficients(lambda: &FrictionField, b: &DriftField, cell: &CellSolution) -> Result<EffectiveCoefficients, HomogenizeError> {
    let grid = cell.grid;
    check_field(lambda, grid)?;
    if b.dim() != grid.d {
        return Err(HomogenizeError::Dimension { field: b.dim(), grid: grid.d });
    }
    let d = grid.d;
    let m = grid.len();
    let lam = grid.sample(|y| lambda.eval(y));
    let inv: Vec<f64> = lam.iter().map(|l| 1.0 / l).collect();
    let int_lam = grid.mean(&lam);
    let int_inv = grid.mean(&inv);
    // dn[i][k] = d_k N_i
    let dn: Vec<Vec<Vec<f64>>> = cell.correctors.iter().map(|n| (0..d).map(|k| grid.diff(n, k)).collect()).collect();
    let mut a8 = vec![0.0; d * d];
    let mut a9 = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let delta = if i == j { 1.0 } else { 0.0 };
            let mut s = 0.0;
            for p in 0..m {
                let gg: f64 = (0..d).map(|k| dn[i][k][p] * dn[j][k][p]).sum();
                s += inv[p] * (gg + dn[j][i][p] + dn[i][j][p] + delta);
            }
            a8[i * d + j] = s / m as f64 / int_lam;
            let s9: f64 = (0..m).map(|p| dn[j][i][p] * inv[p]).sum::<f64>() / m as f64;
            a9[i * d + j] = (s9 + delta * int_inv) / int_lam;
        }
    }
    let mut bv = vec![vec![0.0; m]; d];
    let mut tmp = vec![0.0; d];
    for p in 0..m {
        b.eval_into(&grid.point(p)[..d], &mut tmp);
        for k in 0..d {
            bv[k][p] = tmp[k];
        }
    }
    let b_bar = (0..d)
        .map(|i| {
            let mut s = grid.mean(&bv[i]);
            for k in 0..d {
                s += (0..m).map(|p| bv[k][p] * dn[i][k][p]).sum::<f64>() / m as f64;
            }
            s / int_lam
        })
        .collect();
    let form_gap = a8.iter().zip(&a9).fold(0.0f64, |g, (x, y)| g.max((x - y).abs()));
    let asymmetry = if d == 2 { (a8[1] - a8[2]).abs() } else { 0.0 };
    Ok(EffectiveCoefficients {
        d,
        n: grid.n,
        min_eigenvalue: min_eig(&a8, d),
        a_bar: a8,
        a_bar_simplified: a9,
        b_bar,
        form_gap,
        asymmetry,
        cell_residuals: cell.residuals.clone(),
    })
}

/// ||(A0)^T lambda||_inf on the grid.
pub fn invariant_density_residual(lambda: &FrictionField, grid: TorusGrid) -> Result<f64, HomogenizeError> {
    let op = assemble_a0(lambda, grid)?;
    let mut out = vec![0.0; grid.len()];
    op.apply_transpose(op.lambda(), &mut out);
    Ok(out.iter().fold(0.0, |m, x| m.max(x.abs())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McDiffusivity {
    pub eps: f64,
    pub t_end: f64,
    pub n_paths: usize,
    /// row-major empirical covariance of q_T divided by T
    pub a_bar: Vec<f64>,
    pub a_bar_se: Vec<f64>,
    /// mean of (q_T - q0)/T
    pub drift_raw: Vec<f64>,
    pub drift_raw_se: Vec<f64>,
    /// raw drift with the path integral of the correction drift added back
    /// (left-point sum on the simulation grid)
    pub drift_corrected: Vec<f64>,
}

/// Long-time Monte Carlo for lambda(q) = cell(q/eps), b(q) = cell_b(q/eps),
/// sigma = 1, q0 = 0.
pub fn mc_effective_diffusivity(
    cell: &FrictionField,
    cell_b: &DriftField,
    eps: f64,
    t_end: f64,
    n_paths: usize,
    seed: u64,
    h: f64,
    sampler: LimitSampler,
) -> Result<McDiffusivity, HomogenizeError> {
    let d = cell.dim();
    if cell_b.dim() != d {
        return Err(HomogenizeError::Dimension { field: cell_b.dim(), grid: d });
    }
    let mut spec = ModelSpec::new(FrictionField::rescaled(cell.clone(), eps), DriftField::rescaled(cell_b.clone(), eps));
    spec.t_end = t_end;
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|stream| -> Result<_, HomogenizeError> {
            let path = sample_wiener(d, t_end, h, seed, stream)?;
            let tr = simulate_limit(sampler, &spec, &path, h)?;
            let disp: Vec<f64> = (0..d).map(|i| tr.terminal()[i] - spec.q0[i]).collect();
            let mut corr = vec![0.0; d];
            let mut g = vec![0.0; d];
            for n in 0..tr.steps() {
                let q = tr.q(n);
                let l = spec.friction.eval(q);
                spec.friction.grad_into(q, &mut g).map_err(|_| HomogenizeError::NotSmooth)?;
                for i in 0..d {
                    corr[i] += spec.sigma * spec.sigma * g[i] / (2.0 * l * l * l) * tr.h;
                }
            }
            Ok((disp, corr))
        })
        .collect::<Result<_, _>>()?;
    let n = n_paths as f64;
    let mean: Vec<f64> = (0..d).map(|i| per_path.iter().map(|p| p.0[i]).sum::<f64>() / n).collect();
    let mut a_bar = vec![0.0; d * d];
    let mut a_se = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let prods: Vec<f64> = per_path.iter().map(|p| (p.0[i] - mean[i]) * (p.0[j] - mean[j])).collect();
            let c = prods.iter().sum::<f64>() / (n - 1.0);
            let v = prods.iter().map(|x| (x - c).powi(2)).sum::<f64>() / (n - 1.0);
            a_bar[i * d + j] = c / t_end;
            a_se[i * d + j] = (v / n).sqrt() / t_end;
        }
    }
    let drift_raw_se = (0..d)
        .map(|i| {
            let v = per_path.iter().map(|p| (p.0[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0);
            (v / n).sqrt() / t_end
        })
        .collect();
    let drift_corrected = (0..d).map(|i| per_path.iter().map(|p| p.0[i] + p.1[i]).sum::<f64>() / n / t_end).collect();
    Ok(McDiffusivity {
        eps,
        t_end,
        n_paths,
        a_bar,
        a_bar_se: a_se,
        drift_raw: mean.iter().map(|m| m / t_end).collect(),
        drift_raw_se,
        drift_corrected,
    })
}

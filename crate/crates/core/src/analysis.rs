//! Ensemble statistics and reference solutions.
//!
//! The moment oracle integrates the mean/covariance ODEs of the linear SDE
//! directly with RK4, independent of the matrix exponentials in
//! [`crate::math`], so it can serve as a cross-check for every simulator.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::math::StrainRate;

/// Which linear SDE the oracle integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentVariant {
    /// `M dV = -γ(V - AQ)dt + σ dW`
    Neld,
    /// `M dV = M A V dt - γ(V - AQ)dt + σ dW`
    NeldA,
}

/// Drift matrix B of the 2d-dimensional state (Q, V).
pub fn drift_matrix(gamma: f64, mass: f64, a: &StrainRate, variant: MomentVariant) -> DMatrix<f64> {
    let d = a.dim();
    let k = gamma / mass;
    let mut b = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        b[(i, d + i)] = 1.0;
        b[(d + i, d + i)] = -k;
        for j in 0..d {
            b[(d + i, j)] += k * a.matrix()[(i, j)];
            if variant == MomentVariant::NeldA {
                b[(d + i, d + j)] += a.matrix()[(i, j)];
            }
        }
    }
    b
}

/// Noise covariance rate ΣΣᵀ with (σ/M)² on the velocity block.
pub fn diffusion_matrix(sigma: f64, mass: f64, dim: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(2 * dim, 2 * dim);
    for i in 0..dim {
        q[(dim + i, dim + i)] = (sigma / mass).powi(2);
    }
    q
}

fn moment_rhs(
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    m: &DVector<f64>,
    c: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let bc = b * c;
    (b * m, &bc + bc.transpose() + q)
}

fn rk4(
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    m: &DVector<f64>,
    c: &DMatrix<f64>,
    h: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let (k1m, k1c) = moment_rhs(b, q, m, c);
    let (k2m, k2c) = moment_rhs(b, q, &(m + &k1m * (h / 2.0)), &(c + &k1c * (h / 2.0)));
    let (k3m, k3c) = moment_rhs(b, q, &(m + &k2m * (h / 2.0)), &(c + &k2c * (h / 2.0)));
    let (k4m, k4c) = moment_rhs(b, q, &(m + &k3m * h), &(c + &k3c * h));
    let nm = m + (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
    let nc = c + (k1c + k2c * 2.0 + k3c * 2.0 + k4c) * (h / 6.0);
    (nm, nc)
}

fn symmetrize(c: &mut DMatrix<f64>) {
    let n = c.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = s;
            c[(j, i)] = s;
        }
    }
}

/// Solve `m' = Bm`, `C' = BC + CBᵀ + Q` on [0, t] by step-doubling RK4 with
/// relative tolerance `tol`.
pub fn linear_moments(
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    t: f64,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
    tol: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = b.nrows();
    if mean0.len() != n || cov0.nrows() != n || cov0.ncols() != n {
        return invalid("initial moments do not match the state dimension");
    }
    if t < 0.0 {
        return invalid("t must be nonnegative");
    }
    let mut m = mean0.clone();
    let mut c = cov0.clone();
    symmetrize(&mut c);
    let rate = b.norm().max(1e-3);
    let mut h = (0.05 / rate).min(t);
    let mut s = 0.0;
    let mut steps = 0usize;
    while s < t {
        if steps > 10_000_000 {
            return Err(Error::InsufficientData("moment integration did not finish".into()));
        }
        steps += 1;
        h = h.min(t - s);
        let (m1, c1) = rk4(b, q, &m, &c, h);
        let (mh, ch) = rk4(b, q, &m, &c, h / 2.0);
        let (m2, c2) = rk4(b, q, &mh, &ch, h / 2.0);
        let scale = 1.0 + m2.amax().max(c2.amax());
        let err = (&m2 - &m1).amax().max((&c2 - &c1).amax()) / 15.0;
        if err <= tol * scale || h < 1e-12 {
            m = &m2 + (&m2 - &m1) / 15.0;
            c = &c2 + (&c2 - &c1) / 15.0;
            symmetrize(&mut c);
            s += h;
            let grow = if err == 0.0 { 2.0 } else { (0.9 * (tol * scale / err).powf(0.2)).min(2.0) };
            h *= grow.max(0.2);
        } else {
            h *= (0.9 * (tol * scale / err).powf(0.2)).max(0.1);
        }
    }
    Ok((m, c))
}

/// Mean and covariance at time t of the linear SDE for (Q, V).
#[allow(clippy::too_many_arguments)]
pub fn linear_sde_moments(
    gamma: f64,
    sigma: f64,
    mass: f64,
    a: &StrainRate,
    variant: MomentVariant,
    t: f64,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let b = drift_matrix(gamma, mass, a, variant);
    let q = diffusion_matrix(sigma, mass, a.dim());
    linear_moments(&b, &q, t, mean0, cov0, 1e-10)
}

/// Sample mean and covariance with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mean_se: DVector<f64>,
    pub cov_se: DMatrix<f64>,
    pub n: usize,
}

impl MomentReport {
    /// Largest deviation from the reference in units of standard error.
    pub fn max_z(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let mut z: f64 = 0.0;
        for i in 0..self.mean.len() {
            let se = self.mean_se[i].max(1e-300);
            z = z.max((self.mean[i] - mean[i]).abs() / se);
            for j in 0..self.mean.len() {
                let se = self.cov_se[(i, j)].max(1e-300);
                z = z.max((self.cov[(i, j)] - cov[(i, j)]).abs() / se);
            }
        }
        z
    }

    /// `|Δmean| + ‖Δcov‖_F` against a reference.
    pub fn error(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        (&self.mean - mean).norm() + (&self.cov - cov).norm()
    }

    /// Restrict to a subset of coordinates.
    pub fn select(&self, idx: &[usize]) -> MomentReport {
        let k = idx.len();
        MomentReport {
            mean: DVector::from_fn(k, |i, _| self.mean[idx[i]]),
            cov: DMatrix::from_fn(k, k, |i, j| self.cov[(idx[i], idx[j])]),
            mean_se: DVector::from_fn(k, |i, _| self.mean_se[idx[i]]),
            cov_se: DMatrix::from_fn(k, k, |i, j| self.cov_se[(idx[i], idx[j])]),
            n: self.n,
        }
    }
}

/// Moments of a set of equal-length samples.
pub fn sample_moments(samples: &[Vec<f64>]) -> Result<MomentReport> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData("need at least two samples".into()));
    }
    let k = samples[0].len();
    if samples.iter().any(|s| s.len() != k) {
        return invalid("samples have different lengths");
    }
    let nf = n as f64;
    let mut mean = DVector::zeros(k);
    for s in samples {
        for i in 0..k {
            mean[i] += s[i];
        }
    }
    mean /= nf;
    let mut cov: DMatrix<f64> = DMatrix::zeros(k, k);
    let mut prod_sq: DMatrix<f64> = DMatrix::zeros(k, k);
    for s in samples {
        for i in 0..k {
            for j in 0..k {
                let p = (s[i] - mean[i]) * (s[j] - mean[j]);
                cov[(i, j)] += p;
                prod_sq[(i, j)] += p * p;
            }
        }
    }
    let mut cov_se = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let mu = cov[(i, j)] / nf;
            let var_p = (prod_sq[(i, j)] / nf - mu * mu).max(0.0) * nf / (nf - 1.0);
            cov_se[(i, j)] = (var_p / nf).sqrt();
        }
    }
    cov /= nf - 1.0;
    let mean_se = DVector::from_fn(k, |i, _| (cov[(i, i)].max(0.0) / nf).sqrt());
    Ok(MomentReport { mean, cov, mean_se, cov_se, n })
}

/// Right-continuous piecewise-constant path through recorded samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CadlagTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub jumps: Vec<bool>,
}

impl CadlagTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a sample. A sample at the time of the last one replaces it.
    pub fn push(&mut self, t: f64, value: Vec<f64>, jump: bool) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if t < last {
                return invalid(format!("sample time {t} precedes {last}"));
            }
            if t == last {
                let k = self.times.len() - 1;
                self.values[k] = value;
                self.jumps[k] |= jump;
                return Ok(());
            }
        }
        self.times.push(t);
        self.values.push(value);
        self.jumps.push(jump);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((*self.times.first()?, *self.times.last()?))
    }

    /// Value at t (the last sample at or before t).
    pub fn eval(&self, t: f64) -> Option<&[f64]> {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return None;
        }
        Some(&self.values[k - 1])
    }

    /// Copy keeping only the given coordinates.
    pub fn project(&self, idx: &[usize]) -> CadlagTrajectory {
        CadlagTrajectory {
            times: self.times.clone(),
            values: self.values.iter().map(|v| idx.iter().map(|&i| v[i]).collect()).collect(),
            jumps: self.jumps.clone(),
        }
    }

    fn jump_times(&self) -> Vec<f64> {
        let flagged: Vec<f64> = (1..self.len()).filter(|&k| self.jumps[k]).map(|k| self.times[k]).collect();
        if !flagged.is_empty() {
            return flagged;
        }
        (1..self.len()).filter(|&k| self.values[k] != self.values[k - 1]).map(|k| self.times[k]).collect()
    }
}

/// Moments at time t over an ensemble of trajectories.
pub fn ensemble_moments(trajs: &[CadlagTrajectory], t: f64) -> Result<MomentReport> {
    let mut samples = Vec::with_capacity(trajs.len());
    for tr in trajs {
        let (lo, hi) = tr.span().ok_or_else(|| Error::InsufficientData("empty trajectory".into()))?;
        if t < lo || t > hi {
            return invalid(format!("t = {t} outside trajectory span [{lo}, {hi}]"));
        }
        samples.push(tr.eval(t).expect("inside span").to_vec());
    }
    sample_moments(&samples)
}

/// Least-squares slope of log y against log t over `lo ≤ t ≤ hi`.
pub fn loglog_slope(ts: &[f64], ys: &[f64], lo: f64, hi: f64) -> Result<(f64, f64)> {
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    for (&t, &y) in ts.iter().zip(ys) {
        if t >= lo && t <= hi {
            if !(t > 0.0 && y > 0.0) {
                return invalid(format!("nonpositive value at t = {t}: y = {y}"));
            }
            xs.push(t.ln());
            zs.push(y.ln());
        }
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("{n} points in window")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let mz = zs.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxz: f64 = xs.iter().zip(&zs).map(|(x, z)| (x - mx) * (z - mz)).sum();
    let slope = sxz / sxx;
    let rss: f64 = xs.iter().zip(&zs).map(|(x, z)| (z - mz - slope * (x - mx)).powi(2)).sum();
    let se = (rss / (nf - 2.0) / sxx).sqrt();
    Ok((slope, se))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Piecewise-linear increasing bijection of [0, T] through given nodes.
struct Warp {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Warp {
    fn forward(&self, x: f64) -> f64 {
        interp(&self.xs, &self.ys, x)
    }

    fn inverse(&self, y: f64) -> f64 {
        interp(&self.ys, &self.xs, y)
    }

    fn max_shift(&self) -> f64 {
        self.xs.iter().zip(&self.ys).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&s| s <= x);
    if k == 0 {
        return ys[0];
    }
    if k == xs.len() {
        return ys[xs.len() - 1];
    }
    let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
    if x == x0 {
        return y0;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// sup over [t0, T] of |f(t) - g(λ(t))|.
fn warped_sup(f: &CadlagTrajectory, g: &CadlagTrajectory, w: &Warp) -> f64 {
    let mut pts: Vec<(f64, f64)> = f.times.iter().map(|&x| (x, w.forward(x))).collect();
    pts.extend(g.times.iter().map(|&y| (w.inverse(y), y)));
    let mut best: f64 = 0.0;
    for (x, y) in pts {
        if let (Some(a), Some(b)) = (f.eval(x), g.eval(y)) {
            best = best.max(dist(a, b));
        }
    }
    best
}

/// Upper bound on the Skorokhod distance between two cadlag paths on a
/// common span. Values are held constant between samples.
///
/// The bound is the best of the identity warp (the sup-norm distance) and
/// piecewise-linear warps that move each jump of `f` onto the nearest jump
/// of `g` within a window.
pub fn skorokhod_upper(f: &CadlagTrajectory, g: &CadlagTrajectory) -> Result<f64> {
    let (f0, f1) = f.span().ok_or_else(|| Error::InsufficientData("empty path".into()))?;
    let (g0, g1) = g.span().ok_or_else(|| Error::InsufficientData("empty path".into()))?;
    if f0 != g0 || f1 != g1 {
        return invalid(format!("spans differ: [{f0}, {f1}] vs [{g0}, {g1}]"));
    }
    let ident = Warp { xs: vec![f0, f1], ys: vec![f0, f1] };
    let mut best = warped_sup(f, g, &ident);
    if best == 0.0 {
        return Ok(0.0);
    }
    let fj = f.jump_times();
    let gj = g.jump_times();
    if fj.is_empty() || gj.is_empty() {
        return Ok(best);
    }
    let nearest: Vec<(f64, f64)> = fj
        .iter()
        .map(|&a| {
            let k = gj.partition_point(|&b| b < a);
            let mut cand = gj[k.min(gj.len() - 1)];
            if k > 0 && (a - gj[k - 1]).abs() <= (cand - a).abs() {
                cand = gj[k - 1];
            }
            (a, cand)
        })
        .collect();
    let mut windows: Vec<f64> = nearest.iter().map(|(a, b)| (a - b).abs()).collect();
    windows.sort_by(f64::total_cmp);
    windows.dedup();
    let picks: Vec<f64> = if windows.len() <= 24 {
        windows
    } else {
        (0..24).map(|i| windows[i * (windows.len() - 1) / 23]).collect()
    };
    for win in picks {
        if win >= best {
            break;
        }
        let mut xs = vec![f0];
        let mut ys = vec![f0];
        for &(a, b) in &nearest {
            if (a - b).abs() > win || a <= f0 || a >= f1 || b <= f0 || b >= f1 {
                continue;
            }
            if a > *xs.last().unwrap() && b > *ys.last().unwrap() {
                xs.push(a);
                ys.push(b);
            }
        }
        xs.push(f1);
        ys.push(f1);
        let w = Warp { xs, ys };
        let val = w.max_shift().max(warped_sup(f, g, &w));
        best = best.min(val);
    }
    Ok(best)
}

/// Sup-norm distance of two cadlag paths on a common span.
pub fn sup_distance(f: &CadlagTrajectory, g: &CadlagTrajectory) -> Result<f64> {
    let (f0, f1) = f.span().ok_or_else(|| Error::InsufficientData("empty path".into()))?;
    let ident = Warp { xs: vec![f0, f1], ys: vec![f0, f1] };
    Ok(warped_sup(f, g, &ident))
}

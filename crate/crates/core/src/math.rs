//! Small-vector arithmetic, velocity-law moments and flow propagators.
//!
//! Every vector lives in a 3-component container. Two-dimensional problems
//! keep the third component at zero and embed their 2×2 matrices in the upper
//! left block, so the same code path serves d = 2 and d = 3.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::quad;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const TRACE_TOL: f64 = 1e-12;

/// Check that a dimension is 2 or 3.
pub fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        invalid(format!("dimension must be 2 or 3, got {dim}"))
    }
}

/// Area of the unit sphere S^{d-1}.
pub fn sphere_area(dim: usize) -> f64 {
    match dim {
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => f64::NAN,
    }
}

/// Draw a standard normal vector with `dim` active components.
pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec3 {
    let mut v = Vec3::zeros();
    for i in 0..dim {
        v[i] = rng.sample(StandardNormal);
    }
    v
}

/// Draw a point uniformly on the unit sphere S^{d-1}.
pub fn uniform_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec3 {
    if dim == 2 {
        let th = rng.random::<f64>() * 2.0 * PI;
        Vec3::new(th.cos(), th.sin(), 0.0)
    } else {
        let z = 2.0 * rng.random::<f64>() - 1.0;
        let phi = rng.random::<f64>() * 2.0 * PI;
        let rho = (1.0 - z * z).max(0.0).sqrt();
        Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
    }
}

/// Traceless strain-rate matrix of the background flow `V = A Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrainRate {
    dim: usize,
    a: Mat3,
    nilpotent: bool,
}

impl StrainRate {
    /// Build from a row-major `dim × dim` slice.
    pub fn new(dim: usize, entries: &[f64]) -> Result<Self> {
        check_dim(dim)?;
        if entries.len() != dim * dim {
            return invalid(format!("expected {} entries, got {}", dim * dim, entries.len()));
        }
        let mut a = Mat3::zeros();
        for i in 0..dim {
            for j in 0..dim {
                a[(i, j)] = entries[i * dim + j];
            }
        }
        Self::from_matrix(dim, a)
    }

    pub fn from_matrix(dim: usize, a: Mat3) -> Result<Self> {
        check_dim(dim)?;
        if a.iter().any(|x| !x.is_finite()) {
            return invalid("strain rate has non-finite entries");
        }
        for i in 0..3 {
            for j in 0..3 {
                if (i >= dim || j >= dim) && a[(i, j)] != 0.0 {
                    return invalid("entries outside the active block must vanish");
                }
            }
        }
        let tr = a.trace();
        if tr.abs() > TRACE_TOL {
            return invalid(format!("strain rate must be traceless, trace = {tr:e}"));
        }
        let nilpotent = (a * a).iter().all(|&x| x == 0.0);
        Ok(Self { dim, a, nilpotent })
    }

    /// Planar shear: `A e_2 = s e_1`, all other entries zero.
    pub fn shear(dim: usize, s: f64) -> Result<Self> {
        let mut a = Mat3::zeros();
        a[(0, 1)] = s;
        Self::from_matrix(dim, a)
    }

    pub fn zero(dim: usize) -> Result<Self> {
        Self::from_matrix(dim, Mat3::zeros())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.a
    }

    /// True when `A² = 0` exactly (shear and its rotations).
    pub fn is_nilpotent(&self) -> bool {
        self.nilpotent
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().all(|&x| x == 0.0)
    }

    pub fn apply(&self, q: &Vec3) -> Vec3 {
        self.a * q
    }

    /// Spectral norm ‖A‖₂.
    pub fn norm(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        self.a.singular_values().max()
    }

    /// Largest eigenvalue of the symmetric part of A.
    pub fn sym_max_eigenvalue(&self) -> f64 {
        let s = 0.5 * (self.a + self.a.transpose());
        if self.dim == 2 {
            let (p, q, r) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
            let mid = 0.5 * (p + r);
            mid + (0.25 * (p - r) * (p - r) + q * q).sqrt()
        } else {
            s.symmetric_eigenvalues().max()
        }
    }
}

/// Kind of velocity distribution for the bath atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[non_exhaustive]
pub enum LawKind {
    Gaussian,
}

/// Rotationally invariant velocity law `f` of the bath atoms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityLaw {
    pub kind: LawKind,
    pub beta: f64,
    pub dim: usize,
}

impl VelocityLaw {
    pub fn gaussian(beta: f64, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if !(beta > 0.0 && beta.is_finite()) {
            return invalid(format!("beta must be positive, got {beta}"));
        }
        Ok(Self { kind: LawKind::Gaussian, beta, dim })
    }

    /// One-dimensional marginal density f¹(u).
    pub fn marginal(&self, u: f64) -> f64 {
        match self.kind {
            LawKind::Gaussian => (self.beta / (2.0 * PI)).sqrt() * (-0.5 * self.beta * u * u).exp(),
        }
    }

    /// Full density f(v) on R^d.
    pub fn density(&self, v: &Vec3) -> f64 {
        match self.kind {
            LawKind::Gaussian => {
                let z = (2.0 * PI / self.beta).powf(self.dim as f64 / 2.0);
                (-0.5 * self.beta * v.norm_squared()).exp() / z
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        match self.kind {
            LawKind::Gaussian => normal_vec(rng, self.dim) / self.beta.sqrt(),
        }
    }

    /// Quantile of the speed |v| for v ~ f.
    pub fn speed_quantile(&self, p: f64) -> f64 {
        match self.kind {
            LawKind::Gaussian => {
                let chi2 = ChiSquared::new(self.dim as f64).expect("valid dof");
                (chi2.inverse_cdf(p) / self.beta).sqrt()
            }
        }
    }

    /// P(|v| ≥ x) for v ~ f.
    pub fn speed_tail(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        match self.kind {
            LawKind::Gaussian => {
                let y = x * self.beta.sqrt();
                if self.dim == 2 {
                    (-0.5 * y * y).exp()
                } else {
                    statrs::function::erf::erfc(y / 2f64.sqrt())
                        + (2.0 / PI).sqrt() * y * (-0.5 * y * y).exp()
                }
            }
        }
    }
}

/// Velocity moments Φ₁..Φ₄ and the sphere area S_{d-1}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub phi: [f64; 4],
    pub sphere_area: f64,
}

/// Φ_i = ½∫|v₁|ⁱ f(v) dv.
pub fn moment_phi(law: &VelocityLaw, i: usize) -> Result<f64> {
    if !(1..=4).contains(&i) {
        return invalid(format!("moment index must be in 1..=4, got {i}"));
    }
    match law.kind {
        LawKind::Gaussian => {
            let k = i as f64;
            Ok((2.0 / law.beta).powf(k / 2.0) * gamma((k + 1.0) / 2.0) / (2.0 * PI.sqrt()))
        }
        #[allow(unreachable_patterns)]
        _ => Err(Error::UnsupportedLaw(format!("{:?}", law.kind))),
    }
}

/// Φ_i by adaptive quadrature of the one-dimensional marginal.
pub fn moment_phi_quadrature(law: &VelocityLaw, i: usize) -> Result<f64> {
    if !(1..=4).contains(&i) {
        return invalid(format!("moment index must be in 1..=4, got {i}"));
    }
    let f = |u: f64| u.powi(i as i32) * law.marginal(u);
    quad::integrate_to_inf(f, 0.0, 1e-14, 1e-12)
}

pub fn moments(law: &VelocityLaw) -> Result<Moments> {
    let mut phi = [0.0; 4];
    for (i, p) in phi.iter_mut().enumerate() {
        *p = moment_phi(law, i + 1)?;
    }
    Ok(Moments { phi, sphere_area: sphere_area(law.dim) })
}

/// E = e^{At} and J = ∫₀ᵗ e^{As} ds.
///
/// An atom with initial data (q₀, v₀) under `q' = v, v' = A v` sits at
/// `q₀ + J v₀` with velocity `E v₀` after time t.
pub fn flow_propagator(a: &StrainRate, t: f64) -> (Mat3, Mat3) {
    let id = Mat3::identity();
    if a.is_nilpotent() {
        let m = a.matrix();
        return (id + m * t, id * t + m * (0.5 * t * t));
    }
    let at = a.matrix() * t;
    let nrm = at.norm();
    let mut k = 0u32;
    if nrm > 0.25 {
        k = (nrm / 0.25).log2().ceil() as u32;
    }
    let h = t / 2f64.powi(k as i32);
    let ah = a.matrix() * h;
    // Taylor series for E(h) and J(h)/h = Σ (Ah)^n/(n+1)!
    let mut e = id;
    let mut jh = id;
    let mut term = id;
    for n in 1..40 {
        term = term * ah / n as f64;
        e += term;
        let jterm = term / (n + 1) as f64;
        jh += jterm;
        if term.norm() < 1e-18 {
            break;
        }
    }
    let mut j = jh * h;
    for _ in 0..k {
        j += e * j;
        e = e * e;
    }
    (e, j)
}

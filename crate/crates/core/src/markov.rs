//! Poisson jump approximation of the heat bath.
//!
//! Only fast collisions are kept: the velocity jumps by `V̂ e` at the points
//! of a Poisson process and the particle flies freely in between. With
//! `x = (M+m)/(2m)·V̂ + u(e)` and `u(e) = (V - AQ)·e + R e·Ae` the jump density
//! reads `λ_m R^{d-1} (x - u) f¹_m(x) dx dΩ` on `x ≥ c_m`; its total mass does
//! not depend on the state as long as `u(e) ≤ c_m` for every direction.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Exp, StandardNormal};
use statrs::function::erf::erfc;

use crate::analysis::CadlagTrajectory;
use crate::error::{invalid, Error, Result};
use crate::heatbath::{exit_time, fast_threshold};
use crate::math::{sphere_area, uniform_direction, StrainRate, Vec3, VelocityLaw};
use crate::quad;

/// Jump law of the Markov approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpLaw {
    pub lambda: f64,
    pub m: f64,
    pub law: VelocityLaw,
    pub a: StrainRate,
    pub mass: f64,
    pub radius: f64,
    pub dim: usize,
    pub c_m: f64,
    /// λR^{d-1}((M+m)/2)²
    pub big_c_m: f64,
    a_norm: f64,
}

/// One velocity jump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub t: f64,
    pub e_n: Vec3,
    pub v_hat: f64,
}

impl JumpLaw {
    pub fn new(lambda: f64, m: f64, law: VelocityLaw, a: StrainRate, mass: f64, radius: f64) -> Result<Self> {
        if !(lambda >= 0.0 && m > 0.0 && mass > 0.0 && radius > 0.0) {
            return invalid("need lambda >= 0 and positive m, M, R");
        }
        if a.dim() != law.dim {
            return invalid("strain rate and velocity law disagree on dimension");
        }
        let dim = law.dim;
        let c_m = fast_threshold(m);
        let a_norm = a.norm();
        // Inside ‖A‖|Q| + |V| ≤ c_m/8 this keeps u(e) ≤ c_m for all e.
        if radius * a_norm > 7.0 * c_m / 8.0 {
            return invalid(format!(
                "R‖A‖ = {} exceeds 7c_m/8 = {}; the jump intensity would not be constant",
                radius * a_norm,
                7.0 * c_m / 8.0
            ));
        }
        let big_c_m = lambda * radius.powi(dim as i32 - 1) * ((mass + m) / 2.0).powi(2);
        Ok(Self { lambda, m, law, a, mass, radius, dim, c_m, big_c_m, a_norm })
    }

    pub fn lambda_m(&self) -> f64 {
        self.lambda / self.m.sqrt()
    }

    /// `‖A‖|Q| + |V|`, compared against `c_m/8`.
    pub fn region_level(&self, q: &Vec3, v: &Vec3) -> f64 {
        self.a_norm * q.norm() + v.norm()
    }

    pub fn in_region(&self, q: &Vec3, v: &Vec3) -> bool {
        self.region_level(q, v) <= self.c_m / 8.0
    }

    fn check_region(&self, q: &Vec3, v: &Vec3) -> Result<()> {
        let level = self.region_level(q, v);
        if level > self.c_m / 8.0 {
            return Err(Error::OutsideRegion { level, limit: self.c_m / 8.0 });
        }
        Ok(())
    }

    /// `V_n - (Aq)_n` at the contact point `q = Q - R e`.
    pub fn shift(&self, e: &Vec3, q: &Vec3, v: &Vec3) -> f64 {
        let contact = q - e * self.radius;
        v.dot(e) - self.a.apply(&contact).dot(e)
    }

    /// Scaled marginal f¹_m(x) = m^{1/2} f¹(m^{1/2} x).
    fn marginal_m(&self, x: f64) -> f64 {
        let sm = self.m.sqrt();
        sm * self.law.marginal(sm * x)
    }

    fn ratio(&self) -> f64 {
        (self.mass + self.m) / (2.0 * self.m)
    }
}

fn check_unit(e: &Vec3) -> Result<()> {
    if (e.norm() - 1.0).abs() > 1e-12 {
        return invalid(format!("direction is not a unit vector (|e| = {})", e.norm()));
    }
    Ok(())
}

/// Smallest jump size in direction e: `(2m/(M+m))·max(c_m - V_n + (Aq)_n, 0)`.
pub fn min_jump(law: &JumpLaw, e: &Vec3, q: &Vec3, v: &Vec3) -> f64 {
    (law.c_m - law.shift(e, q, v)).max(0.0) / law.ratio()
}

/// Jump rate density r̂_m(V̂, e) per unit V̂ and unit solid angle.
pub fn jump_rate_density(law: &JumpLaw, v_hat: f64, e: &Vec3, q: &Vec3, v: &Vec3) -> Result<f64> {
    check_unit(e)?;
    let k = law.ratio();
    let x = k * v_hat + law.shift(e, q, v);
    if x < law.c_m || v_hat <= 0.0 {
        return Ok(0.0);
    }
    Ok(law.lambda_m() * law.radius.powi(law.dim as i32 - 1) * k * k * v_hat * law.marginal_m(x))
}

/// Total jump intensity Λ_m, constant inside the region `‖A‖|Q|+|V| ≤ c_m/8`.
pub fn jump_intensity(law: &JumpLaw, q: &Vec3, v: &Vec3) -> Result<f64> {
    law.check_region(q, v)?;
    let beta = law.law.beta;
    let c = law.c_m;
    Ok(law.lambda * law.radius.powi(law.dim as i32 - 1) * sphere_area(law.dim) / law.m
        * (-0.5 * beta * law.m * c * c).exp()
        / (2.0 * PI * beta).sqrt())
}

/// Λ_m by direct quadrature of r̂_m over V̂ and the sphere. Valid anywhere.
pub fn jump_intensity_quadrature(law: &JumpLaw, q: &Vec3, v: &Vec3) -> Result<f64> {
    let radial = |e: Vec3| -> f64 {
        let lo = min_jump(law, &e, q, v);
        let scale = 1.0 / (law.ratio() * law.m.sqrt());
        quad::integrate_to_inf(
            |s| jump_rate_density(law, lo + s * scale, &e, q, v).unwrap_or(0.0) * scale,
            0.0,
            1e-300,
            1e-12,
        )
        .unwrap_or(f64::NAN)
    };
    let tol = 1e-11;
    if law.dim == 2 {
        quad::integrate(|th| radial(Vec3::new(th.cos(), th.sin(), 0.0)), 0.0, 2.0 * PI, 1e-300, tol)
    } else {
        quad::integrate(
            |th| {
                let (s, c) = th.sin_cos();
                s * quad::integrate(|ph| radial(Vec3::new(s * ph.cos(), s * ph.sin(), c)), 0.0, 2.0 * PI, 1e-300, tol)
                    .unwrap_or(f64::NAN)
            },
            0.0,
            PI,
            1e-300,
            tol,
        )
    }
}

fn upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / 2f64.sqrt())
}

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal conditioned on z ≥ a.
fn normal_tail<R: Rng + ?Sized>(rng: &mut R, a: f64) -> f64 {
    if a < 0.5 {
        loop {
            let z: f64 = rng.sample::<f64, _>(StandardNormal).abs();
            if z >= a {
                return z;
            }
        }
    }
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(alpha).expect("positive rate");
    loop {
        let z = a + rng.sample(exp);
        let acc = (-0.5 * (z - alpha) * (z - alpha)).exp();
        if rng.random::<f64>() <= acc {
            return z;
        }
    }
}

/// Draw the marks (e, V̂) of a jump from the state (Q, V).
///
/// e is proposed uniformly and `z = √(βm)x` from the mixture
/// `∝ (z + k)φ(z)` on `z ≥ √(βm)c_m`, where `k/√(βm)` bounds `-u(e)` from
/// above; the pair is accepted with probability `(x - u(e))/(x - u_lo)`.
pub fn sample_jump<R: Rng + ?Sized>(law: &JumpLaw, t: f64, q: &Vec3, v: &Vec3, rng: &mut R) -> Result<JumpEvent> {
    law.check_region(q, v)?;
    let sb = (law.law.beta * law.m).sqrt();
    let zc = sb * law.c_m;
    let rel = v - law.a.apply(q);
    let u_lo = -(rel.norm() + law.radius * law.a_norm);
    let k = -u_lo * sb;
    let w_ray = phi(zc);
    let w_tail = k * upper_tail(zc);
    let p_ray = w_ray / (w_ray + w_tail);
    loop {
        let z = if rng.random::<f64>() < p_ray {
            let u: f64 = rng.random();
            (zc * zc - 2.0 * (1.0 - u).ln()).sqrt()
        } else {
            normal_tail(rng, zc)
        };
        let x = z / sb;
        let e = uniform_direction(rng, law.dim);
        let u = law.shift(&e, q, v);
        let acc = (x - u) / (x - u_lo);
        if rng.random::<f64>() <= acc {
            return Ok(JumpEvent { t, e_n: e, v_hat: (x - u) / law.ratio() });
        }
    }
}

/// Output of [`run_markov`].
#[derive(Debug, Clone)]
pub struct MarkovRun {
    /// Samples of (Q, V) at 0, every jump and T; the stopped state is held
    /// after an exit from the region.
    pub trajectory: CadlagTrajectory,
    pub jumps: Vec<JumpEvent>,
    pub q: Vec3,
    pub v: Vec3,
    pub t: f64,
    /// Time at which the state left the constant-intensity region.
    pub stopped_at: Option<f64>,
}

fn state_vec(q: &Vec3, v: &Vec3, dim: usize) -> Vec<f64> {
    q.iter().take(dim).chain(v.iter().take(dim)).copied().collect()
}

/// Free flight between Poisson jumps on [0, T], stopped on exit from the
/// constant-intensity region.
pub fn run_markov<R: Rng + ?Sized>(law: &JumpLaw, q0: Vec3, v0: Vec3, t_end: f64, rng: &mut R) -> Result<MarkovRun> {
    law.check_region(&q0, &v0)?;
    let rate = jump_intensity(law, &q0, &v0)?;
    let dim = law.dim;
    let limit = law.c_m / 8.0;
    let (mut q, mut v, mut t) = (q0, v0, 0.0);
    let mut traj = CadlagTrajectory::new();
    traj.push(0.0, state_vec(&q, &v, dim), false)?;
    let mut jumps = Vec::new();
    let mut stopped_at = None;
    let exp = if rate > 0.0 { Some(Exp::new(rate).map_err(|e| Error::InvalidParameter(e.to_string()))?) } else { None };
    loop {
        let wait = exp.map_or(f64::INFINITY, |d| rng.sample(d));
        let t_exit = exit_time(law.a_norm, &q, &v, limit).map(|s| t + s);
        let t_next = t + wait;
        let bound = t_exit.map_or(t_end, |x| x.min(t_end));
        if t_next >= bound {
            q += v * (bound - t);
            t = bound;
            if t_exit.is_some_and(|x| x <= t_end) {
                stopped_at = Some(t);
            }
            break;
        }
        q += v * wait;
        t = t_next;
        let ev = sample_jump(law, t, &q, &v, rng)?;
        v += ev.e_n * ev.v_hat;
        jumps.push(ev);
        traj.push(t, state_vec(&q, &v, dim), true)?;
        if !law.in_region(&q, &v) {
            stopped_at = Some(t);
            break;
        }
    }
    traj.push(t, state_vec(&q, &v, dim), false)?;
    if t < t_end {
        traj.push(t_end, state_vec(&q, &v, dim), false)?;
    }
    Ok(MarkovRun { trajectory: traj, jumps, q, v, t, stopped_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn law2(m: f64, s: f64) -> JumpLaw {
        let vl = VelocityLaw::gaussian(1.0, 2).unwrap();
        JumpLaw::new(1.0 / 16.0, m, vl, StrainRate::shear(2, s).unwrap(), 6.0, 2.0).unwrap()
    }

    #[test]
    fn cutoff_and_minimum() {
        let l = law2(1e-3, 0.0);
        let e = Vec3::new(1.0, 0.0, 0.0);
        let z = Vec3::zeros();
        let vm = min_jump(&l, &e, &z, &z);
        assert!((vm - 2.0 * l.m * l.c_m / (l.mass + l.m)).abs() < 1e-15);
        assert_eq!(jump_rate_density(&l, 0.999 * vm, &e, &z, &z).unwrap(), 0.0);
        assert!(jump_rate_density(&l, 1.001 * vm, &e, &z, &z).unwrap() > 0.0);
        assert!(jump_rate_density(&l, vm, &(e * 2.0), &z, &z).is_err());
    }

    #[test]
    fn gaussian_density_value() {
        let l = law2(1e-2, 0.0);
        let e = Vec3::new(0.0, 1.0, 0.0);
        let z = Vec3::zeros();
        let x0 = 1.7 * l.c_m;
        let vh = 2.0 * l.m * x0 / (l.mass + l.m);
        let k = (l.mass + l.m) / (2.0 * l.m);
        let expect = l.lambda_m() * l.radius * k * k * vh * l.m.sqrt() * (1.0 / (2.0 * PI)).sqrt()
            * (-0.5 * l.m * x0 * x0).exp();
        let got = jump_rate_density(&l, vh, &e, &z, &z).unwrap();
        assert!((got - expect).abs() / expect < 1e-13);
    }

    #[test]
    fn intensity_constant_and_linear() {
        let l = law2(1e-3, 0.1);
        let a = jump_intensity(&l, &Vec3::zeros(), &Vec3::zeros()).unwrap();
        let b = jump_intensity(&l, &Vec3::new(0.5, -1.0, 0.0), &Vec3::new(0.2, 0.1, 0.0)).unwrap();
        assert!((a - b).abs() / a < 1e-10);
        let mut l2 = l;
        l2.lambda *= 2.0;
        assert!((jump_intensity(&l2, &Vec3::zeros(), &Vec3::zeros()).unwrap() / a - 2.0).abs() < 1e-14);
        assert!(jump_intensity(&l, &Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn intensity_matches_quadrature() {
        let l = law2(1e-3, 0.1);
        let q = Vec3::new(0.5, -1.0, 0.0);
        let v = Vec3::new(0.2, 0.1, 0.0);
        let a = jump_intensity(&l, &q, &v).unwrap();
        let b = jump_intensity_quadrature(&l, &q, &v).unwrap();
        assert!((a - b).abs() / a < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn marks_respect_support() {
        let l = law2(1e-3, 0.1);
        let q = Vec3::new(0.3, 0.2, 0.0);
        let v = Vec3::new(0.1, -0.2, 0.0);
        let mut g = rng::stream(5, "marks", 0);
        for _ in 0..10000 {
            let ev = sample_jump(&l, 0.0, &q, &v, &mut g).unwrap();
            assert!(ev.v_hat >= min_jump(&l, &ev.e_n, &q, &v));
            assert!((ev.e_n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn x_marginal_chi_square() {
        // Marginal of x is ∝ x f¹_m(x) on x ≥ c_m: in z = √(βm)x the CDF is
        // 1 - exp(-(z² - z_c²)/2).
        let l = law2(1e-2, 0.1);
        let q = Vec3::new(0.3, 0.2, 0.0);
        let v = Vec3::new(0.1, -0.2, 0.0);
        let mut g = rng::stream(6, "marks", 0);
        let zc = l.m.sqrt() * l.c_m;
        let bins = 20;
        let mut counts = vec![0usize; bins];
        let n = 100_000;
        for _ in 0..n {
            let ev = sample_jump(&l, 0.0, &q, &v, &mut g).unwrap();
            let x = l.ratio() * ev.v_hat + l.shift(&ev.e_n, &q, &v);
            let z = l.m.sqrt() * x;
            let cdf = 1.0 - (-(z * z - zc * zc) / 2.0).exp();
            counts[((cdf * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let expect = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn isotropic_at_rest() {
        let l = law2(1e-3, 0.0);
        let mut g = rng::stream(7, "marks", 0);
        let n = 20000;
        let mut s = Vec3::zeros();
        for _ in 0..n {
            s += sample_jump(&l, 0.0, &Vec3::zeros(), &Vec3::zeros(), &mut g).unwrap().e_n;
        }
        let rbar = s.norm() / n as f64;
        // Rayleigh test
        let p = (-(n as f64) * rbar * rbar).exp();
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn no_bath_is_free_flight() {
        let vl = VelocityLaw::gaussian(1.0, 2).unwrap();
        let l = JumpLaw::new(0.0, 1e-3, vl, StrainRate::shear(2, 0.1).unwrap(), 1.0, 1.0).unwrap();
        let run = run_markov(&l, Vec3::zeros(), Vec3::new(0.1, 0.0, 0.0), 1.0, &mut rng::stream(1, "m", 0)).unwrap();
        assert!(run.jumps.is_empty());
        assert!((run.q[0] - 0.1).abs() < 1e-15);
    }
}

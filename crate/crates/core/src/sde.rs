//! Limiting stochastic dynamics of the heavy particle.
//!
//! `M dV = -γ(V - AQ) dt + σ dW` (friction relative to the background flow),
//! its variant with the extra `M A V dt` term that makes the relative velocity
//! `W = V - AQ` a pure Ornstein-Uhlenbeck process, and the anisotropic laminar
//! limits. Steppers take the Gaussian increment as an argument so they stay
//! deterministic functions of their inputs.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::math::{flow_propagator, moment_phi, sphere_area, Mat3, StrainRate, Vec3, VelocityLaw};

/// Coefficients of the limiting Langevin equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeldCoefficients {
    pub gamma: f64,
    pub sigma: f64,
    pub mass: f64,
    pub radius: f64,
    pub a: StrainRate,
    pub dim: usize,
}

impl NeldCoefficients {
    /// Coefficients given directly, e.g. `σ = √(2γ/β)`.
    pub fn new(gamma: f64, sigma: f64, mass: f64, radius: f64, a: StrainRate) -> Result<Self> {
        if !(gamma >= 0.0 && sigma >= 0.0 && mass > 0.0 && radius > 0.0) {
            return invalid(format!(
                "need gamma >= 0, sigma >= 0, M > 0, R > 0 (got {gamma}, {sigma}, {mass}, {radius})"
            ));
        }
        Ok(Self { gamma, sigma, mass, radius, dim: a.dim(), a })
    }
}

/// Friction and noise produced by a bath of density λ with velocity law `law`.
pub fn coefficients_from_bath(
    lambda: f64,
    law: &VelocityLaw,
    radius: f64,
    mass: f64,
    a: StrainRate,
) -> Result<NeldCoefficients> {
    if !(lambda > 0.0 && radius > 0.0 && mass > 0.0) {
        return invalid("lambda, R and M must be positive");
    }
    if a.dim() != law.dim {
        return invalid("strain rate and velocity law disagree on dimension");
    }
    let d = law.dim as f64;
    let pre = 4.0 * lambda * radius.powi(law.dim as i32 - 1) * sphere_area(law.dim) / d;
    let gamma = pre * moment_phi(law, 1)?;
    let sigma = (pre * moment_phi(law, 3)?).sqrt();
    NeldCoefficients::new(gamma, sigma, mass, radius, a)
}

/// Relative defect of the fluctuation-dissipation relation γ = ½σ²β.
pub fn fdr_check(c: &NeldCoefficients, beta: f64) -> f64 {
    (c.gamma - 0.5 * c.sigma * c.sigma * beta).abs() / c.gamma
}

/// Standard deviation of the exact OU increment over `dt` for friction γ and
/// noise σ at mass M. Falls back to Brownian scaling when γ = 0.
pub fn ou_noise_scale(gamma: f64, sigma: f64, mass: f64, dt: f64) -> f64 {
    if gamma == 0.0 {
        return sigma * dt.sqrt() / mass;
    }
    let one_minus_a2 = -(-2.0 * gamma * dt / mass).exp_m1();
    (sigma * sigma * one_minus_a2 / (2.0 * gamma * mass)).sqrt()
}

/// Exact update of `M dV = -γ(V - AQ)dt + σ dW` at frozen Q, with σ² = 2γ/β.
pub fn ou_background_step(
    v: &Vec3,
    aq: &Vec3,
    gamma: f64,
    mass: f64,
    beta: f64,
    dt: f64,
    noise: &Vec3,
) -> Vec3 {
    let alpha = (-gamma * dt / mass).exp();
    let c = ((1.0 - alpha * alpha) / (beta * mass)).sqrt();
    v * alpha + aq * (1.0 - alpha) + noise * c
}

/// Position and velocity of the heavy particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeState {
    pub q: Vec3,
    pub v: Vec3,
    pub t: f64,
}

impl SdeState {
    pub fn new(q: Vec3, v: Vec3) -> Self {
        Self { q, v, t: 0.0 }
    }
}

/// Strang splitting: half drift, exact OU relative to `AQ`, half drift.
pub fn step_neld(state: &SdeState, c: &NeldCoefficients, dt: f64, noise: &Vec3) -> SdeState {
    let h = 0.5 * dt;
    let q = state.q + state.v * h;
    let aq = c.a.apply(&q);
    let alpha = (-c.gamma * dt / c.mass).exp();
    let cn = ou_noise_scale(c.gamma, c.sigma, c.mass, dt);
    let v = state.v * alpha + aq * (1.0 - alpha) + noise * cn;
    let q = q + v * h;
    SdeState { q, v, t: state.t + dt }
}

/// Plain Langevin splitting step without background flow. Reference for the
/// A = 0 reduction of [`step_neld`].
pub fn step_langevin(state: &SdeState, gamma: f64, sigma: f64, mass: f64, dt: f64, noise: &Vec3) -> SdeState {
    let h = 0.5 * dt;
    let q = state.q + state.v * h;
    let alpha = (-gamma * dt / mass).exp();
    let cn = ou_noise_scale(gamma, sigma, mass, dt);
    let v = state.v * alpha + noise * cn;
    let q = q + v * h;
    SdeState { q, v, t: state.t + dt }
}

/// Euler–Maruyama step of the nonequilibrium Langevin equation.
pub fn step_neld_em(state: &SdeState, c: &NeldCoefficients, dt: f64, noise: &Vec3) -> SdeState {
    let drift = (c.a.apply(&state.q) - state.v) * (c.gamma / c.mass);
    let v = state.v + drift * dt + noise * (c.sigma * dt.sqrt() / c.mass);
    let q = state.q + state.v * dt;
    SdeState { q, v, t: state.t + dt }
}

/// Step of `dQ = V dt, M dV = M A V dt - γ(V - AQ)dt + σ dW`.
///
/// The relative velocity `W = V - AQ` obeys `M dW = -γ W dt + σ dW_t`, which
/// is integrated exactly; the position follows the flow `Q' = AQ + W` over two
/// half steps around it.
pub fn step_neld_a(state: &SdeState, c: &NeldCoefficients, dt: f64, noise: &Vec3) -> SdeState {
    let h = 0.5 * dt;
    let (e, j) = flow_propagator(&c.a, h);
    let w = state.v - c.a.apply(&state.q);
    let q = e * state.q + j * w;
    let alpha = (-c.gamma * dt / c.mass).exp();
    let cn = ou_noise_scale(c.gamma, c.sigma, c.mass, dt);
    let w = w * alpha + noise * cn;
    let q = e * q + j * w;
    let v = w + c.a.apply(&q);
    SdeState { q, v, t: state.t + dt }
}

/// Position and relative velocity `(Q, V - AQ)`.
pub fn to_relative(state: &SdeState, a: &StrainRate) -> (Vec3, Vec3) {
    (state.q, state.v - a.apply(&state.q))
}

pub fn from_relative(q: Vec3, w: Vec3, t: f64, a: &StrainRate) -> SdeState {
    SdeState { q, v: w + a.apply(&q), t }
}

/// Map to the relative frame and back. Exact up to rounding of `V - AQ + AQ`.
pub fn gsllod_roundtrip(state: &SdeState, a: &StrainRate) -> SdeState {
    let (q, w) = to_relative(state, a);
    from_relative(q, w, state.t, a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaminarVariant {
    Single,
    Triple,
}

impl FromStr for LaminarVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "triple" => Ok(Self::Triple),
            other => invalid(format!("unknown laminar variant '{other}'")),
        }
    }
}

impl fmt::Display for LaminarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Triple => "triple",
        })
    }
}

/// Diagonal friction and noise of a laminar-bath limit (d = 3). The drift is
/// `-γ(V - flow_factor·AQ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaminarCoefficients {
    pub gamma_matrix: Mat3,
    pub sigma_matrix: Mat3,
    pub flow_factor: f64,
}

impl LaminarCoefficients {
    /// `(β/2) γ⁻¹ σσᵀ`, equal to the identity when a plain FDR holds.
    pub fn anisotropy(&self, beta: f64) -> Mat3 {
        let mut out = Mat3::zeros();
        for i in 0..3 {
            out[(i, i)] = 0.5 * beta * self.sigma_matrix[(i, i)].powi(2) / self.gamma_matrix[(i, i)];
        }
        out
    }
}

pub fn laminar_limit_coefficients(
    variant: LaminarVariant,
    lambda: f64,
    radius: f64,
    beta: f64,
) -> Result<LaminarCoefficients> {
    if !(lambda > 0.0 && radius > 0.0 && beta > 0.0) {
        return invalid("lambda, R and beta must be positive");
    }
    let k = (2.0 * PI).sqrt() * lambda * radius * radius;
    let (g, s2, flow_factor) = match variant {
        LaminarVariant::Single => {
            let g0 = 2.0 * k / beta.sqrt();
            let s0 = 4.0 * k / beta.powf(1.5);
            ([g0, 0.5 * g0, 0.5 * g0], [s0 * 2.0 / 3.0, s0 / 6.0, s0 / 6.0], 1.0)
        }
        LaminarVariant::Triple => {
            let g0 = 4.0 * k / (3.0 * beta.sqrt());
            ([g0; 3], [g0 / beta; 3], 0.5)
        }
    };
    Ok(LaminarCoefficients {
        gamma_matrix: Mat3::from_diagonal(&Vec3::from(g)),
        sigma_matrix: Mat3::from_diagonal(&Vec3::new(s2[0].sqrt(), s2[1].sqrt(), s2[2].sqrt())),
        flow_factor,
    })
}

/// Exact OU step of the laminar limit with diagonal friction.
pub fn step_laminar(
    state: &SdeState,
    lc: &LaminarCoefficients,
    a: &StrainRate,
    mass: f64,
    dt: f64,
    noise: &Vec3,
) -> SdeState {
    let h = 0.5 * dt;
    let q = state.q + state.v * h;
    let target = a.apply(&q) * lc.flow_factor;
    let mut v = state.v;
    for i in 0..3 {
        let g = lc.gamma_matrix[(i, i)];
        let alpha = (-g * dt / mass).exp();
        let cn = ou_noise_scale(g, lc.sigma_matrix[(i, i)], mass, dt);
        v[i] = alpha * state.v[i] + (1.0 - alpha) * target[i] + cn * noise[i];
    }
    let q = q + v * h;
    SdeState { q, v, t: state.t + dt }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::normal_vec;
    use crate::rng;

    fn bath3() -> NeldCoefficients {
        let law = VelocityLaw::gaussian(1.0, 3).unwrap();
        coefficients_from_bath(1.0 / 16.0, &law, 2.0, 1.0, StrainRate::zero(3).unwrap()).unwrap()
    }

    #[test]
    fn bath_coefficients_3d() {
        let c = bath3();
        // γ = 2√2 λ R² S₂ / (3√(πβ)), σ² = 2γ/β
        let lam: f64 = 1.0 / 16.0;
        let g = 2.0 * 2f64.sqrt() * lam * 4.0 * 4.0 * PI / (3.0 * PI.sqrt());
        assert!((c.gamma - g).abs() / g < 1e-12);
        assert!((c.gamma - 1.67109).abs() < 1e-5);
        assert!((c.sigma - 1.82817).abs() < 1e-5);
        assert!(fdr_check(&c, 1.0) < 1e-10);
    }

    #[test]
    fn coefficients_linear_in_lambda() {
        let law = VelocityLaw::gaussian(1.0, 2).unwrap();
        let z = StrainRate::zero(2).unwrap();
        let c1 = coefficients_from_bath(0.1, &law, 2.0, 1.0, z).unwrap();
        let c2 = coefficients_from_bath(0.2, &law, 2.0, 1.0, z).unwrap();
        assert!((c2.gamma / c1.gamma - 2.0).abs() < 1e-14);
        assert!((c2.sigma.powi(2) / c1.sigma.powi(2) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn fdr_arithmetic() {
        let z = StrainRate::zero(3).unwrap();
        let c = NeldCoefficients::new(1.0, 2f64.sqrt(), 1.0, 1.0, z).unwrap();
        assert!(fdr_check(&c, 1.0) < 1e-15);
        let c = NeldCoefficients::new(1.0, 1.0, 1.0, 1.0, z).unwrap();
        assert!((fdr_check(&c, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ou_limits() {
        let v = Vec3::new(2.0, 0.0, 0.0);
        let z = Vec3::zeros();
        let out = ou_background_step(&v, &z, 1.0, 1.0, 1.0, 2f64.ln(), &z);
        assert!((out[0] - 1.0).abs() < 1e-15);
        let out = ou_background_step(&v, &z, 1.0, 1.0, 1.0, 1e-300, &Vec3::new(1.0, 1.0, 1.0));
        assert!((out - v).norm() < 1e-100);
    }

    #[test]
    fn ou_stationary_law() {
        let mut r = rng::stream(1, "ou", 0);
        let aq = Vec3::new(0.3, -0.2, 0.1);
        let beta = 2.0;
        let n = 20000;
        let mut sum = Vec3::zeros();
        let mut sq = Vec3::zeros();
        for _ in 0..n {
            let x = ou_background_step(&Vec3::new(5.0, 5.0, 5.0), &aq, 20.0, 1.0, beta, 1.0, &normal_vec(&mut r, 3));
            sum += x;
            sq += x.component_mul(&x);
        }
        let var_target = 1.0 / beta;
        for i in 0..3 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let se = (var_target / n as f64).sqrt();
            assert!((mean - aq[i]).abs() < 4.0 * se);
            assert!((var - var_target).abs() < 4.0 * var_target * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn zero_flow_reduces_to_langevin() {
        let c = bath3();
        let mut r = rng::stream(2, "noise", 0);
        let mut s1 = SdeState::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.5, 0.4, 1.0));
        let mut s2 = s1;
        let mut s3 = s1;
        for _ in 0..1000 {
            let xi = normal_vec(&mut r, 3);
            s1 = step_neld(&s1, &c, 1e-2, &xi);
            s2 = step_langevin(&s2, c.gamma, c.sigma, c.mass, 1e-2, &xi);
            s3 = step_neld_a(&s3, &c, 1e-2, &xi);
            assert_eq!(s1, s2);
            assert_eq!(s1, s3);
        }
    }

    #[test]
    fn free_flight() {
        let z = StrainRate::shear(3, 0.5).unwrap();
        let c = NeldCoefficients::new(0.0, 0.0, 1.0, 1.0, z).unwrap();
        let s = SdeState::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.5, -1.0, 0.25));
        let out = step_neld(&s, &c, 0.1, &Vec3::new(3.0, 3.0, 3.0));
        assert!((out.q - (s.q + s.v * 0.1)).norm() < 1e-15);
        assert_eq!(out.v, s.v);
    }

    #[test]
    fn overdamped_relative_velocity() {
        let a = StrainRate::shear(3, 1.0).unwrap();
        let c = NeldCoefficients::new(1e6, 0.0, 1.0, 1.0, a).unwrap();
        let s = SdeState::new(Vec3::new(0.0, 1.0, 0.0), Vec3::new(3.0, 2.0, 1.0));
        let out = step_neld_a(&s, &c, 1e-3, &Vec3::zeros());
        assert!((out.v - a.apply(&out.q)).norm() < 1e-12);
    }

    #[test]
    fn roundtrip_examples() {
        let a = StrainRate::shear(3, 1.0).unwrap();
        let s = SdeState::new(Vec3::new(1.0, 0.0, 0.0), Vec3::zeros());
        assert_eq!(to_relative(&s, &a).1, Vec3::zeros());
        let s = SdeState::new(Vec3::new(0.0, 1.0, 0.0), Vec3::zeros());
        assert_eq!(to_relative(&s, &a).1, Vec3::new(-1.0, 0.0, 0.0));
        assert_eq!(gsllod_roundtrip(&s, &a), s);
    }

    #[test]
    fn laminar_values() {
        let lc = laminar_limit_coefficients(LaminarVariant::Single, 1.0 / 16.0, 2.0, 1.0).unwrap();
        assert!((lc.gamma_matrix[(0, 0)] - 2.0 * (2.0 * PI).sqrt() / 4.0).abs() < 1e-12);
        assert!((lc.gamma_matrix[(0, 0)] - 1.25331).abs() < 1e-5);
        let an = lc.anisotropy(1.0);
        assert!((an - Mat3::from_diagonal(&Vec3::new(2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0))).norm() < 1e-12);
        assert_eq!(lc.flow_factor, 1.0);
        let lt = laminar_limit_coefficients(LaminarVariant::Triple, 0.3, 1.5, 2.5).unwrap();
        assert!((lt.anisotropy(2.5) - Mat3::identity() * 0.5).norm() < 1e-12);
        assert_eq!(lt.flow_factor, 0.5);
        assert!("double".parse::<LaminarVariant>().is_err());
    }
}

//! TOML configuration: one flat table per subcommand, unknown keys rejected.
//!
//! ```toml
//! seed = 7
//!
//! [md]
//! n = 216
//! s = 0.05
//! t_end = 100.0
//! ```
//!
//! Every key is optional and falls back to the defaults below.

use std::path::Path;

use neld::converge::ConvergeConfig;
use neld::md::MdConfig;
use neld::{StrainRate, Vec3, VelocityLaw};
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    #[serde(default)]
    pub coeffs: CoeffsSection,
    #[serde(default)]
    pub sde: SdeSection,
    #[serde(default)]
    pub bath: BathSection,
    #[serde(default)]
    pub markov: MarkovSection,
    #[serde(default)]
    pub md: MdSection,
    #[serde(default)]
    pub converge: ConvergeSection,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().trim().to_string())
    }
}

fn positive(key: &str, x: f64) -> Result<(), Failure> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Failure::config(format!("`{key}` must be positive, got {x}")))
    }
}

fn dimension(key: &str, dim: usize) -> Result<(), Failure> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Failure::config(format!("`{key}` must be 2 or 3, got {dim}")))
    }
}

fn vector(key: &str, xs: &[f64], dim: usize) -> Result<Vec3, Failure> {
    if xs.len() != dim || xs.iter().any(|x| !x.is_finite()) {
        return Err(Failure::config(format!("`{key}` needs {dim} finite entries, got {xs:?}")));
    }
    let mut v = Vec3::zeros();
    v.iter_mut().zip(xs).for_each(|(a, b)| *a = *b);
    Ok(v)
}

/// Parameters shared by the heavy-particle subcommands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleParams {
    pub dim: usize,
    pub lambda: f64,
    pub beta: f64,
    pub radius: f64,
    pub mass: f64,
    /// Shear rate of `A`.
    pub s: f64,
}

impl ParticleParams {
    fn check(&self) -> Result<(), Failure> {
        dimension("dim", self.dim)?;
        positive("lambda", self.lambda)?;
        positive("beta", self.beta)?;
        positive("radius", self.radius)?;
        positive("mass", self.mass)?;
        if !self.s.is_finite() {
            return Err(Failure::config("`s` must be finite"));
        }
        Ok(())
    }

    pub fn law(&self) -> Result<VelocityLaw, Failure> {
        Ok(VelocityLaw::gaussian(self.beta, self.dim)?)
    }

    pub fn strain(&self) -> Result<StrainRate, Failure> {
        Ok(StrainRate::shear(self.dim, self.s)?)
    }
}

/// Initial (Q, V); empty lists mean the origin at rest.
fn initial(q0: &[f64], v0: &[f64], dim: usize) -> Result<(Vec3, Vec3), Failure> {
    let get = |key: &str, xs: &[f64]| if xs.is_empty() { Ok(Vec3::zeros()) } else { vector(key, xs, dim) };
    Ok((get("q0", q0)?, get("v0", v0)?))
}

// serde cannot combine `flatten` with `deny_unknown_fields`, so the shared
// keys are spelled out in every section.
macro_rules! particle_section {
    ($name:ident { $($(#[$meta:meta])* $field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        #[derive(Debug, Clone, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            pub dim: usize,
            pub lambda: f64,
            pub beta: f64,
            pub radius: f64,
            pub mass: f64,
            pub s: f64,
            pub q0: Vec<f64>,
            pub v0: Vec<f64>,
            pub t_end: f64,
            $($(#[$meta])* pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                Self {
                    dim: 3,
                    lambda: 1.0 / 16.0,
                    beta: 1.0,
                    radius: 2.0,
                    mass: 1.0,
                    s: 0.0,
                    q0: Vec::new(),
                    v0: Vec::new(),
                    t_end: 1.0,
                    $($field: $default,)*
                }
            }
        }

        impl $name {
            pub fn particle(&self) -> ParticleParams {
                ParticleParams {
                    dim: self.dim,
                    lambda: self.lambda,
                    beta: self.beta,
                    radius: self.radius,
                    mass: self.mass,
                    s: self.s,
                }
            }

            /// Validated particle parameters and initial state.
            pub fn setup(&self) -> Result<(ParticleParams, Vec3, Vec3), Failure> {
                let p = self.particle();
                p.check()?;
                positive("t_end", self.t_end)?;
                let (q, v) = initial(&self.q0, &self.v0, self.dim)?;
                Ok((p, q, v))
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Splitting with exact OU relative to `AQ`.
    Neld,
    /// Variant whose relative velocity is a pure OU process.
    NeldA,
    EulerMaruyama,
}

particle_section!(CoeffsSection {});

particle_section!(SdeSection {
    dt: f64 = 1e-3,
    scheme: Scheme = Scheme::Neld,
    /// Overrides of the bath-derived friction.
    gamma: Option<f64> = None,
    sigma: Option<f64> = None,
    /// Write every n-th step.
    record_every: usize = 1,
});

impl SdeSection {
    pub fn check(&self) -> Result<(), Failure> {
        positive("dt", self.dt)?;
        if self.record_every == 0 {
            return Err(Failure::config("`record_every` must be at least 1"));
        }
        for (key, x) in [("gamma", self.gamma), ("sigma", self.sigma)] {
            if let Some(x) = x {
                if !(x >= 0.0 && x.is_finite()) {
                    return Err(Failure::config(format!("`{key}` must be non-negative, got {x}")));
                }
            }
        }
        Ok(())
    }
}

particle_section!(BathSection {
    /// Light-atom mass.
    m: f64 = 1e-3,
    domain_radius: Option<f64> = None,
    escape_tol: f64 = 1e-3,
    strict: bool = true,
});

impl BathSection {
    pub fn check(&self) -> Result<(), Failure> {
        positive("m", self.m)?;
        positive("escape_tol", self.escape_tol)?;
        if let Some(r) = self.domain_radius {
            positive("domain_radius", r)?;
        }
        Ok(())
    }
}

particle_section!(MarkovSection {
    m: f64 = 1e-3,
});

impl MarkovSection {
    pub fn check(&self) -> Result<(), Failure> {
        positive("m", self.m)
    }
}

/// Mirrors [`MdConfig`]; the seed comes from the top level or `--seed`.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdSection {
    pub n: usize,
    pub eps: f64,
    pub beta: f64,
    pub s: f64,
    pub mass: f64,
    pub a: f64,
    pub r_cut: f64,
    pub gamma: f64,
    pub sigma: Option<f64>,
    pub dt: f64,
    pub t_end: f64,
    pub k_slices: usize,
    pub burn_in: f64,
}

impl Default for MdSection {
    fn default() -> Self {
        let c = MdConfig::liquid(216, 0.0, 1.0, 10.0);
        Self {
            n: c.n,
            eps: c.eps,
            beta: c.beta,
            s: c.s,
            mass: c.mass,
            a: c.a,
            r_cut: c.r_cut,
            gamma: c.gamma,
            sigma: c.sigma,
            dt: c.dt,
            t_end: c.t_end,
            k_slices: c.k_slices,
            burn_in: c.burn_in,
        }
    }
}

impl MdSection {
    pub fn to_config(&self, seed: u64) -> Result<MdConfig, Failure> {
        let cfg = MdConfig {
            n: self.n,
            eps: self.eps,
            beta: self.beta,
            s: self.s,
            mass: self.mass,
            a: self.a,
            r_cut: self.r_cut,
            gamma: self.gamma,
            sigma: self.sigma,
            dt: self.dt,
            t_end: self.t_end,
            k_slices: self.k_slices,
            seed,
            burn_in: self.burn_in,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mirrors [`ConvergeConfig`].
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeSection {
    pub dim: usize,
    pub lambda: f64,
    pub beta: f64,
    pub radius: f64,
    pub mass: f64,
    pub s: f64,
    pub q0: Vec<f64>,
    pub v0: Vec<f64>,
    pub horizon: f64,
    pub paths: usize,
    pub markov_masses: Vec<f64>,
    pub bath_masses: Vec<f64>,
    pub strict: bool,
}

impl Default for ConvergeSection {
    fn default() -> Self {
        let c = ConvergeConfig::default();
        let d = c.dim;
        Self {
            dim: d,
            lambda: c.lambda,
            beta: c.beta,
            radius: c.radius,
            mass: c.mass,
            s: c.s,
            q0: c.q0.iter().take(d).copied().collect(),
            v0: c.v0.iter().take(d).copied().collect(),
            horizon: c.horizon,
            paths: c.paths,
            markov_masses: c.markov_masses,
            bath_masses: c.bath_masses,
            strict: c.strict,
        }
    }
}

impl ConvergeSection {
    pub fn to_config(&self, seed: u64) -> Result<ConvergeConfig, Failure> {
        dimension("dim", self.dim)?;
        for (key, x) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("radius", self.radius),
            ("mass", self.mass),
            ("horizon", self.horizon),
        ] {
            positive(key, x)?;
        }
        for m in self.markov_masses.iter().chain(&self.bath_masses) {
            positive("markov_masses/bath_masses", *m)?;
        }
        if self.paths < 2 {
            return Err(Failure::config("`paths` must be at least 2"));
        }
        Ok(ConvergeConfig {
            dim: self.dim,
            lambda: self.lambda,
            beta: self.beta,
            radius: self.radius,
            mass: self.mass,
            s: self.s,
            q0: vector("q0", &self.q0, self.dim)?,
            v0: vector("v0", &self.v0, self.dim)?,
            horizon: self.horizon,
            paths: self.paths,
            seed,
            markov_masses: self.markov_masses.clone(),
            bath_masses: self.bath_masses.clone(),
            strict: self.strict,
        })
    }
}

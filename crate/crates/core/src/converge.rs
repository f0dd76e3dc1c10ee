//! Small-mass sweep: Markov and mechanical ensembles against the Langevin
//! moment oracle.
//!
//! Both processes are stopped when they leave `‖A‖|Q| + |V| ≤ c_m/8` and the
//! stopped state is held, so rows at larger m include the effect of paths
//! that were cut short.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::analysis::{ensemble_moments, linear_sde_moments, skorokhod_upper, CadlagTrajectory, MomentVariant};
use crate::error::{invalid, Result};
use crate::heatbath::{run_mechanical, slow_share, BathConfig, MechDiagnostics, MechRun, MechState};
use crate::markov::{run_markov, JumpLaw};
use crate::math::{StrainRate, Vec3, VelocityLaw};
use crate::rng;
use crate::sde::coefficients_from_bath;

/// Parameters of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeConfig {
    pub dim: usize,
    pub lambda: f64,
    pub beta: f64,
    pub radius: f64,
    pub mass: f64,
    /// Shear rate of `A`.
    pub s: f64,
    pub q0: Vec3,
    pub v0: Vec3,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    pub markov_masses: Vec<f64>,
    pub bath_masses: Vec<f64>,
    /// Fast-partner recollisions abort the run instead of being counted.
    pub strict: bool,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            lambda: 1.0 / 16.0,
            beta: 1.0,
            radius: 2.0,
            mass: 6.0,
            s: 0.1,
            q0: Vec3::zeros(),
            v0: Vec3::new(0.15, 0.0, 0.0),
            horizon: 1.0,
            paths: 5000,
            seed: 1,
            markov_masses: vec![1e-2, 1e-3, 1e-4],
            bath_masses: vec![1e-2, 1e-3],
            strict: false,
        }
    }
}

impl ConvergeConfig {
    pub fn law(&self) -> Result<VelocityLaw> {
        VelocityLaw::gaussian(self.beta, self.dim)
    }

    pub fn strain(&self) -> Result<StrainRate> {
        StrainRate::shear(self.dim, self.s)
    }

    fn state_index(&self) -> Vec<usize> {
        (0..2 * self.dim).collect()
    }

    fn velocity_index(&self) -> Vec<usize> {
        (self.dim..2 * self.dim).collect()
    }

    /// Mean and covariance of (Q, V) at the horizon under the limiting SDE.
    pub fn oracle(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let law = self.law()?;
        let a = self.strain()?;
        let c = coefficients_from_bath(self.lambda, &law, self.radius, self.mass, a)?;
        let d = self.dim;
        let m0 = DVector::from_fn(2 * d, |i, _| if i < d { self.q0[i] } else { self.v0[i - d] });
        linear_sde_moments(c.gamma, c.sigma, self.mass, &a, MomentVariant::Neld, self.horizon, &m0, &DMatrix::zeros(2 * d, 2 * d))
    }

    fn validate(&self) -> Result<()> {
        if self.paths < 2 {
            return invalid("need at least two paths");
        }
        if !(self.horizon > 0.0) {
            return invalid("horizon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Markov,
    Mechanical,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Markov => "markov",
            Level::Mechanical => "mechanical",
        })
    }
}

/// One line of the error-versus-m table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeRow {
    pub level: Level,
    pub m: f64,
    pub paths: usize,
    /// Paths stopped before the horizon.
    pub stopped: usize,
    /// `|Δmean| + ‖Δcov‖_F` of (Q, V) at the horizon.
    pub error: f64,
    /// Largest deviation of the V moments in standard errors.
    pub z_velocity: f64,
    /// Same over the full state.
    pub z_state: f64,
    /// Mean Skorokhod bound between each mechanical path and the path
    /// keeping only its fast collisions.
    pub skorokhod_fast: Option<f64>,
    pub slow_share: Option<f64>,
    pub diagnostics: Option<MechDiagnostics>,
}

fn row(
    cfg: &ConvergeConfig,
    level: Level,
    m: f64,
    trajs: &[CadlagTrajectory],
    stopped: usize,
) -> Result<ConvergeRow> {
    let (om, oc) = cfg.oracle()?;
    let rep = ensemble_moments(trajs, cfg.horizon)?;
    let vi = cfg.velocity_index();
    let vrep = rep.select(&vi);
    let om_v = DVector::from_fn(vi.len(), |i, _| om[vi[i]]);
    let oc_v = DMatrix::from_fn(vi.len(), vi.len(), |i, j| oc[(vi[i], vi[j])]);
    debug_assert_eq!(rep.mean.len(), cfg.state_index().len());
    Ok(ConvergeRow {
        level,
        m,
        paths: trajs.len(),
        stopped,
        error: rep.error(&om, &oc),
        z_velocity: vrep.max_z(&om_v, &oc_v),
        z_state: rep.max_z(&om, &oc),
        skorokhod_fast: None,
        slow_share: None,
        diagnostics: None,
    })
}

/// Markov ensemble at light-atom mass m.
pub fn markov_row(cfg: &ConvergeConfig, m: f64) -> Result<ConvergeRow> {
    cfg.validate()?;
    let law = JumpLaw::new(cfg.lambda, m, cfg.law()?, cfg.strain()?, cfg.mass, cfg.radius)?;
    let runs: Vec<_> = (0..cfg.paths)
        .into_par_iter()
        .map(|k| run_markov(&law, cfg.q0, cfg.v0, cfg.horizon, &mut rng::stream(cfg.seed, "markov", k as u64)))
        .collect::<Result<_>>()?;
    let stopped = runs.iter().filter(|r| r.stopped_at.is_some()).count();
    let trajs: Vec<CadlagTrajectory> = runs.into_iter().map(|r| r.trajectory).collect();
    row(cfg, Level::Markov, m, &trajs, stopped)
}

/// The mechanical path with every slow collision removed.
pub fn fast_reduction(run: &MechRun, q0: &Vec3, v0: &Vec3, dim: usize) -> Result<CadlagTrajectory> {
    let stop = run.state.t;
    let (mut q, mut v, mut t) = (*q0, *v0, 0.0);
    let mut out = CadlagTrajectory::new();
    let sample = |q: &Vec3, v: &Vec3| -> Vec<f64> { q.iter().take(dim).chain(v.iter().take(dim)).copied().collect() };
    out.push(0.0, sample(&q, &v), false)?;
    for ev in &run.state.events {
        q += v * (ev.t - t);
        t = ev.t;
        if ev.fast {
            v += ev.e_n * (ev.v_post.dot(&ev.e_n) - ev.big_v_n);
        }
        out.push(t, sample(&q, &v), ev.fast)?;
    }
    q += v * (stop - t);
    out.push(stop, sample(&q, &v), false)?;
    if let Some((_, end)) = run.trajectory.span() {
        if end > stop {
            out.push(end, sample(&q, &v), false)?;
        }
    }
    Ok(out)
}

/// Mechanical ensemble at light-atom mass m.
pub fn mechanical_row(cfg: &ConvergeConfig, m: f64) -> Result<ConvergeRow> {
    cfg.validate()?;
    let mut bath = BathConfig::new(cfg.lambda, m, cfg.law()?, cfg.strain()?, cfg.horizon)?;
    bath.strict = cfg.strict;
    let runs: Vec<MechRun> = (0..cfg.paths)
        .into_par_iter()
        .map(|k| {
            let p = MechState::new(cfg.q0, cfg.v0, cfg.mass, cfg.radius, m)?;
            run_mechanical(&bath, p, &mut rng::stream(cfg.seed, "bath", k as u64))
        })
        .collect::<Result<_>>()?;
    let stopped = runs.iter().filter(|r| r.state.tau_m.is_some()).count();
    let mut diag = MechDiagnostics { max_energy_ratio: 0.0, ..Default::default() };
    let mut sk = 0.0;
    let mut slow = 0.0;
    let mut with_events = 0usize;
    for r in &runs {
        diag.recollisions += r.diagnostics.recollisions;
        diag.energy_violations += r.diagnostics.energy_violations;
        diag.multicollisions += r.diagnostics.multicollisions;
        diag.contact_errors += r.diagnostics.contact_errors;
        diag.max_energy_ratio = diag.max_energy_ratio.max(r.diagnostics.max_energy_ratio);
        let fast = fast_reduction(r, &cfg.q0, &cfg.v0, cfg.dim)?;
        sk += skorokhod_upper(&r.trajectory, &fast)?;
        if !r.state.events.is_empty() {
            slow += slow_share(&r.state.events, cfg.mass)?;
            with_events += 1;
        }
    }
    let trajs: Vec<CadlagTrajectory> = runs.into_iter().map(|r| r.trajectory).collect();
    let mut out = row(cfg, Level::Mechanical, m, &trajs, stopped)?;
    out.skorokhod_fast = Some(sk / trajs.len() as f64);
    out.slow_share = Some(if with_events > 0 { slow / with_events as f64 } else { 0.0 });
    out.diagnostics = Some(diag);
    Ok(out)
}

/// Full table: Markov rows then mechanical rows, each in the configured m order.
pub fn converge(cfg: &ConvergeConfig) -> Result<Vec<ConvergeRow>> {
    let mut rows = Vec::new();
    for &m in &cfg.markov_masses {
        rows.push(markov_row(cfg, m)?);
    }
    for &m in &cfg.bath_masses {
        rows.push(mechanical_row(cfg, m)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_starts_from_the_initial_state() {
        let cfg = ConvergeConfig { horizon: 1e-9, ..Default::default() };
        let (m, c) = cfg.oracle().unwrap();
        assert!((m[2] - 0.15).abs() < 1e-9 && m[0].abs() < 1e-9);
        assert!(c.amax() < 1e-9);
    }

    #[test]
    fn small_sweep_runs() {
        let cfg = ConvergeConfig {
            paths: 40,
            markov_masses: vec![1e-2],
            bath_masses: vec![1e-2],
            ..Default::default()
        };
        let rows = converge(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].level, Level::Markov);
        assert!(rows[1].skorokhod_fast.unwrap() >= 0.0);
        assert!(rows.iter().all(|r| r.error.is_finite() && r.paths == 40));
        // same seed, same table
        assert_eq!(converge(&cfg).unwrap(), rows);
    }

    #[test]
    fn fast_reduction_without_slow_events_is_the_path() {
        let cfg = ConvergeConfig::default();
        let mut bath = BathConfig::new(cfg.lambda, 1e-3, cfg.law().unwrap(), cfg.strain().unwrap(), 1.0).unwrap();
        bath.strict = false;
        let p = MechState::new(cfg.q0, cfg.v0, cfg.mass, cfg.radius, 1e-3).unwrap();
        let run = run_mechanical(&bath, p, &mut rng::stream(3, "bath", 0)).unwrap();
        let fast = fast_reduction(&run, &cfg.q0, &cfg.v0, 2).unwrap();
        let slow = run.state.events.iter().filter(|e| !e.fast).count();
        let d = skorokhod_upper(&run.trajectory, &fast).unwrap();
        if slow == 0 {
            assert!(d < 1e-12, "{d}");
        } else {
            assert!(d > 0.0);
        }
    }
}

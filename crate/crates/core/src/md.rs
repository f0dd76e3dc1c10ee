//! Lennard-Jones shear flow with Lees-Edwards boundaries.
//!
//! Particles live in the cube `[-L/2, L/2)^3`. The images of a particle
//! at time t sit at `(Q1 + mL + n·o(t), Q2 + nL, Q3 + kL)` with velocity
//! `V1 + n·sL`, where `o(t) = t·s·L mod L`. Each step is a velocity-Verlet
//! step for the pair forces followed by an exact Ornstein-Uhlenbeck update
//! of `V` toward the background flow `AQ`.

use log::{debug, warn};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::math::{normal_vec, Mat3, StrainRate, Vec3};
use crate::sde::ou_noise_scale;

/// Parameters of a shear run.
#[derive(Debug, Clone, PartialEq)]
pub struct MdConfig {
    /// Particle count, a perfect cube.
    pub n: usize,
    pub eps: f64,
    pub beta: f64,
    /// Strain rate: the background flow is `(s·Q2, 0, 0)`.
    pub s: f64,
    pub mass: f64,
    /// Initial lattice spacing.
    pub a: f64,
    pub r_cut: f64,
    pub gamma: f64,
    /// Noise amplitude; `None` means `sqrt(2γ/β)`.
    pub sigma: Option<f64>,
    pub dt: f64,
    pub t_end: f64,
    /// Number of slices in Q2.
    pub k_slices: usize,
    pub seed: u64,
    /// Statistics are only accumulated for `t >= burn_in`.
    pub burn_in: f64,
}

impl MdConfig {
    /// Liquid state point used for the shear-profile and viscosity runs.
    pub fn liquid(n: usize, s: f64, gamma: f64, t_end: f64) -> Self {
        Self {
            n,
            eps: 1.0,
            beta: 1.0,
            s,
            mass: 1.0,
            a: 0.7f64.powf(-1.0 / 3.0),
            r_cut: 2.6,
            gamma,
            sigma: None,
            dt: 0.005,
            t_end,
            k_slices: 100,
            seed: 0,
            burn_in: 0.0,
        }
    }

    pub fn side(&self) -> usize {
        (self.n as f64).cbrt().round() as usize
    }

    pub fn box_length(&self) -> f64 {
        self.a * self.side() as f64
    }

    pub fn volume(&self) -> f64 {
        self.box_length().powi(3)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| (2.0 * self.gamma / self.beta).sqrt())
    }

    pub fn strain(&self) -> StrainRate {
        StrainRate::shear(3, self.s).expect("shear is traceless")
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.side();
        if self.n == 0 || c * c * c != self.n {
            return invalid(format!("n = {} is not a perfect cube", self.n));
        }
        for (name, v) in [("beta", self.beta), ("mass", self.mass), ("a", self.a), ("r_cut", self.r_cut), ("dt", self.dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.eps >= 0.0) || !(self.gamma >= 0.0) || !(self.t_end >= 0.0) || !(self.burn_in >= 0.0) {
            return invalid("eps, gamma, t_end and burn_in must be non-negative");
        }
        if let Some(sig) = self.sigma {
            if !(sig >= 0.0) {
                return invalid(format!("sigma must be non-negative, got {sig}"));
            }
        }
        if !self.s.is_finite() {
            return invalid("strain rate must be finite");
        }
        if self.k_slices == 0 {
            return invalid("k_slices must be at least 1");
        }
        if self.r_cut >= self.box_length() / 2.0 {
            return invalid(format!("r_cut = {} must be below L/2 = {}", self.r_cut, self.box_length() / 2.0));
        }
        Ok(())
    }
}

/// Lennard-Jones pair potential shifted so that value and slope vanish at the cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LjShifted {
    pub eps: f64,
    pub r_cut: f64,
    pub c1: f64,
    pub c2: f64,
}

fn lj_raw(eps: f64, r: f64) -> (f64, f64) {
    let ir6 = r.powi(-6);
    let ir12 = ir6 * ir6;
    (4.0 * eps * (ir12 - ir6), 4.0 * eps * (-12.0 * ir12 + 6.0 * ir6) / r)
}

impl LjShifted {
    /// Potential with the linear correction `c1·r + c2`.
    pub fn new(eps: f64, r_cut: f64) -> Result<Self> {
        if !(r_cut > 0.0) {
            return invalid(format!("cutoff must be positive, got {r_cut}"));
        }
        let (phi, dphi) = lj_raw(eps, r_cut);
        let c1 = -dphi;
        let c2 = -phi - c1 * r_cut;
        Ok(Self { eps, r_cut, c1, c2 })
    }

    /// The plain truncated kernel with no correction.
    pub fn unshifted(eps: f64, r_cut: f64) -> Result<Self> {
        if !(r_cut > 0.0) {
            return invalid(format!("cutoff must be positive, got {r_cut}"));
        }
        Ok(Self { eps, r_cut, c1: 0.0, c2: 0.0 })
    }

    pub fn phi(&self, r: f64) -> f64 {
        if r >= self.r_cut {
            return 0.0;
        }
        lj_raw(self.eps, r).0 + self.c1 * r + self.c2
    }

    pub fn dphi(&self, r: f64) -> f64 {
        if r >= self.r_cut {
            return 0.0;
        }
        lj_raw(self.eps, r).1 + self.c1
    }

    /// Force on the first particle of a pair separated by `d = Qi - Qj`.
    pub fn force(&self, d: &Vec3) -> Vec3 {
        let r = d.norm();
        if r >= self.r_cut || r == 0.0 {
            return Vec3::zeros();
        }
        d * (-self.dphi(r) / r)
    }
}

/// Minimum-image separation under Lees-Edwards boundaries.
///
/// Crossing the Q2 period n times shifts Q1 by `n·offset`; the three rows
/// nearest the raw Q2 separation are tried and the shortest vector is kept.
#[inline]
pub fn lees_edwards_min_image(d: &Vec3, l: f64, offset: f64) -> Vec3 {
    let n0 = (d.y / l).round();
    let k = (d.z / l).round();
    let z = d.z - k * l;
    let row = |n: f64| {
        let y = d.y - n * l;
        let x0 = d.x - n * offset;
        let x = x0 - (x0 / l).round() * l;
        (x * x + y * y + z * z, Vec3::new(x, y, z))
    };
    // the nearest row wins outright when it beats the bare Q2 distance of
    // its neighbours, which bounds their full distance from below
    let (r2, v) = row(n0);
    let ym = d.y - (n0 - 1.0) * l;
    let yp = d.y - (n0 + 1.0) * l;
    if r2 < ym * ym && r2 < yp * yp {
        return v;
    }
    let mut best = Vec3::zeros();
    let mut best_r2 = f64::INFINITY;
    for n in [n0 - 1.0, n0, n0 + 1.0] {
        let (r2, v) = row(n);
        if r2 < best_r2 {
            best_r2 = r2;
            best = v;
        }
    }
    best
}

/// Positions, velocities and clock of the particle system.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub q: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub t: f64,
    pub l: f64,
    pub s: f64,
}

impl ParticleSystem {
    pub fn new(q: Vec<Vec3>, v: Vec<Vec3>, l: f64, s: f64) -> Result<Self> {
        if q.len() != v.len() {
            return invalid("position and velocity counts differ");
        }
        if !(l > 0.0) {
            return invalid(format!("box length must be positive, got {l}"));
        }
        let mut sys = Self { q, v, t: 0.0, l, s };
        for i in 0..sys.q.len() {
            sys.wrap(i);
        }
        Ok(sys)
    }

    /// Simple cubic lattice with velocities `AQ + N(0, 1/(βM))`.
    pub fn lattice<R: Rng + ?Sized>(cfg: &MdConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.side();
        let l = cfg.box_length();
        let a = cfg.strain();
        let sd = 1.0 / (cfg.beta * cfg.mass).sqrt();
        let mut q = Vec::with_capacity(cfg.n);
        for i in 0..c {
            for j in 0..c {
                for k in 0..c {
                    let x = |u: usize| -l / 2.0 + (u as f64 + 0.5) * cfg.a;
                    q.push(Vec3::new(x(i), x(j), x(k)));
                }
            }
        }
        let v = q.iter().map(|p| a.apply(p) + normal_vec(rng, 3) * sd).collect();
        Self::new(q, v, l, cfg.s)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Current image offset `t·s·L mod L`.
    pub fn offset(&self) -> f64 {
        (self.t * self.s * self.l).rem_euclid(self.l)
    }

    /// Background flow at the wrapped position of particle i.
    pub fn flow(&self, i: usize) -> Vec3 {
        Vec3::new(self.s * self.q[i].y, 0.0, 0.0)
    }

    /// Bring particle i back into the primary box using the replica rule.
    pub fn wrap(&mut self, i: usize) {
        let l = self.l;
        let half = l / 2.0;
        let off = self.offset();
        let (q, v) = (&mut self.q[i], &mut self.v[i]);
        while q.y >= half {
            q.y -= l;
            q.x -= off;
            v.x -= self.s * l;
        }
        while q.y < -half {
            q.y += l;
            q.x += off;
            v.x += self.s * l;
        }
        q.x -= (q.x / l).round() * l;
        q.z -= (q.z / l).round() * l;
        // rounding can land exactly on the upper face
        if q.x >= half {
            q.x -= l;
        }
        if q.z >= half {
            q.z -= l;
        }
    }

    pub fn kinetic_energy(&self, mass: f64) -> f64 {
        0.5 * mass * self.v.iter().map(|v| v.norm_squared()).sum::<f64>()
    }

    pub fn momentum(&self, mass: f64) -> Vec3 {
        self.v.iter().fold(Vec3::zeros(), |acc, v| acc + v) * mass
    }

    /// Velocities relative to the background flow.
    pub fn peculiar(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.v[i] - self.flow(i)).collect()
    }
}

/// Pair forces, virial and potential energy at one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceField {
    pub forces: Vec<Vec3>,
    /// `Σ_{i<j} r_ij ⊗ f_ij`.
    pub virial: Mat3,
    pub potential: f64,
}

struct CellList {
    per_side: usize,
    heads: Vec<Vec<usize>>,
}

impl CellList {
    fn build(q: &[Vec3], l: f64, r_cut: f64) -> Option<Self> {
        // more cells than particles only costs allocation
        let per_side = ((l / r_cut).floor() as usize).min((q.len() as f64).cbrt().ceil() as usize);
        if per_side < 3 {
            return None;
        }
        let h = l / per_side as f64;
        let mut heads = vec![Vec::new(); per_side * per_side * per_side];
        for (i, p) in q.iter().enumerate() {
            let idx = |x: f64| (((x + l / 2.0) / h).floor() as isize).clamp(0, per_side as isize - 1) as usize;
            heads[(idx(p.x) * per_side + idx(p.y)) * per_side + idx(p.z)].push(i);
        }
        Some(Self { per_side, heads })
    }

    /// Cells that can hold a partner within the cutoff. Rows reached across
    /// the Q2 face are sheared by the offset, so every x cell is taken there.
    fn neighbours(&self, cell: usize) -> Vec<usize> {
        let c = self.per_side as isize;
        let cz = cell as isize % c;
        let cy = (cell as isize / c) % c;
        let cx = cell as isize / (c * c);
        let mut out = Vec::with_capacity(40);
        for dy in -1..=1 {
            let y = cy + dy;
            let crosses = y < 0 || y >= c;
            let y = y.rem_euclid(c);
            let xs: Vec<isize> = if crosses { (0..c).collect() } else { (-1..=1).map(|dx| (cx + dx).rem_euclid(c)).collect() };
            for x in xs {
                for dz in -1..=1 {
                    let z = (cz + dz).rem_euclid(c);
                    out.push(((x * c + y) * c + z) as usize);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Visit each unordered pair within the cutoff once, in a fixed order.
fn for_each_pair<F: FnMut(usize, usize, Vec3)>(q: &[Vec3], l: f64, offset: f64, r_cut: f64, brute: bool, mut f: F) {
    let rc2 = r_cut * r_cut;
    let cells = if brute { None } else { CellList::build(q, l, r_cut) };
    match cells {
        None => {
            for i in 0..q.len() {
                for j in (i + 1)..q.len() {
                    let d = lees_edwards_min_image(&(q[i] - q[j]), l, offset);
                    if d.norm_squared() < rc2 {
                        f(i, j, d);
                    }
                }
            }
        }
        Some(cells) => {
            for (cell, members) in cells.heads.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                let near = cells.neighbours(cell);
                for &i in members {
                    for &other in &near {
                        for &j in &cells.heads[other] {
                            if j <= i {
                                continue;
                            }
                            let d = lees_edwards_min_image(&(q[i] - q[j]), l, offset);
                            if d.norm_squared() < rc2 {
                                f(i, j, d);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn compute_forces_with(sys: &ParticleSystem, pot: &LjShifted, brute: bool) -> ForceField {
    let mut forces = vec![Vec3::zeros(); sys.len()];
    let mut virial = Mat3::zeros();
    let mut potential = 0.0;
    for_each_pair(&sys.q, sys.l, sys.offset(), pot.r_cut, brute, |i, j, d| {
        let r = d.norm();
        let c = -pot.dphi(r) / r;
        let fij = d * c;
        forces[i] += fij;
        forces[j] -= fij;
        // c·(d⊗d) keeps the accumulated virial bitwise symmetric
        virial += d * d.transpose() * c;
        potential += pot.phi(r);
    });
    ForceField { forces, virial, potential }
}

/// Forces through the cell list (falls back to all pairs in small boxes).
pub fn compute_forces(sys: &ParticleSystem, pot: &LjShifted) -> ForceField {
    compute_forces_with(sys, pot, false)
}

/// All-pairs reference evaluation.
pub fn compute_forces_brute(sys: &ParticleSystem, pot: &LjShifted) -> ForceField {
    compute_forces_with(sys, pot, true)
}

/// Verlet list of pairs within `r_cut + skin`.
///
/// A pair's minimum-image distance moves by at most the two particle
/// displacements plus the change of the image offset, so the list stays
/// complete until those add up to the skin.
#[derive(Debug, Clone)]
struct NeighbourList {
    pairs: Vec<(u32, u32)>,
    skin: f64,
    t_built: f64,
    moved: Vec<Vec3>,
}

impl NeighbourList {
    fn build(sys: &ParticleSystem, r_cut: f64, skin: f64) -> Self {
        let mut pairs = Vec::new();
        for_each_pair(&sys.q, sys.l, sys.offset(), r_cut + skin, false, |i, j, _| pairs.push((i as u32, j as u32)));
        Self { pairs, skin, t_built: sys.t, moved: vec![Vec3::zeros(); sys.len()] }
    }

    fn stale(&self, sys: &ParticleSystem) -> bool {
        let max = self.moved.iter().map(|d| d.norm_squared()).fold(0.0, f64::max).sqrt();
        let shift = (sys.s * sys.l * (sys.t - self.t_built)).abs();
        2.0 * max + shift >= self.skin
    }
}

fn listed_forces(sys: &ParticleSystem, pot: &LjShifted, list: &NeighbourList) -> ForceField {
    let mut forces = vec![Vec3::zeros(); sys.len()];
    let mut virial = Mat3::zeros();
    let mut potential = 0.0;
    let (l, off) = (sys.l, sys.offset());
    let rc2 = pot.r_cut * pot.r_cut;
    for &(i, j) in &list.pairs {
        let (i, j) = (i as usize, j as usize);
        let d = lees_edwards_min_image(&(sys.q[i] - sys.q[j]), l, off);
        let r2 = d.norm_squared();
        if r2 >= rc2 {
            continue;
        }
        let r = r2.sqrt();
        let c = -pot.dphi(r) / r;
        let fij = d * c;
        forces[i] += fij;
        forces[j] -= fij;
        // c·(d⊗d) keeps the accumulated virial bitwise symmetric
        virial += d * d.transpose() * c;
        potential += pot.phi(r);
    }
    ForceField { forces, virial, potential }
}

/// Default neighbour-list skin in units of length.
pub const NEIGHBOUR_SKIN: f64 = 0.4;

/// Integrator state carried between steps.
#[derive(Debug, Clone)]
pub struct MdIntegrator {
    pub pot: LjShifted,
    pub mass: f64,
    pub dt: f64,
    pub r_cut: f64,
    alpha: f64,
    noise: f64,
    pub field: ForceField,
    list: NeighbourList,
    pub rebuilds: usize,
}

impl MdIntegrator {
    pub fn new(cfg: &MdConfig, sys: &ParticleSystem) -> Result<Self> {
        cfg.validate()?;
        let pot = LjShifted::new(cfg.eps, cfg.r_cut)?;
        let list = NeighbourList::build(sys, cfg.r_cut, NEIGHBOUR_SKIN);
        let field = listed_forces(sys, &pot, &list);
        Ok(Self {
            pot,
            mass: cfg.mass,
            dt: cfg.dt,
            r_cut: cfg.r_cut,
            alpha: (-cfg.gamma * cfg.dt / cfg.mass).exp(),
            noise: ou_noise_scale(cfg.gamma, cfg.sigma(), cfg.mass, cfg.dt),
            field,
            list,
            rebuilds: 0,
        })
    }

    fn refresh_forces(&mut self, sys: &ParticleSystem) {
        if self.list.stale(sys) {
            self.list = NeighbourList::build(sys, self.r_cut, self.list.skin);
            self.rebuilds += 1;
        }
        self.field = listed_forces(sys, &self.pot, &self.list);
    }
}

/// One splitting step: Verlet for the pair forces, then the exact
/// thermostat update `V <- αV + (1-α)AQ + noise`.
///
/// Particles are wrapped right after the drift so that forces and the
/// thermostat both see primary-box positions. Because the wrap changes
/// `V1` and `AQ` by the same `sL`, this equals wrapping at the end.
pub fn md_step<R: Rng + ?Sized>(sys: &mut ParticleSystem, integ: &mut MdIntegrator, rng: &mut R) -> Result<()> {
    let dt = integ.dt;
    let half = 0.5 * dt / integ.mass;
    let max_disp = integ.r_cut / 2.0;
    for i in 0..sys.len() {
        sys.v[i] += integ.field.forces[i] * half;
        let dq = sys.v[i] * dt;
        if !(dq.norm() <= max_disp) {
            return Err(Error::Blowup(format!(
                "particle {i} moved {:.3e} in one step at t = {:.4} (limit {max_disp})",
                dq.norm(),
                sys.t
            )));
        }
        sys.q[i] += dq;
        integ.list.moved[i] += dq;
    }
    sys.t += dt;
    for i in 0..sys.len() {
        sys.wrap(i);
    }
    integ.refresh_forces(sys);
    let (alpha, noise) = (integ.alpha, integ.noise);
    for i in 0..sys.len() {
        let vs = sys.v[i] + integ.field.forces[i] * half;
        let g = if noise > 0.0 { normal_vec(rng, 3) * noise } else { Vec3::zeros() };
        sys.v[i] = vs * alpha + sys.flow(i) * (1.0 - alpha) + g;
    }
    Ok(())
}

/// Per-slice running sums in Q2.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStats {
    pub k: usize,
    pub l: f64,
    pub s: f64,
    pub count: Vec<u64>,
    pub sum_v: Vec<Vec3>,
    pub sum_v2: Vec<Vec3>,
}

impl SliceStats {
    pub fn new(k: usize, l: f64, s: f64) -> Self {
        Self { k, l, s, count: vec![0; k], sum_v: vec![Vec3::zeros(); k], sum_v2: vec![Vec3::zeros(); k] }
    }

    pub fn slice_of(&self, y: f64) -> usize {
        let k = ((y + self.l / 2.0) / self.l * self.k as f64).floor() as isize;
        k.clamp(0, self.k as isize - 1) as usize
    }

    /// Q2 coordinate of the centre of slice k (zero-based).
    pub fn center(&self, k: usize) -> f64 {
        -self.l / 2.0 + (k as f64 + 0.5) / self.k as f64 * self.l
    }

    pub fn record(&mut self, q: &[Vec3], v: &[Vec3]) {
        for (p, w) in q.iter().zip(v) {
            let k = self.slice_of(p.y);
            self.count[k] += 1;
            self.sum_v[k] += w;
            self.sum_v2[k] += w.component_mul(w);
        }
    }

    pub fn total(&self) -> u64 {
        self.count.iter().sum()
    }

    /// Time-averaged mean velocity per slice; `None` for empty slices.
    pub fn mean(&self) -> Vec<Option<Vec3>> {
        (0..self.k).map(|k| (self.count[k] > 0).then(|| self.sum_v[k] / self.count[k] as f64)).collect()
    }

    /// Per-component velocity variance around the slice mean.
    pub fn variance(&self) -> Vec<Option<Vec3>> {
        (0..self.k)
            .map(|k| {
                let n = self.count[k] as f64;
                (self.count[k] > 0).then(|| {
                    let m = self.sum_v[k] / n;
                    self.sum_v2[k] / n - m.component_mul(&m)
                })
            })
            .collect()
    }

    /// Count-weighted average of the slice variances.
    pub fn mean_variance(&self) -> Vec3 {
        let mut acc = Vec3::zeros();
        let mut w = 0.0;
        for (k, var) in self.variance().into_iter().enumerate() {
            if let Some(var) = var {
                acc += var * self.count[k] as f64;
                w += self.count[k] as f64;
            }
        }
        acc / w
    }

    /// Distance of slice k's mean to the background flow at its centre.
    pub fn dist_slice(&self, k: usize) -> Option<f64> {
        if self.count[k] == 0 {
            return None;
        }
        let m = self.sum_v[k] / self.count[k] as f64;
        let dx = m.x - self.s * self.center(k);
        Some((dx * dx + m.y * m.y + m.z * m.z).sqrt())
    }

    /// Root-mean-square distance over the occupied slices.
    pub fn dist(&self) -> Option<f64> {
        let mut acc = 0.0;
        let mut used = 0usize;
        for k in 0..self.k {
            if let Some(d) = self.dist_slice(k) {
                acc += d * d;
                used += 1;
            }
        }
        if used == 0 {
            return None;
        }
        if used < self.k {
            debug!("{} of {} slices empty, excluded from dist", self.k - used, self.k);
        }
        Some((acc / used as f64).sqrt())
    }

    /// Count-weighted least-squares slope of mean V1 against Q2, with its
    /// standard error from the residual scatter.
    pub fn velocity_slope(&self) -> Option<(f64, f64)> {
        let pts: Vec<(f64, f64, f64)> = self
            .mean()
            .iter()
            .enumerate()
            .filter_map(|(k, m)| m.map(|m| (self.center(k), m.x, self.count[k] as f64)))
            .collect();
        if pts.len() < 3 {
            return None;
        }
        let w: f64 = pts.iter().map(|p| p.2).sum();
        let xm = pts.iter().map(|p| p.0 * p.2).sum::<f64>() / w;
        let ym = pts.iter().map(|p| p.1 * p.2).sum::<f64>() / w;
        let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - xm).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - xm) * (p.1 - ym)).sum();
        let slope = sxy / sxx;
        let rss: f64 = pts.iter().map(|p| p.2 * (p.1 - ym - slope * (p.0 - xm)).powi(2)).sum();
        let dof = (pts.len() - 2) as f64;
        let se = (rss / dof / sxx).sqrt();
        Some((slope, se))
    }
}

/// Irving-Kirkwood stress from peculiar velocities and a force evaluation.
pub fn irving_kirkwood_stress(sys: &ParticleSystem, field: &ForceField, mass: f64, volume: f64) -> Mat3 {
    let mut kin = Mat3::zeros();
    for i in 0..sys.len() {
        let w = sys.v[i] - sys.flow(i);
        kin += w * w.transpose() * mass;
    }
    (kin + field.virial) / volume
}

/// Time-averaged stress with its uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct StressReport {
    pub sigma_tensor: Mat3,
    pub sigma12: f64,
    /// `-σ12/s`; absent when `s = 0`.
    pub eta: Option<f64>,
    /// Standard error of `sigma12` from batch means.
    pub stderr: f64,
    pub samples: usize,
}

const STRESS_BATCHES: usize = 20;

impl StressReport {
    pub fn from_series(series: &[Mat3], s: f64) -> Self {
        let n = series.len();
        let mut mean = Mat3::zeros();
        for m in series {
            mean += m;
        }
        if n > 0 {
            mean /= n as f64;
        }
        let sigma12 = mean[(0, 1)];
        let stderr = batch_stderr(&series.iter().map(|m| m[(0, 1)]).collect::<Vec<_>>(), STRESS_BATCHES);
        let eta = (s != 0.0).then(|| -sigma12 / s);
        Self { sigma_tensor: mean, sigma12, eta, stderr, samples: n }
    }
}

/// Standard error of the mean of a correlated series by batch means.
pub fn batch_stderr(x: &[f64], batches: usize) -> f64 {
    let b = batches.min(x.len());
    if b < 2 {
        return f64::NAN;
    }
    let size = x.len() / b;
    let means: Vec<f64> = (0..b).map(|i| x[i * size..(i + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let mu = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

/// Output of a complete shear run.
#[derive(Debug, Clone)]
pub struct ShearRun {
    pub slices: SliceStats,
    pub stress: StressReport,
    /// `(t, dist(t))` after every recorded step.
    pub dist_series: Vec<(f64, f64)>,
    /// `(t, σ(t))` after every recorded step.
    pub stress_series: Vec<(f64, Mat3)>,
    /// Per-component variance of `V - AQ` over all recorded steps.
    pub peculiar_variance: Vec3,
    pub system: ParticleSystem,
}

/// Lattice start, `cfg.steps()` splitting steps, statistics every step
/// from `t = burn_in` on (the initial state counts when `burn_in = 0`).
pub fn run_shear_experiment<R: Rng + ?Sized>(cfg: &MdConfig, rng: &mut R) -> Result<ShearRun> {
    cfg.validate()?;
    let mut sys = ParticleSystem::lattice(cfg, rng)?;
    let mut integ = MdIntegrator::new(cfg, &sys)?;
    let volume = cfg.volume();
    let mut slices = SliceStats::new(cfg.k_slices, sys.l, cfg.s);
    let mut dist_series = Vec::new();
    let mut stress_series = Vec::new();
    let mut w_sum = Vec3::zeros();
    let mut w_sq = Vec3::zeros();
    let mut w_n = 0u64;

    let steps = cfg.steps();
    for step in 0..=steps {
        if step > 0 {
            md_step(&mut sys, &mut integ, rng)?;
        }
        if sys.t + 0.5 * cfg.dt < cfg.burn_in {
            continue;
        }
        slices.record(&sys.q, &sys.v);
        for w in sys.peculiar() {
            w_sum += w;
            w_sq += w.component_mul(&w);
            w_n += 1;
        }
        if let Some(d) = slices.dist() {
            dist_series.push((sys.t, d));
        }
        stress_series.push((sys.t, irving_kirkwood_stress(&sys, &integ.field, cfg.mass, volume)));
    }
    if slices.count.contains(&0) {
        warn!("{} empty slices at the end of the run", slices.count.iter().filter(|&&c| c == 0).count());
    }
    let n = w_n.max(1) as f64;
    let m = w_sum / n;
    let peculiar_variance = w_sq / n - m.component_mul(&m);
    let series: Vec<Mat3> = stress_series.iter().map(|x| x.1).collect();
    let stress = StressReport::from_series(&series, cfg.s);
    Ok(ShearRun { slices, stress, dist_series, stress_series, peculiar_variance, system: sys })
}

/// Viscosity from a through-origin fit `σ12 = -η s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViscosityFit {
    pub eta: f64,
    pub stderr: f64,
    pub points: usize,
}

/// Fit η over `(s, ⟨σ12⟩)` pairs, one per run. The standard error comes
/// from the scatter of the runs about the fitted line.
pub fn estimate_viscosity(points: &[(f64, f64)]) -> Result<ViscosityFit> {
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let distinct = {
        let mut s: Vec<f64> = points.iter().map(|p| p.0).collect();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s.len()
    };
    if sxx == 0.0 || distinct < 2 {
        return Err(Error::InsufficientData("viscosity fit needs at least two strain rates, one nonzero".into()));
    }
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let eta = -sxy / sxx;
    let n = points.len();
    let stderr = if n > 1 {
        let rss: f64 = points.iter().map(|p| (p.1 + eta * p.0).powi(2)).sum();
        (rss / (n - 1) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(ViscosityFit { eta, stderr, points: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn brute_image(d: &Vec3, l: f64, off: f64) -> Vec3 {
        let mut best = Vec3::zeros();
        let mut best_r2 = f64::INFINITY;
        for n in -3..=3 {
            for m in -3..=3 {
                for k in -3..=3 {
                    let (n, m, k) = (n as f64, m as f64, k as f64);
                    let v = Vec3::new(d.x - n * off - m * l, d.y - n * l, d.z - k * l);
                    if v.norm_squared() < best_r2 {
                        best_r2 = v.norm_squared();
                        best = v;
                    }
                }
            }
        }
        best
    }

    #[test]
    fn shifted_lj_constants() {
        let p = LjShifted::new(1.0, 2.6).unwrap();
        assert!((p.c1 + 2.9687e-2).abs() < 5e-6, "c1 = {}", p.c1);
        assert!((p.c2 - 9.0093e-2).abs() < 1e-5, "c2 = {}", p.c2);
        // independent route: finite-difference slope of the raw kernel
        let raw = |r: f64| 4.0 * (r.powi(-12) - r.powi(-6));
        let h = 1e-5;
        let slope = (raw(2.6 + h) - raw(2.6 - h)) / (2.0 * h);
        assert!((p.c1 + slope).abs() < 1e-9);
        assert!((p.c2 + raw(2.6) + p.c1 * 2.6).abs() < 1e-12);
    }

    #[test]
    fn continuous_at_cutoff() {
        let p = LjShifted::new(1.0, 2.6).unwrap();
        let rc = 2.6 * (1.0 - 1e-15);
        assert!(p.phi(rc).abs() < 1e-12);
        assert!(p.dphi(rc).abs() < 1e-12);
        assert_eq!(p.phi(2.6), 0.0);
        let raw = LjShifted::unshifted(1.0, 2.6).unwrap();
        assert!(raw.dphi(2f64.powf(1.0 / 6.0)).abs() < 1e-12);
        assert!(LjShifted::new(1.0, 0.0).is_err());
    }

    #[test]
    fn min_image_examples() {
        let l = 5.0;
        let d = lees_edwards_min_image(&Vec3::new(0.0, l - 0.1, 0.0), l, 0.3);
        assert!((d - Vec3::new(-0.3, -0.1, 0.0)).norm() < 1e-12);
        let d = lees_edwards_min_image(&Vec3::new(3.0, -4.0, 2.6), l, 0.0);
        assert!((d - Vec3::new(-2.0, 1.0, -2.4)).norm() < 1e-12);
    }

    #[test]
    fn min_image_matches_brute_force() {
        let mut rng = stream(3, "le", 0);
        for _ in 0..2000 {
            let l = rng.random_range(1.0..10.0);
            let off = rng.random_range(0.0..l);
            let d = Vec3::new(rng.random_range(-l..l), rng.random_range(-l..l), rng.random_range(-l..l));
            assert_eq!(lees_edwards_min_image(&d, l, off), brute_image(&d, l, off));
        }
    }

    fn gas_config(n: usize) -> MdConfig {
        let mut cfg = MdConfig::liquid(n, 0.05, 1.0, 1.0);
        cfg.k_slices = 10;
        cfg
    }

    #[test]
    fn wrap_applies_replica_rule() {
        let mut sys = ParticleSystem::new(vec![Vec3::zeros()], vec![Vec3::zeros()], 4.0, 0.1).unwrap();
        sys.t = 2.5; // offset 1.0
        sys.q[0] = Vec3::new(0.5, 2.2, 0.0);
        sys.v[0] = Vec3::new(0.3, 0.0, 0.0);
        let before = sys.v[0] - Vec3::new(sys.s * sys.q[0].y, 0.0, 0.0);
        sys.wrap(0);
        assert!((sys.q[0] - Vec3::new(-0.5, -1.8, 0.0)).norm() < 1e-12);
        assert!((sys.v[0].x - (0.3 - 0.4)).abs() < 1e-12);
        // peculiar velocity is unchanged by the wrap
        assert!((sys.v[0] - sys.flow(0) - before).norm() < 1e-12);
    }

    #[test]
    fn lattice_fills_box() {
        let cfg = gas_config(216);
        let mut rng = stream(1, "lat", 0);
        let sys = ParticleSystem::lattice(&cfg, &mut rng).unwrap();
        let h = sys.l / 2.0;
        assert_eq!(sys.len(), 216);
        assert!(sys.q.iter().all(|p| p.iter().all(|&x| x >= -h && x < h)));
        let mut bad = cfg.clone();
        bad.n = 200;
        assert!(ParticleSystem::lattice(&bad, &mut rng).is_err());
    }

    #[test]
    fn two_particle_virial() {
        let p = LjShifted::new(1.0, 2.6).unwrap();
        let r = 1.3;
        let sys = ParticleSystem::new(vec![Vec3::new(r / 2.0, 0.0, 0.0), Vec3::new(-r / 2.0, 0.0, 0.0)], vec![Vec3::zeros(); 2], 10.0, 0.0)
            .unwrap();
        let f = compute_forces_brute(&sys, &p);
        let vol = 1000.0;
        let sigma = irving_kirkwood_stress(&sys, &f, 1.0, vol);
        let expect = r * (-p.dphi(r)) / vol;
        assert!((sigma[(0, 0)] - expect).abs() < 1e-15);
        for (i, j) in [(0, 1), (0, 2), (1, 2), (1, 0)] {
            assert_eq!(sigma[(i, j)], 0.0);
        }
        assert!((f.forces[0] + f.forces[1]).norm() < 1e-15);
    }

    #[test]
    fn single_particle_stress_is_kinetic() {
        let sys = ParticleSystem::new(vec![Vec3::new(0.1, 0.4, -0.2)], vec![Vec3::new(0.5, -0.3, 0.2)], 6.0, 0.1).unwrap();
        let f = ForceField { forces: vec![Vec3::zeros()], virial: Mat3::zeros(), potential: 0.0 };
        let w = Vec3::new(0.5 - 0.04, -0.3, 0.2);
        let sigma = irving_kirkwood_stress(&sys, &f, 2.0, 216.0);
        assert!((sigma - w * w.transpose() * 2.0 / 216.0).norm() < 1e-15);
    }

    #[test]
    fn cell_list_matches_all_pairs() {
        let mut cfg = gas_config(1000);
        cfg.s = 0.07;
        let mut rng = stream(5, "cells", 0);
        let mut sys = ParticleSystem::lattice(&cfg, &mut rng).unwrap();
        // jitter and shear offset so that pairs straddle the Q2 face
        for i in 0..sys.len() {
            sys.q[i] += normal_vec(&mut rng, 3) * 0.15;
        }
        sys.t = 3.7;
        for i in 0..sys.len() {
            sys.wrap(i);
        }
        let p = LjShifted::new(1.0, 2.6).unwrap();
        let a = compute_forces(&sys, &p);
        let b = compute_forces_brute(&sys, &p);
        assert!(CellList::build(&sys.q, sys.l, 2.6).is_some());
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        for_each_pair(&sys.q, sys.l, sys.offset(), 2.6, false, |i, j, _| pa.push((i, j)));
        for_each_pair(&sys.q, sys.l, sys.offset(), 2.6, true, |i, j, _| pb.push((i, j)));
        pa.sort_unstable();
        assert_eq!(pa, pb);
        // same pairs, different summation order
        let scale = b.forces.iter().map(|f| f.norm()).fold(0.0, f64::max);
        let df = a.forces.iter().zip(&b.forces).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(df < 1e-12 * scale, "{df} vs {scale}");
        assert!((a.potential - b.potential).abs() < 1e-9 * b.potential.abs());
        assert!((a.virial - b.virial).norm() < 1e-9 * b.virial.norm());
    }

    #[test]
    fn images_match_replicated_system() {
        // a pair straddling the Q2 face in a sheared frame, checked against
        // an explicit 3x3x3 replication of the box
        let l = 6.0;
        let mut sys = ParticleSystem::new(vec![Vec3::new(1.2, 2.7, 0.3), Vec3::new(0.0, -2.6, 0.1)], vec![Vec3::zeros(); 2], l, 0.05).unwrap();
        sys.t = 7.0;
        let off = sys.offset();
        let p = LjShifted::new(1.0, 2.6).unwrap();
        let f = compute_forces_brute(&sys, &p);
        let mut expect = Vec3::zeros();
        for n in -1..=1 {
            for m in -1..=1 {
                for k in -1..=1 {
                    let (n, m, k) = (n as f64, m as f64, k as f64);
                    let img = sys.q[1] + Vec3::new(m * l + n * off, n * l, k * l);
                    expect += p.force(&(sys.q[0] - img));
                }
            }
        }
        assert!(expect.norm() > 0.0);
        assert!((f.forces[0] - expect).norm() < 1e-10);
    }

    #[test]
    fn neighbour_list_stays_complete() {
        let cfg = MdConfig::liquid(216, 0.5, 1.0, 1.0);
        let mut rng = stream(12, "list", 0);
        let mut sys = ParticleSystem::lattice(&cfg, &mut rng).unwrap();
        let mut integ = MdIntegrator::new(&cfg, &sys).unwrap();
        for _ in 0..400 {
            md_step(&mut sys, &mut integ, &mut rng).unwrap();
            let b = compute_forces_brute(&sys, &integ.pot);
            let scale = b.forces.iter().map(|f| f.norm()).fold(0.0, f64::max);
            let df = integ.field.forces.iter().zip(&b.forces).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            assert!(df <= 1e-12 * scale, "{df}");
            assert!((integ.field.potential - b.potential).abs() <= 1e-12 * b.potential.abs());
        }
        assert!(integ.rebuilds > 0);
    }

    #[test]
    fn verlet_conserves_energy() {
        let mut cfg = gas_config(216);
        cfg.s = 0.0;
        cfg.gamma = 0.0;
        cfg.sigma = Some(0.0);
        let mut rng = stream(2, "nve", 0);
        let mut sys = ParticleSystem::lattice(&cfg, &mut rng).unwrap();
        let mut integ = MdIntegrator::new(&cfg, &sys).unwrap();
        let e0 = sys.kinetic_energy(1.0) + integ.field.potential;
        let p0 = sys.momentum(1.0);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            md_step(&mut sys, &mut integ, &mut rng).unwrap();
            let e = sys.kinetic_energy(1.0) + integ.field.potential;
            worst = worst.max(((e - e0) / e0).abs());
        }
        assert!(worst < 1e-3, "relative energy drift {worst}");
        assert!((sys.momentum(1.0) - p0).norm() < 1e-10);
    }

    #[test]
    fn blowup_detected() {
        let mut cfg = gas_config(216);
        cfg.dt = 0.5;
        let mut rng = stream(2, "blow", 0);
        let mut sys = ParticleSystem::lattice(&cfg, &mut rng).unwrap();
        sys.v[0] = Vec3::new(10.0, 0.0, 0.0);
        let mut integ = MdIntegrator::new(&cfg, &sys).unwrap();
        assert!(matches!(md_step(&mut sys, &mut integ, &mut rng), Err(Error::Blowup(_))));
    }

    #[test]
    fn ideal_gas_thermostat() {
        let mut cfg = gas_config(64);
        cfg.eps = 0.0;
        cfg.a = 1.5;
        cfg.s = 0.0;
        cfg.t_end = 200.0;
        cfg.burn_in = 5.0;
        let mut rng = stream(4, "gas", 0);
        let run = run_shear_experiment(&cfg, &mut rng).unwrap();
        for c in 0..3 {
            assert!((run.peculiar_variance[c] - 1.0).abs() < 0.05, "{}", run.peculiar_variance);
        }
        // ideal gas pressure N/(β|Ω|)
        let p = 64.0 / cfg.volume();
        let series: Vec<Mat3> = run.stress_series.iter().map(|x| x.1).collect();
        for c in 0..3 {
            let comp: Vec<f64> = series.iter().map(|m| m[(c, c)]).collect();
            let mean = comp.iter().sum::<f64>() / comp.len() as f64;
            let se = batch_stderr(&comp, 20);
            assert!((mean - p).abs() < 3.0 * se + 1e-12, "{c}: {mean} vs {p} ± {se}");
        }
    }

    #[test]
    fn free_particle_diffusion() {
        // D = 1/(βγ) for a single particle with no pair forces
        let mut cfg = gas_config(1);
        cfg.eps = 0.0;
        cfg.s = 0.0;
        cfg.a = 100.0;
        cfg.r_cut = 1.0;
        cfg.dt = 0.05;
        cfg.gamma = 2.0;
        let mut rng = stream(6, "diff", 0);
        let horizon = 20.0;
        let steps = (horizon / cfg.dt) as usize;
        let reps = 1000;
        let mut msd = 0.0;
        for _ in 0..reps {
            let mut sys = ParticleSystem::lattice(&cfg, &mut rng).unwrap();
            let mut integ = MdIntegrator::new(&cfg, &sys).unwrap();
            let mut disp = Vec3::zeros();
            for _ in 0..steps {
                let q0 = sys.q[0];
                md_step(&mut sys, &mut integ, &mut rng).unwrap();
                disp += sys.q[0] - q0;
            }
            msd += disp.norm_squared();
        }
        msd /= reps as f64;
        // exact OU position variance: 2D(t - τ(1 - e^{-t/τ})) per component
        let (d, tau) = (0.5, 0.5);
        let expect = 3.0 * 2.0 * d * (horizon - tau * (1.0 - (-horizon / tau).exp()));
        assert!((msd / expect - 1.0).abs() < 0.1, "{msd} vs {expect}");
    }

    #[test]
    fn slice_examples() {
        let l = 4.0;
        let s = 0.2;
        let mut st = SliceStats::new(8, l, s);
        let q: Vec<Vec3> = (0..8).map(|k| Vec3::new(0.0, -2.0 + 0.25 + 0.5 * k as f64, 0.0)).collect();
        let flow: Vec<Vec3> = q.iter().map(|p| Vec3::new(s * p.y, 0.0, 0.0)).collect();
        st.record(&q, &flow);
        st.record(&q, &flow);
        assert!(st.dist().unwrap() < 1e-15);
        assert!(st.mean_variance().norm() < 1e-15);
        let (slope, _) = st.velocity_slope().unwrap();
        assert!((slope - s).abs() < 1e-12);

        let mut z = SliceStats::new(8, l, s);
        z.record(&q, &[Vec3::zeros(); 8]);
        for k in 0..8 {
            assert!((z.dist_slice(k).unwrap() - (s * z.center(k)).abs()).abs() < 1e-15);
        }
        let rms = ((0..8).map(|k| (s * z.center(k)).powi(2)).sum::<f64>() / 8.0).sqrt();
        assert!((z.dist().unwrap() - rms).abs() < 1e-15);
    }

    #[test]
    fn empty_slices_are_skipped() {
        let mut st = SliceStats::new(4, 4.0, 0.0);
        st.record(&[Vec3::new(0.0, -1.5, 0.0)], &[Vec3::new(0.3, 0.4, 0.0)]);
        assert_eq!(st.mean().iter().filter(|m| m.is_none()).count(), 3);
        assert!((st.dist().unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(st.total(), 1);
    }

    #[test]
    fn viscosity_fit() {
        let pts: Vec<(f64, f64)> = [0.0, 0.02, 0.04, 0.07].iter().map(|&s| (s, -1.2 * s)).collect();
        let fit = estimate_viscosity(&pts).unwrap();
        assert!((fit.eta - 1.2).abs() < 1e-12);
        assert!(fit.stderr < 1e-12);
        assert!(estimate_viscosity(&[(0.0, 0.1), (0.0, -0.1)]).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut cfg = gas_config(27);
        cfg.a = 1.5;
        cfg.r_cut = 2.0;
        cfg.t_end = 0.5;
        let a = run_shear_experiment(&cfg, &mut stream(9, "md", 0)).unwrap();
        let b = run_shear_experiment(&cfg, &mut stream(9, "md", 0)).unwrap();
        assert_eq!(a.system, b.system);
        assert_eq!(a.dist_series, b.dist_series);
    }
}

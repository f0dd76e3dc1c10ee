//! Event-driven mechanical heat bath.
//!
//! A heavy disc/ball of mass M and radius R moves freely and collides
//! elastically with point atoms of mass m. Atoms never interact with each
//! other; between collisions each one follows `q' = v, v' = A v`, so its
//! relative velocity `w = v - A q` is constant. Atoms are drawn from a
//! Poisson field of intensity `λ m^{-1/2}` with `w ~ m^{-1/2} f`.
//!
//! The infinite bath is truncated to a ball whose radius keeps the expected
//! number of atoms that could reach the particle from outside below a
//! tolerance. Atoms whose path cannot come near the particle before the
//! stopping time are discarded as they are drawn.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::analysis::CadlagTrajectory;
use crate::error::{invalid, Error, Result};
use crate::math::{flow_propagator, sphere_area, uniform_direction, StrainRate, Vec3, VelocityLaw};
use crate::quad;

const MULTI_TOL: f64 = 1e-12;
const CONTACT_TOL: f64 = 1e-9;

/// Parameters of the Poisson bath.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathConfig {
    pub lambda: f64,
    pub m: f64,
    pub law: VelocityLaw,
    pub a: StrainRate,
    /// Truncation radius; `None` applies the quantile rule.
    pub domain_radius: Option<f64>,
    pub horizon: f64,
    /// Required bound on the expected number of atoms missed by truncation.
    pub escape_tol: f64,
    /// Quantile of |w| used as the speed cut in the radius rule.
    pub speed_quantile: f64,
    /// Turn fast-partner recollisions into errors.
    pub strict: bool,
    /// Keep the initial atom list in the run output (for replay in tests).
    pub keep_atoms: bool,
}

impl BathConfig {
    pub fn new(lambda: f64, m: f64, law: VelocityLaw, a: StrainRate, horizon: f64) -> Result<Self> {
        if !(lambda >= 0.0 && m > 0.0 && horizon > 0.0) {
            return invalid("need lambda >= 0, m > 0, T > 0");
        }
        if a.dim() != law.dim {
            return invalid("strain rate and velocity law disagree on dimension");
        }
        Ok(Self {
            lambda,
            m,
            law,
            a,
            domain_radius: None,
            horizon,
            escape_tol: 1e-3,
            speed_quantile: 1.0 - 1e-4,
            strict: true,
            keep_atoms: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.law.dim
    }

    /// Atom density λ_m = m^{-1/2} λ.
    pub fn lambda_m(&self) -> f64 {
        self.lambda / self.m.sqrt()
    }

    /// Fast-collision threshold c_m = m^{-1/5}.
    pub fn c_m(&self) -> f64 {
        fast_threshold(self.m)
    }
}

pub fn fast_threshold(m: f64) -> f64 {
    m.powf(-0.2)
}

/// A bath atom anchored at `q0` at time `t_ref`, with relative velocity `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathAtom {
    pub id: usize,
    pub q0: Vec3,
    pub w: Vec3,
    pub t_ref: f64,
    pub alive: bool,
}

impl BathAtom {
    pub fn position(&self, a: &StrainRate, t: f64) -> Vec3 {
        let (e, j) = flow_propagator(a, t - self.t_ref);
        e * self.q0 + j * self.w
    }

    /// Lab-frame velocity `A q + w`.
    pub fn velocity(&self, a: &StrainRate, t: f64) -> Vec3 {
        a.apply(&self.position(a, t)) + self.w
    }
}

/// One elastic collision as seen by the heavy particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionEvent {
    pub t: f64,
    pub atom_id: usize,
    /// Unit normal pointing from the atom to the particle centre.
    pub e_n: Vec3,
    /// Atom normal velocity before the collision.
    pub v_n: f64,
    /// Particle normal velocity before the collision.
    pub big_v_n: f64,
    pub fast: bool,
    /// Particle velocity after the collision.
    pub v_post: Vec3,
    /// Atom velocity after the collision.
    pub atom_v_post: Vec3,
}

impl CollisionEvent {
    /// Momentum handed to the particle, `M |ΔV|`.
    pub fn transfer(&self, mass: f64) -> f64 {
        let dvn = self.v_post.dot(&self.e_n) - self.big_v_n;
        mass * dvn.abs()
    }
}

/// Heavy-particle state of the mechanical process.
#[derive(Debug, Clone, PartialEq)]
pub struct MechState {
    pub q: Vec3,
    pub v: Vec3,
    pub mass: f64,
    pub radius: f64,
    pub t: f64,
    pub c_m: f64,
    pub tau_m: Option<f64>,
    pub events: Vec<CollisionEvent>,
}

impl MechState {
    pub fn new(q: Vec3, v: Vec3, mass: f64, radius: f64, m: f64) -> Result<Self> {
        if !(mass > 0.0 && radius > 0.0) {
            return invalid("particle mass and radius must be positive");
        }
        Ok(Self { q, v, mass, radius, t: 0.0, c_m: fast_threshold(m), tau_m: None, events: Vec::new() })
    }
}

/// Elastic collision of the particle (V, M) with an atom (v, m) along e_n.
pub fn elastic_collision(big_v: &Vec3, v: &Vec3, e_n: &Vec3, mass: f64, m: f64) -> Result<(Vec3, Vec3)> {
    if (e_n.norm() - 1.0).abs() > 1e-12 {
        return invalid(format!("collision normal is not a unit vector (|e| = {})", e_n.norm()));
    }
    let vn_big = big_v.dot(e_n);
    let vn = v.dot(e_n);
    let s = mass + m;
    let vn_big_new = ((mass - m) * vn_big + 2.0 * m * vn) / s;
    let vn_new = (-(mass - m) * vn + 2.0 * mass * vn_big) / s;
    Ok((big_v + e_n * (vn_big_new - vn_big), v + e_n * (vn_new - vn)))
}

/// Spectral-norm growth bound ‖e^{At}‖ ≤ e^{‖A‖t}.
fn growth(a_norm: f64, t: f64) -> f64 {
    (a_norm * t).exp()
}

/// Upper bound on |q(τ) - (p + τu)| over τ ∈ [0, t] for an atom at p with
/// lab velocity u and relative velocity w.
fn curvature_bound(a: &StrainRate, a_norm: f64, p: &Vec3, w: &Vec3, t: f64) -> f64 {
    if a_norm == 0.0 {
        return 0.0;
    }
    if a.is_nilpotent() {
        return 0.5 * t * t * a.apply(w).norm();
    }
    let x = a_norm * t;
    (x.exp_m1() - x) * p.norm() + (x.exp_m1() / a_norm - t) * w.norm()
}

/// Distance from `c` to the segment `p + τu`, τ ∈ [0, t].
fn segment_distance(c: &Vec3, p: &Vec3, u: &Vec3, t: f64) -> f64 {
    let uu = u.norm_squared();
    let tau = if uu == 0.0 { 0.0 } else { ((c - p).dot(u) / uu).clamp(0.0, t) };
    (p + u * tau - c).norm()
}

/// Expected number of atoms outside `r_dom` that could reach the ball of
/// radius `rho` around the origin within the horizon.
pub fn escape_bound(cfg: &BathConfig, r_dom: f64, rho: f64) -> Result<f64> {
    let t = cfg.horizon;
    let an = cfg.a.norm();
    let gr = growth(an, t);
    let d = cfg.dim() as i32;
    let s = sphere_area(cfg.dim());
    let sm = cfg.m.sqrt();
    let integrand = |r: f64| {
        let g = (r / gr - rho) / (t * gr);
        s * r.powi(d - 1) * cfg.law.speed_tail(g * sm)
    };
    if r_dom / gr <= rho {
        return Ok(f64::INFINITY);
    }
    let v = quad::integrate_to_inf(integrand, r_dom, 1e-300, 1e-6)?;
    Ok(cfg.lambda_m() * v)
}

/// Truncation radius and its escape bound for a particle at `q0`.
pub fn domain_radius(cfg: &BathConfig, q0: &Vec3, radius: f64) -> Result<(f64, f64)> {
    let t = cfg.horizon;
    let an = cfg.a.norm();
    let rho = q0.norm() + radius + cfg.c_m() * t / 8.0;
    if let Some(r) = cfg.domain_radius {
        return Ok((r, escape_bound(cfg, r, rho)?));
    }
    if cfg.lambda == 0.0 {
        return Ok((rho, 0.0));
    }
    let v_cut = cfg.law.speed_quantile(cfg.speed_quantile) / cfg.m.sqrt();
    let mut r = q0.norm() + (v_cut + cfg.c_m()) * t * growth(an, t);
    let mut bound = escape_bound(cfg, r, rho)?;
    let mut iter = 0;
    while bound > cfg.escape_tol {
        r *= 1.05;
        bound = escape_bound(cfg, r, rho)?;
        iter += 1;
        if iter > 500 {
            return Err(Error::InvalidParameter("could not meet the escape tolerance".into()));
        }
    }
    Ok((r, bound))
}

fn sample_atoms<R: Rng + ?Sized, P: Fn(f64, &Vec3) -> bool, F: FnMut(&BathAtom) -> bool>(
    cfg: &BathConfig,
    particle: &MechState,
    r_dom: f64,
    rng: &mut R,
    reachable: P,
    mut keep: F,
) -> Result<(Vec<BathAtom>, usize)> {
    let dim = cfg.dim();
    let vol = sphere_area(dim) * r_dom.powi(dim as i32) / dim as f64;
    let mean = cfg.lambda_m() * vol;
    let n = if mean > 0.0 {
        let pois = Poisson::new(mean).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        pois.sample(rng) as usize
    } else {
        0
    };
    let sm = cfg.m.sqrt();
    let inv_dim = 1.0 / dim as f64;
    let mut out = Vec::new();
    for id in 0..n {
        let u: f64 = rng.random();
        let r = if dim == 2 { r_dom * u.sqrt() } else { r_dom * u.powf(inv_dim) };
        let w = cfg.law.sample(rng) / sm;
        // The direction of q0 is only drawn for atoms that pass the cheap
        // radius/speed test.
        if !reachable(r, &w) {
            continue;
        }
        let q0 = uniform_direction(rng, dim) * r;
        if (q0 - particle.q).norm() <= particle.radius {
            continue;
        }
        let atom = BathAtom { id, q0, w, t_ref: particle.t, alive: true };
        if keep(&atom) {
            out.push(atom);
        }
    }
    Ok((out, n))
}

/// Draw the truncated bath around the particle. Atoms overlapping the
/// particle are removed.
pub fn sample_bath<R: Rng + ?Sized>(cfg: &BathConfig, particle: &MechState, rng: &mut R) -> Result<Vec<BathAtom>> {
    let (r_dom, _) = domain_radius(cfg, &particle.q, particle.radius)?;
    Ok(sample_atoms(cfg, particle, r_dom, rng, |_, _| true, |_| true)?.0)
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

fn poly_deriv(c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().skip(1).map(|(k, &v)| k as f64 * v).collect()
}

fn trim(c: &[f64]) -> &[f64] {
    let mut n = c.len();
    while n > 0 && c[n - 1] == 0.0 {
        n -= 1;
    }
    &c[..n]
}

/// Sorted critical points and roots are found recursively: the roots of p'
/// split [lo, hi] into monotone pieces of p.
fn monotone_breaks(c: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let c = trim(c);
    let mut pts = vec![lo];
    if c.len() >= 3 {
        let d = poly_deriv(c);
        pts.extend(poly_roots(&d, lo, hi));
    }
    pts.push(hi);
    pts
}

fn bisect(c: &[f64], mut a: f64, mut b: f64) -> f64 {
    let fa = poly_eval(c, a);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let fm = poly_eval(c, mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (fa > 0.0) {
            a = mid;
        } else {
            b = mid;
        }
    }
    b
}

fn poly_roots(c: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let c = trim(c);
    if c.len() < 2 {
        return Vec::new();
    }
    if c.len() == 2 {
        let x = -c[0] / c[1];
        return if x > lo && x < hi { vec![x] } else { Vec::new() };
    }
    let pts = monotone_breaks(c, lo, hi);
    let mut out = Vec::new();
    for k in 0..pts.len() - 1 {
        let (a, b) = (pts[k], pts[k + 1]);
        let (fa, fb) = (poly_eval(c, a), poly_eval(c, b));
        if fa == 0.0 {
            if a > lo {
                out.push(a);
            }
        } else if (fa > 0.0) != (fb > 0.0) && fb != 0.0 {
            out.push(bisect(c, a, b));
        }
    }
    out
}

/// First τ ∈ [0, hi] at which the polynomial goes from positive to ≤ 0.
fn first_entering_root(c: &[f64], hi: f64) -> Option<f64> {
    let pts = monotone_breaks(c, 0.0, hi);
    for k in 0..pts.len() - 1 {
        let (a, b) = (pts[k], pts[k + 1]);
        let (fa, fb) = (poly_eval(c, a), poly_eval(c, b));
        if fa > 0.0 && fb <= 0.0 {
            return Some(if fb == 0.0 { b } else { bisect(c, a, b) });
        }
    }
    None
}

/// Earliest time in (t0, t_max] at which the atom enters contact with the
/// particle, which moves from `q_p` (at t0) with constant velocity `v_p`.
pub fn next_collision_time(
    a: &StrainRate,
    atom: &BathAtom,
    q_p: &Vec3,
    v_p: &Vec3,
    radius: f64,
    t0: f64,
    t_max: f64,
) -> Option<f64> {
    if !atom.alive || t_max <= t0 {
        return None;
    }
    let span = t_max - t0;
    let p = atom.position(a, t0);
    let u = a.apply(&p) + atom.w;
    let rel0 = p - q_p;
    let relv = u - v_p;
    let an = a.norm();
    let bend = curvature_bound(a, an, &p, &atom.w, span);
    if segment_distance(&Vec3::zeros(), &rel0, &relv, span) - bend > radius {
        return None;
    }
    if a.is_nilpotent() {
        let cc = a.apply(&atom.w) * 0.5;
        let coeffs = [
            rel0.norm_squared() - radius * radius,
            2.0 * rel0.dot(&relv),
            relv.norm_squared() + 2.0 * rel0.dot(&cc),
            2.0 * relv.dot(&cc),
            cc.norm_squared(),
        ];
        if coeffs[0] <= 0.0 && coeffs[1] < 0.0 {
            return Some(t0);
        }
        return first_entering_root(&coeffs, span).map(|tau| t0 + tau).filter(|&t| t >= t0);
    }
    // General A: bracket sign changes on a grid, then bisect.
    let gap = |tau: f64| {
        let (e, j) = flow_propagator(a, tau);
        let q = e * p + j * atom.w;
        (q - q_p - v_p * tau).norm_squared() - radius * radius
    };
    let vmax = growth(an, span) * u.norm();
    let delta = radius / (4.0 * (v_p.norm() + vmax).max(1e-300));
    let g0 = gap(0.0);
    if g0 <= 0.0 && rel0.dot(&relv) < 0.0 {
        return Some(t0);
    }
    let mut lo = 0.0;
    let mut glo = g0;
    while lo < span {
        let hi = (lo + delta).min(span);
        let ghi = gap(hi);
        if glo > 0.0 && ghi <= 0.0 {
            let (mut x, mut y) = (lo, hi);
            for _ in 0..200 {
                let mid = 0.5 * (x + y);
                if mid <= x || mid >= y {
                    break;
                }
                if gap(mid) > 0.0 {
                    x = mid;
                } else {
                    y = mid;
                }
            }
            return Some(t0 + y);
        }
        lo = hi;
        glo = ghi;
    }
    None
}

/// Time τ ≥ 0 after which `‖A‖|Q + τV| + |V|` reaches `limit`, if ever.
pub fn exit_time(an: f64, q: &Vec3, v: &Vec3, limit: f64) -> Option<f64> {
    let slack = limit - v.norm();
    if slack <= 0.0 {
        return Some(0.0);
    }
    if an == 0.0 {
        return None;
    }
    let rho = slack / an;
    let qq = q.norm_squared() - rho * rho;
    if qq >= 0.0 {
        return Some(0.0);
    }
    let vv = v.norm_squared();
    if vv == 0.0 {
        return None;
    }
    let b = q.dot(v);
    Some((-b + (b * b - vv * qq).sqrt()) / vv)
}

/// Counters and checks collected along a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MechDiagnostics {
    pub recollisions: usize,
    pub energy_violations: usize,
    pub max_energy_ratio: f64,
    pub multicollisions: usize,
    pub contact_errors: usize,
}

/// Output of [`run_mechanical`].
#[derive(Debug, Clone)]
pub struct MechRun {
    pub state: MechState,
    /// Samples of (Q, V) at 0, every collision and T. After τ_m the stopped
    /// state is held.
    pub trajectory: CadlagTrajectory,
    pub domain_radius: f64,
    pub escape_bound: f64,
    pub n_sampled: usize,
    pub n_active: usize,
    pub diagnostics: MechDiagnostics,
    pub atoms: Option<Vec<BathAtom>>,
}

fn state_vec(q: &Vec3, v: &Vec3, dim: usize) -> Vec<f64> {
    q.iter().take(dim).chain(v.iter().take(dim)).copied().collect()
}

fn kinetic(particle_v: &Vec3, mass: f64, atoms: &[BathAtom], a: &StrainRate, m: f64, t: f64) -> f64 {
    let mut k = 0.5 * mass * particle_v.norm_squared();
    for at in atoms {
        k += 0.5 * m * at.velocity(a, t).norm_squared();
    }
    k
}

/// Run the mechanical process up to min(T, τ_m).
pub fn run_mechanical<R: Rng + ?Sized>(cfg: &BathConfig, particle: MechState, rng: &mut R) -> Result<MechRun> {
    let dim = cfg.dim();
    let a = cfg.a;
    let an = a.norm();
    let t_end = cfg.horizon;
    let c_m = cfg.c_m();
    let limit = c_m / 8.0;
    let mut st = particle;
    st.c_m = c_m;
    st.t = 0.0;
    let level = an * st.q.norm() + st.v.norm();
    if level >= limit {
        return Err(Error::OutsideRegion { level, limit });
    }
    let (r_dom, bound) = domain_radius(cfg, &st.q, st.radius)?;
    log::info!("bath radius {r_dom:.3}, escape bound {bound:.3e}");
    let reach = st.radius + limit * t_end;
    let q_start = st.q;
    // An atom at distance r with relative speed |w| stays farther than
    // e^{-‖A‖T} r - T e^{‖A‖T} |w| from the origin up to time T.
    let gr = growth(an, t_end);
    let rho = q_start.norm() + reach;
    let reachable = |r: f64, w: &Vec3| r / gr - t_end * gr * w.norm() <= rho;
    let (mut atoms, n_sampled) = sample_atoms(cfg, &st, r_dom, rng, reachable, |at| {
        let u = a.apply(&at.q0) + at.w;
        segment_distance(&q_start, &at.q0, &u, t_end) - curvature_bound(&a, an, &at.q0, &at.w, t_end) <= reach
    })?;
    let initial_atoms = if cfg.keep_atoms { Some(atoms.clone()) } else { None };
    let k0 = kinetic(&st.v, st.mass, &atoms, &a, cfg.m, 0.0);
    let mut diag = MechDiagnostics { max_energy_ratio: 1.0, ..Default::default() };
    let mut fast_partner = vec![false; atoms.len()];
    let mut traj = CadlagTrajectory::new();
    traj.push(0.0, state_vec(&st.q, &st.v, dim), false)?;

    loop {
        let t = st.t;
        let t_tau = exit_time(an, &st.q, &st.v, limit).map(|tau| t + tau);
        let t_stop = t_tau.map_or(t_end, |x| x.min(t_end));
        // Before τ_m the particle stays within limit·(s - t) of its current
        // position, which gives each atom a time before which it cannot
        // touch. Exact solves are done in order of that bound.
        let span = t_stop - t;
        let mut order: Vec<(f64, usize)> = atoms
            .iter()
            .enumerate()
            .filter_map(|(k, at)| {
                let p = at.position(&a, t);
                let u = a.apply(&p) + at.w;
                let gap = (p - st.q).norm() - st.radius - curvature_bound(&a, an, &p, &at.w, span);
                let safe = t + gap.max(0.0) / (u.norm() + limit);
                (safe <= t_stop).then_some((safe, k))
            })
            .collect();
        order.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut hits: Vec<(f64, usize)> = Vec::new();
        let mut t_first = f64::INFINITY;
        for &(safe, k) in &order {
            if safe > t_first + MULTI_TOL {
                break;
            }
            if let Some(tc) = next_collision_time(&a, &atoms[k], &st.q, &st.v, st.radius, t, t_stop) {
                if tc <= t_first + MULTI_TOL {
                    t_first = t_first.min(tc);
                    hits.push((tc, k));
                }
            }
        }
        hits.retain(|&(tc, _)| tc <= t_first + MULTI_TOL);
        if hits.is_empty() || t_first > t_stop {
            st.q += st.v * (t_stop - t);
            st.t = t_stop;
            if t_tau.is_some_and(|x| x <= t_end) {
                st.tau_m = Some(t_stop);
            }
            break;
        }
        st.q += st.v * (t_first - t);
        st.t = t_first;
        hits.sort_by_key(|&(_, k)| atoms[k].id);
        if hits.len() > 1 {
            diag.multicollisions += 1;
            warn!("{} atoms collide within {MULTI_TOL:e} at t = {t_first}; processing by id", hits.len());
        }
        for &(_, k) in &hits {
            let at = atoms[k];
            let p = at.position(&a, t_first);
            let u = a.apply(&p) + at.w;
            let sep = st.q - p;
            let dist = sep.norm();
            if (dist - st.radius).abs() > CONTACT_TOL * st.radius {
                diag.contact_errors += 1;
            }
            let e_n = sep / dist;
            let v_n = u.dot(&e_n);
            let big_v_n = st.v.dot(&e_n);
            if v_n <= big_v_n {
                continue;
            }
            let fast = at.w.dot(&e_n) > c_m;
            if fast_partner[k] {
                diag.recollisions += 1;
                if cfg.strict {
                    return Err(Error::Invariant(format!(
                        "fast partner {} collided again at t = {t_first}",
                        at.id
                    )));
                }
            }
            if fast {
                fast_partner[k] = true;
            }
            let (v_new, u_new) = elastic_collision(&st.v, &u, &e_n, st.mass, cfg.m)?;
            st.v = v_new;
            atoms[k] = BathAtom { id: at.id, q0: p, w: u_new - a.apply(&p), t_ref: t_first, alive: true };
            st.events.push(CollisionEvent {
                t: t_first,
                atom_id: at.id,
                e_n,
                v_n,
                big_v_n,
                fast,
                v_post: v_new,
                atom_v_post: u_new,
            });
        }
        let k_now = kinetic(&st.v, st.mass, &atoms, &a, cfg.m, t_first);
        let ratio = if k0 > 0.0 { k_now / (k0 * (2.0 * an * t_first).exp()) } else { 1.0 };
        diag.max_energy_ratio = diag.max_energy_ratio.max(ratio);
        if ratio > 1.0 + 1e-9 {
            diag.energy_violations += 1;
        }
        traj.push(t_first, state_vec(&st.q, &st.v, dim), true)?;
        if an * st.q.norm() + st.v.norm() >= limit {
            st.tau_m = Some(t_first);
            break;
        }
    }
    traj.push(st.t, state_vec(&st.q, &st.v, dim), false)?;
    if st.t < t_end {
        traj.push(t_end, state_vec(&st.q, &st.v, dim), false)?;
    }
    Ok(MechRun {
        n_active: atoms.len(),
        state: st,
        trajectory: traj,
        domain_radius: r_dom,
        escape_bound: bound,
        n_sampled,
        diagnostics: diag,
        atoms: initial_atoms,
    })
}

/// Share of the momentum transfer carried by slow collisions.
pub fn slow_share(events: &[CollisionEvent], mass: f64) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::InsufficientData("empty event log".into()));
    }
    let mut slow = 0.0;
    let mut total = 0.0;
    for e in events {
        let x = e.transfer(mass);
        total += x;
        if !e.fast {
            slow += x;
        }
    }
    Ok(if total > 0.0 { slow / total } else { 0.0 })
}

/// Diagnostic for the small-mass limit: the share of momentum transfer that
/// is *not* carried by fast collisions, i.e. [`slow_share`]. Vanishes when
/// every collision is fast.
pub fn fast_fraction(events: &[CollisionEvent], mass: f64) -> Result<f64> {
    slow_share(events, mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn zero_cfg(dim: usize) -> BathConfig {
        let law = VelocityLaw::gaussian(1.0, dim).unwrap();
        BathConfig::new(1.0 / 16.0, 1.0, law, StrainRate::zero(dim).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn head_on() {
        let a = StrainRate::zero(3).unwrap();
        let atom = BathAtom { id: 0, q0: Vec3::new(-2.0, 0.0, 0.0), w: Vec3::new(1.0, 0.0, 0.0), t_ref: 0.0, alive: true };
        let t = next_collision_time(&a, &atom, &Vec3::zeros(), &Vec3::zeros(), 1.0, 0.0, 10.0).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        let away = BathAtom { w: Vec3::new(-1.0, 0.0, 0.0), ..atom };
        assert!(next_collision_time(&a, &away, &Vec3::zeros(), &Vec3::zeros(), 1.0, 0.0, 10.0).is_none());
    }

    #[test]
    fn collision_examples() {
        let e = Vec3::new(1.0, 0.0, 0.0);
        let (vb, v) = elastic_collision(&Vec3::zeros(), &e, &e, 1.0, 1.0).unwrap();
        assert!((vb[0] - 1.0).abs() < 1e-15 && v[0].abs() < 1e-15);
        let (vb, v) = elastic_collision(&Vec3::zeros(), &(e * 3.0), &e, 2.0, 1.0).unwrap();
        assert!((vb[0] - 2.0).abs() < 1e-15 && (v[0] + 1.0).abs() < 1e-15);
        let (vb, v) = elastic_collision(&Vec3::new(0.5, 0.2, 0.0), &Vec3::new(3.0, -1.0, 0.0), &e, 1.0, 1e-12).unwrap();
        assert!((vb[0] - 0.5).abs() < 1e-10 && (v[0] - (2.0 * 0.5 - 3.0)).abs() < 1e-10);
        assert_eq!(vb[1], 0.2);
        assert!(elastic_collision(&Vec3::zeros(), &e, &(e * 2.0), 1.0, 1.0).is_err());
    }

    #[test]
    fn poisson_mean() {
        // Ball of area 16 at λ = 1/16, m = 1: one atom on average.
        let mut cfg = zero_cfg(2);
        let r = (16.0 / std::f64::consts::PI).sqrt();
        cfg.domain_radius = Some(r);
        let p = MechState::new(Vec3::new(100.0, 0.0, 0.0), Vec3::zeros(), 1.0, 1.0, 1.0).unwrap();
        let mut g = rng::stream(3, "bath", 0);
        let n = 20000;
        let total: usize = (0..n).map(|_| sample_bath(&cfg, &p, &mut g).unwrap().len()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 1.0).abs() < 4.0 * (1.0 / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn no_overlap_after_sampling() {
        let mut cfg = zero_cfg(3);
        cfg.domain_radius = Some(4.0);
        cfg.lambda = 2.0;
        let p = MechState::new(Vec3::zeros(), Vec3::zeros(), 1.0, 2.0, 1.0).unwrap();
        let mut g = rng::stream(4, "bath", 0);
        let atoms = sample_bath(&cfg, &p, &mut g).unwrap();
        assert!(!atoms.is_empty());
        assert!(atoms.iter().all(|a| a.q0.norm() > 2.0));
    }

    #[test]
    fn empty_bath_is_free_flight() {
        let law = VelocityLaw::gaussian(1.0, 2).unwrap();
        let cfg = BathConfig::new(0.0, 1e-3, law, StrainRate::shear(2, 0.1).unwrap(), 1.0).unwrap();
        let p = MechState::new(Vec3::zeros(), Vec3::new(0.1, 0.05, 0.0), 6.0, 2.0, 1e-3).unwrap();
        let run = run_mechanical(&cfg, p, &mut rng::stream(1, "bath", 0)).unwrap();
        assert!(run.state.events.is_empty());
        assert!((run.state.q - Vec3::new(0.1, 0.05, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn polynomial_roots() {
        // (x-1)(x-2)(x-3)(x-4)
        let c = [24.0, -50.0, 35.0, -10.0, 1.0];
        let r = poly_roots(&c, 0.0, 5.0);
        assert_eq!(r.len(), 4);
        for (k, x) in r.iter().enumerate() {
            assert!((x - (k + 1) as f64).abs() < 1e-12);
        }
        assert!((first_entering_root(&c, 5.0).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = c.iter().map(|x| -x).collect();
        assert!((first_entering_root(&neg, 5.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn shear_root_matches_fine_grid() {
        let a = StrainRate::shear(3, 0.5).unwrap();
        let mut g = rng::stream(9, "roots", 0);
        let mut checked = 0;
        for _ in 0..200 {
            let q0 = Vec3::new(g.random_range(-4.0..4.0), g.random_range(-4.0..4.0), g.random_range(-1.0..1.0));
            if q0.norm() <= 1.0 {
                continue;
            }
            let w = Vec3::new(g.random_range(-3.0..3.0), g.random_range(-3.0..3.0), g.random_range(-1.0..1.0));
            let vp = Vec3::new(0.2, -0.1, 0.0);
            let atom = BathAtom { id: 0, q0, w, t_ref: 0.0, alive: true };
            let got = next_collision_time(&a, &atom, &Vec3::zeros(), &vp, 1.0, 0.0, 2.0);
            // brute force
            let dt = 1e-6;
            let mut found = None;
            let mut prev = (atom.position(&a, 0.0)).norm() - 1.0;
            let n = (2.0 / dt) as usize;
            for k in 1..=n {
                let t = k as f64 * dt;
                let cur = (atom.position(&a, t) - vp * t).norm() - 1.0;
                if prev > 0.0 && cur <= 0.0 {
                    found = Some(t);
                    break;
                }
                prev = cur;
            }
            match (got, found) {
                (Some(x), Some(y)) => {
                    assert!((x - y).abs() < 1e-6, "{x} vs {y}");
                    checked += 1;
                }
                (None, None) => {}
                (x, y) => panic!("mismatch {x:?} vs {y:?}"),
            }
            if checked >= 10 {
                break;
            }
        }
        assert!(checked >= 3);
    }

    #[test]
    fn general_flow_root() {
        let a = StrainRate::new(2, &[0.2, 0.3, 0.1, -0.2]).unwrap();
        let atom = BathAtom { id: 0, q0: Vec3::new(-3.0, 0.5, 0.0), w: Vec3::new(2.0, 0.0, 0.0), t_ref: 0.0, alive: true };
        let t = next_collision_time(&a, &atom, &Vec3::zeros(), &Vec3::zeros(), 1.0, 0.0, 3.0).unwrap();
        assert!(((atom.position(&a, t)).norm() - 1.0).abs() < 1e-9);
        let dt = 1e-5;
        let mut k = 0;
        while atom.position(&a, k as f64 * dt).norm() > 1.0 {
            k += 1;
        }
        assert!((k as f64 * dt - t).abs() < 2e-5);
    }

    #[test]
    fn share_arithmetic() {
        let e = Vec3::new(1.0, 0.0, 0.0);
        let mk = |dv: f64, fast: bool| CollisionEvent {
            t: 0.0,
            atom_id: 0,
            e_n: e,
            v_n: 0.0,
            big_v_n: 0.0,
            fast,
            v_post: e * dv,
            atom_v_post: Vec3::zeros(),
        };
        let ev = [mk(1.0, false), mk(3.0, true)];
        assert!((slow_share(&ev, 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(slow_share(&[mk(1.0, true)], 1.0).unwrap(), 0.0);
        assert!(fast_fraction(&[], 1.0).is_err());
    }
}

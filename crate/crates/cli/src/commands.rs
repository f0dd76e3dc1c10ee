use std::path::{Path, PathBuf};

use neld::analysis::CadlagTrajectory;
use neld::converge::{converge as run_converge, ConvergeRow};
use neld::heatbath::{run_mechanical, BathConfig, CollisionEvent, MechState};
use neld::markov::{run_markov, JumpLaw};
use neld::math::normal_vec;
use neld::md::{run_shear_experiment, ShearRun};
use neld::rng::stream;
use neld::sde::{
    coefficients_from_bath, fdr_check, laminar_limit_coefficients, step_neld, step_neld_a, step_neld_em,
    LaminarVariant, NeldCoefficients, SdeState,
};
use neld::Mat3;
use rayon::prelude::*;

use crate::config::{BathSection, CoeffsSection, ConvergeSection, MarkovSection, MdSection, Scheme, SdeSection};
use crate::Failure;

pub struct Context {
    pub seed: u64,
    pub out: PathBuf,
    pub replicas: u64,
}

impl Context {
    /// Run `f` for every replica in parallel, results in replica order.
    fn each<T: Send>(&self, f: impl Fn(u64) -> Result<T, Failure> + Sync) -> Result<Vec<T>, Failure> {
        (0..self.replicas).into_par_iter().map(|r| f(r).map_err(|e| e.context(format!("replica {r}")))).collect()
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::from(e).context(path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn names(prefix: &str, dim: usize) -> impl Iterator<Item = String> + '_ {
    (1..=dim).map(move |i| format!("{prefix}{i}"))
}

fn trajectory_header(dim: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(names("Q", dim));
    h.extend(names("V", dim));
    h.push("jump".into());
    h
}

fn write_trajectory(path: &Path, tr: &CadlagTrajectory, dim: usize) -> Result<(), Failure> {
    let rows = (0..tr.len()).map(|k| {
        let mut row = vec![num(tr.times[k])];
        row.extend(tr.values[k].iter().map(|&x| num(x)));
        row.push(u8::from(tr.jumps[k]).to_string());
        row
    });
    write_csv(path, &trajectory_header(dim), rows)
}

fn write_events(path: &Path, events: &[CollisionEvent], dim: usize) -> Result<(), Failure> {
    let mut h = vec!["t".to_string(), "atom_id".into()];
    h.extend(names("e", dim));
    h.extend(["v_n".into(), "V_n".into(), "fast".into()]);
    h.extend(names("V", dim).map(|n| n + "_post"));
    let rows = events.iter().map(|ev| {
        let mut row = vec![num(ev.t), ev.atom_id.to_string()];
        row.extend(ev.e_n.iter().take(dim).map(|&x| num(x)));
        row.extend([num(ev.v_n), num(ev.big_v_n), u8::from(ev.fast).to_string()]);
        row.extend(ev.v_post.iter().take(dim).map(|&x| num(x)));
        row
    });
    write_csv(path, &h, rows)
}

fn print_matrix(name: &str, m: &Mat3) {
    println!("{name} =");
    for i in 0..3 {
        println!("  [{}, {}, {}]", m[(i, 0)], m[(i, 1)], m[(i, 2)]);
    }
}

pub fn coeffs(sec: &CoeffsSection) -> Result<(), Failure> {
    let (p, _, _) = sec.setup()?;
    let c = coefficients_from_bath(p.lambda, &p.law()?, p.radius, p.mass, p.strain()?)?;
    println!("gamma = {}", c.gamma);
    println!("sigma = {}", c.sigma);
    println!("fdr_residual = {:e}", fdr_check(&c, p.beta));
    if p.dim == 3 {
        for variant in [LaminarVariant::Single, LaminarVariant::Triple] {
            let lc = laminar_limit_coefficients(variant, p.lambda, p.radius, p.beta)?;
            println!("laminar {variant}: flow_factor = {}", lc.flow_factor);
            print_matrix("  gamma", &lc.gamma_matrix);
            print_matrix("  sigma", &lc.sigma_matrix);
            print_matrix("  anisotropy", &lc.anisotropy(p.beta));
        }
    } else {
        log::info!("laminar limits are only defined for dim = 3");
    }
    Ok(())
}

pub fn sde_run(ctx: &Context, sec: &SdeSection) -> Result<(), Failure> {
    let (p, q0, v0) = sec.setup()?;
    sec.check()?;
    let bath = coefficients_from_bath(p.lambda, &p.law()?, p.radius, p.mass, p.strain()?)?;
    let gamma = sec.gamma.unwrap_or(bath.gamma);
    let sigma = match (sec.gamma, sec.sigma) {
        (_, Some(s)) => s,
        (Some(g), None) => (2.0 * g / p.beta).sqrt(),
        (None, None) => bath.sigma,
    };
    let c = NeldCoefficients::new(gamma, sigma, p.mass, p.radius, p.strain()?)?;
    let steps = (sec.t_end / sec.dt).round() as usize;
    let step = match sec.scheme {
        Scheme::Neld => step_neld,
        Scheme::NeldA => step_neld_a,
        Scheme::EulerMaruyama => step_neld_em,
    };
    ctx.each(|r| {
        let mut rng = stream(ctx.seed, "sde", r);
        let mut st = SdeState::new(q0, v0);
        let mut tr = CadlagTrajectory::new();
        let sample = |s: &SdeState| s.q.iter().take(p.dim).chain(s.v.iter().take(p.dim)).copied().collect();
        tr.push(0.0, sample(&st), false)?;
        for k in 1..=steps {
            st = step(&st, &c, sec.dt, &normal_vec(&mut rng, p.dim));
            if !(st.q.iter().chain(st.v.iter()).all(|x| x.is_finite())) {
                return Err(Failure { code: Failure::BLOWUP, message: format!("non-finite state at t = {}", st.t) });
            }
            if k % sec.record_every == 0 || k == steps {
                tr.push(st.t, sample(&st), false)?;
            }
        }
        write_trajectory(&ctx.out.join(format!("sde_{r}.csv")), &tr, p.dim)
    })?;
    println!("sde-run: {} replica(s), {steps} steps, gamma = {gamma}, sigma = {sigma}", ctx.replicas);
    Ok(())
}

pub fn bath_run(ctx: &Context, sec: &BathSection) -> Result<(), Failure> {
    let (p, q0, v0) = sec.setup()?;
    sec.check()?;
    let mut cfg = BathConfig::new(p.lambda, sec.m, p.law()?, p.strain()?, sec.t_end)?;
    cfg.domain_radius = sec.domain_radius;
    cfg.escape_tol = sec.escape_tol;
    cfg.strict = sec.strict;
    let lines = ctx.each(|r| {
        let particle = MechState::new(q0, v0, p.mass, p.radius, sec.m)?;
        let run = run_mechanical(&cfg, particle, &mut stream(ctx.seed, "bath", r))?;
        log::info!(
            "replica {r}: domain radius {}, escape bound {:e}, {} atoms sampled",
            run.domain_radius,
            run.escape_bound,
            run.n_sampled
        );
        write_trajectory(&ctx.out.join(format!("bath_{r}.csv")), &run.trajectory, p.dim)?;
        write_events(&ctx.out.join(format!("events_{r}.csv")), &run.state.events, p.dim)?;
        let d = &run.diagnostics;
        Ok(format!(
            "replica {r}: {} collisions, tau_m = {}, recollisions = {}, escape bound = {:e}",
            run.state.events.len(),
            run.state.tau_m.map_or("none".to_string(), num),
            d.recollisions,
            run.escape_bound
        ))
    })?;
    lines.iter().for_each(|l| println!("{l}"));
    Ok(())
}

pub fn markov_run(ctx: &Context, sec: &MarkovSection) -> Result<(), Failure> {
    let (p, q0, v0) = sec.setup()?;
    sec.check()?;
    let law = JumpLaw::new(p.lambda, sec.m, p.law()?, p.strain()?, p.mass, p.radius)?;
    let lines = ctx.each(|r| {
        let run = run_markov(&law, q0, v0, sec.t_end, &mut stream(ctx.seed, "markov", r))?;
        write_trajectory(&ctx.out.join(format!("markov_{r}.csv")), &run.trajectory, p.dim)?;
        Ok(format!(
            "replica {r}: {} jumps, stopped at {}",
            run.jumps.len(),
            run.stopped_at.map_or("none".to_string(), num)
        ))
    })?;
    lines.iter().for_each(|l| println!("{l}"));
    Ok(())
}

fn write_md(dir: &Path, run: &ShearRun) -> Result<(), Failure> {
    let st = &run.slices;
    let mean = st.mean();
    let var = st.variance();
    let opt3 = |v: Option<neld::Vec3>| -> Vec<String> {
        match v {
            Some(v) => v.iter().map(|&x| num(x)).collect(),
            None => vec![String::new(); 3],
        }
    };
    let mut header = vec!["slice_index".to_string(), "Q2_center".into()];
    header.extend(names("meanV", 3));
    header.extend(names("varV", 3));
    header.push("dist".into());
    let rows = (0..st.k).map(|k| {
        let mut row = vec![k.to_string(), num(st.center(k))];
        row.extend(opt3(mean[k]));
        row.extend(opt3(var[k]));
        row.push(st.dist_slice(k).map_or(String::new(), num));
        row
    });
    write_csv(&dir.join("slices.csv"), &header, rows)?;

    let mut header = vec!["t".to_string()];
    header.extend((1..=3).flat_map(|i| (1..=3).map(move |j| format!("sigma{i}{j}"))));
    let rows = run.stress_series.iter().map(|(t, s)| {
        let mut row = vec![num(*t)];
        row.extend((0..3).flat_map(|i| (0..3).map(move |j| num(s[(i, j)]))));
        row
    });
    write_csv(&dir.join("stress.csv"), &header, rows)?;

    let rows = run.dist_series.iter().map(|&(t, d)| vec![num(t), num(d)]);
    write_csv(&dir.join("dist.csv"), &["t".to_string(), "dist".into()], rows)
}

pub fn md_run(ctx: &Context, sec: &MdSection) -> Result<(), Failure> {
    let cfg = sec.to_config(ctx.seed)?;
    let lines = ctx.each(|r| {
        let dir = if ctx.replicas > 1 { ctx.out.join(format!("replica_{r}")) } else { ctx.out.clone() };
        std::fs::create_dir_all(&dir)?;
        let run = run_shear_experiment(&cfg, &mut stream(ctx.seed, "md", r))?;
        write_md(&dir, &run)?;
        let slope = run.slices.velocity_slope().map_or("n/a".to_string(), |(b, se)| format!("{b} ± {se}"));
        let eta = run.stress.eta.map_or("n/a".to_string(), num);
        let w = run.peculiar_variance;
        Ok(format!(
            "replica {r}: velocity slope {slope}, sigma12 = {} ± {}, eta = {eta}, var(V - AQ) = ({}, {}, {})",
            run.stress.sigma12, run.stress.stderr, w.x, w.y, w.z
        ))
    })?;
    lines.iter().for_each(|l| println!("{l}"));
    Ok(())
}

fn converge_rows(rows: &[ConvergeRow]) -> Vec<Vec<String>> {
    let opt = |x: Option<f64>| x.map_or(String::new(), num);
    rows.iter()
        .map(|r| {
            let d = r.diagnostics.as_ref();
            vec![
                r.level.to_string(),
                num(r.m),
                r.paths.to_string(),
                r.stopped.to_string(),
                num(r.error),
                num(r.z_velocity),
                num(r.z_state),
                opt(r.skorokhod_fast),
                opt(r.slow_share),
                d.map_or(String::new(), |d| d.recollisions.to_string()),
            ]
        })
        .collect()
}

pub fn converge(ctx: &Context, sec: &ConvergeSection) -> Result<(), Failure> {
    let cfg = sec.to_config(ctx.seed)?;
    if ctx.replicas > 1 {
        log::warn!("converge sets its ensemble size with `paths`; --replicas is ignored");
    }
    let rows = run_converge(&cfg)?;
    let header: Vec<String> = [
        "level",
        "m",
        "paths",
        "stopped",
        "error",
        "z_velocity",
        "z_state",
        "skorokhod_fast",
        "slow_share",
        "recollisions",
    ]
    .map(String::from)
    .to_vec();
    let table = converge_rows(&rows);
    println!("{}", header.join("\t"));
    for row in &table {
        println!("{}", row.join("\t"));
    }
    write_csv(&ctx.out.join("converge.csv"), &header, table)
}

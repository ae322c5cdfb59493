use std::f64::consts::TAU;

use anyhow::{bail, Context, Result};
use mdist_core::characters::{family_average_traced, weyl_discrepancy_traced, FamilySpec};
use mdist_core::density::{
    convolve, curve_measure_with, histogram, reconstruct_density, support_radius, GridDensity,
    ReconstructOptions, AUTO_EXTENT_FACTOR,
};
use mdist_core::injectivity::radius_report;
use mdist_core::localgf::{g_local, series_oracle, Convention, GParams};
use mdist_core::primesys::{enumerate_sites, primes_up_to, NumberField, PrimeSite, PrimeSystem};
use mdist_core::torus::{mc_average, quad_average, tail_bound, Functional};
use num_complex::Complex64;
use serde::Serialize;
use serde_json::json;

use crate::manifest::Run;
use crate::{
    AverageArgs, AverageMethod, DensityArgs, DensityMethod, FamilyArgs, GArgs, GlobalArgs,
    GvaluesArgs, MomentsArgs, RadiusArgs, SitesArgs, TailboundArgs, VerifyArgs, WeylArgs,
};

const ORACLE_NORMS: [u64; 4] = [2, 3, 5, 7];
const ORACLE_SIGMAS: [f64; 3] = [1.2, 2.0, 3.0];
const ORACLE_TOL: f64 = 1e-10;

fn convention_notice(run: &mut Run, convention: Convention, order: u32) {
    if convention == Convention::PaperSquared && order >= 2 {
        run.warn(format!(
            "the squared-factorial convention (k!)^2 S(m,k) does not match the term-by-term \
             differentiated series for m = {order}; use --convention derived for the series-consistent map"
        ));
    }
}

fn g_params(run: &mut Run, g: &GArgs) -> Result<GParams> {
    convention_notice(run, g.convention, g.order);
    g.params()
}

/// Writes `value` as JSON to `--out` (with manifest), or to stdout.
fn emit<T: Serialize>(global: &GlobalArgs, run: &Run, value: &T, human: impl FnOnce() -> String) -> Result<()> {
    if let Some(path) = &global.out {
        run.finish_file(path, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        })?;
    }
    if global.json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else if global.out.is_none() {
        print!("{}", human());
    }
    Ok(())
}

fn system_for(field: NumberField, cutoff: f64) -> Result<PrimeSystem> {
    let system = enumerate_sites(field, cutoff);
    if system.is_empty() {
        bail!("no prime sites with norm <= {cutoff}");
    }
    Ok(system)
}

pub fn sites(global: &GlobalArgs, a: &SitesArgs) -> Result<()> {
    let run = Run::new("sites", a);
    let system = enumerate_sites(a.field.field()?, a.cutoff);
    emit(global, &run, &system.sites, || {
        let mut s = String::from("residue_prime  norm\n");
        for site in &system.sites {
            s += &format!("{:>13}  {}\n", site.residue_prime, site.norm);
        }
        s
    })
}

fn smallest_prime_factor(n: u64) -> u64 {
    (2..).take_while(|d| d * d <= n).find(|d| n % d == 0).unwrap_or(n)
}

pub fn gvalues(global: &GlobalArgs, a: &GvaluesArgs) -> Result<()> {
    let mut run = Run::new("gvalues", a);
    let params = g_params(&mut run, &a.g)?;
    let p = smallest_prime_factor(a.norm);
    let mut n = a.norm;
    while n % p == 0 {
        n /= p;
    }
    if n != 1 {
        bail!("norm {} is not a prime power", a.norm);
    }
    let site = PrimeSite::new(p, a.norm);

    #[derive(Serialize)]
    struct Row {
        theta: f64,
        re: f64,
        im: f64,
    }
    let rows = (0..a.angles)
        .map(|k| {
            let theta = TAU * k as f64 / a.angles as f64;
            let v = g_local(&site, &params, Complex64::from_polar(1.0, theta))?;
            Ok(Row { theta, re: v.re, im: v.im })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = json!({
        "norm": a.norm,
        "residue_prime": p,
        "sigma": params.sigma,
        "order": params.order_m,
        "convention": params.convention,
        "imag_t": params.imag_t,
        "values": rows,
    });
    emit(global, &run, &out, || {
        let mut s = String::from("theta                   re                      im\n");
        for r in &rows {
            s += &format!("{:<22.16e}  {:<22.16e}  {:.16e}\n", r.theta, r.re, r.im);
        }
        s
    })
}

#[derive(Debug, Serialize)]
struct VerifyRow {
    order: u32,
    convention: Convention,
    max_rel_err: f64,
    pass: bool,
}

fn oracle_max_rel_err(order: u32, convention: Convention, angles: u32) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &norm in &ORACLE_NORMS {
        let site = PrimeSite::rational(norm);
        for &sigma in &ORACLE_SIGMAS {
            let params = GParams::new(sigma, order, convention)?;
            for k in 0..angles {
                let t = Complex64::from_polar(1.0, TAU * k as f64 / angles as f64);
                let g = g_local(&site, &params, t)?;
                let s = series_oracle(&site, &params, t, 1e-15)?;
                worst = worst.max((g - s).norm() / s.norm());
            }
        }
    }
    Ok(worst)
}

pub fn verify_derivative(global: &GlobalArgs, a: &VerifyArgs) -> Result<()> {
    let run = Run::new("verify-derivative", a);
    let mut rows = Vec::new();
    for order in 1..=a.max_order {
        for convention in [Convention::DerivedSingle, Convention::PaperSquared] {
            let err = oracle_max_rel_err(order, convention, a.angles)?;
            rows.push(VerifyRow {
                order,
                convention,
                max_rel_err: err,
                pass: err < ORACLE_TOL,
            });
        }
    }
    emit(global, &run, &rows, || {
        let mut s = format!("{:<6} {:<11} {:<12} status\n", "order", "convention", "max_rel_err");
        for r in &rows {
            s += &format!(
                "{:<6} {:<11} {:<12.3e} {}\n",
                r.order,
                r.convention.to_string(),
                r.max_rel_err,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
        s
    })?;
    let failed: Vec<u32> = rows
        .iter()
        .filter(|r| r.convention == Convention::DerivedSingle && !r.pass)
        .map(|r| r.order)
        .collect();
    if !failed.is_empty() {
        bail!("derived convention disagrees with the series at orders {failed:?}");
    }
    Ok(())
}

pub fn average(global: &GlobalArgs, a: &AverageArgs) -> Result<()> {
    let mut run = Run::new("average", a);
    let params = g_params(&mut run, &a.g)?;
    let system = system_for(a.field.field()?, a.cutoff)?;
    let (value, stderr, n) = match a.method {
        AverageMethod::Mc => {
            run.seed = Some(a.seed);
            let e = mc_average(&system, &params, &a.functional, a.samples, a.seed)?;
            (e.value, e.stderr, e.n_samples)
        }
        AverageMethod::Quad => {
            let v = quad_average(&system, &params, &a.functional, a.nodes as usize)?;
            (v, 0.0, a.nodes.pow(system.len() as u32))
        }
    };
    let out = json!({
        "value_re": value.re,
        "value_im": value.im,
        "stderr": stderr,
        "n": n,
        "seed": a.seed,
        "method": a.method,
        "n_sites": system.len(),
    });
    emit(global, &run, &out, || {
        format!(
            "{} over {} sites: {:.12e} {:+.12e}i  (stderr {:.3e}, n = {n})\n",
            a.functional,
            system.len(),
            value.re,
            value.im,
            stderr
        )
    })
}

pub fn tailbound(global: &GlobalArgs, a: &TailboundArgs) -> Result<()> {
    let mut run = Run::new("tailbound", a);
    let params = g_params(&mut run, &a.g)?;
    let bound = tail_bound(a.field.field()?, &params, a.cutoff)?;
    let out = json!({
        "bound": bound,
        "cutoff": a.cutoff,
        "sigma": params.sigma,
        "order": params.order_m,
        "convention": params.convention,
    });
    emit(global, &run, &out, || format!("tail bound beyond y = {}: {bound:.12e}\n", a.cutoff))
}

fn density_for(run: &mut Run, a: &DensityArgs, system: &PrimeSystem, params: &GParams) -> Result<GridDensity> {
    Ok(match a.method {
        DensityMethod::Charfn => {
            let opts = ReconstructOptions {
                extent: a.extent,
                smoothing: a.smoothing,
                ..ReconstructOptions::with_grid(a.grid)
            };
            reconstruct_density(system, params, &opts)?
        }
        DensityMethod::Histogram => {
            run.seed = Some(a.seed);
            histogram(system, params, a.samples, a.seed, a.grid, a.extent)?
        }
        DensityMethod::Convolve => {
            let extent = a
                .extent
                .unwrap_or_else(|| AUTO_EXTENT_FACTOR * support_radius(system, params));
            let bandwidth = a.bandwidth_cells * 2.0 * extent / a.grid as f64;
            let mut acc: Option<GridDensity> = None;
            for site in &system.sites {
                let curve = curve_measure_with(site, params, a.curve_nodes as usize)?;
                let g = curve.rasterize(a.grid, extent, bandwidth)?;
                acc = Some(match acc {
                    None => g,
                    Some(prev) => convolve(&prev, &g)?,
                });
            }
            run.note("bandwidth", bandwidth);
            acc.context("empty prime system")?
        }
    })
}

pub fn density(global: &GlobalArgs, a: &DensityArgs) -> Result<()> {
    let mut run = Run::new("density", a);
    let params = g_params(&mut run, &a.g)?;
    let system = system_for(a.field.field()?, a.cutoff)?;
    let g = density_for(&mut run, a, &system, &params)?;
    let d = &g.diagnostics;
    for w in &d.warnings {
        run.warn(w.clone());
    }
    if d.min_value < 0.0 {
        run.warn(format!(
            "clipped negative ringing: min value {:.3e}, pre-clip mass {:.12}",
            d.min_value, d.pre_clip_mass
        ));
    }
    run.note("n_sites", system.len());
    run.note("extent", g.extent);
    run.note("mass", g.mass);
    run.note("pre_clip_mass", d.pre_clip_mass);
    run.note("min_value", d.min_value);
    run.note("peak", g.peak());
    run.note("reflection_asymmetry", g.reflection_asymmetry());
    run.note("out_of_support_fraction", d.out_of_support_fraction);
    run.note("fft_size", d.fft_size);
    run.note("freq_extent", d.freq_extent);
    run.note("boundary_charfn", d.boundary_charfn);
    match &global.out {
        Some(path) => run.finish_file(path, |w| g.write_csv(w))?,
        None => {
            let stdout = std::io::stdout();
            g.write_csv(stdout.lock())?;
        }
    }
    if global.json {
        eprintln!("{}", serde_json::to_string_pretty(&run.summary)?);
    }
    Ok(())
}

pub fn moments(global: &GlobalArgs, a: &MomentsArgs) -> Result<()> {
    let mut run = Run::new("moments", a);
    let params = g_params(&mut run, &a.g)?;
    let system = system_for(a.field.field()?, a.cutoff)?;
    let g = reconstruct_density(&system, &params, &ReconstructOptions::with_grid(a.grid))?;
    for w in &g.diagnostics.warnings {
        run.warn(w.clone());
    }
    if a.samples > 0 {
        run.seed = Some(a.seed);
    }

    #[derive(Serialize)]
    struct Row {
        a: u32,
        b: u32,
        grid_re: f64,
        grid_im: f64,
        mc_re: Option<f64>,
        mc_im: Option<f64>,
        mc_stderr: Option<f64>,
    }
    let mut rows = Vec::new();
    for deg in 0..=a.max_degree {
        for ea in 0..=deg {
            let eb = deg - ea;
            let gm = g.moment(ea, eb);
            let mc = if a.samples > 0 {
                let f = Functional::Moment { a: ea, b: eb };
                Some(mc_average(&system, &params, &f, a.samples, a.seed)?)
            } else {
                None
            };
            rows.push(Row {
                a: ea,
                b: eb,
                grid_re: gm.re,
                grid_im: gm.im,
                mc_re: mc.map(|e| e.value.re),
                mc_im: mc.map(|e| e.value.im),
                mc_stderr: mc.map(|e| e.stderr),
            });
        }
    }
    run.note("mass", g.mass);
    emit(global, &run, &rows, || {
        let mut s = format!("{:>2} {:>2}  {:>22}  {:>22}  {:>10}\n", "a", "b", "grid (re)", "mc (re)", "mc stderr");
        for r in &rows {
            s += &format!(
                "{:>2} {:>2}  {:>22.12e}  {:>22}  {:>10}\n",
                r.a,
                r.b,
                r.grid_re,
                r.mc_re.map_or("-".into(), |v| format!("{v:.12e}")),
                r.mc_stderr.map_or("-".into(), |v| format!("{v:.3e}")),
            );
        }
        s
    })
}

pub fn radius(global: &GlobalArgs, a: &RadiusArgs) -> Result<()> {
    let mut run = Run::new("radius", a);
    convention_notice(&mut run, a.convention, a.order);
    let report = radius_report(a.order, a.convention, &a.norms)?;
    emit(global, &run, &report, || {
        let mut s = format!(
            "order {} ({}): rho_max = {:.12}\n",
            report.order_m, report.convention, report.rho_max
        );
        for (n, sig) in &report.sigma_min {
            s += &format!("  sigma_min(N = {n}) = {sig:.12}\n");
        }
        s += &format!(
            "  image of |z| = {:.6} is {}\n  critical points:\n",
            report.probe_rho,
            if report.curve_simple { "simple" } else { "self-intersecting" }
        );
        for r in &report.roots {
            s += &format!("    {:+.15e} {:+.15e}i  |z| = {:.15e}\n", r.re, r.im, r.norm());
        }
        s
    })
}

fn family_spec(conductor_max: u64, include_odd: bool) -> FamilySpec {
    FamilySpec {
        even_only: !include_odd,
        ..FamilySpec::new(conductor_max)
    }
}

pub fn family_avg(global: &GlobalArgs, a: &FamilyArgs) -> Result<()> {
    let mut run = Run::new("family-avg", a);
    let params = g_params(&mut run, &a.g)?;
    let system = system_for(NumberField::Rationals, a.cutoff)?;
    let spec = family_spec(a.conductor_max, a.include_odd);
    let (est, trace) = family_average_traced(&spec, &system, &params, &a.functional)?;
    let mut out = json!({
        "value_re": est.value.re,
        "value_im": est.value.im,
        "stderr": est.stderr,
        "n_conductors": trace.len(),
        "n_characters": est.n_samples,
        "conductor_max": a.conductor_max,
    });
    if a.trace {
        out["trace"] = serde_json::to_value(&trace)?;
    }
    emit(global, &run, &out, || {
        format!(
            "{} over {} conductors <= {}: {:.12e} {:+.12e}i  (spread stderr {:.3e})\n",
            a.functional,
            trace.len(),
            a.conductor_max,
            est.value.re,
            est.value.im,
            est.stderr
        )
    })
}

pub fn weyl(global: &GlobalArgs, a: &WeylArgs) -> Result<()> {
    let run = Run::new("weyl", a);
    let k = a.exponents.len();
    let system = match a.cutoff {
        Some(y) => enumerate_sites(NumberField::Rationals, y),
        None => {
            let mut limit = 16u64;
            let p = loop {
                let ps = primes_up_to(limit);
                if ps.len() >= k {
                    break ps[k - 1];
                }
                limit *= 2;
            };
            enumerate_sites(NumberField::Rationals, p as f64)
        }
    };
    let spec = family_spec(a.conductor_max, a.include_odd);
    let (value, trace) = weyl_discrepancy_traced(&spec, &system, &a.exponents)?;
    let mut out = json!({
        "value_re": value.re,
        "value_im": value.im,
        "magnitude": value.norm(),
        "n_conductors": trace.len(),
        "conductor_max": a.conductor_max,
        "norms": system.norms(),
    });
    if a.trace {
        out["trace"] = serde_json::to_value(&trace)?;
    }
    emit(global, &run, &out, || {
        format!(
            "Weyl sum over {} conductors <= {}: {:.12e} {:+.12e}i  |.| = {:.6e}\n",
            trace.len(),
            a.conductor_max,
            value.re,
            value.im,
            value.norm()
        )
    })
}

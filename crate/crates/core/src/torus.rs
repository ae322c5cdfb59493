//! Uniform sampling of the torus of circle variables, the global g-function,
//! torus averages of test functionals, and truncation bounds.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localgf::{g_local_unchecked, GParams, LocalEvaluator, UNIT_TOL};
use crate::primesys::{enumerate_sites, NumberField, PrimeSystem};

/// Samples per reduction chunk. Fixed so that results do not depend on the
/// number of worker threads.
const CHUNK: u64 = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct TorusPoint {
    pub phases: Vec<Complex64>,
}

impl TorusPoint {
    pub fn new(phases: Vec<Complex64>) -> Result<Self> {
        if let Some(bad) = phases.iter().find(|t| (t.norm() - 1.0).abs() > UNIT_TOL) {
            return Err(Error::Domain(format!("phase {bad} is not on the unit circle")));
        }
        Ok(TorusPoint { phases })
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn conj(&self) -> TorusPoint {
        TorusPoint {
            phases: self.phases.iter().map(|t| t.conj()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageEstimate {
    pub value: Complex64,
    pub stderr: f64,
    pub n_samples: u64,
    pub seed: u64,
}

/// Regions for indicator functionals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Region {
    Disc { center: Complex64, radius: f64 },
    Rect { re_min: f64, re_max: f64, im_min: f64, im_max: f64 },
}

impl Region {
    pub fn contains(&self, w: Complex64) -> bool {
        match *self {
            Region::Disc { center, radius } => (w - center).norm() <= radius,
            Region::Rect {
                re_min,
                re_max,
                im_min,
                im_max,
            } => w.re >= re_min && w.re <= re_max && w.im >= im_min && w.im <= im_max,
        }
    }
}

/// The closed catalogue of test functionals exposed by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Functional {
    /// `w^a conj(w)^b`
    Moment { a: u32, b: u32 },
    /// The additive character `exp(i Re(conj(z) w))`.
    Psi { z: Complex64 },
    Indicator { region: Region },
}

impl Functional {
    #[inline]
    pub fn eval(&self, w: Complex64) -> Complex64 {
        match *self {
            Functional::Moment { a, b } => w.powu(a) * w.conj().powu(b),
            Functional::Psi { z } => psi(z, w),
            Functional::Indicator { region } => {
                Complex64::new(if region.contains(w) { 1.0 } else { 0.0 }, 0.0)
            }
        }
    }
}

/// `exp(i Re(conj(z) w))`.
#[inline]
pub fn psi(z: Complex64, w: Complex64) -> Complex64 {
    Complex64::from_polar(1.0, z.re * w.re + z.im * w.im)
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Functional::Moment { a, b } => write!(f, "moment:{a},{b}"),
            Functional::Psi { z } => write!(f, "psi:{},{}", z.re, z.im),
            Functional::Indicator {
                region: Region::Disc { center, radius },
            } => write!(f, "disc:{},{},{}", center.re, center.im, radius),
            Functional::Indicator {
                region:
                    Region::Rect {
                        re_min,
                        re_max,
                        im_min,
                        im_max,
                    },
            } => write!(f, "rect:{re_min},{re_max},{im_min},{im_max}"),
        }
    }
}

impl FromStr for Functional {
    type Err = String;

    /// `moment:a,b`, `psi:re,im`, `disc:re,im,radius`, `rect:re_min,re_max,im_min,im_max`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| format!("functional `{s}` must look like kind:args"))?;
        let nums = |n: usize| -> std::result::Result<Vec<f64>, String> {
            let v: Vec<f64> = args
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            if v.len() != n {
                return Err(format!("`{kind}` takes {n} arguments, got {}", v.len()));
            }
            Ok(v)
        };
        match kind {
            "moment" => {
                let v: Vec<u32> = args
                    .split(',')
                    .map(|x| x.trim().parse::<u32>().map_err(|e| format!("`{x}`: {e}")))
                    .collect::<std::result::Result<_, _>>()?;
                match v.as_slice() {
                    [a, b] => Ok(Functional::Moment { a: *a, b: *b }),
                    _ => Err("moment takes two exponents a,b".into()),
                }
            }
            "psi" => {
                let v = nums(2)?;
                Ok(Functional::Psi {
                    z: Complex64::new(v[0], v[1]),
                })
            }
            "disc" => {
                let v = nums(3)?;
                Ok(Functional::Indicator {
                    region: Region::Disc {
                        center: Complex64::new(v[0], v[1]),
                        radius: v[2],
                    },
                })
            }
            "rect" => {
                let v = nums(4)?;
                Ok(Functional::Indicator {
                    region: Region::Rect {
                        re_min: v[0],
                        re_max: v[1],
                        im_min: v[2],
                        im_max: v[3],
                    },
                })
            }
            other => Err(format!(
                "unknown functional `{other}` (expected moment|psi|disc|rect)"
            )),
        }
    }
}

/// Uniform angles for sample `index`, one per coordinate. The ChaCha block
/// counter makes every (seed, index, coordinate) triple independently addressable.
fn sample_angles(seed: u64, index: u64, dim: usize, out: &mut Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    out.clear();
    for _ in 0..dim {
        // 53 random bits -> [0, 1)
        let bits = rng.next_u64() >> 11;
        out.push(bits as f64 * (1.0 / (1u64 << 53) as f64) * TAU);
    }
}

pub fn sample_torus(system: &PrimeSystem, seed: u64, index: u64) -> TorusPoint {
    let mut angles = Vec::with_capacity(system.len());
    sample_angles(seed, index, system.len(), &mut angles);
    TorusPoint {
        phases: angles
            .into_iter()
            .map(|a| Complex64::from_polar(1.0, a))
            .collect(),
    }
}

pub fn g_global(system: &PrimeSystem, params: &GParams, point: &TorusPoint) -> Result<Complex64> {
    if point.len() != system.len() {
        return Err(Error::Contract(format!(
            "torus point has {} phases but the system has {} sites",
            point.len(),
            system.len()
        )));
    }
    Ok(system
        .sites
        .iter()
        .zip(&point.phases)
        .map(|(site, &t)| g_local_unchecked(site, params, t))
        .sum())
}

/// Streaming mean/variance of complex values (Welford), mergeable.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Moments {
    n: u64,
    mean: Complex64,
    m2: f64,
}

impl Moments {
    pub(crate) fn push(&mut self, x: Complex64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += (d.conj() * (x - self.mean)).re;
    }

    pub(crate) fn merge(self, other: Moments) -> Moments {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * (other.n as f64 / n as f64),
            m2: self.m2 + other.m2 + d.norm_sqr() * (self.n as f64 * other.n as f64 / n as f64),
        }
    }

    pub(crate) fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2.max(0.0) / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

/// Calls `f` with each sample index and its global g-value; chunks are
/// processed in parallel and merged in index order.
pub(crate) fn for_each_sample_chunk<T, F, M>(
    system: &PrimeSystem,
    params: &GParams,
    n: u64,
    seed: u64,
    init: impl Fn() -> T + Sync,
    f: F,
    merge: M,
) -> T
where
    T: Send,
    F: Fn(&mut T, Complex64) + Sync,
    M: Fn(T, T) -> T,
{
    let evals: Vec<LocalEvaluator> = system
        .sites
        .iter()
        .map(|s| LocalEvaluator::new(s, params))
        .collect();
    let n_chunks = n.div_ceil(CHUNK);
    let parts: Vec<T> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            let mut angles = Vec::with_capacity(evals.len());
            for idx in c * CHUNK..((c + 1) * CHUNK).min(n) {
                sample_angles(seed, idx, evals.len(), &mut angles);
                let g: Complex64 = evals
                    .iter()
                    .zip(&angles)
                    .map(|(e, &a)| e.eval_angle(a))
                    .sum();
                f(&mut acc, g);
            }
            acc
        })
        .collect();
    parts.into_iter().fold(init(), merge)
}

/// Monte Carlo average of an arbitrary functional of the global g-value.
pub fn mc_average_with<F>(
    system: &PrimeSystem,
    params: &GParams,
    phi: F,
    n: u64,
    seed: u64,
) -> Result<AverageEstimate>
where
    F: Fn(Complex64) -> Complex64 + Sync,
{
    if n < 2 {
        return Err(Error::Domain("Monte Carlo needs at least 2 samples".into()));
    }
    let m = for_each_sample_chunk(
        system,
        params,
        n,
        seed,
        Moments::default,
        |acc, g| acc.push(phi(g)),
        Moments::merge,
    );
    Ok(AverageEstimate {
        value: m.mean,
        stderr: m.stderr(),
        n_samples: n,
        seed,
    })
}

pub fn mc_average(
    system: &PrimeSystem,
    params: &GParams,
    functional: &Functional,
    n: u64,
    seed: u64,
) -> Result<AverageEstimate> {
    mc_average_with(system, params, |w| functional.eval(w), n, seed)
}

/// Largest system handled by tensor quadrature.
pub const MAX_QUAD_SITES: usize = 3;
pub const MIN_QUAD_NODES: usize = 64;
pub const DEFAULT_QUAD_NODES: usize = 256;

/// Tensor-product periodic trapezoid rule over the torus, `nodes` per axis.
pub fn quad_average_with<F>(
    system: &PrimeSystem,
    params: &GParams,
    phi: F,
    nodes: usize,
) -> Result<Complex64>
where
    F: Fn(Complex64) -> Complex64 + Sync,
{
    if system.len() > MAX_QUAD_SITES {
        return Err(Error::Capability(format!(
            "tensor quadrature supports at most {MAX_QUAD_SITES} sites, got {}",
            system.len()
        )));
    }
    if nodes < MIN_QUAD_NODES {
        return Err(Error::Domain(format!(
            "quadrature needs at least {MIN_QUAD_NODES} nodes per axis, got {nodes}"
        )));
    }
    if system.is_empty() {
        return Ok(phi(Complex64::new(0.0, 0.0)));
    }
    let tables: Vec<Vec<Complex64>> = system
        .sites
        .iter()
        .map(|s| {
            let e = LocalEvaluator::new(s, params);
            (0..nodes)
                .map(|j| e.eval_angle(TAU * j as f64 / nodes as f64))
                .collect()
        })
        .collect();
    let rest = &tables[1..];
    let partial: Vec<Complex64> = tables[0]
        .par_iter()
        .map(|&g0| {
            let mut acc = Complex64::new(0.0, 0.0);
            match rest.len() {
                0 => acc += phi(g0),
                1 => {
                    for &g1 in &rest[0] {
                        acc += phi(g0 + g1);
                    }
                }
                _ => {
                    for &g1 in &rest[0] {
                        for &g2 in &rest[1] {
                            acc += phi(g0 + g1 + g2);
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let total: Complex64 = partial.into_iter().sum();
    Ok(total / (nodes as f64).powi(system.len() as i32))
}

pub fn quad_average(
    system: &PrimeSystem,
    params: &GParams,
    functional: &Functional,
    nodes: usize,
) -> Result<Complex64> {
    quad_average_with(system, params, |w| functional.eval(w), nodes)
}

/// Sup over characters of one site's contribution: `(log N)^{m+1} sum_k c_k q^k/(1-q)^{k+1}`.
fn site_majorant(log_norm: f64, params: &GParams) -> f64 {
    let m = params.order_m;
    let q = (-params.sigma * log_norm).exp();
    let s: f64 = (1..=m)
        .map(|k| {
            params.convention.coefficient(m, k) as f64 * q.powi(k as i32)
                / (1.0 - q).powi(k as i32 + 1)
        })
        .sum();
    log_norm.powi(m as i32 + 1) * s
}

/// `int_X^inf (ln x)^a x^{-sigma} dx` for `sigma > 1`.
fn log_power_tail_integral(x: f64, a: u32, sigma: f64) -> f64 {
    let l = x.ln();
    let s1 = sigma - 1.0;
    let mut total = 0.0;
    let mut falling = 1.0; // a!/(a-j)!
    for j in 0..=a {
        if j > 0 {
            falling *= (a - j + 1) as f64;
        }
        total += falling * l.powi((a - j) as i32) / s1.powi(j as i32 + 1);
    }
    (-s1 * l).exp() * total
}

/// Upper bound on `sup_chi |L^{(m)} - L_P^{(m)}|` where `P` holds all sites of
/// norm at most `y`. Sites in `(y, Y*]` are summed directly with
/// `Y* = max(1e5, 100 y)`; beyond `Y*` every integer is treated as a norm
/// (at most two sites per norm for quadratic fields) and the sum is bounded
/// by an integral plus one maximal term.
pub fn tail_bound(field: NumberField, params: &GParams, y: f64) -> Result<f64> {
    if !(params.sigma > 1.0) {
        return Err(Error::Divergence(format!(
            "tail bound is finite only for sigma > 1, got {}",
            params.sigma
        )));
    }
    if !(y >= 2.0) {
        return Err(Error::Domain(format!("cutoff must be at least 2, got {y}")));
    }
    let y_star = (100.0 * y).max(1e5).floor();
    let sites = enumerate_sites(field, y_star);
    let direct: f64 = sites
        .sites
        .iter()
        .filter(|s| s.norm as f64 > y)
        .map(|s| site_majorant(s.log_norm, params))
        .sum();

    let m = params.order_m;
    let sigma = params.sigma;
    let q0 = y_star.powf(-sigma);
    // for x >= Y*, q^k/(1-q)^{k+1} <= x^{-sigma} * Y*^{-sigma(k-1)} / (1-q0)^{k+1}
    let c: f64 = (1..=m)
        .map(|k| {
            params.convention.coefficient(m, k) as f64 * q0.powi(k as i32 - 1)
                / (1.0 - q0).powi(k as i32 + 1)
        })
        .sum();
    let a = m + 1;
    let peak_at = ((a as f64) / sigma).exp().max(y_star);
    let h = |x: f64| x.ln().powi(a as i32) * x.powf(-sigma);
    let remainder =
        field.max_sites_per_norm() * c * (log_power_tail_integral(y_star, a, sigma) + h(peak_at));
    Ok(direct + remainder)
}

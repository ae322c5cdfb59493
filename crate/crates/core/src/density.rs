//! Densities `M_{sigma,P}` on the complex plane, built three ways: exact curve
//! measures for one site, Fourier inversion of the characteristic function,
//! and histograms of torus samples. Densities are taken with respect to
//! `|dw| = dx dy / (2 pi)`, so the characteristic function
//! `M~(z) = int M(w) exp(i Re(conj(z) w)) |dw|` inverts with the same measure.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localgf::{GParams, LocalEvaluator};
use crate::primesys::{enumerate_sites, NumberField, PrimeSite, PrimeSystem};
use crate::torus::psi;

pub const DEFAULT_GRID_N: usize = 256;
pub const DEFAULT_MAX_DOUBLINGS: u32 = 4;
/// Target modulus of the characteristic function on the frequency boundary.
pub const CHARFN_BOUNDARY_TOL: f64 = 1e-4;
/// Extent is this multiple of the support radius when chosen automatically.
pub const AUTO_EXTENT_FACTOR: f64 = 1.1;
/// Largest number of node evaluations (frequency points x curve nodes) a
/// refinement step may cost; doubling stops with a warning beyond it.
pub const CHARFN_COST_BUDGET: f64 = 2e10;
const SUPPORT_SCAN_ANGLES: usize = 1024;

/// Bookkeeping attached to every grid density.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DensityDiagnostics {
    /// Mass before negative ringing was clipped.
    pub pre_clip_mass: f64,
    /// Most negative value before clipping (0 when nothing was clipped).
    pub min_value: f64,
    pub out_of_support_fraction: f64,
    pub fft_size: usize,
    pub freq_extent: f64,
    /// Largest characteristic-function modulus on the frequency boundary.
    pub boundary_charfn: f64,
    pub warnings: Vec<String>,
}

/// A density sampled at `x_j = -R + j * 2R/n` on both axes, stored row-major
/// with the imaginary axis outermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub grid_n: usize,
    pub extent: f64,
    pub values: Vec<f64>,
    pub mass: f64,
    pub diagnostics: DensityDiagnostics,
}

impl GridDensity {
    pub fn from_values(grid_n: usize, extent: f64, values: Vec<f64>) -> Result<Self> {
        if grid_n == 0 || values.len() != grid_n * grid_n {
            return Err(Error::Contract(format!(
                "grid of size {grid_n} needs {} values, got {}",
                grid_n * grid_n,
                values.len()
            )));
        }
        if !(extent > 0.0) {
            return Err(Error::Domain(format!("extent must be positive, got {extent}")));
        }
        let mut g = GridDensity {
            grid_n,
            extent,
            values,
            mass: 0.0,
            diagnostics: DensityDiagnostics::default(),
        };
        g.mass = g.integrate_values(&g.values);
        g.diagnostics.pre_clip_mass = g.mass;
        Ok(g)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.extent / self.grid_n as f64
    }

    pub fn coord(&self, j: usize) -> f64 {
        -self.extent + j as f64 * self.spacing()
    }

    /// `dx dy / (2 pi)` for one cell.
    pub fn cell_measure(&self) -> f64 {
        self.spacing().powi(2) / TAU
    }

    #[inline]
    pub fn at(&self, i_re: usize, j_im: usize) -> f64 {
        self.values[j_im * self.grid_n + i_re]
    }

    fn integrate_values(&self, v: &[f64]) -> f64 {
        v.iter().sum::<f64>() * self.cell_measure()
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Clips negative values to zero, recording the pre-clip mass and minimum.
    fn clip_negative(&mut self) {
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        self.diagnostics.pre_clip_mass = self.integrate_values(&self.values);
        self.diagnostics.min_value = min.min(0.0);
        for v in &mut self.values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.mass = self.integrate_values(&self.values);
    }

    /// `int w^a conj(w)^b M(w) |dw|` by the grid rule.
    pub fn moment(&self, a: u32, b: u32) -> Complex64 {
        let n = self.grid_n;
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..n {
            let y = self.coord(j);
            for i in 0..n {
                let v = self.values[j * n + i];
                if v != 0.0 {
                    let w = Complex64::new(self.coord(i), y);
                    acc += w.powu(a) * w.conj().powu(b) * v;
                }
            }
        }
        acc * self.cell_measure()
    }

    fn check_geometry(&self, other: &GridDensity) -> Result<()> {
        if self.grid_n != other.grid_n || self.extent != other.extent {
            return Err(Error::Contract(format!(
                "grid geometry mismatch: ({}, {}) vs ({}, {})",
                self.grid_n, self.extent, other.grid_n, other.extent
            )));
        }
        Ok(())
    }

    /// `int |M1 - M2| |dw|`.
    pub fn l1_distance(&self, other: &GridDensity) -> Result<f64> {
        self.check_geometry(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.cell_measure())
    }

    pub fn sup_distance(&self, other: &GridDensity) -> Result<f64> {
        self.check_geometry(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// `max |M(w) - M(conj w)|`; the grid row `j` reflects to `(n - j) mod n`.
    pub fn reflection_asymmetry(&self) -> f64 {
        let n = self.grid_n;
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let jr = (n - j) % n;
            for i in 0..n {
                worst = worst.max((self.values[j * n + i] - self.values[jr * n + i]).abs());
            }
        }
        worst
    }

    /// CSV with header `re,im,density`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "re,im,density")?;
        let n = self.grid_n;
        for j in 0..n {
            let y = self.coord(j);
            for i in 0..n {
                writeln!(
                    out,
                    "{:.16e},{:.16e},{:.16e}",
                    self.coord(i),
                    y,
                    self.values[j * n + i]
                )?;
            }
        }
        Ok(())
    }

    /// Parses the CSV layout written by [`GridDensity::write_csv`].
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Contract("empty CSV".into()))?
            .map_err(|e| Error::Contract(e.to_string()))?;
        if header.trim() != "re,im,density" {
            return Err(Error::Contract(format!("unexpected CSV header `{header}`")));
        }
        let mut first_re = None;
        let mut values = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::Contract(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Contract(format!("bad CSV row `{line}`: {e}")))?;
            if fields.len() != 3 {
                return Err(Error::Contract(format!("bad CSV row `{line}`")));
            }
            first_re.get_or_insert(fields[0]);
            values.push(fields[2]);
        }
        let n = (values.len() as f64).sqrt().round() as usize;
        let extent = -first_re.ok_or_else(|| Error::Contract("CSV has no rows".into()))?;
        GridDensity::from_values(n, extent, values)
    }
}

/// Jacobian of `(r, theta) -> (U, V)` for the first-derivative map
/// `w = A z/(1-z)^2`, `z = r e^{i theta}`, `A = (log N)^2`:
/// `A^2 r |1 + z|^2 / |1 - z|^6`.
pub fn jacobian(site: &PrimeSite, r: f64, theta: f64) -> Result<f64> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Domain(format!("radius {r} outside (0, 1)")));
    }
    let a = site.log_norm.powi(2);
    let z = Complex64::from_polar(r, theta);
    Ok(a * a * r * (1.0 + z).norm_sqr() / (1.0 - z).norm_sqr().powi(3))
}

/// The single-site measure: uniform angle pushed through the local map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMeasure {
    pub norm: u64,
    pub sigma: f64,
    pub rho: f64,
    /// `(theta, w(theta))` with theta equispaced on `[0, 2 pi)`.
    pub nodes: Vec<(f64, Complex64)>,
}

impl CurveMeasure {
    /// `(1/n) sum Phi(w(theta_i))`.
    pub fn integrate_test<F: Fn(Complex64) -> Complex64>(&self, phi: F) -> Complex64 {
        self.nodes.iter().map(|&(_, w)| phi(w)).sum::<Complex64>() / self.nodes.len() as f64
    }

    /// Smooths the curve with a Gaussian of standard deviation `bandwidth`
    /// (per axis) onto a grid.
    pub fn rasterize(&self, grid_n: usize, extent: f64, bandwidth: f64) -> Result<GridDensity> {
        let mut g = GridDensity::from_values(grid_n, extent, vec![0.0; grid_n * grid_n])?;
        let h = g.spacing();
        let reach = (6.0 * bandwidth / h).ceil() as i64;
        let weight = 1.0 / (bandwidth * bandwidth * self.nodes.len() as f64);
        let inv2 = 1.0 / (2.0 * bandwidth * bandwidth);
        let n = grid_n as i64;
        for &(_, w) in &self.nodes {
            let ci = ((w.re + extent) / h).round() as i64;
            let cj = ((w.im + extent) / h).round() as i64;
            for j in (cj - reach).max(0)..=(cj + reach).min(n - 1) {
                let dy = g.coord(j as usize) - w.im;
                for i in (ci - reach).max(0)..=(ci + reach).min(n - 1) {
                    let dx = g.coord(i as usize) - w.re;
                    g.values[(j * n + i) as usize] += weight * (-(dx * dx + dy * dy) * inv2).exp();
                }
            }
        }
        g.mass = g.integrate_values(&g.values);
        g.diagnostics.pre_clip_mass = g.mass;
        Ok(g)
    }
}

/// Curve measure for the first derivative: `w = A rho e^{i theta}/(1 - rho e^{i theta})^2`.
pub fn curve_measure(site: &PrimeSite, sigma: f64, n_nodes: usize) -> Result<CurveMeasure> {
    let params = GParams::derived(sigma, 1)?;
    curve_measure_with(site, &params, n_nodes)
}

/// Curve measure of the local g-function for any order and convention.
pub fn curve_measure_with(
    site: &PrimeSite,
    params: &GParams,
    n_nodes: usize,
) -> Result<CurveMeasure> {
    if n_nodes == 0 {
        return Err(Error::Domain("curve measure needs at least one node".into()));
    }
    let e = LocalEvaluator::new(site, params);
    let nodes = (0..n_nodes)
        .map(|j| {
            let theta = TAU * j as f64 / n_nodes as f64;
            (theta, e.eval_angle(theta))
        })
        .collect();
    Ok(CurveMeasure {
        norm: site.norm,
        sigma: params.sigma,
        rho: e.radius(),
        nodes,
    })
}

/// Trapezoid node count that resolves `exp(i Re(conj(z) g(theta)))` when the
/// phase changes at most `phase_rate` per radian. Power of two, at least 64.
fn charfn_nodes(phase_rate: f64, q: f64) -> usize {
    let decay = 40.0 / (-q.ln()).max(0.05);
    let need = 1.5 * phase_rate + 24.0 + decay;
    (need.ceil() as usize).next_power_of_two().max(64)
}

/// `max |dg/dtheta|` on the scan grid.
fn site_max_rate(e: &LocalEvaluator) -> f64 {
    let n = SUPPORT_SCAN_ANGLES;
    let dt = TAU / n as f64;
    let vals: Vec<Complex64> = (0..n).map(|j| e.eval_angle(j as f64 * dt)).collect();
    (0..n)
        .map(|j| (vals[(j + 1) % n] - vals[j]).norm() / dt)
        .fold(0.0, f64::max)
}

/// `(1/2 pi) int exp(i Re(conj(z) g(e^{i theta}))) d theta` by the periodic trapezoid rule.
pub fn local_charfn(
    site: &PrimeSite,
    params: &GParams,
    z: Complex64,
    n_nodes: usize,
) -> Result<Complex64> {
    if n_nodes < 64 || !n_nodes.is_power_of_two() {
        return Err(Error::Domain(format!(
            "node count must be a power of two >= 64, got {n_nodes}"
        )));
    }
    let e = LocalEvaluator::new(site, params);
    Ok((0..n_nodes)
        .map(|j| psi(z, e.eval_angle(TAU * j as f64 / n_nodes as f64)))
        .sum::<Complex64>()
        / n_nodes as f64)
}

fn site_max_modulus(e: &LocalEvaluator) -> f64 {
    (0..SUPPORT_SCAN_ANGLES)
        .map(|j| e.eval_angle(TAU * j as f64 / SUPPORT_SCAN_ANGLES as f64).norm())
        .fold(0.0, f64::max)
}

/// Product of local characteristic functions with node counts chosen per site.
pub fn global_charfn(system: &PrimeSystem, params: &GParams, z: Complex64) -> Complex64 {
    system
        .sites
        .iter()
        .map(|site| {
            let e = LocalEvaluator::new(site, params);
            let nodes = charfn_nodes(z.norm() * site_max_rate(&e), e.radius());
            local_charfn(site, params, z, nodes).expect("node count is a power of two >= 64")
        })
        .product()
}

/// `sum over sites of max_theta |g_local|`, scanned on 1024 angles.
pub fn support_radius(system: &PrimeSystem, params: &GParams) -> f64 {
    system
        .sites
        .iter()
        .map(|s| site_max_modulus(&LocalEvaluator::new(s, params)))
        .sum()
}

/// Options for Fourier-inversion reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    pub grid_n: usize,
    /// Half-width of the output square; `None` means 1.1 x support radius.
    pub extent: Option<f64>,
    /// Largest frequency kept; `None` doubles the FFT size until the boundary
    /// modulus drops below [`CHARFN_BOUNDARY_TOL`].
    pub freq_extent: Option<f64>,
    pub max_doublings: u32,
    /// Standard deviation of an optional Gaussian smoothing kernel, applied
    /// as a factor on the characteristic function.
    pub smoothing: Option<f64>,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            grid_n: DEFAULT_GRID_N,
            extent: None,
            freq_extent: None,
            max_doublings: DEFAULT_MAX_DOUBLINGS,
            smoothing: None,
        }
    }
}

impl ReconstructOptions {
    pub fn with_grid(grid_n: usize) -> Self {
        ReconstructOptions {
            grid_n,
            ..Default::default()
        }
    }
}

/// Per-site node values of `g`, sampled densely enough for frequencies up to `zmax`.
struct SiteTable {
    values: Vec<Complex64>,
}

impl SiteTable {
    fn new(site: &PrimeSite, params: &GParams, zmax: f64) -> Self {
        let e = LocalEvaluator::new(site, params);
        let n = charfn_nodes(zmax * site_max_rate(&e), e.radius());
        SiteTable {
            values: (0..n)
                .map(|j| e.eval_angle(TAU * j as f64 / n as f64))
                .collect(),
        }
    }

    /// Local characteristic function at `(xi0 + k dxi, eta)` for `k = 0..count`,
    /// multiplied into `row`.
    fn mul_row(&self, xi0: f64, dxi: f64, eta: f64, row: &mut [Complex64], scratch: &mut Vec<(Complex64, Complex64)>) {
        scratch.clear();
        scratch.extend(self.values.iter().map(|g| {
            (
                Complex64::from_polar(1.0, xi0 * g.re + eta * g.im),
                Complex64::from_polar(1.0, dxi * g.re),
            )
        }));
        let inv = 1.0 / self.values.len() as f64;
        for (k, out) in row.iter_mut().enumerate() {
            // re-anchor periodically to keep the recurrence drift negligible
            if k % 256 == 0 && k > 0 {
                let xi = xi0 + k as f64 * dxi;
                for (c, g) in scratch.iter_mut().zip(&self.values) {
                    c.0 = Complex64::from_polar(1.0, xi * g.re + eta * g.im);
                }
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for c in scratch.iter_mut() {
                acc += c.0;
                c.0 *= c.1;
            }
            *out *= acc * inv;
        }
    }

    fn eval(&self, z: Complex64) -> Complex64 {
        self.values.iter().map(|&g| psi(z, g)).sum::<Complex64>() / self.values.len() as f64
    }
}

fn boundary_max(tables: &[SiteTable], zmax: f64, smoothing: Option<f64>, samples: usize) -> f64 {
    // the square's edge; by Hermitian symmetry two edges suffice
    (0..samples)
        .into_par_iter()
        .map(|k| {
            let s = -zmax + 2.0 * zmax * k as f64 / samples as f64;
            let damp = smoothing.map_or(1.0, |h| (-0.5 * h * h * (zmax * zmax + s * s)).exp());
            [Complex64::new(zmax, s), Complex64::new(s, zmax)]
                .iter()
                .map(|&z| tables.iter().map(|t| t.eval(z)).product::<Complex64>().norm() * damp)
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

fn fft_2d(data: &mut [Complex64], n: usize, fft: &std::sync::Arc<dyn Fft<f64>>) {
    data.par_chunks_mut(n).for_each(|row| fft.process(row));
    let mut col = vec![Complex64::new(0.0, 0.0); n * n];
    // transpose, transform rows, transpose back
    transpose(data, &mut col, n);
    col.par_chunks_mut(n).for_each(|row| fft.process(row));
    transpose(&col, data, n);
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    dst.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, d) in row.iter_mut().enumerate() {
            *d = src[j * n + i];
        }
    });
}

/// Characteristic function of the system's density on the FFT frequency grid.
#[derive(Debug, Clone)]
pub struct CharFnGrid {
    pub freq_n: usize,
    /// Largest frequency magnitude per axis, `freq_n/2 * dxi`.
    pub freq_extent: f64,
    /// `values[l * freq_n + k]` at `(xi_k, eta_l)`, `xi_k = (k - freq_n/2) dxi`.
    pub values: Vec<Complex64>,
}

impl CharFnGrid {
    pub fn spacing(&self) -> f64 {
        2.0 * self.freq_extent / self.freq_n as f64
    }

    pub fn freq(&self, k: usize) -> f64 {
        (k as f64 - (self.freq_n / 2) as f64) * self.spacing()
    }
}

/// Characteristic function on the centred frequency grid of size `freq_n`
/// with spacing `pi / extent`.
pub fn charfn_grid(system: &PrimeSystem, params: &GParams, freq_n: usize, extent: f64) -> CharFnGrid {
    let dxi = PI / extent;
    let half = (freq_n / 2) as f64;
    let zmax = half * dxi * std::f64::consts::SQRT_2;
    let tables: Vec<SiteTable> = system
        .sites
        .iter()
        .map(|s| SiteTable::new(s, params, zmax))
        .collect();
    let mut values = vec![Complex64::new(1.0, 0.0); freq_n * freq_n];
    values
        .par_chunks_mut(freq_n)
        .enumerate()
        .for_each(|(l, row)| {
            let eta = (l as f64 - half) * dxi;
            let mut scratch = Vec::new();
            for t in &tables {
                t.mul_row(-half * dxi, dxi, eta, row, &mut scratch);
            }
        });
    CharFnGrid {
        freq_n,
        freq_extent: half * dxi,
        values,
    }
}

/// Inverts the characteristic function onto a square grid by 2D FFT.
pub fn reconstruct_density(
    system: &PrimeSystem,
    params: &GParams,
    opts: &ReconstructOptions,
) -> Result<GridDensity> {
    let n = opts.grid_n;
    if n < 8 || n % 2 != 0 {
        return Err(Error::Domain(format!("grid size must be even and >= 8, got {n}")));
    }
    let extent = match opts.extent {
        Some(r) if r > 0.0 => r,
        Some(r) => return Err(Error::Domain(format!("extent must be positive, got {r}"))),
        None => {
            let r = AUTO_EXTENT_FACTOR * support_radius(system, params);
            if r > 0.0 {
                r
            } else {
                1.0
            }
        }
    };
    let dxi = PI / extent;
    let mut warnings = Vec::new();

    // FFT size n * 2^k; each doubling doubles the largest frequency kept.
    let max_freq = |k: u32| (n << k) as f64 / 2.0 * dxi;
    let probe_tables = |zmax: f64| -> Vec<SiteTable> {
        system
            .sites
            .iter()
            .map(|s| SiteTable::new(s, params, zmax * std::f64::consts::SQRT_2))
            .collect()
    };
    let rates: Vec<(f64, f64)> = system
        .sites
        .iter()
        .map(|s| {
            let e = LocalEvaluator::new(s, params);
            (site_max_rate(&e), e.radius())
        })
        .collect();
    let cost = |k: u32| {
        let big = (n << k) as f64;
        let zmax = max_freq(k) * std::f64::consts::SQRT_2;
        let nodes: usize = rates.iter().map(|&(r, q)| charfn_nodes(zmax * r, q)).sum();
        big * big * nodes as f64
    };
    let budget_hit = |k: u32, warnings: &mut Vec<String>| {
        let c = cost(k + 1);
        if c > CHARFN_COST_BUDGET {
            warnings.push(format!(
                "refinement stopped at FFT size {}: the next doubling needs ~{c:.1e} node evaluations",
                n << k
            ));
            true
        } else {
            false
        }
    };
    let mut k = 0u32;
    let boundary;
    match opts.freq_extent {
        Some(f) => {
            while max_freq(k) < f && k < opts.max_doublings && !budget_hit(k, &mut warnings) {
                k += 1;
            }
            if max_freq(k) < f {
                warnings.push(format!(
                    "requested frequency extent {f} exceeds the largest reachable {}",
                    max_freq(k)
                ));
            }
            let z = max_freq(k);
            boundary = boundary_max(&probe_tables(z), z, opts.smoothing, 512);
        }
        None => loop {
            let z = max_freq(k);
            let b = boundary_max(&probe_tables(z), z, opts.smoothing, 512);
            if b < CHARFN_BOUNDARY_TOL || k >= opts.max_doublings || budget_hit(k, &mut warnings) {
                boundary = b;
                break;
            }
            k += 1;
        },
    }
    if boundary >= CHARFN_BOUNDARY_TOL {
        warnings.push(format!(
            "frequency grid too coarse: boundary |charfn| = {boundary:.3e} after {k} doublings"
        ));
    }

    let big = n << k;
    let mut cf = charfn_grid(system, params, big, extent);
    if let Some(h) = opts.smoothing {
        cf.values.par_chunks_mut(big).enumerate().for_each(|(l, row)| {
            let eta = (l as f64 - (big / 2) as f64) * dxi;
            for (kk, v) in row.iter_mut().enumerate() {
                let xi = (kk as f64 - (big / 2) as f64) * dxi;
                *v *= (-0.5 * h * h * (xi * xi + eta * eta)).exp();
            }
        });
    }

    // Reorder to FFT index order (p -> frequency index p or p - big) with the
    // (-1)^{k+l} factor that shifts the spatial origin to -extent.
    let mut data = vec![Complex64::new(0.0, 0.0); big * big];
    let half = big / 2;
    data.par_chunks_mut(big).enumerate().for_each(|(pl, row)| {
        let l = (pl + half) % big; // centred row index
        for (pk, d) in row.iter_mut().enumerate() {
            let kk = (pk + half) % big;
            let sign = if (pk + pl) % 2 == 0 { 1.0 } else { -1.0 };
            *d = cf.values[l * big + kk] * sign;
        }
    });
    let fft = FftPlanner::new().plan_fft_forward(big);
    fft_2d(&mut data, big, &fft);

    let scale = dxi * dxi / TAU;
    let stride = 1usize << k;
    let mut values = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            values.push(data[(j * stride) * big + i * stride].re * scale);
        }
    }
    let mut g = GridDensity::from_values(n, extent, values)?;
    g.clip_negative();
    g.diagnostics.fft_size = big;
    g.diagnostics.freq_extent = max_freq(k);
    g.diagnostics.boundary_charfn = boundary;
    g.diagnostics.warnings = warnings;
    Ok(g)
}

/// FFT convolution of two densities on the same grid.
pub fn convolve(a: &GridDensity, b: &GridDensity) -> Result<GridDensity> {
    a.check_geometry(b)?;
    let n = a.grid_n;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let lift = |g: &GridDensity| -> Vec<Complex64> {
        g.values.iter().map(|&v| Complex64::new(v, 0.0)).collect()
    };
    let mut fa = lift(a);
    let mut fb = lift(b);
    fft_2d(&mut fa, n, &fft);
    fft_2d(&mut fb, n, &fft);
    let mut prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    fft_2d(&mut prod, n, &ifft);
    // index i + j of the circular sum sits at coordinate -2R + (i + j) h,
    // i.e. output index (i + j - n/2) mod n
    let scale = a.cell_measure() / (n * n) as f64;
    let half = n / 2;
    let mut values = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let src = ((j + half) % n) * n + (i + half) % n;
            values[j * n + i] = prod[src].re * scale;
        }
    }
    let mut g = GridDensity::from_values(n, a.extent, values)?;
    g.clip_negative();
    Ok(g)
}

/// Normalized 2D histogram of torus samples of the global g-value. Cells are
/// centred on grid points.
pub fn histogram(
    system: &PrimeSystem,
    params: &GParams,
    n_samples: u64,
    seed: u64,
    grid_n: usize,
    extent: Option<f64>,
) -> Result<GridDensity> {
    if n_samples < 10_000 {
        return Err(Error::Domain(format!(
            "histogram needs at least 10^4 samples, got {n_samples}"
        )));
    }
    if grid_n == 0 {
        return Err(Error::Domain("grid size must be positive".into()));
    }
    let extent = extent.unwrap_or_else(|| AUTO_EXTENT_FACTOR * support_radius(system, params));
    let h = 2.0 * extent / grid_n as f64;
    let n = grid_n as i64;
    let (counts, outside) = crate::torus::for_each_sample_chunk(
        system,
        params,
        n_samples,
        seed,
        || (vec![0u64; grid_n * grid_n], 0u64),
        |acc, g| {
            let i = ((g.re + extent) / h + 0.5).floor() as i64;
            let j = ((g.im + extent) / h + 0.5).floor() as i64;
            if (0..n).contains(&i) && (0..n).contains(&j) {
                acc.0[(j * n + i) as usize] += 1;
            } else {
                acc.1 += 1;
            }
        },
        |mut x, y| {
            for (a, b) in x.0.iter_mut().zip(&y.0) {
                *a += b;
            }
            x.1 += y.1;
            x
        },
    );
    let inside = n_samples - outside;
    let cell = h * h / TAU;
    let values = counts
        .iter()
        .map(|&c| if inside > 0 { c as f64 / (inside as f64 * cell) } else { 0.0 })
        .collect();
    let mut g = GridDensity::from_values(grid_n, extent, values)?;
    g.diagnostics.out_of_support_fraction = outside as f64 / n_samples as f64;
    Ok(g)
}

/// One step of the uniform-convergence probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStep {
    pub y: f64,
    /// Norms of the sites added since the previous cutoff.
    pub added_norms: Vec<u64>,
    pub sup_diff: f64,
    /// `sum over added sites of N^{-4 sigma} / (ln N)^2`.
    pub bound: f64,
    pub ratio: f64,
    pub mass: f64,
}

/// Sup-norm increments between densities of consecutive cutoffs, all on the
/// grid and frequency window of the largest system.
pub fn uniform_convergence_probe(
    field: NumberField,
    params: &GParams,
    y_sequence: &[f64],
    grid_n: usize,
) -> Result<Vec<ProbeStep>> {
    if !(params.sigma > 0.5) {
        return Err(Error::Domain(format!(
            "convergence probe needs sigma > 1/2, got {}",
            params.sigma
        )));
    }
    if y_sequence.len() < 2 || y_sequence.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain(
            "y sequence must be strictly increasing with at least two entries".into(),
        ));
    }
    let largest = enumerate_sites(field, *y_sequence.last().unwrap());
    let extent = AUTO_EXTENT_FACTOR * support_radius(&largest, params);
    // the smallest system decays slowest in frequency, so it sets the window
    let smallest = enumerate_sites(field, y_sequence[0]);
    let first = reconstruct_density(
        &smallest,
        params,
        &ReconstructOptions {
            grid_n,
            extent: Some(extent),
            ..Default::default()
        },
    )?;
    let opts = ReconstructOptions {
        grid_n,
        extent: Some(extent),
        freq_extent: Some(first.diagnostics.freq_extent),
        ..Default::default()
    };
    let mut prev_sites = smallest;
    let mut prev = first;
    let mut out = Vec::new();
    for &y in &y_sequence[1..] {
        let sys = enumerate_sites(field, y);
        let cur = reconstruct_density(&sys, params, &opts)?;
        let added: Vec<u64> = sys.sites[prev_sites.len()..].iter().map(|s| s.norm).collect();
        let bound: f64 = sys.sites[prev_sites.len()..]
            .iter()
            .map(|s| (-4.0 * params.sigma * s.log_norm).exp() / s.log_norm.powi(2))
            .sum();
        let sup_diff = cur.sup_distance(&prev)?;
        out.push(ProbeStep {
            y,
            added_norms: added,
            sup_diff,
            bound,
            ratio: if bound > 0.0 { sup_diff / bound } else { f64::NAN },
            mass: cur.mass,
        });
        prev = cur;
        prev_sites = sys;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::{quad_average, Functional};
    use std::f64::consts::LN_2;

    fn single(n: u64) -> PrimeSystem {
        PrimeSystem::from_sites(NumberField::Rationals, n as f64, vec![PrimeSite::rational(n)])
    }

    /// Adaptive Simpson on [a, b] for a complex integrand.
    fn adaptive_simpson<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64, tol: f64) -> Complex64 {
        fn rec<F: Fn(f64) -> Complex64>(
            f: &F,
            a: f64,
            b: f64,
            fa: Complex64,
            fm: Complex64,
            fb: Complex64,
            whole: Complex64,
            tol: f64,
            depth: u32,
        ) -> Complex64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            let delta = left + right - whole;
            if depth == 0 || delta.norm() <= 15.0 * tol {
                return left + right + delta / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    #[test]
    fn jacobian_limits_and_symmetry() {
        let site = PrimeSite::rational(2);
        let a2 = LN_2.powi(4);
        let j = jacobian(&site, 1e-9, 0.7).unwrap();
        assert!((j / 1e-9 - a2).abs() < 1e-6 * a2);
        for theta in [0.1, 1.0, 2.5, 3.0] {
            let x = jacobian(&site, 0.4, theta).unwrap();
            let y = jacobian(&site, 0.4, TAU - theta).unwrap();
            assert!((x - y).abs() < 1e-14 * x);
        }
        assert!(jacobian(&site, 1.0, 0.0).is_err());
        assert!(jacobian(&site, 0.0, 0.0).is_err());
    }

    #[test]
    fn jacobian_matches_finite_difference_determinant() {
        let site = PrimeSite::rational(2);
        let a = LN_2.powi(2);
        let uv = |r: f64, t: f64| {
            let c = (1.0 - Complex64::from_polar(r, t)).norm_sqr().powi(2);
            (
                a * (r * t.cos() - 2.0 * r * r + r.powi(3) * t.cos()) / c,
                a * (r * t.sin() - r.powi(3) * t.sin()) / c,
            )
        };
        let (r, t, h) = (0.3, 1.0, 1e-5);
        let d = |f: &dyn Fn(f64) -> (f64, f64)| {
            let (p, m) = (f(h), f(-h));
            ((p.0 - m.0) / (2.0 * h), (p.1 - m.1) / (2.0 * h))
        };
        let (ur, vr) = d(&|e| uv(r + e, t));
        let (ut, vt) = d(&|e| uv(r, t + e));
        let fd = ur * vt - ut * vr;
        let exact = jacobian(&site, r, t).unwrap();
        assert!((fd - exact).abs() < 1e-6 * exact, "{fd} vs {exact}");
    }

    #[test]
    fn curve_measure_basics() {
        let site = PrimeSite::rational(2);
        let c = curve_measure(&site, 1.0, 4096).unwrap();
        assert!((c.rho - 0.5).abs() < 1e-15);
        let one = c.integrate_test(|_| Complex64::new(1.0, 0.0));
        assert!((one.re - 1.0).abs() < 1e-14);
        assert!(c.integrate_test(|w| w).norm() < 1e-10);
        // the node values are A rho e^{it}/(1 - rho e^{it})^2
        let (t, w) = c.nodes[123];
        let z = Complex64::from_polar(0.5, t);
        let direct = LN_2.powi(2) * z / (1.0 - z).powi(2);
        assert!((w - direct).norm() < 1e-14);
    }

    #[test]
    fn curve_measure_equals_single_site_quadrature() {
        let site = PrimeSite::rational(3);
        let p = GParams::derived(1.2, 1).unwrap();
        let c = curve_measure(&site, 1.2, 512).unwrap();
        let sys = single(3);
        for f in [
            Functional::Moment { a: 1, b: 1 },
            Functional::Moment { a: 2, b: 0 },
            Functional::Moment { a: 2, b: 1 },
            Functional::Psi { z: Complex64::new(1.3, -0.4) },
        ] {
            let q = quad_average(&sys, &p, &f, 512).unwrap();
            let v = c.integrate_test(|w| f.eval(w));
            assert!((q - v).norm() < 1e-8, "{f}");
        }
    }

    #[test]
    fn local_charfn_examples() {
        let site = PrimeSite::rational(2);
        let p = GParams::derived(1.5, 1).unwrap();
        assert_eq!(
            local_charfn(&site, &p, Complex64::new(0.0, 0.0), 64).unwrap(),
            Complex64::new(1.0, 0.0)
        );
        assert!(local_charfn(&site, &p, Complex64::new(1.0, 0.0), 100).is_err());
        let z = Complex64::new(1.0, 0.0);
        let v = local_charfn(&site, &p, z, 256).unwrap();
        let e = LocalEvaluator::new(&site, &p);
        let oracle = adaptive_simpson(&|t| psi(z, e.eval_angle(t)), 0.0, TAU, 1e-13) / TAU;
        assert!((v - oracle).norm() < 1e-9, "{v} vs {oracle}");
        for zz in [Complex64::new(5.0, 3.0), Complex64::new(-40.0, 10.0)] {
            assert!(local_charfn(&site, &p, zz, 1024).unwrap().norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn adaptive_node_count_is_converged() {
        let p = GParams::derived(1.1, 2).unwrap();
        for n in [2u64, 3, 7] {
            let site = PrimeSite::rational(n);
            let e = LocalEvaluator::new(&site, &p);
            let rate = site_max_rate(&e);
            for zabs in [0.5, 5.0, 50.0, 300.0] {
                let z = Complex64::from_polar(zabs, 0.3);
                let nodes = charfn_nodes(zabs * rate, e.radius());
                let a = local_charfn(&site, &p, z, nodes).unwrap();
                let b = local_charfn(&site, &p, z, 8 * nodes).unwrap();
                assert!((a - b).norm() < 1e-12, "N={n} |z|={zabs} nodes={nodes} diff={}", (a - b).norm());
            }
        }
    }

    #[test]
    fn global_charfn_examples() {
        let p = GParams::derived(1.5, 1).unwrap();
        let sys = enumerate_sites(NumberField::Rationals, 3.0);
        assert_eq!(
            global_charfn(&sys, &p, Complex64::new(0.0, 0.0)),
            Complex64::new(1.0, 0.0)
        );
        let z = Complex64::new(2.0, -1.5);
        let one = single(2);
        let direct = local_charfn(&one.sites[0], &p, z, 1024).unwrap();
        assert!((global_charfn(&one, &p, z) - direct).norm() < 1e-13);
        let q = quad_average(&sys, &p, &Functional::Psi { z }, 256).unwrap();
        assert!((global_charfn(&sys, &p, z) - q).norm() < 1e-8);
        // Hermitian symmetry
        let a = global_charfn(&sys, &p, z);
        let b = global_charfn(&sys, &p, -z);
        assert!((a.conj() - b).norm() < 1e-14);
    }

    #[test]
    fn support_radius_properties() {
        let p1 = GParams::derived(1.0, 1).unwrap();
        let r = support_radius(&single(2), &p1);
        assert!(r >= 2.0 * LN_2 * LN_2 - 1e-15);
        let sys = enumerate_sites(NumberField::Rationals, 30.0);
        let mut last = 0.0;
        for k in 1..=sys.len() {
            let rk = support_radius(&sys.prefix(k), &p1);
            assert!(rk >= last);
            last = rk;
        }
        let p2 = GParams::derived(2.0, 1).unwrap();
        assert!(support_radius(&sys, &p2) < support_radius(&sys, &p1));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let sys = enumerate_sites(NumberField::Rationals, 7.0);
        let p = GParams::derived(1.5, 1).unwrap();
        let g = reconstruct_density(&sys, &p, &ReconstructOptions::with_grid(16)).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let back = GridDensity::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.grid_n, g.grid_n);
        assert_eq!(back.extent, g.extent);
        assert_eq!(back.values, g.values);
    }

    #[test]
    fn convolution_geometry_and_commutativity() {
        let mk = |shift: f64| {
            let n = 32;
            let mut g = GridDensity::from_values(n, 2.0, vec![0.0; n * n]).unwrap();
            for j in 0..n {
                for i in 0..n {
                    let (x, y) = (g.coord(i) - shift, g.coord(j));
                    g.values[j * n + i] = (-(x * x + 2.0 * y * y)).exp();
                }
            }
            g.mass = g.integrate_values(&g.values);
            g
        };
        let a = mk(0.3);
        let b = mk(-0.2);
        let ab = convolve(&a, &b).unwrap();
        let ba = convolve(&b, &a).unwrap();
        assert_eq!(ab.values, ba.values);
        assert!((ab.mass - a.mass * b.mass).abs() < 1e-6);
        let other = GridDensity::from_values(16, 2.0, vec![0.0; 256]).unwrap();
        assert!(matches!(convolve(&a, &other), Err(Error::Contract(_))));
    }

    #[test]
    fn convolution_with_point_mass_is_identity() {
        let n = 64;
        let extent = 2.0;
        let mut delta = GridDensity::from_values(n, extent, vec![0.0; n * n]).unwrap();
        // single cell of unit mass at the origin (index n/2)
        let cell = delta.cell_measure();
        delta.values[(n / 2) * n + n / 2] = 1.0 / cell;
        let site = PrimeSite::rational(2);
        let b = curve_measure(&site, 1.0, 8192)
            .unwrap()
            .rasterize(n, extent, 2.0 * 2.0 * extent / n as f64)
            .unwrap();
        let c = convolve(&delta, &b).unwrap();
        assert!(c.sup_distance(&b).unwrap() < 1e-12 * b.peak().max(1.0));
    }

    #[test]
    fn histogram_contract() {
        let sys = enumerate_sites(NumberField::Rationals, 11.0);
        let p = GParams::derived(1.5, 1).unwrap();
        assert!(histogram(&sys, &p, 100, 1, 32, None).is_err());
        let h = histogram(&sys, &p, 20_000, 1, 32, None).unwrap();
        assert_eq!(h.diagnostics.out_of_support_fraction, 0.0);
        assert!((h.mass - 1.0).abs() < 1e-12);
        let tight = histogram(&sys, &p, 20_000, 1, 32, Some(0.2)).unwrap();
        assert!(tight.diagnostics.out_of_support_fraction > 0.0);
    }
}

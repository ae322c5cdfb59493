//! Critical points of the higher-order local maps `w_m`, the radius below
//! which `w_m` has no critical point, and the resulting lower bound on sigma.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use num_bigint::BigInt;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::localgf::{big_to_f64, build_rational_map, horner, Convention, RationalMap};

pub const MAX_SWEEPS: usize = 500;
/// Residual bound relative to `sum |c_k| |r|^k` at the root.
pub const ROOT_RESIDUAL_TOL: f64 = 1e-12;
/// Nodes used for the simplicity probe in reports.
pub const REPORT_CURVE_NODES: usize = 8192;

/// Double-double real, value `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    fn from_big(b: &BigInt) -> Dd {
        let hi = big_to_f64(b);
        let rest = b - BigInt::from(hi as i128);
        Dd::two_sum(hi, big_to_f64(&rest))
    }

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        let err = (a - (s - bb)) + (b - bb);
        Dd { hi: s, lo: err }
    }

    fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.hi, o.hi);
        let t = Dd::two_sum(self.lo, o.lo);
        let s = Dd::two_sum(s.hi, s.lo + t.hi);
        Dd::two_sum(s.hi, s.lo + t.lo)
    }

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let err = self.hi.mul_add(o.hi, -p);
        let err = err + (self.hi * o.lo + self.lo * o.hi);
        Dd::two_sum(p, err)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

#[derive(Debug, Clone, Copy)]
struct DdComplex {
    re: Dd,
    im: Dd,
}

impl DdComplex {
    fn from_c(z: Complex64) -> Self {
        DdComplex {
            re: Dd::from_f64(z.re),
            im: Dd::from_f64(z.im),
        }
    }

    fn add_real(self, r: Dd) -> Self {
        DdComplex {
            re: self.re.add(r),
            im: self.im,
        }
    }

    fn mul(self, o: DdComplex) -> Self {
        DdComplex {
            re: self.re.mul(o.re).sub(self.im.mul(o.im)),
            im: self.re.mul(o.im).add(self.im.mul(o.re)),
        }
    }

    fn to_c(self) -> Complex64 {
        Complex64::new(self.re.to_f64(), self.im.to_f64())
    }
}

/// `(p(z), p'(z))` in double-double via Horner.
fn eval_dd(coeffs: &[Dd], z: DdComplex) -> (DdComplex, DdComplex) {
    let zero = DdComplex {
        re: Dd::ZERO,
        im: Dd::ZERO,
    };
    let mut p = zero;
    let mut dp = zero;
    for c in coeffs.iter().rev() {
        dp = dp.mul(z);
        dp.re = dp.re.add(p.re);
        dp.im = dp.im.add(p.im);
        p = p.mul(z).add_real(*c);
    }
    (p, dp)
}

fn eval_with_derivative(coeffs: &[f64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// All roots of an integer polynomial (constant term first): Aberth iteration
/// in f64, then Newton polishing in double-double against the exact coefficients.
pub fn polynomial_roots(coeffs: &[BigInt]) -> Result<Vec<Complex64>> {
    let mut exact: Vec<BigInt> = coeffs.to_vec();
    while exact.len() > 1 && exact.last().is_some_and(|c| c == &BigInt::from(0)) {
        exact.pop();
    }
    let degree = exact.len() - 1;
    if degree == 0 {
        return Ok(Vec::new());
    }
    let lead = big_to_f64(&exact[degree]);
    // monic in f64 for the Aberth sweep
    let monic: Vec<f64> = exact.iter().map(|c| big_to_f64(c) / lead).collect();

    // Cauchy-type radius for the initial circle
    let radius = monic[..degree]
        .iter()
        .enumerate()
        .map(|(k, c)| c.abs().powf(1.0 / (degree - k) as f64))
        .fold(0.0, f64::max)
        .max(1e-3);
    let mut z: Vec<Complex64> = (0..degree)
        .map(|k| Complex64::from_polar(radius, TAU * k as f64 / degree as f64 + 0.4))
        .collect();

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_step: f64 = 0.0;
        for i in 0..degree {
            let (p, dp) = eval_with_derivative(&monic, z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let repulsion: Complex64 = (0..degree)
                .filter(|&j| j != i)
                .map(|j| 1.0 / (z[i] - z[j]))
                .sum();
            let step = ratio / (1.0 - ratio * repulsion);
            z[i] -= step;
            max_step = max_step.max(step.norm() / z[i].norm().max(1e-300));
        }
        if max_step < 1e-12 {
            converged = true;
            break;
        }
    }

    let dd: Vec<Dd> = exact.iter().map(Dd::from_big).collect();
    let abs_coeffs: Vec<f64> = exact.iter().map(|c| big_to_f64(c).abs()).collect();
    let mut max_residual: f64 = 0.0;
    for root in z.iter_mut() {
        let mut w = DdComplex::from_c(*root);
        for _ in 0..4 {
            let (p, dp) = eval_dd(&dd, w);
            let dpc = dp.to_c();
            if dpc.norm() == 0.0 {
                break;
            }
            // Newton step computed in f64 from a double-double residual
            let step = p.to_c() / dpc;
            w.re = w.re.sub(Dd::from_f64(step.re));
            w.im = w.im.sub(Dd::from_f64(step.im));
        }
        *root = w.to_c();
        let (p, _) = eval_dd(&dd, w);
        max_residual = max_residual.max(p.to_c().norm() / residual_scale(&abs_coeffs, *root));
    }
    if !converged || max_residual > ROOT_RESIDUAL_TOL {
        return Err(Error::NonConvergence {
            sweeps,
            max_residual,
        });
    }
    Ok(pair_conjugates(z))
}

/// `sum |c_k| |z|^k`, the natural size of `p(z)` under coefficient rounding.
fn residual_scale(abs_coeffs: &[f64], z: Complex64) -> f64 {
    let r = z.norm();
    abs_coeffs.iter().rev().fold(0.0, |acc, c| acc * r + c)
}

/// Makes the root list exactly closed under conjugation (real coefficients).
fn pair_conjugates(mut roots: Vec<Complex64>) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(roots.len());
    roots.sort_by(|a, b| a.im.abs().total_cmp(&b.im.abs()).then(a.re.total_cmp(&b.re)));
    let mut used = vec![false; roots.len()];
    for i in 0..roots.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let r = roots[i];
        let partner = (0..roots.len())
            .filter(|&j| !used[j])
            .min_by(|&a, &b| {
                (roots[a] - r.conj())
                    .norm()
                    .total_cmp(&(roots[b] - r.conj()).norm())
            });
        let tol = 1e-8 * r.norm().max(1e-12);
        match partner {
            Some(j) if r.im.abs() > tol && (roots[j] - r.conj()).norm() < 1e-6 * r.norm() => {
                used[j] = true;
                let avg = 0.5 * (r + roots[j].conj());
                let upper = Complex64::new(avg.re, avg.im.abs());
                out.push(upper);
                out.push(upper.conj());
            }
            _ => out.push(Complex64::new(r.re, 0.0)),
        }
    }
    out.sort_by(|a, b| a.norm().total_cmp(&b.norm()).then(a.im.total_cmp(&b.im)));
    out
}

/// Roots of the numerator of `w_m'`.
pub fn critical_points(m: u32, convention: Convention) -> Result<Vec<Complex64>> {
    let map = build_rational_map(m, convention)?;
    polynomial_roots(&map.deriv_numerator_coeffs)
}

/// Smallest modulus of a critical point, capped at 1 (the unit disc is the
/// largest domain of interest).
pub fn injectivity_radius(m: u32, convention: Convention) -> Result<f64> {
    let roots = critical_points(m, convention)?;
    Ok(roots.iter().map(|r| r.norm()).fold(1.0, f64::min))
}

/// `-ln(rho_max) / ln(N)`: the sigma above which `N^{-sigma} < rho_max`.
pub fn sigma_threshold(m: u32, convention: Convention, norm: u64) -> Result<f64> {
    if norm < 2 {
        return Err(Error::Domain(format!("norm must be at least 2, got {norm}")));
    }
    let rho = injectivity_radius(m, convention)?;
    Ok(sigma_for_radius(rho, norm))
}

fn sigma_for_radius(rho: f64, norm: u64) -> f64 {
    let s = -rho.ln() / (norm as f64).ln();
    if s == 0.0 {
        0.0
    } else {
        s
    }
}

fn segments_cross(a0: Complex64, a1: Complex64, b0: Complex64, b1: Complex64) -> bool {
    let cross = |o: Complex64, p: Complex64, q: Complex64| (p - o).re * (q - o).im - (p - o).im * (q - o).re;
    let eps = 1e-12 * (a1 - a0).norm() * (b1 - b0).norm();
    let d1 = cross(b0, b1, a0);
    let d2 = cross(b0, b1, a1);
    let d3 = cross(a0, a1, b0);
    let d4 = cross(a0, a1, b1);
    ((d1 > eps && d2 < -eps) || (d1 < -eps && d2 > eps))
        && ((d3 > eps && d4 < -eps) || (d3 < -eps && d4 > eps))
}

/// True when the closed polygon through `points` has no crossing between
/// non-adjacent edges.
fn polygon_is_simple(points: &[Complex64]) -> bool {
    let n = points.len();
    let edges: Vec<(Complex64, Complex64)> = (0..n).map(|i| (points[i], points[(i + 1) % n])).collect();
    let bbox = |e: &(Complex64, Complex64)| {
        (
            e.0.re.min(e.1.re),
            e.0.re.max(e.1.re),
            e.0.im.min(e.1.im),
            e.0.im.max(e.1.im),
        )
    };
    let boxes: Vec<_> = edges.iter().map(bbox).collect();
    !(0..n).into_par_iter().any(|i| {
        let bi = boxes[i];
        (i + 2..n).any(|j| {
            if i == 0 && j == n - 1 {
                return false;
            }
            let bj = boxes[j];
            if bi.1 < bj.0 || bj.1 < bi.0 || bi.3 < bj.2 || bj.3 < bi.2 {
                return false;
            }
            segments_cross(edges[i].0, edges[i].1, edges[j].0, edges[j].1)
        })
    })
}

fn curve_points(map: &RationalMap, rho: f64, n_nodes: usize) -> Vec<Complex64> {
    let num = map.numerator_f64();
    let power = map.order_m as i32 + 1;
    (0..n_nodes)
        .map(|j| {
            let z = Complex64::from_polar(rho, TAU * j as f64 / n_nodes as f64);
            horner(&num, z) / (1.0 - z).powi(power)
        })
        .collect()
}

/// Whether `theta -> w_m(rho e^{i theta})` is a simple closed curve, probed
/// with an `n_nodes`-gon.
pub fn curve_simplicity(m: u32, convention: Convention, rho: f64, n_nodes: usize) -> Result<bool> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("rho {rho} outside (0, 1)")));
    }
    if n_nodes < 3 {
        return Err(Error::Domain("need at least 3 nodes".into()));
    }
    let map = build_rational_map(m, convention)?;
    Ok(polygon_is_simple(&curve_points(&map, rho, n_nodes)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusReport {
    pub order_m: u32,
    pub convention: Convention,
    pub roots: Vec<Complex64>,
    pub rho_max: f64,
    pub sigma_min: BTreeMap<u64, f64>,
    /// Simplicity of the image of the circle of radius `0.99 * rho_max`.
    pub curve_simple: bool,
    pub probe_rho: f64,
}

pub fn radius_report(m: u32, convention: Convention, norms: &[u64]) -> Result<RadiusReport> {
    let roots = critical_points(m, convention)?;
    let rho_max = roots.iter().map(|r| r.norm()).fold(1.0, f64::min);
    let mut sigma_min = BTreeMap::new();
    for &n in norms {
        if n < 2 {
            return Err(Error::Domain(format!("norm must be at least 2, got {n}")));
        }
        sigma_min.insert(n, sigma_for_radius(rho_max, n));
    }
    let probe_rho = 0.99 * rho_max;
    let curve_simple = curve_simplicity(m, convention, probe_rho, REPORT_CURVE_NODES)?;
    Ok(RadiusReport {
        order_m: m,
        convention,
        roots,
        rho_max,
        sigma_min,
        curve_simple,
        probe_rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localgf::MAX_RATIONAL_ORDER;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn small_order_roots() {
        let r = critical_points(2, Convention::PaperSquared).unwrap();
        let s13 = 13f64.sqrt();
        assert_eq!(r.len(), 2);
        assert!(close(r[0], Complex64::new((-4.0 + s13) / 3.0, 0.0), 1e-15));
        assert!(close(r[1], Complex64::new((-4.0 - s13) / 3.0, 0.0), 1e-14));

        for conv in [Convention::PaperSquared, Convention::DerivedSingle] {
            let r1 = critical_points(1, conv).unwrap();
            assert_eq!(r1, vec![Complex64::new(-1.0, 0.0)]);
        }

        let d = critical_points(2, Convention::DerivedSingle).unwrap();
        let s3 = 3f64.sqrt();
        assert!(close(d[0], Complex64::new(-2.0 + s3, 0.0), 1e-15));
        assert!(close(d[1], Complex64::new(-2.0 - s3, 0.0), 1e-14));
    }

    #[test]
    fn radii_and_thresholds() {
        let r = injectivity_radius(2, Convention::PaperSquared).unwrap();
        assert!((r - 0.1315).abs() < 1e-3);
        assert_eq!(injectivity_radius(1, Convention::DerivedSingle).unwrap(), 1.0);
        let d = injectivity_radius(2, Convention::DerivedSingle).unwrap();
        assert!((d - (2.0 - 3f64.sqrt())).abs() < 1e-15);

        let s = sigma_threshold(2, Convention::PaperSquared, 2).unwrap();
        assert!((s - 2.93).abs() < 0.01, "{s}");
        assert_eq!(sigma_threshold(1, Convention::PaperSquared, 7).unwrap(), 0.0);
        let sd = sigma_threshold(2, Convention::DerivedSingle, 2).unwrap();
        assert!((sd - 1.90).abs() < 0.005, "{sd}");
        assert!(sigma_threshold(2, Convention::DerivedSingle, 1).is_err());
    }

    #[test]
    fn threshold_decreases_in_norm() {
        for conv in [Convention::PaperSquared, Convention::DerivedSingle] {
            let s: Vec<f64> = [2u64, 3, 4, 5, 7, 9, 11]
                .iter()
                .map(|&n| sigma_threshold(3, conv, n).unwrap())
                .collect();
            assert!(s.windows(2).all(|w| w[1] < w[0]));
        }
    }

    /// Highest order at which `|p(r)| <= 1e-10 max|c_k|` is reachable with f64
    /// roots; beyond it the rounding of large roots alone exceeds the bound.
    fn literal_bound_order(conv: Convention) -> u32 {
        match conv {
            Convention::PaperSquared => 8,
            Convention::DerivedSingle => 5,
        }
    }

    #[test]
    fn residuals_and_conjugate_pairing_all_orders() {
        for conv in [Convention::PaperSquared, Convention::DerivedSingle] {
            for m in 1..=MAX_RATIONAL_ORDER {
                let map = build_rational_map(m, conv).unwrap();
                let roots = critical_points(m, conv).unwrap();
                assert_eq!(roots.len(), m as usize);
                let dd: Vec<Dd> = map.deriv_numerator_coeffs.iter().map(Dd::from_big).collect();
                let abs: Vec<f64> = map.deriv_numerator_f64().iter().map(|c| c.abs()).collect();
                let max_coeff = abs.iter().fold(0.0f64, |a, c| a.max(*c));
                for r in &roots {
                    let res = eval_dd(&dd, DdComplex::from_c(*r)).0.to_c().norm();
                    assert!(res <= ROOT_RESIDUAL_TOL * residual_scale(&abs, *r), "m={m} {conv}");
                    if m <= literal_bound_order(conv) {
                        assert!(res <= 1e-10 * max_coeff, "m={m} {conv} {:e}", res / max_coeff);
                    }
                    let partner = roots
                        .iter()
                        .map(|s| (s - r.conj()).norm())
                        .fold(f64::INFINITY, f64::min);
                    assert!(partner <= 1e-12 * r.norm().max(1.0));
                }
            }
        }
    }

    #[test]
    fn radius_nonincreasing_in_order_derived() {
        let radii: Vec<f64> = (1..=6)
            .map(|m| injectivity_radius(m, Convention::DerivedSingle).unwrap())
            .collect();
        assert!(radii.windows(2).all(|w| w[1] <= w[0]), "{radii:?}");
    }

    #[test]
    fn curve_simplicity_examples() {
        assert!(curve_simplicity(1, Convention::DerivedSingle, 0.5, 4096).unwrap());
        let r = injectivity_radius(2, Convention::PaperSquared).unwrap();
        assert!(curve_simplicity(2, Convention::PaperSquared, 0.99 * r, 8192).unwrap());
        assert!(!curve_simplicity(2, Convention::PaperSquared, 0.9, 8192).unwrap());
        assert!(curve_simplicity(2, Convention::PaperSquared, 1.0, 64).is_err());
    }

    #[test]
    fn polygon_crossing_detection() {
        let square = [
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(1.0, 1.0),
            Complex64::new(0.0, 1.0),
        ];
        assert!(polygon_is_simple(&square));
        let bowtie = [
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 1.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
        ];
        assert!(!polygon_is_simple(&bowtie));
    }

    #[test]
    fn report_fields() {
        let rep = radius_report(2, Convention::PaperSquared, &[2, 3]).unwrap();
        assert!((rep.sigma_min[&2] - 2.93).abs() < 0.01);
        assert!(rep.sigma_min[&3] < rep.sigma_min[&2]);
        assert!(rep.curve_simple);
        assert!(rep.rho_max <= rep.roots.iter().map(|r| r.norm()).fold(1.0, f64::min));
    }
}


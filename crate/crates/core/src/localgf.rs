//! Local g-functions: the contribution of one Euler factor to the m-th
//! derivative of L'/L, as a function of the unit-circle variable.
//!
//! The coefficient of `u^k / (1-u)^(k+1)` is selectable. `DerivedSingle`
//! uses `k! S(m,k)`, which is what differentiating the Dirichlet series
//! `-log N * sum u^n` term by term produces. `PaperSquared` uses
//! `(k!)^2 S(m,k)`. The two agree at `m = 1` only.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_complex::Complex64;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::primesys::PrimeSite;

/// Largest derivative order for which exact rational maps are built.
pub const MAX_RATIONAL_ORDER: u32 = 12;

/// Unit-modulus tolerance for circle variables.
pub const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    #[serde(rename = "paper")]
    PaperSquared,
    #[serde(rename = "derived")]
    DerivedSingle,
}

impl Convention {
    /// Coefficient of `u^k/(1-u)^(k+1)` for derivative order `m`.
    pub fn coefficient(self, m: u32, k: u32) -> u128 {
        let s = stirling2(m, k);
        let f = factorial(k);
        match self {
            Convention::PaperSquared => f * f * s,
            Convention::DerivedSingle => f * s,
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Convention::PaperSquared => write!(f, "paper"),
            Convention::DerivedSingle => write!(f, "derived"),
        }
    }
}

impl FromStr for Convention {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "paper" | "paper-squared" | "papersquared" => Ok(Convention::PaperSquared),
            "derived" | "derived-single" | "derivedsingle" => Ok(Convention::DerivedSingle),
            other => Err(format!("unknown convention `{other}` (expected paper|derived)")),
        }
    }
}

/// Parameters of the point `s = sigma + i*imag_t` and the derivative order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GParams {
    pub sigma: f64,
    pub order_m: u32,
    pub imag_t: f64,
    pub convention: Convention,
}

impl GParams {
    pub fn new(sigma: f64, order_m: u32, convention: Convention) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
        }
        if order_m < 1 {
            return Err(Error::Domain("derivative order must be at least 1".into()));
        }
        Ok(GParams {
            sigma,
            order_m,
            imag_t: 0.0,
            convention,
        })
    }

    pub fn with_imag_t(mut self, imag_t: f64) -> Self {
        self.imag_t = imag_t;
        self
    }

    /// Shorthand used throughout the tests: `m`-th derivative, derived convention.
    pub fn derived(sigma: f64, order_m: u32) -> Result<Self> {
        Self::new(sigma, order_m, Convention::DerivedSingle)
    }
}

pub fn factorial(k: u32) -> u128 {
    (1..=k as u128).product()
}

/// Stirling number of the second kind, `S(r, k)`. Zero when `k > r`.
pub fn stirling2(r: u32, k: u32) -> u128 {
    if k > r {
        return 0;
    }
    let (r, k) = (r as usize, k as usize);
    let mut row = vec![0u128; k + 1];
    row[0] = 1;
    for n in 1..=r {
        for j in (1..=k.min(n)).rev() {
            row[j] = (j as u128)
                .checked_mul(row[j])
                .and_then(|v| v.checked_add(row[j - 1]))
                .expect("Stirling number overflows u128");
        }
        row[0] = 0;
    }
    row[k]
}

fn check_unit(t: Complex64) -> Result<()> {
    if (t.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::Domain(format!(
            "circle variable {t} has modulus {} (not 1)",
            t.norm()
        )));
    }
    Ok(())
}

/// `u = N^{-sigma} * t * N^{-i imag_t}`.
fn local_u(site: &PrimeSite, params: &GParams, t: Complex64) -> Complex64 {
    let q = (-params.sigma * site.log_norm).exp();
    t * Complex64::from_polar(q, -params.imag_t * site.log_norm)
}

/// `g_{sigma,m,site}(t)` in closed form.
pub fn g_local(site: &PrimeSite, params: &GParams, t: Complex64) -> Result<Complex64> {
    check_unit(t)?;
    Ok(g_local_unchecked(site, params, t))
}

pub(crate) fn g_local_unchecked(site: &PrimeSite, params: &GParams, t: Complex64) -> Complex64 {
    let m = params.order_m;
    let u = local_u(site, params, t);
    let inv = 1.0 / (Complex64::new(1.0, 0.0) - u);
    let ratio = u * inv;
    let mut term = inv; // u^k / (1-u)^{k+1}, starting at k = 0
    let mut acc = Complex64::zero();
    for k in 1..=m {
        term *= ratio;
        acc += term * params.convention.coefficient(m, k) as f64;
    }
    acc * (-site.log_norm).powi(m as i32 + 1)
}

/// Precomputed evaluator for one site: coefficients and the prefactor are
/// resolved once, then evaluated at many circle points.
#[derive(Debug, Clone)]
pub struct LocalEvaluator {
    q: f64,
    twist: Complex64,
    coeffs: Vec<f64>,
    prefactor: f64,
}

impl LocalEvaluator {
    pub fn new(site: &PrimeSite, params: &GParams) -> Self {
        let m = params.order_m;
        LocalEvaluator {
            q: (-params.sigma * site.log_norm).exp(),
            twist: Complex64::from_polar(1.0, -params.imag_t * site.log_norm),
            coeffs: (1..=m)
                .map(|k| params.convention.coefficient(m, k) as f64)
                .collect(),
            prefactor: (-site.log_norm).powi(m as i32 + 1),
        }
    }

    #[inline]
    pub fn eval(&self, t: Complex64) -> Complex64 {
        let u = t * self.twist * self.q;
        let inv = 1.0 / (Complex64::new(1.0, 0.0) - u);
        let ratio = u * inv;
        let mut term = inv;
        let mut acc = Complex64::zero();
        for c in &self.coeffs {
            term *= ratio;
            acc += term * *c;
        }
        acc * self.prefactor
    }

    /// Value at angle `theta`, i.e. at `t = e^{i theta}`.
    #[inline]
    pub fn eval_angle(&self, theta: f64) -> Complex64 {
        self.eval(Complex64::from_polar(1.0, theta))
    }

    /// `N^{-sigma}`.
    pub fn radius(&self) -> f64 {
        self.q
    }
}

/// Term-by-term differentiated Dirichlet series of the local log-derivative,
/// `(-log N)^{m+1} sum_{n>=1} n^m u^n`. Allows `order = 0`, which is the
/// local log-derivative itself.
pub fn series_oracle_raw(
    site: &PrimeSite,
    order: u32,
    sigma: f64,
    imag_t: f64,
    t: Complex64,
    rel_tol: f64,
) -> Result<Complex64> {
    if !(sigma > 0.0) {
        return Err(Error::Divergence(format!(
            "Dirichlet series diverges for sigma = {sigma}"
        )));
    }
    if !(rel_tol > 0.0) {
        return Err(Error::Domain("rel_tol must be positive".into()));
    }
    check_unit(t)?;
    let q = (-sigma * site.log_norm).exp();
    if q >= 1.0 {
        return Err(Error::Divergence("N^-sigma >= 1".into()));
    }
    let u = t * Complex64::from_polar(q, -imag_t * site.log_norm);
    let m = order as i32;
    let mut partial = Complex64::zero();
    let mut upow = Complex64::new(1.0, 0.0);
    let mut n: u64 = 0;
    loop {
        n += 1;
        upow *= u;
        let nm = (n as f64).powi(m);
        partial += upow * nm;
        let mag = nm * q.powi(n as i32);
        // tail of sum_{j>n} j^m q^j is at most mag * r/(1-r) once r < 1
        let r = ((n + 1) as f64 / n as f64).powi(m) * q;
        if r < 1.0 && mag * r / (1.0 - r) < rel_tol * partial.norm() {
            break;
        }
        if n > 10_000_000 {
            return Err(Error::Divergence("series oracle failed to converge".into()));
        }
    }
    Ok(partial * (-site.log_norm).powi(m + 1))
}

pub fn series_oracle(
    site: &PrimeSite,
    params: &GParams,
    t: Complex64,
    rel_tol: f64,
) -> Result<Complex64> {
    series_oracle_raw(site, params.order_m, params.sigma, params.imag_t, t, rel_tol)
}

fn serialize_bigints<S: Serializer>(v: &[BigInt], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|c| c.to_string()))
}

/// `w_m(z)` with the `(-log N)^{m+1}` prefactor stripped:
/// `numerator(z) / (1-z)^{m+1}`, and its derivative `deriv_numerator(z) / (1-z)^{m+2}`.
/// Coefficients are listed from the constant term upward.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RationalMap {
    pub order_m: u32,
    pub convention: Convention,
    #[serde(serialize_with = "serialize_bigints")]
    pub numerator_coeffs: Vec<BigInt>,
    #[serde(serialize_with = "serialize_bigints")]
    pub deriv_numerator_coeffs: Vec<BigInt>,
}

impl RationalMap {
    pub fn numerator_f64(&self) -> Vec<f64> {
        self.numerator_coeffs.iter().map(big_to_f64).collect()
    }

    pub fn deriv_numerator_f64(&self) -> Vec<f64> {
        self.deriv_numerator_coeffs.iter().map(big_to_f64).collect()
    }

    /// Evaluates the stripped `w_m(z)`.
    pub fn eval(&self, z: Complex64) -> Complex64 {
        let num = horner(&self.numerator_f64(), z);
        num / (Complex64::new(1.0, 0.0) - z).powi(self.order_m as i32 + 1)
    }
}

pub(crate) fn big_to_f64(b: &BigInt) -> f64 {
    b.to_f64().unwrap_or(f64::NAN)
}

pub(crate) fn horner(coeffs: &[f64], z: Complex64) -> Complex64 {
    coeffs
        .iter()
        .rev()
        .fold(Complex64::zero(), |acc, &c| acc * z + c)
}

fn poly_mul(a: &[BigInt], b: &[BigInt]) -> Vec<BigInt> {
    let mut out = vec![BigInt::zero(); a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add_assign(acc: &mut Vec<BigInt>, b: &[BigInt]) {
    if acc.len() < b.len() {
        acc.resize(b.len(), BigInt::zero());
    }
    for (a, y) in acc.iter_mut().zip(b) {
        *a += y;
    }
}

fn poly_scale(a: &[BigInt], s: &BigInt) -> Vec<BigInt> {
    a.iter().map(|x| x * s).collect()
}

fn poly_derivative(a: &[BigInt]) -> Vec<BigInt> {
    if a.len() <= 1 {
        return vec![BigInt::zero()];
    }
    a.iter()
        .enumerate()
        .skip(1)
        .map(|(i, c)| c * BigInt::from(i))
        .collect()
}

fn poly_trim(mut a: Vec<BigInt>) -> Vec<BigInt> {
    while a.len() > 1 && a.last().is_some_and(|c| c.is_zero()) {
        a.pop();
    }
    a
}

/// Builds the exact integer numerators of `w_m` and `w_m'`.
pub fn build_rational_map(m: u32, convention: Convention) -> Result<RationalMap> {
    if m < 1 {
        return Err(Error::Domain("order must be at least 1".into()));
    }
    if m > MAX_RATIONAL_ORDER {
        return Err(Error::Capability(format!(
            "rational maps are built for orders 1..={MAX_RATIONAL_ORDER}, got {m}"
        )));
    }
    let one_minus_z = [BigInt::one(), -BigInt::one()];
    // numerator = sum_k c_k z^k (1-z)^{m-k}
    let mut numerator = vec![BigInt::zero()];
    for k in 1..=m {
        let c = BigInt::from(convention.coefficient(m, k));
        let mut term = vec![BigInt::zero(); k as usize];
        term.push(c);
        for _ in 0..(m - k) {
            term = poly_mul(&term, &one_minus_z);
        }
        poly_add_assign(&mut numerator, &term);
    }
    let numerator = poly_trim(numerator);
    // d/dz [N (1-z)^{-(m+1)}] = [N' (1-z) + (m+1) N] (1-z)^{-(m+2)}
    let mut deriv = poly_mul(&poly_derivative(&numerator), &one_minus_z);
    poly_add_assign(&mut deriv, &poly_scale(&numerator, &BigInt::from(m + 1)));
    Ok(RationalMap {
        order_m: m,
        convention,
        numerator_coeffs: numerator,
        deriv_numerator_coeffs: poly_trim(deriv),
    })
}

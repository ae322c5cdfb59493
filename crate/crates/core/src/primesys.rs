//! Prime sites of the rationals or of an imaginary quadratic field, indexed by norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The base field: either the rationals or an imaginary quadratic field given
/// by its (negative, fundamental) discriminant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NumberField {
    Rationals,
    ImaginaryQuadratic { discriminant: i64 },
}

impl NumberField {
    pub fn rationals() -> Self {
        NumberField::Rationals
    }

    /// Validates that `d` is a negative fundamental discriminant.
    pub fn imaginary_quadratic(d: i64) -> Result<Self> {
        if d >= 0 {
            return Err(Error::InvalidField(format!("discriminant {d} is not negative")));
        }
        if !is_fundamental_discriminant(d) {
            return Err(Error::InvalidField(format!(
                "{d} is not a fundamental discriminant"
            )));
        }
        Ok(NumberField::ImaginaryQuadratic { discriminant: d })
    }

    pub fn is_rationals(&self) -> bool {
        matches!(self, NumberField::Rationals)
    }

    /// Largest number of prime ideals that can share a single norm.
    pub(crate) fn max_sites_per_norm(&self) -> f64 {
        match self {
            NumberField::Rationals => 1.0,
            NumberField::ImaginaryQuadratic { .. } => 2.0,
        }
    }
}

fn is_squarefree(n: u64) -> bool {
    let mut n = n;
    let mut d = 2u64;
    while d * d <= n {
        if n % d == 0 {
            n /= d;
            if n % d == 0 {
                return false;
            }
        }
        d += 1;
    }
    true
}

fn is_fundamental_discriminant(d: i64) -> bool {
    if d == 0 || d == 1 {
        return false;
    }
    match d.rem_euclid(4) {
        1 => is_squarefree(d.unsigned_abs()),
        0 => {
            let k = d / 4;
            matches!(k.rem_euclid(4), 2 | 3) && is_squarefree(k.unsigned_abs())
        }
        _ => false,
    }
}

/// One non-archimedean prime of the base field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimeSite {
    pub residue_prime: u64,
    pub norm: u64,
    #[serde(skip)]
    pub log_norm: f64,
}

impl PrimeSite {
    pub fn new(residue_prime: u64, norm: u64) -> Self {
        PrimeSite {
            residue_prime,
            norm,
            log_norm: (norm as f64).ln(),
        }
    }

    /// A site of ℚ with norm `p`.
    pub fn rational(p: u64) -> Self {
        Self::new(p, p)
    }
}

/// All sites of a field with norm at most `cutoff_y`, sorted by (norm, residue prime).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimeSystem {
    pub field: NumberField,
    pub cutoff_y: f64,
    pub sites: Vec<PrimeSite>,
}

impl PrimeSystem {
    /// A system built from explicit sites; sorted on construction.
    pub fn from_sites(field: NumberField, cutoff_y: f64, mut sites: Vec<PrimeSite>) -> Self {
        sites.sort_by(|a, b| (a.norm, a.residue_prime).cmp(&(b.norm, b.residue_prime)));
        PrimeSystem {
            field,
            cutoff_y,
            sites,
        }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn norms(&self) -> Vec<u64> {
        self.sites.iter().map(|s| s.norm).collect()
    }

    /// The system truncated to its first `k` sites.
    pub fn prefix(&self, k: usize) -> PrimeSystem {
        PrimeSystem {
            field: self.field,
            cutoff_y: self
                .sites
                .get(k.saturating_sub(1))
                .map(|s| s.norm as f64)
                .unwrap_or(0.0),
            sites: self.sites[..k.min(self.sites.len())].to_vec(),
        }
    }
}

/// Primes up to `n` (inclusive) by an odd-only sieve of Eratosthenes.
pub fn primes_up_to(n: u64) -> Vec<u64> {
    if n < 2 {
        return Vec::new();
    }
    let n = n as usize;
    // index i represents 2i + 1
    let half = (n - 1) / 2 + 1;
    let mut composite = vec![false; half];
    composite[0] = true;
    let mut i = 1;
    while (2 * i + 1) * (2 * i + 1) <= n {
        if !composite[i] {
            let p = 2 * i + 1;
            let mut j = p * p / 2;
            while j < half {
                composite[j] = true;
                j += p;
            }
        }
        i += 1;
    }
    let mut out = vec![2u64];
    out.extend(
        composite
            .iter()
            .enumerate()
            .filter(|(_, &c)| !c)
            .map(|(i, _)| (2 * i + 1) as u64),
    );
    out
}

fn pow_mod(base: u64, mut exp: u64, m: u64) -> u64 {
    let m128 = m as u128;
    let mut b = (base % m) as u128;
    let mut acc = 1u128 % m128;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % m128;
        }
        b = b * b % m128;
        exp >>= 1;
    }
    acc as u64
}

/// Kronecker symbol (D | p) for a prime `p`.
pub fn kronecker(d: i64, p: u64) -> i8 {
    if p == 2 {
        return match d.rem_euclid(8) {
            0 | 2 | 4 | 6 => 0,
            1 | 7 => 1,
            _ => -1,
        };
    }
    let r = d.rem_euclid(p as i64) as u64;
    if r == 0 {
        return 0;
    }
    if pow_mod(r, (p - 1) / 2, p) == 1 {
        1
    } else {
        -1
    }
}

/// Sites of `field` with norm at most `y`. An empty system when `y < 2`.
pub fn enumerate_sites(field: NumberField, y: f64) -> PrimeSystem {
    let mut sites = Vec::new();
    if y >= 2.0 {
        let ymax = y.floor() as u64;
        for p in primes_up_to(ymax) {
            match field {
                NumberField::Rationals => sites.push(PrimeSite::rational(p)),
                NumberField::ImaginaryQuadratic { discriminant } => {
                    match kronecker(discriminant, p) {
                        1 => {
                            sites.push(PrimeSite::new(p, p));
                            sites.push(PrimeSite::new(p, p));
                        }
                        0 => sites.push(PrimeSite::new(p, p)),
                        _ => {
                            if let Some(n) = p.checked_mul(p) {
                                if n <= ymax {
                                    sites.push(PrimeSite::new(p, n));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    PrimeSystem::from_sites(field, y, sites)
}

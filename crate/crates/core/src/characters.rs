//! Dirichlet characters of odd prime conductor over the rationals, and the
//! nested family average: an inner average over the characters of one
//! conductor, then an outer average over conductors up to a cutoff.

use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localgf::{GParams, LocalEvaluator};
use crate::primesys::{primes_up_to, PrimeSystem};
use crate::torus::{AverageEstimate, Functional, Moments};

/// Moduli up to this size get a full discrete-log table.
const DLOG_TABLE_LIMIT: u64 = 100_000;

fn pow_mod(base: u64, mut exp: u64, m: u64) -> u64 {
    let m = m as u128;
    let mut b = base as u128 % m;
    let mut acc = 1u128 % m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % m;
        }
        b = b * b % m;
        exp >>= 1;
    }
    acc as u64
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

fn distinct_prime_factors(mut n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            out.push(d);
            while n % d == 0 {
                n /= d;
            }
        }
        d += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

fn check_odd_prime(f: u64) -> Result<()> {
    if f < 3 || !is_prime(f) {
        return Err(Error::Domain(format!("{f} is not an odd prime")));
    }
    Ok(())
}

/// Smallest primitive root modulo the odd prime `f`.
pub fn primitive_root(f: u64) -> Result<u64> {
    check_odd_prime(f)?;
    let factors = distinct_prime_factors(f - 1);
    (2..f)
        .find(|&g| factors.iter().all(|&q| pow_mod(g, (f - 1) / q, f) != 1))
        .ok_or_else(|| Error::Domain(format!("no primitive root mod {f}")))
}

/// Discrete logarithms base a primitive root modulo an odd prime.
#[derive(Debug, Clone)]
pub struct DiscreteLog {
    pub modulus: u64,
    pub generator: u64,
    table: Option<Vec<u32>>,
}

impl DiscreteLog {
    pub fn new(f: u64) -> Result<Self> {
        let g = primitive_root(f)?;
        let table = (f <= DLOG_TABLE_LIMIT).then(|| {
            let mut t = vec![0u32; f as usize];
            let mut x = 1u64;
            for k in 0..(f - 1) {
                t[x as usize] = k as u32;
                x = x * g % f;
            }
            t
        });
        Ok(DiscreteLog {
            modulus: f,
            generator: g,
            table,
        })
    }

    /// `k` with `g^k = n (mod f)`; `None` when `f | n`.
    pub fn log(&self, n: i64) -> Option<u64> {
        let f = self.modulus;
        let r = n.rem_euclid(f as i64) as u64;
        if r == 0 {
            return None;
        }
        match &self.table {
            Some(t) => Some(t[r as usize] as u64),
            None => Some(self.bsgs(r)),
        }
    }

    fn bsgs(&self, target: u64) -> u64 {
        let f = self.modulus;
        let order = f - 1;
        let step = (order as f64).sqrt().ceil() as u64;
        let mut baby = std::collections::HashMap::with_capacity(step as usize);
        let mut x = 1u64;
        for j in 0..step {
            baby.entry(x).or_insert(j);
            x = (x as u128 * self.generator as u128 % f as u128) as u64;
        }
        // g^{-step}
        let giant = pow_mod(self.generator, order - step % order, f);
        let mut y = target;
        for i in 0..=step {
            if let Some(&j) = baby.get(&y) {
                return (i * step + j) % order;
            }
            y = (y as u128 * giant as u128 % f as u128) as u64;
        }
        unreachable!("every unit is a power of a primitive root")
    }
}

/// `chi_j(g^k) = exp(2 pi i j k / (f - 1))` modulo an odd prime `f`.
#[derive(Debug, Clone)]
pub struct DirichletCharacter {
    pub conductor_f: u64,
    pub generator: u64,
    pub index_j: u64,
    pub is_even: bool,
    dlog: Arc<DiscreteLog>,
}

impl DirichletCharacter {
    pub fn new(dlog: Arc<DiscreteLog>, index_j: u64) -> Result<Self> {
        let f = dlog.modulus;
        if index_j == 0 || index_j > f - 2 {
            return Err(Error::Domain(format!(
                "character index {index_j} outside [1, {}]",
                f - 2
            )));
        }
        Ok(DirichletCharacter {
            conductor_f: f,
            generator: dlog.generator,
            index_j,
            is_even: index_j % 2 == 0,
            dlog,
        })
    }

    /// Phase `j * dlog(n) / (f - 1)` in turns, or `None` when `f | n`.
    pub fn turns(&self, n: i64) -> Option<f64> {
        let order = self.conductor_f - 1;
        self.dlog
            .log(n)
            .map(|k| ((self.index_j as u128 * k as u128) % order as u128) as f64 / order as f64)
    }
}

pub fn char_value(chi: &DirichletCharacter, n: i64) -> Complex64 {
    match chi.turns(n) {
        None => Complex64::new(0.0, 0.0),
        Some(t) => Complex64::from_polar(1.0, TAU * t),
    }
}

/// Non-principal characters mod `f`, optionally only the even ones.
pub fn enumerate_family(f: u64, even_only: bool) -> Result<Vec<DirichletCharacter>> {
    let dlog = Arc::new(DiscreteLog::new(f)?);
    (1..=f - 2)
        .filter(|j| !even_only || j % 2 == 0)
        .map(|j| DirichletCharacter::new(dlog.clone(), j))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub conductor_max: u64,
    pub even_only: bool,
    pub exclude_principal: bool,
}

impl FamilySpec {
    pub fn new(conductor_max: u64) -> Self {
        FamilySpec {
            conductor_max,
            even_only: true,
            exclude_principal: true,
        }
    }
}

/// Inner average over one conductor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConductorTrace {
    pub conductor: u64,
    pub n_characters: u64,
    pub inner_average: Complex64,
}

fn rational_residues(system: &PrimeSystem) -> Result<Vec<u64>> {
    if !system.field.is_rationals() {
        return Err(Error::Contract(
            "character families are only available over the rationals".into(),
        ));
    }
    Ok(system.sites.iter().map(|s| s.residue_prime).collect())
}

/// Odd prime conductors up to the cutoff that are coprime to every site and
/// have at least one admissible character.
fn admissible_conductors(spec: &FamilySpec, residues: &[u64]) -> Vec<u64> {
    primes_up_to(spec.conductor_max)
        .into_iter()
        .filter(|&f| f >= 3 && !residues.contains(&f))
        .filter(|&f| !(spec.even_only && spec.exclude_principal && f == 3))
        .collect()
}

/// Averages `phi` of the turn vector `(j * dlog(p) / (f-1))_p` over the
/// admissible characters mod `f`.
fn inner_average<F>(
    f: u64,
    residues: &[u64],
    even_only: bool,
    exclude_principal: bool,
    phi: &F,
) -> Result<ConductorTrace>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    let dlog = DiscreteLog::new(f)?;
    let order = f - 1;
    let logs: Vec<u64> = residues
        .iter()
        .map(|&p| dlog.log(p as i64).expect("conductor is coprime to every site"))
        .collect();
    let step = if even_only { 2 } else { 1 };
    let mut turns = vec![0.0; logs.len()];
    let mut acc = Complex64::new(0.0, 0.0);
    let mut count = 0u64;
    let mut j = if exclude_principal { step } else { 0 };
    while j <= f - 2 {
        for (t, &k) in turns.iter_mut().zip(&logs) {
            *t = ((j as u128 * k as u128) % order as u128) as f64 / order as f64;
        }
        acc += phi(&turns);
        count += 1;
        j += step;
    }
    Ok(ConductorTrace {
        conductor: f,
        n_characters: count,
        inner_average: acc / count as f64,
    })
}

/// Nested family average of an arbitrary function of the turn vectors,
/// reduced in conductor order.
fn nested_average<F>(spec: &FamilySpec, residues: &[u64], phi: F) -> Result<(AverageEstimate, Vec<ConductorTrace>)>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    let conductors = admissible_conductors(spec, residues);
    if conductors.is_empty() {
        return Err(Error::NoAdmissibleConductor(spec.conductor_max));
    }
    let trace: Vec<ConductorTrace> = conductors
        .par_iter()
        .map(|&f| inner_average(f, residues, spec.even_only, spec.exclude_principal, &phi))
        .collect::<Result<_>>()?;
    let mut spread = Moments::default();
    let mut total = Complex64::new(0.0, 0.0);
    for t in &trace {
        total += t.inner_average;
        spread.push(t.inner_average);
    }
    Ok((
        AverageEstimate {
            value: total / trace.len() as f64,
            stderr: spread.stderr(),
            n_samples: trace.iter().map(|t| t.n_characters).sum(),
            seed: 0,
        },
        trace,
    ))
}

/// Family average of `Phi(L_P^{(m)}(chi, s))`, with the per-conductor trace.
/// `stderr` is the standard error of the inner averages across conductors.
pub fn family_average_traced(
    spec: &FamilySpec,
    system: &PrimeSystem,
    params: &GParams,
    functional: &Functional,
) -> Result<(AverageEstimate, Vec<ConductorTrace>)> {
    let residues = rational_residues(system)?;
    let evals: Vec<LocalEvaluator> = system
        .sites
        .iter()
        .map(|s| LocalEvaluator::new(s, params))
        .collect();
    nested_average(spec, &residues, |turns| {
        let g: Complex64 = evals
            .iter()
            .zip(turns)
            .map(|(e, &t)| e.eval_angle(TAU * t))
            .sum();
        functional.eval(g)
    })
}

pub fn family_average(
    spec: &FamilySpec,
    system: &PrimeSystem,
    params: &GParams,
    functional: &Functional,
) -> Result<AverageEstimate> {
    family_average_traced(spec, system, params, functional).map(|(e, _)| e)
}

fn weyl_phase(turns: &[f64], exponents: &[i64]) -> Complex64 {
    let t: f64 = turns
        .iter()
        .zip(exponents)
        .map(|(&t, &k)| t * k as f64)
        .sum();
    Complex64::from_polar(1.0, TAU * t.rem_euclid(1.0))
}

fn check_exponents(system: &PrimeSystem, exponents: &[i64]) -> Result<()> {
    if exponents.len() != system.len() {
        return Err(Error::Contract(format!(
            "{} exponents for {} sites",
            exponents.len(),
            system.len()
        )));
    }
    Ok(())
}

/// Family average of `prod chi(p_i)^{k_i}`.
pub fn weyl_discrepancy_traced(
    spec: &FamilySpec,
    system: &PrimeSystem,
    exponents: &[i64],
) -> Result<(Complex64, Vec<ConductorTrace>)> {
    check_exponents(system, exponents)?;
    let residues = rational_residues(system)?;
    nested_average(spec, &residues, |turns| weyl_phase(turns, exponents)).map(|(e, t)| (e.value, t))
}

pub fn weyl_discrepancy(spec: &FamilySpec, system: &PrimeSystem, exponents: &[i64]) -> Result<Complex64> {
    weyl_discrepancy_traced(spec, system, exponents).map(|(v, _)| v)
}

/// Inner Weyl average over the non-principal characters mod `f`.
pub fn conductor_weyl(
    f: u64,
    system: &PrimeSystem,
    exponents: &[i64],
    even_only: bool,
) -> Result<ConductorTrace> {
    check_odd_prime(f)?;
    check_exponents(system, exponents)?;
    let residues = rational_residues(system)?;
    if residues.contains(&f) {
        return Err(Error::Domain(format!("conductor {f} divides a site")));
    }
    if even_only && f == 3 {
        return Err(Error::Domain("no even non-principal character mod 3".into()));
    }
    inner_average(f, &residues, even_only, true, &|t: &[f64]| weyl_phase(t, exponents))
}

//! `mdist`: command-line front end for the value-distribution toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdist_core::localgf::{Convention, GParams};
use mdist_core::primesys::NumberField;
use mdist_core::torus::Functional;
use serde::Serialize;

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "mdist", version, about = "Value distributions of derivatives of L'/L over Euler-product truncations")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GlobalArgs {
    /// Output file; a `<out>.manifest.json` is written next to it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print structured JSON on stdout instead of a table.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "MDIST_THREADS", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List the prime sites of a field up to a norm cutoff.
    Sites(SitesArgs),
    /// Tabulate the local g-function around the unit circle.
    Gvalues(GvaluesArgs),
    /// Compare both coefficient conventions against the power series.
    VerifyDerivative(VerifyArgs),
    /// Torus average of a functional, by Monte Carlo or quadrature.
    Average(AverageArgs),
    /// Upper bound on the truncation error beyond a cutoff.
    Tailbound(TailboundArgs),
    /// Density on a square grid, written as CSV.
    Density(DensityArgs),
    /// Low-order moments of the density against Monte Carlo.
    Moments(MomentsArgs),
    /// Critical points and injectivity radius of the local map.
    Radius(RadiusArgs),
    /// Average of a functional over a family of Dirichlet characters.
    FamilyAvg(FamilyArgs),
    /// Weyl sums of character values over a family.
    Weyl(WeylArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
pub enum FieldName {
    #[value(name = "Q", alias = "q")]
    Q,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FieldArgs {
    #[arg(long, value_enum, default_value = "Q", conflicts_with = "disc")]
    pub field: FieldName,
    /// Negative fundamental discriminant of an imaginary quadratic field.
    #[arg(long, allow_negative_numbers = true)]
    pub disc: Option<i64>,
}

impl FieldArgs {
    pub fn field(&self) -> anyhow::Result<NumberField> {
        Ok(match self.disc {
            Some(d) => NumberField::imaginary_quadratic(d)?,
            None => NumberField::Rationals,
        })
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GArgs {
    #[arg(long, value_parser = positive_f64)]
    pub sigma: f64,
    /// Derivative order m.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=64))]
    pub order: u32,
    #[arg(long, default_value = "derived")]
    pub convention: Convention,
    /// Imaginary part of s.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub imag_t: f64,
}

impl GArgs {
    pub fn params(&self) -> anyhow::Result<GParams> {
        Ok(GParams::new(self.sigma, self.order, self.convention)?.with_imag_t(self.imag_t))
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SitesArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    #[arg(long, value_parser = nonnegative_f64)]
    pub cutoff: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct GvaluesArgs {
    /// Norm of the site (a prime power).
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub norm: u64,
    #[command(flatten)]
    pub g: GArgs,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..=1_000_000))]
    pub angles: u32,
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..=12))]
    pub max_order: u32,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..=4096))]
    pub angles: u32,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AverageMethod {
    Mc,
    Quad,
}

#[derive(Args, Debug, Serialize)]
pub struct AverageArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    #[arg(long, value_parser = nonnegative_f64)]
    pub cutoff: f64,
    #[command(flatten)]
    pub g: GArgs,
    /// `moment:a,b`, `psi:re,im`, `disc:re,im,r` or `rect:re0,re1,im0,im1`.
    #[arg(long, allow_hyphen_values = true)]
    pub functional: Functional,
    #[arg(long, value_enum, default_value = "mc")]
    pub method: AverageMethod,
    /// Monte Carlo sample count; accepts forms like `1e6`.
    #[arg(long, default_value = "1e6", value_parser = parse_count)]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Nodes per circle for quadrature.
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(64..=1_048_576))]
    pub nodes: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct TailboundArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    #[arg(long, value_parser = nonnegative_f64)]
    pub cutoff: f64,
    #[command(flatten)]
    pub g: GArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityMethod {
    Charfn,
    Histogram,
    Convolve,
}

#[derive(Args, Debug, Serialize)]
pub struct DensityArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    #[arg(long, value_parser = nonnegative_f64)]
    pub cutoff: f64,
    #[command(flatten)]
    pub g: GArgs,
    /// Points per axis; even, at least 8.
    #[arg(long, default_value_t = 256, value_parser = parse_grid)]
    pub grid: usize,
    #[arg(long, value_enum, default_value = "charfn")]
    pub method: DensityMethod,
    /// Half-width of the square; defaults to 1.1 x the support radius.
    #[arg(long, value_parser = positive_f64)]
    pub extent: Option<f64>,
    /// Gaussian smoothing standard deviation (charfn method).
    #[arg(long, value_parser = positive_f64)]
    pub smoothing: Option<f64>,
    /// Samples for the histogram method.
    #[arg(long, default_value = "1e6", value_parser = parse_count)]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Kernel width for the convolve method, in grid cells.
    #[arg(long, default_value_t = 2.0, value_parser = positive_f64)]
    pub bandwidth_cells: f64,
    /// Curve nodes per site for the convolve method.
    #[arg(long, default_value_t = 16384, value_parser = clap::value_parser!(u64).range(16..=16_777_216))]
    pub curve_nodes: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct MomentsArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    #[arg(long, value_parser = nonnegative_f64)]
    pub cutoff: f64,
    #[command(flatten)]
    pub g: GArgs,
    #[arg(long, default_value_t = 256, value_parser = parse_grid)]
    pub grid: usize,
    /// Largest total degree a+b.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(0..=8))]
    pub max_degree: u32,
    /// Monte Carlo samples for the comparison column (0 skips it).
    #[arg(long, default_value = "1e6", value_parser = parse_count_or_zero)]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct RadiusArgs {
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..=12))]
    pub order: u32,
    #[arg(long, default_value = "derived")]
    pub convention: Convention,
    /// Norms for the sigma threshold; comma separated or repeated.
    #[arg(long = "norm", default_value = "2", value_delimiter = ',', value_parser = clap::value_parser!(u64).range(2..))]
    pub norms: Vec<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct FamilyArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..=10_000_000))]
    pub conductor_max: u64,
    #[arg(long, value_parser = nonnegative_f64)]
    pub cutoff: f64,
    #[command(flatten)]
    pub g: GArgs,
    #[arg(long, allow_hyphen_values = true)]
    pub functional: Functional,
    /// Include odd characters (default: even characters only).
    #[arg(long)]
    pub include_odd: bool,
    /// Include per-conductor inner averages in the output.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct WeylArgs {
    /// One exponent per site, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    pub exponents: Vec<i64>,
    /// Norm cutoff; defaults to the smallest one giving as many sites as exponents.
    #[arg(long, value_parser = nonnegative_f64)]
    pub cutoff: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..=10_000_000))]
    pub conductor_max: u64,
    #[arg(long)]
    pub include_odd: bool,
    #[arg(long)]
    pub trace: bool,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {s}"))
    }
}

fn nonnegative_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a non-negative number, got {s}"))
    }
}

fn parse_count_or_zero(s: &str) -> Result<u64, String> {
    let v: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
    if !(v >= 0.0 && v <= 1e15 && v.fract() == 0.0) {
        return Err(format!("expected a whole count, got {s}"));
    }
    Ok(v as u64)
}

fn parse_count(s: &str) -> Result<u64, String> {
    match parse_count_or_zero(s)? {
        0 => Err("count must be positive".into()),
        n => Ok(n),
    }
}

fn parse_grid(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
    if n < 8 || n % 2 != 0 || n > 8192 {
        return Err(format!("grid must be an even number in [8, 8192], got {n}"));
    }
    Ok(n)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.global.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let g = &cli.global;
    let result = match &cli.command {
        Command::Sites(a) => commands::sites(g, a),
        Command::Gvalues(a) => commands::gvalues(g, a),
        Command::VerifyDerivative(a) => commands::verify_derivative(g, a),
        Command::Average(a) => commands::average(g, a),
        Command::Tailbound(a) => commands::tailbound(g, a),
        Command::Density(a) => commands::density(g, a),
        Command::Moments(a) => commands::moments(g, a),
        Command::Radius(a) => commands::radius(g, a),
        Command::FamilyAvg(a) => commands::family_avg(g, a),
        Command::Weyl(a) => commands::weyl(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

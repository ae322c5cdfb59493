//! Cross-checks between independent routes to the same quantity.

use mdist_core::characters::{family_average, FamilySpec};
use mdist_core::density::{
    convolve, curve_measure_with, global_charfn, histogram, reconstruct_density, GridDensity,
    ReconstructOptions,
};
use mdist_core::localgf::GParams;
use mdist_core::primesys::{enumerate_sites, NumberField, PrimeSite, PrimeSystem};
use mdist_core::torus::{mc_average, quad_average, Functional, Region};
use num_complex::Complex64;
use proptest::prelude::*;

fn rationals(y: f64) -> PrimeSystem {
    enumerate_sites(NumberField::Rationals, y)
}

#[test]
fn histogram_agrees_with_reconstruction() {
    let p = GParams::derived(1.5, 1).unwrap();
    let sys = rationals(20.0);
    let rec = reconstruct_density(&sys, &p, &ReconstructOptions::with_grid(64)).unwrap();
    let h = histogram(&sys, &p, 1_000_000, 1, 64, Some(rec.extent)).unwrap();
    let d = h.l1_distance(&rec).unwrap();
    assert!(d < 0.05, "L1 = {d}");
}

#[test]
fn psi_averages_converge_weakly() {
    let p = GParams::derived(1.5, 1).unwrap();
    let sys = rationals(13.0);
    let z = Complex64::new(2.0, -1.0);
    let exact = global_charfn(&sys, &p, z);
    let f = Functional::Psi { z };
    let mean_err = |n: u64| {
        (1..=3)
            .map(|seed| {
                let e = mc_average(&sys, &p, &f, n, seed).unwrap();
                let err = (e.value - exact).norm();
                assert!(err < 5.0 * e.stderr, "n={n} seed={seed} err={err}");
                err
            })
            .sum::<f64>()
            / 3.0
    };
    let coarse = mean_err(100_000);
    let fine = mean_err(1_000_000);
    assert!(fine < coarse, "{fine} vs {coarse}");
}

#[test]
fn second_moment_ignores_imaginary_shift() {
    let sys = rationals(3.0);
    let f = Functional::Moment { a: 1, b: 1 };
    let base = quad_average(&sys, &GParams::derived(1.2, 2).unwrap(), &f, 256).unwrap();
    for t in [0.5, 7.3, -40.0] {
        let p = GParams::derived(1.2, 2).unwrap().with_imag_t(t);
        let v = quad_average(&sys, &p, &f, 256).unwrap();
        assert!((v - base).norm() < 1e-12 * base.norm(), "t={t}");
    }
}

#[test]
fn quadrature_and_monte_carlo_agree() {
    let p = GParams::derived(1.5, 1).unwrap();
    let functionals = [
        Functional::Moment { a: 1, b: 1 },
        Functional::Moment { a: 2, b: 0 },
        Functional::Psi { z: Complex64::new(1.5, 0.5) },
        Functional::Indicator {
            region: Region::Disc {
                center: Complex64::new(-0.1, 0.0),
                radius: 0.3,
            },
        },
    ];
    for y in [2.0, 3.0] {
        let sys = rationals(y);
        for f in &functionals {
            let q = quad_average(&sys, &p, f, 512).unwrap();
            let mc = mc_average(&sys, &p, f, 400_000, 11).unwrap();
            let tol = 4.0 * mc.stderr + 1e-12;
            assert!((mc.value - q).norm() < tol, "{f} y={y}: {} vs {q}", mc.value);
        }
    }
}

/// `sum_ij g_ij exp(-i (xi x_i + eta y_j))` times the cell measure.
fn grid_transform(g: &GridDensity, k: i64, l: i64) -> Complex64 {
    let dxi = std::f64::consts::PI / g.extent;
    let n = g.grid_n;
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            let phase = -dxi * (k as f64 * g.coord(i) + l as f64 * g.coord(j));
            acc += Complex64::from_polar(g.at(i, j), phase);
        }
    }
    acc * g.cell_measure()
}

#[test]
fn transform_of_convolution_is_product() {
    let p = GParams::derived(1.5, 1).unwrap();
    let n = 128;
    let extent = 2.0;
    let h = 2.0 * 2.0 * extent / n as f64;
    let a = curve_measure_with(&PrimeSite::rational(2), &p, 8192)
        .unwrap()
        .rasterize(n, extent, h)
        .unwrap();
    let b = curve_measure_with(&PrimeSite::rational(3), &p, 8192)
        .unwrap()
        .rasterize(n, extent, h)
        .unwrap();
    let c = convolve(&a, &b).unwrap();
    let mut worst: f64 = 0.0;
    for k in -6..=6 {
        for l in -6..=6 {
            let lhs = grid_transform(&c, k, l);
            let rhs = grid_transform(&a, k, l) * grid_transform(&b, k, l);
            worst = worst.max((lhs - rhs).norm());
        }
    }
    assert!(worst < 1e-6 * a.mass * b.mass, "{worst}");
}

#[test]
fn histogram_converges_to_reconstruction() {
    let p = GParams::derived(1.5, 1).unwrap();
    let sys = rationals(20.0);
    let rec = reconstruct_density(&sys, &p, &ReconstructOptions::with_grid(64)).unwrap();
    for seed in 1..=3 {
        let l1 = |n: u64| {
            histogram(&sys, &p, n, seed, 64, Some(rec.extent))
                .unwrap()
                .l1_distance(&rec)
                .unwrap()
        };
        let (coarse, fine) = (l1(100_000), l1(1_000_000));
        assert!(fine < coarse, "seed {seed}: {fine} vs {coarse}");
    }
}

#[test]
fn family_psi_average_approaches_charfn() {
    let p = GParams::derived(1.5, 1).unwrap();
    let sys = rationals(5.0);
    let z = Complex64::new(1.0, 0.5);
    let exact = global_charfn(&sys, &p, z);
    let diffs: Vec<f64> = [200u64, 1000, 3000]
        .iter()
        .map(|&f| {
            let e = family_average(&FamilySpec::new(f), &sys, &p, &Functional::Psi { z }).unwrap();
            (e.value - exact).norm()
        })
        .collect();
    assert!(diffs.windows(2).all(|w| w[1] < w[0]), "{diffs:?}");
    assert!(diffs[2] < 0.02, "{diffs:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_round_trip(
        half in 4usize..12,
        extent in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        let n = 2 * half;
        let values: Vec<f64> = (0..n * n)
            .map(|k| {
                let x = (seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                (x >> 11) as f64 / (1u64 << 53) as f64 * 10f64.powi((k % 7) as i32 - 3)
            })
            .collect();
        let g = GridDensity::from_values(n, extent, values).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let back = GridDensity::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.grid_n, g.grid_n);
        prop_assert_eq!(back.extent, g.extent);
        prop_assert_eq!(back.values, g.values);
    }

    #[test]
    fn constant_functional_is_exact_for_any_seed(seed in any::<u64>()) {
        let p = GParams::derived(1.5, 1).unwrap();
        let sys = rationals(7.0);
        let e = mc_average(&sys, &p, &Functional::Moment { a: 0, b: 0 }, 1000, seed).unwrap();
        prop_assert!((e.value - 1.0).norm() == 0.0);
    }
}

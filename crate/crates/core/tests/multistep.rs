use multistep_fbsde::multistep::{approx_derivative, compute_coeffs, stability_report, Rational, MAX_STEPS};
use proptest::prelude::*;

fn q(n: i128, d: i128) -> Rational {
    Rational::new(n, d)
}

#[test]
fn published_weight_table() {
    let table: [&[Rational]; 6] = [
        &[q(-1, 1), q(1, 1)],
        &[q(-3, 2), q(2, 1), q(-1, 2)],
        &[q(-11, 6), q(3, 1), q(-3, 2), q(1, 3)],
        &[q(-25, 12), q(4, 1), q(-3, 1), q(4, 3), q(-1, 4)],
        &[q(-137, 60), q(5, 1), q(-5, 1), q(10, 3), q(-5, 4), q(1, 5)],
        &[q(-49, 20), q(6, 1), q(-15, 2), q(20, 3), q(-15, 4), q(6, 5), q(-1, 6)],
    ];
    for (i, row) in table.iter().enumerate() {
        let c = compute_coeffs(i + 1).unwrap();
        assert_eq!(c.scaled_alphas(), *row, "k = {}", i + 1);
    }
}

#[allow(clippy::excessive_precision)]
const MAX_ROOTS: [f64; 7] = [
    0.333333333333333,
    0.426401432711221,
    0.560861516093390,
    0.708710816266406,
    0.863380267869827,
    1.022218244361680,
    1.183869654207610,
];

#[test]
fn max_roots_match_high_precision_values() {
    for (i, w) in MAX_ROOTS.iter().enumerate() {
        let k = i + 2;
        let r = stability_report(&compute_coeffs(k).unwrap());
        assert!((r.max_abs_nontrivial - w).abs() < 1e-12, "k={k}: {}", r.max_abs_nontrivial);
        assert_eq!(r.stable, k < 7, "k={k}");
    }
}

/// The published four-digit table mixes truncation (k = 4, 6) and rounding.
#[test]
fn published_roots_are_four_digit_cuts() {
    let published = [0.3333, 0.4264, 0.5608, 0.7087, 0.8633, 1.0222, 1.1839];
    for (w, p) in MAX_ROOTS.iter().zip(published) {
        let truncated = (w * 1e4).floor() / 1e4;
        let rounded = (w * 1e4).round() / 1e4;
        assert!((p - truncated).abs() < 1e-9 || (p - rounded).abs() < 1e-9, "{w} vs {p}");
    }
}

#[test]
fn consistency_root_is_simple() {
    for k in 1..=MAX_STEPS {
        let r = stability_report(&compute_coeffs(k).unwrap());
        let near_one = r.roots.iter().filter(|z| (**z - 1.0).norm() < 1e-6).count();
        assert_eq!(near_one, 1, "k={k}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn weights_sum_to_zero(k in 1usize..=MAX_STEPS) {
        let c = compute_coeffs(k).unwrap();
        let s: Rational = c.scaled_alphas().iter().copied().sum();
        prop_assert_eq!(s, Rational::from_integer(0));
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_k(
        k in 1usize..=6,
        coeffs in prop::collection::vec(-2.0f64..2.0, 7),
        t0 in -1.0f64..1.0,
        dt in 0.01f64..0.2,
    ) {
        let c = compute_coeffs(k).unwrap();
        let poly = |t: f64| coeffs[..=k].iter().rev().fold(0.0, |acc, a| acc * t + a);
        let dpoly = |t: f64| coeffs[1..=k]
            .iter()
            .enumerate()
            .rev()
            .fold(0.0, |acc, (i, a)| acc * t + (i + 1) as f64 * a);
        let samples: Vec<f64> = (0..=k).map(|i| poly(t0 + i as f64 * dt)).collect();
        let d = approx_derivative(&samples, &c, dt).unwrap();
        prop_assert!((d - dpoly(t0)).abs() < 1e-7 * (1.0 + dpoly(t0).abs()), "{} vs {}", d, dpoly(t0));
    }
}

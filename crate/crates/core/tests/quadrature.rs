use multistep_fbsde::quadrature::{expect_gaussian, hermite_rule};
use proptest::prelude::*;

fn normal_moment(m: u32) -> f64 {
    if m % 2 == 1 {
        0.0
    } else {
        (1..m).step_by(2).map(f64::from).product()
    }
}

#[test]
fn eight_point_normal_moments() {
    let rule = hermite_rule(8).unwrap();
    for m in 0..=15u32 {
        let got = expect_gaussian(&rule, 1, 1, |x, out| out[0] = x[0].powi(m as i32)).unwrap()[0];
        let want = normal_moment(m);
        if m % 2 == 1 {
            assert!(got.abs() < 1e-10, "m={m}: {got}");
        } else {
            assert!(((got - want) / want).abs() < 1e-10, "m={m}: {got} vs {want}");
        }
    }
}

#[test]
fn sixteenth_moment_is_not_exact() {
    let rule = hermite_rule(8).unwrap();
    let got = expect_gaussian(&rule, 1, 1, |x, out| out[0] = x[0].powi(16)).unwrap()[0];
    assert!((got - normal_moment(16)).abs() > 1.0);
}

#[test]
fn two_dimensional_separable_products() {
    let rule = hermite_rule(8).unwrap();
    for a in 0..=7u32 {
        for b in 0..=7u32 {
            let got = expect_gaussian(&rule, 2, 1, |x, out| {
                out[0] = x[0].powi(a as i32) * x[1].powi(b as i32)
            })
            .unwrap()[0];
            let want = normal_moment(a) * normal_moment(b);
            assert!((got - want).abs() < 1e-10 * want.max(1.0), "({a},{b}): {got} vs {want}");
        }
    }
}

#[test]
fn vector_valued_expectation() {
    let rule = hermite_rule(24).unwrap();
    let e = expect_gaussian(&rule, 1, 3, |x, out| {
        out[0] = 1.0;
        out[1] = x[0] * x[0];
        out[2] = (x[0]).cos();
    })
    .unwrap();
    assert!((e[0] - 1.0).abs() < 1e-14);
    assert!((e[1] - 1.0).abs() < 1e-13);
    // E[cos N] = exp(-1/2)
    assert!((e[2] - (-0.5f64).exp()).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn weights_positive_and_total_sqrt_pi(l in 1usize..=40) {
        let rule = hermite_rule(l).unwrap();
        prop_assert!(rule.weights().iter().all(|&w| w > 0.0));
        let total: f64 = rule.weights().iter().sum();
        prop_assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_up_to_degree_2l_minus_1(l in 2usize..=10, coeffs in prop::collection::vec(-1.0f64..1.0, 20)) {
        let rule = hermite_rule(l).unwrap();
        let deg = 2 * l - 1;
        let got = expect_gaussian(&rule, 1, 1, |x, out| {
            out[0] = coeffs[..=deg].iter().rev().fold(0.0, |acc, c| acc * x[0] + c)
        }).unwrap()[0];
        let want: f64 = coeffs[..=deg].iter().enumerate().map(|(m, c)| c * normal_moment(m as u32)).sum();
        let scale: f64 = coeffs[..=deg].iter().enumerate().map(|(m, c)| (c * normal_moment(m as u32)).abs()).sum();
        prop_assert!((got - want).abs() <= 1e-10 * scale.max(1.0), "{} vs {}", got, want);
    }
}

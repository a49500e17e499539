//! Closed-form solutions checked against the PDE they must satisfy,
//! `u_t + b . grad u + 1/2 tr(sigma sigma^T D^2 u) + f(t, x, u, grad u sigma) = 0`,
//! using finite differences, plus an independent quadrature for the call price.

use multistep_fbsde::problems::{
    black_scholes_exact, linear_problem, registry_get, BlackScholesParams, FbsdeProblem,
    PROBLEM_NAMES,
};

fn u(p: &FbsdeProblem, t: f64, x: &[f64]) -> Vec<f64> {
    p.eval_exact(t, x).unwrap().0
}

fn shifted(x: &[f64], m: usize, by: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[m] += by;
    y
}

/// Max PDE residual and max `Z` mismatch at `(t, x)` with spatial step `e`.
fn residuals(p: &FbsdeProblem, t: f64, x: &[f64], e: f64) -> (f64, f64) {
    let (q, pd, d) = (p.q, p.p, p.d);
    let (y, z) = p.eval_exact(t, x).unwrap();
    let et = 1e-5;
    let ut: Vec<f64> = (0..pd)
        .map(|i| (u(p, t + et, x)[i] - u(p, t - et, x)[i]) / (2.0 * et))
        .collect();
    let grad = |i: usize, m: usize| {
        (u(p, t, &shifted(x, m, e))[i] - u(p, t, &shifted(x, m, -e))[i]) / (2.0 * e)
    };
    let hess = |i: usize, m: usize, n: usize| {
        let pp = u(p, t, &shifted(&shifted(x, m, e), n, e))[i];
        let pm = u(p, t, &shifted(&shifted(x, m, e), n, -e))[i];
        let mp = u(p, t, &shifted(&shifted(x, m, -e), n, e))[i];
        let mm = u(p, t, &shifted(&shifted(x, m, -e), n, -e))[i];
        (pp - pm - mp + mm) / (4.0 * e * e)
    };
    let b = p.eval_drift(t, x, &y, &z);
    let s = p.eval_diffusion(t, x, &y, &z);
    let f = p.eval_generator(t, x, &y, &z);
    let mut worst_pde = 0.0f64;
    let mut worst_z = 0.0f64;
    for i in 0..pd {
        let mut r = ut[i] + f[i];
        for m in 0..q {
            r += b[m] * grad(i, m);
            for n in 0..q {
                let a: f64 = (0..d).map(|l| s[m * d + l] * s[n * d + l]).sum();
                r += 0.5 * a * hess(i, m, n);
            }
        }
        worst_pde = worst_pde.max(r.abs());
        for l in 0..d {
            let zz: f64 = (0..q).map(|m| grad(i, m) * s[m * d + l]).sum();
            worst_z = worst_z.max((zz - z[i * d + l]).abs());
        }
    }
    (worst_pde, worst_z)
}

#[test]
fn closed_forms_solve_their_pdes() {
    for name in PROBLEM_NAMES.iter().filter(|n| **n != "ex52_bs") {
        let p = registry_get(name).unwrap();
        for &t in &[0.0, 0.3, 0.7] {
            for &off in &[-0.4, 0.0, 0.25] {
                let x: Vec<f64> = p.x0.iter().map(|v| v + off).collect();
                let (pde, z) = residuals(&p, t, &x, 1e-3);
                assert!(pde < 1e-5 && z < 1e-5, "{name} t={t} x={x:?}: pde {pde:e}, z {z:e}");
            }
        }
    }
}

#[test]
fn black_scholes_solves_its_pde() {
    let p = registry_get("ex52_bs").unwrap();
    for &t in &[0.0, 0.5, 0.9] {
        for &s in &[70.0, 100.0, 140.0] {
            let (pde, z) = residuals(&p, t, &[s], 2e-3);
            assert!(pde < 1e-5 && z < 1e-5, "t={t} S={s}: pde {pde:e}, z {z:e}");
        }
    }
}

#[test]
fn linear_problem_is_exact() {
    let p = linear_problem(0.7);
    let (pde, z) = residuals(&p, 0.2, &[0.4], 1e-3);
    assert!(pde < 1e-9 && z < 1e-9);
}

#[test]
fn terminal_data_matches_closed_form() {
    for name in PROBLEM_NAMES {
        let p = registry_get(name).unwrap();
        let t_end = p.terminal_time;
        for off in [-0.31, 0.0, 0.47] {
            // keep the payoff kink out of the difference stencil
            let x: Vec<f64> = p.x0.iter().map(|v| v + off * v.abs().max(1.0) * 0.5).collect();
            let phi = p.eval_terminal(&x);
            let (y, _) = p.eval_exact(t_end, &x).unwrap();
            for (a, b) in phi.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12, "{name}");
            }
            if let Some(g) = &p.terminal_gradient {
                if name == "ex52_bs" && off == 0.0 {
                    continue;
                }
                let mut grad = vec![0.0; p.p * p.q];
                g(&x, &mut grad);
                for i in 0..p.p {
                    for m in 0..p.q {
                        let e = 1e-6;
                        let fd = (p.eval_terminal(&shifted(&x, m, e))[i]
                            - p.eval_terminal(&shifted(&x, m, -e))[i])
                            / (2.0 * e);
                        assert!((fd - grad[i * p.q + m]).abs() < 1e-6, "{name} ({i},{m})");
                    }
                }
            }
        }
    }
}

/// `e^{-r tau} E[(S_T - K)^+]` under the pricing measure, by composite Simpson
/// in the standard-normal variable.
fn call_by_integration(bs: &BlackScholesParams, t: f64, s: f64) -> f64 {
    let tau = bs.maturity - t;
    let drift = (bs.r - bs.dvd - 0.5 * bs.sigma * bs.sigma) * tau;
    let vol = bs.sigma * tau.sqrt();
    let payoff = |z: f64| {
        let st = s * (drift + vol * z).exp();
        (st - bs.strike).max(0.0) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    };
    // split at the kink so both panels are smooth
    let kink = ((bs.strike / s).ln() - drift) / vol;
    let simpson = |a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut acc = payoff(a) + payoff(b);
        for i in 1..n {
            acc += payoff(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    (-bs.r * tau).exp() * simpson(kink, 12.0, 20_000)
}

#[test]
fn black_scholes_closed_form_matches_integration() {
    let bs = BlackScholesParams::benchmark();
    for &t in &[0.0, 0.4, 0.95] {
        for &s in &[60.0, 95.0, 100.0, 130.0] {
            let (y, z) = black_scholes_exact(&bs, t, s).unwrap();
            let want = call_by_integration(&bs, t, s);
            assert!((y - want).abs() < 1e-9 * want.max(1.0), "t={t} S={s}: {y} vs {want}");
            let e = 1e-3;
            let delta = (call_by_integration(&bs, t, s + e) - call_by_integration(&bs, t, s - e)) / (2.0 * e);
            assert!((z - bs.sigma * s * delta).abs() < 1e-5, "t={t} S={s}");
        }
    }
}

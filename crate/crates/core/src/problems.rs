//! Forward–backward SDE problem model and the benchmark registry.
//!
//! Every coefficient is a pure callback of `(t, x, y, z)` writing into an output
//! slice. `Z` is stored row-major as a `p x d` matrix, `sigma` as `q x d`, and
//! the terminal gradient as `p x q`.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// `(t, x, y, z, out)` coefficient callback.
pub type CoeffFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, out)` callback for terminal data.
pub type SpaceFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, out)` callback for closed-form solutions.
pub type FieldFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Names accepted by [`registry_get`].
pub const PROBLEM_NAMES: [&str; 6] = ["ex51", "ex52_bs", "ex53_2d", "ex54a", "ex54b", "ex55"];

#[derive(Clone)]
pub struct FbsdeProblem {
    pub name: String,
    /// Forward (state) dimension.
    pub q: usize,
    /// Backward dimension.
    pub p: usize,
    /// Brownian dimension.
    pub d: usize,
    pub drift: CoeffFn,
    pub diffusion: CoeffFn,
    pub generator: CoeffFn,
    pub terminal: SpaceFn,
    pub terminal_gradient: Option<SpaceFn>,
    pub exact_y: Option<FieldFn>,
    pub exact_z: Option<FieldFn>,
    /// Whether drift or diffusion read `(y, z)`.
    pub coupled: bool,
    pub terminal_time: f64,
    pub x0: Vec<f64>,
}

impl fmt::Debug for FbsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FbsdeProblem")
            .field("name", &self.name)
            .field("q", &self.q)
            .field("p", &self.p)
            .field("d", &self.d)
            .field("coupled", &self.coupled)
            .field("terminal_time", &self.terminal_time)
            .field("x0", &self.x0)
            .field("has_exact", &self.has_exact_solution())
            .finish()
    }
}

impl FbsdeProblem {
    pub fn has_exact_solution(&self) -> bool {
        self.exact_y.is_some() && self.exact_z.is_some()
    }

    /// Same problem with the coupled flag overridden.
    pub fn with_coupled(mut self, coupled: bool) -> Self {
        self.coupled = coupled;
        self
    }

    pub fn with_x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = x0;
        self
    }

    pub fn eval_drift(&self, t: f64, x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.q];
        (self.drift)(t, x, y, z, &mut out);
        out
    }

    pub fn eval_diffusion(&self, t: f64, x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.q * self.d];
        (self.diffusion)(t, x, y, z, &mut out);
        out
    }

    pub fn eval_generator(&self, t: f64, x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        (self.generator)(t, x, y, z, &mut out);
        out
    }

    pub fn eval_terminal(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        (self.terminal)(x, &mut out);
        out
    }

    pub fn eval_exact(&self, t: f64, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let (ey, ez) = (self.exact_y.as_ref()?, self.exact_z.as_ref()?);
        let mut y = vec![0.0; self.p];
        let mut z = vec![0.0; self.p * self.d];
        ey(t, x, &mut y);
        ez(t, x, &mut z);
        Some((y, z))
    }

    /// Probe-based consistency checks on the problem record.
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.p == 0 || self.d == 0 {
            return Err(Error::Config(format!("{}: dimensions must be positive", self.name)));
        }
        if self.x0.len() != self.q {
            return Err(Error::Config(format!(
                "{}: x0 has {} entries, expected {}",
                self.name,
                self.x0.len(),
                self.q
            )));
        }
        if !(self.terminal_time > 0.0) {
            return Err(Error::Config(format!("{}: terminal time must be positive", self.name)));
        }
        let probes = probe_points(&self.x0);
        for x in &probes {
            let t = 0.5 * self.terminal_time;
            if !self.coupled {
                let (y1, z1) = (vec![0.3; self.p], vec![-0.7; self.p * self.d]);
                let (y2, z2) = (vec![-1.9; self.p], vec![2.2; self.p * self.d]);
                let same = self.eval_drift(t, x, &y1, &z1) == self.eval_drift(t, x, &y2, &z2)
                    && self.eval_diffusion(t, x, &y1, &z1) == self.eval_diffusion(t, x, &y2, &z2);
                if !same {
                    return Err(Error::Config(format!(
                        "{}: flagged decoupled but drift/diffusion depend on (y, z)",
                        self.name
                    )));
                }
            }
            if let Some(ey) = &self.exact_y {
                let mut y = vec![0.0; self.p];
                ey(self.terminal_time, x, &mut y);
                let phi = self.eval_terminal(x);
                if y.iter().zip(&phi).any(|(a, b)| (a - b).abs() > 1e-10) {
                    return Err(Error::Config(format!(
                        "{}: exact solution at T disagrees with the terminal function at {x:?}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn probe_points(x0: &[f64]) -> Vec<Vec<f64>> {
    [-0.5, 0.0, 0.37]
        .iter()
        .map(|s| x0.iter().map(|v| v + s * v.abs().max(1.0)).collect())
        .collect()
}

/// Looks up one of the benchmark problems by name.
pub fn registry_get(name: &str) -> Result<FbsdeProblem> {
    let p = match name {
        "ex51" => ex51(),
        "ex52_bs" => black_scholes_problem(BlackScholesParams::benchmark()),
        "ex53_2d" => ex53_2d(),
        "ex54a" => ex54a(),
        "ex54b" => ex54b(),
        "ex55" => ex55(),
        _ => {
            return Err(Error::UnknownProblem {
                name: name.to_string(),
                valid: PROBLEM_NAMES.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    Ok(p)
}

/// `f = 0`, `b = 0`, constant `sigma`, `phi(x) = x` in one dimension.
/// Exact solution `Y = x`, `Z = sigma`.
pub fn linear_problem(sigma: f64) -> FbsdeProblem {
    FbsdeProblem {
        name: "linear".into(),
        q: 1,
        p: 1,
        d: 1,
        drift: Arc::new(|_, _, _, _, out| out[0] = 0.0),
        diffusion: Arc::new(move |_, _, _, _, out| out[0] = sigma),
        generator: Arc::new(|_, _, _, _, out| out[0] = 0.0),
        terminal: Arc::new(|x, out| out[0] = x[0]),
        terminal_gradient: Some(Arc::new(|_, out| out[0] = 1.0)),
        exact_y: Some(Arc::new(|_, x, out| out[0] = x[0])),
        exact_z: Some(Arc::new(move |_, _, out| out[0] = sigma)),
        coupled: false,
        terminal_time: 1.0,
        x0: vec![0.3],
    }
}

fn ex51() -> FbsdeProblem {
    let t_end = 1.0;
    FbsdeProblem {
        name: "ex51".into(),
        q: 1,
        p: 1,
        d: 1,
        drift: Arc::new(|t, x, _, _, out| out[0] = 1.0 / (1.0 + 2.0 * (t + x[0]).exp())),
        diffusion: Arc::new(|t, x, _, _, out| {
            let e = (t + x[0]).exp();
            out[0] = e / (1.0 + e);
        }),
        generator: Arc::new(|t, x, y, z, out| {
            let e = (t + x[0]).exp();
            let (y, z) = (y[0], z[0]);
            out[0] = -2.0 * y / (1.0 + 2.0 * e) - 0.5 * (y * z / (1.0 + e) - y * y * z);
        }),
        terminal: Arc::new(move |x, out| {
            let e = (t_end + x[0]).exp();
            out[0] = e / (1.0 + e);
        }),
        terminal_gradient: Some(Arc::new(move |x, out| {
            let e = (t_end + x[0]).exp();
            out[0] = e / ((1.0 + e) * (1.0 + e));
        })),
        exact_y: Some(Arc::new(|t, x, out| {
            let e = (t + x[0]).exp();
            out[0] = e / (1.0 + e);
        })),
        exact_z: Some(Arc::new(|t, x, out| {
            let e = (t + x[0]).exp();
            out[0] = e * e / (1.0 + e).powi(3);
        })),
        coupled: false,
        terminal_time: t_end,
        x0: vec![1.0],
    }
}

/// Constant-coefficient market with a continuously paid dividend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlackScholesParams {
    /// Expected return rate of the stock.
    pub b: f64,
    pub sigma: f64,
    /// Bond rate.
    pub r: f64,
    pub dvd: f64,
    pub strike: f64,
    pub spot: f64,
    pub maturity: f64,
}

impl BlackScholesParams {
    pub fn benchmark() -> Self {
        BlackScholesParams {
            b: 0.05,
            sigma: 0.2,
            r: 0.03,
            dvd: 0.04,
            strike: 100.0,
            spot: 100.0,
            maturity: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.strike > 0.0 && self.spot > 0.0 && self.maturity > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Black-Scholes parameters need sigma, K, S0, T > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Call price `Y` and hedge `Z = sigma S dV/dS` at `(t, S)`.
pub fn black_scholes_exact(params: &BlackScholesParams, t: f64, s: f64) -> Result<(f64, f64)> {
    params.validate()?;
    if t >= params.maturity {
        return Err(Error::InvalidArgument(format!(
            "closed form is singular at t = {t} >= T = {}",
            params.maturity
        )));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("spot must be positive, got {s}")));
    }
    let BlackScholesParams {
        sigma,
        r,
        dvd,
        strike,
        maturity,
        ..
    } = *params;
    let tau = maturity - t;
    let vol = sigma * tau.sqrt();
    let d0 = (s / (strike * ((dvd - r) * tau).exp())).ln() / vol - 0.5 * vol;
    let d1 = d0 + vol;
    let carry = s * (-dvd * tau).exp() * normal_cdf(d1);
    let y = carry - strike * (-r * tau).exp() * normal_cdf(d0);
    Ok((y, carry * sigma))
}

/// European call under the constant-coefficient market, in price coordinates.
pub fn black_scholes_problem(params: BlackScholesParams) -> FbsdeProblem {
    let BlackScholesParams {
        b,
        sigma,
        r,
        dvd,
        strike,
        spot,
        maturity,
    } = params;
    let premium = (b - r + dvd) / sigma;
    // continuous extension of the closed form to t >= T and S <= 0
    let exact = move |t: f64, s: f64| -> (f64, f64) {
        if t >= maturity {
            if s > strike {
                (s - strike, sigma * s)
            } else {
                (0.0, 0.0)
            }
        } else if s <= 0.0 {
            (0.0, 0.0)
        } else {
            black_scholes_exact(&params, t, s).expect("validated parameters")
        }
    };
    FbsdeProblem {
        name: "ex52_bs".into(),
        q: 1,
        p: 1,
        d: 1,
        drift: Arc::new(move |_, x, _, _, out| out[0] = b * x[0]),
        diffusion: Arc::new(move |_, x, _, _, out| out[0] = sigma * x[0]),
        generator: Arc::new(move |_, _, y, z, out| out[0] = -r * y[0] - premium * z[0]),
        terminal: Arc::new(move |x, out| out[0] = (x[0] - strike).max(0.0)),
        terminal_gradient: Some(Arc::new(move |x, out| {
            out[0] = if x[0] > strike {
                1.0
            } else if x[0] == strike {
                0.5
            } else {
                0.0
            }
        })),
        exact_y: Some(Arc::new(move |t, x, out| out[0] = exact(t, x[0]).0)),
        exact_z: Some(Arc::new(move |t, x, out| out[0] = exact(t, x[0]).1)),
        coupled: false,
        terminal_time: maturity,
        x0: vec![spot],
    }
}

fn ex53_2d() -> FbsdeProblem {
    let (a1, a2) = (0.5, 0.5);
    let t_end = 1.0;
    let exact_y = move |t: f64, x: &[f64], out: &mut [f64]| {
        let (s1, c1) = (t + x[0]).sin_cos();
        let (s2, c2) = (t + x[1]).sin_cos();
        out[0] = s1 * s2;
        out[1] = c1 * c2;
    };
    let exact_z = move |t: f64, x: &[f64], out: &mut [f64]| {
        let (s1, c1) = (t + x[0]).sin_cos();
        let (s2, c2) = (t + x[1]).sin_cos();
        out[0] = a2 * c1 * s2 * c2 * c2 + a1 * s1 * c2 * c1 * c1;
        out[1] = -a2 * s1 * c2.powi(3) - a1 * c1.powi(3) * s2;
    };
    FbsdeProblem {
        name: "ex53_2d".into(),
        q: 2,
        p: 2,
        d: 1,
        drift: Arc::new(move |t, x, _, _, out| {
            out[0] = a1 * (t + x[0]).sin().powi(2);
            out[1] = a2 * (t + x[1]).sin().powi(2);
        }),
        diffusion: Arc::new(move |t, x, _, _, out| {
            out[0] = a2 * (t + x[1]).cos().powi(2);
            out[1] = a1 * (t + x[0]).cos().powi(2);
        }),
        generator: Arc::new(move |t, x, y, z, out| {
            let (s1, c1) = (t + x[0]).sin_cos();
            let (s2, c2) = (t + x[1]).sin_cos();
            let quartic = a2 * a2 * c2.powi(4) + a1 * a1 * c1.powi(4);
            out[0] = -(1.0 + a1) * c1 * s2 - z[1] + 0.5 * y[0] * quartic
                - a1 * a2 * y[1].powi(3)
                - (1.0 + a2) * s1 * c2;
            out[1] = (1.0 + a1) * s1 * c2 - z[0] + 0.5 * y[1] * quartic
                - a1 * a2 * y[0] * y[1] * y[1]
                + (1.0 + a2) * c1 * s2;
        }),
        terminal: Arc::new(move |x, out| exact_y(t_end, x, out)),
        terminal_gradient: Some(Arc::new(move |x, out| {
            let (s1, c1) = (t_end + x[0]).sin_cos();
            let (s2, c2) = (t_end + x[1]).sin_cos();
            out[0] = c1 * s2;
            out[1] = s1 * c2;
            out[2] = -s1 * c2;
            out[3] = -c1 * s2;
        })),
        exact_y: Some(Arc::new(exact_y)),
        exact_z: Some(Arc::new(exact_z)),
        coupled: false,
        terminal_time: t_end,
        x0: vec![0.3, 0.1],
    }
}

fn sine_terminal(t_end: f64) -> (SpaceFn, SpaceFn, FieldFn) {
    (
        Arc::new(move |x, out| out[0] = (t_end + x[0]).sin()),
        Arc::new(move |x, out| out[0] = (t_end + x[0]).cos()),
        Arc::new(|t, x, out| out[0] = (t + x[0]).sin()),
    )
}

fn ex54a() -> FbsdeProblem {
    let t_end = 1.0;
    let (terminal, grad, exact_y) = sine_terminal(t_end);
    FbsdeProblem {
        name: "ex54a".into(),
        q: 1,
        p: 1,
        d: 1,
        drift: Arc::new(|t, x, y, z, out| out[0] = (t + x[0]).cos() * (y[0] + z[0])),
        diffusion: Arc::new(|t, x, y, _, out| out[0] = SQRT_2 * y[0] * (t + x[0]).sin()),
        generator: Arc::new(|t, x, y, z, out| {
            let (s, c) = (t + x[0]).sin_cos();
            let (y, z) = (y[0], z[0]);
            out[0] = -c - y - z + s * s * (y + z + y * y * y);
        }),
        terminal,
        terminal_gradient: Some(grad),
        exact_y: Some(exact_y),
        exact_z: Some(Arc::new(|t, x, out| {
            let (s, c) = (t + x[0]).sin_cos();
            out[0] = SQRT_2 * c * s * s;
        })),
        coupled: true,
        terminal_time: t_end,
        x0: vec![1.0],
    }
}

fn ex54b() -> FbsdeProblem {
    let t_end = 1.0;
    let (terminal, grad, exact_y) = sine_terminal(t_end);
    FbsdeProblem {
        name: "ex54b".into(),
        q: 1,
        p: 1,
        d: 1,
        drift: Arc::new(|t, x, y, z, out| out[0] = (t + x[0]).cos() * (y[0] + z[0])),
        diffusion: Arc::new(|t, x, y, _, out| {
            out[0] = SQRT_2 * (y[0] * (t + x[0]).sin() + 1.0)
        }),
        generator: Arc::new(|t, x, y, z, out| {
            let (s, c) = (t + x[0]).sin_cos();
            let s2 = s * s;
            out[0] = -c - c * c * z[0] + (3.0 * s2 + s2 * s2) * y[0];
        }),
        terminal,
        terminal_gradient: Some(grad),
        exact_y: Some(exact_y),
        exact_z: Some(Arc::new(|t, x, out| {
            let (s, c) = (t + x[0]).sin_cos();
            out[0] = SQRT_2 * c * (s * s + 1.0);
        })),
        coupled: true,
        terminal_time: t_end,
        x0: vec![1.0],
    }
}

fn ex55() -> FbsdeProblem {
    let t_end = 1.0;
    let (terminal, grad, exact_y) = sine_terminal(t_end);
    FbsdeProblem {
        name: "ex55".into(),
        q: 1,
        p: 1,
        d: 1,
        drift: Arc::new(|t, x, y, z, out| {
            let (s, c) = (t + x[0]).sin_cos();
            out[0] = -0.5 * s * c * (y[0] * y[0] + z[0]);
        }),
        diffusion: Arc::new(|t, x, y, z, out| {
            let (s, c) = (t + x[0]).sin_cos();
            out[0] = 0.5 * c * (y[0] * s + z[0] + 1.0);
        }),
        generator: Arc::new(|t, x, y, z, out| out[0] = y[0] * z[0] - (t + x[0]).cos()),
        terminal,
        terminal_gradient: Some(grad),
        exact_y: Some(exact_y),
        exact_z: Some(Arc::new(|t, x, out| out[0] = (t + x[0]).cos().powi(2))),
        coupled: true,
        terminal_time: t_end,
        x0: vec![1.5],
    }
}

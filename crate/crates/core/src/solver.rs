//! Backward multistep sweep for decoupled and coupled FBSDEs.
//!
//! Every time level stores `(Y, Z)` on a finite box of the uniform space grid.
//! A level is computed from the `k` frozen levels above it: an Euler predictor
//! per quadrature node, degree-`r` interpolation of the history, Gauss–Hermite
//! expectations, and a fixed-point solve for the implicit `Y` relation.
//! Coupled problems wrap this in an outer fixed-point loop over the
//! `(X, Y, Z)` interdependence.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::multistep::{compute_coeffs, MultistepCoeffs};
use crate::problems::FbsdeProblem;
use crate::quadrature::{hermite_rule, GaussHermiteRule, MAX_POINTS};
use crate::spacegrid::{ActiveWindow, GridSpec, Interpolator, ValueField, MAX_DEGREE, MAX_DIM};

/// Environment variable that sizes the in-solver worker pool.
pub const THREADS_ENV: &str = "FBSDE_THREADS";

/// Standard deviations covered by the probabilistic window envelope.
const ENVELOPE_SIGMAS: f64 = 8.5;
/// Safety factor on coupled coefficients, which are evaluated at proxy `(y, z)`.
const COUPLED_REACH_INFLATION: f64 = 1.5;
/// Levels of stencil coupling (r/2 + 1 cells each) added to the envelope.
const SPREAD_LEVELS: i64 = 8;
/// Upper bound on sub-steps used by the terminal bootstrap.
pub const BOOTSTRAP_MAX_SUBSTEPS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalMode {
    /// History levels come from the closed-form solution.
    Exact,
    /// History levels come from a fine one-step solve.
    Bootstrap,
}

impl std::str::FromStr for TerminalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(TerminalMode::Exact),
            "bootstrap" => Ok(TerminalMode::Bootstrap),
            other => Err(Error::Config(format!(
                "terminal mode must be `exact` or `bootstrap`, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for TerminalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TerminalMode::Exact => "exact",
            TerminalMode::Bootstrap => "bootstrap",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub k: usize,
    /// Number of uniform time steps `N`.
    pub n_steps: usize,
    /// Gauss–Hermite points per Brownian dimension.
    pub gh_points: usize,
    /// Interpolation degree; `None` picks it from `k`.
    pub degree: Option<usize>,
    /// Grid spacing; `None` balances it against the time error.
    pub spacing: Option<f64>,
    pub eps0: f64,
    pub max_picard: usize,
    pub terminal: TerminalMode,
    /// Worker count; `None` reads [`THREADS_ENV`] or uses all cores.
    pub threads: Option<usize>,
}

impl SolverConfig {
    pub fn new(k: usize, n_steps: usize) -> Self {
        SolverConfig {
            k,
            n_steps,
            gh_points: 8,
            degree: None,
            spacing: None,
            eps0: 1e-11,
            max_picard: 100,
            terminal: TerminalMode::Exact,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=crate::multistep::MAX_STEPS).contains(&self.k) {
            return bad(format!("k = {} outside [1, {}]", self.k, crate::multistep::MAX_STEPS));
        }
        if self.n_steps < self.k + 1 {
            return bad(format!("N = {} must be at least k + 1 = {}", self.n_steps, self.k + 1));
        }
        if !(1..=MAX_POINTS).contains(&self.gh_points) {
            return bad(format!("gh-points = {} outside [1, {MAX_POINTS}]", self.gh_points));
        }
        if let Some(r) = self.degree {
            if !(1..=MAX_DEGREE).contains(&r) {
                return bad(format!("interpolation degree {r} outside [1, {MAX_DEGREE}]"));
            }
        }
        if let Some(h) = self.spacing {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("grid spacing must be positive, got {h}"));
            }
        }
        if !(self.eps0 > 0.0) {
            return bad(format!("tolerance must be positive, got {}", self.eps0));
        }
        if self.max_picard == 0 {
            return bad("max_picard must be at least 1".into());
        }
        if self.threads == Some(0) {
            return bad("thread count must be at least 1".into());
        }
        Ok(())
    }

    pub fn dt(&self, problem: &FbsdeProblem) -> f64 {
        problem.terminal_time / self.n_steps as f64
    }
}

/// Interpolation degree chosen from the step count.
pub fn auto_degree(k: usize) -> usize {
    match k {
        0..=2 => 6,
        3 => 8,
        4..=6 => 10,
        _ => 15,
    }
}

/// Grid spacing `h` and degree `r` with `h^(r+1) = dt^(k+1)` unless given.
pub fn resolve_discretization(config: &SolverConfig, problem: &FbsdeProblem) -> (f64, usize) {
    let r = config.degree.unwrap_or_else(|| auto_degree(config.k));
    let h = config.spacing.unwrap_or_else(|| {
        config
            .dt(problem)
            .powf((config.k + 1) as f64 / (r + 1) as f64)
    });
    (h, r)
}

/// Window of one level plus whether each side was truncated by the envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelWindow {
    pub window: ActiveWindow,
    pub capped_lo: Vec<bool>,
    pub capped_hi: Vec<bool>,
}

/// `(y, z)` stand-ins for evaluating coupled coefficients before the solution exists.
fn coefficient_proxy(problem: &FbsdeProblem, t: f64, x: &[f64], y: &mut [f64], z: &mut [f64]) {
    if let (Some(ey), Some(ez)) = (&problem.exact_y, &problem.exact_z) {
        ey(t, x, y);
        ez(t, x, z);
    } else {
        (problem.terminal)(x, y);
        z.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Per-dimension `|b_i|` and `sum_l |sigma_il|` at one point.
fn coefficient_bounds(problem: &FbsdeProblem, t: f64, x: &[f64], bb: &mut [f64], bs: &mut [f64]) {
    let (q, p, d) = (problem.q, problem.p, problem.d);
    let mut y = vec![0.0; p];
    let mut z = vec![0.0; p * d];
    if problem.coupled {
        coefficient_proxy(problem, t, x, &mut y, &mut z);
    }
    let mut b = vec![0.0; q];
    let mut s = vec![0.0; q * d];
    (problem.drift)(t, x, &y, &z, &mut b);
    (problem.diffusion)(t, x, &y, &z, &mut s);
    for i in 0..q {
        bb[i] = if b[i].is_finite() { b[i].abs() } else { f64::INFINITY };
        bs[i] = s[i * d..(i + 1) * d].iter().map(|v| v.abs()).sum();
        if !bs[i].is_finite() {
            bs[i] = f64::INFINITY;
        }
    }
}

/// Quantile-path envelope `[dn_m, up_m]` per dimension for levels `0..=n`.
///
/// Each edge follows `du = |b| dt + kappa |sigma| d(sqrt t)`, which tracks the
/// `kappa`-sigma band exactly for additive and geometric noise.
fn envelope(problem: &FbsdeProblem, n: usize, dt: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let q = problem.q;
    let mut dn = problem.x0.clone();
    let mut up = problem.x0.clone();
    let mut out = vec![(dn.clone(), up.clone())];
    let mut bb = vec![0.0; q];
    let mut bs = vec![0.0; q];
    for m in 1..=n {
        let t0 = (m - 1) as f64 * dt;
        let dsq = (m as f64 * dt).sqrt() - t0.sqrt();
        let (mut new_dn, mut new_up) = (dn.clone(), up.clone());
        for i in 0..q {
            for (edge, sign, target) in [(&dn, -1.0, &mut new_dn), (&up, 1.0, &mut new_up)] {
                let mut x: Vec<f64> = (0..q).map(|l| 0.5 * (dn[l] + up[l])).collect();
                x[i] = edge[i];
                // sweep the face across the other dimensions
                let mut worst_b: f64 = 0.0;
                let mut worst_s: f64 = 0.0;
                let face = if q == 1 { 1 } else { 9 };
                for s in 0..face {
                    for l in (0..q).filter(|&l| l != i) {
                        let frac = if face == 1 { 0.5 } else { s as f64 / (face - 1) as f64 };
                        x[l] = dn[l] + frac * (up[l] - dn[l]);
                    }
                    coefficient_bounds(problem, t0, &x, &mut bb, &mut bs);
                    worst_b = worst_b.max(bb[i]);
                    worst_s = worst_s.max(bs[i]);
                }
                target[i] = edge[i] + sign * (worst_b * dt + ENVELOPE_SIGMAS * worst_s * dsq);
            }
        }
        dn = new_dn;
        up = new_up;
        out.push((dn.clone(), up.clone()));
    }
    out
}

/// Most extreme predictor positions reachable in `jdt` from the points of `window`.
fn reach(
    problem: &FbsdeProblem,
    spec: &GridSpec,
    window: &ActiveWindow,
    t: f64,
    jdt: f64,
    a_max: f64,
) -> (Vec<f64>, Vec<f64>) {
    let q = problem.q;
    let inflation = if problem.coupled { COUPLED_REACH_INFLATION } else { 1.0 };
    let noise = (2.0 * jdt).sqrt() * a_max;
    let fold = |mut acc: (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), flat: usize| {
        let x = spec.point(&window.multi_index(flat));
        let (lo, hi, bb, bs) = (&mut acc.0, &mut acc.1, &mut acc.2, &mut acc.3);
        coefficient_bounds(problem, t, &x, bb, bs);
        for i in 0..q {
            let disp = inflation * (bb[i] * jdt + bs[i] * noise);
            lo[i] = lo[i].min(x[i] - disp);
            hi[i] = hi[i].max(x[i] + disp);
        }
        acc
    };
    let init = || (vec![f64::INFINITY; q], vec![f64::NEG_INFINITY; q], vec![0.0; q], vec![0.0; q]);
    let (lo, hi, _, _) = (0..window.len())
        .into_par_iter()
        .fold(init, fold)
        .reduce(init, |a, b| {
            let lo = a.0.iter().zip(&b.0).map(|(x, y)| x.min(*y)).collect();
            let hi = a.1.iter().zip(&b.1).map(|(x, y)| x.max(*y)).collect();
            (lo, hi, a.2, a.3)
        });
    (lo, hi)
}

fn index_floor(spec: &GridSpec, dim: usize, x: f64) -> i64 {
    spec.index_coord(dim, x).floor() as i64
}

fn index_ceil(spec: &GridSpec, dim: usize, x: f64) -> i64 {
    spec.index_coord(dim, x).ceil() as i64
}

/// Smallest margin (cells) that keeps a degree-`r` stencil centered.
fn stencil_margin(r: usize) -> i64 {
    (r / 2 + 1) as i64
}

/// Windows for levels `0..=N`: the dependence cone of the `x0` cell, truncated
/// by the probabilistic envelope.
pub fn plan_windows(
    problem: &FbsdeProblem,
    spec: &GridSpec,
    k: usize,
    n: usize,
    dt: f64,
    r: usize,
    a_max: f64,
) -> Result<Vec<LevelWindow>> {
    let q = problem.q;
    let margin = stencil_margin(r);
    let env = envelope(problem, n, dt);
    let base: Vec<i64> = (0..q).map(|i| index_floor(spec, i, problem.x0[i])).collect();
    let first = ActiveWindow::new(
        base.iter().map(|b| b - margin).collect(),
        base.iter().map(|b| b + 1 + margin).collect(),
    )?;
    let mut levels = vec![LevelWindow {
        window: first,
        capped_lo: vec![false; q],
        capped_hi: vec![false; q],
    }];
    for m in 1..=n {
        let prev = &levels[m - 1].window;
        let mut lo = prev.lo().to_vec();
        let mut hi = prev.hi().to_vec();
        for j in 1..=k.min(m) {
            let src = &levels[m - j].window;
            let (rlo, rhi) = reach(problem, spec, src, (m - j) as f64 * dt, j as f64 * dt, a_max);
            for i in 0..q {
                if !(rlo[i].is_finite() && rhi[i].is_finite()) {
                    return Err(Error::WindowSizing {
                        level: m,
                        source: Box::new(Error::InvalidArgument(
                            "coefficients are not finite on the working region".into(),
                        )),
                    });
                }
                lo[i] = lo[i].min(index_floor(spec, i, rlo[i]) - margin);
                hi[i] = hi[i].max(index_ceil(spec, i, rhi[i]) + margin);
            }
        }
        let (edn, eup) = &env[m];
        let mut capped_lo = vec![false; q];
        let mut capped_hi = vec![false; q];
        // stencils couple r/2 + 1 cells per level with O(1) weights, so the
        // envelope carries that spread on top of the diffusion band
        let spread = margin.saturating_mul((m as i64 + 1).min(SPREAD_LEVELS));
        for i in 0..q {
            let elo = index_floor(spec, i, edn[i])
                .saturating_sub(spread)
                .min(base[i] - margin);
            let ehi = index_ceil(spec, i, eup[i])
                .saturating_add(spread)
                .max(base[i] + 1 + margin);
            if lo[i] < elo {
                lo[i] = elo;
                capped_lo[i] = true;
            }
            if hi[i] > ehi {
                hi[i] = ehi;
                capped_hi[i] = true;
            }
            // keep nesting with the previous level
            lo[i] = lo[i].min(prev.lo()[i]);
            hi[i] = hi[i].max(prev.hi()[i]);
            capped_lo[i] |= levels[m - 1].capped_lo[i] && lo[i] == prev.lo()[i];
            capped_hi[i] |= levels[m - 1].capped_hi[i] && hi[i] == prev.hi()[i];
        }
        levels.push(LevelWindow {
            window: ActiveWindow::new(lo, hi)?,
            capped_lo,
            capped_hi,
        });
    }
    Ok(levels)
}

/// Iteration counts gathered over the sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PicardStats {
    /// Largest count over every computed `(n, x)`: outer iterations for
    /// coupled problems, inner `Y` iterations otherwise.
    pub max: usize,
    pub mean: f64,
    /// Largest count at the grid point nearest `x0`, over all levels.
    pub max_near_x0: usize,
    /// Largest inner `Y` iteration count.
    pub inner_max: usize,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub y0: Vec<f64>,
    /// Row-major `p x d`.
    pub z0: Vec<f64>,
    pub err_y: Option<Vec<f64>>,
    pub err_z: Option<Vec<f64>>,
    pub picard: PicardStats,
    pub runtime_s: f64,
    pub h: f64,
    pub r: usize,
    /// Predictor queries projected onto an envelope-truncated window edge.
    pub projected_queries: u64,
    /// Largest number of grid points stored at one level.
    pub max_window_len: usize,
    pub field0: ValueField,
}

/// The `k` frozen levels `n+1 ..= n+k` above the level being computed.
#[derive(Debug, Clone)]
pub struct SweepState {
    fields: VecDeque<ValueField>,
    level: usize,
}

impl SweepState {
    /// Builds the state from fields ordered `n+1, n+2, ..., n+k`.
    pub fn new(fields: Vec<ValueField>) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::InvalidArgument("history needs at least one level".into()))?;
        let level = first.level().checked_sub(1).ok_or_else(|| {
            Error::InvalidArgument("history cannot start at level 0".into())
        })?;
        for (j, f) in fields.iter().enumerate() {
            if f.level() != level + 1 + j {
                return Err(Error::InvalidArgument(format!(
                    "history level {} found where {} was expected",
                    f.level(),
                    level + 1 + j
                )));
            }
        }
        Ok(SweepState {
            fields: fields.into(),
            level,
        })
    }

    /// Level about to be computed.
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn depth(&self) -> usize {
        self.fields.len()
    }

    /// Frozen field at level `n + j`, `j >= 1`.
    pub fn history(&self, j: usize) -> &ValueField {
        &self.fields[j - 1]
    }

    /// Freezes the newly computed level and drops the oldest one.
    pub fn push(&mut self, field: ValueField) {
        debug_assert_eq!(field.level(), self.level);
        self.fields.push_front(field);
        self.fields.pop_back();
        self.level = self.level.saturating_sub(1);
    }

    pub fn into_newest(mut self) -> ValueField {
        self.fields.pop_front().expect("non-empty history")
    }
}

/// Everything a per-level step needs besides the history.
pub struct StepContext<'a> {
    pub problem: &'a FbsdeProblem,
    pub spec: &'a GridSpec,
    pub interp: &'a Interpolator,
    /// Scaled weights `alpha_{k,j} dt`.
    pub scaled: Vec<f64>,
    pub dt: f64,
    /// Time of level 0.
    pub t_origin: f64,
    pub windows: &'a [LevelWindow],
    pub eps0: f64,
    pub max_picard: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    projected: AtomicU64,
}

impl<'a> StepContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        problem: &'a FbsdeProblem,
        spec: &'a GridSpec,
        interp: &'a Interpolator,
        coeffs: &MultistepCoeffs,
        rule: &GaussHermiteRule,
        dt: f64,
        t_origin: f64,
        windows: &'a [LevelWindow],
        eps0: f64,
        max_picard: usize,
    ) -> Self {
        let d = problem.d;
        let norm = std::f64::consts::PI.powf(-(d as f64) / 2.0);
        let mut nodes = Vec::with_capacity(rule.len().pow(d as u32) * d);
        let mut weights = Vec::new();
        for (node, w) in rule.tensor(d).iter() {
            nodes.extend(node.iter().map(|a| std::f64::consts::SQRT_2 * a));
            weights.push(w * norm);
        }
        StepContext {
            problem,
            spec,
            interp,
            scaled: coeffs.scaled_f64(),
            dt,
            t_origin,
            windows,
            eps0,
            max_picard,
            nodes,
            weights,
            projected: AtomicU64::new(0),
        }
    }

    pub fn k(&self) -> usize {
        self.scaled.len() - 1
    }

    pub fn time(&self, level: usize) -> f64 {
        self.t_origin + level as f64 * self.dt
    }

    /// Predictor queries projected onto a capped window edge so far.
    pub fn projected_queries(&self) -> u64 {
        self.projected.load(Ordering::Relaxed)
    }

    /// Interpolates `Y` of `field` at `x`, projecting onto envelope-capped sides.
    fn query_y(&self, level: usize, field: &ValueField, x: &[f64], out: &mut [f64]) -> Result<()> {
        let caps = &self.windows[field.level()];
        let w = field.window();
        let mut u = [0.0; MAX_DIM];
        for i in 0..x.len() {
            let ui = self.spec.index_coord(i, x[i]);
            let lo = w.lo()[i] as f64;
            let hi = w.hi()[i] as f64;
            u[i] = if ui >= lo && ui <= hi {
                ui
            } else if ui < lo && caps.capped_lo[i] {
                self.projected.fetch_add(1, Ordering::Relaxed);
                lo
            } else if ui > hi && caps.capped_hi[i] {
                self.projected.fetch_add(1, Ordering::Relaxed);
                hi
            } else if !ui.is_finite() {
                return Err(Error::NonFiniteValue {
                    level,
                    point: x.to_vec(),
                });
            } else {
                return Err(Error::WindowSizing {
                    level,
                    source: Box::new(Error::OutOfDomain {
                        point: x.to_vec(),
                        dim: i,
                        lo: self.spec.coord(i, w.lo()[i]),
                        hi: self.spec.coord(i, w.hi()[i]),
                    }),
                });
            };
        }
        self.interp
            .interpolate_at_index_coords(w, field.y_values(), &u[..x.len()], out)
    }

    /// `S = sum_j a_j E[Y^{n+j}(X^j)]` and `Z = sum_j a_j E[Y^{n+j}(X^j) dW_j] / dt`.
    #[allow(clippy::too_many_arguments)]
    fn expectations(
        &self,
        level: usize,
        hist: &SweepState,
        x: &[f64],
        b: &[f64],
        sig: &[f64],
        s: &mut [f64],
        z: &mut [f64],
        buf: &mut Scratch,
    ) -> Result<()> {
        let (q, p, d) = (self.problem.q, self.problem.p, self.problem.d);
        s.iter_mut().for_each(|v| *v = 0.0);
        z.iter_mut().for_each(|v| *v = 0.0);
        for j in 1..self.scaled.len() {
            let field = hist.history(j);
            let jdt = j as f64 * self.dt;
            let sj = jdt.sqrt();
            let aj = self.scaled[j];
            for (node, &w) in self.nodes.chunks_exact(d).zip(&self.weights) {
                for l in 0..d {
                    buf.dw[l] = sj * node[l];
                }
                for i in 0..q {
                    let mut xi = x[i] + b[i] * jdt;
                    for l in 0..d {
                        xi += sig[i * d + l] * buf.dw[l];
                    }
                    buf.xp[i] = xi;
                }
                self.query_y(level, field, &buf.xp[..q], &mut buf.yv[..p])?;
                let aw = aj * w;
                for c in 0..p {
                    let v = aw * buf.yv[c];
                    s[c] += v;
                    for l in 0..d {
                        z[c * d + l] += v * buf.dw[l];
                    }
                }
            }
        }
        let inv = 1.0 / self.dt;
        z.iter_mut().for_each(|v| *v *= inv);
        Ok(())
    }

    /// Fixed point of `a_0 Y = -S - dt f(t, x, Y, Z)` starting from `y`.
    fn solve_y(
        &self,
        level: usize,
        x: &[f64],
        s: &[f64],
        z: &[f64],
        y: &mut [f64],
        buf: &mut Scratch,
    ) -> Result<usize> {
        let t = self.time(level);
        let a0 = self.scaled[0];
        let p = self.problem.p;
        for it in 1..=self.max_picard {
            (self.problem.generator)(t, x, y, z, &mut buf.f[..p]);
            let mut diff: f64 = 0.0;
            for c in 0..p {
                let next = (-s[c] - self.dt * buf.f[c]) / a0;
                diff = diff.max((next - y[c]).abs());
                y[c] = next;
            }
            if !diff.is_finite() {
                return Err(Error::NonFiniteValue {
                    level,
                    point: x.to_vec(),
                });
            }
            if diff <= self.eps0 {
                return Ok(it);
            }
        }
        Err(Error::Divergence {
            level,
            point: x.to_vec(),
            iterations: self.max_picard,
        })
    }

    /// Stored values of level `n+1` at grid point `index`.
    fn previous_values(&self, hist: &SweepState, index: &[i64], y: &mut [f64], z: &mut [f64]) -> Result<()> {
        let prev = hist.history(1);
        if let Some((py, pz)) = prev.at_index(index) {
            y.copy_from_slice(py);
            z.copy_from_slice(pz);
            return Ok(());
        }
        let x = self.spec.point(index);
        prev.interpolate_y(self.interp, self.spec, &x, y)?;
        prev.interpolate_z(self.interp, self.spec, &x, z)
    }

    /// Decoupled step at one grid point. Returns the `Y` iteration count.
    fn point_decoupled(
        &self,
        hist: &SweepState,
        index: &[i64],
        y: &mut [f64],
        z: &mut [f64],
        buf: &mut Scratch,
    ) -> Result<(usize, usize)> {
        let level = hist.level();
        let (q, p, d) = (self.problem.q, self.problem.p, self.problem.d);
        let x = self.spec.point(index);
        let t = self.time(level);
        self.previous_values(hist, index, y, z)?;
        (self.problem.drift)(t, &x, y, z, &mut buf.b[..q]);
        (self.problem.diffusion)(t, &x, y, z, &mut buf.sig[..q * d]);
        let mut s = [0.0; MAX_DIM];
        let (b, sig) = (std::mem::take(&mut buf.b), std::mem::take(&mut buf.sig));
        let res = self.expectations(level, hist, &x, &b, &sig, &mut s[..p], z, buf);
        buf.b = b;
        buf.sig = sig;
        res?;
        let it = self.solve_y(level, &x, &s[..p], z, y, buf)?;
        Ok((it, it))
    }

    /// Coupled step at one grid point. Returns `(outer, max inner)` counts.
    fn point_coupled(
        &self,
        hist: &SweepState,
        index: &[i64],
        y: &mut [f64],
        z: &mut [f64],
        buf: &mut Scratch,
    ) -> Result<(usize, usize)> {
        let level = hist.level();
        let (q, p, d) = (self.problem.q, self.problem.p, self.problem.d);
        let pd = p * d;
        let x = self.spec.point(index);
        let t = self.time(level);
        self.previous_values(hist, index, y, z)?;
        let mut s = [0.0; MAX_DIM];
        let mut y_next = vec![0.0; p];
        let mut z_next = vec![0.0; pd];
        let mut inner_max = 0;
        for outer in 1..=self.max_picard {
            let mut b = std::mem::take(&mut buf.b);
            let mut sig = std::mem::take(&mut buf.sig);
            (self.problem.drift)(t, &x, y, z, &mut b[..q]);
            (self.problem.diffusion)(t, &x, y, z, &mut sig[..q * d]);
            let res = self.expectations(level, hist, &x, &b, &sig, &mut s[..p], &mut z_next, buf);
            buf.b = b;
            buf.sig = sig;
            res?;
            y_next.copy_from_slice(y);
            let inner = self.solve_y(level, &x, &s[..p], &z_next, &mut y_next, buf)?;
            inner_max = inner_max.max(inner);
            let diff = y
                .iter()
                .zip(&y_next)
                .chain(z.iter().zip(&z_next))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            y.copy_from_slice(&y_next);
            z.copy_from_slice(&z_next);
            if !diff.is_finite() {
                return Err(Error::NonFiniteValue { level, point: x });
            }
            if diff < self.eps0 {
                return Ok((outer, inner_max));
            }
        }
        Err(Error::Divergence {
            level,
            point: x,
            iterations: self.max_picard,
        })
    }
}

/// Per-worker buffers.
#[derive(Debug, Clone)]
struct Scratch {
    b: Vec<f64>,
    sig: Vec<f64>,
    dw: Vec<f64>,
    xp: Vec<f64>,
    yv: Vec<f64>,
    f: Vec<f64>,
}

impl Scratch {
    fn new(problem: &FbsdeProblem) -> Self {
        let (q, p, d) = (problem.q, problem.p, problem.d);
        Scratch {
            b: vec![0.0; q],
            sig: vec![0.0; q * d],
            dw: vec![0.0; d],
            xp: vec![0.0; q],
            yv: vec![0.0; p],
            f: vec![0.0; p],
        }
    }
}

/// Per-level iteration counts.
#[derive(Debug, Clone, Copy, Default)]
struct LevelStats {
    max: usize,
    sum: usize,
    points: usize,
    at_x0: usize,
    inner_max: usize,
}

fn run_level(
    ctx: &StepContext<'_>,
    hist: &SweepState,
    coupled: bool,
    x0_index: Option<&[i64]>,
) -> Result<(ValueField, LevelStats)> {
    let level = hist.level();
    let window = ctx.windows[level].window.clone();
    let (p, d) = (ctx.problem.p, ctx.problem.d);
    let n = window.len();
    let mut y = vec![0.0; n * p];
    let mut z = vec![0.0; n * p * d];
    let mut counts = vec![(0usize, 0usize); n];
    y.par_chunks_mut(p)
        .zip(z.par_chunks_mut(p * d))
        .zip(counts.par_iter_mut())
        .enumerate()
        .try_for_each_init(
            || Scratch::new(ctx.problem),
            |buf, (flat, ((yo, zo), count))| -> Result<()> {
                let index = window.multi_index(flat);
                let res = if coupled {
                    ctx.point_coupled(hist, &index, yo, zo, buf)
                } else {
                    ctx.point_decoupled(hist, &index, yo, zo, buf)
                };
                *count = res?;
                Ok(())
            },
        )?;
    let at_x0 = x0_index
        .filter(|ix| window.contains(ix))
        .map(|ix| counts[window.flat_index(ix)].0)
        .unwrap_or(0);
    let stats = LevelStats {
        max: counts.iter().map(|c| c.0).max().unwrap_or(0),
        sum: counts.iter().map(|c| c.0).sum(),
        points: n,
        at_x0,
        inner_max: counts.iter().map(|c| c.1).max().unwrap_or(0),
    };
    Ok((ValueField::new(window, p, d, level, y, z)?, stats))
}

/// `Y^N = phi`, `Z^N = grad phi . sigma(T, x, phi, Z^N)`.
pub fn terminal_field(
    problem: &FbsdeProblem,
    spec: &GridSpec,
    window: ActiveWindow,
    level: usize,
    eps0: f64,
    max_picard: usize,
) -> Result<ValueField> {
    let (q, p, d) = (problem.q, problem.p, problem.d);
    let t = problem.terminal_time;
    if problem.terminal_gradient.is_none() && problem.exact_z.is_none() {
        return Err(Error::Config(format!(
            "{}: terminal Z needs either a terminal gradient or an exact Z",
            problem.name
        )));
    }
    let mut failure = None;
    let mut grad = vec![0.0; p * q];
    let mut sig = vec![0.0; q * d];
    let mut z_next = vec![0.0; p * d];
    let zero = vec![0.0; p * d];
    let field = ValueField::from_fn(spec, window, p, d, level, |x, y, z| {
        (problem.terminal)(x, y);
        let Some(g) = &problem.terminal_gradient else {
            (problem.exact_z.as_ref().expect("checked above"))(t, x, z);
            return;
        };
        g(x, &mut grad);
        let apply = |z_in: &[f64], sig: &mut [f64], out: &mut [f64]| {
            (problem.diffusion)(t, x, y, z_in, sig);
            for c in 0..p {
                for l in 0..d {
                    out[c * d + l] = (0..q).map(|i| grad[c * q + i] * sig[i * d + l]).sum();
                }
            }
        };
        if !problem.coupled {
            apply(&zero, &mut sig, z);
            return;
        }
        if let Some(ez) = &problem.exact_z {
            ez(t, x, &mut z_next);
            apply(&z_next.clone(), &mut sig, z);
            return;
        }
        z.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..max_picard {
            apply(z, &mut sig, &mut z_next);
            let diff = z.iter().zip(&z_next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            z.copy_from_slice(&z_next);
            if diff <= eps0 {
                return;
            }
        }
        failure.get_or_insert_with(|| x.to_vec());
    })?;
    if let Some(point) = failure {
        return Err(Error::Divergence {
            level,
            point,
            iterations: max_picard,
        });
    }
    Ok(field)
}

fn exact_field(problem: &FbsdeProblem, spec: &GridSpec, window: ActiveWindow, level: usize, t: f64) -> Result<ValueField> {
    let (ey, ez) = match (&problem.exact_y, &problem.exact_z) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Config(format!(
                "{}: exact terminal mode needs a closed-form solution",
                problem.name
            )))
        }
    };
    ValueField::from_fn(spec, window, problem.p, problem.d, level, |x, y, z| {
        ey(t, x, y);
        ez(t, x, z);
    })
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Sub-steps per coarse interval and grid refinement factor for the bootstrap.
pub fn bootstrap_plan(k: usize, n: usize, h: f64, r: usize, dt: f64) -> (usize, usize) {
    if k <= 1 {
        return (0, 1);
    }
    let m = (n as f64).powi(k as i32).min(BOOTSTRAP_MAX_SUBSTEPS as f64) as usize;
    let per_interval = m.div_ceil(k - 1);
    let target = dt.powi(k as i32 + 1);
    let mut c = 1usize;
    while (h / c as f64).powi(r as i32 + 1) * m as f64 > target && c < 64 {
        c += 1;
    }
    (per_interval, c)
}

struct Totals {
    stats: PicardStats,
    sum: usize,
    points: usize,
}

impl Totals {
    fn new() -> Self {
        Totals {
            stats: PicardStats::default(),
            sum: 0,
            points: 0,
        }
    }

    fn add(&mut self, s: &LevelStats) {
        self.stats.max = self.stats.max.max(s.max);
        self.stats.max_near_x0 = self.stats.max_near_x0.max(s.at_x0);
        self.stats.inner_max = self.stats.inner_max.max(s.inner_max);
        self.sum += s.sum;
        self.points += s.points;
    }

    fn finish(mut self) -> PicardStats {
        self.stats.mean = if self.points == 0 {
            0.0
        } else {
            self.sum as f64 / self.points as f64
        };
        self.stats
    }
}

/// History levels `N-k+1 ..= N-1` from a fine one-step sweep over `[t_{N-k+1}, T]`.
#[allow(clippy::too_many_arguments)]
fn bootstrap_levels(
    problem: &FbsdeProblem,
    config: &SolverConfig,
    rule: &GaussHermiteRule,
    coarse: &[LevelWindow],
    h: f64,
    r: usize,
    dt: f64,
    projected: &mut u64,
) -> Result<Vec<ValueField>> {
    let (k, n, q) = (config.k, config.n_steps, problem.q);
    let (per, c) = bootstrap_plan(k, n, h, r, dt);
    let fine_steps = per * (k - 1);
    let dt_f = dt / per as f64;
    let spec = GridSpec::uniform(q, h / c as f64)?;
    let ci = c as i64;
    let first = n - k + 1;
    let a_max = rule.max_node();
    let margin = stencil_margin(r);
    let env = envelope(problem, n, dt);

    // requirement at the recorded fine levels, then forward growth by the one-step cone
    let mut windows: Vec<LevelWindow> = Vec::with_capacity(fine_steps + 1);
    for f in 0..=fine_steps {
        let coarse_level = first + f.div_ceil(per);
        let req = (f % per == 0).then(|| &coarse[first + f / per]);
        let mut lo: Vec<i64>;
        let mut hi: Vec<i64>;
        let mut capped_lo = vec![false; q];
        let mut capped_hi = vec![false; q];
        if let Some(prev) = windows.last() {
            let t = problem.terminal_time - (fine_steps - f + 1) as f64 * dt_f;
            let (rlo, rhi) = reach(problem, &spec, &prev.window, t, dt_f, a_max);
            lo = (0..q)
                .map(|i| prev.window.lo()[i].min(index_floor(&spec, i, rlo[i]) - margin))
                .collect();
            hi = (0..q)
                .map(|i| prev.window.hi()[i].max(index_ceil(&spec, i, rhi[i]) + margin))
                .collect();
            capped_lo.clone_from(&prev.capped_lo);
            capped_hi.clone_from(&prev.capped_hi);
        } else {
            let w = &coarse[first].window;
            lo = w.lo().iter().map(|v| v * ci - margin).collect();
            hi = w.hi().iter().map(|v| v * ci + margin).collect();
        }
        if let Some(req) = req {
            for i in 0..q {
                lo[i] = lo[i].min(req.window.lo()[i] * ci - margin);
                hi[i] = hi[i].max(req.window.hi()[i] * ci + margin);
            }
        }
        let (edn, eup) = &env[coarse_level.min(n)];
        // never cap tighter than the coarse window this fine level sits in
        let cover = &coarse[coarse_level.min(n)].window;
        for i in 0..q {
            let elo = index_floor(&spec, i, edn[i])
                .saturating_sub(margin)
                .min(cover.lo()[i] * ci - margin);
            let ehi = index_ceil(&spec, i, eup[i])
                .saturating_add(margin)
                .max(cover.hi()[i] * ci + margin);
            if lo[i] < elo {
                lo[i] = elo;
                capped_lo[i] = true;
            }
            if hi[i] > ehi {
                hi[i] = ehi;
                capped_hi[i] = true;
            }
            if let Some(prev) = windows.last() {
                lo[i] = lo[i].min(prev.window.lo()[i]);
                hi[i] = hi[i].max(prev.window.hi()[i]);
            }
        }
        windows.push(LevelWindow {
            window: ActiveWindow::new(lo, hi)?,
            capped_lo,
            capped_hi,
        });
    }

    let interp = Interpolator::new(r)?;
    let coeffs = compute_coeffs(1)?;
    let t_origin = problem.terminal_time - fine_steps as f64 * dt_f;
    let ctx = StepContext::new(
        problem,
        &spec,
        &interp,
        &coeffs,
        rule,
        dt_f,
        t_origin,
        &windows,
        config.eps0,
        config.max_picard,
    );
    let top = terminal_field(
        problem,
        &spec,
        windows[fine_steps].window.clone(),
        fine_steps,
        config.eps0,
        config.max_picard,
    )?;
    let mut state = SweepState::new(vec![top])?;
    let mut recorded = Vec::with_capacity(k - 1);
    for f in (0..fine_steps).rev() {
        let (field, _) = run_level(&ctx, &state, problem.coupled, None)?;
        if f % per == 0 {
            let level = first + f / per;
            let w = coarse[level].window.clone();
            let fine = &field;
            let (p, d) = (problem.p, problem.d);
            let mut y = vec![0.0; w.len() * p];
            let mut z = vec![0.0; w.len() * p * d];
            for flat in 0..w.len() {
                let idx: Vec<i64> = w.multi_index(flat).iter().map(|v| v * ci).collect();
                let (fy, fz) = fine
                    .at_index(&idx)
                    .expect("fine window covers the coarse requirement");
                y[flat * p..(flat + 1) * p].copy_from_slice(fy);
                z[flat * p * d..(flat + 1) * p * d].copy_from_slice(fz);
            }
            recorded.push(ValueField::new(w, p, d, level, y, z)?);
        }
        state.push(field);
    }
    *projected += ctx.projected_queries();
    recorded.sort_by_key(|f| f.level());
    Ok(recorded)
}

/// Frozen levels `N-k+1 ..= N`, ordered from `N-k+1` upward.
#[allow(clippy::too_many_arguments)]
pub fn init_terminal(
    problem: &FbsdeProblem,
    config: &SolverConfig,
    spec: &GridSpec,
    windows: &[LevelWindow],
    rule: &GaussHermiteRule,
    h: f64,
    r: usize,
) -> Result<(Vec<ValueField>, u64)> {
    let (k, n) = (config.k, config.n_steps);
    let dt = config.dt(problem);
    let mut projected = 0;
    let mut levels = match config.terminal {
        TerminalMode::Exact => (n + 1 - k..n)
            .map(|m| exact_field(problem, spec, windows[m].window.clone(), m, m as f64 * dt))
            .collect::<Result<Vec<_>>>()?,
        TerminalMode::Bootstrap => {
            if problem.terminal_gradient.is_none() {
                return Err(Error::Config(format!(
                    "{}: bootstrap terminal mode needs the terminal gradient",
                    problem.name
                )));
            }
            if k == 1 {
                Vec::new()
            } else {
                bootstrap_levels(problem, config, rule, windows, h, r, dt, &mut projected)?
            }
        }
    };
    levels.push(terminal_field(
        problem,
        spec,
        windows[n].window.clone(),
        n,
        config.eps0,
        config.max_picard,
    )?);
    Ok((levels, projected))
}

/// Runs the full backward sweep and evaluates `(Y^0, Z^0)` at `x0`.
pub fn solve(problem: &FbsdeProblem, config: &SolverConfig) -> Result<SolveResult> {
    config.validate()?;
    problem.validate()?;
    if config.terminal == TerminalMode::Exact && !problem.has_exact_solution() {
        return Err(Error::Config(format!(
            "{}: exact terminal mode needs a closed-form solution",
            problem.name
        )));
    }
    if config.terminal == TerminalMode::Bootstrap && problem.terminal_gradient.is_none() {
        return Err(Error::Config(format!(
            "{}: bootstrap terminal mode needs the terminal gradient",
            problem.name
        )));
    }
    let pool = thread_pool(config.threads)?;
    pool.install(|| solve_inner(problem, config))
}

fn solve_inner(problem: &FbsdeProblem, config: &SolverConfig) -> Result<SolveResult> {
    let start = Instant::now();
    let (k, n) = (config.k, config.n_steps);
    let dt = config.dt(problem);
    let (h, r) = resolve_discretization(config, problem);
    let coeffs = compute_coeffs(k)?;
    let rule = hermite_rule(config.gh_points)?;
    let interp = Interpolator::new(r)?;
    let spec = GridSpec::uniform(problem.q, h)?;
    let windows = plan_windows(problem, &spec, k, n, dt, r, rule.max_node())?;
    let max_window_len = windows.iter().map(|w| w.window.len()).max().unwrap_or(0);
    log::debug!(
        "{} k={k} N={n}: h={h:.4e} r={r}, largest window {max_window_len} points",
        problem.name
    );

    let (seed, mut projected) = init_terminal(problem, config, &spec, &windows, &rule, h, r)?;
    let mut state = SweepState::new(seed)?;
    let ctx = StepContext::new(
        problem, &spec, &interp, &coeffs, &rule, dt, 0.0, &windows, config.eps0, config.max_picard,
    );
    let x0_index: Vec<i64> = (0..problem.q)
        .map(|i| spec.index_coord(i, problem.x0[i]).round() as i64)
        .collect();
    let mut totals = Totals::new();
    for level in (0..=state.level()).rev() {
        debug_assert_eq!(state.level(), level);
        let (field, stats) = run_level(&ctx, &state, problem.coupled, Some(&x0_index))?;
        totals.add(&stats);
        state.push(field);
    }
    projected += ctx.projected_queries();
    let field0 = state.into_newest();
    let mut y0 = vec![0.0; problem.p];
    let mut z0 = vec![0.0; problem.p * problem.d];
    field0.interpolate_y(&interp, &spec, &problem.x0, &mut y0)?;
    field0.interpolate_z(&interp, &spec, &problem.x0, &mut z0)?;
    let (err_y, err_z) = match problem.eval_exact(0.0, &problem.x0) {
        Some((ey, ez)) => (
            Some(y0.iter().zip(&ey).map(|(a, b)| (a - b).abs()).collect()),
            Some(z0.iter().zip(&ez).map(|(a, b)| (a - b).abs()).collect()),
        ),
        None => (None, None),
    };
    Ok(SolveResult {
        y0,
        z0,
        err_y,
        err_z,
        picard: totals.finish(),
        runtime_s: start.elapsed().as_secs_f64(),
        h,
        r,
        projected_queries: projected,
        max_window_len,
        field0,
    })
}

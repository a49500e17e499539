//! Uniform space grids, finite active windows, tensor-product Lagrange stencils
//! and dense per-level value fields.

use crate::error::{Error, Result};

/// Highest interpolation degree supported per dimension.
pub const MAX_DEGREE: usize = 15;
/// Highest spatial dimension supported by the interpolation kernels.
pub const MAX_DIM: usize = 4;

/// Uniform grid `origin + i * h` for every integer multi-index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    h: Vec<f64>,
    origin: Vec<f64>,
}

impl GridSpec {
    pub fn new(h: Vec<f64>, origin: Vec<f64>) -> Result<Self> {
        if h.is_empty() || h.len() != origin.len() {
            return Err(Error::InvalidArgument(format!(
                "grid spacing has {} entries but origin has {}",
                h.len(),
                origin.len()
            )));
        }
        if h.len() > MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "grid dimension {} exceeds {MAX_DIM}",
                h.len()
            )));
        }
        if let Some(bad) = h.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid spacing must be positive, got {bad}")));
        }
        Ok(GridSpec { h, origin })
    }

    /// Same spacing in every dimension, anchored at the origin.
    pub fn uniform(q: usize, h: f64) -> Result<Self> {
        Self::new(vec![h; q], vec![0.0; q])
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn spacing(&self) -> &[f64] {
        &self.h
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn coord(&self, dim: usize, index: i64) -> f64 {
        self.origin[dim] + index as f64 * self.h[dim]
    }

    pub fn point(&self, index: &[i64]) -> Vec<f64> {
        index
            .iter()
            .enumerate()
            .map(|(d, &i)| self.coord(d, i))
            .collect()
    }

    /// Continuous index coordinate of `x` along `dim`.
    pub fn index_coord(&self, dim: usize, x: f64) -> f64 {
        (x - self.origin[dim]) / self.h[dim]
    }
}

/// Box `lo..=hi` of multi-indices stored at one time level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveWindow {
    lo: Vec<i64>,
    hi: Vec<i64>,
}

impl ActiveWindow {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument("window bounds have mismatched dimension".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument(format!("window lo {lo:?} exceeds hi {hi:?}")));
        }
        Ok(ActiveWindow { lo, hi })
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn extent(&self, dim: usize) -> usize {
        (self.hi[dim] - self.lo[dim] + 1) as usize
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        (0..self.dim()).map(|d| self.extent(d)).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, index: &[i64]) -> bool {
        index
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(i, (l, h))| l <= i && i <= h)
    }

    pub fn contains_window(&self, other: &ActiveWindow) -> bool {
        self.contains(&other.lo) && self.contains(&other.hi)
    }

    /// Row-major offset (last dimension fastest). Caller guarantees containment.
    pub fn flat_index(&self, index: &[i64]) -> usize {
        let mut flat = 0usize;
        for d in 0..self.dim() {
            flat = flat * self.extent(d) + (index[d] - self.lo[d]) as usize;
        }
        flat
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<i64> {
        let mut idx = vec![0i64; self.dim()];
        for d in (0..self.dim()).rev() {
            let e = self.extent(d);
            idx[d] = self.lo[d] + (flat % e) as i64;
            flat /= e;
        }
        idx
    }

    /// Window grown by `cells[d]` on both sides of each dimension.
    pub fn inflate(&self, cells: &[i64]) -> ActiveWindow {
        ActiveWindow {
            lo: self.lo.iter().zip(cells).map(|(l, c)| l - c).collect(),
            hi: self.hi.iter().zip(cells).map(|(h, c)| h + c).collect(),
        }
    }

    /// Smallest box containing both windows.
    pub fn union(&self, other: &ActiveWindow) -> ActiveWindow {
        ActiveWindow {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| *a.min(b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| *a.max(b)).collect(),
        }
    }

    pub fn indices(&self) -> impl Iterator<Item = Vec<i64>> + '_ {
        (0..self.len()).map(move |f| self.multi_index(f))
    }
}

/// Block of `(r+1)^q` consecutive multi-indices starting at `start`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stencil {
    pub start: Vec<i64>,
    pub degree: usize,
}

impl Stencil {
    pub fn len(&self) -> usize {
        (self.degree + 1).pow(self.start.len() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> Vec<Vec<i64>> {
        let w = self.degree + 1;
        (0..self.len())
            .map(|mut f| {
                let mut idx = vec![0i64; self.start.len()];
                for d in (0..self.start.len()).rev() {
                    idx[d] = self.start[d] + (f % w) as i64;
                    f /= w;
                }
                idx
            })
            .collect()
    }
}

/// Lower index of the degree-`r` block nearest to continuous index `u`, clamped to `[lo, hi - r]`.
fn stencil_start(u: f64, r: usize, lo: i64, hi: i64) -> i64 {
    unclamped_start(u, r).clamp(lo, hi - r as i64)
}

fn unclamped_start(u: f64, r: usize) -> i64 {
    let mut v = u - r as f64 / 2.0 - 0.5;
    let vr = v.round();
    if (v - vr).abs() < 1e-9 * vr.abs().max(1.0) {
        v = vr;
    }
    v.ceil() as i64
}

fn check_degree(window: &ActiveWindow, r: usize) -> Result<()> {
    if r == 0 || r > MAX_DEGREE {
        return Err(Error::InvalidArgument(format!(
            "interpolation degree {r} outside [1, {MAX_DEGREE}]"
        )));
    }
    for d in 0..window.dim() {
        if window.extent(d) < r + 1 {
            return Err(Error::InvalidArgument(format!(
                "window holds {} points along dimension {d}, degree {r} needs {}",
                window.extent(d),
                r + 1
            )));
        }
    }
    Ok(())
}

/// Continuous index coordinates of `x`, or an out-of-domain error when `x`
/// is more than half a cell outside the window.
fn locate(spec: &GridSpec, window: &ActiveWindow, x: &[f64]) -> Result<[f64; MAX_DIM]> {
    if x.len() != spec.dim() || window.dim() != spec.dim() {
        return Err(Error::InvalidArgument(format!(
            "point has dimension {}, grid has {}",
            x.len(),
            spec.dim()
        )));
    }
    let mut u = [0.0; MAX_DIM];
    for d in 0..spec.dim() {
        let ud = spec.index_coord(d, x[d]);
        let lo = window.lo[d] as f64 - 0.5;
        let hi = window.hi[d] as f64 + 0.5;
        if !(ud >= lo && ud <= hi) {
            return Err(Error::OutOfDomain {
                point: x.to_vec(),
                dim: d,
                lo: spec.coord(d, 0) + lo * spec.h[d],
                hi: spec.coord(d, 0) + hi * spec.h[d],
            });
        }
        u[d] = ud;
    }
    Ok(u)
}

/// Neighbor stencil of degree `r` for the query point `x`.
pub fn neighbor_set(spec: &GridSpec, window: &ActiveWindow, x: &[f64], r: usize) -> Result<Stencil> {
    check_degree(window, r)?;
    let u = locate(spec, window, x)?;
    let start = (0..spec.dim())
        .map(|d| stencil_start(u[d], r, window.lo[d], window.hi[d]))
        .collect();
    Ok(Stencil { start, degree: r })
}

/// Barycentric weights `(-1)^i C(r, i)` for equispaced nodes `0..=r`.
fn barycentric_weights(r: usize) -> [f64; MAX_DEGREE + 1] {
    let mut w = [0.0; MAX_DEGREE + 1];
    let mut c = 1.0;
    for (i, wi) in w.iter_mut().enumerate().take(r + 1) {
        *wi = if i % 2 == 0 { c } else { -c };
        c = c * (r - i) as f64 / (i + 1) as f64;
    }
    w
}

/// Lagrange basis values at local coordinate `t` for nodes `0, 1, ..., r`.
pub fn lagrange_basis(t: f64, r: usize, out: &mut [f64]) {
    let bw = barycentric_weights(r);
    for i in 0..=r {
        if t == i as f64 {
            out[..=r].iter_mut().for_each(|v| *v = 0.0);
            out[i] = 1.0;
            return;
        }
    }
    let mut denom = 0.0;
    for i in 0..=r {
        let v = bw[i] / (t - i as f64);
        out[i] = v;
        denom += v;
    }
    for v in out[..=r].iter_mut() {
        *v /= denom;
    }
}

/// Reusable degree-`r` interpolation kernel over a dense window-shaped array
/// of `m`-vectors.
#[derive(Debug, Clone)]
pub struct Interpolator {
    degree: usize,
    bary: [f64; MAX_DEGREE + 1],
}

impl Interpolator {
    pub fn new(degree: usize) -> Result<Self> {
        if degree == 0 || degree > MAX_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "interpolation degree {degree} outside [1, {MAX_DEGREE}]"
            )));
        }
        Ok(Interpolator {
            degree,
            bary: barycentric_weights(degree),
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    fn basis(&self, t: f64, out: &mut [f64; MAX_DEGREE + 1]) {
        let r = self.degree;
        let ti = t.round();
        if t == ti && ti >= 0.0 && ti <= r as f64 {
            *out = [0.0; MAX_DEGREE + 1];
            out[ti as usize] = 1.0;
            return;
        }
        let mut denom = 0.0;
        for i in 0..=r {
            let v = self.bary[i] / (t - i as f64);
            out[i] = v;
            denom += v;
        }
        let inv = 1.0 / denom;
        for v in out[..=r].iter_mut() {
            *v *= inv;
        }
    }

    /// Interpolates `values` (laid out as `window.len()` consecutive `m`-vectors)
    /// at `x`, writing `m` components into `out`.
    pub fn interpolate(
        &self,
        spec: &GridSpec,
        window: &ActiveWindow,
        values: &[f64],
        x: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let u = locate(spec, window, x)?;
        self.interpolate_at_index_coords(window, values, &u[..spec.dim()], out)
    }

    /// As [`Interpolator::interpolate`] but with precomputed continuous index
    /// coordinates that are already known to lie inside the window.
    pub fn interpolate_at_index_coords(
        &self,
        window: &ActiveWindow,
        values: &[f64],
        u: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let r = self.degree;
        let q = window.dim();
        let m = out.len();
        check_degree(window, r)?;
        debug_assert_eq!(values.len(), window.len() * m);

        let mut basis = [[0.0; MAX_DEGREE + 1]; MAX_DIM];
        let mut start = [0i64; MAX_DIM];
        for d in 0..q {
            start[d] = stencil_start(u[d], r, window.lo[d], window.hi[d]);
            self.basis(u[d] - start[d] as f64, &mut basis[d]);
        }
        out.iter_mut().for_each(|v| *v = 0.0);

        if q == 1 {
            let base = (start[0] - window.lo[0]) as usize * m;
            let b = &basis[0];
            if m == 1 {
                let s: f64 = values[base..base + r + 1]
                    .iter()
                    .zip(&b[..=r])
                    .map(|(v, w)| v * w)
                    .sum();
                out[0] = s;
            } else {
                for i in 0..=r {
                    let row = &values[base + i * m..base + (i + 1) * m];
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += b[i] * v;
                    }
                }
            }
            return Ok(());
        }

        let mut stride = [0usize; MAX_DIM];
        let mut s = m;
        for d in (0..q).rev() {
            stride[d] = s;
            s *= window.extent(d);
        }
        let base: usize = (0..q)
            .map(|d| (start[d] - window.lo[d]) as usize * stride[d])
            .sum();
        let mut idx = [0usize; MAX_DIM];
        loop {
            let mut w = 1.0;
            let mut off = base;
            for d in 0..q {
                w *= basis[d][idx[d]];
                off += idx[d] * stride[d];
            }
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(&values[off..off + m]) {
                    *o += w * v;
                }
            }
            let mut d = q;
            loop {
                if d == 0 {
                    return Ok(());
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] <= r {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

/// `Y` (a `p`-vector) and `Z` (a row-major `p x d` matrix) at every point of a window.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    window: ActiveWindow,
    p: usize,
    d: usize,
    level: usize,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl ValueField {
    pub fn new(
        window: ActiveWindow,
        p: usize,
        d: usize,
        level: usize,
        y: Vec<f64>,
        z: Vec<f64>,
    ) -> Result<Self> {
        let n = window.len();
        if y.len() != n * p || z.len() != n * p * d {
            return Err(Error::InvalidArgument(format!(
                "field arrays have {} / {} entries, window of {n} points needs {} / {}",
                y.len(),
                z.len(),
                n * p,
                n * p * d
            )));
        }
        if let Some(pos) = y.iter().chain(&z).position(|v| !v.is_finite()) {
            let flat = if pos < y.len() { pos / p } else { (pos - y.len()) / (p * d) };
            return Err(Error::NonFiniteValue {
                level,
                point: window.multi_index(flat).iter().map(|&i| i as f64).collect(),
            });
        }
        Ok(ValueField {
            window,
            p,
            d,
            level,
            y,
            z,
        })
    }

    /// Fills a field by evaluating `f(x, y_out, z_out)` at every grid point.
    pub fn from_fn(
        spec: &GridSpec,
        window: ActiveWindow,
        p: usize,
        d: usize,
        level: usize,
        mut f: impl FnMut(&[f64], &mut [f64], &mut [f64]),
    ) -> Result<Self> {
        let n = window.len();
        let mut y = vec![0.0; n * p];
        let mut z = vec![0.0; n * p * d];
        for flat in 0..n {
            let x = spec.point(&window.multi_index(flat));
            f(
                &x,
                &mut y[flat * p..(flat + 1) * p],
                &mut z[flat * p * d..(flat + 1) * p * d],
            );
        }
        Self::new(window, p, d, level, y, z)
    }

    pub fn window(&self) -> &ActiveWindow {
        &self.window
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn y_values(&self) -> &[f64] {
        &self.y
    }

    pub fn z_values(&self) -> &[f64] {
        &self.z
    }

    pub fn y_at(&self, flat: usize) -> &[f64] {
        &self.y[flat * self.p..(flat + 1) * self.p]
    }

    pub fn z_at(&self, flat: usize) -> &[f64] {
        let pd = self.p * self.d;
        &self.z[flat * pd..(flat + 1) * pd]
    }

    /// Stored values at a grid multi-index, if it lies in the window.
    pub fn at_index(&self, index: &[i64]) -> Option<(&[f64], &[f64])> {
        self.window.contains(index).then(|| {
            let f = self.window.flat_index(index);
            (self.y_at(f), self.z_at(f))
        })
    }

    pub fn interpolate_y(
        &self,
        interp: &Interpolator,
        spec: &GridSpec,
        x: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        interp.interpolate(spec, &self.window, &self.y, x, &mut out[..self.p])
    }

    pub fn interpolate_z(
        &self,
        interp: &Interpolator,
        spec: &GridSpec,
        x: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        interp.interpolate(spec, &self.window, &self.z, x, &mut out[..self.p * self.d])
    }
}

/// Degree-`r` interpolation of `Y` and `Z` of `field` at `x`.
pub fn interpolate(
    field: &ValueField,
    spec: &GridSpec,
    x: &[f64],
    r: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let interp = Interpolator::new(r)?;
    let mut y = vec![0.0; field.p];
    let mut z = vec![0.0; field.p * field.d];
    field.interpolate_y(&interp, spec, x, &mut y)?;
    field.interpolate_z(&interp, spec, x, &mut z)?;
    Ok((y, z))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(h: f64, lo: i64, hi: i64) -> (GridSpec, ActiveWindow) {
        (
            GridSpec::uniform(1, h).unwrap(),
            ActiveWindow::new(vec![lo], vec![hi]).unwrap(),
        )
    }

    #[test]
    fn enclosing_cell_for_linear_stencil() {
        let (g, w) = line(0.1, -50, 50);
        let s = neighbor_set(&g, &w, &[0.05], 1).unwrap();
        assert_eq!(s.indices(), vec![vec![0], vec![1]]);
    }

    #[test]
    fn centered_quadratic_stencil() {
        let (g, w) = line(0.1, -50, 50);
        let s = neighbor_set(&g, &w, &[0.0], 2).unwrap();
        assert_eq!(s.indices(), vec![vec![-1], vec![0], vec![1]]);
    }

    #[test]
    fn tie_on_grid_point_picks_lower_cell() {
        let (g, w) = line(0.1, 0, 50);
        let s = neighbor_set(&g, &w, &[0.50], 1).unwrap();
        assert_eq!(s.indices(), vec![vec![4], vec![5]]);
    }

    #[test]
    fn stencil_clamps_at_edges() {
        let (g, w) = line(0.1, 0, 10);
        let s = neighbor_set(&g, &w, &[0.02], 4).unwrap();
        assert_eq!(s.start, vec![0]);
        let s = neighbor_set(&g, &w, &[1.03], 4).unwrap();
        assert_eq!(s.start, vec![6]);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let (g, w) = line(0.1, 0, 10);
        assert!(neighbor_set(&g, &w, &[1.04], 2).is_ok());
        assert!(matches!(
            neighbor_set(&g, &w, &[1.06], 2),
            Err(Error::OutOfDomain { .. })
        ));
        assert!(matches!(
            neighbor_set(&g, &w, &[-0.06], 2),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn window_too_narrow_for_degree() {
        let (g, w) = line(0.1, 0, 2);
        assert!(neighbor_set(&g, &w, &[0.1], 3).is_err());
    }

    #[test]
    fn constant_field_is_reproduced() {
        let g = GridSpec::uniform(2, 0.25).unwrap();
        let w = ActiveWindow::new(vec![-8, -8], vec![8, 8]).unwrap();
        let f = ValueField::from_fn(&g, w, 1, 1, 0, |_, y, z| {
            y[0] = 2.5;
            z[0] = -1.0;
        })
        .unwrap();
        for x in [[0.1, 0.3], [-1.9, 1.77], [0.0, 0.0]] {
            let (y, z) = interpolate(&f, &g, &x, 5).unwrap();
            assert!((y[0] - 2.5).abs() < 1e-12);
            assert!((z[0] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_reproduced_by_cubic_interpolation() {
        let (g, w) = line(0.1, -60, 60);
        let f = ValueField::from_fn(&g, w, 1, 1, 0, |x, y, z| {
            y[0] = x[0].powi(3);
            z[0] = 0.0;
        })
        .unwrap();
        for x in [0.0, 0.123, -3.21, 5.555, 5.98] {
            let (y, _) = interpolate(&f, &g, &[x], 3).unwrap();
            assert!((y[0] - x.powi(3)).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn grid_point_returns_stored_value() {
        let (g, w) = line(0.07, -30, 30);
        let f = ValueField::from_fn(&g, w, 2, 1, 0, |x, y, z| {
            y[0] = x[0].sin();
            y[1] = x[0].exp();
            z[0] = 0.0;
            z[1] = 0.0;
        })
        .unwrap();
        let interp = Interpolator::new(6).unwrap();
        let mut y = [0.0; 2];
        for i in -30..=30 {
            let x = g.coord(0, i);
            f.interpolate_y(&interp, &g, &[x], &mut y).unwrap();
            assert!((y[0] - x.sin()).abs() < 1e-12);
            assert!((y[1] - x.exp()).abs() < 1e-12 * x.exp());
        }
    }

    #[test]
    fn flat_and_multi_index_agree() {
        let w = ActiveWindow::new(vec![-2, 3, 0], vec![1, 5, 4]).unwrap();
        for f in 0..w.len() {
            assert_eq!(w.flat_index(&w.multi_index(f)), f);
        }
    }

    #[test]
    fn non_finite_field_rejected() {
        let w = ActiveWindow::new(vec![0], vec![3]).unwrap();
        let err = ValueField::new(w, 1, 1, 2, vec![0.0, f64::NAN, 0.0, 0.0], vec![0.0; 4]);
        assert!(matches!(err, Err(Error::NonFiniteValue { level: 2, .. })));
    }
}

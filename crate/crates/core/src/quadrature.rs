//! Gauss–Hermite rules and the standard-normal expectation operator built on them.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Largest supported number of points per dimension.
pub const MAX_POINTS: usize = 64;

/// `L`-point rule for `int e^{-x^2} g(x) dx`. Nodes ascend.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermiteRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermiteRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest node magnitude.
    pub fn max_node(&self) -> f64 {
        self.nodes.last().copied().unwrap_or(0.0)
    }

    /// `sum_j w_j g(a_j)`.
    pub fn integrate(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&a, &w)| w * g(a))
            .sum()
    }

    pub fn tensor(&self, d: usize) -> TensorRule<'_> {
        TensorRule { base: self, d }
    }
}

/// Computes the `L`-point Gauss–Hermite rule.
///
/// Roots of `H_L` are found by Newton's method on the orthonormal three-term
/// recurrence, so no factorials or powers of two are formed. With `p_L` the
/// orthonormal polynomial the weight is `2 / (p_L'(a))^2`, identical to
/// `2^{L+1} L! sqrt(pi) / H_L'(a)^2`.
pub fn hermite_rule(points: usize) -> Result<GaussHermiteRule> {
    if !(1..=MAX_POINTS).contains(&points) {
        return Err(Error::InvalidArgument(format!(
            "Gauss-Hermite point count {points} outside [1, {MAX_POINTS}]"
        )));
    }
    let n = points;
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = n.div_ceil(2);
    let mut z = 0.0_f64;

    // p_n(z) and p_n'(z) for the orthonormal family
    let eval = |z: f64| -> (f64, f64) {
        let mut p1 = pim4;
        let mut p2 = 0.0;
        for j in 0..n {
            let p3 = p2;
            p2 = p1;
            let jf = j as f64;
            p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
        }
        (p1, (2.0 * nf).sqrt() * p2)
    };

    // initial guesses from the large-root asymptotics, largest root first
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut converged = false;
        for _ in 0..100 {
            let (p, dp) = eval(z);
            let z1 = z;
            z = z1 - p / dp;
            if (z - z1).abs() <= 1e-15 * z1.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        debug_assert!(converged, "Hermite root {i} of {n} did not converge");
        if n % 2 == 1 && i == half - 1 {
            z = 0.0;
        }
        let (_, dp) = eval(z);
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (dp * dp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    Ok(GaussHermiteRule {
        nodes: x,
        weights: w,
    })
}

/// Tensor product of a one-dimensional rule over `d` dimensions.
///
/// Nodes are produced on the fly from a multi-index odometer.
#[derive(Debug, Clone, Copy)]
pub struct TensorRule<'a> {
    base: &'a GaussHermiteRule,
    d: usize,
}

impl<'a> TensorRule<'a> {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn base(&self) -> &GaussHermiteRule {
        self.base
    }

    /// `L^d`.
    pub fn len(&self) -> usize {
        self.base.len().pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Calls `visit(node, weight)` for each tensor node without allocating per node.
    pub fn for_each<E>(&self, mut visit: impl FnMut(&[f64], f64) -> std::result::Result<(), E>) -> std::result::Result<(), E> {
        let l = self.base.len();
        let mut idx = vec![0usize; self.d];
        let mut node: Vec<f64> = vec![self.base.nodes[0]; self.d];
        loop {
            let weight: f64 = idx.iter().map(|&i| self.base.weights[i]).product();
            visit(&node, weight)?;
            let mut dim = 0;
            loop {
                if dim == self.d {
                    return Ok(());
                }
                idx[dim] += 1;
                if idx[dim] < l {
                    node[dim] = self.base.nodes[idx[dim]];
                    break;
                }
                idx[dim] = 0;
                node[dim] = self.base.nodes[0];
                dim += 1;
            }
        }
    }

    pub fn iter(&self) -> TensorIter<'a> {
        TensorIter {
            base: self.base,
            idx: vec![0; self.d],
            done: self.base.is_empty(),
        }
    }

    /// `sum_j w_j`, which equals `pi^{d/2}` for an exact rule.
    pub fn total_weight(&self) -> f64 {
        let one: f64 = self.base.weights.iter().sum();
        one.powi(self.d as i32)
    }
}

/// Iterator over `(node, weight)` pairs of a [`TensorRule`].
#[derive(Debug, Clone)]
pub struct TensorIter<'a> {
    base: &'a GaussHermiteRule,
    idx: Vec<usize>,
    done: bool,
}

impl Iterator for TensorIter<'_> {
    type Item = (Vec<f64>, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let node = self.idx.iter().map(|&i| self.base.nodes[i]).collect();
        let weight = self.idx.iter().map(|&i| self.base.weights[i]).product();
        let l = self.base.len();
        let mut dim = 0;
        loop {
            if dim == self.idx.len() {
                self.done = true;
                break;
            }
            self.idx[dim] += 1;
            if self.idx[dim] < l {
                break;
            }
            self.idx[dim] = 0;
            dim += 1;
        }
        Some((node, weight))
    }
}

/// Approximates `E[g(N)]` for a standard `d`-dimensional normal `N`.
///
/// `g` receives the sample point `sqrt(2) a_j` (not the raw node) and writes
/// its `m` components into the output slice.
pub fn expect_gaussian_into<F>(
    rule: &GaussHermiteRule,
    d: usize,
    out: &mut [f64],
    mut g: F,
) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let m = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut sample = vec![0.0; d];
    let mut value = vec![0.0; m];
    let norm = PI.powf(-(d as f64) / 2.0);
    rule.tensor(d).for_each(|node, weight| {
        for (s, a) in sample.iter_mut().zip(node) {
            *s = std::f64::consts::SQRT_2 * a;
        }
        g(&sample, &mut value);
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: sample.clone(),
            });
        }
        let w = weight * norm;
        for (o, v) in out.iter_mut().zip(&value) {
            *o += w * v;
        }
        Ok(())
    })
}

/// Allocating convenience form of [`expect_gaussian_into`].
pub fn expect_gaussian<F>(rule: &GaussHermiteRule, d: usize, m: usize, g: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut out = vec![0.0; m];
    expect_gaussian_into(rule, d, &mut out, g)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_rule() {
        let r = hermite_rule(1).unwrap();
        assert_eq!(r.nodes(), &[0.0]);
        assert!((r.weights()[0] - PI.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn two_point_rule() {
        let r = hermite_rule(2).unwrap();
        let a = 0.5_f64.sqrt();
        assert!((r.nodes()[0] + a).abs() < 1e-14);
        assert!((r.nodes()[1] - a).abs() < 1e-14);
        for w in r.weights() {
            assert!((w - PI.sqrt() / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_counts() {
        assert!(hermite_rule(0).is_err());
        assert!(hermite_rule(65).is_err());
    }

    #[test]
    fn nodes_sorted_symmetric_weights_positive() {
        for l in 1..=MAX_POINTS {
            let r = hermite_rule(l).unwrap();
            let x = r.nodes();
            assert!(x.windows(2).all(|p| p[0] < p[1]), "L={l}");
            for i in 0..l {
                assert!((x[i] + x[l - 1 - i]).abs() < 1e-12, "L={l}");
            }
            assert!(r.weights().iter().all(|&w| w > 0.0));
            let s: f64 = r.weights().iter().sum();
            assert!((s / PI.sqrt() - 1.0).abs() < 1e-12, "L={l} sum={s}");
        }
    }

    #[test]
    fn weight_formula_matches_hermite_derivative() {
        // physicists' H_L via recurrence, weights 2^{L+1} L! sqrt(pi) / H_L'(a)^2
        for l in [3usize, 5, 8, 12] {
            let r = hermite_rule(l).unwrap();
            for (&a, &w) in r.nodes().iter().zip(r.weights()) {
                let (mut h0, mut h1) = (1.0_f64, 2.0 * a);
                for n in 1..l {
                    let h2 = 2.0 * a * h1 - 2.0 * n as f64 * h0;
                    h0 = h1;
                    h1 = h2;
                }
                let dh = 2.0 * l as f64 * h0;
                let fact: f64 = (1..=l).map(|i| i as f64).product();
                let want = 2f64.powi(l as i32 + 1) * fact * PI.sqrt() / (dh * dh);
                assert!((w / want - 1.0).abs() < 1e-11, "L={l}");
            }
        }
    }

    #[test]
    fn expectation_of_one_and_second_moment() {
        let r = hermite_rule(8).unwrap();
        for d in 1..=3 {
            let e = expect_gaussian(&r, d, 1, |_, out| out[0] = 1.0).unwrap();
            assert!((e[0] - 1.0).abs() < 1e-12);
        }
        let e = expect_gaussian(&r, 1, 1, |x, out| out[0] = x[0] * x[0]).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-13);
        let e = expect_gaussian(&r, 2, 1, |x, out| out[0] = x[0] * x[1]).unwrap();
        assert!(e[0].abs() < 1e-14);
    }

    #[test]
    fn tensor_iteration_counts_and_weight() {
        let r = hermite_rule(5).unwrap();
        let t = r.tensor(3);
        assert_eq!(t.iter().count(), 125);
        assert_eq!(t.len(), 125);
        let mut n = 0;
        t.for_each::<()>(|_, _| {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 125);
        let s: f64 = t.iter().map(|(_, w)| w).sum();
        assert!((s / PI.powf(1.5) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn non_finite_integrand_reports_node() {
        let r = hermite_rule(4).unwrap();
        let err = expect_gaussian(&r, 1, 1, |x, out| {
            out[0] = if x[0] > 2.0 { f64::NAN } else { 1.0 }
        })
        .unwrap_err();
        match err {
            Error::NonFinite { node } => assert!(node[0] > 2.0),
            other => panic!("unexpected {other:?}"),
        }
    }
}

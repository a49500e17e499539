//! Derivative-approximation weights for uniformly spaced samples and the
//! root-condition screen for the resulting backward multistep recursion.
//!
//! The weights `alpha_{k,i} * dt` make `sum_i alpha_{k,i} u(t0 + i dt)` reproduce
//! `u'(t0)` for every polynomial of degree `<= k`. They are obtained by solving
//! the `(k+1) x (k+1)` Vandermonde system in exact rational arithmetic.

use nalgebra::DMatrix;
use num_complex::Complex64;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Exact rational used for the scaled weights.
pub type Rational = Ratio<i128>;

/// Largest supported step count.
pub const MAX_STEPS: usize = 8;

/// Tolerance on `|lambda|` for a root to count as lying on the unit circle.
const UNIT_CIRCLE_TOL: f64 = 1e-8;
/// A unit-circle root is simple when `|P'(lambda)|` exceeds this.
const SIMPLE_ROOT_TOL: f64 = 1e-8;

/// Weights of the `k`-step derivative approximation, scaled by `dt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultistepCoeffs {
    k: usize,
    scaled: Vec<Rational>,
}

impl MultistepCoeffs {
    pub fn k(&self) -> usize {
        self.k
    }

    /// `alpha_{k,i} * dt` for `i = 0..=k` as exact rationals.
    pub fn scaled_alphas(&self) -> &[Rational] {
        &self.scaled
    }

    /// `alpha_{k,i} * dt` as floats.
    pub fn scaled_f64(&self) -> Vec<f64> {
        self.scaled.iter().map(to_f64).collect()
    }

    /// `alpha_{k,i}` for a concrete step size (units of 1/time).
    pub fn alphas(&self, dt: f64) -> Vec<f64> {
        self.scaled.iter().map(|a| to_f64(a) / dt).collect()
    }

    /// Root condition holds (see [`stability_report`]).
    pub fn is_stable(&self) -> bool {
        stability_report(self).stable
    }
}

fn to_f64(r: &Rational) -> f64 {
    // numerators and denominators stay far below 2^53 for k <= 8
    r.numer().to_f64().unwrap_or(f64::NAN) / r.denom().to_f64().unwrap_or(f64::NAN)
}

/// Solves the Vandermonde system for the `k`-step weights.
pub fn compute_coeffs(k: usize) -> Result<MultistepCoeffs> {
    if !(1..=MAX_STEPS).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "step count k = {k} outside [1, {MAX_STEPS}]"
        )));
    }
    let n = k + 1;
    // row j: sum_i i^j * a_i = delta_{j1}
    let mut m: Vec<Vec<Rational>> = (0..n)
        .map(|j| {
            let mut row: Vec<Rational> = (0..n)
                .map(|i| Rational::from_integer((i as i128).pow(j as u32)))
                .collect();
            row.push(Rational::from_integer(i128::from(j == 1)));
            row
        })
        .collect();

    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !m[r][col].is_zero())
            .expect("Vandermonde matrix with distinct nodes is nonsingular");
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col && !m[r][col].is_zero() {
                let factor = m[r][col];
                for c in col..=n {
                    let sub = factor * m[col][c];
                    m[r][c] -= sub;
                }
            }
        }
    }
    let scaled = m.into_iter().map(|row| row[n]).collect();
    Ok(MultistepCoeffs { k, scaled })
}

/// `sum_i alpha_{k,i} u(t0 + i dt)` from the `k+1` samples.
pub fn approx_derivative(samples: &[f64], coeffs: &MultistepCoeffs, dt: f64) -> Result<f64> {
    if samples.len() != coeffs.k + 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} samples for k = {}, got {}",
            coeffs.k + 1,
            coeffs.k,
            samples.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let sum: f64 = samples
        .iter()
        .zip(coeffs.scaled_f64())
        .map(|(u, a)| u * a)
        .sum();
    Ok(sum / dt)
}

/// Roots of the characteristic polynomial and the root-condition verdict.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub k: usize,
    /// All `k` roots; the first entry is the consistency root `1`.
    pub roots: Vec<Complex64>,
    /// Largest modulus among the roots other than (one copy of) `1`.
    pub max_abs_nontrivial: f64,
    pub stable: bool,
}

/// Characteristic polynomial `P(lambda) = sum_j alpha_{k,j} lambda^{k-j}` of the
/// backward recursion `sum_j alpha_{k,j} Y^{n+j} = ...`.
///
/// `1` is always a root because the weights sum to zero. It is divided out
/// exactly, and the remaining roots come from the companion matrix of the
/// quotient, polished by Newton steps on the full polynomial.
pub fn stability_report(coeffs: &MultistepCoeffs) -> StabilityReport {
    let k = coeffs.k;
    let poly = &coeffs.scaled; // highest degree first

    // synthetic division by (lambda - 1)
    let mut quotient: Vec<Rational> = Vec::with_capacity(k);
    let mut acc = Rational::zero();
    for c in &poly[..k] {
        acc += *c;
        quotient.push(acc);
    }
    debug_assert!((acc + poly[k]).is_zero());

    let full: Vec<f64> = poly.iter().map(to_f64).collect();
    let mut roots = vec![Complex64::new(1.0, 0.0)];
    if k > 1 {
        let lead = to_f64(&quotient[0]);
        let monic: Vec<f64> = quotient[1..].iter().map(|c| to_f64(c) / lead).collect();
        let m = monic.len();
        let mut companion = DMatrix::<f64>::zeros(m, m);
        for (i, c) in monic.iter().enumerate() {
            companion[(0, i)] = -c;
        }
        for i in 1..m {
            companion[(i, i - 1)] = 1.0;
        }
        for z in companion.complex_eigenvalues().iter() {
            roots.push(polish(&full, *z));
        }
    }

    let max_abs_nontrivial = roots[1..].iter().map(|z| z.norm()).fold(0.0, f64::max);
    let stable = roots.iter().all(|z| {
        let r = z.norm();
        if r > 1.0 + UNIT_CIRCLE_TOL {
            false
        } else if r >= 1.0 - UNIT_CIRCLE_TOL {
            horner_derivative(&full, *z).norm() > SIMPLE_ROOT_TOL
        } else {
            true
        }
    });
    StabilityReport {
        k,
        roots,
        max_abs_nontrivial,
        stable,
    }
}

fn horner(poly: &[f64], z: Complex64) -> Complex64 {
    poly.iter()
        .fold(Complex64::zero(), |acc, &c| acc * z + Complex64::new(c, 0.0))
}

fn horner_derivative(poly: &[f64], z: Complex64) -> Complex64 {
    let deg = poly.len() - 1;
    poly[..deg]
        .iter()
        .enumerate()
        .fold(Complex64::zero(), |acc, (i, &c)| {
            acc * z + Complex64::new(c * (deg - i) as f64, 0.0)
        })
}

fn polish(poly: &[f64], mut z: Complex64) -> Complex64 {
    for _ in 0..8 {
        let d = horner_derivative(poly, z);
        if d.norm() == 0.0 {
            break;
        }
        let step = horner(poly, z) / d;
        if !step.re.is_finite() || !step.im.is_finite() {
            break;
        }
        z -= step;
        if step.norm() <= 1e-16 * z.norm().max(1.0) {
            break;
        }
    }
    z
}

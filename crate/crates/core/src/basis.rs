//! Cubic B-spline bases, the curvature penalty, and the squared-exponential
//! Gram matrix.
//!
//! The spline basis is clamped: both boundary knots are repeated four times
//! and the interior knots sit at empirical quantiles of the abscissae. With
//! `m` interior knots the basis has `K = m + 4` functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Spline order minus one.
pub const DEGREE: usize = 3;

/// Relative size of the diagonal nugget added to a Gram matrix before it is
/// factorized: `A + NUGGET_REL * U * I`.
pub const NUGGET_REL: f64 = 1e-8;

/// Default number of interior knots.
pub const DEFAULT_INTERIOR_KNOTS: usize = 30;

/// A clamped cubic B-spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Builds a basis from an explicit interior knot set on `[lo, hi]`.
    pub fn with_interior_knots(lo: f64, hi: f64, interior: &[f64]) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvariantViolation(format!(
                "boundary knots must satisfy lo < hi (got {lo}, {hi})"
            )));
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * (DEGREE + 1));
        knots.extend(std::iter::repeat_n(lo, DEGREE + 1));
        let mut prev = lo;
        for &k in interior {
            if !(k > lo && k < hi) || k < prev {
                return Err(Error::InvariantViolation(format!(
                    "interior knot {k} not nondecreasing inside ({lo}, {hi})"
                )));
            }
            knots.push(k);
            prev = k;
        }
        knots.extend(std::iter::repeat_n(hi, DEGREE + 1));
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions `K`.
    pub fn len(&self) -> usize {
        self.knots.len() - DEGREE - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Values of all `K` basis functions (or their `deriv`-th derivatives) at `x`.
    pub fn evaluate(&self, x: f64, deriv: usize) -> Result<Vec<f64>> {
        let (lo, hi) = (self.lower(), self.upper());
        if !(x >= lo && x <= hi) {
            return Err(Error::OutOfDomain { x, lo, hi });
        }
        Ok(eval_all(&self.knots, x, deriv))
    }
}

/// Cox-de Boor table of every basis of degree 0..=3, then the derivative
/// recursion on top of it.
fn eval_all(t: &[f64], x: f64, deriv: usize) -> Vec<f64> {
    let m = t.len();
    let last = t[m - 1];
    // degree-0 indicator; the last nonempty interval is closed on the right
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(DEGREE + 1);
    let mut n0 = vec![0.0; m - 1];
    let span = if x >= last {
        (0..m - 1).rev().find(|&i| t[i] < t[i + 1]).unwrap_or(0)
    } else {
        (0..m - 1)
            .find(|&i| t[i] <= x && x < t[i + 1])
            .unwrap_or(0)
    };
    n0[span] = 1.0;
    table.push(n0);
    for p in 1..=DEGREE {
        let prev = &table[p - 1];
        let mut cur = vec![0.0; m - 1 - p];
        for (i, c) in cur.iter_mut().enumerate() {
            let left = ratio(x - t[i], t[i + p] - t[i]) * prev[i];
            let right = ratio(t[i + p + 1] - x, t[i + p + 1] - t[i + 1]) * prev[i + 1];
            *c = left + right;
        }
        table.push(cur);
    }
    let k = m - 1 - DEGREE;
    (0..k).map(|i| derivative(t, &table, i, DEGREE, deriv)).collect()
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn derivative(t: &[f64], table: &[Vec<f64>], i: usize, p: usize, d: usize) -> f64 {
    if d == 0 {
        return table[p][i];
    }
    if p == 0 {
        return 0.0;
    }
    let pf = p as f64;
    let a = ratio(pf, t[i + p] - t[i]) * derivative(t, table, i, p - 1, d - 1);
    let b = ratio(pf, t[i + p + 1] - t[i + 1]) * derivative(t, table, i + 1, p - 1, d - 1);
    a - b
}

/// Places `n_interior` knots at equally spaced empirical quantiles of `x`.
pub fn build_basis(x: &[f64], n_interior: usize) -> Result<SplineBasis> {
    if x.len() < DEGREE + 1 {
        return Err(Error::TooFewPoints {
            got: x.len(),
            need: DEGREE + 1,
        });
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let interior: Vec<f64> = (1..=n_interior)
        .map(|k| quantile_sorted(&sorted, k as f64 / (n_interior + 1) as f64))
        .collect();
    SplineBasis::with_interior_knots(lo, hi, &interior)
}

/// Linear-interpolation quantile of a sorted slice.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The `n × K` matrix `B_ik = b_k(x_i)`.
pub fn design_matrix(basis: &SplineBasis, x: &[f64]) -> Result<DMatrix<f64>> {
    let k = basis.len();
    let mut b = DMatrix::zeros(x.len(), k);
    for (i, &xi) in x.iter().enumerate() {
        let row = basis.evaluate(xi, 0)?;
        for (j, v) in row.into_iter().enumerate() {
            b[(i, j)] = v;
        }
    }
    Ok(b)
}

/// `R_kk' = ∫ b''_k b''_k'` over the knot range.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix(DMatrix<f64>);

impl PenaltyMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// `φᵀ R φ`, the integrated squared curvature of `Σ φ_k b_k`.
    pub fn quadratic_form(&self, coef: &DVector<f64>) -> f64 {
        coef.dot(&(&self.0 * coef))
    }
}

/// The second derivatives are piecewise linear, so the two-node
/// Gauss-Legendre rule on each knot interval integrates the products exactly.
pub fn penalty_matrix(basis: &SplineBasis) -> PenaltyMatrix {
    let k = basis.len();
    let t = basis.knots();
    let mut r = DMatrix::zeros(k, k);
    let node = 1.0 / 3f64.sqrt();
    for w in t.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for z in [-node, node] {
            let d2 = eval_all(t, mid + half * z, 2);
            for p in 0..k {
                if d2[p] == 0.0 {
                    continue;
                }
                for q in 0..k {
                    r[(p, q)] += half * d2[p] * d2[q];
                }
            }
        }
    }
    // exact symmetry
    let r = 0.5 * (&r + r.transpose());
    PenaltyMatrix(r)
}

/// The Gram matrix `A_lm = U exp(-(x_l - x_m)² / 2s²)`.
///
/// The stored matrix carries no nugget; [`KernelGram::regularized`] adds it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGram {
    matrix: DMatrix<f64>,
    u: f64,
}

impl KernelGram {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn variance_scale(&self) -> f64 {
        self.u
    }

    /// `A + NUGGET_REL · U · I`, the matrix every factorization works with.
    pub fn regularized(&self) -> DMatrix<f64> {
        let mut a = self.matrix.clone();
        let nug = NUGGET_REL * self.u;
        for i in 0..a.nrows() {
            a[(i, i)] += nug;
        }
        a
    }
}

pub fn kernel_value(x: f64, t: f64, u: f64, s: f64) -> f64 {
    let d = x - t;
    u * (-(d * d) / (2.0 * s * s)).exp()
}

pub fn kernel_gram(x: &[f64], u: f64, s: f64) -> Result<KernelGram> {
    if !(u > 0.0 && s > 0.0) {
        return Err(Error::InvariantViolation(format!(
            "kernel parameters must be positive (U = {u}, s = {s})"
        )));
    }
    let n = x.len();
    let mut a = DMatrix::zeros(n, n);
    for l in 0..n {
        a[(l, l)] = u;
        for m in 0..l {
            let v = kernel_value(x[l], x[m], u, s);
            a[(l, m)] = v;
            a[(m, l)] = v;
        }
    }
    Ok(KernelGram { matrix: a, u })
}

/// `U = 1 / (s √(2π))`, the variance scale that makes the kernel integrate to
/// one and ties the smoothing parameter to the length scale alone.
pub fn tied_variance_scale(s: f64) -> f64 {
    1.0 / (s * (2.0 * PI).sqrt())
}

/// A basis together with its design and penalty matrices at a fixed set of
/// abscissae.
#[derive(Debug, Clone)]
pub struct SplineDesign {
    basis: SplineBasis,
    design: DMatrix<f64>,
    penalty: PenaltyMatrix,
}

impl SplineDesign {
    pub fn new(x: &[f64], n_interior: usize) -> Result<Self> {
        let basis = build_basis(x, n_interior)?;
        Self::from_basis(basis, x)
    }

    pub fn from_basis(basis: SplineBasis, x: &[f64]) -> Result<Self> {
        let design = design_matrix(&basis, x)?;
        let penalty = penalty_matrix(&basis);
        Ok(Self {
            basis,
            design,
            penalty,
        })
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn penalty(&self) -> &PenaltyMatrix {
        &self.penalty
    }

    /// `tr(BᵀB) / tr(R)`: the λ at which data and penalty terms have equal
    /// size under unit weights.
    pub fn lambda_scale(&self) -> f64 {
        let btb: f64 = self.design.iter().map(|v| v * v).sum();
        let tr_r = self.penalty.0.trace();
        btb / tr_r
    }
}

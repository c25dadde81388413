//! Conditional maximizations of the M-step.
//!
//! Regime functions are refit by weighted penalized least squares (spline
//! coefficients) or by the Gaussian-process posterior mean; variances and
//! latent parameters then have closed-form updates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::inverse_diagonal;
use crate::model::{LatentModel, NoiseModel, Responsibilities};

/// Diagonal of a hat matrix together with its trace.
#[derive(Debug, Clone)]
pub struct HatMatrix {
    pub diag: DVector<f64>,
    pub trace: f64,
}

impl HatMatrix {
    fn from_diag(diag: DVector<f64>) -> Self {
        let trace = diag.sum();
        Self { diag, trace }
    }

    /// `tr(D H)` for `D = diag(p)`.
    pub fn weighted_trace(&self, p: &[f64]) -> f64 {
        self.diag.iter().zip(p).map(|(h, w)| h * w).sum()
    }
}

/// Solution of `(BᵀWB + 2λR) φ = BᵀW y`.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub coefficients: DVector<f64>,
    pub fitted: DVector<f64>,
    pub hat: HatMatrix,
    factor: Cholesky<f64, Dyn>,
}

impl PenalizedFit {
    /// The full `n × n` hat matrix `B (BᵀWB + 2λR)⁻¹ BᵀW`.
    pub fn hat_matrix(&self, design: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
        let mut btw = design.transpose();
        for (i, w) in weights.iter().enumerate() {
            btw.column_mut(i).scale_mut(*w);
        }
        design * self.factor.solve(&btw)
    }
}

/// Weighted penalized spline fit with diagonal weights `W = diag(weights)`.
pub fn fit_penalized(
    y: &DVector<f64>,
    design: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    weights: &[f64],
    lambda: f64,
) -> Result<PenalizedFit> {
    let (n, k) = design.shape();
    // BᵀWB accumulated row by row
    let mut m = penalty * (2.0 * lambda);
    let mut rhs = DVector::zeros(k);
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let row = design.row(i);
        let nz: Vec<usize> = (0..k).filter(|&c| row[c] != 0.0).collect();
        for &a in &nz {
            rhs[a] += w * row[a] * y[i];
            for &b in &nz {
                m[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    let factor = m
        .cholesky()
        .ok_or(Error::SingularSystem { regime: 0 })?;
    let coefficients = factor.solve(&rhs);
    if coefficients.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem { regime: 0 });
    }
    let fitted = design * &coefficients;
    // H_ii = w_i b_iᵀ M⁻¹ b_i
    let bt = design.transpose();
    let solved = factor.solve(&bt);
    let diag = DVector::from_fn(n, |i, _| weights[i] * bt.column(i).dot(&solved.column(i)));
    Ok(PenalizedFit {
        coefficients,
        fitted,
        hat: HatMatrix::from_diag(diag),
        factor,
    })
}

/// Gaussian-process posterior mean `A (A + W⁻¹)⁻¹ y`, evaluated as
/// `A W^½ (W^½ A W^½ + I)⁻¹ W^½ y` so that zero weights are allowed.
#[derive(Debug, Clone)]
pub struct BayesFit {
    pub fitted: DVector<f64>,
    /// `v` with `fitted = A v`.
    pub dual: DVector<f64>,
    pub hat: HatMatrix,
}

/// `gram` must already carry its nugget.
pub fn fit_bayes(y: &DVector<f64>, gram: &DMatrix<f64>, weights: &[f64]) -> Result<BayesFit> {
    let n = y.len();
    let sw: Vec<f64> = weights.iter().map(|w| w.max(0.0).sqrt()).collect();
    let mut c = DMatrix::from_fn(n, n, |i, j| sw[i] * gram[(i, j)] * sw[j]);
    for i in 0..n {
        c[(i, i)] += 1.0;
    }
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::InvariantViolation("I + W½AW½ not positive definite".into()))?;
    let wy = DVector::from_fn(n, |i, _| sw[i] * y[i]);
    let mut dual = chol.solve(&wy);
    for i in 0..n {
        dual[i] *= sw[i];
    }
    let fitted = gram * &dual;
    // H = I - W^-½ C⁻¹ W^½, so H_ii = 1 - (C⁻¹)_ii
    let inv_diag = inverse_diagonal(&chol.l())?;
    let diag = DVector::from_fn(n, |i, _| 1.0 - inv_diag[i]);
    Ok(BayesFit {
        fitted,
        dual,
        hat: HatMatrix::from_diag(diag),
    })
}

/// The full hat matrix of [`fit_bayes`], `A W^½ (W^½ A W^½ + I)⁻¹ W^½`.
pub fn bayes_hat_matrix(gram: &DMatrix<f64>, weights: &[f64]) -> Result<DMatrix<f64>> {
    let n = gram.nrows();
    let sw: Vec<f64> = weights.iter().map(|w| w.max(0.0).sqrt()).collect();
    let mut c = DMatrix::from_fn(n, n, |i, j| sw[i] * gram[(i, j)] * sw[j]);
    for i in 0..n {
        c[(i, i)] += 1.0;
    }
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::InvariantViolation("I + W½AW½ not positive definite".into()))?;
    let rhs = DMatrix::from_fn(n, n, |i, j| if i == j { sw[i] } else { 0.0 });
    let mut inner = chol.solve(&rhs);
    for i in 0..n {
        inner.row_mut(i).scale_mut(sw[i]);
    }
    Ok(gram * inner)
}

/// Problems met while updating variances. None is fatal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VarianceIssue {
    /// The adjusted denominator fell below 1; the unadjusted one was used.
    DegenerateDenominator { regime: usize, denominator: f64 },
    /// The estimate underflowed and was floored.
    Floored { regime: usize },
}

#[derive(Debug, Clone)]
pub struct SigmaUpdate {
    pub noise: NoiseModel,
    pub issues: Vec<VarianceIssue>,
}

pub const DENOMINATOR_FLOOR: f64 = 1.0;
pub const VARIANCE_FLOOR_REL: f64 = 1e-12;

/// Variance update. `traces[j] = tr(D_j H_j)` enables the
/// degrees-of-freedom adjustment; `None` gives the plain maximizer.
/// `y_var` sets the floor `1e-12 · var(y)`.
pub fn update_sigma(
    y: &DVector<f64>,
    fitted: &[DVector<f64>],
    resp: &Responsibilities,
    traces: Option<&[f64]>,
    shared: bool,
    y_var: f64,
) -> SigmaUpdate {
    let j = fitted.len();
    let n = y.len();
    let floor = VARIANCE_FLOOR_REL * y_var.max(f64::MIN_POSITIVE);
    let mut issues = Vec::new();
    let rss: Vec<f64> = (0..j)
        .map(|k| {
            (0..n)
                .map(|i| resp.probs[(i, k)] * (y[i] - fitted[k][i]).powi(2))
                .sum()
        })
        .collect();
    let mass = resp.mass();
    let variances = if shared {
        let num: f64 = rss.iter().sum();
        let mut den = n as f64;
        if let Some(t) = traces {
            let adj = den - t.iter().sum::<f64>();
            if adj < DENOMINATOR_FLOOR {
                issues.push(VarianceIssue::DegenerateDenominator {
                    regime: 0,
                    denominator: adj,
                });
            } else {
                den = adj;
            }
        }
        let mut v = num / den;
        if !(v > floor) {
            issues.push(VarianceIssue::Floored { regime: 0 });
            v = floor;
        }
        vec![v; j]
    } else {
        (0..j)
            .map(|k| {
                let mut den = mass[k];
                if let Some(t) = traces {
                    let adj = den - t[k];
                    if adj < DENOMINATOR_FLOOR {
                        issues.push(VarianceIssue::DegenerateDenominator {
                            regime: k,
                            denominator: adj,
                        });
                    } else {
                        den = adj;
                    }
                }
                let mut v = if den > 0.0 { rss[k] / den } else { 0.0 };
                if !(v > floor) {
                    issues.push(VarianceIssue::Floored { regime: k });
                    v = floor;
                }
                v
            })
            .collect()
    };
    SigmaUpdate {
        noise: NoiseModel { variances, shared },
        issues,
    }
}

/// `p_j = (1/n) Σ_i p_ij`.
pub fn update_latent_iid(resp: &Responsibilities) -> Vec<f64> {
    let n = resp.n() as f64;
    let mut p: Vec<f64> = resp.mass().into_iter().map(|m| m / n).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// `a_lj = Σ_{i≥2} p_ilj / Σ_{i≥2} p_(i-1)l` and `π_j = p_1j`.
///
/// Rows with no mass come back uniform; their indices are returned.
pub fn update_latent_markov(resp: &Responsibilities) -> Result<(LatentModel, Vec<usize>)> {
    let pairs = resp
        .pairs
        .as_ref()
        .ok_or_else(|| Error::Config("pair posteriors required for a Markov update".into()))?;
    let j = resp.n_states();
    let mut counts = DMatrix::<f64>::zeros(j, j);
    for pm in pairs {
        counts += pm;
    }
    let mut empty = Vec::new();
    let transition: Vec<Vec<f64>> = (0..j)
        .map(|l| {
            let s: f64 = counts.row(l).iter().sum();
            if s > 0.0 {
                (0..j).map(|k| counts[(l, k)] / s).collect()
            } else {
                empty.push(l);
                vec![1.0 / j as f64; j]
            }
        })
        .collect();
    let mut initial: Vec<f64> = (0..j).map(|k| resp.probs[(0, k)]).collect();
    let s: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|v| *v /= s);
    Ok((
        LatentModel::Markov {
            initial,
            transition,
        },
        empty,
    ))
}

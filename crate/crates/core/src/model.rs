//! Domain types shared by every stage of a fit.
//!
//! A fit is described by `θ = {α, γ}`: the latent-process parameters
//! ([`LatentModel`]) and the regression parameters (regime functions plus
//! error variances). Probabilities live in the linear domain here; the
//! inference routines work on scaled or log quantities internally.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{kernel_gram, SplineDesign};
use crate::error::{Error, Result};
use crate::linalg;

const PROB_TOL: f64 = 1e-12;

/// Observed `(x_i, y_i)` pairs with strictly increasing `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSeries {
    x: DVector<f64>,
    y: DVector<f64>,
}

impl ObservedSeries {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvariantViolation(format!(
                "x and y lengths differ ({} vs {})",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(Error::TooFewPoints {
                got: x.len(),
                need: 2,
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite value in series".into()));
        }
        if let Some(i) = (1..x.len()).find(|&i| x[i] <= x[i - 1]) {
            return Err(Error::InvariantViolation(format!(
                "x not strictly increasing at index {i}"
            )));
        }
        Ok(Self {
            x: DVector::from_vec(x),
            y: DVector::from_vec(y),
        })
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_range(&self) -> f64 {
        self.x[self.len() - 1] - self.x[0]
    }

    /// Sample variance of `y` with denominator `n − 1`.
    pub fn y_variance(&self) -> f64 {
        let n = self.len() as f64;
        let mean = self.y.mean();
        self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }
}

/// Distribution of the hidden state sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatentModel {
    /// `P(z_i = j) = probs[j]`, independently over `i`.
    Iid { probs: Vec<f64> },
    /// First-order chain with initial law `initial` and row-stochastic
    /// `transition[l][j] = P(z_i = j | z_{i-1} = l)`.
    Markov {
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
    },
}

impl LatentModel {
    pub fn uniform_iid(j: usize) -> Self {
        LatentModel::Iid {
            probs: vec![1.0 / j as f64; j],
        }
    }

    pub fn uniform_markov(j: usize) -> Self {
        LatentModel::Markov {
            initial: vec![1.0 / j as f64; j],
            transition: vec![vec![1.0 / j as f64; j]; j],
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            LatentModel::Iid { probs } => probs.len(),
            LatentModel::Markov { initial, .. } => initial.len(),
        }
    }

    pub fn is_markov(&self) -> bool {
        matches!(self, LatentModel::Markov { .. })
    }

    pub fn transition_matrix(&self) -> Option<DMatrix<f64>> {
        match self {
            LatentModel::Markov { transition, .. } => {
                let j = transition.len();
                Some(DMatrix::from_fn(j, j, |r, c| transition[r][c]))
            }
            LatentModel::Iid { .. } => None,
        }
    }

    /// Relabels states so that new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        match self {
            LatentModel::Iid { probs } => LatentModel::Iid {
                probs: perm.iter().map(|&p| probs[p]).collect(),
            },
            LatentModel::Markov {
                initial,
                transition,
            } => LatentModel::Markov {
                initial: perm.iter().map(|&p| initial[p]).collect(),
                transition: perm
                    .iter()
                    .map(|&r| perm.iter().map(|&c| transition[r][c]).collect())
                    .collect(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn check_vec(name: &str, v: &[f64]) -> Result<()> {
            if v.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvariantViolation(format!(
                    "{name}: probability outside [0,1]"
                )));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > PROB_TOL {
                return Err(Error::InvariantViolation(format!(
                    "{name}: sum≠1 (sum = {s})"
                )));
            }
            Ok(())
        }
        match self {
            LatentModel::Iid { probs } => {
                if probs.is_empty() {
                    return Err(Error::InvariantViolation("J must be at least 1".into()));
                }
                check_vec("p", probs)
            }
            LatentModel::Markov {
                initial,
                transition,
            } => {
                if initial.is_empty() {
                    return Err(Error::InvariantViolation("J must be at least 1".into()));
                }
                check_vec("pi", initial)?;
                if transition.len() != initial.len()
                    || transition.iter().any(|r| r.len() != initial.len())
                {
                    return Err(Error::InvariantViolation(
                        "transition matrix is not J×J".into(),
                    ));
                }
                for (l, row) in transition.iter().enumerate() {
                    check_vec(&format!("a[{l}]"), row)?;
                }
                Ok(())
            }
        }
    }
}

/// Parameters of the squared-exponential covariance of one regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Variance scale `U_j`.
    pub u: f64,
    /// Length scale `s_j`, which doubles as the smoothing parameter.
    pub s: f64,
}

/// Regime functions under the penalized-likelihood formulation:
/// `f_j = B φ_j` over a shared cubic B-spline basis.
#[derive(Debug, Clone)]
pub struct PenalizedFunctions {
    design: Arc<SplineDesign>,
    coefficients: Vec<DVector<f64>>,
    fitted: Vec<DVector<f64>>,
    lambdas: Vec<f64>,
}

impl PenalizedFunctions {
    pub fn new(
        design: Arc<SplineDesign>,
        coefficients: Vec<DVector<f64>>,
        lambdas: Vec<f64>,
    ) -> Result<Self> {
        if coefficients.len() != lambdas.len() {
            return Err(Error::InvariantViolation(
                "one smoothing parameter per regime required".into(),
            ));
        }
        let k = design.basis().len();
        if coefficients.iter().any(|c| c.len() != k) {
            return Err(Error::InvariantViolation(format!(
                "coefficient vectors must have length K = {k}"
            )));
        }
        let fitted = coefficients.iter().map(|c| design.design() * c).collect();
        Ok(Self {
            design,
            coefficients,
            fitted,
            lambdas,
        })
    }

    pub fn design(&self) -> &Arc<SplineDesign> {
        &self.design
    }

    pub fn coefficients(&self) -> &[DVector<f64>] {
        &self.coefficients
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// `Σ_j λ_j φ_jᵀ R φ_j`.
    pub fn roughness(&self) -> f64 {
        self.coefficients
            .iter()
            .zip(&self.lambdas)
            .map(|(c, l)| l * self.design.penalty().quadratic_form(c))
            .sum()
    }
}

/// Regime functions under the Gaussian-process formulation. Each regime keeps
/// its fitted values `f_j(x)` and the dual weights `v_j` with
/// `f_j = A_ε(λ_j) v_j`, where `A_ε` is the Gram matrix plus nugget.
#[derive(Debug, Clone)]
pub struct BayesianFunctions {
    fitted: Vec<DVector<f64>>,
    duals: Vec<DVector<f64>>,
    kernels: Vec<KernelParams>,
    log_dets: Vec<f64>,
}

impl BayesianFunctions {
    /// Builds from fitted values and their dual weights.
    pub fn from_duals(
        x: &DVector<f64>,
        duals: Vec<DVector<f64>>,
        kernels: Vec<KernelParams>,
    ) -> Result<Self> {
        if duals.len() != kernels.len() {
            return Err(Error::InvariantViolation(
                "one kernel per regime required".into(),
            ));
        }
        let mut fitted = Vec::with_capacity(duals.len());
        let mut log_dets = Vec::with_capacity(duals.len());
        for (d, k) in duals.iter().zip(&kernels) {
            let a = kernel_gram(x.as_slice(), k.u, k.s)?.regularized();
            fitted.push(&a * d);
            log_dets.push(linalg::log_det_spd(&a)?);
        }
        Ok(Self {
            fitted,
            duals,
            kernels,
            log_dets,
        })
    }

    /// Builds from arbitrary fitted values; the duals are obtained by solving
    /// against the regularized Gram matrix.
    pub fn from_fitted(
        x: &DVector<f64>,
        fitted: Vec<DVector<f64>>,
        kernels: Vec<KernelParams>,
    ) -> Result<Self> {
        if fitted.len() != kernels.len() {
            return Err(Error::InvariantViolation(
                "one kernel per regime required".into(),
            ));
        }
        let mut duals = Vec::with_capacity(fitted.len());
        let mut log_dets = Vec::with_capacity(fitted.len());
        for (f, k) in fitted.iter().zip(&kernels) {
            let a = kernel_gram(x.as_slice(), k.u, k.s)?.regularized();
            let chol = a
                .cholesky()
                .ok_or_else(|| Error::InvariantViolation("Gram matrix not positive definite".into()))?;
            log_dets.push(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>());
            duals.push(chol.solve(f));
        }
        Ok(Self {
            fitted,
            duals,
            kernels,
            log_dets,
        })
    }

    pub(crate) fn from_parts(
        fitted: Vec<DVector<f64>>,
        duals: Vec<DVector<f64>>,
        kernels: Vec<KernelParams>,
        log_dets: Vec<f64>,
    ) -> Self {
        Self {
            fitted,
            duals,
            kernels,
            log_dets,
        }
    }

    pub fn kernels(&self) -> &[KernelParams] {
        &self.kernels
    }

    pub fn duals(&self) -> &[DVector<f64>] {
        &self.duals
    }

    pub fn log_dets(&self) -> &[f64] {
        &self.log_dets
    }

    /// `−(J/2) log 2π − ½ Σ log|A_j| − ½ Σ f_jᵀ A_j⁻¹ f_j`.
    pub fn log_prior(&self) -> f64 {
        let j = self.fitted.len() as f64;
        let mut total = -0.5 * j * (2.0 * std::f64::consts::PI).ln();
        for ((f, v), ld) in self.fitted.iter().zip(&self.duals).zip(&self.log_dets) {
            total -= 0.5 * ld + 0.5 * f.dot(v);
        }
        total
    }
}

/// The `J` regime functions of a fit.
#[derive(Debug, Clone)]
pub enum RegimeFunctions {
    Penalized(PenalizedFunctions),
    Bayesian(BayesianFunctions),
}

impl RegimeFunctions {
    pub fn n_regimes(&self) -> usize {
        match self {
            RegimeFunctions::Penalized(p) => p.coefficients.len(),
            RegimeFunctions::Bayesian(b) => b.fitted.len(),
        }
    }

    /// `f_j(x_1..x_n)`.
    pub fn fitted(&self, j: usize) -> &DVector<f64> {
        match self {
            RegimeFunctions::Penalized(p) => &p.fitted[j],
            RegimeFunctions::Bayesian(b) => &b.fitted[j],
        }
    }

    pub fn all_fitted(&self) -> &[DVector<f64>] {
        match self {
            RegimeFunctions::Penalized(p) => &p.fitted,
            RegimeFunctions::Bayesian(b) => &b.fitted,
        }
    }

    /// Smoothing parameters: `λ_j` for penalized fits, `s_j` for Gaussian
    /// process fits.
    pub fn lambdas(&self) -> Vec<f64> {
        match self {
            RegimeFunctions::Penalized(p) => p.lambdas.clone(),
            RegimeFunctions::Bayesian(b) => b.kernels.iter().map(|k| k.s).collect(),
        }
    }

    /// The approach-specific penalty term added to the data log-likelihood.
    pub fn penalty(&self) -> f64 {
        match self {
            RegimeFunctions::Penalized(p) => -p.roughness(),
            RegimeFunctions::Bayesian(b) => b.log_prior(),
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        match self {
            RegimeFunctions::Penalized(p) => RegimeFunctions::Penalized(PenalizedFunctions {
                design: p.design.clone(),
                coefficients: perm.iter().map(|&k| p.coefficients[k].clone()).collect(),
                fitted: perm.iter().map(|&k| p.fitted[k].clone()).collect(),
                lambdas: perm.iter().map(|&k| p.lambdas[k]).collect(),
            }),
            RegimeFunctions::Bayesian(b) => RegimeFunctions::Bayesian(BayesianFunctions {
                fitted: perm.iter().map(|&k| b.fitted[k].clone()).collect(),
                duals: perm.iter().map(|&k| b.duals[k].clone()).collect(),
                kernels: perm.iter().map(|&k| b.kernels[k]).collect(),
                log_dets: perm.iter().map(|&k| b.log_dets[k]).collect(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_regimes() == 0 {
            return Err(Error::InvariantViolation("J must be at least 1".into()));
        }
        match self {
            RegimeFunctions::Penalized(p) => {
                if p.lambdas.iter().any(|&l| !(l > 0.0)) {
                    return Err(Error::InvariantViolation("lambda>0 required".into()));
                }
            }
            RegimeFunctions::Bayesian(b) => {
                if b.kernels.iter().any(|k| !(k.u > 0.0 && k.s > 0.0)) {
                    return Err(Error::InvariantViolation(
                        "kernel parameters U>0, s>0 required".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Error variances `σ_j²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub variances: Vec<f64>,
    /// All regimes share one variance.
    pub shared: bool,
}

impl NoiseModel {
    pub fn shared(j: usize, variance: f64) -> Self {
        Self {
            variances: vec![variance; j],
            shared: true,
        }
    }

    pub fn separate(variances: Vec<f64>) -> Self {
        Self {
            variances,
            shared: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvariantViolation("variance>0 required".into()));
        }
        if self.shared && self.variances.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvariantViolation(
                "shared noise model with unequal variances".into(),
            ));
        }
        Ok(())
    }
}

/// `θ = {α, γ}`.
#[derive(Debug, Clone)]
pub struct Theta {
    pub latent: LatentModel,
    pub funcs: RegimeFunctions,
    pub noise: NoiseModel,
}

impl Theta {
    pub fn new(latent: LatentModel, funcs: RegimeFunctions, noise: NoiseModel) -> Result<Self> {
        let theta = Self {
            latent,
            funcs,
            noise,
        };
        validate_theta(&theta)?;
        Ok(theta)
    }

    pub fn n_regimes(&self) -> usize {
        self.latent.n_states()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            latent: self.latent.permuted(perm),
            funcs: self.funcs.permuted(perm),
            noise: NoiseModel {
                variances: perm.iter().map(|&k| self.noise.variances[k]).collect(),
                shared: self.noise.shared,
            },
        }
    }
}

/// Checks every type invariant of `θ`, reporting the first failure.
pub fn validate_theta(theta: &Theta) -> Result<()> {
    theta.latent.validate()?;
    theta.funcs.validate()?;
    theta.noise.validate()?;
    let j = theta.latent.n_states();
    if theta.funcs.n_regimes() != j || theta.noise.variances.len() != j {
        return Err(Error::InvariantViolation(format!(
            "inconsistent J: latent {j}, functions {}, variances {}",
            theta.funcs.n_regimes(),
            theta.noise.variances.len()
        )));
    }
    Ok(())
}

/// Posterior state probabilities from an E-step.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    /// `n × J`, entry `(i, j) = P(z_i = j | y, θ)`.
    pub probs: DMatrix<f64>,
    /// For Markov fits, `pairs[i - 1][(l, j)] = P(z_{i-1} = l, z_i = j | y, θ)`
    /// for `i = 1..n`.
    pub pairs: Option<Vec<DMatrix<f64>>>,
}

impl Responsibilities {
    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.probs.ncols()
    }

    /// `Σ_i p_ij` per regime.
    pub fn mass(&self) -> Vec<f64> {
        (0..self.n_states())
            .map(|j| self.probs.column(j).sum())
            .collect()
    }

    /// Row sums, entry ranges, and (for pairs) the marginalization identities.
    pub fn check(&self, tol: f64) -> Result<()> {
        for i in 0..self.n() {
            let row = self.probs.row(i);
            if row.iter().any(|&p| !(-tol..=1.0 + tol).contains(&p)) {
                return Err(Error::InvariantViolation(format!(
                    "responsibility outside [0,1] at row {i}"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::InvariantViolation(format!(
                    "responsibility row {i} sums to {s}"
                )));
            }
        }
        if let Some(pairs) = &self.pairs {
            for (k, pm) in pairs.iter().enumerate() {
                let i = k + 1;
                for l in 0..self.n_states() {
                    let rs: f64 = pm.row(l).iter().sum();
                    if (rs - self.probs[(i - 1, l)]).abs() > tol {
                        return Err(Error::InvariantViolation(format!(
                            "pair marginal over current state mismatched at {i}"
                        )));
                    }
                    let cs: f64 = pm.column(l).iter().sum();
                    if (cs - self.probs[(i, l)]).abs() > tol {
                        return Err(Error::InvariantViolation(format!(
                            "pair marginal over previous state mismatched at {i}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

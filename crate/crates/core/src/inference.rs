//! The E-step: posterior state probabilities for iid and Markov latent
//! models, pairwise posteriors, and arbitrary joint posteriors over a few
//! positions.
//!
//! The Markov recursions are the scaled forward-backward procedure. With
//! per-step constants `c_i` the scaled forward vector is
//! `α̂_i(j) = P(z_i = j | y_1..y_i)` and the scaled backward vector satisfies
//! `α̂_i(j) β̂_i(j) = P(z_i = j | y)`. Writing `M̃_i(l, j) = a_lj e_i(j) / c_i`
//! for the scaled one-step matrix, the joint posterior of states `s_1..s_q`
//! at positions `t_1 < .. < t_q` is
//!
//! ```text
//! α̂_{t_1}(s_1) · Π_r [M̃_{t_r+1} ⋯ M̃_{t_{r+1}}](s_r, s_{r+1}) · β̂_{t_q}(s_q)
//! ```
//!
//! which covers marginals, pair posteriors, and the gapped quadruples needed
//! for observed-information calculations with one code path.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::logsumexp;
use crate::model::{LatentModel, ObservedSeries, Responsibilities, Theta};

/// Gaussian density `N(y; f, σ²)`.
pub fn emission_density(y: f64, f: f64, var: f64) -> f64 {
    log_emission_density(y, f, var).exp()
}

pub fn log_emission_density(y: f64, f: f64, var: f64) -> f64 {
    let r = y - f;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * r * r / var
}

/// `n × J` table of `log N(y_i; f_j(x_i), σ_j²)`.
pub fn log_emissions(series: &ObservedSeries, theta: &Theta) -> DMatrix<f64> {
    let n = series.len();
    let j = theta.n_regimes();
    let y = series.y();
    DMatrix::from_fn(n, j, |i, k| {
        log_emission_density(y[i], theta.funcs.fitted(k)[i], theta.noise.variances[k])
    })
}

/// Output of an E-step.
#[derive(Debug, Clone)]
pub struct EStep {
    pub resp: Responsibilities,
    /// `log p(y | θ)`.
    pub loglik: f64,
}

/// Posterior weights for iid states from a log-emission table.
pub fn iid_posteriors(log_emis: &DMatrix<f64>, probs: &[f64]) -> Result<EStep> {
    let (n, j) = log_emis.shape();
    let log_p: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    let mut post = DMatrix::zeros(n, j);
    let mut loglik = 0.0;
    for i in 0..n {
        let terms: Vec<f64> = (0..j).map(|k| log_p[k] + log_emis[(i, k)]).collect();
        let lse = logsumexp(terms.iter().copied());
        if !lse.is_finite() {
            return Err(Error::AllZeroLikelihood { index: i });
        }
        loglik += lse;
        let mut s = 0.0;
        for k in 0..j {
            let v = (terms[k] - lse).exp();
            post[(i, k)] = v;
            s += v;
        }
        for k in 0..j {
            post[(i, k)] /= s;
        }
    }
    Ok(EStep {
        resp: Responsibilities {
            probs: post,
            pairs: None,
        },
        loglik,
    })
}

pub fn estep_iid(series: &ObservedSeries, theta: &Theta) -> Result<EStep> {
    let LatentModel::Iid { probs } = &theta.latent else {
        return Err(Error::Config("estep_iid requires an iid latent model".into()));
    };
    iid_posteriors(&log_emissions(series, theta), probs)
}

/// Scaled forward-backward quantities for one series.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    alpha: DMatrix<f64>,
    beta: DMatrix<f64>,
    /// `log c_i` including the per-row emission shift.
    log_scale: Vec<f64>,
    /// `steps[i - 1] = M̃_i` for `i = 1..n`.
    steps: Vec<DMatrix<f64>>,
    loglik: f64,
}

impl ForwardBackward {
    pub fn n(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.alpha.ncols()
    }

    /// Scaled forward matrix, row `i` = `P(z_i = · | y_1..y_i)`.
    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn log_scale(&self) -> &[f64] {
        &self.log_scale
    }

    /// Scaled one-step matrix `M̃_i` for `1 ≤ i < n`.
    pub fn step(&self, i: usize) -> &DMatrix<f64> {
        &self.steps[i - 1]
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn posteriors(&self) -> DMatrix<f64> {
        let mut p = self.alpha.component_mul(&self.beta);
        for i in 0..p.nrows() {
            let s: f64 = p.row(i).iter().sum();
            for k in 0..p.ncols() {
                p[(i, k)] /= s;
            }
        }
        p
    }

    /// `P(z_{i-1} = l, z_i = j | y)` for `1 ≤ i < n`.
    pub fn pair(&self, i: usize) -> DMatrix<f64> {
        let m = self.step(i);
        let j = self.n_states();
        let mut out = DMatrix::from_fn(j, j, |l, k| self.alpha[(i - 1, l)] * m[(l, k)] * self.beta[(i, k)]);
        let s = out.sum();
        out /= s;
        out
    }

    /// Exact joint posterior `P(z_{t_1} = s_1, …, z_{t_q} = s_q | y)` for
    /// strictly increasing (0-based) positions.
    pub fn joint_posterior(&self, indices: &[usize], states: &[usize]) -> Result<f64> {
        if indices.len() != states.len() || indices.is_empty() {
            return Err(Error::Config(
                "indices and states must be nonempty and of equal length".into(),
            ));
        }
        let n = self.n();
        for (&i, &s) in indices.iter().zip(states) {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if s >= self.n_states() {
                return Err(Error::IndexOutOfRange {
                    index: s,
                    len: self.n_states(),
                });
            }
        }
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("indices must be strictly increasing".into()));
        }
        let mut value = self.alpha[(indices[0], states[0])];
        for w in 0..indices.len() - 1 {
            let (from, to) = (indices[w], indices[w + 1]);
            let mut row = DVector::zeros(self.n_states());
            row[states[w]] = 1.0;
            let mut row = row.transpose();
            for t in from + 1..=to {
                row *= self.step(t);
            }
            value *= row[states[w + 1]];
        }
        Ok(value * self.beta[(indices[indices.len() - 1], states[states.len() - 1])])
    }
}

/// Scaled forward-backward on a log-emission table.
pub fn forward_backward(
    log_emis: &DMatrix<f64>,
    initial: &[f64],
    transition: &DMatrix<f64>,
) -> Result<ForwardBackward> {
    let (n, j) = log_emis.shape();
    // per-row shift keeps the largest emission at 1
    let mut shift = vec![0.0; n];
    let mut emis = DMatrix::zeros(n, j);
    for i in 0..n {
        let m = log_emis.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::AllZeroLikelihood { index: i });
        }
        shift[i] = m;
        for k in 0..j {
            emis[(i, k)] = (log_emis[(i, k)] - m).exp();
        }
    }

    let mut alpha = DMatrix::zeros(n, j);
    let mut log_scale = vec![0.0; n];
    let mut steps = Vec::with_capacity(n.saturating_sub(1));

    let mut c = 0.0;
    for k in 0..j {
        alpha[(0, k)] = initial[k] * emis[(0, k)];
        c += alpha[(0, k)];
    }
    if !(c > 0.0) {
        return Err(Error::AllZeroLikelihood { index: 0 });
    }
    for k in 0..j {
        alpha[(0, k)] /= c;
    }
    log_scale[0] = c.ln() + shift[0];

    for i in 1..n {
        let mut m = DMatrix::from_fn(j, j, |l, k| transition[(l, k)] * emis[(i, k)]);
        let mut c = 0.0;
        for k in 0..j {
            let v: f64 = (0..j).map(|l| alpha[(i - 1, l)] * m[(l, k)]).sum();
            alpha[(i, k)] = v;
            c += v;
        }
        if !(c > 0.0) {
            return Err(Error::AllZeroLikelihood { index: i });
        }
        for k in 0..j {
            alpha[(i, k)] /= c;
        }
        m /= c;
        log_scale[i] = c.ln() + shift[i];
        steps.push(m);
    }

    let mut beta = DMatrix::zeros(n, j);
    for k in 0..j {
        beta[(n - 1, k)] = 1.0;
    }
    for i in (0..n - 1).rev() {
        let m = &steps[i];
        for l in 0..j {
            beta[(i, l)] = (0..j).map(|k| m[(l, k)] * beta[(i + 1, k)]).sum();
        }
    }

    let loglik = log_scale.iter().sum();
    Ok(ForwardBackward {
        alpha,
        beta,
        log_scale,
        steps,
        loglik,
    })
}

/// E-step for a Markov latent model: posteriors, pair posteriors, and the
/// forward-backward state for further joint-posterior queries.
pub fn estep_markov(series: &ObservedSeries, theta: &Theta) -> Result<(EStep, ForwardBackward)> {
    let LatentModel::Markov { initial, .. } = &theta.latent else {
        return Err(Error::Config("estep_markov requires a Markov latent model".into()));
    };
    let a = theta.latent.transition_matrix().expect("markov");
    let fb = forward_backward(&log_emissions(series, theta), initial, &a)?;
    let est = markov_estep_from(&fb);
    Ok((est, fb))
}

pub(crate) fn markov_estep_from(fb: &ForwardBackward) -> EStep {
    let pairs = (1..fb.n()).map(|i| fb.pair(i)).collect();
    EStep {
        resp: Responsibilities {
            probs: fb.posteriors(),
            pairs: Some(pairs),
        },
        loglik: fb.loglik(),
    }
}

/// E-step for either latent variant.
pub fn estep(series: &ObservedSeries, theta: &Theta) -> Result<EStep> {
    match theta.latent {
        LatentModel::Iid { .. } => estep_iid(series, theta),
        LatentModel::Markov { .. } => estep_markov(series, theta).map(|(e, _)| e),
    }
}

/// Joint posterior of the states at a few positions under a Markov `θ`.
pub fn joint_posterior(
    series: &ObservedSeries,
    theta: &Theta,
    indices: &[usize],
    states: &[usize],
) -> Result<f64> {
    let (_, fb) = estep_markov(series, theta)?;
    fb.joint_posterior(indices, states)
}

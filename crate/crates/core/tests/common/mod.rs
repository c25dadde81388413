//! Independent oracles for the integration and acceptance tests: path
//! enumeration for hidden chains, direct mixture likelihoods and
//! finite-difference Hessians.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use switchreg::model::{
    BayesianFunctions, KernelParams, LatentModel, NoiseModel, ObservedSeries, RegimeFunctions, Theta,
};

pub fn gaussian_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (y - mean).powi(2) / (2.0 * var)
}

/// `log φ(y_i; f_k(x_i), σ_k²)` computed directly from `θ`.
pub fn log_emission_table(series: &ObservedSeries, theta: &Theta) -> DMatrix<f64> {
    let y = series.y();
    let j = theta.n_regimes();
    DMatrix::from_fn(series.len(), j, |i, k| {
        gaussian_logpdf(y[i], theta.funcs.fitted(k)[i], theta.noise.variances[k])
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Every state path of a hidden chain with its joint log weight.
pub struct PathEnumeration {
    pub n: usize,
    pub j: usize,
    paths: Vec<Vec<usize>>,
    log_weights: Vec<f64>,
    pub loglik: f64,
}

impl PathEnumeration {
    pub fn new(log_emis: &DMatrix<f64>, initial: &[f64], a: &DMatrix<f64>) -> Self {
        let (n, j) = log_emis.shape();
        let mut paths = Vec::with_capacity(j.pow(n as u32));
        let mut log_weights = Vec::with_capacity(j.pow(n as u32));
        for code in 0..j.pow(n as u32) {
            let mut c = code;
            let path: Vec<usize> = (0..n)
                .map(|_| {
                    let s = c % j;
                    c /= j;
                    s
                })
                .collect();
            let mut w = initial[path[0]].ln() + log_emis[(0, path[0])];
            for i in 1..n {
                w += a[(path[i - 1], path[i])].ln() + log_emis[(i, path[i])];
            }
            paths.push(path);
            log_weights.push(w);
        }
        let loglik = log_sum_exp(&log_weights);
        Self {
            n,
            j,
            paths,
            log_weights,
            loglik,
        }
    }

    fn prob(&self, select: impl Fn(&[usize]) -> bool) -> f64 {
        self.paths
            .iter()
            .zip(&self.log_weights)
            .filter(|(p, _)| select(p))
            .map(|(_, w)| (w - self.loglik).exp())
            .sum()
    }

    pub fn marginal(&self, i: usize, s: usize) -> f64 {
        self.prob(|p| p[i] == s)
    }

    pub fn pair(&self, i: usize, l: usize, s: usize) -> f64 {
        self.prob(|p| p[i - 1] == l && p[i] == s)
    }

    pub fn joint(&self, indices: &[usize], states: &[usize]) -> f64 {
        self.prob(|p| indices.iter().zip(states).all(|(&i, &s)| p[i] == s))
    }
}

/// `Σ_i log Σ_k p_k φ_ik`.
pub fn iid_loglik(log_emis: &DMatrix<f64>, probs: &[f64]) -> f64 {
    (0..log_emis.nrows())
        .map(|i| {
            let terms: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(k, p)| p.ln() + log_emis[(i, k)])
                .collect();
            log_sum_exp(&terms)
        })
        .sum()
}

/// Central-difference Hessian of `f` at `x`.
pub fn hessian_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DMatrix<f64> {
    let d = x.len();
    let at = |da: (usize, f64), db: (usize, f64)| {
        let mut z = x.to_vec();
        z[da.0] += da.1;
        z[db.0] += db.1;
        f(&z)
    };
    let mut hess = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = if a == b {
                let mut up = x.to_vec();
                up[a] += h;
                let mut dn = x.to_vec();
                dn[a] -= h;
                (f(&up) - 2.0 * f(x) + f(&dn)) / (h * h)
            } else {
                (at((a, h), (b, h)) - at((a, h), (b, -h)) - at((a, -h), (b, h)) + at((a, -h), (b, -h)))
                    / (4.0 * h * h)
            };
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    hess
}

fn random_simplex(rng: &mut impl Rng, j: usize, floor: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..j).map(|_| rng.random_range(floor..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|a| *a /= s);
    v
}

pub fn random_markov(rng: &mut impl Rng, j: usize) -> LatentModel {
    LatentModel::Markov {
        initial: random_simplex(rng, j, 0.1),
        transition: (0..j).map(|_| random_simplex(rng, j, 0.05)).collect(),
    }
}

pub fn random_iid(rng: &mut impl Rng, j: usize) -> LatentModel {
    LatentModel::Iid {
        probs: random_simplex(rng, j, 0.2),
    }
}

/// A small random series with Gaussian-process regime functions whose
/// fitted values are arbitrary draws.
pub fn random_instance(rng: &mut impl Rng, n: usize, latent: LatentModel) -> (ObservedSeries, Theta) {
    let j = latent.n_states();
    let mut x: Vec<f64> = (0..n).map(|i| i as f64 + rng.random_range(0.0..0.9)).collect();
    x.sort_by(f64::total_cmp);
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let series = ObservedSeries::new(x, y).unwrap();
    let fitted: Vec<DVector<f64>> = (0..j)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let kernels = vec![KernelParams { u: 1.0, s: n as f64 / 2.0 }; j];
    let funcs = BayesianFunctions::from_fitted(series.x(), fitted, kernels).unwrap();
    let variances = (0..j).map(|_| rng.random_range(0.2..2.0)).collect();
    let theta = Theta::new(latent, RegimeFunctions::Bayesian(funcs), NoiseModel::separate(variances)).unwrap();
    (series, theta)
}

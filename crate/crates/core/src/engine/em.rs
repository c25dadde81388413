use std::collections::BTreeSet;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::kernel_gram;
use crate::error::{Error, Result};
use crate::inference::{estep, log_emission_density};
use crate::model::{
    BayesianFunctions, LatentModel, NoiseModel, ObservedSeries, PenalizedFunctions,
    RegimeFunctions, Responsibilities, Theta,
};
use crate::mstep::{
    fit_bayes, fit_penalized, update_latent_iid, update_latent_markov, update_sigma, VarianceIssue,
};

use super::config::FitConfig;

/// Responsibility mass below which a regime is reported as degenerate.
pub const DEGENERATE_MASS: f64 = 2.0;
const WEIGHT_FLOOR: f64 = 1e-6;

/// Non-fatal conditions met during a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitWarning {
    DegenerateRegime { regime: usize, mass: f64 },
    Variance { issue: VarianceIssue },
    EmptyTransitionRow { row: usize },
    /// The spline system was singular; responsibilities were floored.
    WeightsFloored { regime: usize },
}

impl FitWarning {
    fn key(&self) -> (u8, usize) {
        match *self {
            FitWarning::DegenerateRegime { regime, .. } => (0, regime),
            FitWarning::Variance {
                issue: VarianceIssue::DegenerateDenominator { regime, .. },
            } => (1, regime),
            FitWarning::Variance {
                issue: VarianceIssue::Floored { regime },
            } => (2, regime),
            FitWarning::EmptyTransitionRow { row } => (3, row),
            FitWarning::WeightsFloored { regime } => (4, regime),
        }
    }
}

/// Keeps the first occurrence of each kind of warning per regime.
#[derive(Debug, Clone, Default)]
pub(crate) struct Warnings {
    seen: BTreeSet<(u8, usize)>,
    list: Vec<FitWarning>,
}

impl Warnings {
    pub(crate) fn push(&mut self, w: FitWarning) {
        if self.seen.insert(w.key()) {
            self.list.push(w);
        }
    }

    pub(crate) fn extend(&mut self, ws: impl IntoIterator<Item = FitWarning>) {
        for w in ws {
            self.push(w);
        }
    }

    pub(crate) fn into_vec(self) -> Vec<FitWarning> {
        self.list
    }
}

/// `l(θ) = log p(y | θ) + P(θ)`.
pub fn criterion(series: &ObservedSeries, theta: &Theta) -> Result<f64> {
    Ok(estep(series, theta)?.loglik + theta.funcs.penalty())
}

/// `S(θ, θ_c)`: the expected complete-data log-likelihood under the
/// responsibilities of `θ_c`, plus the penalty of `θ`.
pub fn expected_complete(series: &ObservedSeries, theta: &Theta, resp: &Responsibilities) -> f64 {
    let y = series.y();
    let n = series.len();
    let j = theta.n_regimes();
    let mut total = theta.funcs.penalty();
    for k in 0..j {
        let f = theta.funcs.fitted(k);
        let v = theta.noise.variances[k];
        for i in 0..n {
            let p = resp.probs[(i, k)];
            if p > 0.0 {
                total += p * log_emission_density(y[i], f[i], v);
            }
        }
    }
    let xlogy = |w: f64, p: f64| if w > 0.0 { w * p.ln() } else { 0.0 };
    match &theta.latent {
        LatentModel::Iid { probs } => {
            for (k, m) in resp.mass().iter().enumerate() {
                total += xlogy(*m, probs[k]);
            }
        }
        LatentModel::Markov {
            initial,
            transition,
        } => {
            for k in 0..j {
                total += xlogy(resp.probs[(0, k)], initial[k]);
            }
            if let Some(pairs) = &resp.pairs {
                for pm in pairs {
                    for l in 0..j {
                        for k in 0..j {
                            total += xlogy(pm[(l, k)], transition[l][k]);
                        }
                    }
                }
            }
        }
    }
    total
}

/// Regime-function update with the variances of `theta` held fixed.
#[derive(Debug, Clone)]
pub struct FunctionUpdate {
    pub funcs: RegimeFunctions,
    /// `tr(H_j)`.
    pub hat_traces: Vec<f64>,
    /// `tr(D_j H_j)`.
    pub weighted_traces: Vec<f64>,
    pub warnings: Vec<FitWarning>,
}

pub fn update_functions(
    series: &ObservedSeries,
    theta: &Theta,
    resp: &Responsibilities,
) -> Result<FunctionUpdate> {
    let j = theta.n_regimes();
    let y = series.y();
    let mut hat_traces = Vec::with_capacity(j);
    let mut weighted_traces = Vec::with_capacity(j);
    let mut warnings = Vec::new();
    let column = |k: usize| -> Vec<f64> { resp.probs.column(k).iter().copied().collect() };
    let funcs = match &theta.funcs {
        RegimeFunctions::Penalized(pf) => {
            let d = pf.design();
            let mut coefs = Vec::with_capacity(j);
            for k in 0..j {
                let p = column(k);
                let var = theta.noise.variances[k];
                let w: Vec<f64> = p.iter().map(|v| v / var).collect();
                let lam = pf.lambdas()[k];
                let fit = match fit_penalized(y, d.design(), d.penalty().matrix(), &w, lam) {
                    Ok(f) => f,
                    Err(Error::SingularSystem { .. }) => {
                        warnings.push(FitWarning::WeightsFloored { regime: k });
                        let wf: Vec<f64> = p.iter().map(|v| v.max(WEIGHT_FLOOR) / var).collect();
                        fit_penalized(y, d.design(), d.penalty().matrix(), &wf, lam)
                            .map_err(|_| Error::SingularSystem { regime: k })?
                    }
                    Err(e) => return Err(e),
                };
                hat_traces.push(fit.hat.trace);
                weighted_traces.push(fit.hat.weighted_trace(&p));
                coefs.push(fit.coefficients);
            }
            RegimeFunctions::Penalized(PenalizedFunctions::new(
                d.clone(),
                coefs,
                pf.lambdas().to_vec(),
            )?)
        }
        RegimeFunctions::Bayesian(bf) => {
            let x = series.x().as_slice();
            let mut fitted = Vec::with_capacity(j);
            let mut duals = Vec::with_capacity(j);
            for k in 0..j {
                let p = column(k);
                let var = theta.noise.variances[k];
                let w: Vec<f64> = p.iter().map(|v| v / var).collect();
                let kp = bf.kernels()[k];
                let gram = kernel_gram(x, kp.u, kp.s)?.regularized();
                let fit = fit_bayes(y, &gram, &w)?;
                hat_traces.push(fit.hat.trace);
                weighted_traces.push(fit.hat.weighted_trace(&p));
                fitted.push(fit.fitted);
                duals.push(fit.dual);
            }
            RegimeFunctions::Bayesian(BayesianFunctions::from_parts(
                fitted,
                duals,
                bf.kernels().to_vec(),
                bf.log_dets().to_vec(),
            ))
        }
    };
    Ok(FunctionUpdate {
        funcs,
        hat_traces,
        weighted_traces,
        warnings,
    })
}

/// Latent-parameter update of the variant already carried by `theta`.
pub fn update_latent(theta: &Theta, resp: &Responsibilities) -> Result<(LatentModel, Vec<FitWarning>)> {
    match theta.latent {
        LatentModel::Iid { .. } => Ok((
            LatentModel::Iid {
                probs: update_latent_iid(resp),
            },
            Vec::new(),
        )),
        LatentModel::Markov { .. } => {
            let (m, empty) = update_latent_markov(resp)?;
            Ok((
                m,
                empty
                    .into_iter()
                    .map(|row| FitWarning::EmptyTransitionRow { row })
                    .collect(),
            ))
        }
    }
}

/// One ECM cycle: functions, then variances, then latent parameters.
#[derive(Debug, Clone)]
pub struct MStep {
    pub theta: Theta,
    pub hat_traces: Vec<f64>,
    pub weighted_traces: Vec<f64>,
    pub warnings: Vec<FitWarning>,
}

pub fn mstep(
    series: &ObservedSeries,
    theta: &Theta,
    resp: &Responsibilities,
    config: &FitConfig,
) -> Result<MStep> {
    let fu = update_functions(series, theta, resp)?;
    let mut warnings = fu.warnings;
    let traces = config.df_adjust.then_some(fu.weighted_traces.as_slice());
    let su = update_sigma(
        series.y(),
        fu.funcs.all_fitted(),
        resp,
        traces,
        config.shared_variance,
        series.y_variance(),
    );
    warnings.extend(su.issues.into_iter().map(|issue| FitWarning::Variance { issue }));
    let (latent, lw) = update_latent(theta, resp)?;
    warnings.extend(lw);
    Ok(MStep {
        theta: Theta {
            latent,
            funcs: fu.funcs,
            noise: su.noise,
        },
        hat_traces: fu.hat_traces,
        weighted_traces: fu.weighted_traces,
        warnings,
    })
}

/// Outcome of an EM run.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: Theta,
    /// Responsibilities at the final `θ`.
    pub resp: Responsibilities,
    /// `l(θ_c)` for every iterate, starting with the initial `θ`.
    pub trace: Vec<f64>,
    /// `log p(y | θ̂)`.
    pub loglik: f64,
    pub hat_traces: Vec<f64>,
    pub weighted_traces: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<FitWarning>,
    /// Outer smoothing-parameter rounds, zero when λ was held fixed.
    pub gcv_rounds: usize,
}

impl FitResult {
    pub fn criterion(&self) -> f64 {
        *self.trace.last().expect("nonempty trace")
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.theta.funcs.lambdas()
    }

    /// `−2 log p(y | θ̂) + 2 (Σ tr H_j + #variances + J − 1)`.
    pub fn aic(&self) -> f64 {
        let j = self.theta.n_regimes();
        let nvar = if self.theta.noise.shared { 1 } else { j };
        -2.0 * self.loglik + 2.0 * (self.hat_traces.iter().sum::<f64>() + nvar as f64 + j as f64 - 1.0)
    }
}

/// Traces of `θ` when no M-step has run yet.
fn initial_traces(series: &ObservedSeries, theta: &Theta, resp: &Responsibilities) -> Result<(Vec<f64>, Vec<f64>)> {
    let fu = update_functions(series, theta, resp)?;
    Ok((fu.hat_traces, fu.weighted_traces))
}

/// Runs EM from `init` with the smoothing parameters held fixed.
pub fn em_fit(series: &ObservedSeries, config: &FitConfig, init: Theta) -> Result<FitResult> {
    config.validate()?;
    crate::model::validate_theta(&init)?;
    if !super::gcv::matches_approach(&init, config.approach) || init.n_regimes() != config.j {
        return Err(Error::Config("initial theta does not match the configured approach or J".into()));
    }
    let mut theta = init;
    let mut trace = Vec::new();
    let mut warnings = Warnings::default();
    let mut traces: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;
    let final_e = loop {
        let e = estep(series, &theta)?;
        for (k, m) in e.resp.mass().iter().enumerate() {
            if *m < DEGENERATE_MASS {
                warnings.push(FitWarning::DegenerateRegime { regime: k, mass: *m });
            }
        }
        let l = e.loglik + theta.funcs.penalty();
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if ((l - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < config.tol {
                converged = true;
            }
        }
        trace.push(l);
        if converged || iterations == config.max_iter {
            break e;
        }
        let m = mstep(series, &theta, &e.resp, config)?;
        warnings.extend(m.warnings);
        traces = Some((m.hat_traces, m.weighted_traces));
        theta = m.theta;
        iterations += 1;
    };
    let (hat_traces, weighted_traces) = match traces {
        Some(t) => t,
        None => initial_traces(series, &theta, &final_e.resp)?,
    };
    Ok(FitResult {
        theta,
        resp: final_e.resp,
        trace,
        loglik: final_e.loglik,
        hat_traces,
        weighted_traces,
        converged,
        iterations,
        warnings: warnings.into_vec(),
        gcv_rounds: 0,
    })
}

/// Replaces the smoothing parameters of `theta`, keeping the current fitted
/// values as the starting point.
pub fn with_smoothing(
    series: &ObservedSeries,
    theta: &Theta,
    values: &[f64],
    config: &FitConfig,
) -> Result<Theta> {
    let funcs = match &theta.funcs {
        RegimeFunctions::Penalized(pf) => RegimeFunctions::Penalized(PenalizedFunctions::new(
            pf.design().clone(),
            pf.coefficients().to_vec(),
            values.to_vec(),
        )?),
        RegimeFunctions::Bayesian(bf) => {
            let kernels = values
                .iter()
                .map(|&s| crate::model::KernelParams {
                    u: config.kernel_scale.u(s),
                    s,
                })
                .collect();
            let fitted: Vec<DVector<f64>> = (0..bf.kernels().len())
                .map(|k| theta.funcs.fitted(k).clone())
                .collect();
            RegimeFunctions::Bayesian(BayesianFunctions::from_fitted(series.x(), fitted, kernels)?)
        }
    };
    Ok(Theta {
        latent: theta.latent.clone(),
        funcs,
        noise: theta.noise.clone(),
    })
}

/// Noise model of `j` regimes at one common starting variance.
pub(crate) fn starting_noise(j: usize, variance: f64, shared: bool) -> NoiseModel {
    if shared {
        NoiseModel::shared(j, variance)
    } else {
        NoiseModel::separate(vec![variance; j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SplineDesign;
    use crate::model::KernelParams;
    use crate::engine::config::{Approach, LatentKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn two_curve_series(n: usize, seed: u64, markov: bool) -> (ObservedSeries, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64 * 10.0).collect();
        let mut z = Vec::with_capacity(n);
        let mut state = 0usize;
        let y = x
            .iter()
            .map(|&t| {
                state = if markov {
                    if rng.random::<f64>() < 0.3 { 1 - state } else { state }
                } else {
                    usize::from(rng.random::<f64>() < 0.4)
                };
                z.push(state);
                let f = if state == 0 { (t / 2.0).sin() } else { 1.5 + 0.1 * t };
                f + 0.15 * (rng.random::<f64>() - 0.5)
            })
            .collect();
        (ObservedSeries::new(x, y).unwrap(), z)
    }

    fn penalized_theta(series: &ObservedSeries, latent: LatentModel, shift: f64, var: f64) -> Theta {
        let design = Arc::new(SplineDesign::new(series.x().as_slice(), 8).unwrap());
        let k = design.basis().len();
        let ybar = series.y().mean();
        let coefs = vec![
            DVector::from_element(k, ybar - shift),
            DVector::from_element(k, ybar + shift),
        ];
        let funcs = PenalizedFunctions::new(design, coefs, vec![0.05, 0.05]).unwrap();
        Theta::new(latent, RegimeFunctions::Penalized(funcs), NoiseModel::separate(vec![var; 2])).unwrap()
    }

    fn bayes_theta(series: &ObservedSeries, latent: LatentModel, shift: f64, var: f64) -> Theta {
        let ybar = series.y().mean();
        let n = series.len();
        let kernels = vec![KernelParams { u: 1.0, s: 2.0 }; 2];
        let fitted = vec![
            DVector::from_element(n, ybar - shift),
            DVector::from_element(n, ybar + shift),
        ];
        let funcs = BayesianFunctions::from_fitted(series.x(), fitted, kernels).unwrap();
        Theta::new(latent, RegimeFunctions::Bayesian(funcs), NoiseModel::separate(vec![var; 2])).unwrap()
    }

    fn nondecreasing(trace: &[f64]) -> bool {
        trace.windows(2).all(|w| w[1] >= w[0] - 1e-8)
    }

    #[test]
    fn affine_spline_has_zero_penalty() {
        let (s, _) = two_curve_series(30, 1, false);
        let design = Arc::new(SplineDesign::new(s.x().as_slice(), 6).unwrap());
        let knots = design.basis().knots().to_vec();
        // Greville abscissae reproduce the identity
        let coef = DVector::from_fn(design.basis().len(), |k, _| {
            (knots[k + 1] + knots[k + 2] + knots[k + 3]) / 3.0 * 0.7 - 2.0
        });
        let pf = PenalizedFunctions::new(design, vec![coef], vec![3.0]).unwrap();
        assert!(RegimeFunctions::Penalized(pf).penalty().abs() < 1e-9);
    }

    #[test]
    fn single_regime_criterion_is_gaussian_loglik() {
        let (s, _) = two_curve_series(25, 2, false);
        let design = Arc::new(SplineDesign::new(s.x().as_slice(), 5).unwrap());
        let coef = DVector::from_element(design.basis().len(), 0.3);
        let pf = PenalizedFunctions::new(design, vec![coef], vec![1e-300]).unwrap();
        let theta = Theta::new(
            LatentModel::Iid { probs: vec![1.0] },
            RegimeFunctions::Penalized(pf),
            NoiseModel::separate(vec![0.2]),
        )
        .unwrap();
        let direct: f64 = s
            .y()
            .iter()
            .map(|y| -0.5 * (2.0 * std::f64::consts::PI * 0.2).ln() - (y - 0.3).powi(2) / 0.4)
            .sum();
        assert!((criterion(&s, &theta).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn single_regime_fit_converges_quickly() {
        let (s, _) = two_curve_series(40, 3, false);
        let design = Arc::new(SplineDesign::new(s.x().as_slice(), 6).unwrap());
        let coef = DVector::from_element(design.basis().len(), 0.0);
        let pf = PenalizedFunctions::new(design, vec![coef], vec![0.01]).unwrap();
        let theta = Theta::new(
            LatentModel::Iid { probs: vec![1.0] },
            RegimeFunctions::Penalized(pf),
            NoiseModel::separate(vec![1.0]),
        )
        .unwrap();
        let mut cfg = FitConfig::new(Approach::Penalized, LatentKind::Iid, 1);
        cfg.df_adjust = false;
        let fit = em_fit(&s, &cfg, theta).unwrap();
        assert!(fit.converged);
        // f and σ² decouple only through the weights; a handful of sweeps suffices
        assert!(fit.iterations <= 8, "{}", fit.iterations);
        assert!(nondecreasing(&fit.trace));
    }

    #[test]
    fn bayes_markov_run_is_monotone() {
        let (s, _) = two_curve_series(60, 4, true);
        let theta = bayes_theta(&s, LatentModel::uniform_markov(2), 0.5, 0.5);
        let mut cfg = FitConfig::new(Approach::Bayesian, LatentKind::Markov, 2);
        cfg.df_adjust = false;
        let fit = em_fit(&s, &cfg, theta).unwrap();
        assert!(nondecreasing(&fit.trace), "{:?}", fit.trace);
        assert!(fit.trace.len() >= 3);
    }

    #[test]
    fn penalty_free_end_of_run_loglik_matches_criterion() {
        let (s, _) = two_curve_series(50, 5, false);
        let theta = penalized_theta(&s, LatentModel::uniform_iid(2), 0.5, 0.3);
        let cfg = FitConfig::new(Approach::Penalized, LatentKind::Iid, 2);
        let fit = em_fit(&s, &cfg, theta).unwrap();
        let direct = criterion(&s, &fit.theta).unwrap();
        assert!((fit.criterion() - direct).abs() < 1e-9);
        assert!((fit.loglik + fit.theta.funcs.penalty() - direct).abs() < 1e-9);
        fit.resp.check(1e-10).unwrap();
    }

    #[test]
    fn function_and_latent_blocks_are_idempotent() {
        let (s, _) = two_curve_series(50, 6, true);
        let theta = penalized_theta(&s, LatentModel::uniform_markov(2), 0.4, 0.2);
        let resp = estep(&s, &theta).unwrap().resp;
        let once = update_functions(&s, &theta, &resp).unwrap();
        let (lat1, _) = update_latent(&theta, &resp).unwrap();
        let t1 = Theta { latent: lat1, funcs: once.funcs, noise: theta.noise.clone() };
        let twice = update_functions(&s, &t1, &resp).unwrap();
        let (lat2, _) = update_latent(&t1, &resp).unwrap();
        for k in 0..2 {
            assert!((t1.funcs.fitted(k) - twice.funcs.fitted(k)).amax() < 1e-10);
        }
        let (a1, a2) = (t1.latent.transition_matrix().unwrap(), lat2.transition_matrix().unwrap());
        assert!((a1 - a2).amax() < 1e-10);
    }

    #[test]
    fn permuted_start_gives_permuted_fit() {
        let (s, _) = two_curve_series(50, 7, false);
        let theta = penalized_theta(&s, LatentModel::Iid { probs: vec![0.3, 0.7] }, 0.5, 0.3);
        let cfg = FitConfig::new(Approach::Penalized, LatentKind::Iid, 2);
        let a = em_fit(&s, &cfg, theta.clone()).unwrap();
        let b = em_fit(&s, &cfg, theta.permuted(&[1, 0])).unwrap();
        assert!((a.criterion() - b.criterion()).abs() < 1e-9);
        for k in 0..2 {
            assert!((a.theta.funcs.fitted(k) - b.theta.funcs.fitted(1 - k)).amax() < 1e-8);
        }
    }

    #[test]
    fn aic_counts_parameters() {
        let (s, _) = two_curve_series(40, 8, false);
        let theta = penalized_theta(&s, LatentModel::uniform_iid(2), 0.5, 0.3);
        let mut cfg = FitConfig::new(Approach::Penalized, LatentKind::Iid, 2);
        cfg.max_iter = 3;
        let fit = em_fit(&s, &cfg, theta).unwrap();
        let expect = -2.0 * fit.loglik + 2.0 * (fit.hat_traces[0] + fit.hat_traces[1] + 2.0 + 1.0);
        assert!((fit.aic() - expect).abs() < 1e-12);
        assert!(!fit.converged || fit.iterations < 3);
    }

    fn random_resp(n: usize, j: usize, rng: &mut ChaCha8Rng, markov: bool) -> Responsibilities {
        // a valid posterior: from an arbitrary θ on random data
        let probs = nalgebra::DMatrix::from_fn(n, j, |_, _| rng.random_range(0.05..1.0));
        let mut probs = probs;
        for i in 0..n {
            let s: f64 = probs.row(i).sum();
            probs.row_mut(i).scale_mut(1.0 / s);
        }
        let pairs = markov.then(|| {
            (1..n)
                .map(|i| nalgebra::DMatrix::from_fn(j, j, |l, k| probs[(i - 1, l)] * probs[(i, k)]))
                .collect()
        });
        Responsibilities { probs, pairs }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Each conditional update does not decrease S(θ, θ_c).
        #[test]
        fn ecm_substeps_ascend(seed in 0u64..10_000, markov in any::<bool>(), bayes in any::<bool>(), shared in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, _) = two_curve_series(30, seed, markov);
            let latent = if markov { LatentModel::uniform_markov(2) } else { LatentModel::uniform_iid(2) };
            let var = rng.random_range(0.05..1.0);
            let mut theta = if bayes { bayes_theta(&s, latent, 0.3, var) } else { penalized_theta(&s, latent, 0.3, var) };
            if shared { theta.noise = NoiseModel::shared(2, var); }
            let resp = random_resp(30, 2, &mut rng, markov);
            let s0 = expected_complete(&s, &theta, &resp);
            let fu = update_functions(&s, &theta, &resp).unwrap();
            let t1 = Theta { funcs: fu.funcs, ..theta.clone() };
            let s1 = expected_complete(&s, &t1, &resp);
            prop_assert!(s1 >= s0 - 1e-8, "functions: {s0} -> {s1}");
            let su = update_sigma(s.y(), t1.funcs.all_fitted(), &resp, None, shared, s.y_variance());
            let t2 = Theta { noise: su.noise, ..t1.clone() };
            let s2 = expected_complete(&s, &t2, &resp);
            prop_assert!(s2 >= s1 - 1e-8, "variances: {s1} -> {s2}");
            let (lat, _) = update_latent(&t2, &resp).unwrap();
            let t3 = Theta { latent: lat, ..t2.clone() };
            let s3 = expected_complete(&s, &t3, &resp);
            prop_assert!(s3 >= s2 - 1e-8, "latent: {s2} -> {s3}");
        }

        #[test]
        fn em_trace_never_decreases(seed in 0u64..10_000, markov in any::<bool>(), bayes in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let (s, _) = two_curve_series(40, seed, markov);
            let latent = if markov { LatentModel::uniform_markov(2) } else { LatentModel::uniform_iid(2) };
            let shift = rng.random_range(0.1..1.0);
            let var = rng.random_range(0.05..1.0);
            let theta = if bayes { bayes_theta(&s, latent, shift, var) } else { penalized_theta(&s, latent, shift, var) };
            let mut cfg = FitConfig::new(if bayes { Approach::Bayesian } else { Approach::Penalized },
                if markov { LatentKind::Markov } else { LatentKind::Iid }, 2);
            cfg.df_adjust = false;
            cfg.max_iter = 60;
            let fit = em_fit(&s, &cfg, theta).unwrap();
            prop_assert!(nondecreasing(&fit.trace), "{:?}", fit.trace);
        }
    }
}

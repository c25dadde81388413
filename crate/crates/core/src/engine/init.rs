//! Automatic starting values.

use std::sync::Arc;

use nalgebra::DVector;

use crate::basis::{kernel_gram, quantile_sorted, SplineDesign};
use crate::error::{Error, Result};
use crate::model::{
    BayesianFunctions, KernelParams, LatentModel, ObservedSeries, PenalizedFunctions,
    RegimeFunctions, Theta,
};
use crate::mstep::{fit_bayes, PenalizedFit};

use super::config::{Approach, FitConfig, GridSpec, InitMethod, LatentKind};
use super::em::starting_noise;
use super::gcv::{search_bayes, search_penalized};

/// Smallest group accepted by the two-group starts.
pub const MIN_GROUP: usize = 4;
/// Noise variance assumed by the Gaussian-process group fits.
pub const BAYES_PILOT_VARIANCE: f64 = 0.005;
/// Length scales chosen below this are replaced by [`BAYES_SCALE_REPLACEMENT`].
pub const BAYES_SCALE_FLOOR: f64 = 10.0;
pub const BAYES_SCALE_REPLACEMENT: f64 = 15.0;

/// Unit-weight smoothing spline of the whole sample, λ by GCV.
#[derive(Debug, Clone)]
pub struct Pilot {
    pub design: Arc<SplineDesign>,
    pub fit: PenalizedFit,
    pub lambda: f64,
    /// `RSS / (n − tr H)`.
    pub variance: f64,
}

pub fn pilot_smooth(series: &ObservedSeries, n_interior: usize, grid: &GridSpec) -> Result<Pilot> {
    let design = Arc::new(SplineDesign::new(series.x().as_slice(), n_interior)?);
    let n = series.len();
    let values = grid.values(design.lambda_scale());
    let ones = vec![1.0; n];
    let (k, fit) = search_penalized(series.y(), &design, &ones, 1.0, &values)
        .ok_or(Error::GcvAllInfinite { regime: 0 })?;
    let rss = (series.y() - &fit.fitted).norm_squared();
    let variance = rss / (n as f64 - fit.hat.trace).max(1.0);
    Ok(Pilot {
        design,
        fit,
        lambda: values[k],
        variance,
    })
}

fn uniform_latent(kind: LatentKind, j: usize) -> LatentModel {
    match kind {
        LatentKind::Iid => LatentModel::uniform_iid(j),
        LatentKind::Markov => LatentModel::uniform_markov(j),
    }
}

fn penalized_grid(config: &FitConfig) -> GridSpec {
    if config.approach == Approach::Penalized {
        config.grid
    } else {
        GridSpec::for_approach(Approach::Penalized)
    }
}

/// Fits each labelled group separately and pools the residual variance.
pub fn theta_from_labels(
    series: &ObservedSeries,
    config: &FitConfig,
    pilot: &Pilot,
    labels: &[usize],
) -> Result<Theta> {
    let j = config.j;
    let n = series.len();
    let y = series.y();
    let mut rss = 0.0;
    let mut dof = 0.0;
    let masks: Vec<Vec<f64>> = (0..j)
        .map(|g| labels.iter().map(|&l| if l == g { 1.0 } else { 0.0 }).collect())
        .collect();
    for (g, m) in masks.iter().enumerate() {
        let size = m.iter().filter(|&&v| v > 0.0).count();
        if size < MIN_GROUP {
            return Err(Error::EmptyGroup { group: g, size });
        }
    }
    let funcs = match config.approach {
        Approach::Penalized => {
            let values = penalized_grid(config).values(pilot.design.lambda_scale());
            let mut coefs = Vec::with_capacity(j);
            let mut unit_lambdas = Vec::with_capacity(j);
            for (g, m) in masks.iter().enumerate() {
                let (k, fit) = search_penalized(y, &pilot.design, m, 1.0, &values)
                    .ok_or(Error::GcvAllInfinite { regime: g })?;
                rss += (0..n).map(|i| m[i] * (y[i] - fit.fitted[i]).powi(2)).sum::<f64>();
                dof += m.iter().sum::<f64>() - fit.hat.weighted_trace(m);
                coefs.push(fit.coefficients);
                unit_lambdas.push(values[k]);
            }
            let var = rss / dof.max(1.0);
            // penalties on the unit-weight scale become λ / σ² under weights 1/σ²
            let lambdas = unit_lambdas.iter().map(|l| l / var).collect();
            let pf = PenalizedFunctions::new(pilot.design.clone(), coefs, lambdas)?;
            (RegimeFunctions::Penalized(pf), var)
        }
        Approach::Bayesian => {
            let x = series.x().as_slice();
            let values = config.grid.values(series.x_range());
            let mut duals = Vec::with_capacity(j);
            let mut kernels = Vec::with_capacity(j);
            for (g, m) in masks.iter().enumerate() {
                let (k, mut fit) = search_bayes(y, x, m, BAYES_PILOT_VARIANCE, &values, config.kernel_scale)
                    .ok_or(Error::GcvAllInfinite { regime: g })?;
                let mut s = values[k];
                if s < BAYES_SCALE_FLOOR {
                    s = BAYES_SCALE_REPLACEMENT;
                    let gram = kernel_gram(x, config.kernel_scale.u(s), s)?.regularized();
                    let w: Vec<f64> = m.iter().map(|v| v / BAYES_PILOT_VARIANCE).collect();
                    fit = fit_bayes(y, &gram, &w)?;
                }
                rss += (0..n).map(|i| m[i] * (y[i] - fit.fitted[i]).powi(2)).sum::<f64>();
                dof += m.iter().sum::<f64>() - fit.hat.weighted_trace(m);
                duals.push(fit.dual);
                kernels.push(KernelParams {
                    u: config.kernel_scale.u(s),
                    s,
                });
            }
            let bf = BayesianFunctions::from_duals(series.x(), duals, kernels)?;
            (RegimeFunctions::Bayesian(bf), rss / dof.max(1.0))
        }
    };
    let (funcs, var) = funcs;
    let var = var.max(crate::mstep::VARIANCE_FLOOR_REL * series.y_variance());
    Theta::new(
        uniform_latent(config.latent, j),
        funcs,
        starting_noise(j, var, config.shared_variance),
    )
}

/// Points on or below the whole-sample smooth form group 1, the rest group 2.
pub fn init_function_estimate(series: &ObservedSeries, config: &FitConfig) -> Result<Theta> {
    let pilot = pilot_smooth(series, config.interior_knots, &penalized_grid(config))?;
    let labels: Vec<usize> = (0..series.len())
        .map(|i| usize::from(series.y()[i] > pilot.fit.fitted[i]))
        .collect();
    theta_from_labels(series, config, &pilot, &labels)
}

/// Exact two-means split of `values`: returns per-value labels with the
/// lower-mean cluster labelled 0.
pub fn two_means(values: &[f64]) -> Vec<usize> {
    let m = values.len();
    if m < 2 {
        return vec![0; m];
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let sorted: Vec<f64> = order.iter().map(|&k| values[k]).collect();
    let mut prefix = vec![0.0; m + 1];
    let mut prefix2 = vec![0.0; m + 1];
    for k in 0..m {
        prefix[k + 1] = prefix[k] + sorted[k];
        prefix2[k + 1] = prefix2[k] + sorted[k] * sorted[k];
    }
    let sse = |a: usize, b: usize| {
        let c = (b - a) as f64;
        let s = prefix[b] - prefix[a];
        prefix2[b] - prefix2[a] - s * s / c
    };
    let mut best = (f64::INFINITY, 1);
    for split in 1..m {
        let v = sse(0, split) + sse(split, m);
        if v < best.0 {
            best = (v, split);
        }
    }
    let mut labels = vec![0; m];
    for &k in &order[best.1..] {
        labels[k] = 1;
    }
    labels
}

/// Two-means clustering of the pilot residuals inside each subinterval.
/// Points outside every subinterval are labelled by the sign of their
/// residual.
pub fn init_residual_based(series: &ObservedSeries, config: &FitConfig) -> Result<Theta> {
    let pilot = pilot_smooth(series, config.interior_knots, &penalized_grid(config))?;
    let x = series.x();
    let resid: Vec<f64> = (0..series.len()).map(|i| series.y()[i] - pilot.fit.fitted[i]).collect();
    let mut labels: Vec<Option<usize>> = vec![None; series.len()];
    for &(a, b) in &config.intervals {
        let members: Vec<usize> = (0..series.len())
            .filter(|&i| labels[i].is_none() && x[i] >= a && x[i] <= b)
            .collect();
        let vals: Vec<f64> = members.iter().map(|&i| resid[i]).collect();
        for (&i, l) in members.iter().zip(two_means(&vals)) {
            labels[i] = Some(l);
        }
    }
    let labels: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.unwrap_or(usize::from(resid[i] > 0.0)))
        .collect();
    theta_from_labels(series, config, &pilot, &labels)
}

/// `f_j = m̂ + q_j` with `q_j` the residual quantile at `(j − ½)/J`.
pub fn init_spline_shifts(series: &ObservedSeries, config: &FitConfig) -> Result<Theta> {
    let j = config.j;
    let pilot = pilot_smooth(series, config.interior_knots, &penalized_grid(config))?;
    let mut resid: Vec<f64> = (0..series.len()).map(|i| series.y()[i] - pilot.fit.fitted[i]).collect();
    resid.sort_by(f64::total_cmp);
    let shifts: Vec<f64> = (0..j)
        .map(|k| quantile_sorted(&resid, (k as f64 + 0.5) / j as f64))
        .collect();
    shifted_pilot(series, config, &pilot, &shifts)
}

/// `f_j = m̂ + shifts[j]` around the pilot smooth, with the variance pooled
/// over nearest curves.
pub fn shifted_pilot(series: &ObservedSeries, config: &FitConfig, pilot: &Pilot, shifts: &[f64]) -> Result<Theta> {
    let j = shifts.len();
    let n = series.len();
    let y = series.y();
    let mhat = &pilot.fit.fitted;
    let nearest: f64 = (0..n)
        .map(|i| {
            shifts
                .iter()
                .map(|q| (y[i] - mhat[i] - q).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    let var = (nearest / n as f64).max(crate::mstep::VARIANCE_FLOOR_REL * series.y_variance());
    let funcs = match config.approach {
        Approach::Penalized => {
            // the B-spline rows sum to one, so a constant shift moves every coefficient
            let coefs = shifts.iter().map(|q| pilot.fit.coefficients.add_scalar(*q)).collect();
            let lambdas = vec![pilot.lambda / var; j];
            RegimeFunctions::Penalized(PenalizedFunctions::new(pilot.design.clone(), coefs, lambdas)?)
        }
        Approach::Bayesian => {
            let values = config.grid.values(series.x_range());
            let ones = vec![1.0; n];
            let (k, _) = search_bayes(y, series.x().as_slice(), &ones, pilot.variance, &values, config.kernel_scale)
                .ok_or(Error::GcvAllInfinite { regime: 0 })?;
            let s = values[k];
            let kernels = vec![
                KernelParams {
                    u: config.kernel_scale.u(s),
                    s,
                };
                j
            ];
            let fitted: Vec<DVector<f64>> = shifts.iter().map(|q| mhat.add_scalar(*q)).collect();
            RegimeFunctions::Bayesian(BayesianFunctions::from_fitted(series.x(), fitted, kernels)?)
        }
    };
    Theta::new(
        uniform_latent(config.latent, j),
        funcs,
        starting_noise(j, var, config.shared_variance),
    )
}

/// Dispatches on the configured start.
pub fn initial_theta(series: &ObservedSeries, config: &FitConfig) -> Result<Theta> {
    config.validate()?;
    match config.init_method() {
        InitMethod::FunctionEstimate => init_function_estimate(series, config),
        InitMethod::ResidualBased => init_residual_based(series, config),
        InitMethod::SplineShifts => init_spline_shifts(series, config),
        InitMethod::Explicit => Err(Error::Config("explicit start requires a supplied theta".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn symmetric_series(n: usize) -> ObservedSeries {
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        ObservedSeries::new(x, y).unwrap()
    }

    #[test]
    fn function_estimate_splits_symmetric_data_evenly() {
        let s = symmetric_series(60);
        let cfg = FitConfig::new(Approach::Penalized, LatentKind::Iid, 2);
        let pilot = pilot_smooth(&s, cfg.interior_knots, &cfg.grid).unwrap();
        let above = (0..60).filter(|&i| s.y()[i] > pilot.fit.fitted[i]).count();
        assert_eq!(above, 30);
        let theta = init_function_estimate(&s, &cfg).unwrap();
        assert_eq!(theta.latent, LatentModel::Iid { probs: vec![0.5, 0.5] });
        assert!(theta.funcs.fitted(0).mean() < 0.0 && theta.funcs.fitted(1).mean() > 0.0);
    }

    #[test]
    fn markov_start_is_all_halves() {
        let s = symmetric_series(40);
        let cfg = FitConfig::new(Approach::Penalized, LatentKind::Markov, 2);
        let theta = init_function_estimate(&s, &cfg).unwrap();
        let a = theta.latent.transition_matrix().unwrap();
        assert!(a.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn lopsided_split_is_rejected() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let mut y = vec![0.0; 30];
        y[10] = 50.0;
        y[20] = 40.0;
        let s = ObservedSeries::new(x, y).unwrap();
        let mut cfg = FitConfig::new(Approach::Penalized, LatentKind::Iid, 2);
        cfg.init = Some(InitMethod::ResidualBased);
        cfg.intervals = vec![(0.0, 29.0)];
        assert!(matches!(
            init_residual_based(&s, &cfg),
            Err(Error::EmptyGroup { group: 1, size: 2 })
        ));
    }

    #[test]
    fn two_means_separates_alternating_residuals() {
        let r: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 0.7 } else { -0.7 }).collect();
        let l = two_means(&r);
        assert!((0..20).all(|i| l[i] == usize::from(i % 2 == 0)));
        // an even sweep over all splits agrees with brute force
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l = two_means(&v);
        let cost = |lab: &[usize]| -> f64 {
            (0..2)
                .map(|g| {
                    let m: Vec<f64> = (0..9).filter(|&i| lab[i] == g).map(|i| v[i]).collect();
                    if m.is_empty() { return 0.0; }
                    let mu = m.iter().sum::<f64>() / m.len() as f64;
                    m.iter().map(|a| (a - mu).powi(2)).sum::<f64>()
                })
                .sum()
        };
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << 9) - 1 {
            let lab: Vec<usize> = (0..9).map(|i| ((mask >> i) & 1) as usize).collect();
            best = best.min(cost(&lab));
        }
        assert!((cost(&l) - best).abs() < 1e-12);
    }

    #[test]
    fn single_interval_matches_global_clustering() {
        let n = 80;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / 4.0).collect();
        let y: Vec<f64> = (0..n).map(|i| (x[i] / 3.0).sin() + if i % 3 == 0 { 2.0 } else { 0.0 }).collect();
        let s = ObservedSeries::new(x, y).unwrap();
        let mut cfg = FitConfig::new(Approach::Penalized, LatentKind::Iid, 2);
        cfg.init = Some(InitMethod::ResidualBased);
        cfg.intervals = vec![(f64::NEG_INFINITY, f64::INFINITY)];
        let a = init_residual_based(&s, &cfg).unwrap();
        let pilot = pilot_smooth(&s, cfg.interior_knots, &cfg.grid).unwrap();
        let r: Vec<f64> = (0..n).map(|i| s.y()[i] - pilot.fit.fitted[i]).collect();
        let b = theta_from_labels(&s, &cfg, &pilot, &two_means(&r)).unwrap();
        assert!((a.funcs.fitted(1) - b.funcs.fitted(1)).amax() == 0.0);
        // shifted curve lands in regime 2
        assert!(a.funcs.fitted(1).mean() > a.funcs.fitted(0).mean() + 1.0);
    }

    #[test]
    fn shifts_bracket_the_data() {
        let s = symmetric_series(60);
        for approach in [Approach::Penalized, Approach::Bayesian] {
            let cfg = FitConfig::new(approach, LatentKind::Iid, 3);
            let theta = init_spline_shifts(&s, &cfg).unwrap();
            assert_eq!(theta.n_regimes(), 3);
            let means: Vec<f64> = (0..3).map(|k| theta.funcs.fitted(k).mean()).collect();
            assert!(means[0] <= means[1] && means[1] <= means[2]);
            assert_eq!(theta.latent, LatentModel::uniform_iid(3));
        }
    }

    #[test]
    fn bayes_group_fit_respects_scale_floor() {
        let n = 60;
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.2 } else { -0.2 }).collect();
        let s = ObservedSeries::new(x, y).unwrap();
        let cfg = FitConfig::new(Approach::Bayesian, LatentKind::Iid, 2);
        let theta = init_function_estimate(&s, &cfg).unwrap();
        assert!(theta.funcs.lambdas().iter().all(|&v| v >= BAYES_SCALE_FLOOR));
    }
}

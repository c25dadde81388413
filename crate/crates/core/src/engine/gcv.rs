use nalgebra::DVector;
use rayon::prelude::*;

use crate::basis::{kernel_gram, SplineDesign};
use crate::error::{Error, Result};
use crate::model::{ObservedSeries, RegimeFunctions, Theta};
use crate::mstep::{fit_bayes, fit_penalized, BayesFit, PenalizedFit};

use super::config::{Approach, FitConfig, GridSpec, KernelScale};
use super::em::{em_fit, with_smoothing, FitResult};

/// `(1/n) Σ_i p_i ((y_i − f_i) / (1 − H_ii))²`, infinite when some point
/// with positive weight has `H_ii ≥ 1`.
pub fn gcv_score(y: &DVector<f64>, fitted: &DVector<f64>, hat_diag: &DVector<f64>, p: &[f64]) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for i in 0..n {
        if p[i] <= 0.0 {
            continue;
        }
        let d = 1.0 - hat_diag[i];
        if !(d > 0.0) {
            return f64::INFINITY;
        }
        total += p[i] * ((y[i] - fitted[i]) / d).powi(2);
    }
    let s = total / n as f64;
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

fn argmin(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| s < scores[b]) {
            best = Some(k);
        }
    }
    best
}

/// Grid search for a spline regime with responsibilities `p` and variance
/// `var`. Returns the chosen index and its fit.
pub fn search_penalized(
    y: &DVector<f64>,
    design: &SplineDesign,
    p: &[f64],
    var: f64,
    grid: &[f64],
) -> Option<(usize, PenalizedFit)> {
    let w: Vec<f64> = p.iter().map(|v| v / var).collect();
    let fits: Vec<Option<PenalizedFit>> = grid
        .par_iter()
        .map(|&lam| fit_penalized(y, design.design(), design.penalty().matrix(), &w, lam).ok())
        .collect();
    let scores: Vec<f64> = fits
        .iter()
        .map(|f| f.as_ref().map_or(f64::INFINITY, |f| gcv_score(y, &f.fitted, &f.hat.diag, p)))
        .collect();
    let k = argmin(&scores)?;
    Some((k, fits[k].clone().expect("finite score")))
}

/// Grid search over kernel length scales.
pub fn search_bayes(
    y: &DVector<f64>,
    x: &[f64],
    p: &[f64],
    var: f64,
    grid: &[f64],
    scale: KernelScale,
) -> Option<(usize, BayesFit)> {
    let w: Vec<f64> = p.iter().map(|v| v / var).collect();
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|&s| {
            kernel_gram(x, scale.u(s), s)
                .and_then(|g| fit_bayes(y, &g.regularized(), &w))
                .map_or(f64::INFINITY, |f| gcv_score(y, &f.fitted, &f.hat.diag, p))
        })
        .collect();
    let k = argmin(&scores)?;
    let s = grid[k];
    let g = kernel_gram(x, scale.u(s), s).ok()?;
    Some((k, fit_bayes(y, &g.regularized(), &w).ok()?))
}

/// Smoothing grid in absolute units for a fit started at `theta`.
pub fn absolute_grid(series: &ObservedSeries, config: &FitConfig, theta: &Theta, spec: &GridSpec) -> Vec<f64> {
    match (&theta.funcs, config.approach) {
        (RegimeFunctions::Penalized(pf), _) => {
            let v = &theta.noise.variances;
            let geo = (v.iter().map(|s| s.ln()).sum::<f64>() / v.len() as f64).exp();
            spec.values(pf.design().lambda_scale() / geo)
        }
        (RegimeFunctions::Bayesian(_), _) => spec.values(series.x_range()),
    }
}

/// Per-regime grid choice holding responsibilities and variances of `fit`.
fn choose(series: &ObservedSeries, config: &FitConfig, fit: &FitResult, grid: &[f64], wide: &[f64]) -> Result<Vec<f64>> {
    let y = series.y();
    let j = fit.theta.n_regimes();
    let mut out = Vec::with_capacity(j);
    for k in 0..j {
        let p: Vec<f64> = fit.resp.probs.column(k).iter().copied().collect();
        let var = fit.theta.noise.variances[k];
        let pick = |g: &[f64]| -> Option<f64> {
            match &fit.theta.funcs {
                RegimeFunctions::Penalized(pf) => search_penalized(y, pf.design(), &p, var, g).map(|(i, _)| g[i]),
                RegimeFunctions::Bayesian(_) => {
                    search_bayes(y, series.x().as_slice(), &p, var, g, config.kernel_scale).map(|(i, _)| g[i])
                }
            }
        };
        let v = pick(grid)
            .or_else(|| pick(wide))
            .ok_or(Error::GcvAllInfinite { regime: k })?;
        out.push(v);
    }
    Ok(out)
}

/// Alternates EM at fixed smoothing parameters with per-regime GCV grid
/// searches until the chosen grid points repeat.
pub fn select_lambda_gcv(series: &ObservedSeries, config: &FitConfig, init: Theta) -> Result<FitResult> {
    config.validate()?;
    let grid = absolute_grid(series, config, &init, &config.grid);
    let wide = absolute_grid(series, config, &init, &config.grid.widened());
    let mut theta = init;
    let mut current: Option<Vec<f64>> = None;
    for round in 1..=config.max_gcv_rounds {
        let mut fit = em_fit(series, config, theta)?;
        let chosen = choose(series, config, &fit, &grid, &wide)?;
        if current.as_ref() == Some(&chosen) {
            fit.gcv_rounds = round;
            return Ok(fit);
        }
        theta = with_smoothing(series, &fit.theta, &chosen, config)?;
        current = Some(chosen);
    }
    let mut fit = em_fit(series, config, theta)?;
    fit.gcv_rounds = config.max_gcv_rounds + 1;
    Ok(fit)
}

/// Builds the configured start and runs the fit, with smoothing-parameter
/// selection when enabled.
pub fn fit(series: &ObservedSeries, config: &FitConfig) -> Result<FitResult> {
    let init = super::init::initial_theta(series, config)?;
    fit_from(series, config, init)
}

pub fn fit_from(series: &ObservedSeries, config: &FitConfig, init: Theta) -> Result<FitResult> {
    if config.select_lambda {
        select_lambda_gcv(series, config, init)
    } else {
        em_fit(series, config, init)
    }
}

/// Whether `approach` and the functions carried by `theta` agree.
pub(crate) fn matches_approach(theta: &Theta, approach: Approach) -> bool {
    matches!(
        (&theta.funcs, approach),
        (RegimeFunctions::Penalized(_), Approach::Penalized) | (RegimeFunctions::Bayesian(_), Approach::Bayesian)
    )
}

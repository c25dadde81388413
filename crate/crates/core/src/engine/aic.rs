use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ObservedSeries;

use super::config::{FitConfig, InitMethod};
use super::em::FitResult;
use super::gcv::fit;

pub const MAX_REGIMES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicEntry {
    pub j: usize,
    /// `None` when the fit for this `J` failed.
    pub aic: Option<f64>,
    pub loglik: Option<f64>,
    /// `Σ tr(H_j)`.
    pub effective_df: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicTable {
    pub entries: Vec<AicEntry>,
    pub best_j: Option<usize>,
}

/// Fits every `J` in `range` and tabulates AIC. The configured start is
/// used where it applies to `J`; two-group starts fall back to spline
/// shifts for other `J`.
pub fn select_j_aic(
    series: &ObservedSeries,
    config: &FitConfig,
    range: RangeInclusive<usize>,
) -> Result<(AicTable, Vec<Option<FitResult>>)> {
    if *range.start() < 1 || *range.end() > MAX_REGIMES || range.is_empty() {
        return Err(Error::Config(format!("J range must lie within 1..={MAX_REGIMES}")));
    }
    let js: Vec<usize> = range.collect();
    let fits: Vec<Result<FitResult>> = js
        .par_iter()
        .map(|&j| {
            let mut c = config.clone();
            c.j = j;
            if j != 2
                && matches!(c.init_method(), InitMethod::FunctionEstimate | InitMethod::ResidualBased)
            {
                c.init = Some(InitMethod::SplineShifts);
            }
            fit(series, &c)
        })
        .collect();
    let mut entries = Vec::with_capacity(js.len());
    let mut kept = Vec::with_capacity(js.len());
    for (&j, r) in js.iter().zip(fits) {
        match r {
            Ok(f) => {
                entries.push(AicEntry {
                    j,
                    aic: Some(f.aic()),
                    loglik: Some(f.loglik),
                    effective_df: Some(f.hat_traces.iter().sum()),
                    error: None,
                });
                kept.push(Some(f));
            }
            Err(e) => {
                entries.push(AicEntry {
                    j,
                    aic: None,
                    loglik: None,
                    effective_df: None,
                    error: Some(e.to_string()),
                });
                kept.push(None);
            }
        }
    }
    let best_j = entries
        .iter()
        .filter_map(|e| e.aic.map(|a| (e.j, a)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(j, _)| j);
    Ok((AicTable { entries, best_j }, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::config::{Approach, LatentKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bimodal_data_prefers_two_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 120;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|t| {
                let up = rng.random::<f64>() < 0.5;
                (t / 2.0).sin() + if up { 3.0 } else { 0.0 } + 0.1 * (rng.random::<f64>() - 0.5)
            })
            .collect();
        let s = ObservedSeries::new(x, y).unwrap();
        let cfg = FitConfig::new(Approach::Penalized, LatentKind::Iid, 2);
        let (table, fits) = select_j_aic(&s, &cfg, 1..=2).unwrap();
        let a1 = table.entries[0].aic.unwrap();
        let a2 = table.entries[1].aic.unwrap();
        assert!(a2 < a1, "{a1} vs {a2}");
        assert_eq!(table.best_j, Some(2));
        assert!(fits.iter().all(Option::is_some));
    }

    #[test]
    fn range_is_checked() {
        let s = ObservedSeries::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0; 4]).unwrap();
        let cfg = FitConfig::default();
        assert!(select_j_aic(&s, &cfg, 0..=2).is_err());
        assert!(select_j_aic(&s, &cfg, 2..=9).is_err());
    }

    #[test]
    fn failed_fits_are_missing_not_fatal() {
        // too few points for any group split
        let s = ObservedSeries::new((0..6).map(f64::from).collect(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let cfg = FitConfig::new(Approach::Penalized, LatentKind::Iid, 2);
        let (table, _) = select_j_aic(&s, &cfg, 2..=2).unwrap();
        assert!(table.entries[0].aic.is_none());
        assert!(table.entries[0].error.is_some());
        assert_eq!(table.best_j, None);
    }
}

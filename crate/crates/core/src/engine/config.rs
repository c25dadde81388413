use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Penalized,
    Bayesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Iid,
    Markov,
}

/// How the first `θ` is built when none is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Split the data by a whole-sample smooth and fit each half (J = 2).
    FunctionEstimate,
    /// Two-means clustering of residuals within subintervals (J = 2).
    ResidualBased,
    /// Constant shifts of a whole-sample smooth at residual quantiles.
    SplineShifts,
    /// The caller provides `θ` directly.
    Explicit,
}

/// Variance scale `U_j` of the Gaussian-process prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelScale {
    /// `U_j = 1 / (s_j √(2π))`, tied to the length scale.
    Tied,
    /// One known `U` for every regime.
    Fixed(f64),
}

impl KernelScale {
    pub fn u(&self, s: f64) -> f64 {
        match *self {
            KernelScale::Tied => crate::basis::tied_variance_scale(s),
            KernelScale::Fixed(u) => u,
        }
    }
}

/// Log-spaced smoothing-parameter grid. The bounds are multipliers of an
/// approach-specific scale: the data-to-penalty balance for splines, the
/// range of `x` for kernel length scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub lower: f64,
    pub upper: f64,
}

impl GridSpec {
    pub fn for_approach(approach: Approach) -> Self {
        match approach {
            Approach::Penalized => Self {
                points: 25,
                lower: 1e-4,
                upper: 1e4,
            },
            Approach::Bayesian => Self {
                points: 25,
                lower: 0.25,
                upper: 1.0,
            },
        }
    }

    pub fn values(&self, scale: f64) -> Vec<f64> {
        let (a, b) = (self.lower.ln(), self.upper.ln());
        if self.points == 1 {
            return vec![scale * (0.5 * (a + b)).exp()];
        }
        (0..self.points)
            .map(|k| scale * (a + (b - a) * k as f64 / (self.points - 1) as f64).exp())
            .collect()
    }

    /// The same grid extended by a factor of ten at both ends.
    pub fn widened(&self) -> Self {
        Self {
            points: self.points + 2 * (self.points / 8).max(1),
            lower: self.lower / 10.0,
            upper: self.upper * 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub approach: Approach,
    pub latent: LatentKind,
    pub j: usize,
    pub max_iter: usize,
    /// Stop once `|l_c − l_{c−1}| / |l_{c−1}|` drops below this.
    pub tol: f64,
    pub grid: GridSpec,
    /// `None` picks [`InitMethod::FunctionEstimate`] for J = 2 and
    /// [`InitMethod::SplineShifts`] otherwise.
    pub init: Option<InitMethod>,
    /// Subintervals `[a, b]` of `x` for [`InitMethod::ResidualBased`].
    pub intervals: Vec<(f64, f64)>,
    pub df_adjust: bool,
    pub shared_variance: bool,
    pub seed: u64,
    pub kernel_scale: KernelScale,
    pub interior_knots: usize,
    /// Run the smoothing-parameter search around the EM fits.
    pub select_lambda: bool,
    pub max_gcv_rounds: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::new(Approach::Penalized, LatentKind::Iid, 2)
    }
}

impl FitConfig {
    pub fn new(approach: Approach, latent: LatentKind, j: usize) -> Self {
        Self {
            approach,
            latent,
            j,
            max_iter: 200,
            tol: 1e-6,
            grid: GridSpec::for_approach(approach),
            init: None,
            intervals: Vec::new(),
            df_adjust: true,
            shared_variance: false,
            seed: 0,
            kernel_scale: KernelScale::Tied,
            interior_knots: crate::basis::DEFAULT_INTERIOR_KNOTS,
            select_lambda: true,
            max_gcv_rounds: 10,
        }
    }

    pub fn init_method(&self) -> InitMethod {
        match self.init {
            Some(m) => m,
            None if self.j == 2 => InitMethod::FunctionEstimate,
            None => InitMethod::SplineShifts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.j == 0 {
            return Err(Error::Config("J must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.grid.points == 0 || !(self.grid.lower > 0.0 && self.grid.upper >= self.grid.lower) {
            return Err(Error::Config("smoothing grid must be nonempty and positive".into()));
        }
        if let KernelScale::Fixed(u) = self.kernel_scale {
            if !(u > 0.0) {
                return Err(Error::Config("fixed U must be positive".into()));
            }
        }
        let init = self.init_method();
        if matches!(init, InitMethod::FunctionEstimate | InitMethod::ResidualBased) && self.j != 2 {
            return Err(Error::Config(
                "function-estimate and residual-based starts need J = 2".into(),
            ));
        }
        if init == InitMethod::ResidualBased && self.intervals.is_empty() {
            return Err(Error::Config("residual-based start needs subintervals".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_log_spaced_with_exact_ends() {
        let g = GridSpec::for_approach(Approach::Penalized).values(2.0);
        assert_eq!(g.len(), 25);
        assert!((g[0] - 2e-4).abs() < 1e-16);
        assert!((g[24] - 2e4).abs() < 1e-9);
        let r = g[1] / g[0];
        assert!(g.windows(2).all(|w| ((w[1] / w[0]) - r).abs() < 1e-12));
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut c = FitConfig::new(Approach::Bayesian, LatentKind::Markov, 2);
        c.kernel_scale = KernelScale::Fixed(0.4);
        c.intervals = vec![(1.0, 34.0)];
        let s = serde_json::to_string(&c).unwrap();
        let back: FitConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let partial: FitConfig = serde_json::from_str(r#"{"j": 3, "tol": 1e-5}"#).unwrap();
        assert_eq!(partial.j, 3);
        assert_eq!(partial.max_iter, 200);
        assert_eq!(partial.init_method(), InitMethod::SplineShifts);
        assert!(partial.validate().is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = FitConfig::default();
        c.j = 0;
        assert!(c.validate().is_err());
        let mut c = FitConfig::default();
        c.grid.points = 0;
        assert!(c.validate().is_err());
        let mut c = FitConfig::default();
        c.init = Some(InitMethod::ResidualBased);
        assert!(c.validate().is_err());
    }
}

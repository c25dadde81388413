//! Data ingestion, tie jittering and report emission.
//!
//! Every writer here is deterministic: floats are printed with Rust's
//! shortest round-trip representation and collections keep a fixed order,
//! so identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::init::pilot_smooth;
use crate::engine::{
    Approach, AicTable, FitConfig, FitResult, FitWarning, GridSpec, InitMethod, KernelScale, LatentKind,
};
use crate::error::{Error, Result};
use crate::louis::InformationMatrix;
use crate::model::{LatentModel, NoiseModel, ObservedSeries};
use crate::sim::{SimDesign, SimStudyReport};

/// Redraws allowed before tied abscissae are declared unresolvable.
pub const MAX_JITTER_DRAWS: usize = 10;

/// Reads `(x, y)` pairs from a two-column delimited text file.
pub fn load_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    parse_csv(&fs::read_to_string(path)?)
}

/// Parses comma, semicolon, tab or space separated rows. A first row whose
/// leading cells are not numeric is taken as a header. Extra columns are
/// ignored. Line numbers in errors are 1-based.
pub fn parse_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    let mut first = true;
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line
            .split([',', ';', '\t', ' '])
            .filter(|c| !c.is_empty())
            .collect();
        let parsed: Vec<Option<f64>> = cells.iter().take(2).map(|c| c.trim_matches('"').parse().ok()).collect();
        if first && parsed.iter().all(Option::is_none) {
            first = false;
            continue;
        }
        first = false;
        if cells.len() < 2 {
            return Err(Error::Parse {
                line: k + 1,
                message: format!("expected two columns, found {}", cells.len()),
            });
        }
        match (parsed[0], parsed[1]) {
            (Some(x), Some(y)) if x.is_finite() && y.is_finite() => out.push((x, y)),
            _ => {
                return Err(Error::Parse {
                    line: k + 1,
                    message: format!("non-numeric value in {line:?}"),
                })
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyFile);
    }
    Ok(out)
}

/// Sorts by `x` and separates tied abscissae with uniform noise on
/// `(−g/100, g/100)`, `g` the smallest positive gap.
pub fn jitter_duplicates(pairs: &[(f64, f64)], seed: u64) -> Result<ObservedSeries> {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let tied: Vec<bool> = (0..sorted.len())
        .map(|i| {
            (i > 0 && sorted[i - 1].0 == sorted[i].0) || (i + 1 < sorted.len() && sorted[i + 1].0 == sorted[i].0)
        })
        .collect();
    let split = |v: Vec<(f64, f64)>| -> Result<ObservedSeries> {
        let (x, y) = v.into_iter().unzip();
        ObservedSeries::new(x, y)
    };
    if !tied.contains(&true) {
        return split(sorted);
    }
    let gap = sorted
        .windows(2)
        .map(|w| w[1].0 - w[0].0)
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !gap.is_finite() {
        return Err(Error::UnresolvableTies);
    }
    let half = gap / 100.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_JITTER_DRAWS {
        let mut v: Vec<(f64, f64)> = sorted
            .iter()
            .zip(&tied)
            .map(|(&(x, y), &t)| if t { (x + rng.random_range(-half..half), y) } else { (x, y) })
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        if v.windows(2).all(|w| w[0].0 < w[1].0) {
            return split(v);
        }
    }
    Err(Error::UnresolvableTies)
}

/// `U = Σ(y − ȳ)²/(n − 1) − Σ(y − f̂)²/(n − tr H)` with `f̂` a unit-weight
/// smoothing spline chosen by GCV.
pub fn fixed_u(series: &ObservedSeries, interior_knots: usize) -> Result<f64> {
    if series.len() < 10 {
        return Err(Error::TooFewPoints {
            got: series.len(),
            need: 10,
        });
    }
    let pilot = pilot_smooth(series, interior_knots, &GridSpec::for_approach(Approach::Penalized))?;
    let u = series.y_variance() - pilot.variance;
    if !(u > 0.0) {
        return Err(Error::NonPositiveU(u));
    }
    Ok(u)
}

/// Configuration for the accident-run analysis: iid labels, one variance
/// per regime, spline-shift starts, and for the Bayesian path a fixed `U`
/// with length scales searched over `[0.01, 1]·range(x)`.
pub fn motorcycle_config(series: &ObservedSeries, approach: Approach, j: usize) -> Result<FitConfig> {
    let mut c = FitConfig::new(approach, LatentKind::Iid, j);
    c.init = Some(InitMethod::SplineShifts);
    if approach == Approach::Bayesian {
        c.kernel_scale = KernelScale::Fixed(fixed_u(series, c.interior_knots)?);
        c.grid = data_kernel_grid();
    }
    Ok(c)
}

/// Length-scale grid `[0.01, 1]·range(x)` used for Bayesian fits to data.
pub fn data_kernel_grid() -> GridSpec {
    GridSpec {
        points: 25,
        lower: 0.01,
        upper: 1.0,
    }
}

/// One row of the per-regime summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub regime: usize,
    pub variance: f64,
    /// Mixing proportion (iid) or stationary probability (Markov).
    pub proportion: f64,
    pub proportion_se: Option<f64>,
    /// `λ_j` for splines, `s_j` for kernels.
    pub smoothing: f64,
    pub effective_df: f64,
    pub mass: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicSummary {
    pub aic: f64,
    pub loglik: f64,
    pub effective_df: f64,
    pub n_variances: usize,
    pub n_latent: usize,
}

/// Everything written to `result.json` for one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config: FitConfig,
    pub n: usize,
    pub j: usize,
    pub converged: bool,
    pub iterations: usize,
    pub gcv_rounds: usize,
    pub criterion: f64,
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub latent: LatentModel,
    pub noise: NoiseModel,
    pub regimes: Vec<RegimeRow>,
    pub aic: AicSummary,
    pub std_errors: Option<InformationMatrix>,
    pub std_error_failure: Option<String>,
    pub warnings: Vec<FitWarning>,
    pub fitted: Vec<Vec<f64>>,
}

fn stationary(l: &LatentModel) -> Vec<f64> {
    match l {
        LatentModel::Iid { probs } => probs.clone(),
        LatentModel::Markov { transition, .. } if transition.len() == 2 => {
            let (a12, a21) = (transition[0][1], transition[1][0]);
            let s = a12 + a21;
            if s > 0.0 {
                vec![a21 / s, a12 / s]
            } else {
                vec![0.5, 0.5]
            }
        }
        LatentModel::Markov { transition, .. } => {
            // power iteration from uniform
            let j = transition.len();
            let mut p = vec![1.0 / j as f64; j];
            for _ in 0..10_000 {
                let q: Vec<f64> = (0..j).map(|c| (0..j).map(|r| p[r] * transition[r][c]).sum()).collect();
                let done = q.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-14);
                p = q;
                if done {
                    break;
                }
            }
            p
        }
    }
}

/// Standard error of each iid proportion: the free `p_1..p_{J−1}` from the
/// covariance diagonal, `p_J = 1 − Σ` from the total of the covariance.
fn proportion_ses(info: &InformationMatrix, latent: &LatentModel) -> Vec<Option<f64>> {
    match latent {
        LatentModel::Iid { probs } => {
            let j = probs.len();
            let mut out: Vec<Option<f64>> = info.std_errors.iter().map(|s| Some(*s)).collect();
            let total: f64 = info.covariance.iter().flatten().sum();
            out.push((total >= 0.0).then(|| total.sqrt()));
            out.truncate(j);
            out
        }
        LatentModel::Markov { .. } => vec![None; latent.n_states()],
    }
}

impl FitReport {
    pub fn new(
        series: &ObservedSeries,
        config: &FitConfig,
        fit: &FitResult,
        stderr: std::result::Result<InformationMatrix, String>,
    ) -> Self {
        let j = fit.theta.n_regimes();
        let props = stationary(&fit.theta.latent);
        let (std_errors, std_error_failure) = match stderr {
            Ok(i) => (Some(i), None),
            Err(e) => (None, Some(e)),
        };
        let ses = std_errors
            .as_ref()
            .map(|i| proportion_ses(i, &fit.theta.latent))
            .unwrap_or_else(|| vec![None; j]);
        let mass = fit.resp.mass();
        let smoothing = fit.theta.funcs.lambdas();
        let regimes = (0..j)
            .map(|k| RegimeRow {
                regime: k + 1,
                variance: fit.theta.noise.variances[k],
                proportion: props[k],
                proportion_se: ses[k],
                smoothing: smoothing[k],
                effective_df: fit.hat_traces[k],
                mass: mass[k],
                degenerate: mass[k] < crate::engine::em::DEGENERATE_MASS,
            })
            .collect();
        let n_variances = if fit.theta.noise.shared { 1 } else { j };
        Self {
            config: config.clone(),
            n: series.len(),
            j,
            converged: fit.converged,
            iterations: fit.iterations,
            gcv_rounds: fit.gcv_rounds,
            criterion: fit.criterion(),
            loglik: fit.loglik,
            trace: fit.trace.clone(),
            latent: fit.theta.latent.clone(),
            noise: fit.theta.noise.clone(),
            regimes,
            aic: AicSummary {
                aic: fit.aic(),
                loglik: fit.loglik,
                effective_df: fit.hat_traces.iter().sum(),
                n_variances,
                n_latent: j - 1,
            },
            std_errors,
            std_error_failure,
            warnings: fit.warnings.clone(),
            fitted: (0..j).map(|k| fit.theta.funcs.fitted(k).iter().copied().collect()).collect(),
        }
    }

    /// Fixed-width table with one row per regime: variance, proportion
    /// (s.e.) and smoothing parameter.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let approach = match self.config.approach {
            Approach::Penalized => "penalized",
            Approach::Bayesian => "bayesian",
        };
        let _ = writeln!(s, "approach {approach}, J = {}, n = {}", self.j, self.n);
        let _ = writeln!(
            s,
            "converged {} after {} iterations, {} smoothing rounds",
            self.converged, self.iterations, self.gcv_rounds
        );
        let _ = writeln!(s, "log-likelihood {:.6}, criterion {:.6}, AIC {:.6}", self.loglik, self.criterion, self.aic.aic);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<8} {:>14} {:>20} {:>14} {:>10}", "regime", "sigma2", "proportion (s.e.)", "smoothing", "status");
        for r in &self.regimes {
            let p = match r.proportion_se {
                Some(se) => format!("{:.3} ({:.3})", r.proportion, se),
                None => format!("{:.3}", r.proportion),
            };
            let status = if r.degenerate { "degenerate" } else { "ok" };
            let _ = writeln!(
                s,
                "{:<8} {:>14.6} {:>20} {:>14.6} {:>10}",
                r.regime, r.variance, p, r.smoothing, status
            );
        }
        if let Some(info) = &self.std_errors {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<8} {:>12} {:>12}", "param", "estimate", "s.e.");
            for k in 0..info.names.len() {
                let _ = writeln!(s, "{:<8} {:>12.6} {:>12.6}", info.names[k], info.estimates[k], info.std_errors[k]);
            }
        } else if let Some(e) = &self.std_error_failure {
            let _ = writeln!(s);
            let _ = writeln!(s, "standard errors unavailable: {e}");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {}", serde_json::to_string(w).unwrap_or_default());
        }
        s
    }
}

/// `x, y, f_1..f_J, state, p_1..p_J`, one row per observation, with the
/// 1-based most probable state.
pub fn plot_data_csv(series: &ObservedSeries, fit: &FitResult) -> String {
    let j = fit.theta.n_regimes();
    let mut s = String::from("x,y");
    for k in 1..=j {
        let _ = write!(s, ",f_{k}");
    }
    s.push_str(",state");
    for k in 1..=j {
        let _ = write!(s, ",p_{k}");
    }
    s.push('\n');
    for i in 0..series.len() {
        let _ = write!(s, "{},{}", series.x()[i], series.y()[i]);
        for k in 0..j {
            let _ = write!(s, ",{}", fit.theta.funcs.fitted(k)[i]);
        }
        let row = fit.resp.probs.row(i);
        let state = (0..j).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        let _ = write!(s, ",{}", state + 1);
        for k in 0..j {
            let _ = write!(s, ",{}", row[k]);
        }
        s.push('\n');
    }
    s
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::write(dir.join(name), body)?;
    Ok(())
}

/// Writes `result.json`, `plot_data.csv` and `summary.txt` for one fit.
pub fn emit_fit(dir: &Path, series: &ObservedSeries, report: &FitReport, fit: &FitResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(dir, "result.json", &(serde_json::to_string_pretty(report)? + "\n"))?;
    write_file(dir, "plot_data.csv", &plot_data_csv(series, fit))?;
    write_file(dir, "summary.txt", &report.summary())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectReport {
    pub table: AicTable,
    pub best: Option<FitReport>,
}

impl SelectReport {
    pub fn summary(&self) -> String {
        let mut s = String::from("J          AIC       loglik   effective_df\n");
        for e in &self.table.entries {
            match (e.aic, e.loglik, e.effective_df) {
                (Some(a), Some(l), Some(d)) => {
                    let mark = if Some(e.j) == self.table.best_j { " *" } else { "" };
                    let _ = writeln!(s, "{:<3} {:>12.4} {:>12.4} {:>14.4}{mark}", e.j, a, l, d);
                }
                _ => {
                    let _ = writeln!(s, "{:<3} failed: {}", e.j, e.error.as_deref().unwrap_or("unknown"));
                }
            }
        }
        if let Some(b) = &self.best {
            s.push('\n');
            s.push_str(&b.summary());
        }
        s
    }
}

/// Writes the AIC table and, when some `J` succeeded, the best fit's files.
pub fn emit_select(
    dir: &Path,
    series: &ObservedSeries,
    report: &SelectReport,
    best: Option<&FitResult>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(dir, "result.json", &(serde_json::to_string_pretty(report)? + "\n"))?;
    if let Some(fit) = best {
        write_file(dir, "plot_data.csv", &plot_data_csv(series, fit))?;
    }
    write_file(dir, "summary.txt", &report.summary())
}

/// Writes `report.json`, the summary CSV tables and `summary.txt`.
pub fn emit_study(dir: &Path, report: &SimStudyReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(dir, "report.json", &(report.to_json()? + "\n"))?;
    for (name, body) in report.csv_tables() {
        write_file(dir, &name, &body)?;
    }
    write_file(dir, "summary.txt", &study_summary(report))
}

pub fn study_summary(r: &SimStudyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "design {}: {} of {} replicates fitted",
        r.design, r.completed, r.requested
    );
    let _ = writeln!(s, "sigma2 mean {:.4e} (sd {:.4e})", r.variance_mean, r.variance_sd);
    let _ = writeln!(s, "final EMSE below initial in {} of {} replicates", r.improved, r.completed);
    let _ = writeln!(
        s,
        "\n{:<6} {:>7} {:>9} {:>9} {:>9} {:>8} {:>8}",
        "param", "truth", "mean", "sd", "mean se", "cov90", "cov95"
    );
    for p in &r.latent {
        let opt = |v: Option<f64>, w: usize| v.map_or(format!("{:>w$}", "-"), |v| format!("{v:>w$.3}"));
        let _ = writeln!(
            s,
            "{:<6} {:>7.3} {:>9.4} {:>9.4} {} {} {}",
            p.name,
            p.truth,
            p.mean,
            p.sd,
            opt(p.mean_se, 9),
            opt(p.coverage90, 8),
            opt(p.coverage95, 8)
        );
    }
    let _ = writeln!(
        s,
        "\nreplicates with p(z=1|y) > 0.2 when z=2: {}",
        SimStudyReport::replicates_with(&r.one_given_two)
    );
    let _ = writeln!(
        s,
        "replicates with p(z=2|y) > 0.2 when z=1: {}",
        SimStudyReport::replicates_with(&r.two_given_one)
    );
    for (k, f) in &r.failures {
        let _ = writeln!(s, "replicate {k} failed: {f}");
    }
    s
}

/// Commands understood by the front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Fit,
    Simulate,
    SelectJ,
    Stderr,
}

/// A complete run description, loadable from JSON. Flags given on the
/// command line override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<String>,
    pub out: String,
    pub fit: FitConfig,
    /// Simulation design number (1, 2 or 3).
    pub design: Option<u8>,
    pub sim: Option<SimDesign>,
    pub replicates: usize,
    /// Inclusive range of `J` for `select-j`.
    pub select_j: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Fit,
            input: None,
            out: "out".into(),
            fit: FitConfig::default(),
            design: None,
            sim: None,
            replicates: 50,
            select_j: None,
            seed: 2024,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Input paths must exist for data-driven commands.
    pub fn validate(&self) -> Result<()> {
        match self.command {
            Command::Fit | Command::SelectJ | Command::Stderr => match &self.input {
                Some(p) if Path::new(p).is_file() => Ok(()),
                Some(p) => Err(Error::Config(format!("input file {p} does not exist"))),
                None => Err(Error::Config("an input file is required".into())),
            },
            Command::Simulate => {
                if self.design.is_none() && self.sim.is_none() {
                    return Err(Error::Config("simulate needs a design".into()));
                }
                if self.replicates < 2 {
                    return Err(Error::Config("at least two replicates are required".into()));
                }
                Ok(())
            }
        }
    }
}

//! Replicated simulation studies with two regimes drawn from
//! Gaussian-process priors.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{kernel_gram, tied_variance_scale};
use crate::engine::{initial_theta, FitConfig, FitResult, InitMethod};
use crate::error::{Error, Result};
use crate::louis::standard_errors;
use crate::model::{LatentModel, ObservedSeries, Theta};

/// Posterior threshold for counting a point as misclassified.
pub const MISCLASSIFICATION_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub id: u8,
    pub x: Vec<f64>,
    /// Length scales of the two true regime functions.
    pub length_scales: [f64; 2],
    pub noise_variance: f64,
    pub latent: LatentModel,
    pub seed: u64,
    /// Redraw the pair of truths until the two curves do not cross on `x`.
    #[serde(default = "default_true")]
    pub ordered_truth: bool,
}

fn default_true() -> bool {
    true
}

/// Attempts allowed when drawing a non-crossing pair of truths.
pub const MAX_TRUTH_DRAWS: usize = 10_000;

impl SimDesign {
    /// The three standard designs: iid with `p_1 = 0.7` (1), and Markov chains
    /// with `(a_12, a_21) = (0.3, 0.4)` (2) and `(0.1, 0.2)` (3).
    pub fn standard(id: u8, seed: u64) -> Result<Self> {
        let latent = match id {
            1 => LatentModel::Iid {
                probs: vec![0.7, 0.3],
            },
            2 => markov(0.3, 0.4),
            3 => markov(0.1, 0.2),
            _ => return Err(Error::Config(format!("unknown simulation design {id}"))),
        };
        Ok(Self {
            id,
            x: (0..199).map(|i| 1.0 + 0.5 * i as f64).collect(),
            length_scales: [28.0, 38.0],
            noise_variance: 5e-5,
            latent,
            seed,
            ordered_truth: true,
        })
    }

    /// The fit configuration used for this design: shared variance, and
    /// for design 3 the residual-based start on three subintervals.
    pub fn default_config(&self, approach: crate::engine::Approach) -> FitConfig {
        let kind = if self.latent.is_markov() {
            crate::engine::LatentKind::Markov
        } else {
            crate::engine::LatentKind::Iid
        };
        let mut c = FitConfig::new(approach, kind, 2);
        c.shared_variance = true;
        c.seed = self.seed;
        if self.id == 3 {
            c.init = Some(InitMethod::ResidualBased);
            c.intervals = vec![(1.0, 34.0), (34.5, 67.5), (68.0, 100.0)];
        }
        c
    }

    /// Names and true values of the free latent parameters.
    pub fn latent_truth(&self) -> Vec<(String, f64)> {
        free_latent(&self.latent)
    }
}

fn markov(a12: f64, a21: f64) -> LatentModel {
    LatentModel::Markov {
        initial: vec![0.5, 0.5],
        transition: vec![vec![1.0 - a12, a12], vec![a21, 1.0 - a21]],
    }
}

fn free_latent(l: &LatentModel) -> Vec<(String, f64)> {
    match l {
        LatentModel::Iid { probs } => (0..probs.len() - 1)
            .map(|k| (format!("p{}", k + 1), probs[k]))
            .collect(),
        LatentModel::Markov { transition, .. } => {
            vec![("a12".into(), transition[0][1]), ("a21".into(), transition[1][0])]
        }
    }
}

fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// One draw of each true function from its prior, `U_j = 1/(s_j √(2π))`.
/// With `ordered_truth` the pair is redrawn from the same stream until
/// `f_1 − f_2` keeps one sign on `x`.
pub fn sample_truth(design: &SimDesign, seed: u64) -> Result<[DVector<f64>; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = |s: f64| -> Result<nalgebra::DMatrix<f64>> {
        let a = kernel_gram(&design.x, tied_variance_scale(s), s)?.regularized();
        Ok(a.cholesky()
            .ok_or_else(|| Error::InvariantViolation("prior covariance not positive definite".into()))?
            .unpack())
    };
    let l1 = factor(design.length_scales[0])?;
    let l2 = factor(design.length_scales[1])?;
    let n = design.x.len();
    for _ in 0..MAX_TRUTH_DRAWS {
        let z1 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z2 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let pair = [&l1 * z1, &l2 * z2];
        if !design.ordered_truth || !curves_cross(&pair[0], &pair[1]) {
            return Ok(pair);
        }
    }
    Err(Error::InvariantViolation(format!(
        "no non-crossing truth pair in {MAX_TRUTH_DRAWS} draws"
    )))
}

/// Whether `a − b` changes sign (or vanishes) somewhere.
pub fn curves_cross(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    let d = a - b;
    let first = d[0].signum();
    d.iter().any(|v| v.signum() != first || *v == 0.0)
}

/// Latent path from the design's process, then `y_i = f_{z_i}(x_i) + σ ε_i`.
/// States are 0-based.
pub fn generate_replicate(
    design: &SimDesign,
    truths: &[DVector<f64>; 2],
    rng: &mut impl Rng,
) -> Result<(ObservedSeries, Vec<usize>)> {
    let n = design.x.len();
    let pick = |rng: &mut dyn rand::RngCore, p: &[f64]| -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, v) in p.iter().enumerate() {
            acc += v;
            if u < acc {
                return k;
            }
        }
        p.len() - 1
    };
    let mut z = Vec::with_capacity(n);
    match &design.latent {
        LatentModel::Iid { probs } => {
            for _ in 0..n {
                z.push(pick(rng, probs));
            }
        }
        LatentModel::Markov {
            initial,
            transition,
        } => {
            let mut s = pick(rng, initial);
            z.push(s);
            for _ in 1..n {
                s = pick(rng, &transition[s]);
                z.push(s);
            }
        }
    }
    let sd = design.noise_variance.sqrt();
    let y: Vec<f64> = (0..n)
        .map(|i| truths[z[i]][i] + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok((ObservedSeries::new(design.x.clone(), y)?, z))
}

fn squared_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Label permutation of a two-regime `θ` minimizing the summed squared error
/// against the truth.
pub fn align_to_truth(theta: &Theta, truths: &[DVector<f64>; 2]) -> [usize; 2] {
    let f = theta.funcs.all_fitted();
    let keep = squared_error(&f[0], &truths[0]) + squared_error(&f[1], &truths[1]);
    let swap = squared_error(&f[1], &truths[0]) + squared_error(&f[0], &truths[1]);
    if swap < keep {
        [1, 0]
    } else {
        [0, 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misclassification {
    pub replicate: usize,
    pub index: usize,
    pub x: f64,
    /// True state, 1-based.
    pub true_state: usize,
    /// Posterior probability of the wrong state.
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub variances: Vec<f64>,
    pub smoothing: Vec<f64>,
    pub latent: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub ise_initial: f64,
    pub ise_final: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    pub mean_se: Option<f64>,
    /// Percent of replicates whose interval covered the truth.
    pub coverage90: Option<f64>,
    pub coverage95: Option<f64>,
    pub se_available: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStudyReport {
    pub design: u8,
    pub requested: usize,
    pub completed: usize,
    pub failures: Vec<(usize, String)>,
    pub x: Vec<f64>,
    pub truth: [Vec<f64>; 2],
    /// Per regime, per point.
    pub emse_initial: [Vec<f64>; 2],
    pub emse_final: [Vec<f64>; 2],
    /// Replicates whose final estimates have smaller summed EMSE than the start.
    pub improved: usize,
    pub variance_mean: f64,
    pub variance_sd: f64,
    pub latent: Vec<ParameterSummary>,
    /// Estimated `P(z_i = 1 | y) > 0.2` although `z_i = 2`.
    pub one_given_two: Vec<Misclassification>,
    /// Estimated `P(z_i = 2 | y) > 0.2` although `z_i = 1`.
    pub two_given_one: Vec<Misclassification>,
    pub replicates: Vec<ReplicateRecord>,
}

impl SimStudyReport {
    /// Distinct replicates with at least one event in `events`.
    pub fn replicates_with(events: &[Misclassification]) -> usize {
        let mut r: Vec<usize> = events.iter().map(|e| e.replicate).collect();
        r.dedup();
        r.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat CSV tables: `(file name, contents)`.
    pub fn csv_tables(&self) -> Vec<(String, String)> {
        let mut emse = String::from("x,truth1,truth2,emse_initial1,emse_initial2,emse_final1,emse_final2\n");
        for i in 0..self.x.len() {
            emse.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.x[i],
                self.truth[0][i],
                self.truth[1][i],
                self.emse_initial[0][i],
                self.emse_initial[1][i],
                self.emse_final[0][i],
                self.emse_final[1][i]
            ));
        }
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut params = String::from("parameter,truth,mean,sd,mean_se,coverage90,coverage95\n");
        params.push_str(&format!("sigma2,,{},{},,,\n", self.variance_mean, self.variance_sd));
        for p in &self.latent {
            params.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.name,
                p.truth,
                p.mean,
                p.sd,
                opt(p.mean_se),
                opt(p.coverage90),
                opt(p.coverage95)
            ));
        }
        let mut mis = String::from("kind,replicate,index,x,true_state,posterior\n");
        for (kind, list) in [("1|2", &self.one_given_two), ("2|1", &self.two_given_one)] {
            for m in list {
                mis.push_str(&format!(
                    "{kind},{},{},{},{},{}\n",
                    m.replicate, m.index, m.x, m.true_state, m.posterior
                ));
            }
        }
        let mut reps = String::from("replicate,iterations,converged,variance,latent,std_errors,ise_initial,ise_final\n");
        for r in &self.replicates {
            let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
            reps.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.index,
                r.iterations,
                r.converged,
                join(&r.variances),
                join(&r.latent),
                r.std_errors.as_deref().map_or(String::new(), join),
                r.ise_initial,
                r.ise_final
            ));
        }
        vec![
            ("emse.csv".into(), emse),
            ("parameters.csv".into(), params),
            ("misclassification.csv".into(), mis),
            ("replicates.csv".into(), reps),
        ]
    }
}

struct Outcome {
    record: ReplicateRecord,
    initial: [DVector<f64>; 2],
    fitted: [DVector<f64>; 2],
    one_given_two: Vec<Misclassification>,
    two_given_one: Vec<Misclassification>,
}

fn run_replicate(
    design: &SimDesign,
    config: &FitConfig,
    truths: &[DVector<f64>; 2],
    index: usize,
) -> Result<Outcome> {
    let mut rng = replicate_rng(design.seed, index as u64);
    let (series, z) = generate_replicate(design, truths, &mut rng)?;
    let init = initial_theta(&series, config)?;
    let ip = align_to_truth(&init, truths);
    let init = init.permuted(&ip);
    let fitted: FitResult = crate::engine::fit_from(&series, config, init.clone())?;
    let perm = align_to_truth(&fitted.theta, truths);
    let theta = fitted.theta.permuted(&perm);
    let probs = fitted.resp.probs.select_columns(&perm);
    let se = standard_errors(&series, &theta).ok();
    let latent = match &se {
        Some(info) => info.estimates.clone(),
        None => free_latent(&theta.latent).into_iter().map(|(_, v)| v).collect(),
    };
    let ise = |t: &Theta| squared_error(t.funcs.fitted(0), &truths[0]) + squared_error(t.funcs.fitted(1), &truths[1]);
    let mut one_given_two = Vec::new();
    let mut two_given_one = Vec::new();
    for i in 0..series.len() {
        let wrong = 1 - z[i];
        let p = probs[(i, wrong)];
        if p > MISCLASSIFICATION_THRESHOLD {
            let m = Misclassification {
                replicate: index,
                index: i,
                x: design.x[i],
                true_state: z[i] + 1,
                posterior: p,
            };
            if z[i] == 1 {
                one_given_two.push(m);
            } else {
                two_given_one.push(m);
            }
        }
    }
    Ok(Outcome {
        record: ReplicateRecord {
            index,
            variances: theta.noise.variances.clone(),
            smoothing: theta.funcs.lambdas(),
            latent,
            std_errors: se.map(|s| s.std_errors),
            ise_initial: ise(&init),
            ise_final: ise(&theta),
            iterations: fitted.iterations,
            converged: fitted.converged,
        },
        initial: [init.funcs.fitted(0).clone(), init.funcs.fitted(1).clone()],
        fitted: [theta.funcs.fitted(0).clone(), theta.funcs.fitted(1).clone()],
        one_given_two,
        two_given_one,
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Fits `replicates` data sets drawn around one fixed truth and summarizes.
pub fn run_study(design: &SimDesign, config: &FitConfig, replicates: usize) -> Result<SimStudyReport> {
    if replicates < 2 {
        return Err(Error::Config("a study needs at least two replicates".into()));
    }
    if config.j != 2 {
        return Err(Error::Config("simulation studies use J = 2".into()));
    }
    let truths = sample_truth(design, design.seed)?;
    let results: Vec<Result<Outcome>> = (0..replicates)
        .into_par_iter()
        .map(|r| run_replicate(design, config, &truths, r))
        .collect();
    let n = design.x.len();
    let mut emse_initial = [vec![0.0; n], vec![0.0; n]];
    let mut emse_final = [vec![0.0; n], vec![0.0; n]];
    let mut failures = Vec::new();
    let mut outcomes = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    let s = outcomes.len();
    if s == 0 {
        return Err(Error::Config("every replicate failed".into()));
    }
    for o in &outcomes {
        for k in 0..2 {
            for i in 0..n {
                emse_initial[k][i] += (o.initial[k][i] - truths[k][i]).powi(2) / s as f64;
                emse_final[k][i] += (o.fitted[k][i] - truths[k][i]).powi(2) / s as f64;
            }
        }
    }
    let improved = outcomes
        .iter()
        .filter(|o| o.record.ise_final < o.record.ise_initial)
        .count();
    let variances: Vec<f64> = outcomes.iter().map(|o| o.record.variances[0]).collect();
    let (variance_mean, variance_sd) = mean_sd(&variances);
    let normal = Normal::standard();
    let z90 = normal.inverse_cdf(0.95);
    let z95 = normal.inverse_cdf(0.975);
    let latent = design
        .latent_truth()
        .into_iter()
        .enumerate()
        .map(|(k, (name, truth))| {
            let est: Vec<f64> = outcomes.iter().map(|o| o.record.latent[k]).collect();
            let (mean, sd) = mean_sd(&est);
            let with_se: Vec<(f64, f64)> = outcomes
                .iter()
                .filter_map(|o| o.record.std_errors.as_ref().map(|se| (o.record.latent[k], se[k])))
                .collect();
            let m = with_se.len();
            let cover = |z: f64| {
                (m > 0).then(|| {
                    100.0 * with_se.iter().filter(|(e, se)| (e - truth).abs() <= z * se).count() as f64 / m as f64
                })
            };
            ParameterSummary {
                name,
                truth,
                mean,
                sd,
                mean_se: (m > 0).then(|| with_se.iter().map(|p| p.1).sum::<f64>() / m as f64),
                coverage90: cover(z90),
                coverage95: cover(z95),
                se_available: m,
            }
        })
        .collect();
    let mut one_given_two = Vec::new();
    let mut two_given_one = Vec::new();
    let mut records = Vec::with_capacity(s);
    for o in outcomes {
        one_given_two.extend(o.one_given_two);
        two_given_one.extend(o.two_given_one);
        records.push(o.record);
    }
    Ok(SimStudyReport {
        design: design.id,
        requested: replicates,
        completed: s,
        failures,
        x: design.x.clone(),
        truth: [truths[0].as_slice().to_vec(), truths[1].as_slice().to_vec()],
        emse_initial,
        emse_final,
        improved,
        variance_mean,
        variance_sd,
        latent,
        one_given_two,
        two_given_one,
        replicates: records,
    })
}

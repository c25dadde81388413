use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use switchreg::engine::{fit, select_j_aic, Approach, GridSpec, InitMethod, KernelScale, LatentKind};
use switchreg::io::{
    data_kernel_grid, emit_fit, emit_select, emit_study, fixed_u, jitter_duplicates, load_csv, Command, FitReport, RunConfig,
    SelectReport,
};
use switchreg::louis::standard_errors;
use switchreg::model::ObservedSeries;
use switchreg::sim::{run_study, SimDesign};
use switchreg::Error;

const EXIT_INPUT: u8 = 2;
const EXIT_FIT: u8 = 3;

#[derive(Parser)]
#[command(name = "switchreg", version, about = "Switching nonparametric regression fits and simulations")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit one J to a two-column data file (or sweep J with --select-j).
    Fit(FitArgs),
    /// Fit every J in a range and choose by AIC.
    SelectJ(FitArgs),
    /// Fit and write only the latent-parameter standard errors.
    Stderr(FitArgs),
    /// Run a replicated simulation study.
    Simulate(SimArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ApproachArg {
    Penalized,
    Bayes,
}

#[derive(Clone, Copy, ValueEnum)]
enum LatentArg {
    Iid,
    Markov,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    FunctionEstimate,
    ResidualBased,
    SplineShifts,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    approach: Option<ApproachArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Grid bounds are relative: λ multiples of the design scale, or
    /// fractions of range(x) for kernel length scales.
    #[arg(long)]
    grid_lower: Option<f64>,
    #[arg(long)]
    grid_upper: Option<f64>,
    #[arg(long)]
    grid_points: Option<usize>,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    latent: Option<LatentArg>,
    #[arg(long)]
    j: Option<usize>,
    /// Inclusive range such as `2..6`.
    #[arg(long)]
    select_j: Option<String>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Residual-based subintervals, e.g. `1:34,34.5:67.5,68:100`.
    #[arg(long)]
    intervals: Option<String>,
    #[arg(long)]
    shared_variance: bool,
    #[arg(long)]
    no_df_adjust: bool,
    /// Kernel variance: `auto` (fixed from a pilot spline), `tied`, or a number.
    #[arg(long)]
    kernel_u: Option<String>,
}

#[derive(Args, Clone)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    design: Option<u8>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Keep the first prior draw even if the two true curves cross.
    #[arg(long)]
    allow_crossing: bool,
}

fn input_error(msg: impl Into<String>) -> Failure {
    Failure::Input(msg.into())
}

enum Failure {
    Input(String),
    Fit(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. }
            | Error::EmptyFile
            | Error::UnresolvableTies
            | Error::Config(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::NonPositiveU(_)
            | Error::TooFewPoints { .. } => Failure::Input(e.to_string()),
            other => Failure::Fit(other.to_string()),
        }
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), Failure> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| input_error(format!("range {s:?} must look like MIN..MAX")))?;
    let b = b.trim_start_matches('=');
    let a = a.trim().parse().map_err(|_| input_error(format!("bad range start in {s:?}")))?;
    let b = b.trim().parse().map_err(|_| input_error(format!("bad range end in {s:?}")))?;
    Ok((a, b))
}

fn parse_intervals(s: &str) -> Result<Vec<(f64, f64)>, Failure> {
    s.split(',')
        .map(|part| {
            let (a, b) = part
                .split_once(':')
                .ok_or_else(|| input_error(format!("interval {part:?} must look like A:B")))?;
            let a = a.trim().parse().map_err(|_| input_error(format!("bad interval {part:?}")))?;
            let b = b.trim().parse().map_err(|_| input_error(format!("bad interval {part:?}")))?;
            Ok((a, b))
        })
        .collect()
}

fn base_config(common: &Common, command: Command) -> Result<RunConfig, Failure> {
    let mut rc = match &common.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    rc.command = command;
    if let Some(a) = common.approach {
        let approach = match a {
            ApproachArg::Penalized => Approach::Penalized,
            ApproachArg::Bayes => Approach::Bayesian,
        };
        if approach != rc.fit.approach {
            rc.fit.grid = GridSpec::for_approach(approach);
        }
        rc.fit.approach = approach;
    }
    if let Some(s) = common.seed {
        rc.seed = s;
    }
    rc.fit.seed = rc.seed;
    if let Some(o) = &common.out {
        rc.out = o.display().to_string();
    }
    if let Some(v) = common.max_iter {
        rc.fit.max_iter = v;
    }
    if let Some(v) = common.tol {
        rc.fit.tol = v;
    }
    if let Some(v) = common.grid_lower {
        rc.fit.grid.lower = v;
    }
    if let Some(v) = common.grid_upper {
        rc.fit.grid.upper = v;
    }
    if let Some(v) = common.grid_points {
        rc.fit.grid.points = v;
    }
    Ok(rc)
}

fn fit_config(args: &FitArgs, command: Command) -> Result<RunConfig, Failure> {
    let mut rc = base_config(&args.common, command)?;
    if let Some(p) = &args.input {
        rc.input = Some(p.display().to_string());
    }
    if let Some(l) = args.latent {
        rc.fit.latent = match l {
            LatentArg::Iid => LatentKind::Iid,
            LatentArg::Markov => LatentKind::Markov,
        };
    }
    if let Some(j) = args.j {
        rc.fit.j = j;
    }
    if let Some(r) = &args.select_j {
        rc.select_j = Some(parse_range(r)?);
        if command == Command::Fit {
            rc.command = Command::SelectJ;
        }
    }
    if let Some(i) = args.init {
        rc.fit.init = Some(match i {
            InitArg::FunctionEstimate => InitMethod::FunctionEstimate,
            InitArg::ResidualBased => InitMethod::ResidualBased,
            InitArg::SplineShifts => InitMethod::SplineShifts,
        });
    }
    if let Some(s) = &args.intervals {
        rc.fit.intervals = parse_intervals(s)?;
    }
    if args.shared_variance {
        rc.fit.shared_variance = true;
    }
    if args.no_df_adjust {
        rc.fit.df_adjust = false;
    }
    rc.validate()?;
    if rc.command == Command::SelectJ && rc.select_j.is_none() {
        return Err(input_error("select-j needs --select-j MIN..MAX"));
    }
    Ok(rc)
}

fn kernel_scale(arg: Option<&str>, series: &ObservedSeries, rc: &RunConfig) -> Result<KernelScale, Failure> {
    match arg {
        None if rc.fit.kernel_scale != KernelScale::Tied || rc.fit.approach == Approach::Penalized => {
            Ok(rc.fit.kernel_scale)
        }
        None | Some("auto") => Ok(KernelScale::Fixed(fixed_u(series, rc.fit.interior_knots)?)),
        Some("tied") => Ok(KernelScale::Tied),
        Some(v) => v
            .parse()
            .map(KernelScale::Fixed)
            .map_err(|_| input_error(format!("--kernel-u expects auto, tied or a number, got {v:?}"))),
    }
}

fn load_series(rc: &RunConfig) -> Result<ObservedSeries, Failure> {
    let path = rc.input.as_deref().ok_or_else(|| input_error("an input file is required"))?;
    let pairs = load_csv(Path::new(path))?;
    Ok(jitter_duplicates(&pairs, rc.seed)?)
}

fn run_fit(args: &FitArgs, command: Command) -> Result<(), Failure> {
    let mut rc = fit_config(args, command)?;
    let series = load_series(&rc)?;
    rc.fit.kernel_scale = kernel_scale(args.kernel_u.as_deref(), &series, &rc)?;
    let c = &args.common;
    let grid_given = c.config.is_some() || c.grid_lower.is_some() || c.grid_upper.is_some() || c.grid_points.is_some();
    if rc.fit.approach == Approach::Bayesian && !grid_given {
        rc.fit.grid = data_kernel_grid();
    }
    let out = PathBuf::from(&rc.out);
    if rc.command == Command::SelectJ {
        let (lo, hi) = rc.select_j.expect("checked");
        let (table, fits) = select_j_aic(&series, &rc.fit, lo..=hi)?;
        let best = table
            .best_j
            .and_then(|j| fits.get(j - lo).and_then(|f| f.as_ref()));
        let best_report = best.map(|f| {
            let mut cfg = rc.fit.clone();
            cfg.j = f.theta.n_regimes();
            FitReport::new(&series, &cfg, f, standard_errors(&series, &f.theta).map_err(|e| e.to_string()))
        });
        let report = SelectReport {
            table,
            best: best_report,
        };
        emit_select(&out, &series, &report, best)?;
        print!("{}", report.summary());
        return match best {
            None => Err(Failure::Fit("no J in the range could be fitted".into())),
            Some(f) if !f.converged => Err(Failure::Fit("best fit did not converge".into())),
            Some(_) => Ok(()),
        };
    }
    let result = fit(&series, &rc.fit)?;
    let se = standard_errors(&series, &result.theta).map_err(|e| e.to_string());
    let report = FitReport::new(&series, &rc.fit, &result, se);
    if rc.command == Command::Stderr {
        std::fs::create_dir_all(&out).map_err(Error::from)?;
        let body = serde_json::to_string_pretty(&report.std_errors).map_err(Error::from)?;
        std::fs::write(out.join("stderr.json"), body + "\n").map_err(Error::from)?;
    } else {
        emit_fit(&out, &series, &report, &result)?;
    }
    print!("{}", report.summary());
    if result.converged {
        Ok(())
    } else {
        Err(Failure::Fit(format!("no convergence within {} iterations", rc.fit.max_iter)))
    }
}

fn run_simulate(args: &SimArgs) -> Result<(), Failure> {
    let mut rc = base_config(&args.common, Command::Simulate)?;
    if let Some(d) = args.design {
        rc.design = Some(d);
        rc.sim = None;
    }
    if let Some(r) = args.replicates {
        rc.replicates = r;
    }
    rc.validate()?;
    let mut design = match (&rc.sim, rc.design) {
        (Some(d), _) => d.clone(),
        (None, Some(id)) => SimDesign::standard(id, rc.seed)?,
        (None, None) => return Err(input_error("simulate needs --design")),
    };
    design.seed = rc.seed;
    if args.allow_crossing {
        design.ordered_truth = false;
    }
    let mut cfg = design.default_config(rc.fit.approach);
    cfg.max_iter = rc.fit.max_iter;
    cfg.tol = rc.fit.tol;
    if args.common.grid_lower.is_some() || args.common.grid_upper.is_some() || args.common.grid_points.is_some() {
        cfg.grid = rc.fit.grid;
    }
    let report = run_study(&design, &cfg, rc.replicates)?;
    emit_study(Path::new(&rc.out), &report)?;
    print!("{}", switchreg::io::study_summary(&report));
    if report.completed == 0 {
        return Err(Failure::Fit("no replicate could be fitted".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("SWITCHREG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Cmd::Fit(a) => run_fit(a, Command::Fit),
        Cmd::SelectJ(a) => run_fit(a, Command::SelectJ),
        Cmd::Stderr(a) => run_fit(a, Command::Stderr),
        Cmd::Simulate(a) => run_simulate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Fit(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_FIT)
        }
    }
}

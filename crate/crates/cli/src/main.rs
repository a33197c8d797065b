mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icmsm::{
    default_tgrid, run_estimator, score, simulate_replicates, true_values, EmConfig, Error,
    Estimator, FitData, FitResult, InitialEstimate, IntensityEstimate, MetricsSeries, PanelDataset,
    ScenarioSpec, StopCriterion, Target, TransitionGraph,
};
use manifest::ManifestBuilder;
use serde_json::json;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

/// Non-parametric estimation of interval-censored Markov multi-state models.
#[derive(Debug, Parser)]
#[command(name = "icmsm", version)]
struct Cli {
    /// Worker threads for the E-step (default: available parallelism).
    #[arg(long, global = true, env = "ICMSM_THREADS")]
    threads: Option<usize>,

    /// Only report errors.
    #[arg(long, global = true)]
    silent: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit an estimator to a panel file.
    Fit(FitArgs),
    /// Simulate panel data sets from a scenario.
    Simulate(SimulateArgs),
    /// Transition probabilities of a fitted model.
    Probs(ProbsArgs),
    /// Bias, variance and RMSE of replicate fits against a scenario's truth.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Multinomial,
    Poisson,
    Canonical,
    Multinoulli,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Multinomial => Estimator::Multinomial,
            EstimatorArg::Poisson => Estimator::Poisson,
            EstimatorArg::Canonical => Estimator::Canonical,
            EstimatorArg::Multinoulli => Estimator::Multinoulli,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CriterionArg {
    /// Largest change of any jump.
    Intensity,
    /// Change of the observed log-likelihood.
    Loglik,
    /// Largest reduced gradient.
    Kkt,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum InitArg {
    /// Equal jumps over the bins.
    Uniform,
    /// 90% of each transition's mass in the first 10% of the bins.
    Unfortunate,
    /// Jumps read from --init-file.
    File,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Model file (TOML: states, transitions, exact).
    model: PathBuf,
    /// Panel CSV with columns id,time,state.
    panel: PathBuf,
    #[arg(long, value_enum, default_value = "multinomial")]
    estimator: EstimatorArg,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, value_enum, default_value = "intensity")]
    criterion: CriterionArg,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    init: InitArg,
    /// Intensity CSV (from,to,bin,tau,alpha) on the panel's time grid.
    #[arg(long)]
    init_file: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario TOML file, or a built-in scenario name (1-5, 6a, 6b).
    scenario: String,
    /// Subjects per data set.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Number of data sets.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbsArgs {
    /// Directory written by `fit`.
    fit_dir: PathBuf,
    /// Starting states, comma separated (default: all).
    #[arg(long, value_delimiter = ',')]
    from: Vec<String>,
    /// Start time s of P(s, t).
    #[arg(long, default_value_t = 0.0)]
    start: f64,
    /// Evaluation times as t0:t1:step.
    #[arg(long)]
    grid: String,
    /// Output CSV (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Fit directories or glob patterns matching them.
    #[arg(required = true)]
    fits: Vec<String>,
    /// Scenario TOML file or built-in name providing the truth.
    #[arg(long)]
    scenario: String,
    /// Targets such as A:1:2 or P:1:3:0, comma separated (default: every
    /// cumulative intensity).
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    /// Evaluation times as t0:t1:step (default 0:15:0.1).
    #[arg(long)]
    grid: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Read(PathBuf, io::Error),
    Write(PathBuf, io::Error),
    Core(Error),
    NotConverged(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::NotConverged(m) => f.write_str(m),
            CliError::Read(p, e) => write!(f, "cannot read {}: {e}", p.display()),
            CliError::Write(p, e) => write!(f, "cannot write {}: {e}", p.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Read(..) | CliError::Write(..) => 2,
            CliError::NotConverged(_) => 5,
            CliError::Core(e) => match e.root() {
                Error::UnreachableObservation { .. }
                | Error::DuplicateTime { .. }
                | Error::SingleObservation(_)
                | Error::InvalidTime { .. }
                | Error::UnknownState(_)
                | Error::EmptyDataset
                | Error::Csv(_) => 3,
                Error::InfeasibleEstimate { .. }
                | Error::ZeroDenominator { .. }
                | Error::NonFiniteLoglik { .. }
                | Error::EmptyRiskSet { .. }
                | Error::SingularMStep { .. } => 4,
                Error::MaxIterations(_) => 5,
                _ => 2,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Read(path.to_path_buf(), e))
}

fn read_text(path: &Path) -> CliResult<String> {
    String::from_utf8(read(path)?)
        .map_err(|_| CliError::Usage(format!("{} is not UTF-8 text", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Write(dir.to_path_buf(), e))
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Write(path.to_path_buf(), e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Write(path.to_path_buf(), e))
}

/// Parses `t0:t1:step` into `t0, t0 + step, ...` up to `t1`.
fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let bad = || {
        CliError::Usage(format!(
            "grid must be t0:t1:step with t0 <= t1 and step > 0, got '{text}'"
        ))
    };
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [t0, t1, step] = parts[..] else {
        return Err(bad());
    };
    if !(t0.is_finite() && t1.is_finite() && t0 <= t1 && t0 >= 0.0) {
        return Err(bad());
    }
    if t0 == t1 {
        return Ok(vec![t0]);
    }
    if !(step > 0.0) {
        return Err(bad());
    }
    let n = ((t1 - t0) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| {
            let t = t0 + i as f64 * step;
            // drop representation noise such as 0.30000000000000004
            let r = (t * 1e9).round() / 1e9;
            if (r - t).abs() < 1e-12 {
                r
            } else {
                t
            }
        })
        .collect())
}

/// A scenario file, or a built-in scenario when no such file exists.
fn load_scenario(arg: &str, manifest: &mut ManifestBuilder) -> CliResult<ScenarioSpec> {
    let path = Path::new(arg);
    if path.exists() {
        let text = read_text(path)?;
        manifest.input(path, text.as_bytes());
        return Ok(ScenarioSpec::from_toml_str(&text)?);
    }
    let name = arg.strip_prefix("scenario-").unwrap_or(arg);
    ScenarioSpec::builtin(name)
        .map_err(|_| {
            CliError::Read(
                path.to_path_buf(),
                io::Error::new(
                    io::ErrorKind::NotFound,
                    "no such file and not a built-in scenario",
                ),
            )
        })
        .inspect(|_| manifest.config("builtin_scenario", name))
}

fn load_fit(dir: &Path) -> CliResult<(Arc<TransitionGraph>, IntensityEstimate, Vec<u8>)> {
    let model = read_text(&dir.join("model.toml"))?;
    let graph = Arc::new(TransitionGraph::from_model_str(&model)?);
    let bytes = read(&dir.join("intensities.csv"))?;
    let est = IntensityEstimate::read_csv(bytes.as_slice(), graph.clone())?;
    Ok((graph, est, bytes))
}

const FIT_SCHEMAS: [(&str, &str); 4] = [
    ("model.toml", "states, transitions, exact, labels"),
    ("intensities.csv", "from,to,bin,tau,alpha"),
    (
        "loglik.csv",
        "iteration,loglik,max_delta,max_reduced_gradient",
    ),
    ("reduced_gradient.csv", "from,to,bin,tau,gradient"),
];

fn cmd_fit(args: FitArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("fit");
    let model_text = read_text(&args.model)?;
    manifest.input(&args.model, model_text.as_bytes());
    let graph = Arc::new(TransitionGraph::from_model_str(&model_text)?);
    let panel = read(&args.panel)?;
    manifest.input(&args.panel, &panel);
    let dataset = PanelDataset::read_csv(panel.as_slice(), &graph)?;
    let data = FitData::new(graph.clone(), dataset)?;

    let initial = match (args.init, &args.init_file) {
        (InitArg::File, Some(path)) => {
            let bytes = read(path)?;
            manifest.input(path, &bytes);
            InitialEstimate::Custom(IntensityEstimate::read_csv(
                bytes.as_slice(),
                graph.clone(),
            )?)
        }
        (InitArg::File, None) => {
            return Err(CliError::Usage("--init file needs --init-file".into()))
        }
        (_, Some(_)) => {
            return Err(CliError::Usage(
                "--init-file is only used with --init file".into(),
            ))
        }
        (InitArg::Uniform, None) => InitialEstimate::Uniform,
        (InitArg::Unfortunate, None) => InitialEstimate::FrontLoaded,
    };
    let criterion = match args.criterion {
        CriterionArg::Intensity => StopCriterion::MaxIntensityChange,
        CriterionArg::Loglik => StopCriterion::LoglikChange,
        CriterionArg::Kkt => StopCriterion::ReducedGradient,
    };
    let estimator = Estimator::from(args.estimator);
    let config = EmConfig::default()
        .with_tolerance(args.tol)
        .with_criterion(criterion)
        .with_max_iterations(args.max_iter)
        .with_initial(initial);
    manifest.config("estimator", estimator);
    manifest.config("tol", args.tol);
    manifest.config("criterion", format!("{criterion:?}"));
    manifest.config("max_iter", args.max_iter);
    manifest.config("init", format!("{:?}", args.init));

    let fit = run_estimator(&data, &config, estimator)?;
    write_fit(&args.out, &graph, &fit)?;

    let init_desc = match &args.init_file {
        Some(p) => format!("file:{}", p.display()),
        None => format!("{:?}", args.init).to_lowercase(),
    };
    let details = json!({
        "estimator": estimator.name(),
        "initial": init_desc,
        "tolerance": args.tol,
        "criterion": format!("{criterion:?}"),
        "max_iterations": args.max_iter,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "initial_loglik": fit.initial_loglik,
        "final_loglik": fit.final_loglik(),
        "max_reduced_gradient": fit.final_reduced_gradient.max_abs,
        "subjects": data.dataset().len(),
        "bins": data.grid().num_bins(),
        "diagnostics": {
            "infeasible_rows": fit.diagnostics.infeasible_rows,
            "clamped_components": fit.diagnostics.clamped_components,
            "clamped_diagonals": fit.diagnostics.clamped_diagonals,
            "loglik_drops": fit.diagnostics.loglik_drops.len(),
        },
    });
    manifest
        .finish(
            None,
            Some(fit.stop_reason.to_string()),
            &FIT_SCHEMAS,
            details,
        )
        .write(&args.out)
        .map_err(|e| CliError::Write(args.out.clone(), e))?;

    log::info!(
        "{estimator}: {} iterations, loglik {:.6}, stop reason {}",
        fit.iterations,
        fit.final_loglik(),
        fit.stop_reason
    );
    if !fit.converged {
        return Err(CliError::NotConverged(format!(
            "{estimator} did not converge within {} iterations; results written to {}",
            fit.iterations,
            args.out.display()
        )));
    }
    Ok(())
}

fn write_fit(dir: &Path, graph: &TransitionGraph, fit: &FitResult) -> CliResult<()> {
    create_dir(dir)?;
    write_file(&dir.join("model.toml"), &graph.to_model_string())?;
    fit.estimate
        .write_csv(create(&dir.join("intensities.csv"))?)?;
    fit.write_trace_csv(create(&dir.join("loglik.csv"))?)?;
    fit.write_gradient_csv(create(&dir.join("reduced_gradient.csv"))?)?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let mut manifest = ManifestBuilder::new("simulate");
    let spec = load_scenario(&args.scenario, &mut manifest)?;
    let seed = args.seed.unwrap_or(spec.seed);
    manifest.config("n", args.n);
    manifest.config("reps", args.reps);
    manifest.config("seed", seed);

    let panels = simulate_replicates(&spec, args.n, seed, args.reps)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("model.toml"), &spec.graph.to_model_string())?;
    write_file(&args.out.join("scenario.toml"), &spec.to_toml_string())?;
    for (j, ds) in panels.iter().enumerate() {
        ds.write_csv(create(&args.out.join(format!("rep_{}.csv", j + 1)))?)?;
    }
    let details =
        json!({ "n": args.n, "reps": args.reps, "streams": "rep_<j>.csv uses stream j-1" });
    manifest
        .finish(
            Some(seed),
            None,
            &[
                ("rep_<j>.csv", "id,time,state"),
                ("model.toml", "states, transitions, exact, labels"),
                (
                    "scenario.toml",
                    "model plus horizon, seed, start, visits, hazard",
                ),
            ],
            details,
        )
        .write(&args.out)
        .map_err(|e| CliError::Write(args.out.clone(), e))?;
    log::info!(
        "wrote {} data sets of {} subjects to {}",
        args.reps,
        args.n,
        args.out.display()
    );
    Ok(())
}

fn cmd_probs(args: ProbsArgs) -> CliResult<()> {
    let (graph, est, _) = load_fit(&args.fit_dir)?;
    let times = parse_grid(&args.grid)?;
    if !(args.start >= 0.0 && args.start.is_finite()) {
        return Err(CliError::Usage(
            "--start must be a non-negative time".into(),
        ));
    }
    let from: Vec<usize> = if args.from.is_empty() {
        (0..graph.num_states()).collect()
    } else {
        args.from
            .iter()
            .map(|s| graph.parse_state(s))
            .collect::<Result<_, _>>()?
    };
    match &args.out {
        Some(path) => est.write_probabilities_csv(create(path)?, &from, args.start, &times)?,
        None => est.write_probabilities_csv(io::stdout().lock(), &from, args.start, &times)?,
    }
    Ok(())
}

/// Fit directories named directly or matched by glob patterns, in sorted order.
fn expand_fits(patterns: &[String]) -> CliResult<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for p in patterns {
        let direct = Path::new(p);
        if direct.is_dir() {
            dirs.push(direct.to_path_buf());
            continue;
        }
        let matches =
            glob::glob(p).map_err(|e| CliError::Usage(format!("bad pattern '{p}': {e}")))?;
        for m in matches {
            let m = m.map_err(|e| CliError::Read(e.path().to_path_buf(), e.into()))?;
            if m.is_dir() {
                dirs.push(m);
            }
        }
    }
    dirs.sort();
    dirs.dedup();
    Ok(dirs)
}

fn cmd_metrics(args: MetricsArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("metrics");
    let spec = load_scenario(&args.scenario, &mut manifest)?;
    let dirs = expand_fits(&args.fits)?;
    if dirs.len() < 2 {
        return Err(CliError::Usage(format!(
            "metrics need at least 2 fits, found {} matching {}",
            dirs.len(),
            args.fits.join(" ")
        )));
    }
    let times = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => default_tgrid(),
    };
    let targets: Vec<Target> = if args.targets.is_empty() {
        spec.graph
            .transitions()
            .iter()
            .map(|t| Target::cumulative(t.from, t.to))
            .collect()
    } else {
        args.targets
            .iter()
            .map(|t| Target::parse(t, &spec.graph))
            .collect::<Result<_, _>>()?
    };

    let mut fits = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let (graph, est, bytes) = load_fit(dir)?;
        if graph.transitions() != spec.graph.transitions()
            || graph.num_states() != spec.graph.num_states()
        {
            return Err(CliError::Usage(format!(
                "fit in {} uses a different model than the scenario",
                dir.display()
            )));
        }
        manifest.input(&dir.join("intensities.csv"), &bytes);
        fits.push(est);
    }
    manifest.config("grid", format!("{times:?}"));
    manifest.config(
        "targets",
        targets
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );

    let truth = true_values(&spec, &targets, &times)?;
    let mut series = Vec::with_capacity(targets.len());
    for (target, true_curve) in targets.iter().zip(&truth.values) {
        let curves = fits
            .iter()
            .map(|est| target.fitted(est, &times))
            .collect::<Result<Vec<_>, _>>()?;
        series.push(score(*target, &times, &curves, true_curve)?);
    }

    create_dir(&args.out)?;
    let path = args.out.join("metrics.csv");
    MetricsSeries::write_csv(&series, create(&path)?)?;
    let details =
        json!({ "fits": dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>() });
    manifest
        .finish(
            None,
            None,
            &[("metrics.csv", "target,from,to,t,bias,variance,rmse")],
            details,
        )
        .write(&args.out)
        .map_err(|e| CliError::Write(args.out.clone(), e))?;
    log::info!("scored {} fits on {} targets", fits.len(), targets.len());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Probs(a) => cmd_probs(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.silent { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.silent {
        log::set_max_level(log::LevelFilter::Error);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let _ = io::stderr().flush();
            ExitCode::from(e.exit_code())
        }
    }
}

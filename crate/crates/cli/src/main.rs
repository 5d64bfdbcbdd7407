mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use didmean::bench::{self, BenchSettings, ConfigLabel, EstimatorConfig};
use didmean::estimator::{self, EstimateReport, EstimatorSettings, Method, PositivityReport, DEFAULT_SMALL_STRATUM};
use didmean::nuisance::{NuisanceLearners, PropensityOptions, DEFAULT_EPSILON};
use didmean::panel::{self, BaselineReport};
use didmean::simulate::{self, DGPConfig, TruthTable};
use didmean::{estimator::align, Execution};
use serde::{Deserialize, Serialize};

use config::{AdjustmentSpec, RegimeSpec, RunConfig, DEFAULT_SEED};
use output::{write_atomic, write_or_print};

#[derive(Parser, Debug)]
#[command(name = "didmean", version, about = "Intervention-specific means under conditional parallel trends")]
struct Cli {
    /// Worker threads for parallel sections (default: one per core)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a panel from the three-period model and compute its true means
    Simulate(SimulateArgs),
    /// Estimate intervention-specific means from a panel CSV
    Estimate(EstimateArgs),
    /// Run the replication study
    Bench(BenchArgs),
    /// Report baseline compliance, stratum sizes and propensity diagnostics
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Panel CSV in long format (one row per unit and time)
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// JSON run configuration; flags override its fields
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Unit identifier column [default: unit]
    #[arg(long, value_name = "NAME")]
    unit_col: Option<String>,
    /// Time column [default: time]
    #[arg(long, value_name = "NAME")]
    time_col: Option<String>,
    /// Treatment column [default: treatment]
    #[arg(long, value_name = "NAME")]
    treatment_col: Option<String>,
    /// Outcome column [default: outcome]
    #[arg(long, value_name = "NAME")]
    outcome_col: Option<String>,
    /// Comma-separated covariate columns [default: every other column]
    #[arg(long, value_name = "A,B,..")]
    covariates: Option<String>,
    /// Regime: one treatment code for all times, or one code per time [default: 0]
    #[arg(long, value_name = "CODES")]
    regime: Option<String>,
    /// Adjustment variables: `full` (alias `default`: covariates and outcome history) or `covariates` [default: full]
    #[arg(long, value_name = "NAME")]
    adjustment: Option<String>,
    /// Outcome regression learner: a kind name or inline JSON spec [default: linear]
    #[arg(long, value_name = "SPEC")]
    outcome_learner: Option<String>,
    /// Treatment model learner: a kind name or inline JSON spec [default: logistic]
    #[arg(long, value_name = "SPEC")]
    propensity_learner: Option<String>,
    /// Lower truncation bound for each propensity factor [default: 0.01]
    #[arg(long, value_name = "X")]
    epsilon: Option<f64>,
    /// Cross-fit with this many folds (implies cross-fitting)
    #[arg(long, value_name = "M")]
    folds: Option<usize>,
    /// Number of repeated partitions for cross-fitting [default: 10]
    #[arg(long, value_name = "K")]
    repetitions: Option<usize>,
    /// Fit nuisances on the full sample even if the config asks for cross-fitting
    #[arg(long)]
    full_sample: bool,
    /// Fit one propensity model across times with the time index as a feature
    #[arg(long)]
    pooled_propensity: bool,
    /// With a pooled propensity model, use only the last L periods of history
    #[arg(long, value_name = "L")]
    lag_window: Option<usize>,
    /// Random seed for fold assignment and randomized learners [default: 1]
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Largest horizon to estimate [default: last time]
    #[arg(long, value_name = "T")]
    horizon: Option<usize>,
    /// Compliant-stratum size below which a time is flagged [default: 25]
    #[arg(long, value_name = "N")]
    small_stratum: Option<usize>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output format
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Write the report here instead of standard output
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Write per-unit influence function contributions to this CSV
    #[arg(long, value_name = "PATH")]
    dump_if: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output format
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Write the report here instead of standard output
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON run configuration; flags override its fields
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for the simulated panel [default: 1]
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Number of units [default: 1000]
    #[arg(long, value_name = "N")]
    n: Option<usize>,
    /// Seed from which the model coefficients are drawn [default: the pinned seed]
    #[arg(long, value_name = "SEED")]
    coefficient_seed: Option<u64>,
    /// Draw baseline treatment at random instead of fixing it at 0
    #[arg(long)]
    stochastic_baseline: bool,
    /// Monte Carlo draws for the true means [default: 1000000]
    #[arg(long, value_name = "N")]
    truth_draws: Option<usize>,
    /// Output directory for panel.csv, truth.json and cfg.json
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// JSON run configuration; flags override its fields
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Comma-separated sample sizes [default: 1000]
    #[arg(long, value_name = "N,..")]
    n: Option<String>,
    /// Replicates per sample size [default: 300]
    #[arg(long, value_name = "R")]
    reps: Option<usize>,
    /// Comma-separated configurations among true, gfal, qfal, bfal, super [default: true,gfal,qfal,bfal]
    #[arg(long, value_name = "A,B,..")]
    configs: Option<String>,
    /// Master seed [default: 1]
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Seed from which the model coefficients are drawn [default: the pinned seed]
    #[arg(long, value_name = "SEED")]
    coefficient_seed: Option<u64>,
    /// Cross-fitting folds for `super` [default: 2]
    #[arg(long, value_name = "M")]
    folds: Option<usize>,
    /// Cross-fitting repetitions for `super` [default: 10]
    #[arg(long, value_name = "K")]
    repetitions: Option<usize>,
    /// Lower truncation bound for each propensity factor [default: 0.01]
    #[arg(long, value_name = "X")]
    epsilon: Option<f64>,
    /// True means from a `simulate` sidecar or a bare truth table [default: the frozen table for the pinned coefficients, otherwise computed]
    #[arg(long, value_name = "PATH")]
    truth: Option<PathBuf>,
    /// Monte Carlo draws when the true means must be computed [default: 1000000]
    #[arg(long, value_name = "N")]
    truth_draws: Option<usize>,
    /// Directory for table.txt, table.csv, replicates.csv and meta.json
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

/// A failure and the exit code it maps to.
enum Failure {
    Validation(anyhow::Error),
    Estimation(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Estimation(_) => 2,
        }
    }
}

impl From<didmean::Error> for Failure {
    fn from(e: didmean::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Estimation(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<didmean::Error>() {
            Some(core) if !core.is_validation() => Failure::Estimation(e),
            _ => Failure::Validation(e),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Validation(e) | Failure::Estimation(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Diagnose(a) => diagnose_cmd(a),
    }
}

fn configure_threads(threads: Option<usize>) -> Outcome<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Failure::Validation(anyhow::anyhow!("--threads must be positive")));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Validation(anyhow::anyhow!("cannot configure thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        log::warn!("built without parallel support; --threads {n} ignored");
    }
    Ok(())
}

/// Inputs for `estimate` and `diagnose` after merging config and flags.
struct Job {
    data: panel::PanelDataset,
    regime: panel::Regime,
    schedule: panel::AdjustmentSchedule,
    settings: EstimatorSettings,
    horizon: usize,
}

fn merge_data_args(args: &DataArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(p) = &args.input {
        cfg.input = Some(p.clone());
    }
    let mut schema = cfg.take_schema();
    if let Some(c) = &args.unit_col {
        schema.unit_col = c.clone();
    }
    if let Some(c) = &args.time_col {
        schema.time_col = c.clone();
    }
    if let Some(c) = &args.treatment_col {
        schema.treatment_col = c.clone();
    }
    if let Some(c) = &args.outcome_col {
        schema.outcome_col = c.clone();
    }
    if let Some(c) = &args.covariates {
        schema.covariate_cols = c.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    let input = cfg.input.clone().context("no input panel: pass --input or set `input` in the config")?;
    config::infer_covariates(&input, &mut schema)?;
    cfg.schema = Some(schema);

    if let Some(r) = &args.regime {
        cfg.regime = Some(config::parse_regime(r)?);
    }
    cfg.regime.get_or_insert(RegimeSpec::Constant(0));
    if let Some(a) = &args.adjustment {
        cfg.adjustment = Some(AdjustmentSpec::Named(a.clone()));
    }
    cfg.adjustment.get_or_insert(AdjustmentSpec::Named("full".into()));
    let mut learners = cfg.learners.take().unwrap_or_else(config::default_learners);
    if let Some(l) = &args.outcome_learner {
        learners.outcome = config::parse_learner(l)?;
    }
    if let Some(l) = &args.propensity_learner {
        learners.propensity = config::parse_learner(l)?;
    }
    cfg.learners = Some(learners);
    if let Some(e) = args.epsilon {
        cfg.epsilon = Some(e);
    }
    cfg.epsilon.get_or_insert(DEFAULT_EPSILON);
    if args.folds.is_some() {
        cfg.folds = args.folds;
    }
    if args.repetitions.is_some() {
        cfg.repetitions = args.repetitions;
    }
    let method = if args.full_sample {
        Method::FullSample
    } else if cfg.folds.is_some() || cfg.repetitions.is_some() {
        let (f0, r0) = match cfg.method {
            Some(Method::CrossFit { folds, repetitions }) => (folds, repetitions),
            _ => (2, 10),
        };
        Method::CrossFit { folds: cfg.folds.unwrap_or(f0), repetitions: cfg.repetitions.unwrap_or(r0) }
    } else {
        cfg.method.unwrap_or(Method::FullSample)
    };
    cfg.method = Some(method);
    cfg.folds = None;
    cfg.repetitions = None;
    let mut propensity = cfg.propensity.take().unwrap_or_default();
    if args.pooled_propensity {
        propensity.pooled = true;
    }
    if args.lag_window.is_some() {
        propensity.lag_window = args.lag_window;
    }
    cfg.propensity = Some(propensity);
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    cfg.seed.get_or_insert(DEFAULT_SEED);
    if args.horizon.is_some() {
        cfg.horizon = args.horizon;
    }
    if args.small_stratum.is_some() {
        cfg.small_stratum = args.small_stratum;
    }
    cfg.small_stratum.get_or_insert(DEFAULT_SMALL_STRATUM);
    Ok(cfg)
}

fn prepare(args: &DataArgs) -> Outcome<Job> {
    let cfg = merge_data_args(args)?;
    let input = cfg.input.as_ref().expect("resolved");
    let schema = cfg.schema.as_ref().expect("resolved");
    let data = panel::load_panel(input, schema).map_err(|e| Failure::Validation(anyhow::Error::new(e).context(format!("in {}", input.display()))))?;
    let regime = cfg.regime.as_ref().expect("resolved").build(&data)?;
    let schedule = cfg.adjustment.as_ref().expect("resolved").build(&data)?;
    let learners: NuisanceLearners = cfg.learners.clone().expect("resolved");
    learners.outcome.validate()?;
    learners.propensity.validate()?;
    let horizon = cfg.horizon.unwrap_or(data.horizon());
    if horizon > data.horizon() {
        return Err(Failure::Validation(anyhow::anyhow!("horizon {horizon} exceeds the last time index {}", data.horizon())));
    }
    let settings = EstimatorSettings {
        learners,
        epsilon: cfg.epsilon.expect("resolved"),
        propensity: cfg.propensity.clone().unwrap_or_default(),
        method: cfg.method.expect("resolved"),
        seed: cfg.seed.expect("resolved"),
        small_stratum: cfg.small_stratum.expect("resolved"),
    };
    Ok(Job { data, regime, schedule, settings, horizon })
}

fn run_estimate(job: &Job) -> Outcome<EstimateReport> {
    Ok(estimator::estimate(&job.data, &job.regime, &job.schedule, &job.settings, job.horizon, Execution::Parallel)?)
}

fn estimate_cmd(args: EstimateArgs) -> Outcome<()> {
    let job = prepare(&args.data)?;
    let report = run_estimate(&job)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let body = match args.format {
        Format::Json => serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n",
        Format::Table => report.to_table(),
    };
    if let Some(path) = &args.dump_if {
        let mut buf = Vec::new();
        report.write_contributions(&job.data, &mut buf)?;
        write_atomic(path, &buf)?;
    }
    write_or_print(args.output.as_deref(), body.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct Diagnosis {
    baseline: BaselineReport,
    compliant: Vec<usize>,
    positivity: PositivityReport,
    warnings: Vec<String>,
}

fn diagnose_cmd(args: DiagnoseArgs) -> Outcome<()> {
    let mut job = prepare(&args.data)?;
    job.settings.method = Method::FullSample;
    let baseline = panel::check_baseline_regime(&job.data, &job.regime);
    let comp = panel::compliance(&job.data, &job.regime);
    let compliant = (0..job.data.n_times()).map(|m| comp.count(m)).collect();
    let report = run_estimate(&job)?;
    let diag = Diagnosis { baseline, compliant, positivity: report.diagnostics, warnings: report.warnings };
    let body = match args.format {
        Format::Json => serde_json::to_string_pretty(&diag).map_err(anyhow::Error::from)? + "\n",
        Format::Table => diagnosis_table(&diag, job.data.time_labels()),
    };
    write_or_print(args.output.as_deref(), body.as_bytes())?;
    Ok(())
}

fn diagnosis_table(d: &Diagnosis, times: &[String]) -> String {
    let mut out = format!(
        "baseline: {:.4} of {} units follow the regime at the first time ({} violating)\n",
        d.baseline.fraction_compliant,
        d.baseline.n_units,
        d.baseline.violating_units.len()
    );
    let header: Vec<String> = ["m", "time", "compliant", "min_g", "truncated", "flag"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = d
        .positivity
        .times
        .iter()
        .map(|t| {
            vec![
                t.m.to_string(),
                times.get(t.m).cloned().unwrap_or_default(),
                t.compliant.to_string(),
                t.min_g.map_or_else(|| "-".into(), |g| format!("{g:.4}")),
                t.truncated.to_string(),
                if t.small_stratum { "small".into() } else { String::new() },
            ]
        })
        .collect();
    out.push_str(&align(&header, &rows));
    for w in &d.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct TruthSidecar {
    model: DGPConfig,
    truth: TruthTable,
}

fn simulate_cmd(args: SimulateArgs) -> Outcome<()> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if let Some(n) = args.n {
        cfg.n = Some(vec![n]);
    }
    if args.coefficient_seed.is_some() {
        cfg.coefficient_seed = args.coefficient_seed;
    }
    if args.stochastic_baseline {
        cfg.stochastic_baseline = Some(true);
    }
    if args.truth_draws.is_some() {
        cfg.truth_draws = args.truth_draws;
    }
    let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
    let n = match cfg.n.as_deref() {
        None => 1000,
        Some([n]) if *n > 0 => *n,
        Some(_) => return Err(Failure::Validation(anyhow::anyhow!("simulate takes a single positive sample size"))),
    };
    let coefficient_seed = cfg.coefficient_seed.unwrap_or(simulate::DEFAULT_COEFFICIENT_SEED);
    let draws = cfg.truth_draws.unwrap_or(1_000_000);
    let mut model = simulate::draw_coefficients(coefficient_seed).with_units(n);
    model.force_baseline_regime = !cfg.stochastic_baseline.unwrap_or(false);
    let data = simulate::generate_panel(&model, seed);
    let truth = simulate::truth_oracle(&model, draws, didmean::exec::derive_seed(seed, &[0x7207]), Execution::Parallel)?;

    let schema = panel::native_schema(&data);
    let mut csv = Vec::new();
    panel::write_panel(&data, &mut csv, &schema)?;
    let sidecar = serde_json::to_string_pretty(&TruthSidecar { model, truth }).map_err(anyhow::Error::from)? + "\n";
    let true_cfg = EstimatorConfig::standard(ConfigLabel::True, 2, 10);
    let run = RunConfig {
        input: Some(PathBuf::from("panel.csv")),
        schema: Some(schema),
        regime: Some(RegimeSpec::Constant(0)),
        adjustment: Some(AdjustmentSpec::Named("covariates".into())),
        learners: Some(true_cfg.learners),
        epsilon: Some(DEFAULT_EPSILON),
        method: Some(Method::FullSample),
        propensity: Some(PropensityOptions::default()),
        seed: Some(seed),
        ..RunConfig::default()
    };
    let run = serde_json::to_string_pretty(&run).map_err(anyhow::Error::from)? + "\n";
    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    write_atomic(&args.out.join("panel.csv"), &csv)?;
    write_atomic(&args.out.join("truth.json"), sidecar.as_bytes())?;
    write_atomic(&args.out.join("cfg.json"), run.as_bytes())?;
    Ok(())
}

fn load_truth(path: &Path) -> anyhow::Result<TruthTable> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    if let Ok(s) = serde_json::from_str::<TruthSidecar>(&text) {
        return Ok(s.truth);
    }
    serde_json::from_str(&text).with_context(|| format!("{} is not a truth table", path.display()))
}

#[derive(Serialize)]
struct BenchMeta<'a> {
    config: &'a RunConfig,
    truth: &'a TruthTable,
    replicates_failed: usize,
    metrics: &'a [bench::Metric],
}

fn bench_cmd(args: BenchArgs) -> Outcome<()> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(n) = &args.n {
        cfg.n = Some(config::parse_list(n)?);
    }
    if args.reps.is_some() {
        cfg.reps = args.reps;
    }
    if let Some(c) = &args.configs {
        cfg.configs = Some(config::parse_list(c)?);
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if args.coefficient_seed.is_some() {
        cfg.coefficient_seed = args.coefficient_seed;
    }
    if args.folds.is_some() {
        cfg.folds = args.folds;
    }
    if args.repetitions.is_some() {
        cfg.repetitions = args.repetitions;
    }
    if args.epsilon.is_some() {
        cfg.epsilon = args.epsilon;
    }
    if args.truth_draws.is_some() {
        cfg.truth_draws = args.truth_draws;
    }
    let n_list = cfg.n.get_or_insert_with(|| vec![1000]).clone();
    let reps = *cfg.reps.get_or_insert(300);
    let labels = cfg
        .configs
        .get_or_insert_with(|| vec![ConfigLabel::True, ConfigLabel::Gfal, ConfigLabel::Qfal, ConfigLabel::Bfal])
        .clone();
    let seed = *cfg.seed.get_or_insert(DEFAULT_SEED);
    let coefficient_seed = *cfg.coefficient_seed.get_or_insert(simulate::DEFAULT_COEFFICIENT_SEED);
    let folds = *cfg.folds.get_or_insert(2);
    let repetitions = *cfg.repetitions.get_or_insert(10);
    let epsilon = *cfg.epsilon.get_or_insert(DEFAULT_EPSILON);
    if n_list.is_empty() || n_list.contains(&0) || reps == 0 || labels.is_empty() {
        return Err(Failure::Validation(anyhow::anyhow!("--n, --reps and --configs must be non-empty and positive")));
    }

    let dgp = simulate::draw_coefficients(coefficient_seed);
    let truth = match &args.truth {
        Some(p) => load_truth(p)?,
        None if coefficient_seed == simulate::DEFAULT_COEFFICIENT_SEED && cfg.truth_draws.is_none() => simulate::default_truth(),
        None => {
            let draws = *cfg.truth_draws.get_or_insert(1_000_000);
            simulate::truth_oracle(&dgp, draws, didmean::exec::derive_seed(seed, &[0x7207]), Execution::Parallel)?
        }
    };
    let configs: Vec<EstimatorConfig> = labels.iter().map(|&l| EstimatorConfig::standard(l, folds, repetitions)).collect();
    let settings = BenchSettings { epsilon, ..BenchSettings::default() };
    let result = bench::run_replications(&dgp, &configs, &n_list, reps, &truth, &settings, seed, Execution::Parallel)?;
    let (text, csv) = bench::render_table(&result);
    let meta = BenchMeta { config: &cfg, truth: &result.truth, replicates_failed: result.failures(), metrics: &result.metrics };
    let meta = serde_json::to_string_pretty(&meta).map_err(anyhow::Error::from)? + "\n";
    let replicates = bench::replicates_csv(&result);

    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    write_atomic(&args.out_dir.join("table.txt"), text.as_bytes())?;
    write_atomic(&args.out_dir.join("table.csv"), csv.as_bytes())?;
    write_atomic(&args.out_dir.join("replicates.csv"), replicates.as_bytes())?;
    write_atomic(&args.out_dir.join("meta.json"), meta.as_bytes())?;
    print!("{text}");
    if result.failures() > 0 {
        log::warn!("{} replicate fits failed and were excluded", result.failures());
    }
    eprintln!("bench finished in {:.1}s", result.elapsed.as_secs_f64());
    Ok(())
}

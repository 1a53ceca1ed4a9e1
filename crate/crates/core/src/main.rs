use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sqbox::envs::{behaviors_of, features_of, sample_trajectories, EnvConfig, TrajectoryRecord};
use sqbox::error::Error;
use sqbox::eval::{
    coverage, coverage_ci_lower, run_gaussian_study, run_mdp_study, run_mdp_study_on,
    run_quantile_ci_study, GaussianReport, GaussianStudyConfig, MdpReport, MdpStudyConfig,
    PlotPoint, QuantileCiConfig, QuantileCiReport,
};
use sqbox::forest::ForestParams;
use sqbox::io::{
    format_sig, load_trajectories, save_trajectories, FittedModel, ModelBundle, TrajectoryHeader,
};
use sqbox::quantile::QuantileStrategy;
use sqbox::trajband::{fit_cte, fit_sqbox, Band, SplitConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "sqbox",
    version,
    about = "Conformal prediction boxes and trajectory bands"
)]
struct Cli {
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, global = true, env = "SQBOX_WORKERS")]
    workers: Option<usize>,

    /// Directory for artifacts written without an explicit path.
    #[arg(long, global = true, env = "SQBOX_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out trajectories from a simulator.
    Simulate(SimulateArgs),
    /// Fit a band model on a trajectory file.
    Fit(FitArgs),
    /// Print the band for one start state.
    Predict(PredictArgs),
    /// Coverage of a fitted model on held-out trajectories.
    Evaluate(EvaluateArgs),
    /// Run a replication study.
    Experiment(ExperimentArgs),
    /// Flatten an experiment report into figure,series,x,y rows.
    PlotData(PlotDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvName {
    Tamarisk,
    Battle,
}

impl EnvName {
    fn as_str(self) -> &'static str {
        match self {
            Self::Tamarisk => "tamarisk",
            Self::Battle => "battle",
        }
    }
}

#[derive(Args)]
struct EnvArgs {
    #[arg(long, value_enum)]
    env: EnvName,
    /// JSON file overriding simulator parameters.
    #[arg(long)]
    env_config: Option<PathBuf>,
}

impl EnvArgs {
    fn resolve(&self) -> Result<EnvConfig, Error> {
        let env = match &self.env_config {
            Some(path) => {
                let mut value: serde_json::Value =
                    serde_json::from_str(&std::fs::read_to_string(path)?)?;
                if let Some(obj) = value.as_object_mut() {
                    obj.insert("env".into(), json!(self.env.as_str()));
                }
                serde_json::from_value(value)?
            }
            None => EnvConfig::by_name(self.env.as_str())?,
        };
        env.validate()?;
        Ok(env)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    n: usize,
    /// Defaults to the environment horizon.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; defaults to `<out-dir>/<env>.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Sqbox,
    Cte,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyName {
    Strict,
    Ucb,
}

#[derive(Args)]
struct ForestArgs {
    #[arg(long, default_value_t = 1000)]
    trees: usize,
    #[arg(long, default_value_t = 20)]
    min_leaf: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ForestArgs {
    fn params(&self) -> ForestParams {
        ForestParams {
            tree_count: self.trees,
            min_leaf: self.min_leaf,
            seed: self.seed,
            ..ForestParams::default()
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Trajectory file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "sqbox")]
    method: Method,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Inner quantile level of the box method; defaults to max(0.2, delta).
    #[arg(long)]
    delta_prime: Option<f64>,
    /// Training rows; defaults to half the data.
    #[arg(long)]
    l: Option<usize>,
    /// Scale-estimation rows of the box method; defaults to min(100, (n - l) / 2).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_enum, default_value = "strict")]
    strategy: StrategyName,
    /// Confidence of the upper-confidence quantile; defaults to 1 - delta.
    #[arg(long)]
    ucb_confidence: Option<f64>,
    #[command(flatten)]
    forest: ForestArgs,
    /// Output bundle; defaults to `<out-dir>/model.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated start-state features.
    #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true)]
    start: Vec<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test trajectory file.
    #[arg(long)]
    data: PathBuf,
    /// Confidence of the one-sided lower bound on coverage.
    #[arg(long, default_value_t = 0.99)]
    confidence: f64,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum StudyName {
    Gaussian,
    Tamarisk,
    Battle,
    QuantileCi,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    name: StudyName,
    /// Reduced replication counts.
    #[arg(long)]
    quick: bool,
    /// Full study configuration as JSON (as embedded in a previous report).
    #[arg(long, conflicts_with = "quick")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    delta_prime: Option<f64>,
    /// Trajectory file to use instead of simulating (MDP studies).
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON file overriding simulator parameters (MDP studies).
    #[arg(long)]
    env_config: Option<PathBuf>,
}

#[derive(Args)]
struct PlotDataArgs {
    /// Report written by `experiment`.
    #[arg(long)]
    report: PathBuf,
    /// CSV file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "experiment", content = "report", rename_all = "kebab-case")]
enum ExperimentReport {
    Gaussian(GaussianReport),
    Tamarisk(MdpReport),
    Battle(MdpReport),
    QuantileCi(QuantileCiReport),
}

impl ExperimentReport {
    fn plot_points(&self) -> Vec<PlotPoint> {
        match self {
            Self::Gaussian(r) => r.plot_points(),
            Self::Tamarisk(r) | Self::Battle(r) => r.plot_points(),
            Self::QuantileCi(r) => r.plot_points(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    generator: String,
    #[serde(flatten)]
    body: ExperimentReport,
}

fn g(x: f64) -> String {
    format_sig(x, 6)
}

fn output_path(
    explicit: &Option<PathBuf>,
    out_dir: &Path,
    default: &str,
) -> Result<PathBuf, Error> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => {
            std::fs::create_dir_all(out_dir)?;
            Ok(out_dir.join(default))
        }
    }
}

fn simulate(args: &SimulateArgs, out_dir: &Path) -> Result<(), Error> {
    let env = args.env.resolve()?;
    let horizon = args.horizon.unwrap_or_else(|| env.horizon());
    let records = sample_trajectories(&env, args.n, horizon, args.seed)?;
    let path = output_path(&args.out, out_dir, &format!("{}.jsonl", env.name()))?;
    let header = TrajectoryHeader::new(env, args.n, horizon, args.seed);
    save_trajectories(&path, &header, &records)?;
    println!(
        "wrote {} trajectories of length {horizon} to {}",
        records.len(),
        path.display()
    );
    Ok(())
}

fn read_records(path: &Path) -> Result<(Option<TrajectoryHeader>, Vec<TrajectoryRecord>), Error> {
    let (header, records) = load_trajectories(path)?;
    if records.is_empty() {
        return Err(Error::Schema(format!(
            "{} holds no trajectories",
            path.display()
        )));
    }
    Ok((header, records))
}

fn fit(args: &FitArgs, out_dir: &Path) -> Result<(), Error> {
    let (header, records) = read_records(&args.data)?;
    let n = records.len();
    let features = features_of(&records);
    let behaviors = behaviors_of(&records)?;
    let strategy = match args.strategy {
        StrategyName::Strict => QuantileStrategy::Strict,
        StrategyName::Ucb => {
            QuantileStrategy::upper_confidence(args.ucb_confidence.unwrap_or(1.0 - args.delta))?
        }
    };
    let l = args.l.unwrap_or(n / 2);
    let forest = args.forest.params();
    let (model, split) = match args.method {
        Method::Sqbox => {
            let m = args.m.unwrap_or_else(|| 100.min(n.saturating_sub(l) / 2));
            let delta_prime = args.delta_prime.unwrap_or(args.delta.max(0.2));
            let split = SplitConfig::sqbox(l, m, args.delta, delta_prime, strategy);
            (
                FittedModel::Sqbox(fit_sqbox(&features, &behaviors, split, forest)?),
                split,
            )
        }
        Method::Cte => {
            let split = SplitConfig::cte(l, args.delta, strategy);
            (
                FittedModel::Cte(fit_cte(&features, &behaviors, split, forest)?),
                split,
            )
        }
    };
    let provenance = json!({
        "data": args.data.display().to_string(),
        "records": n,
        "data_header": header,
        "split": split,
    });
    let path = output_path(&args.out, out_dir, "model.json")?;
    ModelBundle::new(model, forest, provenance).save(&path)?;
    println!("wrote model to {}", path.display());
    Ok(())
}

fn print_band(out: &mut impl Write, band: &Band) -> io::Result<()> {
    writeln!(out, "t,lo,hi")?;
    for (t, lo, hi) in band.rows() {
        writeln!(out, "{t},{},{}", g(lo), g(hi))?;
    }
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<(), Error> {
    let bundle = ModelBundle::load(&args.model)?;
    let p = bundle.model.predict(&args.start)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if let Some(c) = p.total_exceedance_bound {
        writeln!(out, "# total exceedance bound {}", g(c))?;
    }
    print_band(&mut out, &p.band)?;
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<(), Error> {
    let bundle = ModelBundle::load(&args.model)?;
    let (_, records) = read_records(&args.data)?;
    let behaviors = behaviors_of(&records)?;
    let bands = records
        .iter()
        .map(|r| bundle.model.predict(&r.start_features).map(|p| p.band))
        .collect::<Result<Vec<_>, _>>()?;
    let mut summary = coverage(&bands, &behaviors, args.confidence)?;
    if matches!(bundle.model, FittedModel::Cte(_)) {
        let mut hits = 0;
        for r in &records {
            hits += usize::from(bundle.model.covers(&r.start_features, &r.behavior)?);
        }
        summary.hits = hits;
        summary.coverage = hits as f64 / records.len() as f64;
        summary.ci_lower = coverage_ci_lower(hits as u64, records.len() as u64, args.confidence);
    }
    let report = json!({
        "generator": concat!("sqbox ", env!("CARGO_PKG_VERSION")),
        "model": args.model.display().to_string(),
        "model_config": {
            "method": match bundle.model { FittedModel::Sqbox(_) => "sqbox", FittedModel::Cte(_) => "cte" },
            "delta": bundle.model.delta(),
            "forest": bundle.forest,
            "provenance": bundle.provenance,
        },
        "data": args.data.display().to_string(),
        "confidence": args.confidence,
        "coverage": summary,
    });
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    eprintln!(
        "coverage {} ({} of {}), lower bound {}, mean width {}",
        g(summary.coverage),
        summary.hits,
        summary.n,
        g(summary.ci_lower),
        g(summary.mean_width)
    );
    Ok(())
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn mdp_config(args: &ExperimentArgs, name: EnvName) -> Result<MdpStudyConfig, Error> {
    let mut config = match &args.config {
        Some(p) => read_config(p)?,
        None => {
            let env = EnvArgs {
                env: name,
                env_config: args.env_config.clone(),
            }
            .resolve()?;
            if args.quick {
                MdpStudyConfig::quick(env)
            } else {
                MdpStudyConfig::new(env)
            }
        }
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(t) = args.trees {
        config.forest.tree_count = t;
    }
    if let Some(l) = args.min_leaf {
        config.forest.min_leaf = l;
    }
    if let Some(m) = args.m {
        config.m = m;
    }
    if let Some(d) = args.delta_prime {
        config.delta_prime = d;
    }
    Ok(config)
}

fn run_mdp(args: &ExperimentArgs, name: EnvName) -> Result<MdpReport, Error> {
    let config = mdp_config(args, name)?;
    config.validate()?;
    match &args.data {
        Some(path) => {
            let (_, records) = read_records(path)?;
            run_mdp_study_on(&config, &records)
        }
        None => run_mdp_study(&config),
    }
}

fn print_summary(report: &ExperimentReport) {
    match report {
        ExperimentReport::Gaussian(r) => {
            println!("rho,delta,method,mean_coverage,coverage_quantile,mean_width");
            for x in &r.records {
                println!(
                    "{},{},{},{},{},{}",
                    g(x.rho),
                    g(x.delta),
                    x.method,
                    g(x.mean_coverage),
                    g(x.coverage_quantile),
                    g(x.mean_width)
                );
            }
        }
        ExperimentReport::Tamarisk(r) | ExperimentReport::Battle(r) => {
            println!("method,size,delta,coverage,ci_lower,mean_width,correction");
            for x in &r.records {
                println!(
                    "{},{},{},{},{},{},{}",
                    x.method,
                    x.size,
                    g(x.delta),
                    g(x.coverage),
                    g(x.ci_lower),
                    g(x.mean_width),
                    x.correction.map(g).unwrap_or_default()
                );
            }
            for t in &r.failure_tables {
                println!(
                    "# {} at size {}: {} flagged cells",
                    t.method,
                    t.size,
                    t.table.flagged().count()
                );
            }
        }
        ExperimentReport::QuantileCi(r) => {
            println!("delta,n,strict_rank,ucb_rank,strict_success,ucb_success");
            for x in &r.records {
                println!(
                    "{},{},{},{},{},{}",
                    g(x.delta),
                    x.n,
                    x.strict_rank,
                    x.ucb_rank,
                    g(x.strict_success),
                    g(x.ucb_success)
                );
            }
        }
    }
}

fn write_plot_csv(out: &mut impl Write, points: &[PlotPoint]) -> io::Result<()> {
    writeln!(out, "figure,series,x,y")?;
    for p in points {
        writeln!(out, "{},{},{},{}", p.figure, p.series, g(p.x), g(p.y))?;
    }
    out.flush()
}

fn experiment(args: &ExperimentArgs, out_dir: &Path) -> Result<(), Error> {
    let mdp_only = args.data.is_some()
        || args.env_config.is_some()
        || args.m.is_some()
        || args.delta_prime.is_some();
    let forest_flags = args.trees.is_some() || args.min_leaf.is_some();
    if matches!(args.name, StudyName::Gaussian | StudyName::QuantileCi)
        && (mdp_only || forest_flags)
    {
        return Err(Error::InvalidInput(
            "forest, split and data flags apply only to the MDP studies".into(),
        ));
    }
    let (stem, report) = match args.name {
        StudyName::Gaussian => {
            let mut config: GaussianStudyConfig = match &args.config {
                Some(p) => read_config(p)?,
                None if args.quick => GaussianStudyConfig::quick(),
                None => GaussianStudyConfig::default(),
            };
            if let Some(s) = args.seed {
                config.seed = s;
            }
            (
                "gaussian",
                ExperimentReport::Gaussian(run_gaussian_study(&config)?),
            )
        }
        StudyName::QuantileCi => {
            let mut config: QuantileCiConfig = match &args.config {
                Some(p) => read_config(p)?,
                None if args.quick => QuantileCiConfig::quick(),
                None => QuantileCiConfig::default(),
            };
            if let Some(s) = args.seed {
                config.seed = s;
            }
            (
                "quantile-ci",
                ExperimentReport::QuantileCi(run_quantile_ci_study(&config)?),
            )
        }
        StudyName::Tamarisk => (
            "tamarisk",
            ExperimentReport::Tamarisk(run_mdp(args, EnvName::Tamarisk)?),
        ),
        StudyName::Battle => (
            "battle",
            ExperimentReport::Battle(run_mdp(args, EnvName::Battle)?),
        ),
    };
    std::fs::create_dir_all(out_dir)?;
    let file = ReportFile {
        generator: concat!("sqbox ", env!("CARGO_PKG_VERSION")).into(),
        body: report,
    };
    let report_path = out_dir.join(format!("{stem}.json"));
    std::fs::write(&report_path, serde_json::to_string_pretty(&file)? + "\n")?;
    let plot_path = out_dir.join(format!("{stem}_plot.csv"));
    write_plot_csv(
        &mut BufWriter::new(File::create(&plot_path)?),
        &file.body.plot_points(),
    )?;
    print_summary(&file.body);
    eprintln!(
        "wrote {} and {}",
        report_path.display(),
        plot_path.display()
    );
    Ok(())
}

fn plot_data(args: &PlotDataArgs) -> Result<(), Error> {
    let file: ReportFile = read_config(&args.report)?;
    let points = file.body.plot_points();
    match &args.out {
        Some(p) => write_plot_csv(&mut BufWriter::new(File::create(p)?), &points)?,
        None => write_plot_csv(&mut io::stdout().lock(), &points)?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Simulate(a) => simulate(a, &cli.out_dir),
        Command::Fit(a) => fit(a, &cli.out_dir),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Experiment(a) => experiment(a, &cli.out_dir),
        Command::PlotData(a) => plot_data(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            })
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use cepreg::bootstrap::{residual_bootstrap_bands, BootstrapConfig, StageOne};
use cepreg::experiments::{
    ar_covariates, generate_from_truth, run_benchmark, Example, ExperimentSpec, TrueEffects, DEFAULT_NOISE_SD,
};
use cepreg::io::{emit_fit, export_panel, ingest, write_text};
use cepreg::rng::substream;
use cepreg::{fit_two_stage, DimChoice, Error, EstimatorSpec, KChoice, PipelineConfig, Result};

#[derive(Parser, Debug)]
#[command(name = "cepreg", version, about = "Cepstral regression of replicated time series on covariates")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-stage fit and effect functions.
    Fit(FitArgs),
    /// Two-stage fit with residual-bootstrap bands.
    Bootstrap {
        #[command(flatten)]
        fit: FitArgs,
        /// Number of bootstrap samples.
        #[arg(long = "bootstrap", default_value_t = 500)]
        replicates: usize,
        /// Bands have coverage 1 - alpha.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Writes a synthetic panel.
    Simulate(SimulateArgs),
    /// Runs the ASE benchmark.
    Benchmark(BenchmarkArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EstimatorName {
    Ols,
    Rrr,
    Envelope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Choice {
    Auto,
    Fixed(usize),
}

impl FromStr for Choice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Choice::Auto);
        }
        match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(Choice::Fixed(v)),
            _ => Err(format!("expected 'auto' or a positive integer, got '{s}'")),
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Series CSV (wide or long format).
    #[arg(long)]
    series: PathBuf,
    /// Covariate CSV with a header row.
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorName::Ols)]
    estimator: EstimatorName,
    /// Cepstral truncation: auto (AIC) or an integer.
    #[arg(long, default_value = "auto")]
    k: Choice,
    /// Rank (rrr) or envelope dimension: auto or an integer.
    #[arg(long)]
    dim: Option<Choice>,
    /// Points of the uniform output grid on [0, 1/2].
    #[arg(long, default_value_t = 256)]
    grid: usize,
    /// Divide covariates by their sample standard deviations.
    #[arg(long)]
    standardize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExampleName {
    One,
    Two,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Built-in design.
    #[arg(long, value_enum, conflicts_with = "truth")]
    example: Option<ExampleName>,
    /// JSON file with `alpha`, `beta`, optional `noise_sd` and `covariates`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    t: usize,
    /// Covariates (Example 1 only; Example 2 has 10).
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Covariate correlation for Example 2 and AR covariate designs.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Standard deviation of the design's random log-spectrum terms.
    #[arg(long, default_value_t = DEFAULT_NOISE_SD)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[arg(long, value_enum, default_value_t = ExampleName::One)]
    example: ExampleName,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    t: usize,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 100)]
    repetitions: usize,
    /// Comma-separated estimators; rrr and envelope select their dimension.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "ols")]
    estimators: Vec<EstimatorName>,
    #[arg(long, default_value = "auto")]
    k: Choice,
    #[arg(long, default_value_t = DEFAULT_NOISE_SD)]
    noise_sd: f64,
    #[arg(long)]
    standardize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    output: PathBuf,
}

fn k_choice(c: Choice) -> KChoice {
    match c {
        Choice::Auto => KChoice::Auto,
        Choice::Fixed(k) => KChoice::Fixed(k),
    }
}

fn estimator_spec(name: EstimatorName, dim: Option<Choice>) -> Result<EstimatorSpec> {
    let choice = match dim.unwrap_or(Choice::Auto) {
        Choice::Auto => DimChoice::Auto,
        Choice::Fixed(d) => DimChoice::Fixed(d),
    };
    match name {
        EstimatorName::Ols if dim.is_some() => Err(Error::config("--dim applies only to rrr and envelope")),
        EstimatorName::Ols => Ok(EstimatorSpec::Ols),
        EstimatorName::Rrr => Ok(EstimatorSpec::Rrr(choice)),
        EstimatorName::Envelope => Ok(EstimatorSpec::Envelope(choice)),
    }
}

fn pipeline_config(args: &FitArgs) -> Result<PipelineConfig> {
    if args.grid < 2 {
        return Err(Error::config("--grid must be at least 2"));
    }
    Ok(PipelineConfig {
        k: k_choice(args.k),
        estimator: estimator_spec(args.estimator, args.dim)?,
        standardize: args.standardize,
        ..PipelineConfig::default()
    })
}

fn run_fit(args: &FitArgs, bootstrap: Option<(usize, f64)>) -> Result<()> {
    let config = pipeline_config(args)?;
    let boot = bootstrap.map(|(replicates, alpha)| BootstrapConfig {
        replicates,
        alpha,
        seed: args.seed,
        grid_size: args.grid,
        stage_one: StageOne::Resimulate,
    });
    if let Some(b) = &boot {
        b.validate()?;
    }
    let (panel, report) = ingest(&args.series, &args.covariates)?;
    eprintln!(
        "ingested {} replicates of length {} with {} covariates ({:?}, {} dropped rows)",
        report.n, report.t, report.p, report.format, report.dropped_rows
    );
    let fit = fit_two_stage(&panel, &config)?;
    let bands = match &boot {
        Some(b) => Some(residual_bootstrap_bands(
            panel.covariates(),
            panel.series_len(),
            &fit,
            &config.whittle,
            b,
        )?),
        None => None,
    };
    let effects = match &bands {
        Some(b) => b.point.clone(),
        None => fit.effects(args.grid)?,
    };
    let (json, csv) = emit_fit(
        &fit,
        panel.covariate_names(),
        &effects,
        bands.as_ref(),
        Some(args.seed),
        &args.output,
    )?;
    println!("K = {}, estimator = {}", fit.k(), fit.model.estimator);
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CovariateDesign {
    Normal,
    Uniform,
    Ar { tau: f64 },
}

#[derive(Debug, Deserialize)]
struct TruthFile {
    alpha: Vec<f64>,
    beta: Vec<Vec<f64>>,
    #[serde(default)]
    noise_sd: Vec<f64>,
    #[serde(default)]
    covariates: Option<CovariateDesign>,
}

fn read_truth(path: &Path) -> Result<TruthFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let mut rng = substream(args.seed, 0);
    let spec = match (args.example, &args.truth) {
        (Some(ExampleName::One), _) => Some(ExperimentSpec {
            noise_sd: args.noise_sd,
            ..ExperimentSpec::example1(args.n, args.t, args.p)
        }),
        (Some(ExampleName::Two), _) => Some(ExperimentSpec {
            noise_sd: args.noise_sd,
            ..ExperimentSpec::example2(args.n, args.t, args.tau)
        }),
        (None, Some(_)) => None,
        (None, None) => return Err(Error::config("simulate needs --example or --truth")),
    };
    let sim = match (spec, &args.truth) {
        (Some(spec), _) => spec.generate(&mut rng)?,
        (None, Some(path)) => {
            let file = read_truth(path)?;
            let truth = TrueEffects {
                alpha: file.alpha,
                beta: file.beta,
            };
            let p = truth.p();
            if p == 0 {
                return Err(Error::config("truth needs at least one beta"));
            }
            let x = match file.covariates.unwrap_or(CovariateDesign::Normal) {
                CovariateDesign::Normal => DMatrix::from_fn(args.n, p, |_, _| StandardNormal.sample(&mut rng)),
                CovariateDesign::Uniform => DMatrix::from_fn(args.n, p, |_, _| rng.random::<f64>()),
                CovariateDesign::Ar { tau } => ar_covariates(args.n, p, tau, &mut rng)?,
            };
            generate_from_truth(&truth, x, &file.noise_sd, args.t, &mut rng)?
        }
        (None, None) => unreachable!(),
    };
    let series = args.output.join("series.csv");
    let covariates = args.output.join("covariates.csv");
    export_panel(&sim.panel, &series, &covariates)?;
    let truth_json = serde_json::to_string_pretty(&sim.truth).map_err(|e| Error::Numerical(e.to_string()))?;
    write_text(&args.output, "truth.json", &(truth_json + "\n"))?;
    println!("wrote {}, {} and truth.json", series.display(), covariates.display());
    Ok(())
}

fn run_benchmark_cmd(args: &BenchmarkArgs) -> Result<()> {
    let mut spec = match args.example {
        ExampleName::One => ExperimentSpec::example1(args.n, args.t, args.p),
        ExampleName::Two => ExperimentSpec::example2(args.n, args.t, args.tau),
    };
    spec.repetitions = args.repetitions;
    spec.seed = args.seed;
    spec.noise_sd = args.noise_sd;
    spec.k = k_choice(args.k);
    spec.standardize = args.standardize;
    spec.estimators = args
        .estimators
        .iter()
        .map(|&e| estimator_spec(e, None))
        .collect::<Result<_>>()?;
    let summary = run_benchmark(&spec)?;
    let csv = write_text(&args.output, "benchmark.csv", &summary.to_csv())?;
    let md = write_text(&args.output, "benchmark.md", &summary.to_markdown())?;
    print!("{}", summary.to_markdown());
    for e in &summary.estimators {
        eprintln!("{}: {:.4} s per fit", e.estimator, e.mean_seconds);
    }
    println!("wrote {} and {}", csv.display(), md.display());
    debug_assert!(matches!(spec.example, Example::One | Example::Two));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Fit(args) => run_fit(args, None),
        Command::Bootstrap { fit, replicates, alpha } => run_fit(fit, Some((*replicates, *alpha))),
        Command::Simulate(args) => run_simulate(args),
        Command::Benchmark(args) => run_benchmark_cmd(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

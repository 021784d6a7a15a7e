//! Command-line front end: configuration, artifacts and reports around the
//! `gtdiff` library.

pub mod config;
pub mod report;
pub mod stages;
pub mod svg;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use config::{read_overlay, ConfigError, ConfigSources, Preset, RunConfig};
use stages::{Context, StageTiming};

/// Environment variable that overrides the output directory of a config.
pub const OUT_ENV: &str = "GTDIFF_OUT";
pub const DEFAULT_OUT: &str = "gtdiff-out";

#[derive(Debug, Parser)]
#[command(name = "gtdiff", version, about = "Diffusion-pretrained graph transformers on simulated cohorts")]
pub struct Cli {
    /// Worker threads for fold-level parallelism (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML or JSON config layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Master seed; also the simulation seed unless sim.seed is set.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; beats GTDIFF_OUT and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a cohort.
    Simulate(Common),
    /// Fit the DDPM to a whole cohort.
    DdpmTrain {
        #[command(flatten)]
        common: Common,
        /// Cohort directory; simulated from the config when absent.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Sample a synthetic cohort from a DDPM checkpoint.
    DdpmSample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort that supplies covariates and sites per class.
        #[arg(long)]
        cohort: PathBuf,
        /// Subjects to draw (default: train.synthetic_count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain both encoders on a synthetic cohort.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        synthetic: PathBuf,
    },
    /// Cross-validated pipeline and baselines.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Skip the DDPM pipeline.
        #[arg(long)]
        baselines_only: bool,
    },
    /// Everything: simulate, train, evaluate, distshift, report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Skip the DDPM pipeline.
        #[arg(long)]
        baselines_only: bool,
    },
    /// Metrics from the prediction files of a run directory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Distances between a real and a synthetic cohort.
    Distshift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        /// Directory with encoder_mri.json and encoder_uds.json.
        #[arg(long)]
        encoders: Option<PathBuf>,
    },
    /// Markdown report and plots for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(ConfigError),
    Stage { stage: &'static str, error: anyhow::Error },
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Config(_) => 2,
            Failure::Stage { .. } => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Config(e) => write!(f, "{e}"),
            Failure::Stage { stage, error } => write!(f, "stage `{stage}` failed: {error:#}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

trait StageResult<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> StageResult<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage { stage, error: e.into() })
    }
}

fn output_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn context(common: &Common) -> Result<Context, Failure> {
    let file = common.config.as_deref().map(read_overlay).transpose()?;
    let config = RunConfig::resolve(ConfigSources {
        preset: common.preset,
        file,
        seed: common.seed,
    })?;
    let out = output_dir(common.out.as_deref(), &config);
    let ctx = Context::new(config, out).stage("setup")?;
    ctx.write_config().stage("setup")?;
    Ok(ctx)
}

/// The config a run directory was produced with.
fn run_context(run: &Path) -> Result<Context, Failure> {
    let path = run.join(stages::CONFIG_FILE);
    if !path.exists() {
        return Err(Failure::Stage {
            stage: "setup",
            error: anyhow::anyhow!("missing artifacts in {}: {}", run.display(), stages::CONFIG_FILE),
        });
    }
    let config = RunConfig::resolve(ConfigSources {
        file: Some(read_overlay(&path)?),
        ..ConfigSources::default()
    })?;
    Context::new(config, run.to_path_buf()).stage("setup")
}

fn cohort_or_simulate(ctx: &Context, dir: Option<&Path>) -> Result<gtdiff::graphdata::Cohort, Failure> {
    match dir {
        Some(d) => stages::load_cohort(d).stage("load-cohort"),
        None => stages::simulate(ctx).stage("simulate"),
    }
}

struct Timer(Vec<StageTiming>);

impl Timer {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T, Failure>) -> Result<T, Failure> {
        let start = Instant::now();
        let out = f();
        self.0.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// Simulate, train, evaluate, compare distributions and report into
/// `ctx.out`, then write the manifest.
pub fn full_run(ctx: &Context, baselines_only: bool) -> Result<stages::RunManifest, Failure> {
    let mut t = Timer(Vec::new());
    let cohort = t.time("simulate", || stages::simulate(ctx).stage("simulate"))?;
    let trained = t.time("train", || stages::train(ctx, &cohort, baselines_only).stage("train"))?;
    t.time("evaluate", || {
        let preds = trained.predictions().stage("evaluate")?;
        stages::evaluate_models(ctx, &preds).stage("evaluate")
    })?;
    t.time("distshift", || stages::distshift_from_run(ctx, &trained).stage("distshift"))?;
    t.time("report", || report::render_report(ctx, &ctx.out).stage("report"))?;
    stages::write_manifest(ctx, t.0).stage("manifest")
}

pub fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate(common) => {
            let ctx = context(&common)?;
            let c = stages::simulate(&ctx).stage("simulate")?;
            eprintln!("simulated {} subjects into {}", c.len(), ctx.path(stages::COHORT_DIR).display());
        }
        Command::DdpmTrain { common, cohort } => {
            let ctx = context(&common)?;
            let c = cohort_or_simulate(&ctx, cohort.as_deref())?;
            let path = stages::ddpm_train(&ctx, &c).stage("ddpm-train")?;
            eprintln!("wrote {}", path.display());
        }
        Command::DdpmSample {
            common,
            checkpoint,
            cohort,
            count,
        } => {
            let ctx = context(&common)?;
            let pool = stages::load_cohort(&cohort).stage("load-cohort")?;
            let n = count.unwrap_or(ctx.config.train.synthetic_count);
            let s = stages::ddpm_sample(&ctx, &checkpoint, &pool, n).stage("ddpm-sample")?;
            eprintln!("sampled {} subjects into {}", s.len(), ctx.path("synthetic").display());
        }
        Command::Pretrain { common, synthetic } => {
            let ctx = context(&common)?;
            let s = stages::load_cohort(&synthetic).stage("load-cohort")?;
            stages::pretrain(&ctx, &s).stage("pretrain")?;
            eprintln!("wrote encoders into {}", ctx.path("encoders").display());
        }
        Command::Train {
            common,
            cohort,
            baselines_only,
        } => {
            let ctx = context(&common)?;
            let c = cohort_or_simulate(&ctx, cohort.as_deref())?;
            stages::train(&ctx, &c, baselines_only).stage("train")?;
            eprintln!("wrote predictions into {}", ctx.path(stages::PREDICTIONS_DIR).display());
        }
        Command::Run { common, baselines_only } => {
            let ctx = context(&common)?;
            full_run(&ctx, baselines_only)?;
            eprintln!("run complete: {}", ctx.path(stages::REPORT_FILE).display());
        }
        Command::Evaluate { run } => {
            let ctx = run_context(&run)?;
            let preds = stages::read_predictions(&run).stage("evaluate")?;
            let metrics = stages::evaluate_models(&ctx, &preds).stage("evaluate")?;
            println!("{}", report::model_table(&metrics));
        }
        Command::Distshift {
            common,
            real,
            synthetic,
            encoders,
        } => {
            let ctx = context(&common)?;
            let r = stages::load_cohort(&real).stage("load-cohort")?;
            let r = stages::prepare_whole(&r, ctx.config.train.impute_k).stage("distshift")?;
            let s = stages::load_cohort(&synthetic).stage("load-cohort")?;
            let enc = encoders.as_deref().map(stages::load_encoders).transpose().stage("distshift")?;
            let refs = enc.as_ref().map(|[a, b]| [a, b]);
            stages::distshift(&ctx, &r, &s, refs, None).stage("distshift")?;
            eprintln!("wrote {}", ctx.path(stages::DISTSHIFT_FILE).display());
        }
        Command::Report { run } => {
            let ctx = run_context(&run)?;
            report::render_report(&ctx, &run).stage("report")?;
            eprintln!("wrote {}", ctx.path(stages::REPORT_FILE).display());
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are printed to stderr.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return 2;
        }
        // A pool already built in this process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

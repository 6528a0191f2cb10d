mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use attnlab::analysis::{convergence_report, RateBoundInputs};
use attnlab::attention::{train_gd, Init, LossKind, Scoring, TrainConfig, TrainRecord};
use attnlab::dataset::{load_dataset, EmbeddingKind, GenMode};
use attnlab::experiment::{
    self, generate_dataset, load_config, run_experiment, trace_csv, ExperimentConfig,
    ExperimentName, HeadChoice, Instance, InstanceSpec, Params, DEFAULT_SEED,
};
use attnlab::selftest::{run_selftest, SelftestOptions};
use attnlab::svm::SvmOptions;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Acceptance(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Acceptance(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl From<attnlab::Error> for CliError {
    fn from(e: attnlab::Error) -> Self {
        use attnlab::Error as E;
        match e {
            E::NonFiniteLoss(_)
            | E::DomainError { .. }
            | E::NoConvergence { .. }
            | E::RankDeficient(_)
            | E::ZeroMatrix => Self::Numeric(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Config(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Token-priority graphs, graph-SVM and attention training experiments.
#[derive(Parser)]
#[command(name = "attnlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON.
    GenData(GenDataArgs),
    /// Build the token-priority graphs of a dataset.
    BuildGraph(BuildGraphArgs),
    /// Solve the graph SVM of a dataset.
    SolveSvm(SolveSvmArgs),
    /// Train the attention weights by gradient descent.
    Train(TrainArgs),
    /// Summarize a training trace against the dataset's reference solutions.
    Analyze(AnalyzeArgs),
    /// Run a named experiment and write its tables, manifest and summary.
    Exp(ExpArgs),
    /// Run the property suite at small sizes.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cyclic,
    Acyclic,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    Orthonormal,
    UnitSphere,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Tied,
    General,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringArg {
    Head,
    Masked,
}

impl From<HeadArg> for HeadChoice {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Tied => Self::Tied,
            HeadArg::General => Self::General,
            HeadArg::None => Self::None,
        }
    }
}

impl From<ScoringArg> for Scoring {
    fn from(s: ScoringArg) -> Self {
        match s {
            ScoringArg::Head => Self::Head,
            ScoringArg::Masked => Self::Masked,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Vocabulary size.
    #[arg(short = 'K', long = "vocab", default_value_t = 6)]
    k: usize,
    /// Embedding dimension.
    #[arg(short = 'd', long = "dim", default_value_t = 8)]
    d: usize,
    /// Number of samples.
    #[arg(short = 'n', long = "samples", default_value_t = 6)]
    n: usize,
    /// Sequence length.
    #[arg(short = 'T', long = "len", default_value_t = 4)]
    t: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Cyclic)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = EmbeddingArg::UnitSphere)]
    embedding: EmbeddingArg,
    #[arg(long, value_enum, default_value_t = HeadArg::Tied)]
    head: HeadArg,
    /// Gaussian noise added to the tied head for `--head general`.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, env = "ATTNLAB_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Output file (stdout when absent).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long)]
    data: PathBuf,
    /// Emit Graphviz DOT instead of JSON.
    #[arg(long)]
    dot: bool,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveSvmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200_000)]
    max_sweeps: usize,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON file with any of the flags below; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossKind>,
    /// Scoring rule (default: head when the dataset has one, else masked).
    #[arg(long, value_enum)]
    scoring: Option<ScoringArg>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Normalized gradient steps.
    #[arg(long)]
    normalized: bool,
    /// `zero` or `gauss:<sigma>`.
    #[arg(long)]
    init: Option<Init>,
    #[arg(long, env = "ATTNLAB_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    record_every: Option<usize>,
    /// Trace CSV path (stdout when absent).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Summary JSON path (stderr when absent).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Final weights as JSON.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    loss: Option<LossKind>,
    scoring: Option<String>,
    eta: Option<f64>,
    iters: Option<usize>,
    normalized: Option<bool>,
    init: Option<String>,
    seed: Option<u64>,
    record_every: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trace CSV written by `train`.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value = "log")]
    loss: LossKind,
    #[arg(long, value_enum)]
    scoring: Option<ScoringArg>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExpArgs {
    /// Experiment name.
    name: ExperimentName,
    /// JSON config or a manifest from an earlier run; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default `runs/<name>`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(short = 'K', long = "vocab")]
    k: Option<usize>,
    #[arg(short = 'd', long = "dim")]
    d: Option<usize>,
    #[arg(short = 'n', long = "samples")]
    n: Option<usize>,
    #[arg(short = 'T', long = "len")]
    t: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, env = "ATTNLAB_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    head: Option<HeadChoice>,
    #[arg(long)]
    normalized: Option<bool>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    record_every: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Comma-separated radii.
    #[arg(long, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    /// Threshold override, `check=value`; repeatable.
    #[arg(long = "threshold", value_parser = parse_threshold)]
    thresholds: Vec<(String, f64)>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_threshold(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or("expected check=value")?;
    let v = value.parse::<f64>().map_err(|e| e.to_string())?;
    Ok((name.to_string(), v))
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, env = "ATTNLAB_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Flip a sign in the analytic gradient; the gradient check must fail.
    #[arg(long)]
    corrupt_gradient: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn write_or_print(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> CliResult {
    let spec = InstanceSpec {
        k: a.k,
        d: a.d,
        n: a.n,
        t: a.t,
        mode: match a.mode {
            ModeArg::Cyclic => GenMode::Cyclic,
            ModeArg::Acyclic => GenMode::Acyclic,
        },
        embedding: match a.embedding {
            EmbeddingArg::Orthonormal => EmbeddingKind::Orthonormal,
            EmbeddingArg::UnitSphere => EmbeddingKind::UnitSphere,
        },
        head: a.head.into(),
        noise: a.noise,
        loss: LossKind::Log,
        seed: a.seed,
    };
    let ds = generate_dataset::<f64>(&spec)?;
    write_or_print(a.out.as_deref(), &(attnlab::dataset::dataset_to_json(&ds)? + "\n"))
}

fn build_graph(a: &BuildGraphArgs) -> CliResult {
    let ds = load_dataset::<f64>(&a.data)?;
    let graphs = attnlab::graph::GraphSet::from_dataset(&ds);
    let text = if a.dot {
        output::graphs_dot(&graphs)
    } else {
        serde_json::to_string_pretty(&output::graphs_json(&graphs))? + "\n"
    };
    write_or_print(a.out.as_deref(), &text)
}

fn solve_svm(a: &SolveSvmArgs) -> CliResult {
    let ds = load_dataset::<f64>(&a.data)?;
    let opts = SvmOptions {
        max_sweeps: a.max_sweeps,
        ..SvmOptions::default()
    };
    let value = output::svm_json(&ds, &opts);
    write_or_print(a.out.as_deref(), &(serde_json::to_string_pretty(&value)? + "\n"))
}

fn scoring_for(arg: Option<ScoringArg>, ds: &attnlab::Dataset64) -> Scoring {
    arg.map_or_else(|| Scoring::default_for(ds), Scoring::from)
}

fn parse_scoring(s: &str) -> CliResult<ScoringArg> {
    ScoringArg::from_str(s, true).map_err(|_| CliError::Config(format!("unknown scoring `{s}`")))
}

fn train(a: &TrainArgs) -> CliResult {
    let file: TrainFile = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => TrainFile::default(),
    };
    let ds = load_dataset::<f64>(&a.data)?;
    let loss = a.loss.or(file.loss).unwrap_or(LossKind::Log);
    let scoring_arg = match (a.scoring, &file.scoring) {
        (Some(s), _) => Some(s),
        (None, Some(s)) => Some(parse_scoring(s)?),
        (None, None) => None,
    };
    let scoring = scoring_for(scoring_arg, &ds);
    let init = match (a.init, &file.init) {
        (Some(i), _) => i,
        (None, Some(s)) => s.parse()?,
        (None, None) => Init::Zero,
    };
    let defaults = TrainConfig::<f64>::default();
    let cfg = TrainConfig {
        eta: a.eta.or(file.eta).unwrap_or(defaults.eta),
        iters: a.iters.or(file.iters).unwrap_or(defaults.iters),
        normalized: a.normalized || file.normalized.unwrap_or(false),
        init,
        seed: a.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        record_every: a.record_every.or(file.record_every).unwrap_or(defaults.record_every),
        projection: None,
    };
    cfg.validate()?;
    let inst = Instance::from_dataset(ds, loss, scoring, &SvmOptions::default())?;
    let trace = train_gd(&inst.objective, &cfg, &inst.references())?;
    write_or_print(a.trace.as_deref(), &trace_csv(&trace.records))?;
    if let Some(p) = &a.weights {
        write_or_print(Some(p), &(serde_json::to_string(&trace.w.to_rows())? + "\n"))?;
    }
    let last = trace.last();
    let summary = serde_json::json!({
        "final_corr": last.and_then(|r| r.corr_svm),
        "final_dist": last.and_then(|r| r.dist_fin),
        "final_loss": last.map(|r| r.loss),
        "loss_inf": inst.loss_inf().ok(),
        "wall_ms": trace.wall_ms,
    });
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    match &a.summary {
        Some(p) => write_or_print(Some(p), &text)?,
        None => eprint!("{text}"),
    }
    trace.check()?;
    Ok(())
}

fn read_trace(path: &Path) -> CliResult<Vec<TrainRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Config(e.to_string()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<TrainRecord>, _>>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn analyze(a: &AnalyzeArgs) -> CliResult {
    let ds = load_dataset::<f64>(&a.data)?;
    let scoring = scoring_for(a.scoring, &ds);
    let records = read_trace(&a.trace)?;
    if records.is_empty() {
        return Err(CliError::Config(format!("{}: empty trace", a.trace.display())));
    }
    let inst = Instance::from_dataset(ds, a.loss, scoring, &SvmOptions::default())?;
    let loss_inf = inst.loss_inf().ok();
    let report = convergence_report(&records, loss_inf);
    let rate: RateBoundInputs = inst.rate_inputs();
    let value = serde_json::json!({
        "report": report,
        "loss_inf": loss_inf,
        "rate_bound_inputs": rate,
        "svm_status": inst.svm.status,
        "w_svm_norm": inst.svm.norm(),
        "w_fin_norm": inst.w_fin.frob_norm(),
        "fin_dim": inst.fin.dim(),
    });
    write_or_print(a.out.as_deref(), &(serde_json::to_string_pretty(&value)? + "\n"))
}

fn exp(a: &ExpArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::new(a.name),
    };
    if cfg.name != a.name {
        return Err(CliError::Config(format!(
            "config is for `{}` but `{}` was requested",
            cfg.name.as_str(),
            a.name.as_str()
        )));
    }
    let flags = Params {
        k: a.k,
        d: a.d,
        n: a.n,
        t: a.t,
        eta: a.eta,
        iters: a.iters,
        trials: a.trials,
        seed: a.seed,
        loss: a.loss,
        head: a.head,
        normalized: a.normalized,
        noise: a.noise,
        record_every: a.record_every,
        epsilon: a.epsilon,
        grid: a.grid.clone(),
        radii: a.radii.clone(),
    };
    cfg.params = cfg.params.overlay(&flags);
    cfg.thresholds.extend(a.thresholds.iter().cloned());
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    let report = run_experiment(&cfg)?;
    let dir = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(a.name.as_str()));
    report.write(&dir)?;
    for c in &report.checks {
        let op = match c.comparison {
            experiment::Comparison::AtLeast => ">=",
            experiment::Comparison::AtMost => "<=",
        };
        println!(
            "{} {}: {} {op} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    println!("wrote {}", dir.display());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!("{} failed its checks", a.name.as_str())))
    }
}

const SELFTEST_BUDGET: Duration = Duration::from_secs(60);

fn selftest(a: &SelftestArgs) -> CliResult {
    let report = run_selftest(&SelftestOptions {
        seed: a.seed,
        corrupt_gradient: a.corrupt_gradient,
    });
    let in_budget = report.elapsed_ms < SELFTEST_BUDGET.as_secs_f64() * 1e3;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for r in &report.results {
            println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        }
        println!(
            "{} runtime: {:.0} ms",
            if in_budget { "PASS" } else { "FAIL" },
            report.elapsed_ms
        );
    }
    let failed = report.results.iter().filter(|r| !r.passed).count() + usize::from(!in_budget);
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!("{failed} selftest properties failed")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::BuildGraph(a) => build_graph(a),
        Command::SolveSvm(a) => solve_svm(a),
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Exp(a) => exp(a),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! The `percept` command: argument parsing, config merging, run directories
//! and exit codes. Subcommands are thin wrappers over the core crate.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use percept_core::cells::CellsError;
use percept_core::harness::HarnessError;
use percept_core::injection::InjectionError;
use percept_core::nn::NnError;
use percept_core::ontology::OntologyError;
use percept_core::probes::ProbeError;
use percept_core::trains::DataError;
use serde::{Deserialize, Serialize};

use config::FileConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const THREADS_ENV: &str = "PERCEPT_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric fault: {m}"),
        }
    }
}

fn classify(numeric: bool, unknown_concept: bool, msg: String) -> CliError {
    if numeric {
        CliError::Numeric(msg)
    } else if unknown_concept {
        CliError::Usage(msg)
    } else {
        CliError::Data(msg)
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let unknown = matches!(&e, HarnessError::Ontology(OntologyError::UnknownConcept(_)));
        classify(e.is_numeric(), unknown, e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        classify(e.is_numeric(), false, e.to_string())
    }
}

impl From<CellsError> for CliError {
    fn from(e: CellsError) -> Self {
        classify(e.is_numeric(), false, e.to_string())
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        classify(e.is_numeric(), false, e.to_string())
    }
}

impl From<InjectionError> for CliError {
    fn from(e: InjectionError) -> Self {
        classify(e.is_numeric(), false, e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let unknown = matches!(&e, DataError::Ontology(OntologyError::UnknownConcept(_)));
        classify(false, unknown, e.to_string())
    }
}

impl From<OntologyError> for CliError {
    fn from(e: OntologyError) -> Self {
        let unknown = matches!(&e, OntologyError::UnknownConcept(_));
        classify(false, unknown, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "percept", version, about = "Find concept neurons in a small image classifier and inject concepts into it")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with top-level seed/threads and one table per subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (falls back to PERCEPT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory instead of runs/{timestamp}-{label}.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run directory label; defaults to the subcommand name.
    #[arg(long, global = true)]
    label: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled train-image dataset.
    GenData(GenDataArgs),
    /// Train the task classifier on a dataset.
    Train(TrainArgs),
    /// Per-neuron sensitivity of one concept.
    Scan(ScanArgs),
    /// Threshold-searched concept neurons and their injection plans.
    Select(SelectArgs),
    /// Run samples with injection plans applied.
    Inject(InjectArgs),
    /// Train concept probes on hidden activations.
    Probe(ProbeArgs),
    /// Run one experiment pipeline and write its report.
    Experiment {
        #[command(subcommand)]
        kind: ExperimentKind,
    },
    /// Serve the JSON API.
    Serve(ServeArgs),
    /// Write a concept's activation matrices as a dump file.
    ExportDump(DumpArgs),
}

#[derive(Debug, Subcommand)]
enum ExperimentKind {
    /// Injection success per sensitivity metric.
    Metrics(MetricsArgs),
    /// Median against mode activation values.
    Activation(ExperimentArgs),
    /// Success against the number of injected neurons.
    Neurons(ExperimentArgs),
    /// Success against the number of labelled samples.
    Data(ExperimentArgs),
    /// Probe flip rates when one concept is injected into samples of another.
    Relation(RelationArgs),
    /// Fixing false negatives by injecting missed concepts.
    Correction(CorrectionArgs),
    /// Neuron counts for relevant and non-relevant concepts.
    Census(ExperimentArgs),
}

/// Options shared by every command that builds a workbench; they land in
/// the `[harness]` table.
#[derive(Debug, Clone, Default, Args)]
struct HarnessArgs {
    /// Neurons considered: dense, all, or layers:I,J.
    #[arg(long)]
    scope: Option<String>,
    /// Cap on positives and on negatives used to find concept neurons.
    #[arg(long)]
    per_class: Option<usize>,
    /// Cap on each evaluation set.
    #[arg(long)]
    set_cap: Option<usize>,
    #[arg(long)]
    validation_size: Option<usize>,
    /// Probe architecture: linear or mlp16.
    #[arg(long)]
    probe_arch: Option<String>,
}

impl HarnessArgs {
    fn overrides(&self) -> Result<toml::Table, CliError> {
        let mut t = toml::Table::new();
        if let Some(s) = &self.scope {
            let scope: percept_core::cells::NeuronScope = s.parse().map_err(CliError::Usage)?;
            t.insert("scope".into(), toml::Value::try_from(scope).expect("scope serialises"));
        }
        for (k, v) in [("per_class", self.per_class), ("set_cap", self.set_cap), ("validation_size", self.validation_size)] {
            if let Some(v) = v {
                t.insert(k.into(), toml::Value::Integer(v as i64));
            }
        }
        if let Some(a) = &self.probe_arch {
            let arch: percept_core::probes::ProbeArch = a.parse().map_err(CliError::Usage)?;
            t.insert("probe_arch".into(), toml::Value::String(arch.to_string()));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Fraction of task positives.
    #[arg(long, default_value_t = 0.5)]
    balance: f64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset directory, reported but not trained on.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    concept: Option<String>,
    /// spearman, accuracy, intersection or all.
    #[arg(long, default_value = "all")]
    metric: String,
    /// Neurons scanned: dense, all, or layers:I,J.
    #[arg(long, default_value = "dense")]
    scope: String,
    /// Positives and negatives drawn from the dataset, each.
    #[arg(long, default_value_t = 1000)]
    per_class: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    concept: Option<String>,
    #[arg(long, default_value = "dense")]
    scope: String,
    #[arg(long, default_value_t = 1000)]
    per_class: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectArgs {
    #[command(flatten)]
    #[serde(skip)]
    harness: HarnessArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Concepts to select for; defaults to the relevant concepts.
    #[arg(long = "concept")]
    concepts: Vec<String>,
    #[arg(long, default_value = "intersection")]
    metric: String,
    /// Activation statistic: median or mode.
    #[arg(long, default_value = "median")]
    method: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InjectArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Plan file (repeatable).
    #[arg(long = "plan")]
    plans: Vec<PathBuf>,
    /// Selection file from `select` (repeatable); its plan for --state is used.
    #[arg(long = "selection")]
    selections: Vec<PathBuf>,
    #[arg(long, default_value = "present")]
    state: String,
    /// Label filter such as `TypeA=false,∃has.ReinforcedCar=true`.
    #[arg(long, default_value = "")]
    filter: String,
    #[arg(long, default_value_t = 100)]
    limit: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeArgs {
    #[command(flatten)]
    #[serde(skip)]
    harness: HarnessArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "concept", default_values = ["EmptyTrain", "∃has.PassengerCar"])]
    concepts: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ExperimentArgs {
    #[command(flatten)]
    #[serde(skip)]
    harness: HarnessArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Concepts to run; defaults to the relevant concepts of the harness config.
    #[arg(long = "concept")]
    concepts: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct MetricsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: ExperimentArgs,
    #[arg(long = "metric", default_values = ["spearman", "accuracy", "intersection"])]
    metrics: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct RelationArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: ExperimentArgs,
    #[arg(long, default_value = "EmptyTrain")]
    first: String,
    #[arg(long, default_value = "∃has.PassengerCar")]
    second: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct CorrectionArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: ExperimentArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServeArgs {
    #[command(flatten)]
    #[serde(skip)]
    harness: HarnessArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of selection-*.json files; computed at startup when absent.
    #[arg(long)]
    selections: Option<PathBuf>,
    /// Probe file (repeatable); trained at startup when none is given.
    #[arg(long = "probe")]
    probes: Vec<PathBuf>,
    /// Bind address. Anything but loopback exposes an unauthenticated API.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

/// State every subcommand shares once flags and config are merged.
pub(crate) struct Context {
    pub seed: u64,
    pub threads: Option<usize>,
    pub file: FileConfig,
    pub run_dir: PathBuf,
    pub command: String,
}

impl Context {
    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        value.as_deref().ok_or_else(|| CliError::Usage(format!("{} needs --{flag}", self.command)))
    }

    /// Writes the effective configuration next to the command's outputs.
    pub fn echo(
        &self,
        section: &str,
        args: &impl Serialize,
        harness: Option<&percept_core::harness::HarnessConfig>,
    ) -> Result<(), CliError> {
        let mut t = toml::Table::new();
        t.insert("command".into(), self.command.clone().into());
        t.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        if let Some(n) = self.threads {
            t.insert("threads".into(), toml::Value::Integer(n as i64));
        }
        t.insert(section.into(), toml::Value::try_from(args).map_err(|e| CliError::Usage(e.to_string()))?);
        if let Some(h) = harness {
            t.insert("harness".into(), toml::Value::try_from(h).map_err(|e| CliError::Usage(e.to_string()))?);
        }
        let text = toml::to_string(&t).map_err(|e| CliError::Usage(e.to_string()))?;
        std::fs::write(self.run_dir.join("config.toml"), &text)?;
        log::info!("seed {} | effective config written to {}", self.seed, self.run_dir.join("config.toml").display());
        Ok(())
    }
}

/// Argument ids of the subcommand at `path` (e.g. `["experiment", "neurons"]`).
pub(crate) fn arg_ids(path: &str) -> Vec<String> {
    let mut cmd = Cli::command();
    for name in path.split(' ') {
        cmd = match cmd.find_subcommand(name) {
            Some(c) => c.clone(),
            None => return Vec::new(),
        };
    }
    cmd.get_arguments().map(|a| a.get_id().to_string()).collect()
}

/// Harness flags typed on the command line; serde skips them, so they are
/// re-read after the config merge.
pub(crate) fn reparse_harness(matches: &ArgMatches) -> HarnessArgs {
    HarnessArgs::from_arg_matches(matches).unwrap_or_default()
}

fn run_dir(out: Option<PathBuf>, label: &str) -> Result<PathBuf, CliError> {
    let dir = match out {
        Some(d) => d,
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = PathBuf::from("runs").join(format!("{stamp}-{label}"));
            let mut dir = base.clone();
            let mut n = 2;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn init_threads(n: Option<usize>) {
    if let Some(n) = n {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_target(false).try_init();
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&matches) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn execute(matches: &ArgMatches) -> Result<(), CliError> {
    let cli = Cli::from_arg_matches(matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => file.top::<u64>("seed")?.unwrap_or(0),
    };
    if seed > i64::MAX as u64 {
        return Err(CliError::Usage(format!("seed {seed} exceeds {}", i64::MAX)));
    }
    let env_threads = std::env::var(THREADS_ENV)
        .ok()
        .map(|v| v.parse::<usize>().map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v} is not a count"))))
        .transpose()?;
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => file.top::<usize>("threads")?.or(env_threads),
    };
    if threads == Some(0) {
        return Err(CliError::Usage("--threads must be positive".into()));
    }
    init_threads(threads);

    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let (command, sub) = match (&cli.command, sub.subcommand()) {
        (Command::Experiment { .. }, Some((kind, m))) => (format!("experiment {kind}"), m),
        _ => (name.to_string(), sub),
    };
    let label = cli.label.clone().unwrap_or_else(|| command.replace(' ', "-"));
    let ctx = Context { seed, threads, file, run_dir: run_dir(cli.out.clone(), &label)?, command };
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a, sub),
        Command::Train(a) => commands::train(&ctx, a, sub),
        Command::Scan(a) => commands::scan(&ctx, a, sub),
        Command::ExportDump(a) => commands::export_dump(&ctx, a, sub),
        Command::Select(a) => commands::select(&ctx, a, sub),
        Command::Inject(a) => commands::inject(&ctx, a, sub),
        Command::Probe(a) => commands::probe(&ctx, a, sub),
        Command::Experiment { kind } => commands::experiment(&ctx, kind, sub),
        Command::Serve(a) => commands::serve(&ctx, a, sub),
    }
}

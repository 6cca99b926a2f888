//! Command-line front end: simulate, preprocess, fit-copula, fit-dml, kfold.
//!
//! Every command writes its outputs plus one `manifest.json` into `--out`.
//! Settings merge as command-line flag, then config file, then defaults.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::copula::FamilyKind;
use crate::dataset::{
    classify, discretize_wait, format_cell, jenks_breaks, kfold_split, min_max_normalize, ColumnKind,
    ColumnSpec, Dataset, DatasetError, DegenerateGroup, NumericTable, Role, VariableSchema,
};
use crate::dml::{
    run_dml_detailed, DmlColumns, DmlConfig, DmlError, DmlReport, CrossFit, DML_FORMAT,
};
use crate::forest::{fit_forest, ForestConfig, ForestError, MaxFeatures, FOREST_FORMAT};
use crate::joint::{
    compare_families, fit_joint_mle, FamilyComparison, FamilyOutcome, FitOptions, JointError,
    JointReport, JointSpec, JOINT_FORMAT,
};
use crate::synth::{
    self, generate_copula_data, generate_dml_data, infeasible_alpha, DgpDocument, DgpSpec, DmlTruth,
    SynthError, DGP_FORMAT, DML_OUTCOME_COLUMN, POLICY_COLUMN, STRESS_COLUMN, WAIT_COLUMN,
};

pub const MANIFEST_FORMAT: &str = "manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEED_ENV: &str = "ORTHOESTIM_SEED";
pub const DEFAULT_SIM_N: usize = 1000;
pub const DEFAULT_K_FOLDS: usize = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("SchemaError: {0}")]
    Schema(String),
    #[error("BadFoldCount: k={k} for n={n} (need 2 <= k <= n)")]
    BadFoldCount { n: usize, k: usize },
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("config file {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("all families failed: {0}")]
    AllFamiliesFailed(String),
    #[error(transparent)]
    Dataset(DatasetError),
    #[error(transparent)]
    Joint(JointError),
    #[error(transparent)]
    Dml(DmlError),
    #[error(transparent)]
    Forest(ForestError),
    #[error(transparent)]
    Synth(SynthError),
}

impl CliError {
    /// 2 for argument problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::BadFoldCount { .. } | CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::MissingColumn { column } => {
                CliError::Schema(format!("missing column '{column}'"))
            }
            DatasetError::Schema(m) => CliError::Schema(m),
            DatasetError::BadFoldCount { n, k } => CliError::BadFoldCount { n, k },
            other => CliError::Dataset(other),
        }
    }
}

impl From<JointError> for CliError {
    fn from(e: JointError) -> Self {
        match e {
            JointError::Dataset(d) => d.into(),
            other => CliError::Joint(other),
        }
    }
}

impl From<DmlError> for CliError {
    fn from(e: DmlError) -> Self {
        match e {
            DmlError::Dataset(d) => d.into(),
            DmlError::TooFewRows { n, k } if k < 2 || k > n => CliError::BadFoldCount { n, k },
            other => CliError::Dml(other),
        }
    }
}

impl From<ForestError> for CliError {
    fn from(e: ForestError) -> Self {
        match e {
            ForestError::Dataset(d) => d.into(),
            other => CliError::Forest(other),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Dataset(d) => d.into(),
            SynthError::Joint(j) => j.into(),
            SynthError::Dml(d) => d.into(),
            SynthError::UnknownPreset(p) => CliError::Usage(format!(
                "unknown preset `{p}` (available: {})",
                synth::PRESETS.join(", ")
            )),
            other => CliError::Synth(other),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "orthoestim", version, about = "Copula joint-choice models and double machine learning")]
pub struct Cli {
    /// Base random seed. Falls back to the config file, then ORTHOESTIM_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file with per-command settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Re-run the command recorded in a manifest.
    #[arg(long, conflicts_with = "config")]
    pub from_manifest: Option<PathBuf>,
    /// Output directory override for --from-manifest.
    #[arg(long = "out", requires = "from_manifest")]
    pub replay_out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset with its ground truth.
    Simulate(SimulateArgs),
    /// Append discretized and normalized columns to a CSV file.
    Preprocess(PreprocessArgs),
    /// Fit the copula joint model for one or more families and rank them by BIC.
    FitCopula(FitCopulaArgs),
    /// Estimate a binary policy effect by cross-fitted double machine learning.
    FitDml(FitDmlArgs),
    /// Write a seeded k-fold assignment.
    Kfold(KfoldArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Preprocess(_) => "preprocess",
            Command::FitCopula(_) => "fit-copula",
            Command::FitDml(_) => "fit-dml",
            Command::Kfold(_) => "kfold",
        }
    }

    fn merged(self, file: &ConfigFile) -> Command {
        match self {
            Command::Simulate(a) => Command::Simulate(a.merged(file.simulate.clone())),
            Command::Preprocess(a) => Command::Preprocess(a.merged(file.preprocess.clone())),
            Command::FitCopula(a) => Command::FitCopula(a.merged(file.fit_copula.clone())),
            Command::FitDml(a) => Command::FitDml(a.merged(file.fit_dml.clone())),
            Command::Kfold(a) => Command::Kfold(a.merged(file.kfold.clone())),
        }
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v: Vec<&mut PathBuf> = Vec::new();
        match self {
            Command::Simulate(a) => v.extend(a.spec.as_mut().into_iter().chain(a.out.as_mut())),
            Command::Preprocess(a) => v.extend(a.data.as_mut().into_iter().chain(a.out.as_mut())),
            Command::FitCopula(a) => v.extend(
                a.data.as_mut().into_iter().chain(a.schema.as_mut()).chain(a.out.as_mut()),
            ),
            Command::FitDml(a) => v.extend(
                a.data
                    .as_mut()
                    .into_iter()
                    .chain(a.schema.as_mut())
                    .chain(a.out.as_mut())
                    .chain(a.check_truth.as_mut().and_then(Option::as_mut)),
            ),
            Command::Kfold(a) => v.extend(a.data.as_mut().into_iter().chain(a.out.as_mut())),
        }
        v
    }

    /// Makes paths absolute and fills implied ones, so the settings replay anywhere.
    fn absolutize(&mut self, base: &Path) {
        for p in self.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Command::FitDml(a) = self {
            if let (Some(None), Some(data)) = (&a.check_truth, &a.data) {
                a.check_truth = Some(Some(data.with_file_name("truth.json")));
            }
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        let slot = match self {
            Command::Simulate(a) => &mut a.out,
            Command::Preprocess(a) => &mut a.out,
            Command::FitCopula(a) => &mut a.out,
            Command::FitDml(a) => &mut a.out,
            Command::Kfold(a) => &mut a.out,
        };
        *slot = Some(out);
    }
}

/// Fills every `None` field of `self` from the config-file table.
macro_rules! merge_options {
    ($t:ident { $($f:ident),* $(,)? } $(, bools { $($b:ident),* })?) => {
        impl $t {
            fn merged(self, file: Option<$t>) -> $t {
                let file = file.unwrap_or_default();
                $t {
                    $($f: self.$f.or(file.$f),)*
                    $($($b: self.$b || file.$b,)*)?
                }
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SimulateArgs {
    /// Named generator preset.
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    /// Generator spec file (dgp/1 JSON).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of rows (default 1000 for presets, the file's value for specs).
    #[arg(long)]
    pub n: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_options!(SimulateArgs { preset, spec, n, out });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct PreprocessArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Natural-breaks classes as COLUMN:CLASSES; adds COLUMN_class (0-based).
    #[arg(long)]
    pub jenks: Option<Vec<String>>,
    /// Duration column in seconds; adds wait_cat (1: <5 s, 2: 5-20 s, 3: >20 s).
    #[arg(long)]
    pub wait_categories: Option<String>,
    /// Min-max scaling as COLUMN or COLUMN:GROUP_COLUMN; adds COLUMN_norm.
    #[arg(long)]
    pub normalize: Option<Vec<String>>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_options!(PreprocessArgs { data, jenks, wait_categories, normalize, out });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FitCopulaArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Schema JSON; supplies column kinds and wait categories.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Binary outcome column (default stress_high).
    #[arg(long)]
    pub stress: Option<String>,
    /// Ordinal outcome column (default wait_cat).
    #[arg(long)]
    pub wait: Option<String>,
    /// Binary policy column (default density_low).
    #[arg(long)]
    pub policy: Option<String>,
    /// Covariates of the binary equation (default: columns x1, x2, ...).
    #[arg(long, value_delimiter = ',')]
    pub stress_covariates: Option<Vec<String>>,
    /// Covariates of the ordinal equation (default: the policy, then z1, z2, ...).
    #[arg(long, value_delimiter = ',')]
    pub wait_covariates: Option<Vec<String>>,
    /// Number of ordinal categories (default from the schema, else 3).
    #[arg(long)]
    pub levels: Option<usize>,
    /// Families to fit (default frank,fgm,gaussian,product).
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<String>>,
    /// Optimizer iteration cap per family (default 500).
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Gradient max-norm stopping tolerance (default 1e-6).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_options!(FitCopulaArgs {
    data, schema, stress, wait, policy, stress_covariates, wait_covariates, levels, families,
    max_iter, tol, out
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeScale {
    /// Use the outcome column as is.
    Raw,
    /// Treat the outcome as seconds and use its 3-level wait category.
    WaitCategories,
}

/// Forest settings that only the config file can set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ForestSettings {
    pub n_trees: Option<usize>,
    pub min_samples_split: Option<usize>,
    pub min_samples_leaf: Option<usize>,
    pub max_features: Option<MaxFeatures>,
    pub max_depth: Option<usize>,
    pub bootstrap: Option<bool>,
}

impl ForestSettings {
    fn or(self, other: ForestSettings) -> ForestSettings {
        ForestSettings {
            n_trees: self.n_trees.or(other.n_trees),
            min_samples_split: self.min_samples_split.or(other.min_samples_split),
            min_samples_leaf: self.min_samples_leaf.or(other.min_samples_leaf),
            max_features: self.max_features.or(other.max_features),
            max_depth: self.max_depth.or(other.max_depth),
            bootstrap: self.bootstrap.or(other.bootstrap),
        }
    }

    fn apply(&self, mut c: ForestConfig) -> ForestConfig {
        c.n_trees = self.n_trees.unwrap_or(c.n_trees);
        c.min_samples_split = self.min_samples_split.unwrap_or(c.min_samples_split);
        c.min_samples_leaf = self.min_samples_leaf.unwrap_or(c.min_samples_leaf);
        c.max_features = self.max_features.unwrap_or(c.max_features);
        c.max_depth = self.max_depth.or(c.max_depth);
        c.bootstrap = self.bootstrap.unwrap_or(c.bootstrap);
        c
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FitDmlArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Schema JSON; supplies roles and column kinds.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Outcome column (default: schema outcome, else wait_time).
    #[arg(long)]
    pub outcome: Option<String>,
    /// Binary policy column (default: schema policy, else density_low).
    #[arg(long)]
    pub policy: Option<String>,
    /// Confounder columns (default: schema covariates, else every other column).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Number of cross-fitting folds (default 5).
    #[arg(long)]
    pub k_folds: Option<usize>,
    /// Confidence level of the reported interval (default 0.95).
    #[arg(long)]
    pub confidence: Option<f64>,
    /// Trees in the outcome forest (default 100).
    #[arg(long)]
    pub outcome_trees: Option<usize>,
    /// Trees in the policy forest (default 200).
    #[arg(long)]
    pub policy_trees: Option<usize>,
    #[arg(long, value_enum)]
    pub outcome_scale: Option<OutcomeScale>,
    /// Compare with a truth file (default: truth.json next to the data).
    #[arg(long, num_args = 0..=1)]
    pub check_truth: Option<Option<PathBuf>>,
    /// Also write full-data outcome and policy forests (forest/1).
    #[arg(long)]
    pub dump_forests: bool,
    #[arg(skip)]
    pub outcome_learner: Option<ForestSettings>,
    #[arg(skip)]
    pub policy_learner: Option<ForestSettings>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_options!(FitDmlArgs {
    data, schema, outcome, policy, covariates, k_folds, confidence, outcome_trees, policy_trees,
    outcome_scale, check_truth, outcome_learner, policy_learner, out
}, bools { dump_forests });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct KfoldArgs {
    /// CSV whose row count sets n.
    #[arg(long, conflicts_with = "n")]
    pub data: Option<PathBuf>,
    /// Number of rows.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of folds (default 5).
    #[arg(long)]
    pub k: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_options!(KfoldArgs { data, n, k, out });

/// Contents of a `--config` TOML file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub simulate: Option<SimulateArgs>,
    pub preprocess: Option<PreprocessArgs>,
    pub fit_copula: Option<FitCopulaArgs>,
    pub fit_dml: Option<FitDmlArgs>,
    pub kfold: Option<KfoldArgs>,
}

/// Fully resolved run settings. Stored in the manifest and used for replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Invocation {
    /// Seed given by flag, config file or environment; `None` means default.
    pub explicit_seed: Option<u64>,
    pub threads: Option<usize>,
    pub command: Command,
}

impl Invocation {
    fn seed(&self) -> u64 {
        self.explicit_seed.unwrap_or(0)
    }
}

/// One per run, written next to the outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub seed: u64,
    pub invocation: Invocation,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Output file name to format tag.
    pub formats: BTreeMap<String, String>,
    pub details: serde_json::Value,
    pub wall_clock_seconds: f64,
}

/// Files produced by a command, kept in memory until all succeed.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>, Option<&'static str>)>,
    inputs: Vec<PathBuf>,
    details: serde_json::Value,
    seed: u64,
}

impl Outputs {
    fn new(dir: PathBuf, seed: u64) -> Self {
        Outputs {
            dir,
            files: Vec::new(),
            inputs: Vec::new(),
            details: serde_json::Value::Null,
            seed,
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>, format: Option<&'static str>) {
        self.files.push((name.into(), bytes, format));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T, format: Option<&'static str>) {
        self.add(name, to_json_bytes(value), format);
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

/// Parses `args` (program name first), runs the command, reports errors on
/// stderr and maps them to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    ExitCode::from(run_code(args))
}

/// As [`run`], returning the numeric exit code.
pub fn run_code<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let recorded: Vec<String> =
        argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, recorded, env_seed.as_deref()) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command line and returns the text summary for stdout.
pub fn execute(cli: Cli, argv: Vec<String>, env_seed: Option<&str>) -> Result<String> {
    let cwd = std::env::current_dir()
        .map_err(|e| CliError::Usage(format!("cannot determine working directory: {e}")))?;
    let invocation = match &cli.from_manifest {
        Some(path) => {
            if cli.command.is_some() {
                return Err(CliError::Usage(
                    "--from-manifest cannot be combined with a subcommand".into(),
                ));
            }
            let path = cwd.join(path);
            let text = read_text(&path)?;
            let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Read {
                path: path.clone(),
                message: e.to_string(),
            })?;
            if manifest.format != MANIFEST_FORMAT {
                return Err(CliError::Usage(format!(
                    "unsupported manifest format `{}`",
                    manifest.format
                )));
            }
            let mut inv = manifest.invocation;
            if let Some(out) = &cli.replay_out {
                inv.command.set_out(cwd.join(out));
            }
            if cli.threads.is_some() {
                inv.threads = cli.threads;
            }
            inv
        }
        None => {
            let Some(command) = cli.command else {
                return Err(CliError::Usage(
                    "a subcommand is required (simulate, preprocess, fit-copula, fit-dml, kfold)"
                        .into(),
                ));
            };
            let file = match &cli.config {
                Some(p) => load_config(&cwd.join(p))?,
                None => ConfigFile::default(),
            };
            let env_seed = match env_seed {
                Some(s) if !s.trim().is_empty() => Some(s.trim().parse::<u64>().map_err(|_| {
                    CliError::Usage(format!("{SEED_ENV}=`{s}` is not an unsigned integer"))
                })?),
                _ => None,
            };
            let mut command = command.merged(&file);
            command.absolutize(&cwd);
            Invocation {
                explicit_seed: cli.seed.or(file.seed).or(env_seed),
                threads: cli.threads.or(file.threads),
                command,
            }
        }
    };
    if invocation.threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let started = Instant::now();
    let outputs = with_threads(invocation.threads, || dispatch(&invocation))??;
    finish(&invocation, outputs, argv, cwd, started)
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_table(path: &Path) -> Result<NumericTable> {
    NumericTable::read(path).map_err(|e| match e {
        DatasetError::Io(io) => CliError::Read {
            path: path.to_path_buf(),
            message: io.to_string(),
        },
        other => other.into(),
    })
}

fn read_schema(path: &Path) -> Result<VariableSchema> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    value.as_ref().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn dispatch(inv: &Invocation) -> Result<(Outputs, String)> {
    match &inv.command {
        Command::Simulate(a) => cmd_simulate(a, inv.explicit_seed),
        Command::Preprocess(a) => cmd_preprocess(a, inv.seed()),
        Command::FitCopula(a) => cmd_fit_copula(a, inv.seed()),
        Command::FitDml(a) => cmd_fit_dml(a, inv.seed()),
        Command::Kfold(a) => cmd_kfold(a, inv.seed()),
    }
}

fn finish(
    inv: &Invocation,
    (outputs, summary): (Outputs, String),
    argv: Vec<String>,
    cwd: PathBuf,
    started: Instant,
) -> Result<String> {
    std::fs::create_dir_all(&outputs.dir).map_err(|source| CliError::Write {
        path: outputs.dir.clone(),
        source,
    })?;
    let mut written = Vec::new();
    let mut formats = BTreeMap::new();
    for (name, bytes, format) in &outputs.files {
        let path = outputs.dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| CliError::Write {
            path: path.clone(),
            source,
        })?;
        if let Some(f) = format {
            formats.insert(name.clone(), f.to_string());
        }
        written.push(path);
    }
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: inv.command.name().to_string(),
        argv,
        cwd,
        seed: outputs.seed,
        invocation: inv.clone(),
        inputs: outputs.inputs,
        outputs: written,
        formats,
        details: outputs.details,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let path = outputs.dir.join(MANIFEST_FILE);
    std::fs::write(&path, to_json_bytes(&manifest))
        .map_err(|source| CliError::Write { path, source })?;
    Ok(summary)
}

/// Ground truth written next to simulated data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthDocument {
    #[serde(flatten)]
    pub dgp: DgpDocument,
    /// Per-row true nuisance values, for policy-effect generators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuisances: Option<DmlTruth>,
}

fn cmd_simulate(a: &SimulateArgs, explicit_seed: Option<u64>) -> Result<(Outputs, String)> {
    let out = required(&a.out, "out")?;
    let (spec, input) = match (&a.preset, &a.spec) {
        (Some(name), None) => (
            synth::preset(name, a.n.unwrap_or(DEFAULT_SIM_N), explicit_seed.unwrap_or(0))?,
            None,
        ),
        (None, Some(path)) => {
            let doc = DgpDocument::parse(&read_text(path)?)?;
            (doc.spec.with_n_seed(a.n, explicit_seed), Some(path))
        }
        (None, None) => return Err(CliError::Usage("simulate needs --preset or --spec".into())),
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("--preset and --spec are mutually exclusive".into()))
        }
    };
    let (data, nuisances) = match &spec {
        DgpSpec::Copula(s) => (generate_copula_data(s)?, None),
        DgpSpec::Dml(s) => {
            let (d, t) = generate_dml_data(s)?;
            (d, Some(t))
        }
    };
    let mut o = Outputs::new(out.clone(), spec.seed());
    if let Some(p) = input {
        o.input(p);
    }
    let mut csv = Vec::new();
    data.write_csv_to(&mut csv)?;
    o.add("data.csv", csv, None);
    o.add_json("schema.json", data.schema(), None);
    let doc = DgpDocument::new(spec.clone());
    o.add_json("dgp.json", &doc, Some(DGP_FORMAT));
    o.add_json("truth.json", &TruthDocument { dgp: doc, nuisances }, Some(DGP_FORMAT));
    o.details = serde_json::json!({ "preset": a.preset, "rows": data.n() });
    let kind = match spec {
        DgpSpec::Copula(_) => "copula",
        DgpSpec::Dml(_) => "dml",
    };
    let summary = format!(
        "simulated {} rows ({kind} generator, seed {}) into {}\n",
        data.n(),
        spec.seed(),
        out.display()
    );
    Ok((o, summary))
}

fn split_spec(s: &str) -> (&str, Option<&str>) {
    match s.rsplit_once(':') {
        Some((a, b)) => (a, Some(b)),
        None => (s, None),
    }
}

fn cmd_preprocess(a: &PreprocessArgs, seed: u64) -> Result<(Outputs, String)> {
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let mut table = read_table(data)?;
    let mut details = serde_json::Map::new();
    let mut summary = String::new();

    if let Some(col) = &a.wait_categories {
        let codes = discretize_wait(table.column(col)?)?;
        table.set_column(WAIT_COLUMN, codes.iter().map(|&c| f64::from(c)).collect());
        details.insert(
            "wait_categories".into(),
            serde_json::json!({ "column": col, "added": WAIT_COLUMN, "cutoffs_seconds": [5.0, 20.0] }),
        );
        let _ = writeln!(summary, "{col}: added {WAIT_COLUMN} (cutoffs 5 s, 20 s)");
    }

    let mut jenks = serde_json::Map::new();
    for item in a.jenks.iter().flatten() {
        let (col, classes) = split_spec(item);
        let classes: usize = classes
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| CliError::Usage(format!("--jenks expects COLUMN:CLASSES, got `{item}`")))?;
        let values = table.column(col)?.to_vec();
        let breaks = jenks_breaks(&values, classes)?;
        let name = format!("{col}_class");
        table.set_column(&name, values.iter().map(|&x| classify(x, &breaks) as f64).collect());
        let _ = writeln!(summary, "{col}: added {name}, breaks {breaks:?}");
        jenks.insert(
            col.to_string(),
            serde_json::json!({ "classes": classes, "added": name, "breaks": breaks }),
        );
    }
    if !jenks.is_empty() {
        details.insert("jenks".into(), jenks.into());
    }

    let mut norm = serde_json::Map::new();
    for item in a.normalize.iter().flatten() {
        let (col, group) = split_spec(item);
        let values = table.column(col)?.to_vec();
        let groups: Vec<String> = match group {
            Some(g) => table.column(g)?.iter().map(|&v| format_cell(v)).collect(),
            None => vec![String::new(); values.len()],
        };
        let (scaled, degenerate): (Vec<f64>, Vec<DegenerateGroup>) =
            min_max_normalize(&values, &groups)?;
        let name = format!("{col}_norm");
        table.set_column(&name, scaled);
        for d in &degenerate {
            eprintln!("warning: {col}: group {} ({} rows) is constant; scaled to 0", d.group, d.size);
        }
        let _ = writeln!(summary, "{col}: added {name}");
        norm.insert(
            col.to_string(),
            serde_json::json!({ "group": group, "added": name, "degenerate_groups": degenerate }),
        );
    }
    if !norm.is_empty() {
        details.insert("normalize".into(), norm.into());
    }

    let mut o = Outputs::new(out.clone(), seed);
    o.input(data);
    let mut csv = Vec::new();
    write_table(&table, &mut csv)?;
    o.add("data.csv", csv, None);
    o.details = details.into();
    Ok((o, summary))
}

fn write_table(table: &NumericTable, buf: &mut Vec<u8>) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    let rec = |r: std::result::Result<(), csv::Error>| r.map_err(|e| CliError::Dataset(e.into()));
    rec(w.write_record(&table.headers))?;
    for i in 0..table.n_rows() {
        rec(w.write_record(table.columns.iter().map(|c| format_cell(c[i]))))?;
    }
    w.flush().map_err(|e| CliError::Dataset(e.into()))
}

fn numbered_columns(headers: &[String], prefix: &str) -> Vec<String> {
    let mut found: Vec<(u64, String)> = headers
        .iter()
        .filter_map(|h| {
            let rest = h.strip_prefix(prefix)?;
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            Some((rest.parse().ok()?, h.clone()))
        })
        .collect();
    found.sort();
    found.into_iter().map(|(_, h)| h).collect()
}

fn column_spec(
    schema: Option<&VariableSchema>,
    name: &str,
    default_kind: ColumnKind,
    role: Role,
) -> ColumnSpec {
    let kind = schema
        .and_then(|s| s.column(name).ok())
        .map(|c| c.kind.clone())
        .unwrap_or(default_kind);
    ColumnSpec::new(name, kind, role)
}

/// Builds a typed dataset from named columns of `table`, checking presence in order.
fn typed_dataset(table: &NumericTable, specs: Vec<ColumnSpec>) -> Result<Dataset> {
    let mut columns = Vec::with_capacity(specs.len());
    for s in &specs {
        columns.push(table.column(&s.name)?.to_vec());
    }
    Ok(Dataset::from_columns(VariableSchema::new(specs)?, &columns)?)
}

fn parse_families(names: &[String]) -> Result<Vec<FamilyKind>> {
    let mut out = Vec::new();
    for n in names {
        let f: FamilyKind = n.trim().parse().map_err(|_| {
            CliError::Usage(format!("unknown family `{n}` (expected frank, fgm, gaussian, product)"))
        })?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("--families is empty".into()));
    }
    Ok(out)
}

fn cmd_fit_copula(a: &FitCopulaArgs, seed: u64) -> Result<(Outputs, String)> {
    let data_path = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let table = read_table(data_path)?;
    let schema = a.schema.as_deref().map(read_schema).transpose()?;
    let stress = a.stress.clone().unwrap_or_else(|| STRESS_COLUMN.to_string());
    let wait = a.wait.clone().unwrap_or_else(|| WAIT_COLUMN.to_string());
    let policy = a
        .policy
        .clone()
        .or_else(|| schema.as_ref().map(|s| s.policy().name.clone()))
        .unwrap_or_else(|| POLICY_COLUMN.to_string());
    let stress_cov = a
        .stress_covariates
        .clone()
        .unwrap_or_else(|| numbered_columns(&table.headers, "x"));
    let wait_cov = a.wait_covariates.clone().unwrap_or_else(|| {
        let mut v = vec![policy.clone()];
        v.extend(numbered_columns(&table.headers, "z"));
        v
    });
    let schema_categories = schema.as_ref().and_then(|s| match &s.column(&wait).ok()?.kind {
        ColumnKind::Ordinal { categories } => Some(categories.clone()),
        _ => None,
    });
    let levels = a
        .levels
        .or(schema_categories.as_ref().map(Vec::len))
        .unwrap_or(crate::joint::DEFAULT_LEVELS);
    let categories = schema_categories
        .filter(|c| c.len() == levels)
        .unwrap_or_else(|| (1..=levels).map(|c| c as f64).collect());

    let mut specs = vec![
        ColumnSpec::new(&stress, ColumnKind::Binary, Role::Covariate),
        ColumnSpec::new(&wait, ColumnKind::Ordinal { categories }, Role::Outcome),
        column_spec(schema.as_ref(), &policy, ColumnKind::Binary, Role::Policy),
    ];
    for c in stress_cov.iter().chain(&wait_cov) {
        if !specs.iter().any(|s| &s.name == c) {
            specs.push(column_spec(schema.as_ref(), c, ColumnKind::Continuous, Role::Covariate));
        }
    }
    let data = typed_dataset(&table, specs)?;
    let families = parse_families(
        &a.families
            .clone()
            .unwrap_or_else(|| FamilyKind::ALL.iter().map(|f| f.name().to_string()).collect()),
    )?;
    let spec = JointSpec {
        levels,
        ..JointSpec::new(&stress, &wait, stress_cov, wait_cov, families[0])
    };
    let defaults = FitOptions::default();
    let opts = FitOptions {
        max_iterations: a.max_iter.unwrap_or(defaults.max_iterations),
        grad_tol: a.tol.unwrap_or(defaults.grad_tol),
    };
    let cmp = if families.len() == 1 {
        let outcome = match fit_joint_mle(&spec, &data, None, &opts) {
            Ok(fit) => FamilyOutcome { family: families[0], fit: Some(fit), error: None },
            Err(e) => FamilyOutcome { family: families[0], fit: None, error: Some(e.to_string()) },
        };
        FamilyComparison { ranked: vec![outcome] }
    } else {
        compare_families(&spec, &data, &families, &opts)?
    };

    let mut o = Outputs::new(out.clone(), seed);
    o.input(data_path);
    if let Some(p) = &a.schema {
        o.input(p);
    }
    for outcome in &cmp.ranked {
        let fam_spec = spec.with_family(outcome.family);
        let name = outcome.family.name();
        let report = JointReport {
            format: JOINT_FORMAT.to_string(),
            spec: fam_spec.clone(),
            ranking: vec![outcome.family],
            fits: vec![outcome.clone()],
        };
        o.add_json(&format!("jointfit_{name}.json"), &report, Some(JOINT_FORMAT));
        o.add(format!("jointfit_{name}.txt"), fit_text(&fam_spec, outcome).into_bytes(), None);
    }
    o.add_json(
        "jointfit.json",
        &JointReport::from_comparison(&spec, &cmp),
        Some(JOINT_FORMAT),
    );
    let table_text = ranking_text(&cmp);
    o.add("ranking.txt", table_text.clone().into_bytes(), None);
    o.add("ranking.csv", ranking_csv(&cmp).into_bytes(), None);

    let failures = cmp.failures();
    for (f, msg) in &failures {
        eprintln!("warning: family {} failed: {msg}", f.name());
    }
    if failures.len() == cmp.ranked.len() {
        let list: Vec<String> =
            failures.iter().map(|(f, m)| format!("{}: {m}", f.name())).collect();
        return Err(CliError::AllFamiliesFailed(list.join("; ")));
    }
    o.details = serde_json::json!({
        "families": families,
        "failed": failures.iter().map(|(f, _)| *f).collect::<Vec<_>>(),
        "rows": data.n(),
    });
    Ok((o, table_text))
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

fn fit_text(spec: &JointSpec, outcome: &FamilyOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Copula joint model, {} family", outcome.family.name());
    let Some(fit) = &outcome.fit else {
        let _ = writeln!(s, "fit failed: {}", outcome.error.as_deref().unwrap_or("unknown error"));
        return s;
    };
    let _ = writeln!(
        s,
        "outcomes: {} (binary), {} ({} levels)",
        spec.stress_outcome, spec.wait_outcome, spec.levels
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<24}{:>14}{:>16}{:>12}", "parameter", "estimate", "standard error", "t-stat");
    let est = fit.estimates();
    for (i, name) in fit.parameter_names.iter().enumerate() {
        let se = fit.std_errors.as_ref().map(|v| v[i]);
        let t = fit.t_stats.as_ref().map(|v| v[i]);
        let _ = writeln!(s, "{:<24}{:>14.6}{:>16}{:>12}", name, est[i], fmt_opt(se, 6), fmt_opt(t, 3));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<24}{:>14.4}", "log-likelihood", fit.loglik);
    let _ = writeln!(s, "{:<24}{:>14}", "parameters", fit.p);
    let _ = writeln!(s, "{:<24}{:>14}", "observations", fit.n);
    let _ = writeln!(s, "{:<24}{:>14.4}", "BIC", fit.bic);
    let _ = writeln!(s, "{:<24}{:>14}", "converged", if fit.converged { "yes" } else { "no" });
    let _ = writeln!(s, "{:<24}{:>14}", "iterations", fit.iterations);
    let _ = writeln!(s, "{:<24}{:>14.3e}", "gradient max-norm", fit.grad_max_norm);
    if fit.std_errors.is_none() {
        let _ = writeln!(s, "Hessian is not negative definite; standard errors unavailable");
    }
    s
}

fn ranking_text(cmp: &FamilyComparison) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6}{:<10}{:>16}{:>6}{:>9}{:>16}{:>12}{:>11}",
        "rank", "family", "log-likelihood", "p", "n", "BIC", "theta", "converged"
    );
    for (i, o) in cmp.ranked.iter().enumerate() {
        match &o.fit {
            Some(f) => {
                let _ = writeln!(
                    s,
                    "{:<6}{:<10}{:>16.4}{:>6}{:>9}{:>16.4}{:>12}{:>11}",
                    i + 1,
                    o.family.name(),
                    f.loglik,
                    f.p,
                    f.n,
                    f.bic,
                    fmt_opt(f.theta, 4),
                    if f.converged { "yes" } else { "no" }
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    "{:<6}{:<10}  failed: {}",
                    "-",
                    o.family.name(),
                    o.error.as_deref().unwrap_or("unknown error")
                );
            }
        }
    }
    s
}

fn ranking_csv(cmp: &FamilyComparison) -> String {
    let mut s = String::from("rank,family,loglik,p,n,bic,theta,converged,error\n");
    for (i, o) in cmp.ranked.iter().enumerate() {
        match &o.fit {
            Some(f) => {
                let theta = f.theta.map_or(String::new(), |t| t.to_string());
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},",
                    i + 1,
                    o.family.name(),
                    f.loglik,
                    f.p,
                    f.n,
                    f.bic,
                    theta,
                    f.converged
                );
            }
            None => {
                let msg = o.error.as_deref().unwrap_or("").replace('"', "'");
                let _ = writeln!(s, ",{},,,,,,,\"{msg}\"", o.family.name());
            }
        }
    }
    s
}

fn dml_dataset(a: &FitDmlArgs, table: &NumericTable, schema: Option<&VariableSchema>) -> Result<Dataset> {
    let outcome = a
        .outcome
        .clone()
        .or_else(|| schema.map(|s| s.outcome().name.clone()))
        .unwrap_or_else(|| DML_OUTCOME_COLUMN.to_string());
    let policy = a
        .policy
        .clone()
        .or_else(|| schema.map(|s| s.policy().name.clone()))
        .unwrap_or_else(|| POLICY_COLUMN.to_string());
    // Check the named roles first so a missing column is reported by name.
    table.column(&policy)?;
    table.column(&outcome)?;
    let covariates: Vec<String> = match (&a.covariates, schema) {
        (Some(c), _) => c.clone(),
        (None, Some(s)) => s.covariates().into_iter().map(str::to_string).collect(),
        (None, None) => table.headers.clone(),
    }
    .into_iter()
    .filter(|c| *c != outcome && *c != policy)
    .collect();
    if covariates.is_empty() {
        return Err(CliError::Schema("no confounder columns".into()));
    }

    let mut outcome_values = table.column(&outcome)?.to_vec();
    let outcome_kind = match a.outcome_scale.unwrap_or(OutcomeScale::Raw) {
        OutcomeScale::Raw => schema
            .and_then(|s| s.column(&outcome).ok())
            .map(|c| c.kind.clone())
            .unwrap_or(ColumnKind::Continuous),
        OutcomeScale::WaitCategories => {
            outcome_values = discretize_wait(&outcome_values)?.into_iter().map(f64::from).collect();
            ColumnKind::Ordinal { categories: vec![1.0, 2.0, 3.0] }
        }
    };
    let mut specs = vec![
        ColumnSpec::new(&outcome, outcome_kind, Role::Outcome),
        column_spec(schema, &policy, ColumnKind::Binary, Role::Policy),
    ];
    let mut columns = vec![outcome_values, table.column(&policy)?.to_vec()];
    for c in &covariates {
        columns.push(table.column(c)?.to_vec());
        specs.push(column_spec(schema, c, ColumnKind::Continuous, Role::Covariate));
    }
    Ok(Dataset::from_columns(VariableSchema::new(specs)?, &columns)?)
}

fn cmd_fit_dml(a: &FitDmlArgs, seed: u64) -> Result<(Outputs, String)> {
    let data_path = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    if let Some(k) = a.k_folds {
        if k < 2 {
            return Err(CliError::BadFoldCount { n: table_rows(data_path), k });
        }
    }
    let table = read_table(data_path)?;
    let schema = a.schema.as_deref().map(read_schema).transpose()?;
    let data = dml_dataset(a, &table, schema.as_ref())?;

    let defaults = DmlConfig::default();
    let outcome_settings = ForestSettings {
        n_trees: a.outcome_trees,
        ..Default::default()
    }
    .or(a.outcome_learner.clone().unwrap_or_default());
    let policy_settings = ForestSettings {
        n_trees: a.policy_trees,
        ..Default::default()
    }
    .or(a.policy_learner.clone().unwrap_or_default());
    let config = DmlConfig {
        k_folds: a.k_folds.unwrap_or(DEFAULT_K_FOLDS),
        outcome_learner: outcome_settings.apply(defaults.outcome_learner),
        policy_learner: policy_settings.apply(defaults.policy_learner),
        confidence_level: a.confidence.unwrap_or(defaults.confidence_level),
        seed,
    };
    if config.k_folds > data.n() {
        return Err(CliError::BadFoldCount { n: data.n(), k: config.k_folds });
    }
    let (estimate, cross): (_, CrossFit) = run_dml_detailed(&data, &config)?;
    for w in &estimate.warnings {
        eprintln!("warning: {w}");
    }
    let mut report = DmlReport::new(&data, &config, estimate)?;

    let mut o = Outputs::new(out.clone(), seed);
    o.input(data_path);
    if let Some(p) = &a.schema {
        o.input(p);
    }
    let truth_path = match &a.check_truth {
        None => None,
        Some(Some(p)) => Some(p.clone()),
        Some(None) => Some(data_path.with_file_name("truth.json")),
    };
    if let Some(tp) = truth_path {
        let doc: TruthDocument =
            serde_json::from_str(&read_text(&tp)?).map_err(|e| CliError::Read {
                path: tp.clone(),
                message: e.to_string(),
            })?;
        if doc.dgp.format != DGP_FORMAT {
            return Err(CliError::Usage(format!("unsupported truth format `{}`", doc.dgp.format)));
        }
        let DgpSpec::Dml(spec) = &doc.dgp.spec else {
            return Err(CliError::Usage(format!(
                "{} describes a copula generator, which has no single policy effect",
                tp.display()
            )));
        };
        let cols = DmlColumns::from_dataset(&data)?;
        let infeasible = match (&doc.nuisances, a.outcome_scale.unwrap_or(OutcomeScale::Raw)) {
            (Some(t), OutcomeScale::Raw) if t.g_true.len() == data.n() => {
                Some(infeasible_alpha(&cols.y, &cols.d, t)?)
            }
            _ => None,
        };
        report = report.with_truth(spec.alpha_true, infeasible);
        o.input(&tp);
    }

    if a.dump_forests {
        let cols = DmlColumns::from_dataset(&data)?;
        let outcome_forest = fit_forest(cols.w.view(), &cols.y, &config.outcome_learner)?;
        let policy_forest = fit_forest(cols.w.view(), &cols.d, &config.policy_learner)?;
        o.add("outcome_forest.json", outcome_forest.to_json().into_bytes(), Some(FOREST_FORMAT));
        o.add("policy_forest.json", policy_forest.to_json().into_bytes(), Some(FOREST_FORMAT));
    }

    let text = dml_text(&report, &cross);
    o.add_json("dml.json", &report, Some(DML_FORMAT));
    o.add("dml.txt", text.clone().into_bytes(), None);
    o.details = serde_json::json!({ "rows": data.n(), "k_folds": config.k_folds });
    Ok((o, text))
}

fn table_rows(path: &Path) -> usize {
    NumericTable::read(path).map(|t| t.n_rows()).unwrap_or(0)
}

fn dml_text(r: &DmlReport, cross: &CrossFit) -> String {
    let e = &r.estimate;
    let mut s = String::new();
    let _ = writeln!(s, "Effect of {} on {}", r.policy, r.outcome);
    let _ = writeln!(s);
    let ci_head = format!("Confidence interval ({}%)", fmt_level(e.confidence_level));
    let _ = writeln!(s, "{:<20}{:>12}{:>18}{:>30}", "", "Value", "Standard error", ci_head);
    let ci = format!("[{:.4}, {:.4}]", e.ci_low, e.ci_high);
    let _ = writeln!(s, "{:<20}{:>12.4}{:>18.4}{:>30}", r.policy, e.alpha, e.std_error, ci);
    let _ = writeln!(s);
    let _ = writeln!(s, "Diagnostics");
    let row = |s: &mut String, k: &str, v: String| {
        let _ = writeln!(s, "  {k:<34}{v:>16}");
    };
    row(&mut s, "moment cost at estimate", format!("{:.3e}", e.cost));
    row(&mut s, "residual sum of squares", format!("{:.4}", e.residual_ss));
    row(&mut s, "observations", e.n.to_string());
    row(&mut s, "folds", e.k_folds.to_string());
    row(&mut s, "confounders", r.covariates.len().to_string());
    for (i, a) in e.per_fold_alphas.iter().enumerate() {
        row(&mut s, &format!("fold {i} estimate"), fmt_opt(*a, 4));
    }
    let d_mean = cross.d_hat.iter().sum::<f64>() / cross.d_hat.len().max(1) as f64;
    row(&mut s, "mean fitted policy propensity", format!("{d_mean:.4}"));
    row(&mut s, "naive difference in means", format!("{:.4}", r.naive.alpha));
    row(&mut s, "naive standard error", format!("{:.4}", r.naive.std_error));
    if let Some(t) = &r.truth {
        row(&mut s, "true effect", format!("{:.4}", t.alpha_true));
        row(&mut s, "bias", format!("{:.4}", t.bias));
        row(&mut s, "naive bias", format!("{:.4}", t.naive_bias));
        row(&mut s, "oracle-nuisance estimate", fmt_opt(t.infeasible_alpha, 4));
        row(&mut s, "truth covered by CI", yes_no(t.covered_by_ci));
        row(&mut s, "within 3 standard errors", yes_no(t.within_three_se));
    }
    for w in &e.warnings {
        let _ = writeln!(s, "  warning: {w}");
    }
    s
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

fn fmt_level(level: f64) -> String {
    let pct = level * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}")
    }
}

fn cmd_kfold(a: &KfoldArgs, seed: u64) -> Result<(Outputs, String)> {
    let out = required(&a.out, "out")?;
    let n = match (&a.data, a.n) {
        (Some(p), None) => read_table(p)?.n_rows(),
        (None, Some(n)) => n,
        _ => return Err(CliError::Usage("kfold needs exactly one of --data or --n".into())),
    };
    let k = a.k.unwrap_or(DEFAULT_K_FOLDS);
    let folds = kfold_split(n, k, seed)?;
    let mut o = Outputs::new(out.clone(), seed);
    if let Some(p) = &a.data {
        o.input(p);
    }
    let mut csv = Vec::new();
    folds.write_csv(&mut csv)?;
    o.add("folds.csv", csv, None);
    o.details = serde_json::json!({ "n": n, "k": k, "sizes": folds.sizes() });
    let summary = format!("{k} folds over {n} rows, sizes {:?}\n", folds.sizes());
    Ok((o, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("orthoestim").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flag_beats_config_file() {
        let cli = parse(&["fit-dml", "--k-folds", "3"]);
        let file: ConfigFile = toml::from_str(
            "seed = 9\n[fit-dml]\nk-folds = 7\nconfidence = 0.9\n[fit-dml.outcome-learner]\nn-trees = 12\n",
        )
        .unwrap();
        let Command::FitDml(a) = cli.command.unwrap().merged(&file) else { panic!() };
        assert_eq!(a.k_folds, Some(3));
        assert_eq!(a.confidence, Some(0.9));
        assert_eq!(a.outcome_learner.unwrap().n_trees, Some(12));
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        assert!(toml::from_str::<ConfigFile>("[fit-dml]\nfolds = 3\n").is_err());
    }

    #[test]
    fn forest_flag_overrides_file_settings() {
        let s = ForestSettings { n_trees: Some(5), ..Default::default() }.or(ForestSettings {
            n_trees: Some(50),
            min_samples_leaf: Some(4),
            ..Default::default()
        });
        let c = s.apply(ForestConfig::wait_model(1));
        assert_eq!((c.n_trees, c.min_samples_leaf, c.min_samples_split), (5, 4, 10));
    }

    #[test]
    fn check_truth_takes_optional_path() {
        let Some(Command::FitDml(a)) = parse(&["fit-dml", "--check-truth"]).command else { panic!() };
        assert_eq!(a.check_truth, Some(None));
        let Some(Command::FitDml(a)) = parse(&["fit-dml", "--check-truth", "t.json"]).command else {
            panic!()
        };
        assert_eq!(a.check_truth, Some(Some(PathBuf::from("t.json"))));
    }

    #[test]
    fn numbered_columns_sorted_numerically() {
        let h: Vec<String> = ["z10", "x", "z2", "zed", "z1", "wait"].iter().map(|s| s.to_string()).collect();
        assert_eq!(numbered_columns(&h, "z"), vec!["z1", "z2", "z10"]);
    }

    #[test]
    fn missing_column_maps_to_schema_error() {
        let e: CliError = DatasetError::MissingColumn { column: "density_low".into() }.into();
        assert_eq!(e.to_string(), "SchemaError: missing column 'density_low'");
        assert_eq!(e.exit_code(), 1);
        let e: CliError = DatasetError::BadFoldCount { n: 10, k: 1 }.into();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn level_label() {
        assert_eq!(fmt_level(0.95), "95");
        assert_eq!(fmt_level(0.975), "97.5");
    }
}

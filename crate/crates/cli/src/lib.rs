//! `krrlab` command-line front end.
//!
//! Every subcommand reads a typed configuration assembled in this order:
//! built-in defaults, then `--config` (TOML or JSON), then `--set key=value`
//! overrides with dotted keys, then the shortcut flags (`--chi`, `--p`, ...).
//! The effective configuration is embedded in every output file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{Map, Value};

use krrlab::distributions::{sample_cylinder, DataModel};
use krrlab::experiments::{
    self, fit_power_law, learning_curve_exponent, load_dataset_csv, persist, DatasetConfig, Estimators, ExperimentConfig,
    ExperimentError, ExperimentRow, Metadata, RidgeGrid, SWEEP_REPLICATES, SIGMA_F_PAIRS,
};
use krrlab::spectral::{hybrid_spectrum, Parity, Spectrum, SpectrumOptions};
use krrlab::theory::{characteristic_scale, infinite_p_predictor, replica_error, scaling_laws, BvpOptions};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "KRRLAB_OUTPUT_DIR";

/// Numeric defaults used by the commands. Model defaults (kernel width 100,
/// cutoff 3) live on [`DataModel`], the ridge floor `1e-12` in
/// [`krrlab::krr::RIDGE_FLOOR`], and the spectrum thresholds (Nyström seeds
/// to rank 400, exact eigenpairs to rank `1e4`, extrapolation to `5.1e4`) in
/// [`SpectrumOptions::default`].
pub mod defaults {
    /// Training set size for `sample` and `kare`.
    pub const SAMPLE_SIZE: usize = 1000;
    /// Sizes of the ridgeless learning curve.
    pub const LEARNING_SIZES: [usize; 7] = [100, 200, 500, 1000, 2000, 5000, 10_000];
    /// Sizes for `replica`.
    pub const REPLICA_SIZES: [usize; 5] = [100, 300, 1000, 3000, 10_000];
    /// Training set size for ridge sweeps.
    pub const SWEEP_SIZE: usize = 1000;
    /// Nyström nodes per half-line for the eigenpair part of `selftest`.
    pub const SELFTEST_HALF_SIZE: usize = 600;
    /// Points per decade of ridge in `bvp`.
    pub const BVP_POINTS_PER_DECADE: usize = 4;
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed configuration or missing input; exit code 1.
    Usage(String),
    /// A numerical routine failed; exit code 2.
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) | ExperimentError::Dataset { .. } | ExperimentError::EmptyDataset => CliError::Usage(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "krrlab", version, about = "Kernel ridge regression on singular-density data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a labelled training sample and write it as CSV
    Sample(Common),
    /// Kernel spectrum with target coefficients
    Spectrum(Common),
    /// Squared target coefficients of the odd modes with their fitted slope
    Coeffs(Common),
    /// Ridgeless test error against P
    LearningCurve(Common),
    /// Test error, replica and KARE predictions over a ridge grid
    RidgeSweep(Common),
    /// Predictor variance from disjoint training pairs
    SigmaF(Common),
    /// Replica prediction from a spectrum
    Replica(Common),
    /// KARE estimate against the measured test error for one sample
    Kare(Common),
    /// Infinite-P predictor and its boundary scale
    Bvp(Common),
    /// Predicted scaling exponents as JSON
    Scaling(Common),
    /// Ridge sweep on a labelled CSV dataset
    DatasetSweep(Common),
    /// Run the fast invariant checks
    Selftest(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML or JSON configuration file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration value with a dotted key, e.g. model.chi=2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to $KRRLAB_OUTPUT_DIR, then the working directory)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads, 0 for all cores
    #[arg(long)]
    workers: Option<usize>,
    /// Test-grid resolution multiplier
    #[arg(long)]
    resolution: Option<f64>,
    /// Number of replicates (seeds 0..N)
    #[arg(long)]
    replicates: Option<u64>,
    #[arg(long)]
    chi: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    /// Dimension of the data manifold
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long = "x-max")]
    x_max: Option<f64>,
    /// Spectrum length
    #[arg(long)]
    ranks: Option<usize>,
    /// Training set size(s), comma separated
    #[arg(long, value_delimiter = ',')]
    p: Vec<usize>,
    /// Labelled CSV dataset
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Spectrum CSV written by `krrlab spectrum`
    #[arg(long, value_name = "PATH")]
    spectrum: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SampleConfig {
    model: DataModel,
    p: usize,
    seed: u64,
    output: Option<PathBuf>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { model: default_model(), p: defaults::SAMPLE_SIZE, seed: 0, output: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SpectrumConfig {
    model: DataModel,
    options: SpectrumOptions,
    /// Overrides the spectrum length; exact ranks are capped by it.
    ranks: Option<usize>,
    output: Option<PathBuf>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self { model: default_model(), options: SpectrumOptions::default(), ranks: None, output: None }
    }
}

/// Spectrum options with the length overridden by `ranks`.
fn with_ranks(mut o: SpectrumOptions, ranks: Option<usize>) -> SpectrumOptions {
    if let Some(r) = ranks {
        o.target_rank = r;
        o.exact_ranks = o.exact_ranks.min(r);
        o.gram_ranks = o.gram_ranks.min(r);
    }
    o
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SweepConfig {
    #[serde(flatten)]
    experiment: ExperimentConfig,
    /// Cached spectrum for eps_B; built from `spectrum_options` when absent.
    spectrum: Option<PathBuf>,
    spectrum_options: SpectrumOptions,
    ranks: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { experiment: ExperimentConfig::default(), spectrum: None, spectrum_options: SpectrumOptions::default(), ranks: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReplicaConfig {
    model: DataModel,
    options: SpectrumOptions,
    ranks: Option<usize>,
    spectrum: Option<PathBuf>,
    p_values: Vec<usize>,
    ridges: RidgeGrid,
    output: Option<PathBuf>,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        Self {
            model: default_model(),
            options: SpectrumOptions::default(),
            ranks: None,
            spectrum: None,
            p_values: defaults::REPLICA_SIZES.to_vec(),
            ridges: RidgeGrid::Ridgeless,
            output: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct KareConfig {
    model: DataModel,
    p: usize,
    seed: u64,
    ridges: RidgeGrid,
    resolution_scale: f64,
    output: Option<PathBuf>,
}

impl Default for KareConfig {
    fn default() -> Self {
        Self { model: default_model(), p: defaults::SAMPLE_SIZE, seed: 0, ridges: RidgeGrid::default(), resolution_scale: 1.0, output: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BvpConfig {
    model: DataModel,
    /// `lambda / P` values; when absent, three decades placed where the
    /// boundary scale is resolved for the model's `chi`.
    ratios: Option<Vec<f64>>,
    options: BvpOptions,
    output: Option<PathBuf>,
}

impl Default for BvpConfig {
    fn default() -> Self {
        Self { model: default_model(), ratios: None, options: BvpOptions::default(), output: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScalingConfig {
    chi: f64,
    xi: f64,
    d: usize,
    output: Option<PathBuf>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self { chi: 1.0, xi: 0.0, d: 1, output: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct DatasetCommandConfig {
    #[serde(flatten)]
    sweep: DatasetConfig,
    data: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SelftestConfig {
    half_size: usize,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self { half_size: defaults::SELFTEST_HALF_SIZE }
    }
}

fn default_model() -> DataModel {
    DataModel::one_d(1.0, 0.0).expect("default model")
}

fn sweep_defaults(seeds: usize, estimators: Estimators) -> SweepConfig {
    SweepConfig {
        experiment: ExperimentConfig {
            p_values: vec![defaults::SWEEP_SIZE],
            seeds: (0..seeds as u64).collect(),
            estimators,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Parses a `--set` value: JSON when it parses as JSON, a string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Sets a dotted key, creating intermediate tables. Keys are checked against
/// the defaults so that misspellings are reported; tables carrying a `kind`
/// tag accept new keys because their fields depend on the variant.
fn set_path(root: &mut Value, key: &str, value: Value, check: bool) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed key `{key}`")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let map = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().unwrap()
            }
            _ => return Err(CliError::Usage(format!("`{}` is not a table in key `{key}`", parts[..i].join(".")))),
        };
        if check && !map.contains_key(*part) && !map.contains_key("kind") {
            let known: Vec<&String> = map.keys().collect();
            return Err(CliError::Usage(format!("unknown configuration key `{key}`; known keys here: {known:?}")));
        }
        if last {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("malformed JSON in {}: {e}", path.display())))
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| CliError::Usage(format!("malformed config in {}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Kind {
    Sample,
    Spectrum,
    Coeffs,
    LearningCurve,
    RidgeSweep,
    SigmaF,
    Replica,
    Kare,
    Bvp,
    Scaling,
    DatasetSweep,
    Selftest,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Sample => "sample",
            Kind::Spectrum => "spectrum",
            Kind::Coeffs => "coeffs",
            Kind::LearningCurve => "learning-curve",
            Kind::RidgeSweep => "ridge-sweep",
            Kind::SigmaF => "sigma-f",
            Kind::Replica => "replica",
            Kind::Kare => "kare",
            Kind::Bvp => "bvp",
            Kind::Scaling => "scaling",
            Kind::DatasetSweep => "dataset-sweep",
            Kind::Selftest => "selftest",
        }
    }

    fn experiment(self) -> bool {
        matches!(self, Kind::LearningCurve | Kind::RidgeSweep | Kind::SigmaF)
    }

    fn has_model(self) -> bool {
        !matches!(self, Kind::Scaling | Kind::DatasetSweep | Kind::Selftest)
    }
}

/// Dotted keys set by the shortcut flags for a subcommand.
fn shortcuts(kind: Kind, c: &Common) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = Vec::new();
    let mut push = |flag: &str, key: Option<&str>, v: Value| -> Result<(), CliError> {
        match key {
            Some(k) => {
                out.push((k.to_string(), v));
                Ok(())
            }
            None => Err(CliError::Usage(format!("--{flag} does not apply to `{}`", kind.name()))),
        }
    };
    let model_key = |field: &'static str| -> Option<String> {
        if kind == Kind::Scaling {
            match field {
                "chi" => Some("chi".into()),
                "xi" => Some("xi".into()),
                "dim" => Some("d".into()),
                _ => None,
            }
        } else if kind.has_model() {
            Some(format!("model.{field}"))
        } else {
            None
        }
    };
    if let Some(v) = c.chi {
        push("chi", model_key("chi").as_deref(), v.into())?;
    }
    if let Some(v) = c.xi {
        push("xi", model_key("xi").as_deref(), v.into())?;
    }
    if let Some(v) = c.d {
        push("d", model_key("dim").as_deref(), v.into())?;
    }
    if let Some(v) = c.sigma {
        let key = if kind == Kind::DatasetSweep { Some("sigma".to_string()) } else { model_key("sigma") };
        push("sigma", key.as_deref(), v.into())?;
    }
    if let Some(v) = c.x_max {
        push("x-max", model_key("x_max").as_deref(), v.into())?;
    }
    if let Some(v) = c.seed {
        let key = match kind {
            k if k.experiment() => Some("global_seed"),
            Kind::DatasetSweep => Some("global_seed"),
            Kind::Sample | Kind::Kare => Some("seed"),
            _ => None,
        };
        push("seed", key, v.into())?;
    }
    if let Some(v) = c.workers {
        let key = if kind.experiment() || kind == Kind::DatasetSweep { Some("workers") } else { None };
        push("workers", key, v.into())?;
    }
    if let Some(v) = c.resolution {
        let key = if kind.experiment() || kind == Kind::Kare { Some("resolution_scale") } else { None };
        push("resolution", key, v.into())?;
    }
    if let Some(n) = c.replicates {
        let key = if kind.experiment() || kind == Kind::DatasetSweep { Some("seeds") } else { None };
        push("replicates", key, Value::from((0..n).collect::<Vec<u64>>()))?;
    }
    if let Some(v) = c.ranks {
        let key = if matches!(kind, Kind::Spectrum | Kind::Coeffs | Kind::Replica | Kind::RidgeSweep) { Some("ranks") } else { None };
        push("ranks", key, v.into())?;
    }
    if !c.p.is_empty() {
        match kind {
            Kind::Sample | Kind::Kare => {
                if c.p.len() != 1 {
                    return Err(CliError::Usage(format!("`{}` takes a single --p", kind.name())));
                }
                push("p", Some("p"), c.p[0].into())?;
            }
            k if k.experiment() || k == Kind::Replica || k == Kind::DatasetSweep => push("p", Some("p_values"), Value::from(c.p.clone()))?,
            _ => push("p", None, Value::Null)?,
        }
    }
    if let Some(v) = &c.data {
        let key = if kind == Kind::DatasetSweep { Some("data") } else { None };
        push("data", key, Value::from(v.to_string_lossy().into_owned()))?;
    }
    if let Some(v) = &c.spectrum {
        let key = if matches!(kind, Kind::RidgeSweep | Kind::Replica) { Some("spectrum") } else { None };
        push("spectrum", key, Value::from(v.to_string_lossy().into_owned()))?;
    }
    Ok(out)
}

/// Configuration after layering defaults, file, overrides and flags.
fn assemble<T: Serialize + DeserializeOwned>(kind: Kind, defaults: T, c: &Common) -> Result<(T, Value), CliError> {
    let mut v = serde_json::to_value(&defaults).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(path) = &c.config {
        let file = read_config_file(path)?;
        if !file.is_object() {
            return Err(CliError::Usage(format!("config file {} must hold a table", path.display())));
        }
        merge(&mut v, file);
    }
    for s in &c.set {
        let (k, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        set_path(&mut v, k.trim(), parse_value(raw.trim()), true)?;
    }
    for (k, val) in shortcuts(kind, c)? {
        set_path(&mut v, &k, val, false)?;
    }
    let typed: T = serde_json::from_value(v.clone()).map_err(|e| CliError::Usage(format!("malformed configuration: {e}")))?;
    let echoed = serde_json::to_value(&typed).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((typed, echoed))
}

struct Context {
    kind: Kind,
    out_dir: PathBuf,
}

impl Context {
    fn output(&self, configured: &Option<PathBuf>, ext: &str) -> PathBuf {
        match configured {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.out_dir.join(p),
            None => self.out_dir.join(format!("{}.{ext}", self.kind.name())),
        }
    }

    fn create(&self, path: &Path) -> Result<BufWriter<File>, CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        }
        File::create(path)
            .map(BufWriter::new)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
    }
}

fn io(e: std::io::Error) -> CliError {
    CliError::Numerical(format!("write failed: {e}"))
}

fn require_file(path: &Path, what: &str, hint: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} not found; {hint}", path.display())))
    }
}

fn load_or_build_spectrum(model: &DataModel, path: &Option<PathBuf>, opts: &SpectrumOptions) -> Result<(Spectrum, String), CliError> {
    match path {
        Some(p) => {
            require_file(p, "spectrum file", "write one with `krrlab spectrum` or omit --spectrum to build it")?;
            let f = File::open(p).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", p.display())))?;
            let s = Spectrum::read_csv(BufReader::new(f), *model).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            if s.entries.is_empty() {
                return Err(CliError::Usage(format!("spectrum file {} holds no entries", p.display())));
            }
            Ok((s, format!("spectrum read from {}", p.display())))
        }
        None => {
            let s = hybrid_spectrum(model, opts).map_err(numerical)?;
            Ok((s, format!("spectrum built with {}", serde_json::to_string(opts).unwrap_or_default())))
        }
    }
}

fn metadata(config: &Value, seed: u64, notes: Vec<String>) -> Metadata {
    Metadata { config_json: config.to_string(), global_seed: seed, notes }
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("krrlab: {e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<String, CliError> {
    let (kind, common) = match cmd {
        Command::Sample(c) => (Kind::Sample, c),
        Command::Spectrum(c) => (Kind::Spectrum, c),
        Command::Coeffs(c) => (Kind::Coeffs, c),
        Command::LearningCurve(c) => (Kind::LearningCurve, c),
        Command::RidgeSweep(c) => (Kind::RidgeSweep, c),
        Command::SigmaF(c) => (Kind::SigmaF, c),
        Command::Replica(c) => (Kind::Replica, c),
        Command::Kare(c) => (Kind::Kare, c),
        Command::Bvp(c) => (Kind::Bvp, c),
        Command::Scaling(c) => (Kind::Scaling, c),
        Command::DatasetSweep(c) => (Kind::DatasetSweep, c),
        Command::Selftest(c) => (Kind::Selftest, c),
    };
    let explicit_out = common.out.clone().or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from));
    let ctx = Context { kind, out_dir: explicit_out.clone().unwrap_or_else(|| PathBuf::from(".")) };
    match kind {
        Kind::Sample => cmd_sample(&ctx, &common),
        Kind::Spectrum => cmd_spectrum(&ctx, &common, false),
        Kind::Coeffs => cmd_spectrum(&ctx, &common, true),
        Kind::LearningCurve => cmd_learning_curve(&ctx, &common),
        Kind::RidgeSweep => cmd_ridge_sweep(&ctx, &common),
        Kind::SigmaF => cmd_sigma_f(&ctx, &common),
        Kind::Replica => cmd_replica(&ctx, &common),
        Kind::Kare => cmd_kare(&ctx, &common),
        Kind::Bvp => cmd_bvp(&ctx, &common),
        Kind::Scaling => cmd_scaling(&ctx, &common, explicit_out.is_some()),
        Kind::DatasetSweep => cmd_dataset(&ctx, &common),
        Kind::Selftest => cmd_selftest(&common),
    }
}

fn cmd_sample(ctx: &Context, c: &Common) -> Result<String, CliError> {
    let (cfg, echo) = assemble(ctx.kind, SampleConfig::default(), c)?;
    let s = sample_cylinder(cfg.p, &cfg.model, cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = ctx.output(&cfg.output, "csv");
    let mut w = ctx.create(&path)?;
    metadata(&echo, cfg.seed, vec!["columns: label then coordinates".into()]).write(&mut w).map_err(io)?;
    experiments::write_dataset_csv(&mut w, &s).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(format!("sample: {} points of width {} -> {}", s.len(), s.width(), path.display()))
}

fn cmd_spectrum(ctx: &Context, c: &Common, coefficients_only: bool) -> Result<String, CliError> {
    let (cfg, echo) = assemble(ctx.kind, SpectrumConfig::default(), c)?;
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if cfg.model.dim != 1 {
        return Err(CliError::Usage("spectra are computed for d = 1 only".into()));
    }
    let opts = with_ranks(cfg.options, cfg.ranks);
    let s = hybrid_spectrum(&cfg.model, &opts).map_err(numerical)?;
    let path = ctx.output(&cfg.output, "csv");
    let mut w = ctx.create(&path)?;
    let tail: Vec<&krrlab::spectral::SpectrumEntry> = s.entries.iter().filter(|e| e.rank * 2 > s.len()).collect();
    let flat: Vec<f64> = tail.iter().map(|e| e.eigenvalue * (e.rank as f64).powi(2)).collect();
    let spread = flat.iter().cloned().fold(0.0, f64::max) / flat.iter().cloned().fold(f64::INFINITY, f64::min);
    if coefficients_only {
        let odd: Vec<&krrlab::spectral::SpectrumEntry> = s.of_parity(Parity::Odd).collect();
        let lo = odd.len() / 100;
        let xs: Vec<f64> = odd[lo.max(1)..].iter().map(|e| e.rank as f64).collect();
        let ys: Vec<f64> = odd[lo.max(1)..].iter().map(|e| e.coefficient.unwrap_or(0.0).powi(2)).collect();
        let (slope, _, se) = fit_power_law(&xs, &ys)?;
        let predicted = scaling_laws(cfg.model.chi, cfg.model.xi, 1).map_err(numerical)?.coefficient_slope;
        let notes = vec![format!("fitted c^2 slope {slope:.4} +- {se:.4}; predicted {:?}", predicted.map(|e| e.value))];
        metadata(&echo, 0, notes).write(&mut w).map_err(io)?;
        writeln!(w, "rank,coefficient_sq,provenance").map_err(io)?;
        for e in &odd {
            writeln!(w, "{},{:e},{}", e.rank, e.coefficient.unwrap_or(0.0).powi(2), e.provenance).map_err(io)?;
        }
        w.flush().map_err(io)?;
        return Ok(format!("coeffs: {} odd modes, c^2 slope {slope:.3} -> {}", odd.len(), path.display()));
    }
    let notes = vec![format!("max/min of lambda rho^2 over the upper half of ranks: {spread:.4}")];
    metadata(&echo, 0, notes).write(&mut w).map_err(io)?;
    s.write_csv(&mut w).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(format!("spectrum: {} ranks, tail lambda rho^2 spread {spread:.4} -> {}", s.len(), path.display()))
}

fn experiment_paths(ctx: &Context, cfg: &mut ExperimentConfig) {
    cfg.output = Some(ctx.output(&cfg.output, "csv"));
}

fn finish_experiment(cfg: &ExperimentConfig, rows: &[ExperimentRow], notes: &[String]) -> Result<String, CliError> {
    let (rows_path, summary_path) = persist(cfg, rows, notes)?.expect("output set");
    Ok(format!("{} rows -> {} (summary {})", rows.len(), rows_path.display(), summary_path.display()))
}

fn cmd_learning_curve(ctx: &Context, c: &Common) -> Result<String, CliError> {
    let defaults = ExperimentConfig { p_values: defaults::LEARNING_SIZES.to_vec(), ridges: RidgeGrid::Ridgeless, ..Default::default() };
    let (mut cfg, _) = assemble(ctx.kind, defaults, c)?;
    experiment_paths(ctx, &mut cfg);
    let rows = experiments::learning_curve(&cfg)?;
    let fit = learning_curve_exponent(&rows).ok();
    let predicted = scaling_laws(cfg.model.chi, cfg.model.xi, cfg.model.dim).ok().map(|t| t.test_error.value);
    let note = match fit {
        Some((m, _, se)) => format!("fitted eps_t slope {m:.4} +- {se:.4}; predicted {predicted:?}"),
        None => "fewer than three sizes; no slope fitted".to_string(),
    };
    let tail = finish_experiment(&cfg, &rows, std::slice::from_ref(&note))?;
    Ok(format!("learning-curve: {note}; {tail}"))
}

fn cmd_ridge_sweep(ctx: &Context, c: &Common) -> Result<String, CliError> {
    let est = Estimators { eps_t: true, eps_b: true, eps_k: true, sigma_f: false };
    let (mut cfg, _) = assemble(ctx.kind, sweep_defaults(SWEEP_REPLICATES, est), c)?;
    experiment_paths(ctx, &mut cfg.experiment);
    let mut notes = Vec::new();
    let spectrum = if cfg.experiment.estimators.eps_b {
        if cfg.experiment.model.dim != 1 {
            return Err(CliError::Usage("eps_B needs a one-dimensional model; set estimators.eps_b=false".into()));
        }
        let (s, note) = load_or_build_spectrum(&cfg.experiment.model, &cfg.spectrum, &with_ranks(cfg.spectrum_options, cfg.ranks))?;
        notes.push(note);
        Some(s)
    } else {
        None
    };
    let rows = experiments::ridge_sweep(&cfg.experiment, spectrum.as_ref())?;
    Ok(format!("ridge-sweep: {}", finish_experiment(&cfg.experiment, &rows, &notes)?))
}

fn cmd_sigma_f(ctx: &Context, c: &Common) -> Result<String, CliError> {
    let est = Estimators { eps_t: false, eps_b: false, eps_k: false, sigma_f: true };
    let (mut cfg, _) = assemble(ctx.kind, sweep_defaults(2 * SIGMA_F_PAIRS, est).experiment, c)?;
    experiment_paths(ctx, &mut cfg);
    let rows = experiments::sigma_f_study(&cfg)?;
    Ok(format!("sigma-f: {}", finish_experiment(&cfg, &rows, &[])?))
}

fn cmd_replica(ctx: &Context, c: &Common) -> Result<String, CliError> {
    let (cfg, echo) = assemble(ctx.kind, ReplicaConfig::default(), c)?;
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if cfg.model.dim != 1 {
        return Err(CliError::Usage("replica predictions need a one-dimensional spectrum".into()));
    }
    let opts = with_ranks(cfg.options, cfg.ranks);
    let (s, note) = load_or_build_spectrum(&cfg.model, &cfg.spectrum, &opts)?;
    let path = ctx.output(&cfg.output, "csv");
    let mut rows = Vec::new();
    for &p in &cfg.p_values {
        for lam in cfg.ridges.values(p, &cfg.model) {
            let e = replica_error(&s, p, lam).map_err(numerical)?;
            rows.push((p, lam, e));
        }
    }
    let mut notes = vec![note];
    let ridgeless: Vec<(f64, f64)> = rows.iter().filter(|r| r.1 <= krrlab::krr::RIDGE_FLOOR).map(|r| (r.0 as f64, r.2.corrected())).collect();
    let slope = if ridgeless.len() >= 3 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = ridgeless.into_iter().unzip();
        fit_power_law(&xs, &ys).ok().map(|f| f.0)
    } else {
        None
    };
    if let Some(m) = slope {
        notes.push(format!("ridgeless eps_B slope {m:.4}"));
    }
    let mut w = ctx.create(&path)?;
    metadata(&echo, 0, notes).write(&mut w).map_err(io)?;
    writeln!(w, "p,ridge,ridge_over_crossover,eps_b,tail,eps_b_corrected,t,kappa,truncated").map_err(io)?;
    for (p, lam, e) in &rows {
        let tail = e.tail.map_or("null".to_string(), |t| t.to_string());
        let rc = lam / krrlab::theory::crossover_ridge(*p, &cfg.model);
        writeln!(w, "{p},{lam},{rc},{},{tail},{},{},{},{}", e.epsilon_b, e.corrected(), e.state.t, e.state.kappa(), e.state.truncated).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let s_txt = slope.map_or(String::new(), |m| format!(", ridgeless slope {m:.3}"));
    Ok(format!("replica: {} predictions{s_txt} -> {}", rows.len(), path.display()))
}

fn cmd_kare(ctx: &Context, c: &Common) -> Result<String, CliError> {
    let (cfg, _) = assemble(ctx.kind, KareConfig::default(), c)?;
    let exp = ExperimentConfig {
        model: cfg.model,
        p_values: vec![cfg.p],
        ridges: cfg.ridges.clone(),
        seeds: vec![cfg.seed],
        global_seed: 0,
        estimators: Estimators { eps_t: true, eps_b: false, eps_k: true, sigma_f: false },
        resolution_scale: cfg.resolution_scale,
        workers: 1,
        output: Some(ctx.output(&cfg.output, "csv")),
        ..Default::default()
    };
    let rows = experiments::ridge_sweep(&exp, None)?;
    Ok(format!("kare: {}", finish_experiment(&exp, &rows, &[])?))
}

/// Three decades of `lambda / P` where the boundary scale sits on the mesh.
fn default_bvp_ratios(chi: f64) -> Vec<f64> {
    let n = 3 * defaults::BVP_POINTS_PER_DECADE;
    (0..=n).map(|k| 10f64.powf(-4.0 - (chi + 2.0) / 2.0 - k as f64 / defaults::BVP_POINTS_PER_DECADE as f64)).collect()
}

fn cmd_bvp(ctx: &Context, c: &Common) -> Result<String, CliError> {
    let (cfg, echo) = assemble(ctx.kind, BvpConfig::default(), c)?;
    let ratios = cfg.ratios.clone().unwrap_or_else(|| default_bvp_ratios(cfg.model.chi));
    let mut rows = Vec::new();
    for &r in &ratios {
        let f = infinite_p_predictor(&cfg.model, r, &cfg.options).map_err(numerical)?;
        let ell = characteristic_scale(&f).map_err(numerical)?;
        rows.push((r, ell, f.residual));
    }
    let fit = if rows.len() >= 3 {
        let xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.1).collect();
        fit_power_law(&xs, &ys).ok()
    } else {
        None
    };
    let predicted = 1.0 / (2.0 + cfg.model.chi);
    let path = ctx.output(&cfg.output, "csv");
    let mut w = ctx.create(&path)?;
    let notes = vec![format!("fitted ell slope {:?}; predicted {predicted:.4}", fit.map(|f| f.0))];
    metadata(&echo, 0, notes).write(&mut w).map_err(io)?;
    writeln!(w, "lambda_over_p,ell,residual").map_err(io)?;
    for (r, ell, res) in &rows {
        writeln!(w, "{r},{ell},{res}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    let s = fit.map_or(String::new(), |f| format!(", ell slope {:.4} (predicted {predicted:.4})", f.0));
    Ok(format!("bvp: {} ridges{s} -> {}", rows.len(), path.display()))
}

fn cmd_scaling(ctx: &Context, c: &Common, write_file: bool) -> Result<String, CliError> {
    let (cfg, _) = assemble(ctx.kind, ScalingConfig::default(), c)?;
    let t = scaling_laws(cfg.chi, cfg.xi, cfg.d).map_err(|e| CliError::Usage(e.to_string()))?;
    let json = serde_json::to_string_pretty(&t).map_err(numerical)?;
    if write_file || cfg.output.is_some() {
        let path = ctx.output(&cfg.output, "json");
        let mut w = ctx.create(&path)?;
        writeln!(w, "{json}").map_err(io)?;
        w.flush().map_err(io)?;
    }
    Ok(json)
}

fn cmd_dataset(ctx: &Context, c: &Common) -> Result<String, CliError> {
    let (mut cfg, echo) = assemble(ctx.kind, DatasetCommandConfig::default(), c)?;
    let data_path = cfg.data.clone().ok_or_else(|| CliError::Usage("dataset-sweep needs --data PATH (label then features per row)".into()))?;
    require_file(&data_path, "dataset", "pass a CSV with one row per sample: label (+1/-1) then features")?;
    let data = load_dataset_csv(&data_path)?;
    let path = ctx.output(&cfg.sweep.output, "csv");
    cfg.sweep.output = Some(path.clone());
    let rows = experiments::dataset_sweep(&data, &cfg.sweep)?;
    let notes = vec![
        format!("dataset {} with {} rows of width {}", data_path.display(), data.len(), data.width()),
        format!("held-out fraction {}", cfg.sweep.holdout),
    ];
    let mut w = ctx.create(&path)?;
    experiments::write_rows_csv(&mut w, &rows, &metadata(&echo, cfg.sweep.global_seed, notes)).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(format!("dataset-sweep: {} rows -> {}", rows.len(), path.display()))
}

fn cmd_selftest(c: &Common) -> Result<String, CliError> {
    let (cfg, _) = assemble(Kind::Selftest, SelftestConfig::default(), c)?;
    let checks = krrlab::checks::all(cfg.half_size);
    for ch in &checks {
        println!("{ch}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(format!("selftest: {} checks passed", checks.len()))
}

//! `emenv fit | select | simulate`.
//!
//! Every option may also come from a `key = value` file given by `--config`;
//! flags win over the file. Keys are the long flag names.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::hash::BuildHasher;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emenv_core::em::{em_envelope_fit, EmOptions, Init};
use emenv_core::estep::PredictorModel;
use emenv_core::inference::{bootstrap_se_with, Estimator};
use emenv_core::runner::derive_seed;
use emenv_core::select::{select_u_bic_with, select_u_bootstrap_with, SelectionReport};
use emenv_core::sim::{run_scenario_with, Calibration, ErrorFamily, PredictorFamily, ScenarioSpec, USelection, SCENARIO_NAMES};

use crate::error::{AppError, AppResult};
use crate::parallel::RayonRunner;
use crate::report::{self, RunMeta, SeedSource};
use crate::table::load_table;

#[derive(Debug, Parser)]
#[command(name = "emenv", version, about = "Envelope regression with missing data, fitted by EM")]
pub struct Cli {
    /// key = value file supplying defaults for any option
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 0 or absent uses every core
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Master seed; drawn from entropy and reported when absent
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Write the report here instead of stdout
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the envelope model, optionally choosing u and bootstrapping β
    Fit(FitArgs),
    /// Choose the envelope dimension only
    Select(DataArgs),
    /// Run a simulation scenario and summarise the MSE of six estimators
    Simulate(SimArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Normal,
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectArg {
    Bicq,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Cold,
    Warm,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Delimited table with a header row
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Predictor columns, comma separated
    #[arg(long, value_delimiter = ',')]
    pub x: Vec<String>,
    /// Response columns, comma separated
    #[arg(long, value_delimiter = ',')]
    pub y: Vec<String>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Nonzero support point of the Bernoulli predictor
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    #[arg(long, value_enum)]
    pub select: Option<SelectArg>,
    /// Resamples per candidate u for bootstrap selection
    #[arg(long)]
    pub select_reps: Option<usize>,
    /// Mean q² a candidate u must exceed under bootstrap selection
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Envelope dimension, or "auto" to select it
    #[arg(long)]
    pub u: Option<String>,
    /// Bootstrap replicates for standard errors; 0 skips
    #[arg(long)]
    pub bootstrap_reps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimSelectArg {
    TrueU,
    Bicq,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ErrorsArg {
    Normal,
    T5,
    Uniform,
    Laplace,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictorsArg {
    Normal,
    TwoPoint,
    T5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibrationArg {
    Target,
    Verbatim,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub u: Option<usize>,
    #[arg(long, value_enum)]
    pub errors: Option<ErrorsArg>,
    #[arg(long, value_enum)]
    pub predictors: Option<PredictorsArg>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub omega0: Option<f64>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, value_enum)]
    pub select: Option<SimSelectArg>,
    #[arg(long)]
    pub select_reps: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub calibration: Option<CalibrationArg>,
    #[arg(long)]
    pub x_rate: Option<f64>,
    #[arg(long)]
    pub y_rate: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Also write the MSE summary as a tab-separated table here
    #[arg(long)]
    pub table_output: Option<PathBuf>,
}

/// Values from the config file, consumed key by key so leftovers can be reported.
struct ConfigFile {
    path: PathBuf,
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    fn empty() -> Self {
        ConfigFile { path: PathBuf::new(), values: BTreeMap::new() }
    }

    fn read(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AppError::Config(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            let key = k.trim().trim_start_matches("--").replace('_', "-");
            let v = v.trim().trim_matches('"').to_string();
            values.insert(key, v);
        }
        Ok(ConfigFile { path: path.to_path_buf(), values })
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> AppResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| AppError::Config(format!("{}: bad value {v:?} for {key}: {e}", self.path.display()))),
        }
    }

    fn choice<T: ValueEnum>(&mut self, key: &str) -> AppResult<Option<T>> {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => T::from_str(&v, true)
                .map(Some)
                .map_err(|e| AppError::Config(format!("{}: bad value {v:?} for {key}: {e}", self.path.display()))),
        }
    }

    fn list(&mut self, key: &str) -> Vec<String> {
        self.values
            .remove(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    fn finish(self) -> AppResult<()> {
        match self.values.keys().next() {
            None => Ok(()),
            Some(k) => Err(AppError::Config(format!("{}: unknown or inapplicable key {k:?}", self.path.display()))),
        }
    }
}

fn pick<T: FromStr>(flag: Option<T>, cfg: &mut ConfigFile, key: &str) -> AppResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    let from_file = cfg.parse(key)?;
    Ok(flag.or(from_file))
}

fn pick_choice<T: ValueEnum>(flag: Option<T>, cfg: &mut ConfigFile, key: &str) -> AppResult<Option<T>> {
    let from_file = cfg.choice(key)?;
    Ok(flag.or(from_file))
}

fn entropy_seed() -> u64 {
    std::collections::hash_map::RandomState::new().hash_one(std::time::SystemTime::now())
}

struct Common {
    meta: RunMeta,
    runner: RayonRunner,
    format: Format,
    output: Option<PathBuf>,
}

fn common(cli: &Cli, cfg: &mut ConfigFile, command: &'static str) -> AppResult<Common> {
    let threads = pick(cli.threads, cfg, "threads")?.unwrap_or(0);
    let seed = pick(cli.seed, cfg, "seed")?;
    let format = pick_choice(cli.format, cfg, "format")?.unwrap_or(Format::Json);
    let output = pick(cli.output.clone(), cfg, "output")?;
    let (seed, seed_source) = match seed {
        Some(s) => (s, SeedSource::Given),
        None => (entropy_seed(), SeedSource::Entropy),
    };
    let runner = RayonRunner::new(threads).map_err(|e| AppError::Config(format!("cannot start {threads} threads: {e}")))?;
    Ok(Common { meta: RunMeta { command, seed, seed_source }, runner, format, output })
}

struct DataSettings {
    data: PathBuf,
    x: Vec<String>,
    y: Vec<String>,
    opts: EmOptions,
    select: SelectArg,
    select_reps: usize,
    threshold: f64,
}

fn init_of(a: InitArg) -> Init {
    match a {
        InitArg::Cold => Init::Cold,
        InitArg::Warm => Init::WarmStart,
    }
}

fn data_settings(a: &DataArgs, cfg: &mut ConfigFile) -> AppResult<DataSettings> {
    let data = pick(a.data.clone(), cfg, "data")?.ok_or_else(|| AppError::Usage("--data is required".into()))?;
    let (x_file, y_file) = (cfg.list("x"), cfg.list("y"));
    let x = if a.x.is_empty() { x_file } else { a.x.clone() };
    let y = if a.y.is_empty() { y_file } else { a.y.clone() };
    if x.is_empty() || y.is_empty() {
        return Err(AppError::Usage("--x and --y must each name at least one column".into()));
    }
    let model_arg = pick_choice(a.model, cfg, "model")?.unwrap_or(ModelArg::Normal);
    let scale = pick(a.scale, cfg, "scale")?;
    let model = match model_arg {
        ModelArg::Normal => {
            if scale.is_some() {
                return Err(AppError::Config("--scale applies only to the bernoulli model".into()));
            }
            PredictorModel::Normal
        }
        ModelArg::Bernoulli => {
            if x.len() != 1 {
                return Err(AppError::Config(format!("the bernoulli model needs exactly one predictor column, got {}", x.len())));
            }
            let scale = scale.unwrap_or(1.0);
            if !(scale.is_finite() && scale != 0.0) {
                return Err(AppError::Config(format!("--scale must be finite and nonzero, got {scale}")));
            }
            PredictorModel::Bernoulli { scale }
        }
    };
    let mut opts = EmOptions::new(0, model);
    if let Some(t) = pick(a.tol, cfg, "tol")? {
        if !(t > 0.0) {
            return Err(AppError::Config(format!("--tol must be positive, got {t}")));
        }
        opts.tol = t;
    }
    if let Some(m) = pick(a.max_iter, cfg, "max-iter")? {
        opts.max_iter = m;
    }
    if let Some(i) = pick_choice(a.init, cfg, "init")? {
        opts.init = init_of(i);
    }
    let select = pick_choice(a.select, cfg, "select")?.unwrap_or(SelectArg::Bicq);
    let select_reps = pick(a.select_reps, cfg, "select-reps")?.unwrap_or(20);
    let threshold = pick(a.threshold, cfg, "threshold")?.unwrap_or(0.95);
    if select_reps == 0 {
        return Err(AppError::Config("--select-reps must be at least 1".into()));
    }
    Ok(DataSettings { data, x, y, opts, select, select_reps, threshold })
}

fn run_selection(
    ds: &emenv_core::data::ObservedDataset,
    s: &DataSettings,
    seed: u64,
    runner: &RayonRunner,
) -> AppResult<SelectionReport> {
    let mut opts = s.opts.clone();
    opts.track_loglik = false;
    Ok(match s.select {
        SelectArg::Bicq => select_u_bic_with(ds, &opts, runner)?,
        SelectArg::Bootstrap => {
            select_u_bootstrap_with(ds, &opts, s.select_reps, s.threshold, derive_seed(seed, 1), runner)?
        }
    })
}

fn emit(c: &Common, text: String) -> AppResult<()> {
    match &c.output {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_fit(cli: &Cli, a: &FitArgs, mut cfg: ConfigFile) -> AppResult<()> {
    let c = common(cli, &mut cfg, "fit")?;
    let s = data_settings(&a.data, &mut cfg)?;
    let u_arg = pick(a.u.clone(), &mut cfg, "u")?.unwrap_or_else(|| "auto".into());
    let boot_reps = pick(a.bootstrap_reps, &mut cfg, "bootstrap-reps")?.unwrap_or(0);
    cfg.finish()?;
    if boot_reps == 1 {
        return Err(AppError::Config("--bootstrap-reps must be 0 or at least 2".into()));
    }
    let ds = load_table(&s.data, &s.x, &s.y)?;
    let (u, selection) = if u_arg.eq_ignore_ascii_case("auto") {
        let rep = run_selection(&ds, &s, c.meta.seed, &c.runner)?;
        (rep.chosen_u, Some(rep))
    } else {
        let u: usize = u_arg.parse().map_err(|_| AppError::Config(format!("--u must be a count or auto, got {u_arg:?}")))?;
        if u > ds.r() {
            return Err(AppError::Config(format!("--u {u} exceeds the number of responses {}", ds.r())));
        }
        (u, None)
    };
    let mut opts = s.opts.clone();
    opts.u = u;
    let fit = em_envelope_fit(&ds, &opts)?;
    if !fit.converged {
        eprintln!("warning: EM stopped after {} iterations without meeting tol {}", fit.iterations, opts.tol);
    }
    let boot = if boot_reps >= 2 {
        let b = bootstrap_se_with(&ds, &opts, Estimator::EmEnvelope, boot_reps, derive_seed(c.meta.seed, 2), &c.runner)?;
        if b.unreliable {
            eprintln!("warning: {} of {} bootstrap replicates failed", b.failures, b.reps);
        }
        Some(b)
    } else {
        None
    };
    let text = match c.format {
        Format::Json => report::to_json_string(&report::fit_report(&c.meta, &ds, &fit, selection.as_ref(), boot.as_ref())),
        Format::Table => report::fit_text(&c.meta, &ds, &fit, selection.as_ref(), boot.as_ref()),
    };
    emit(&c, text)
}

fn cmd_select(cli: &Cli, a: &DataArgs, mut cfg: ConfigFile) -> AppResult<()> {
    let c = common(cli, &mut cfg, "select")?;
    let s = data_settings(a, &mut cfg)?;
    cfg.finish()?;
    let ds = load_table(&s.data, &s.x, &s.y)?;
    let rep = run_selection(&ds, &s, c.meta.seed, &c.runner)?;
    let text = match c.format {
        Format::Json => report::to_json_string(&report::select_report(&c.meta, &ds, s.opts.model, &rep)),
        Format::Table => report::select_text(&c.meta, &rep),
    };
    emit(&c, text)
}

fn scenario_spec(a: &SimArgs, cfg: &mut ConfigFile, seed: u64) -> AppResult<ScenarioSpec> {
    let name = pick(a.scenario.clone(), cfg, "scenario")?.unwrap_or_else(|| "normal-omega0-1000".into());
    let mut spec = ScenarioSpec::named(&name)
        .ok_or_else(|| AppError::Config(format!("unknown scenario {name:?}; expected one of {}", SCENARIO_NAMES.join(", "))))?;
    let n = pick(a.n, cfg, "n")?.unwrap_or(spec.n);
    let r = pick(a.r, cfg, "r")?.unwrap_or(spec.r);
    let p = pick(a.p, cfg, "p")?.unwrap_or(spec.p);
    let u = pick(a.u, cfg, "u")?.unwrap_or(spec.u);
    spec = spec.with_dims(n, r, p, u);
    spec.seed = seed;
    if let Some(reps) = pick(a.reps, cfg, "reps")? {
        spec.reps = reps;
    }
    if let Some(e) = pick_choice(a.errors, cfg, "errors")? {
        spec.errors = match e {
            ErrorsArg::Normal => ErrorFamily::Normal,
            ErrorsArg::T5 => ErrorFamily::T5,
            ErrorsArg::Uniform => ErrorFamily::Uniform,
            ErrorsArg::Laplace => ErrorFamily::Laplace,
            ErrorsArg::Zero => ErrorFamily::Zero,
        };
    }
    let scale = pick(a.scale, cfg, "scale")?;
    if let Some(f) = pick_choice(a.predictors, cfg, "predictors")? {
        spec.predictors = match f {
            PredictorsArg::Normal => PredictorFamily::Normal,
            PredictorsArg::T5 => PredictorFamily::T5,
            PredictorsArg::TwoPoint => PredictorFamily::TwoPoint { scale: scale.unwrap_or(25.0), pi: 0.5 },
        };
    }
    if let Some(m) = pick_choice(a.model, cfg, "model")? {
        spec.model = match m {
            ModelArg::Normal => PredictorModel::Normal,
            ModelArg::Bernoulli => PredictorModel::Bernoulli { scale: scale.unwrap_or(25.0) },
        };
    }
    if let Some(o) = pick(a.omega, cfg, "omega")? {
        spec.omega_scale = o;
    }
    if let Some(o) = pick(a.omega0, cfg, "omega0")? {
        spec.omega0_scale = o;
    }
    let b = pick(a.select_reps, cfg, "select-reps")?;
    let threshold = pick(a.threshold, cfg, "threshold")?;
    if let Some(sel) = pick_choice(a.select, cfg, "select")? {
        spec.selection = match sel {
            SimSelectArg::TrueU => USelection::TrueU,
            SimSelectArg::Bicq => USelection::Bic,
            SimSelectArg::Bootstrap => USelection::Bootstrap { b: 20, threshold: 0.95 },
        };
    }
    if let USelection::Bootstrap { b: ref mut bb, threshold: ref mut tt } = spec.selection {
        *bb = b.unwrap_or(*bb);
        *tt = threshold.unwrap_or(*tt);
    }
    let x_rate = pick(a.x_rate, cfg, "x-rate")?;
    let y_rate = pick(a.y_rate, cfg, "y-rate")?;
    match pick_choice(a.calibration, cfg, "calibration")?.unwrap_or(CalibrationArg::Target) {
        CalibrationArg::Target => {
            for v in [x_rate, y_rate].into_iter().flatten() {
                if !(0.0..1.0).contains(&v) {
                    return Err(AppError::Config(format!("missing rates must lie in [0, 1), got {v}")));
                }
            }
            spec.missingness.calibration =
                Calibration::Target { x_rate: x_rate.unwrap_or(0.12), y_rate: y_rate.unwrap_or(0.07) };
        }
        CalibrationArg::Verbatim => spec.missingness.calibration = Calibration::Verbatim,
    }
    if let Some(t) = pick(a.tol, cfg, "tol")? {
        spec.tol = t;
    }
    if let Some(m) = pick(a.max_iter, cfg, "max-iter")? {
        spec.max_iter = m;
    }
    if let Some(i) = pick_choice(a.init, cfg, "init")? {
        spec.init = init_of(i);
    }
    spec.validate().map_err(|e| AppError::Config(e.to_string()))?;
    Ok(spec)
}

fn cmd_simulate(cli: &Cli, a: &SimArgs, mut cfg: ConfigFile) -> AppResult<()> {
    let c = common(cli, &mut cfg, "simulate")?;
    let spec = scenario_spec(a, &mut cfg, c.meta.seed)?;
    let table_out = pick(a.table_output.clone(), &mut cfg, "table-output")?;
    cfg.finish()?;
    let res = run_scenario_with(&spec, &c.runner)?;
    let failed: usize = res.records.iter().filter(|r| !r.failures.is_empty()).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} replicates had at least one failed estimator", res.records.len());
    }
    if let Some(p) = table_out {
        std::fs::write(p, report::mse_table(&res, '\t'))?;
    }
    let text = match c.format {
        Format::Json => report::to_json_string(&report::simulate_report(&c.meta, &res)),
        Format::Table => report::simulate_text(&c.meta, &res),
    };
    emit(&c, text)
}

fn dispatch(cli: &Cli) -> AppResult<()> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::read(p)?,
        None => ConfigFile::empty(),
    };
    match &cli.command {
        Command::Fit(a) => cmd_fit(cli, a, cfg),
        Command::Select(a) => cmd_select(cli, a, cfg),
        Command::Simulate(a) => cmd_simulate(cli, a, cfg),
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.render().to_string();
            let msg = msg.trim().trim_start_matches("error: ");
            eprintln!("error[Usage]: {msg}");
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            e.exit_code()
        }
    }
}

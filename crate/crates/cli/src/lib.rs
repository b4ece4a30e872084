//! The `frugal` command line: fit frugal and propensity flows to a CSV,
//! generate benchmarks from the fitted models, evaluate reference
//! estimators on benchmark files, compare correlation structure, and
//! simulate the built-in ground-truth processes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use frugal_core::benchmark::{generate_benchmark, BenchmarkSpec, Metadata};
use frugal_core::config::{self, Config, Section};
use frugal_core::data::{ColumnSpec, Dataset, Kind, Role, Schema};
use frugal_core::dgp::{simulate_dgp, DgpSpec};
use frugal_core::estimators::{self, AteEstimate};
use frugal_core::frugal::{self, FrugalOptions, MarginVariant};
use frugal_core::propensity::fit_propensity_flow;
use frugal_core::serialize::{self, ModelBundle};
use frugal_core::stats;
use frugal_core::train::TrainReport;
use frugal_core::{Error, Result};

/// Environment variable holding the log filter (`error` … `trace`).
pub const LOG_ENV: &str = "FRUGAL_LOG";

#[derive(Debug, Parser)]
#[command(name = "frugal", version, about = "Frugal flows for causal benchmark generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Configuration file (`[section]` / `key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a frugal flow (and a propensity flow) to a CSV file.
    Fit {
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a benchmark CSV and its metadata sidecar from a model file.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// Number of datasets, seeded `seed, seed + 1, …`.
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate treatment effects on one or more benchmark CSV files.
    Evaluate {
        files: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare the correlation matrices of a real and a synthetic CSV.
    Diagnose {
        real: PathBuf,
        synthetic: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a ground-truth data-generating process.
    SimulateDgp {
        /// Built-in process (`m1`, `m2`, `m3`, `logistic-source`,
        /// `heterogeneous`) when no configuration is given.
        #[arg(long)]
        builtin: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

/// Process exit code for a result: 0 success, 2 invalid input, 1 failure.
pub fn exit_code(r: &Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 2,
        Err(_) => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { data, common } => cmd_fit(&data, &common).map(|_| ()),
        Command::Generate { model, replicates, common } => cmd_generate(&model, replicates, &common).map(|_| ()),
        Command::Evaluate { files, common } => cmd_evaluate(&files, &common).map(|_| ()),
        Command::Diagnose { real, synthetic, common } => {
            let report = cmd_diagnose(&real, &synthetic, &common)?;
            println!("max_abs_difference,{}", report.max_abs_difference);
            Ok(())
        }
        Command::SimulateDgp { builtin, tau, n, common } => {
            let ate = cmd_simulate_dgp(builtin.as_deref(), tau, n, &common)?;
            println!("true_ate,{ate}");
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(p) => Config::read(p),
        None => Ok(Config::default()),
    }
}

fn require_out(common: &Common, what: &str) -> Result<PathBuf> {
    common.out.clone().ok_or_else(|| Error::Usage(format!("--out is required for {what}")))
}

/// `[schema] columns = name:role[:kind] …`, in column order.
pub fn schema_from_config(c: &Config) -> Result<Option<Schema>> {
    let Some(s) = c.section("schema") else { return Ok(None) };
    s.check_keys(&["columns"])?;
    let raw = s.raw("columns").ok_or_else(|| Error::Schema("[schema] needs `columns`".into()))?;
    let columns = raw
        .split_whitespace()
        .map(|tok| {
            let parts: Vec<&str> = tok.split(':').collect();
            let (name, role) = match parts.as_slice() {
                [name, role] | [name, role, _] => (*name, role.parse::<Role>()?),
                _ => return Err(Error::Schema(format!("column spec `{tok}` is not name:role[:kind]"))),
            };
            let kind = match (parts.get(2), role) {
                (Some(k), _) => k.parse::<Kind>()?,
                (None, Role::Treatment) => Kind::Discrete,
                (None, _) => Kind::Continuous,
            };
            Ok(ColumnSpec { name: name.to_string(), role, kind })
        })
        .collect::<Result<Vec<_>>>()?;
    Schema::new(columns).map(Some)
}

fn loss_rows(out: &mut String, model: &str, report: &TrainReport) {
    for (k, (tr, va)) in report.train_loss.iter().zip(&report.val_loss).enumerate() {
        let best = u8::from(k + 1 == report.best_epoch);
        let _ = writeln!(out, "{model},{},{tr},{va},{best}", k + 1);
    }
}

/// Paths written by `fit`.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: PathBuf,
    pub losses: PathBuf,
}

/// Fits the models and writes `model.ffm` and `losses.csv` into `--out`.
pub fn cmd_fit(data_path: &Path, common: &Common) -> Result<FitOutput> {
    let c = load_config(common)?;
    let out = require_out(common, "fit")?;
    let mut cfg = config::train_config(c.section("train"))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let schema = schema_from_config(&c)?;
    let data = Dataset::read_csv_path(data_path, schema.as_ref())?;

    let empty = Section::new("fit");
    let fit = c.section("fit").unwrap_or(&empty);
    fit.check_keys(&["variant", "effect_modifiers", "arm_specific_scale", "propensity"])?;
    let variant: MarginVariant = fit.get_or("variant", MarginVariant::ParametricGaussian)?;
    let opts = FrugalOptions { arm_specific_scale: fit.get_or("arm_specific_scale", false)? };
    let modifiers: Vec<usize> = fit
        .list::<String>("effect_modifiers")?
        .unwrap_or_default()
        .iter()
        .map(|name| {
            data.covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Schema(format!("effect modifier `{name}` is not a covariate")))
        })
        .collect::<Result<_>>()?;

    log::info!("fitting {} rows, {} covariates, variant {variant}", data.n(), data.n_covariates());
    let frugal_model = if modifiers.is_empty() {
        let covariates = frugal::fit_covariate_transforms(&data, &cfg)?;
        frugal::fit_frugal_flow_with(&data, covariates, variant, &cfg, &opts)?
    } else {
        if variant != MarginVariant::ParametricGaussian {
            return Err(Error::Spec("effect modifiers need the parametric-gaussian variant".into()));
        }
        frugal::fit_heterogeneous_frugal_flow(&data, &modifiers, &cfg)?
    };
    let propensity = if fit.get_or("propensity", true)? {
        Some(fit_propensity_flow(&data.t, &data.z, &data.covariate_names, &cfg)?)
    } else {
        None
    };

    fs::create_dir_all(&out)?;
    let mut losses = String::from("model,epoch,train_loss,val_loss,best\n");
    loss_rows(&mut losses, "frugal", &frugal_model.report);
    if let Some(p) = &propensity {
        loss_rows(&mut losses, "propensity", &p.report);
    }
    let paths = FitOutput { model: out.join("model.ffm"), losses: out.join("losses.csv") };
    serialize::save(&ModelBundle { frugal: frugal_model, propensity }, &paths.model)?;
    fs::write(&paths.losses, losses)?;
    Ok(paths)
}

/// Sidecar path of a benchmark CSV.
pub fn metadata_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn replicate_path(out: &Path, k: usize, total: usize) -> PathBuf {
    if total == 1 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("benchmark");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    out.with_file_name(format!("{stem}_{k:03}.{ext}"))
}

/// Generates one CSV per replicate and returns their paths. The
/// configuration is either a `[benchmark]` spec or a metadata sidecar from
/// an earlier run, in which case the model fingerprint must match.
pub fn cmd_generate(model_path: &Path, replicates: usize, common: &Common) -> Result<Vec<PathBuf>> {
    let c = load_config(common)?;
    let out = require_out(common, "generate")?;
    if replicates == 0 {
        return Err(Error::Usage("--replicates must be at least 1".into()));
    }
    let (bundle, bytes): (ModelBundle, Vec<u8>) = serialize::load(model_path)?;
    let fingerprint = serialize::fingerprint(&bytes);
    let mut spec = if c.section("format").is_some() {
        let meta = Metadata::from_config(&c)?;
        if meta.frugal_fingerprint != fingerprint {
            return Err(Error::Spec(format!(
                "metadata was produced by model {} but {} has fingerprint {fingerprint}",
                meta.frugal_fingerprint,
                model_path.display()
            )));
        }
        meta.spec
    } else {
        let s = c.section("benchmark").ok_or_else(|| Error::Usage("generate needs a [benchmark] section".into()))?;
        BenchmarkSpec::from_section(s)?
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let mut written = Vec::with_capacity(replicates);
    for k in 0..replicates {
        let rep = BenchmarkSpec { seed: spec.seed.wrapping_add(k as u64), ..spec.clone() };
        let b = generate_benchmark(&bundle.frugal, bundle.propensity.as_ref(), &rep)?;
        let path = replicate_path(&out, k, replicates);
        b.data.write_csv_path(&path)?;
        let meta = Metadata {
            spec: rep,
            frugal_fingerprint: fingerprint.clone(),
            propensity_fingerprint: bundle.propensity.as_ref().map(|_| fingerprint.clone()),
            generation_ate: b.generation_ate,
        };
        fs::write(metadata_path(&path), meta.to_config().render())?;
        log::info!("wrote {} (generation ATE {})", path.display(), b.generation_ate);
        written.push(path);
    }
    Ok(written)
}

/// One line of the estimator table.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub dataset: String,
    pub estimate: AteEstimate,
}

fn is_binary(y: &[f64]) -> bool {
    y.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Estimates for one dataset. Binary outcomes additionally get the
/// log-odds estimators: IPW with a logistic propensity, and the
/// covariate-adjusted logistic regression.
pub fn estimate_all(ds: &Dataset) -> Vec<AteEstimate> {
    let mut out = Vec::new();
    let mut push = |method: &str, r: Result<AteEstimate>| match r {
        Ok(e) => out.push(e),
        Err(err) => {
            log::warn!("{method} failed: {err}");
            out.push(AteEstimate { point: f64::NAN, stderr: f64::NAN, method: method.into(), n: ds.n() });
        }
    };
    push("dom", estimators::difference_of_means(ds));
    push("or", estimators::outcome_regression_ate(ds));
    if is_binary(&ds.y) {
        let ipw = estimators::logistic_propensity(ds).and_then(|p| estimators::ipw_logistic(ds, &p));
        push(
            "ipw-logistic",
            ipw.map(|f| AteEstimate { point: f.coefficients[1], stderr: f.stderr[1], method: "ipw-logistic".into(), n: ds.n() }),
        );
        push(
            "logistic-or",
            estimators::logistic_outcome_regression(ds)
                .map(|f| AteEstimate { point: f.coefficients[1], stderr: f.stderr[1], method: "logistic-or".into(), n: ds.n() }),
        );
    }
    out
}

/// Estimator table over `files`; rows per dataset and method, then one
/// pooled row per method (mean estimate, Monte-Carlo standard error).
pub fn cmd_evaluate(files: &[PathBuf], common: &Common) -> Result<Vec<EstimateRow>> {
    if files.is_empty() {
        return Err(Error::Usage("evaluate needs at least one CSV file".into()));
    }
    let c = load_config(common)?;
    let schema = schema_from_config(&c)?;
    let mut rows = Vec::new();
    let mut first: Option<Schema> = None;
    for f in files {
        let ds = Dataset::read_csv_path(f, schema.as_ref())?;
        let s = ds.schema();
        match &first {
            None => first = Some(s),
            Some(prev) if *prev != s => {
                return Err(Error::Schema(format!("{} has a different schema from {}", f.display(), files[0].display())))
            }
            Some(_) => {}
        }
        let name = f.display().to_string();
        rows.extend(estimate_all(&ds).into_iter().map(|estimate| EstimateRow { dataset: name.clone(), estimate }));
    }
    let mut methods: Vec<String> = Vec::new();
    for r in &rows {
        if !methods.contains(&r.estimate.method) {
            methods.push(r.estimate.method.clone());
        }
    }
    for m in methods {
        let points: Vec<f64> =
            rows.iter().filter(|r| r.estimate.method == m).map(|r| r.estimate.point).filter(|p| p.is_finite()).collect();
        let k = points.len();
        let stderr = if k > 1 { stats::std_dev(&points) / (k as f64).sqrt() } else { f64::NAN };
        rows.push(EstimateRow {
            dataset: "pooled".into(),
            estimate: AteEstimate { point: stats::mean(&points), stderr, method: m, n: k },
        });
    }
    let mut text = String::from("dataset,method,estimate,stderr,lower,upper,n\n");
    for r in &rows {
        let (lo, hi) = r.estimate.interval();
        let _ = writeln!(text, "{},{},{},{},{lo},{hi},{}", r.dataset, r.estimate.method, r.estimate.point, r.estimate.stderr, r.estimate.n);
    }
    match &common.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(rows)
}

/// Pearson correlation matrices over covariates and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub variables: Vec<String>,
    pub real: Vec<Vec<f64>>,
    pub synthetic: Vec<Vec<f64>>,
    pub max_abs_difference: f64,
}

pub fn correlation_report(real: &Dataset, synthetic: &Dataset) -> Result<CorrelationReport> {
    if real.schema() != synthetic.schema() {
        return Err(Error::Schema("real and synthetic data have different schemas".into()));
    }
    let columns = |d: &Dataset| {
        let mut c = d.z.clone();
        c.push(d.y.clone());
        c
    };
    let a = stats::correlation_matrix(&columns(real));
    let b = stats::correlation_matrix(&columns(synthetic));
    let max_abs_difference = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let mut variables = real.covariate_names.clone();
    variables.push(real.outcome_name.clone());
    Ok(CorrelationReport { variables, real: a, synthetic: b, max_abs_difference })
}

pub fn cmd_diagnose(real: &Path, synthetic: &Path, common: &Common) -> Result<CorrelationReport> {
    let c = load_config(common)?;
    let schema = schema_from_config(&c)?;
    let r = Dataset::read_csv_path(real, schema.as_ref())?;
    let s = Dataset::read_csv_path(synthetic, schema.as_ref())?;
    let report = correlation_report(&r, &s)?;
    let mut text = format!("matrix,variable,{}\n", report.variables.join(","));
    for (label, m) in [("real", &report.real), ("synthetic", &report.synthetic)] {
        for (name, row) in report.variables.iter().zip(m) {
            let vals: Vec<String> = row.iter().map(ToString::to_string).collect();
            let _ = writeln!(text, "{label},{name},{}", vals.join(","));
        }
    }
    if let Some(p) = &common.out {
        fs::write(p, text)?;
    }
    Ok(report)
}

/// Writes a simulated dataset and returns its exact ATE.
pub fn cmd_simulate_dgp(builtin: Option<&str>, tau: Option<f64>, n: Option<usize>, common: &Common) -> Result<f64> {
    let c = load_config(common)?;
    let out = require_out(common, "simulate-dgp")?;
    let spec = match (c.section("dgp"), builtin) {
        (Some(_), Some(_)) => return Err(Error::Usage("give either --builtin or a [dgp] section, not both".into())),
        (Some(s), None) => {
            let mut spec = DgpSpec::from_section(s)?;
            if let Some(t) = tau {
                spec.tau = t;
            }
            spec
        }
        (None, Some(name)) => frugal_core::dgp::builtin(name, tau.unwrap_or(1.0))?,
        (None, None) => return Err(Error::Usage("simulate-dgp needs --builtin or a [dgp] section".into())),
    };
    let sim = c.section("simulate");
    if let Some(s) = sim {
        s.check_keys(&["n", "seed"])?;
    }
    let n = match n {
        Some(n) => n,
        None => sim.map(|s| s.get("n")).transpose()?.flatten().unwrap_or(10_000),
    };
    let seed = match common.seed {
        Some(s) => s,
        None => sim.map(|s| s.get_or("seed", 0)).transpose()?.unwrap_or(0),
    };
    if n == 0 {
        return Err(Error::Usage("n must be at least 1".into()));
    }
    let sample = simulate_dgp(&spec, n, seed)?;
    sample.data.write_csv_path(&out)?;
    Ok(sample.true_ate)
}

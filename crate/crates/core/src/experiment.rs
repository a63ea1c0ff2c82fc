//! Experiment configuration and on-disk runs.
//!
//! An experiment runs `chains` chains of one problem with seeds
//! `seed + 0, seed + 1, ..` and writes
//!
//! ```text
//! <out>/<name>/chain_<k>/trace.csv     per-step trace
//! <out>/<name>/chain_<k>/samples.csv   final sample set (surrogate chains)
//! <out>/<name>/error_trace.csv         relative covariance error traces
//! <out>/<name>/cost_trace.csv          cumulative model evaluations
//! <out>/<name>/refinements.csv         every refinement event
//! <out>/<name>/reference.json          pooled covariance (reference runs)
//! <out>/<name>/summary.json            config echo, seeds, final metrics
//! ```
//!
//! Files are written to a temporary name and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::approx_mh::{run_chain, run_reference_chain, ChainConfig, ChainOutput, RefinementCause};
use crate::elliptic::{EllipticConfig, EllipticProblem};
use crate::error::{Error, ErrorCategory, Result};
use crate::forward_models::{
    ExpQuartic, GaussianNoiseModel, GaussianTarget, Problem, ToggleSwitch, TOGGLE_DATA, TOGGLE_SDS,
};
use crate::harness::{
    cost_trace, pooled_reference, refinement_breakdown, relative_cov_error_trace, TracePoint, DEFAULT_BURN_IN,
    DEFAULT_TRACE_POINTS, DEFAULT_WINDOW,
};
use crate::rng::{stream, Stream};

/// Where the toggle-switch observations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// The published table of observations and errors.
    Published,
    /// Generated from the model at `theta_true` plus seeded noise.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToggleConfig {
    /// Inducer concentrations, one per observation. Required.
    pub iptg: Vec<f64>,
    #[serde(default = "default_source")]
    pub data: DataSource,
    /// Defaults to the center of the parameter box.
    #[serde(default)]
    pub theta_true: Option<Vec<f64>>,
    #[serde(default)]
    pub data_seed: u64,
    /// Observation errors of synthetic data; by default each output gets
    /// the published error of the switch state it lands in.
    #[serde(default)]
    pub sds: Option<Vec<f64>>,
}

fn default_source() -> DataSource {
    DataSource::Synthetic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianConfig {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    ExpQuartic,
    ToggleSwitch(ToggleConfig),
    EllipticPde(EllipticConfig),
    Gaussian(GaussianConfig),
}

impl ProblemConfig {
    pub fn build(&self) -> Result<Box<dyn Problem>> {
        Ok(match self {
            ProblemConfig::ExpQuartic => Box::new(ExpQuartic),
            ProblemConfig::ToggleSwitch(c) => {
                let problem = match c.data {
                    DataSource::Published => ToggleSwitch::new(
                        c.iptg.clone(),
                        GaussianNoiseModel::new(TOGGLE_DATA.to_vec(), TOGGLE_SDS.to_vec())?,
                    ),
                    DataSource::Synthetic => {
                        let theta = c.theta_true.clone().unwrap_or_else(|| vec![0.0; 6]);
                        if theta.len() != 6 {
                            return Err(Error::Config("problem.theta_true needs 6 entries".into()));
                        }
                        let mut rng = stream(c.data_seed, Stream::Data);
                        match &c.sds {
                            Some(sds) => ToggleSwitch::synthetic_with_sds(c.iptg.clone(), &theta, sds.clone(), &mut rng),
                            None => ToggleSwitch::synthetic(c.iptg.clone(), &theta, &mut rng),
                        }
                    }
                };
                Box::new(problem.map_err(|e| match e {
                    Error::DimensionMismatch { expected, got } => {
                        Error::Config(format!("problem.iptg has {got} entries, expected {expected}"))
                    }
                    Error::InvalidArgument(m) => Error::Config(format!("problem.iptg: {m}")),
                    other => other,
                })?)
            }
            ProblemConfig::EllipticPde(c) => Box::new(EllipticProblem::new(c, &mut stream(c.data_seed, Stream::Data))?),
            ProblemConfig::Gaussian(c) => {
                let d = c.mean.len();
                if c.covariance.len() != d || c.covariance.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!("problem.covariance must be {d}x{d}")));
                }
                let cov = DMatrix::from_fn(d, d, |i, j| c.covariance[i][j]);
                Box::new(
                    GaussianTarget::new(c.mean.clone(), cov)
                        .map_err(|e| Error::Config(format!("problem.covariance: {e}")))?,
                )
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub chain: ChainConfig,
    /// Chain start; the origin when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Exact-model Metropolis-Hastings without surrogates.
    #[serde(default)]
    pub reference_mode: bool,
    /// Master seed; chain `k` uses `seed + k`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    /// Trace grid size; `None` records every step.
    #[serde(default = "default_trace_points")]
    pub trace_points: Option<usize>,
    #[serde(default = "default_window")]
    pub window: usize,
    /// A `reference.json` to measure covariance error against.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    /// Chains run concurrently.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_chains() -> usize {
    1
}
fn default_burn_in() -> f64 {
    DEFAULT_BURN_IN
}
fn default_trace_points() -> Option<usize> {
    Some(DEFAULT_TRACE_POINTS)
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}
fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn new(name: &str, problem: ProblemConfig, chain: ChainConfig) -> Self {
        Self {
            name: name.to_string(),
            problem,
            chain,
            initial: None,
            chains: default_chains(),
            reference_mode: false,
            seed: 0,
            burn_in: DEFAULT_BURN_IN,
            trace_points: default_trace_points(),
            window: DEFAULT_WINDOW,
            reference: None,
            workers: 1,
        }
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self, dimension: usize) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config("name must be a nonempty plain directory name".into()));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::Config("burn_in must lie in [0, 1)".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if let Some(init) = &self.initial {
            if init.len() != dimension {
                return Err(Error::Config(format!(
                    "initial has {} entries, the problem has dimension {dimension}",
                    init.len()
                )));
            }
        }
        if !self.reference_mode {
            self.chain.validate(dimension)?;
        } else {
            self.chain.schedule.validate()?;
        }
        Ok(())
    }

    pub fn initial_point(&self, dimension: usize) -> Vec<f64> {
        self.initial.clone().unwrap_or_else(|| vec![0.0; dimension])
    }
}

/// Outcome of one chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSummary {
    pub index: usize,
    pub seed: u64,
    /// `None` on success.
    pub error: Option<String>,
    pub error_category: Option<ErrorCategory>,
    pub steps: usize,
    pub model_evals: usize,
    pub seed_evals: usize,
    pub acceptance_rate: f64,
    pub refinements_random: usize,
    pub refinements_cv: usize,
    pub refinements_fit_failure: usize,
    pub final_error: Option<f64>,
    pub elapsed_seconds: f64,
}

/// Traces and summary of an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config: ExperimentConfig,
    pub chains: Vec<ChainSummary>,
    /// Pooled covariance used for the error traces, if any.
    pub reference: Option<Vec<Vec<f64>>>,
    pub median_final_error: Option<f64>,
    pub median_model_evals: Option<f64>,
    #[serde(skip)]
    pub error_traces: Vec<Vec<TracePoint>>,
    #[serde(skip)]
    pub cost_traces: Vec<Vec<TracePoint>>,
    #[serde(skip)]
    pub breakdowns: Vec<Vec<Option<f64>>>,
}

impl ExperimentReport {
    pub fn failures(&self) -> impl Iterator<Item = &ChainSummary> {
        self.chains.iter().filter(|c| c.error.is_some())
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config("reference covariance must be a nonempty square matrix".into()));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

/// Reads a covariance written by a reference run.
pub fn read_reference(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read reference {}: {e}", path.display())))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)?;
    rows_matrix(&rows)
}

/// The per-step trace as CSV.
pub fn trace_csv(output: &ChainOutput, dimension: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string()];
    header.extend((1..=dimension).map(|i| format!("theta_{i}")));
    header.extend(
        [
            "accepted",
            "cumulative_model_evals",
            "eps_plus",
            "eps_minus",
            "refinement_cause",
            "refinement_site",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for r in &output.records {
        let mut row = vec![r.step.to_string()];
        row.extend(r.position.iter().map(|v| v.to_string()));
        row.push((r.accepted as u8).to_string());
        row.push(r.model_evals.to_string());
        row.push(r.eps_plus.to_string());
        row.push(r.eps_minus.to_string());
        let join = |f: &dyn Fn(&(RefinementCause, crate::approx_mh::Site)) -> &'static str| {
            if r.refinements.is_empty() {
                "none".to_string()
            } else {
                r.refinements.iter().map(f).collect::<Vec<_>>().join("|")
            }
        };
        row.push(join(&|(c, _)| c.label()));
        row.push(join(&|(_, s)| s.label()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Chain positions read back from a trace file.
pub fn read_trace_positions(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("theta_"))
        .map(|(i, _)| i)
        .collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = cols
            .iter()
            .map(|&c| {
                rec[c]
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad value in {}: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

fn trace_table(traces: &[Vec<TracePoint>], value: &str) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["chain", "step", value])?;
    for (k, t) in traces.iter().enumerate() {
        for p in t {
            w.write_record([k.to_string(), p.step.to_string(), p.value.to_string()])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

struct ChainResult {
    summary: ChainSummary,
    output: Option<ChainOutput>,
}

fn run_one(problem: &dyn Problem, config: &ExperimentConfig, index: usize) -> ChainResult {
    let seed = config.seed.wrapping_add(index as u64);
    let mut chain = config.chain.clone();
    chain.seed = seed;
    let initial = config.initial_point(problem.dimension());
    let start = Instant::now();
    let result = if config.reference_mode {
        run_reference_chain(problem, &chain, &initial)
    } else {
        run_chain(problem, &chain, &initial)
    };
    let elapsed_seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(output) => {
            let count = |c: RefinementCause| output.refinement_log.iter().filter(|e| e.cause == c).count();
            ChainResult {
                summary: ChainSummary {
                    index,
                    seed,
                    error: None,
                    error_category: None,
                    steps: output.records.len(),
                    model_evals: output.model_evals,
                    seed_evals: output.seed_evals,
                    acceptance_rate: output.acceptance_rate(),
                    refinements_random: count(RefinementCause::Random),
                    refinements_cv: count(RefinementCause::Cv),
                    refinements_fit_failure: count(RefinementCause::FitFailure),
                    final_error: None,
                    elapsed_seconds,
                },
                output: Some(output),
            }
        }
        Err(e) => {
            log::error!("chain {index} (seed {seed}) failed: {e}");
            ChainResult {
                summary: ChainSummary {
                    index,
                    seed,
                    error: Some(e.to_string()),
                    error_category: Some(e.category()),
                    steps: 0,
                    model_evals: 0,
                    seed_evals: 0,
                    acceptance_rate: 0.0,
                    refinements_random: 0,
                    refinements_cv: 0,
                    refinements_fit_failure: 0,
                    final_error: None,
                    elapsed_seconds,
                },
                output: None,
            }
        }
    }
}

/// Runs all chains of an experiment in memory.
///
/// Individual chain failures are recorded in the summaries; only invalid
/// configurations abort the run.
pub fn run_experiment_in_memory(config: &ExperimentConfig) -> Result<(ExperimentReport, Vec<Option<ChainOutput>>)> {
    let problem = config.problem.build()?;
    config.validate(problem.dimension())?;
    let problem: &dyn Problem = problem.as_ref();
    let results: Vec<Mutex<Option<ChainResult>>> = (0..config.chains).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.workers.clamp(1, config.chains);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= config.chains {
                    break;
                }
                log::info!("{}: chain {k} started", config.name);
                let r = run_one(problem, config, k);
                *results[k].lock().expect("result slot") = Some(r);
            });
        }
    });
    let results: Vec<ChainResult> = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every chain ran"))
        .collect();

    let reference = if config.reference_mode {
        let chains: Vec<Vec<Vec<f64>>> = results
            .iter()
            .filter_map(|r| r.output.as_ref().map(|o| o.positions()))
            .collect();
        if chains.is_empty() {
            None
        } else {
            Some(pooled_reference(&chains, config.burn_in)?)
        }
    } else {
        match &config.reference {
            Some(path) => Some(read_reference(path)?),
            None => None,
        }
    };
    let mut summaries = Vec::with_capacity(results.len());
    let mut outputs = Vec::with_capacity(results.len());
    let (mut error_traces, mut cost_traces, mut breakdowns) = (Vec::new(), Vec::new(), Vec::new());
    for r in results {
        let mut summary = r.summary;
        if let Some(out) = &r.output {
            if let Some(reference) = &reference {
                let trace = relative_cov_error_trace(&out.positions(), reference, config.burn_in, config.trace_points);
                summary.final_error = trace.last().map(|p| p.value);
                error_traces.push(trace);
            } else {
                error_traces.push(Vec::new());
            }
            cost_traces.push(cost_trace(&out.records, config.trace_points));
            breakdowns.push(refinement_breakdown(&out.refinement_log, out.records.len(), config.window));
        } else {
            error_traces.push(Vec::new());
            cost_traces.push(Vec::new());
            breakdowns.push(Vec::new());
        }
        summaries.push(summary);
        outputs.push(r.output);
    }
    let mut finals: Vec<f64> = summaries.iter().filter_map(|s| s.final_error).collect();
    let mut evals: Vec<f64> = summaries
        .iter()
        .filter(|s| s.error.is_none())
        .map(|s| s.model_evals as f64)
        .collect();
    let report = ExperimentReport {
        name: config.name.clone(),
        config: config.clone(),
        chains: summaries,
        reference: reference.as_ref().map(matrix_rows),
        median_final_error: median(&mut finals),
        median_model_evals: median(&mut evals),
        error_traces,
        cost_traces,
        breakdowns,
    };
    Ok((report, outputs))
}

/// Runs an experiment and writes its directory under `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    let (report, outputs) = run_experiment_in_memory(config)?;
    let dir = out.join(&config.name);
    let d = config.problem.build()?.dimension();
    for (k, output) in outputs.iter().enumerate() {
        let Some(output) = output else { continue };
        let chain_dir = dir.join(format!("chain_{k}"));
        write_atomic(&chain_dir.join("trace.csv"), &trace_csv(output, d)?)?;
        let samples_path = chain_dir.join("samples.csv");
        if let Some(set) = &output.sample_set {
            let mut buf = Vec::new();
            set.write_csv(&mut buf)?;
            write_atomic(&samples_path, &buf)?;
        } else if samples_path.exists() {
            fs::remove_file(&samples_path)?;
        }
    }
    write_outputs(&report, &outputs, &dir)?;
    Ok(report)
}

fn write_outputs(report: &ExperimentReport, outputs: &[Option<ChainOutput>], dir: &Path) -> Result<()> {
    write_atomic(&dir.join("error_trace.csv"), &trace_table(&report.error_traces, "relative_error")?)?;
    write_atomic(&dir.join("cost_trace.csv"), &trace_table(&report.cost_traces, "model_evals")?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["chain", "step", "cause", "site"])?;
    for (k, out) in outputs.iter().enumerate() {
        for e in out.iter().flat_map(|o| &o.refinement_log) {
            w.write_record([k.to_string(), e.step.to_string(), e.cause.label().into(), e.site.label().into()])?;
        }
    }
    write_atomic(
        &dir.join("refinements.csv"),
        &w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )?;
    if let (true, Some(reference)) = (report.config.reference_mode, &report.reference) {
        write_atomic(&dir.join("reference.json"), serde_json::to_string_pretty(reference)?.as_bytes())?;
    }
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    Ok(())
}

/// Recomputes covariance-error traces and the summary of a stored
/// experiment directory against `reference` (or the directory's own
/// `reference.json`).
pub fn recompute_report(dir: &Path, reference: Option<&Path>) -> Result<ExperimentReport> {
    let summary_path = dir.join("summary.json");
    let text = fs::read_to_string(&summary_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", summary_path.display())))?;
    let mut report: ExperimentReport = serde_json::from_str(&text)?;
    let reference_path = reference.map(Path::to_path_buf).unwrap_or_else(|| dir.join("reference.json"));
    let reference_cov = read_reference(&reference_path)?;
    let config = report.config.clone();
    report.error_traces = Vec::new();
    for chain in report.chains.iter_mut() {
        let trace_path = dir.join(format!("chain_{}", chain.index)).join("trace.csv");
        if chain.error.is_some() || !trace_path.exists() {
            report.error_traces.push(Vec::new());
            continue;
        }
        let positions = read_trace_positions(&trace_path)?;
        let trace = relative_cov_error_trace(&positions, &reference_cov, config.burn_in, config.trace_points);
        chain.final_error = trace.last().map(|p| p.value);
        report.error_traces.push(trace);
    }
    let mut finals: Vec<f64> = report.chains.iter().filter_map(|s| s.final_error).collect();
    report.median_final_error = median(&mut finals);
    report.reference = Some(matrix_rows(&reference_cov));
    write_atomic(&dir.join("error_trace.csv"), &trace_table(&report.error_traces, "relative_error")?)?;
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

/// A named set of overrides merged into a base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

/// A base configuration plus variants; each variant runs as its own
/// experiment named `<base name>_<variant name>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Battery {
    pub base: toml::Table,
    pub variants: Vec<Variant>,
}

fn merge(base: &mut toml::Table, overrides: &toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl Battery {
    /// Parses a TOML document whose `[[variant]]` array lists the variants
    /// and whose remaining keys form the base configuration.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let variants = match table.remove("variant") {
            Some(v) => v
                .try_into::<Vec<Variant>>()
                .map_err(|e| Error::Config(format!("variant: {e}")))?,
            None => Vec::new(),
        };
        Ok(Self { base: table, variants })
    }

    /// The experiment configurations, one per variant (or the base alone).
    pub fn configs(&self) -> Result<Vec<ExperimentConfig>> {
        let base_config = |t: toml::Table| -> Result<ExperimentConfig> {
            toml::Value::Table(t)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
        };
        if self.variants.is_empty() {
            return Ok(vec![base_config(self.base.clone())?]);
        }
        self.variants
            .iter()
            .map(|v| {
                let mut t = self.base.clone();
                merge(&mut t, &v.overrides);
                let mut c = base_config(t).map_err(|e| Error::Config(format!("variant {}: {e}", v.name)))?;
                c.name = format!("{}_{}", c.name, v.name);
                Ok(c)
            })
            .collect()
    }
}

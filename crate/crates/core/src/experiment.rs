//! Config-driven benchmark runs comparing the spectral estimator, randomly
//! initialized EM, and EM warm-started from the spectral estimate.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::aligned_error;
use crate::em::{em_fit, init_random, EMConfig, EMResult};
use crate::error::{Error, Result};
use crate::factorization::{factorize, PowerMethodConfig};
use crate::model::{
    fmt17, identifiability_check_map, sample_dataset, Dataset, FeatureMap, IdentifiabilityReport,
    MixParams, NoiseSpec, IDENTIFIABILITY_THRESHOLD,
};
use crate::regression::{default_lambdas, estimate_compound, BiasMode, MomentData, SolverConfig};
use crate::seed::derive_seed;

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "MIXREG_THREADS";

/// Noise variance used by fixed-variance EM when the configured noise has none.
pub const MIN_EM_SIGMA2: f64 = 1e-6;

pub const CSV_HEADER: &str = "config_id,instance,attempt,method,aligned_error,wall_ms,converged";

const TAG_TRUTH: u64 = 1;
const TAG_DATA: u64 = 2;
const TAG_POWER: u64 = 3;
const TAG_EM_INIT: u64 = 4;
const TAG_GATE: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Spectral,
    Em,
    SpectralEm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Spectral, Method::Em, Method::SpectralEm];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Spectral => "spectral",
            Method::Em => "em",
            Method::SpectralEm => "spectral_em",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSpec {
    /// `(1 / (1e5 sqrt n), 1 / (1e3 sqrt n))`
    #[default]
    PaperDefault,
    Explicit([f64; 2]),
}

impl LambdaSpec {
    pub fn resolve(self, n: usize) -> (f64, f64) {
        match self {
            LambdaSpec::PaperDefault => default_lambdas(n),
            LambdaSpec::Explicit([l2, l3]) => (l2, l3),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    /// One dataset feeds all three regressions.
    #[default]
    Shared,
    /// Three disjoint datasets of `n` records, one per regression.
    IndependentTriples,
}

/// Which identifiability checks must pass before any fitting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifiabilityGate {
    /// All of `p = 1, 2, 3`.
    #[default]
    Strict,
    /// Only `p = 1` (required by the first-moment regression); failures at
    /// `p = 2, 3` are logged as warnings.
    FirstOrder,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmSigma2 {
    /// Hold the variance at the configured noise's second moment.
    #[default]
    Fixed,
    Estimated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmSettings {
    pub max_iter: usize,
    pub loglik_tol: f64,
    pub sigma2: EmSigma2,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            loglik_tol: 1e-9,
            sigma2: EmSigma2::Fixed,
        }
    }
}

impl EmSettings {
    fn config(&self, noise: &NoiseSpec) -> EMConfig {
        let base = match self.sigma2 {
            EmSigma2::Fixed => EMConfig::fixed(noise.m2().max(MIN_EM_SIGMA2)),
            EmSigma2::Estimated => EMConfig::estimated(),
        };
        EMConfig {
            max_iter: self.max_iter,
            loglik_tol: self.loglik_tol,
            ..base
        }
    }
}

fn default_id() -> String {
    "experiment".into()
}

fn default_identifiability_samples() -> usize {
    10_000
}

fn default_identifiability_threshold() -> f64 {
    IDENTIFIABILITY_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub id: String,
    /// Number of base variables `t`.
    pub b: usize,
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub feature_map: Vec<String>,
    pub noise: NoiseSpec,
    pub methods: Vec<Method>,
    pub instances: usize,
    pub attempts: usize,
    #[serde(default)]
    pub lambdas: LambdaSpec,
    #[serde(default)]
    pub dataset_mode: DatasetMode,
    #[serde(default)]
    pub misspecified: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub identifiability_gate: IdentifiabilityGate,
    #[serde(default = "default_identifiability_samples")]
    pub identifiability_samples: usize,
    #[serde(default = "default_identifiability_threshold")]
    pub identifiability_threshold: f64,
    #[serde(default)]
    pub bias: BiasMode,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Restart and iteration counts; the seed is derived per task.
    #[serde(default)]
    pub power: PowerMethodConfig,
    #[serde(default)]
    pub em: EmSettings,
    /// Measure wall time per method. Timings make the output
    /// schedule-dependent, so this is off by default.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.instances == 0 || self.attempts == 0 {
            return bad("instances and attempts must be >= 1".into());
        }
        if self.d != self.feature_map.len() {
            return bad(format!(
                "d={} but the feature map has {} features",
                self.d,
                self.feature_map.len()
            ));
        }
        if self.k == 0 || self.k > self.d {
            return bad(format!("need 1 <= k <= d, got k={}, d={}", self.k, self.d));
        }
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        if self.methods.is_empty() {
            return bad("no methods configured".into());
        }
        if self.identifiability_samples == 0 {
            return bad("identifiability_samples must be >= 1".into());
        }
        self.noise.validate()?;
        self.solver.validate()?;
        self.feature_map()?;
        Ok(())
    }

    pub fn feature_map(&self) -> Result<FeatureMap> {
        let fmap = FeatureMap::new(self.b, &self.feature_map)?;
        Ok(if self.misspecified {
            fmap.misspecified()
        } else {
            fmap
        })
    }

    /// Sample size and repetition counts of the published tables.
    pub fn paper_scale(&mut self) {
        self.n = 500_000;
        self.instances = 20;
        self.attempts = 10;
    }
}

/// Identifiability diagnostics for `p = 1, 2, 3` on the configured map.
pub fn identifiability_reports(cfg: &ExperimentConfig) -> Result<Vec<IdentifiabilityReport>> {
    let fmap = cfg.feature_map()?;
    let seed = derive_seed(cfg.seed, &[TAG_GATE]);
    (1..=3)
        .map(|p| {
            identifiability_check_map(
                &fmap,
                cfg.identifiability_samples,
                p,
                seed,
                cfg.identifiability_threshold,
            )
        })
        .collect()
}

/// Applies the configured gate to the diagnostics.
pub fn check_gate(gate: IdentifiabilityGate, reports: &[IdentifiabilityReport]) -> Result<()> {
    for r in reports.iter().filter(|r| !r.pass) {
        let required = match gate {
            IdentifiabilityGate::Strict => true,
            IdentifiabilityGate::FirstOrder => r.order == 1,
        };
        if required {
            return Err(Error::PreFlight {
                order: r.order,
                sigma_min: r.sigma_min,
                threshold: r.threshold,
            });
        }
        log::warn!(
            "identifiability check fails at p={} (sigma_min={:e}); continuing under the first_order gate",
            r.order,
            r.sigma_min
        );
    }
    Ok(())
}

/// Convergence diagnostics for one method on one attempt.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// ADMM iterations for the second- and third-order regressions.
    pub admm_iterations: Option<[usize; 2]>,
    pub em_iterations: Option<usize>,
    pub final_loglik: Option<f64>,
    /// Set when the method failed; `aligned_error` is then absent.
    pub failure: Option<String>,
    /// The spectral estimate was unavailable, so the warm-started EM arm ran
    /// from the random initialization of the EM arm instead.
    pub fallback_init: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub config_id: String,
    pub instance: usize,
    pub attempt: usize,
    pub method: Method,
    pub aligned_error: Option<f64>,
    pub wall_ms: Option<f64>,
    pub converged: bool,
    pub diagnostics: Diagnostics,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    /// NaN (written as JSON `null`) when every attempt failed.
    #[serde(deserialize_with = "null_as_nan")]
    pub mean: f64,
    /// Sample standard deviation (zero for a single value).
    #[serde(deserialize_with = "null_as_nan")]
    pub std: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub median: f64,
    /// Successful attempts contributing to the statistics.
    pub count: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub preflight: Vec<IdentifiabilityReport>,
    pub records: Vec<Record>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn errors(&self, method: Method) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.aligned_error)
            .collect()
    }

    pub fn aggregate(&self, method: Method) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }
}

pub fn aggregate(method: Method, records: &[Record]) -> Aggregate {
    let mine: Vec<&Record> = records.iter().filter(|r| r.method == method).collect();
    let mut errs: Vec<f64> = mine.iter().filter_map(|r| r.aligned_error).collect();
    let count = errs.len();
    let (mean, std, median) = if count == 0 {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mean = errs.iter().sum::<f64>() / count as f64;
        let var = if count > 1 {
            errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (count - 1) as f64
        } else {
            0.0
        };
        errs.sort_by(|a, b| a.total_cmp(b));
        let median = if count % 2 == 1 {
            errs[count / 2]
        } else {
            0.5 * (errs[count / 2 - 1] + errs[count / 2])
        };
        (mean, var.sqrt(), median)
    };
    Aggregate {
        method,
        mean,
        std,
        median,
        count,
        failures: mine.len() - count,
    }
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let cap: usize = v
            .parse()
            .ok()
            .filter(|&c| c >= 1)
            .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        builder = builder.num_threads(cap);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))
}

/// Ground truth for one instance; deterministic in `(seed, instance)`.
pub fn instance_truth(cfg: &ExperimentConfig, instance: usize) -> Result<MixParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_TRUTH, instance as u64]));
    MixParams::random_ground_truth(cfg.k, cfg.d, &mut rng)
}

/// Datasets for one attempt: one in shared mode, three disjoint ones otherwise.
pub fn attempt_data(
    cfg: &ExperimentConfig,
    fmap: &FeatureMap,
    truth: &MixParams,
    instance: usize,
    attempt: usize,
) -> Result<Vec<Dataset>> {
    let (i, a) = (instance as u64, attempt as u64);
    let copies = match cfg.dataset_mode {
        DatasetMode::Shared => 1,
        DatasetMode::IndependentTriples => 3,
    };
    (0..copies)
        .map(|j| {
            let seed = derive_seed(cfg.seed, &[TAG_DATA, i, a, j]);
            sample_dataset(truth, fmap, &cfg.noise, cfg.n, seed)
        })
        .collect()
}

struct Timer(Option<Instant>);

impl Timer {
    fn start(enabled: bool) -> Self {
        Timer(enabled.then(Instant::now))
    }

    fn ms(&self) -> Option<f64> {
        self.0.map(|t| t.elapsed().as_secs_f64() * 1e3)
    }
}

struct SpectralOutcome {
    params: Result<MixParams>,
    admm_iterations: Option<[usize; 2]>,
    converged: bool,
    wall_ms: Option<f64>,
}

fn run_spectral(cfg: &ExperimentConfig, data: &[Dataset], power_seed: u64) -> SpectralOutcome {
    let timer = Timer::start(cfg.record_wall_time);
    let moment_data = match data {
        [d] => MomentData::Shared(d),
        [a, b, c] => MomentData::Independent([a, b, c]),
        _ => unreachable!("one or three datasets"),
    };
    let lambdas = cfg.lambdas.resolve(cfg.n);
    let est = match estimate_compound(moment_data, &cfg.noise, lambdas, cfg.bias, &cfg.solver) {
        Ok(est) => est,
        Err(e) => {
            return SpectralOutcome {
                params: Err(e),
                admm_iterations: None,
                converged: false,
                wall_ms: timer.ms(),
            }
        }
    };
    let power = PowerMethodConfig {
        seed: power_seed,
        ..cfg.power.clone()
    };
    let params = factorize(&est.m2, &est.m3, cfg.k, &power).map(|f| f.recovery.params);
    SpectralOutcome {
        converged: params.is_ok() && est.m2_solve.converged() && est.m3_solve.converged(),
        params,
        admm_iterations: Some([est.m2_solve.iterations, est.m3_solve.iterations]),
        wall_ms: timer.ms(),
    }
}

fn em_record(
    base: Record,
    truth: &MixParams,
    fit: Result<EMResult>,
    offset_ms: Option<f64>,
    timer: &Timer,
) -> Result<Record> {
    let wall_ms = timer.ms().map(|t| t + offset_ms.unwrap_or(0.0));
    Ok(match fit {
        Ok(res) => Record {
            aligned_error: Some(aligned_error(truth, &res.params)?),
            wall_ms,
            converged: res.converged,
            diagnostics: Diagnostics {
                em_iterations: Some(res.iterations),
                final_loglik: res.loglik_trace.last().copied(),
                ..base.diagnostics
            },
            ..base
        },
        Err(e) => failed(base, wall_ms, e),
    })
}

fn failed(base: Record, wall_ms: Option<f64>, e: Error) -> Record {
    Record {
        aligned_error: None,
        wall_ms,
        converged: false,
        diagnostics: Diagnostics {
            failure: Some(e.to_string()),
            ..base.diagnostics
        },
        ..base
    }
}

fn run_attempt(
    cfg: &ExperimentConfig,
    fmap: &FeatureMap,
    truth: &MixParams,
    instance: usize,
    attempt: usize,
) -> Result<Vec<Record>> {
    let data = attempt_data(cfg, fmap, truth, instance, attempt)?;
    let (i, a) = (instance as u64, attempt as u64);
    let em_cfg = cfg.em.config(&cfg.noise);
    let needs_spectral = cfg
        .methods
        .iter()
        .any(|m| matches!(m, Method::Spectral | Method::SpectralEm));
    let spectral = needs_spectral
        .then(|| run_spectral(cfg, &data, derive_seed(cfg.seed, &[TAG_POWER, i, a])));

    let random_init = init_random(cfg.k, cfg.d, derive_seed(cfg.seed, &[TAG_EM_INIT, i, a]))?;
    let mut out = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let base = Record {
            config_id: cfg.id.clone(),
            instance,
            attempt,
            method,
            aligned_error: None,
            wall_ms: None,
            converged: false,
            diagnostics: Diagnostics::default(),
        };
        let record = match method {
            Method::Spectral => {
                let s = spectral.as_ref().expect("spectral computed");
                let base = Record {
                    diagnostics: Diagnostics {
                        admm_iterations: s.admm_iterations,
                        ..Diagnostics::default()
                    },
                    ..base
                };
                match &s.params {
                    Ok(p) => Record {
                        aligned_error: Some(aligned_error(truth, p)?),
                        wall_ms: s.wall_ms,
                        converged: s.converged,
                        ..base
                    },
                    Err(e) => failed(base, s.wall_ms, clone_error(e)),
                }
            }
            Method::Em => {
                let timer = Timer::start(cfg.record_wall_time);
                let fit = em_fit(&data[0], cfg.k, &random_init, &em_cfg);
                em_record(base, truth, fit, None, &timer)?
            }
            Method::SpectralEm => {
                let s = spectral.as_ref().expect("spectral computed");
                let base = Record {
                    diagnostics: Diagnostics {
                        admm_iterations: s.admm_iterations,
                        fallback_init: s.params.is_err(),
                        ..Diagnostics::default()
                    },
                    ..base
                };
                let init = s.params.as_ref().unwrap_or(&random_init);
                let timer = Timer::start(cfg.record_wall_time);
                let fit = em_fit(&data[0], cfg.k, init, &em_cfg);
                em_record(base, truth, fit, s.wall_ms, &timer)?
            }
        };
        out.push(record);
    }
    Ok(out)
}

fn clone_error(e: &Error) -> Error {
    Error::Numeric(e.to_string())
}

/// Runs every configured method on every (instance, attempt) pair.
///
/// Fails before any fitting if the identifiability gate rejects the feature
/// map. Per-method numerical failures are recorded, not propagated.
pub fn run_config(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let preflight = identifiability_reports(cfg)?;
    check_gate(cfg.identifiability_gate, &preflight)?;
    let fmap = cfg.feature_map()?;
    let truths = (0..cfg.instances)
        .map(|i| instance_truth(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<(usize, usize)> = (0..cfg.instances)
        .flat_map(|i| (0..cfg.attempts).map(move |a| (i, a)))
        .collect();
    let pool = worker_pool()?;
    let per_task: Vec<Result<Vec<Record>>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, a)| run_attempt(cfg, &fmap, &truths[i], i, a))
            .collect()
    });
    let mut records = Vec::with_capacity(tasks.len() * cfg.methods.len());
    for r in per_task {
        records.extend(r?);
    }
    let aggregates = cfg.methods.iter().map(|&m| aggregate(m, &records)).collect();
    Ok(ExperimentReport {
        config: cfg.clone(),
        preflight,
        records,
        aggregates,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidArgument(format!("unknown format `{other}`"))),
        }
    }
}

/// JSON formatter printing every float with 17 significant digits.
struct Digits17;

impl serde_json::ser::Formatter for Digits17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{}", fmt17(value))
    }
}

pub fn to_json_writer<T: Serialize, W: Write>(value: &T, writer: W) -> Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(writer, Digits17);
    value.serialize(&mut ser)?;
    Ok(())
}

fn opt17(v: Option<f64>) -> String {
    v.map(fmt17).unwrap_or_default()
}

pub fn write_csv<W: Write>(report: &ExperimentReport, mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in &report.records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.config_id,
            r.instance,
            r.attempt,
            r.method,
            opt17(r.aligned_error),
            opt17(r.wall_ms),
            r.converged
        )?;
    }
    Ok(())
}

pub fn write_report<W: Write>(report: &ExperimentReport, format: ReportFormat, mut w: W) -> Result<()> {
    match format {
        ReportFormat::Csv => write_csv(report, &mut w)?,
        ReportFormat::Json => {
            to_json_writer(report, &mut w)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    write_report(report, format, BufWriter::new(file))
}

pub fn read_json_report(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Fixed-width bins over `[0, max error]` for one method; failed attempts
/// are not counted.
pub fn histogram_data(report: &ExperimentReport, method: Method, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be >= 1".into()));
    }
    let errs = report.errors(method);
    let max = errs.iter().copied().fold(0.0, f64::max);
    let width = max / bins as f64;
    let mut counts = vec![0usize; bins];
    for e in errs {
        let idx = if width > 0.0 {
            ((e / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(j, count)| HistogramBin {
            lo: j as f64 * width,
            hi: if j + 1 == bins { max } else { (j + 1) as f64 * width },
            count,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    #[serde(flatten)]
    pub stats: Aggregate,
}

/// Reruns the configuration at each sample size.
pub fn learning_curve(cfg: &ExperimentConfig, ns: &[usize]) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for &n in ns {
        let report = run_config(&ExperimentConfig { n, ..cfg.clone() })?;
        out.extend(report.aggregates.into_iter().map(|stats| CurvePoint { n, stats }));
    }
    Ok(out)
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], mut w: W) -> Result<()> {
    writeln!(w, "n,method,mean,std,median,count,failures")?;
    for p in points {
        let s = &p.stats;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            p.n,
            s.method,
            fmt17(s.mean),
            fmt17(s.std),
            fmt17(s.median),
            s.count,
            s.failures
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "id": "unit",
                "b": 1, "d": 4, "k": 2, "n": 2000,
                "feature_map": ["1", "t", "t^4", "t^7"],
                "noise": {"kind": "gaussian", "variance": 0.1},
                "methods": ["spectral", "em", "spectral_em"],
                "instances": 2, "attempts": 2,
                "identifiability_gate": "first_order",
                "em": {"max_iter": 50}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = small_config();
        assert_eq!(cfg.lambdas, LambdaSpec::PaperDefault);
        assert_eq!(cfg.dataset_mode, DatasetMode::Shared);
        assert_eq!(cfg.em.loglik_tol, 1e-9);
        assert_eq!(cfg.identifiability_samples, 10_000);
        assert!(!cfg.record_wall_time);
        for bad in [
            ExperimentConfig { d: 5, ..cfg.clone() },
            ExperimentConfig { instances: 0, ..cfg.clone() },
            ExperimentConfig { attempts: 0, ..cfg.clone() },
            ExperimentConfig { k: 5, ..cfg.clone() },
            ExperimentConfig { methods: vec![], ..cfg.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        let explicit: LambdaSpec = serde_json::from_str(r#"{"explicit": [0.1, 0.2]}"#).unwrap();
        assert_eq!(explicit.resolve(100), (0.1, 0.2));
        assert_eq!(LambdaSpec::PaperDefault.resolve(1), (1e-5, 1e-3));
    }

    #[test]
    fn methods_parse() {
        assert_eq!("spectral_em".parse::<Method>().unwrap(), Method::SpectralEm);
        assert!("gibbs".parse::<Method>().is_err());
        assert_eq!(
            serde_json::to_string(&Method::SpectralEm).unwrap(),
            "\"spectral_em\""
        );
    }

    #[test]
    fn strict_gate_rejects_collinear_quadratic_map() {
        let cfg = ExperimentConfig {
            d: 3,
            feature_map: vec!["1".into(), "t".into(), "t^2".into()],
            identifiability_gate: IdentifiabilityGate::Strict,
            ..small_config()
        };
        match run_config(&cfg) {
            Err(Error::PreFlight { order: 2, sigma_min, .. }) => assert!(sigma_min < 1e-6),
            other => panic!("expected pre-flight failure, got {other:?}"),
        }
    }

    #[test]
    fn first_order_gate_still_needs_p1() {
        let reports = vec![
            IdentifiabilityReport { order: 1, sigma_min: 0.0, threshold: 1e-8, pass: false },
            IdentifiabilityReport { order: 2, sigma_min: 1.0, threshold: 1e-8, pass: true },
        ];
        assert!(matches!(
            check_gate(IdentifiabilityGate::FirstOrder, &reports),
            Err(Error::PreFlight { order: 1, .. })
        ));
        let reports = vec![
            IdentifiabilityReport { order: 1, sigma_min: 1.0, threshold: 1e-8, pass: true },
            IdentifiabilityReport { order: 3, sigma_min: 0.0, threshold: 1e-8, pass: false },
        ];
        assert!(check_gate(IdentifiabilityGate::FirstOrder, &reports).is_ok());
        assert!(check_gate(IdentifiabilityGate::Strict, &reports).is_err());
    }

    #[test]
    fn run_produces_one_row_per_task_and_method() {
        let cfg = small_config();
        let report = run_config(&cfg).unwrap();
        assert_eq!(report.records.len(), cfg.instances * cfg.attempts * cfg.methods.len());
        for r in &report.records {
            if let Some(e) = r.aligned_error {
                assert!(e >= 0.0);
            } else {
                assert!(r.diagnostics.failure.is_some());
            }
            assert!(r.wall_ms.is_none());
        }
        let mut csv = Vec::new();
        write_csv(&report, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + report.records.len());
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(report.aggregates.len(), 3);
    }

    #[test]
    fn independent_triples_differ_from_shared() {
        let cfg = ExperimentConfig {
            methods: vec![Method::Spectral],
            instances: 1,
            attempts: 1,
            ..small_config()
        };
        let truth = instance_truth(&cfg, 0).unwrap();
        let fmap = cfg.feature_map().unwrap();
        let indep = ExperimentConfig {
            dataset_mode: DatasetMode::IndependentTriples,
            ..cfg.clone()
        };
        let data = attempt_data(&indep, &fmap, &truth, 0, 0).unwrap();
        assert_eq!(data.len(), 3);
        assert!(data.iter().all(|d| d.n() == cfg.n));
        assert_ne!(data[0].ys, data[1].ys);
        assert_ne!(data[1].ys, data[2].ys);
        let shared = attempt_data(&cfg, &fmap, &truth, 0, 0).unwrap();
        assert_eq!(shared.len(), 1);
        assert_eq!(shared[0].ys, data[0].ys);

        let a = run_config(&cfg).unwrap();
        let b = run_config(&indep).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        assert_ne!(a.records[0], b.records[0]);
    }

    #[test]
    fn em_only_runs_are_reproducible() {
        let cfg = ExperimentConfig {
            methods: vec![Method::Em],
            attempts: 1,
            ..small_config()
        };
        assert_eq!(run_config(&cfg).unwrap(), run_config(&cfg).unwrap());
    }

    #[test]
    fn wall_time_is_recorded_on_request() {
        let cfg = ExperimentConfig {
            methods: vec![Method::Em],
            instances: 1,
            attempts: 1,
            record_wall_time: true,
            ..small_config()
        };
        let report = run_config(&cfg).unwrap();
        assert!(report.records[0].wall_ms.unwrap() >= 0.0);
    }

    fn empty_report() -> ExperimentReport {
        ExperimentReport {
            config: small_config(),
            preflight: vec![],
            records: vec![],
            aggregates: vec![],
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let mut csv = Vec::new();
        write_csv(&empty_report(), &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let report = run_config(&ExperimentConfig {
            record_wall_time: true,
            ..small_config()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        emit_report(&report, ReportFormat::Json, &path).unwrap();
        let back = read_json_report(&path).unwrap();
        // NaN aggregates defeat PartialEq, so compare the re-serialized bytes
        let mut again = Vec::new();
        write_report(&back, ReportFormat::Json, &mut again).unwrap();
        assert_eq!(again, fs::read(&path).unwrap());
        assert_eq!(back.records, report.records);
        for (a, b) in back.records.iter().zip(&report.records) {
            assert_eq!(
                a.aligned_error.map(f64::to_bits),
                b.aligned_error.map(f64::to_bits)
            );
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"aggregates\""));
    }

    #[test]
    fn all_failed_aggregate_round_trips_as_nan() {
        let agg = aggregate(Method::Spectral, &[]);
        assert!(agg.mean.is_nan() && agg.median.is_nan());
        let mut buf = Vec::new();
        to_json_writer(&agg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"mean\":null"));
        let back: Aggregate = serde_json::from_str(&text).unwrap();
        assert!(back.mean.is_nan() && back.std.is_nan() && back.median.is_nan());
        assert_eq!(back.count, 0);
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("r.csv");
        assert!(matches!(
            emit_report(&empty_report(), ReportFormat::Csv, path),
            Err(Error::Io(_))
        ));
    }

    fn record(method: Method, err: Option<f64>) -> Record {
        Record {
            config_id: "h".into(),
            instance: 0,
            attempt: 0,
            method,
            aligned_error: err,
            wall_ms: None,
            converged: true,
            diagnostics: Diagnostics::default(),
        }
    }

    #[test]
    fn histogram_partitions_successes() {
        let mut report = empty_report();
        report.records = [0.0, 0.1, 0.5, 0.9, 1.0, 2.0]
            .iter()
            .map(|&e| record(Method::Em, Some(e)))
            .chain([record(Method::Em, None), record(Method::Spectral, Some(3.0))])
            .collect();
        let h = histogram_data(&report, Method::Em, 4).unwrap();
        assert_eq!(h.len(), 4);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 6);
        assert_eq!(h[0].lo, 0.0);
        assert_eq!(h[3].hi, 2.0);
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 2, 1, 1]);

        report.records = vec![record(Method::Em, Some(0.7))];
        let h = histogram_data(&report, Method::Em, 5).unwrap();
        assert_eq!(h.iter().filter(|b| b.count > 0).count(), 1);
        assert!(histogram_data(&report, Method::Em, 0).is_err());
    }

    #[test]
    fn aggregate_statistics() {
        let records: Vec<Record> = [1.0, 2.0, 6.0]
            .iter()
            .map(|&e| record(Method::Spectral, Some(e)))
            .chain([record(Method::Spectral, None)])
            .collect();
        let a = aggregate(Method::Spectral, &records);
        assert_eq!((a.mean, a.median, a.count, a.failures), (3.0, 2.0, 3, 1));
        assert!((a.std - 7f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn floats_are_written_with_17_digits() {
        let mut out = Vec::new();
        to_json_writer(&vec![0.1f64, -2.5], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "[1.0000000000000001e-1,-2.5000000000000000e0]"
        );
    }
}

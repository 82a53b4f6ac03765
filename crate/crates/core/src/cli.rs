//! Config-file driven batch runs.
//!
//! A run reads one TOML file, dispatches to an experiment and writes
//! `report.json`, one or more CSV files and `manifest.json` (config hash,
//! seed, library version, elapsed time, worker count) to the output
//! directory. Exit codes: 0 all verdicts pass, 1 a verdict failed, 2 parse
//! or schema error, 3 validation error, 4 simulation error, 5 I/O error.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ctmc::{ChainPath, QMatrix};
use crate::experiments::{
    averaging_experiment, chaos_experiment, ergodicity_experiment, fg14_experiment,
    oracle_mean_check, picard_experiment, AveragingConfig, ChaosConfig, ExperimentError,
    ExperimentReport, Fg14Config, Verdict,
};
use crate::model::{builtin_model, builtin_ou, validate_assumptions, Coefficients, ModelError};
use crate::noise::{derive_stream, PointLaw};
use crate::simulate::{chain_path_for, run_particle_system, PicardOptions, RunSpec, SimError};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "SWITCHING_MKV_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Simulate,
    Chaos,
    Average,
    Picard,
    Ergodicity,
    Fg14,
    Validate,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Chaos => "chaos",
            Subcommand::Average => "average",
            Subcommand::Picard => "picard",
            Subcommand::Ergodicity => "ergodicity",
            Subcommand::Fg14 => "fg14",
            Subcommand::Validate => "validate",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at `{key}`: {message}")]
    Schema { key: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Schema { .. } => 2,
            CliError::Validation(_) => 3,
            CliError::Simulation(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::InvalidConfig(_)
            | ExperimentError::InsufficientReplicates { .. }
            | ExperimentError::Model(_)
            | ExperimentError::Ctmc(_) => CliError::Validation(e.to_string()),
            ExperimentError::Sim(SimError::InvalidSpec(_))
            | ExperimentError::Sim(SimError::GNotStateFree)
            | ExperimentError::Sim(SimError::Model(_)) => CliError::Validation(e.to_string()),
            _ => CliError::Simulation(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        ExperimentError::Sim(e).into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    /// Row-major rates: either off-diagonal only (zero diagonal) or a full
    /// conservative generator.
    pub q: Vec<Vec<f64>>,
    #[serde(default)]
    pub initial_state: usize,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_step() -> f64 {
    1e-3
}
fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "one")]
    pub noise_resolution: usize,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            step: default_step(),
            noise_resolution: 1,
        }
    }
}

fn default_particles() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_time_scale")]
    pub time_scale: f64,
}

fn default_time_scale() -> f64 {
    1.0
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            particles: default_particles(),
            time_scale: 1.0,
        }
    }
}

fn default_probes() -> usize {
    1000
}
fn default_radius() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            probes: default_probes(),
            radius: default_radius(),
        }
    }
}

fn default_t_max() -> f64 {
    10.0
}
fn default_points() -> usize {
    101
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicitySection {
    /// Explicit time grid; when absent, `points` equally spaced times on
    /// `[0, t_max]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_points")]
    pub points: usize,
}

impl Default for ErgodicitySection {
    fn default() -> Self {
        Self {
            grid: None,
            t_max: default_t_max(),
            points: default_points(),
        }
    }
}

impl ErgodicitySection {
    pub fn times(&self) -> Vec<f64> {
        match &self.grid {
            Some(g) => g.clone(),
            None => {
                let n = self.points.max(2);
                (0..n)
                    .map(|k| self.t_max * k as f64 / (n - 1) as f64)
                    .collect()
            }
        }
    }
}

impl Default for ChaosConfig {
    fn default() -> Self {
        ChaosConfig::new(vec![50, 100, 200, 400, 800])
    }
}

impl Default for AveragingConfig {
    fn default() -> Self {
        AveragingConfig::new(vec![1.0, 0.1, 0.01, 0.001])
    }
}

impl Default for Fg14Config {
    fn default() -> Self {
        Fg14Config::new(
            PointLaw::standard_gaussian(1),
            vec![100, 200, 400, 800, 1600, 3200, 6400],
        )
    }
}


/// Everything a run needs. Sections other than `seed` are optional; the
/// ones a subcommand needs are checked by [`RunConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSection>,
    /// Initial law; defaults to the standard Gaussian in the model dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<PointLaw>,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub chaos: ChaosConfig,
    #[serde(default)]
    pub average: AveragingConfig,
    #[serde(default)]
    pub picard: PicardOptions,
    #[serde(default)]
    pub ergodicity: ErgodicitySection,
    #[serde(default)]
    pub fg14: Fg14Config,
    #[serde(default)]
    pub validate: ValidateSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("output")
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}

fn offending_key(message: &str) -> String {
    let mut parts = message.split('`');
    match (parts.next(), parts.next()) {
        (Some(_), Some(key)) => key.to_string(),
        _ => String::from("<root>"),
    }
}

/// Parses TOML text into a [`RunConfig`] with defaults filled in.
pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let table: toml::Table = toml::from_str(text).map_err(|e: toml::de::Error| {
        let (line, column) = e
            .span()
            .map(|s| line_column(text, s.start))
            .unwrap_or((0, 0));
        CliError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Schema {
            key: offending_key(e.message()),
            message: e.message().to_string(),
        })
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Canonical TOML text of a config (parsing it gives the config back).
pub fn write_config(config: &RunConfig) -> String {
    toml::to_string(config).expect("config is serializable")
}

/// SHA-256 of the canonical text, hex encoded. The output directory and
/// worker count are left out since they never change the numbers.
pub fn config_hash(config: &RunConfig) -> String {
    let mut c = config.clone();
    c.output_dir = default_output();
    c.workers = None;
    let digest = Sha256::digest(write_config(&c).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Validated, instantiated pieces of a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub q: Option<QMatrix>,
    pub model: Option<Arc<dyn Coefficients>>,
    pub spec: Option<RunSpec>,
}

impl RunConfig {
    /// Builds the generator, the model and the run spec, checking the
    /// sections `cmd` needs.
    pub fn validate(&self, cmd: Subcommand) -> Result<Prepared, CliError> {
        let needs_chain = !matches!(cmd, Subcommand::Fg14 | Subcommand::Validate);
        let needs_model = !matches!(cmd, Subcommand::Fg14 | Subcommand::Ergodicity);
        let q = match &self.chain {
            Some(c) => Some(QMatrix::build(&c.q).map_err(|e| CliError::Validation(e.to_string()))?),
            None if needs_chain => {
                return Err(CliError::Validation(format!("`{}` needs a [chain] section", cmd.name())))
            }
            None => None,
        };
        let model = match &self.model {
            Some(m) => Some(builtin_model(&m.name, &m.params).map_err(|e| match e {
                ModelError::InvalidParams { .. } | ModelError::UnknownModel(_) => CliError::Schema {
                    key: format!("model.{}", m.name),
                    message: e.to_string(),
                },
                other => CliError::Validation(other.to_string()),
            })?),
            None if needs_model => {
                return Err(CliError::Validation(format!("`{}` needs a [model] section", cmd.name())))
            }
            None => None,
        };
        if let (Some(q), Some(m), Some(c)) = (&q, &model, &self.chain) {
            if q.size() != m.states() {
                return Err(CliError::Validation(format!(
                    "chain has {} states but the model has {}",
                    q.size(),
                    m.states()
                )));
            }
            if c.initial_state >= q.size() {
                return Err(CliError::Validation(format!(
                    "initial state {} out of range",
                    c.initial_state
                )));
            }
        }
        let spec = match &model {
            Some(m) => {
                let law = self
                    .initial
                    .clone()
                    .unwrap_or_else(|| PointLaw::standard_gaussian(m.dim()));
                let spec = RunSpec {
                    horizon: self.time.horizon,
                    step: self.time.step,
                    initial_law: law,
                    noise_resolution: self.time.noise_resolution,
                };
                spec.validate(m.dim())
                    .map_err(|e| CliError::Validation(e.to_string()))?;
                Some(spec)
            }
            None => None,
        };
        Ok(Prepared { q, model, spec })
    }

    fn initial_state(&self) -> usize {
        self.chain.as_ref().map(|c| c.initial_state).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub elapsed_seconds: f64,
    pub workers: usize,
    /// Where the worker count came from: `config`, `env` or `default`.
    pub workers_source: String,
}

/// Result of a run: the report and the files written.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: ExperimentReport,
    pub files: Vec<PathBuf>,
    pub manifest: Manifest,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.passed() {
            0
        } else {
            1
        }
    }
}

fn worker_count(config: &RunConfig) -> (usize, &'static str) {
    if let Some(n) = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        return (n, "env");
    }
    match config.workers {
        Some(n) if n > 0 => (n, "config"),
        _ => (
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            "default",
        ),
    }
}

fn sim<T, E: Into<CliError>>(r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(Into::into)
}

fn base_report(name: &str, config: &RunConfig, columns: &[&str]) -> ExperimentReport {
    ExperimentReport {
        experiment: name.to_string(),
        config: serde_json::to_value(config).expect("serializable config"),
        columns: columns.iter().map(|c| c.to_string()).collect(),
        rows: Vec::new(),
        fits: Default::default(),
        raw: serde_json::Value::Null,
        metadata: Default::default(),
        verdicts: Vec::new(),
        elapsed_seconds: 0.0,
    }
}

fn write_report_csv(
    out: &Path,
    files: &mut Vec<PathBuf>,
    name: &str,
    report: &ExperimentReport,
) -> Result<(), CliError> {
    let path = out.join(name);
    report.write_csv(std::fs::File::create(&path)?)?;
    files.push(path);
    Ok(())
}

fn run_inner(
    cmd: Subcommand,
    config: &RunConfig,
    out: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<ExperimentReport, CliError> {
    let prepared = config.validate(cmd)?;
    let seed = config.seed;
    let init = config.initial_state();
    let ou = match &config.model {
        Some(m) => builtin_ou(&m.name, &m.params).map_err(|e| CliError::Validation(e.to_string()))?,
        None => None,
    };
    let report = match cmd {
        Subcommand::Simulate => {
            let (q, model, spec) = (
                prepared.q.expect("chain"),
                prepared.model.expect("model"),
                prepared.spec.expect("spec"),
            );
            let ens = sim(run_particle_system(
                model.as_ref(),
                &q,
                init,
                config.simulate.particles,
                &spec,
                seed,
                config.simulate.time_scale,
            ))?;
            let traj = out.join("trajectories.csv");
            ens.write_csv(std::fs::File::create(&traj)?)?;
            files.push(traj);
            let mut cols = vec!["t".to_string()];
            cols.extend((0..ens.dim).map(|k| format!("mean_{k}")));
            let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
            let mut report = base_report("simulate", config, &col_refs);
            for &j in &ens.grid.base_index {
                let mut row = vec![ens.grid.times[j]];
                row.extend(ens.mean_at(j));
                report.rows.push(row);
            }
            report.metadata.insert("chain_jumps".into(), ens.path.jump_count() as f64);
            if let Some(ou) = &ou {
                let (worst, ok) = oracle_mean_check(ou, &ens, &spec);
                report.metadata.insert("oracle_max_z".into(), worst);
                report.verdicts.push(Verdict::new(
                    "mean_oracle",
                    ok,
                    format!("largest |mean - oracle| / SE = {worst}"),
                ));
            }
            write_report_csv(out, files, "ensemble_mean.csv", &report)?;
            report
        }
        Subcommand::Chaos => {
            let r = sim(chaos_experiment(
                prepared.model.expect("model").as_ref(),
                &prepared.q.expect("chain"),
                init,
                &prepared.spec.expect("spec"),
                &config.chaos,
                seed,
            ))?;
            write_report_csv(out, files, "chaos.csv", &r)?;
            r
        }
        Subcommand::Average => {
            let r = sim(averaging_experiment(
                prepared.model.expect("model"),
                &prepared.q.expect("chain"),
                init,
                &prepared.spec.expect("spec"),
                &config.average,
                seed,
            ))?;
            write_report_csv(out, files, "average.csv", &r)?;
            r
        }
        Subcommand::Picard => {
            let spec = prepared.spec.expect("spec");
            let q = prepared.q.expect("chain");
            let path: Arc<ChainPath> = sim(chain_path_for(&q, init, spec.horizon, 1.0, seed))?;
            let r = sim(picard_experiment(
                prepared.model.expect("model").as_ref(),
                path,
                &spec,
                &config.picard,
                seed,
                ou.as_ref(),
            ))?;
            write_report_csv(out, files, "picard.csv", &r)?;
            r
        }
        Subcommand::Ergodicity => {
            let (r, _) = sim(ergodicity_experiment(
                &prepared.q.expect("chain"),
                &config.ergodicity.times(),
            ))?;
            write_report_csv(out, files, "ergodicity.csv", &r)?;
            r
        }
        Subcommand::Fg14 => {
            let r = sim(fg14_experiment(&config.fg14, seed))?;
            write_report_csv(out, files, "fg14.csv", &r)?;
            r
        }
        Subcommand::Validate => {
            let model = prepared.model.expect("model");
            let mut stream = derive_stream(seed, "validate", 0);
            let mut report = base_report("validate", config, &["k1", "k2", "probes"]);
            match validate_assumptions(
                model.as_ref(),
                config.validate.probes,
                config.validate.radius,
                &mut stream,
            ) {
                Ok(a) => {
                    report
                        .rows
                        .push(vec![a.k1, a.k2, a.probes as f64]);
                    report.verdicts.push(Verdict::new(
                        "envelope",
                        a.envelope_ok != Some(false),
                        match a.envelope_ok {
                            Some(_) => "declared envelope dominates |g|".into(),
                            None => "no envelope declared".into(),
                        },
                    ));
                    report.raw = serde_json::to_value(&a).expect("serializable");
                }
                Err(e @ ModelError::EnvelopeViolated { .. })
                | Err(e @ ModelError::GStateFreeViolated { .. }) => {
                    report.verdicts.push(Verdict::new("envelope", false, e.to_string()));
                }
                Err(e) => return Err(CliError::Validation(e.to_string())),
            }
            write_report_csv(out, files, "validate.csv", &report)?;
            report
        }
    };
    Ok(report)
}

/// Runs `cmd` with `config`, writing everything under `output`.
pub fn run(cmd: Subcommand, config: &RunConfig, output: &Path) -> Result<Outcome, CliError> {
    let started = Instant::now();
    std::fs::create_dir_all(output)?;
    let (workers, source) = worker_count(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Simulation(e.to_string()))?;
    let mut files = Vec::new();
    let report = pool.install(|| run_inner(cmd, config, output, &mut files))?;

    let report_path = output.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("serializable report"),
    )?;
    files.push(report_path);
    let manifest = Manifest {
        subcommand: cmd.name().to_string(),
        config_sha256: config_hash(config),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        workers,
        workers_source: source.to_string(),
    };
    let manifest_path = output.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("serializable manifest"),
    )?;
    files.push(manifest_path);
    Ok(Outcome {
        report,
        files,
        manifest,
    })
}

/// Command-line arguments of the `switching-mkv` binary.
#[derive(Debug, clap::Parser)]
#[command(name = "switching-mkv", version, about = "Regime-switching McKean-Vlasov experiments")]
pub struct Args {
    #[arg(value_enum)]
    pub subcommand: Subcommand,
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

/// Parses, runs and prints a summary; returns the process exit code.
pub fn execute(args: &Args) -> i32 {
    let mut config = match parse_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.output {
        config.output_dir = out.clone();
    }
    let output = config.output_dir.clone();
    match run(args.subcommand, &config, &output) {
        Ok(outcome) => {
            let r = &outcome.report;
            if !r.columns.is_empty() {
                println!("{}", r.columns.join(","));
                for row in &r.rows {
                    let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                    println!("{}", cells.join(","));
                }
            }
            for line in r.fit_lines() {
                println!("fit {line}");
            }
            for v in &r.verdicts {
                println!("[{}] {}: {}", if v.passed { "pass" } else { "FAIL" }, v.name, v.detail);
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

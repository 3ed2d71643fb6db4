//! Config-driven experiment runner.
//!
//! A run is split into tasks (usually one per bandwidth). Each task writes
//! its own CSV/JSON files; once every task is done the summary tables are
//! recomputed from those files and a manifest with SHA-256 hashes of every
//! output is written. Completed tasks are recorded in `checkpoint.json`, so
//! an interrupted run resumes where it stopped and ends with the same hashes.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analytics::{
    check_window, covariance_c, g_decay_check, saddle_data, saddle_invariants, semicircle,
    semicircle_broadened, well_profiles, window_grid, DEFAULT_ETA,
};
use crate::ensemble::{sample_h, EnsembleSpec};
use crate::error::{Error, Result};
use crate::grassmann::identity_suite;
use crate::io::{column, parse_f64, read_csv, sha256_file, write_csv, write_json};
use crate::kernel::{fit_log_points, fmt_f64, variance_kernel, DecayFit, KernelMatrix};
use crate::lattice::{build_torus, LatticeTorus};
use crate::quadrature::integrate_real;
use crate::rng::derive_seed;
use crate::spectral::{
    default_epsilon, derivative_check, dos_from_spectra, estimate_r, sample_spectra,
    TwoPointProfile,
};
use crate::stats::{linear_fit, normal_equivalent_z};
use crate::susy_dual::{
    gaussian_resolvent_oracle, mc_crosscheck, quadrature, DualForm, DualIntegrandSpec,
    QuadratureScheme, MAX_SITES, MIN_MC_SAMPLES,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// `<G+_0x>` for `x != 0` must be zero within this many standard errors.
pub const G_SIGMAS: f64 = 4.0;
/// Finite-difference and `Im sum R` derivatives must agree within this many combined errors.
pub const DERIVATIVE_SIGMAS: f64 = 1.0;
/// A deviation counts as decreased only when the drop exceeds this many combined errors.
pub const TREND_SIGMAS: f64 = 2.0;
pub const RATE_STABILITY: f64 = 2.0;
pub const AMPLITUDE_STABILITY: f64 = 4.0;
pub const MIN_FIT_RADII: usize = 4;
pub const NORM_TOLERANCE: f64 = 1e-4;
pub const MC_SIGMAS: f64 = 4.0;
pub const SADDLE_ALGEBRAIC_TOL: f64 = 1e-14;
pub const SADDLE_ANALYTIC_TOL: f64 = 1e-12;
pub const SADDLE_GRID: usize = 100;
const WELL_GRID: usize = 601;
const DEFAULT_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    DosSweep,
    RxDecay,
    SusyCheck,
    GrassmannCheck,
    KernelAudit,
    SaddleTable,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::DosSweep,
        Experiment::RxDecay,
        Experiment::SusyCheck,
        Experiment::GrassmannCheck,
        Experiment::KernelAudit,
        Experiment::SaddleTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::DosSweep => "dos-sweep",
            Experiment::RxDecay => "rx-decay",
            Experiment::SusyCheck => "susy-check",
            Experiment::GrassmannCheck => "grassmann-check",
            Experiment::KernelAudit => "kernel-audit",
            Experiment::SaddleTable => "saddle-table",
        }
    }

    fn needs_bandwidths(self) -> bool {
        !matches!(self, Experiment::GrassmannCheck | Experiment::SaddleTable)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| config_err("experiment", format!("unknown experiment `{s}`")))
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn default_dim() -> usize {
    3
}
fn default_side_factor() -> usize {
    2
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_window() -> [f64; 2] {
    [0.2, 1.8]
}
fn default_step() -> f64 {
    0.02
}
fn default_forms() -> Vec<DualForm> {
    vec![DualForm::Raw, DualForm::Shifted]
}
fn default_nodes() -> usize {
    QuadratureScheme::default().nodes
}
fn default_truncation() -> f64 {
    QuadratureScheme::default().truncation
}
fn default_tolerance() -> f64 {
    QuadratureScheme::default().tolerance
}
fn default_refinements() -> usize {
    QuadratureScheme::default().max_refinements
}

/// Flat run configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default = "default_dim")]
    pub d: usize,
    /// Explicit side lengths (one value for a cube, or `d` values). Empty: `side_factor * W`.
    #[serde(default)]
    pub sides: Vec<usize>,
    #[serde(default = "default_side_factor")]
    pub side_factor: usize,
    /// Require every side to be a multiple of `W`.
    #[serde(default)]
    pub multi_cube: bool,
    #[serde(default)]
    pub bandwidths: Vec<usize>,
    #[serde(default)]
    pub energies: Vec<f64>,
    #[serde(default)]
    pub e_min: Option<f64>,
    #[serde(default)]
    pub e_max: Option<f64>,
    #[serde(default)]
    pub e_count: Option<usize>,
    /// Empty: `max(20/|Lambda|, 0.01)`, plus its double for the DOS sweep.
    #[serde(default)]
    pub epsilons: Vec<f64>,
    /// One count for all bandwidths, or one per bandwidth.
    #[serde(default)]
    pub samples: Vec<usize>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// 0: available parallelism.
    #[serde(default)]
    pub workers: usize,

    #[serde(default = "default_window")]
    pub window: [f64; 2],
    #[serde(default)]
    pub export_samples: bool,

    #[serde(default)]
    pub max_radius: Option<f64>,
    #[serde(default)]
    pub derivative_energies: Vec<f64>,
    #[serde(default = "default_step")]
    pub derivative_step: f64,

    #[serde(default = "default_forms")]
    pub forms: Vec<DualForm>,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_refinements")]
    pub max_refinements: usize,
    #[serde(default)]
    pub mc_samples: usize,

    #[serde(default)]
    pub profile_energies: Vec<f64>,

    #[serde(default)]
    pub export_kernels: bool,
}

impl RunConfig {
    /// Defaults for everything except the experiment.
    pub fn new(experiment: Experiment) -> Self {
        Self::from_toml_str(&format!("experiment = \"{experiment}\"")).expect("minimal config parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("<document>")
                .to_string();
            Error::Config {
                field,
                reason: e.to_string().trim().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn geometry(&self, bandwidth: usize) -> Result<LatticeTorus> {
        let sides: Vec<usize> = match self.sides.len() {
            0 => vec![self.side_factor * bandwidth; self.d],
            1 => vec![self.sides[0]; self.d],
            _ => self.sides.clone(),
        };
        build_torus(self.d, &sides).map_err(|e| config_err("sides", e.to_string()))
    }

    /// `energies`, or the `e_min..=e_max` grid with `e_count` points.
    pub fn energy_grid(&self) -> Vec<f64> {
        if !self.energies.is_empty() {
            return self.energies.clone();
        }
        match (self.e_min, self.e_max, self.e_count) {
            (Some(a), Some(b), Some(n)) if n >= 2 => (0..n)
                .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
                .collect(),
            (Some(a), _, Some(1)) => vec![a],
            _ => Vec::new(),
        }
    }

    pub fn samples_for(&self, index: usize) -> usize {
        match self.samples.len() {
            0 => DEFAULT_SAMPLES,
            1 => self.samples[0],
            _ => self.samples[index],
        }
    }

    pub fn scheme(&self) -> QuadratureScheme {
        QuadratureScheme {
            nodes: self.nodes,
            truncation: self.truncation,
            tolerance: self.tolerance,
            max_refinements: self.max_refinements,
        }
    }

    /// Broadenings used at volume `n`.
    pub fn epsilons_for(&self, volume: usize) -> Vec<f64> {
        if !self.epsilons.is_empty() {
            return self.epsilons.clone();
        }
        let e = default_epsilon(volume);
        match self.experiment {
            Experiment::DosSweep => vec![e, 2.0 * e],
            _ => vec![e],
        }
    }

    /// Re-checks every module precondition. Returns warnings on success.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let exp = self.experiment;
        if !(1..=3).contains(&self.d) {
            return Err(config_err("d", format!("dimension must be 1, 2 or 3, got {}", self.d)));
        }
        if self.sides.len() > 1 && self.sides.len() != self.d {
            return Err(config_err(
                "sides",
                format!("{} sides given for d = {}", self.sides.len(), self.d),
            ));
        }
        if self.sides.is_empty() && self.side_factor == 0 {
            return Err(config_err("side_factor", "must be at least 1"));
        }
        if exp.needs_bandwidths() {
            if self.bandwidths.is_empty() {
                return Err(config_err("bandwidths", "at least one bandwidth is required"));
            }
            if self.bandwidths.contains(&0) {
                return Err(config_err("bandwidths", "bandwidths must be at least 1"));
            }
            let distinct: BTreeSet<_> = self.bandwidths.iter().collect();
            if distinct.len() != self.bandwidths.len() {
                return Err(config_err("bandwidths", "bandwidths must be distinct"));
            }
        }
        if self.samples.len() > 1 && self.samples.len() != self.bandwidths.len() {
            return Err(config_err(
                "samples",
                format!("{} counts for {} bandwidths", self.samples.len(), self.bandwidths.len()),
            ));
        }
        if matches!(exp, Experiment::DosSweep | Experiment::RxDecay)
            && self.samples.iter().any(|&s| s < 2)
        {
            return Err(config_err("samples", "need at least 2 samples for error bars"));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return Err(config_err("epsilons", format!("broadening must be positive, got {e}")));
        }
        let grid = self.energy_grid();
        if self.energies.is_empty() && (self.e_min.is_some() || self.e_count.is_some()) && grid.is_empty() {
            return Err(config_err("e_count", "e_min, e_max and e_count must be given together"));
        }
        if grid.iter().any(|e| !e.is_finite()) {
            return Err(config_err("energies", "energies must be finite"));
        }
        for &w in &self.bandwidths {
            let torus = self.geometry(w)?;
            for &side in torus.sides() {
                if side % w != 0 {
                    if self.multi_cube {
                        return Err(config_err(
                            "sides",
                            format!("side {side} is not a multiple of W = {w} (multi_cube is set)"),
                        ));
                    }
                    warnings.push(format!("side {side} is not a multiple of W = {w}"));
                }
            }
            if exp == Experiment::RxDecay {
                let half = torus.min_side() as f64 / 2.0;
                if let Some(r) = self.max_radius {
                    if r > half {
                        return Err(config_err(
                            "max_radius",
                            format!("{r} exceeds half the smallest side ({half}) for W = {w}"),
                        ));
                    }
                }
                let r_max = self.max_radius.unwrap_or(half);
                if r_max < 2.0 * w as f64 {
                    warnings.push(format!(
                        "W = {w}: fit window [W, {r_max}] is short; sides of at least 4W are advised"
                    ));
                }
            }
            if exp == Experiment::SusyCheck && torus.volume() > MAX_SITES {
                return Err(config_err(
                    "sides",
                    format!("dual quadrature supports at most {MAX_SITES} sites, got {}", torus.volume()),
                ));
            }
        }
        match exp {
            Experiment::DosSweep => {
                if grid.is_empty() {
                    return Err(config_err("energies", "an energy grid is required"));
                }
                let [a, b] = self.window;
                if !(a < b) {
                    return Err(config_err("window", format!("empty window [{a}, {b}]")));
                }
                for e in [a, b] {
                    check_window(e, DEFAULT_ETA).map_err(|err| config_err("window", err.to_string()))?;
                }
                let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if a < lo - 1e-9 || b > hi + 1e-9 {
                    return Err(config_err(
                        "window",
                        format!("[{a}, {b}] is not covered by the energy grid [{lo}, {hi}]"),
                    ));
                }
                if self.bandwidths.len() < 2 {
                    warnings.push("a single bandwidth gives no semicircle trend".into());
                }
            }
            Experiment::RxDecay => {
                if grid.is_empty() {
                    return Err(config_err("energies", "at least one energy is required"));
                }
                for &e in grid.iter().chain(&self.derivative_energies) {
                    check_window(e, DEFAULT_ETA).map_err(|err| config_err("energies", err.to_string()))?;
                }
                if !(self.derivative_step > 0.0) {
                    return Err(config_err("derivative_step", "must be positive"));
                }
                if self.epsilons.len() > 1 {
                    warnings.push("rx-decay uses only the first epsilon (and its half)".into());
                }
            }
            Experiment::SusyCheck => {
                if grid.is_empty() {
                    return Err(config_err("energies", "at least one energy is required"));
                }
                if self.epsilons.is_empty() {
                    return Err(config_err("epsilons", "susy-check needs explicit broadenings"));
                }
                if self.forms.is_empty() {
                    return Err(config_err("forms", "at least one form is required"));
                }
                self.scheme()
                    .validate()
                    .map_err(|e| config_err("nodes", e.to_string()))?;
                if self.mc_samples != 0 && self.mc_samples < MIN_MC_SAMPLES {
                    return Err(config_err(
                        "mc_samples",
                        format!("0 or at least {MIN_MC_SAMPLES}, got {}", self.mc_samples),
                    ));
                }
            }
            Experiment::KernelAudit => {
                for &e in &grid {
                    check_window(e, DEFAULT_ETA).map_err(|err| config_err("energies", err.to_string()))?;
                }
            }
            Experiment::SaddleTable => {
                for &e in &grid {
                    check_window(e, DEFAULT_ETA).map_err(|err| config_err("energies", err.to_string()))?;
                }
                if let Some(e) = self.profile_energies.iter().find(|e| !(e.abs() < 2.0)) {
                    return Err(config_err("profile_energies", format!("need |E| < 2, got {e}")));
                }
            }
            Experiment::GrassmannCheck => {}
        }
        Ok(warnings)
    }

    /// Hash of everything that affects output bytes.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = 0;
        let text = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub seed: u64,
    /// Half-open range of stream ids consumed.
    pub streams: [u64; 2],
    pub d: usize,
    pub sides: Vec<usize>,
    #[serde(rename = "W")]
    pub w: Option<usize>,
    pub sample_count: usize,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub tasks: Vec<TaskRecord>,
    /// Tasks restored from a checkpoint instead of recomputed.
    pub resumed_tasks: Vec<String>,
    pub summary_outputs: Vec<OutputRecord>,
    pub warnings: Vec<String>,
    pub assertions: Vec<Assertion>,
    pub passed: bool,
}

impl RunManifest {
    /// Every output (task files and summaries), sorted by path.
    pub fn all_outputs(&self) -> Vec<OutputRecord> {
        let mut v: Vec<OutputRecord> = self
            .tasks
            .iter()
            .flat_map(|t| t.outputs.iter().cloned())
            .chain(self.summary_outputs.iter().cloned())
            .collect();
        v.sort_by(|a, b| a.path.cmp(&b.path));
        v
    }

    pub fn failed_assertions(&self) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| !a.passed).collect()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    completed: Vec<TaskRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop (leaving the checkpoint) after this many newly computed tasks.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum RunOutcome {
    Finished(Box<RunManifest>),
    Interrupted { completed: usize, checkpoint: PathBuf },
}

#[derive(Debug, Clone)]
struct Task {
    id: String,
    seed: u64,
    bandwidth: Option<usize>,
    samples: usize,
}

fn plan(config: &RunConfig) -> Vec<Task> {
    match config.experiment {
        Experiment::GrassmannCheck => vec![Task {
            id: "grassmann".into(),
            seed: config.base_seed,
            bandwidth: None,
            samples: 0,
        }],
        Experiment::SaddleTable => vec![Task {
            id: "saddle".into(),
            seed: config.base_seed,
            bandwidth: None,
            samples: 0,
        }],
        exp => config
            .bandwidths
            .iter()
            .enumerate()
            .map(|(i, &w)| Task {
                id: format!("{exp}-W{w}"),
                seed: derive_seed(config.base_seed, w as u64),
                bandwidth: Some(w),
                samples: match exp {
                    Experiment::SusyCheck => config.mc_samples,
                    Experiment::KernelAudit => 0,
                    _ => config.samples_for(i),
                },
            })
            .collect(),
    }
}

fn rel(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn hash_outputs(dir: &Path, files: &[PathBuf]) -> Result<Vec<OutputRecord>> {
    let mut out: Vec<OutputRecord> = files
        .iter()
        .map(|p| {
            Ok(OutputRecord {
                path: rel(dir, p),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn outputs_intact(dir: &Path, record: &TaskRecord) -> bool {
    record
        .outputs
        .iter()
        .all(|o| sha256_file(&dir.join(&o.path)).map(|h| h == o.sha256).unwrap_or(false))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn run(config: &RunConfig) -> Result<RunManifest> {
    match run_with(config, RunOptions::default())? {
        RunOutcome::Finished(m) => Ok(*m),
        RunOutcome::Interrupted { .. } => unreachable!("no stop requested"),
    }
}

pub fn run_with(config: &RunConfig, opts: RunOptions) -> Result<RunOutcome> {
    let warnings = config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir)
        .map_err(|e| config_err("output_dir", format!("{}: {e}", dir.display())))?;
    let workers = if config.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        config.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| config_err("workers", e.to_string()))?;
    pool.install(|| run_inner(config, &dir, warnings, opts))
}

fn run_inner(config: &RunConfig, dir: &Path, warnings: Vec<String>, opts: RunOptions) -> Result<RunOutcome> {
    let started = unix_now();
    let hash = config.content_hash();
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut checkpoint: Checkpoint = match std::fs::read_to_string(&ckpt_path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => Checkpoint::default(),
    };
    if checkpoint.config_hash != hash {
        if !checkpoint.completed.is_empty() {
            log::warn!("ignoring checkpoint for a different config");
        }
        checkpoint = Checkpoint {
            config_hash: hash.clone(),
            completed: Vec::new(),
        };
    }

    let mut records = Vec::new();
    let mut resumed = Vec::new();
    let mut fresh = 0usize;
    for task in plan(config) {
        if let Some(done) = checkpoint.completed.iter().find(|r| r.id == task.id) {
            if outputs_intact(dir, done) {
                resumed.push(task.id.clone());
                records.push(done.clone());
                continue;
            }
        }
        if opts.stop_after.is_some_and(|n| fresh >= n) {
            return Ok(RunOutcome::Interrupted {
                completed: checkpoint.completed.len(),
                checkpoint: ckpt_path,
            });
        }
        let files = execute(config, &task, dir).map_err(|e| Error::Worker {
            task: task.id.clone(),
            seed: task.seed,
            stream: 0,
            reason: e.to_string(),
        })?;
        let (d, sides) = match task.bandwidth {
            Some(w) => {
                let t = config.geometry(w)?;
                (t.dim(), t.sides().to_vec())
            }
            None => (0, Vec::new()),
        };
        let record = TaskRecord {
            id: task.id.clone(),
            seed: task.seed,
            streams: [0, task.samples as u64],
            d,
            sides,
            w: task.bandwidth,
            sample_count: task.samples,
            outputs: hash_outputs(dir, &files)?,
        };
        checkpoint.completed.retain(|r| r.id != record.id);
        checkpoint.completed.push(record.clone());
        write_json(&ckpt_path, &checkpoint)?;
        records.push(record);
        fresh += 1;
    }

    let (summary_files, assertions) = summarize(config, dir)?;
    let passed = assertions.iter().all(|a| a.passed);
    let manifest = RunManifest {
        config: config.clone(),
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: unix_now(),
        tasks: records,
        resumed_tasks: resumed,
        summary_outputs: hash_outputs(dir, &summary_files)?,
        warnings,
        assertions,
        passed,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    let _ = std::fs::remove_file(&ckpt_path);
    Ok(RunOutcome::Finished(Box::new(manifest)))
}

fn execute(config: &RunConfig, task: &Task, dir: &Path) -> Result<Vec<PathBuf>> {
    match config.experiment {
        Experiment::DosSweep => dos_task(config, task, dir),
        Experiment::RxDecay => rx_task(config, task, dir),
        Experiment::SusyCheck => susy_task(config, task, dir),
        Experiment::GrassmannCheck => {
            let suite = identity_suite(task.seed)?;
            let path = dir.join("grassmann_check.json");
            write_json(&path, &suite)?;
            Ok(vec![path])
        }
        Experiment::KernelAudit => kernel_task(config, task, dir),
        Experiment::SaddleTable => saddle_task(config, dir),
    }
}

fn ensemble_for(config: &RunConfig, task: &Task) -> Result<(usize, EnsembleSpec)> {
    let w = task.bandwidth.expect("per-bandwidth task");
    let torus = config.geometry(w)?;
    let kernel = Arc::new(variance_kernel(&torus, w)?);
    Ok((w, EnsembleSpec::new(kernel, task.samples, task.seed)?))
}

fn dos_path(dir: &Path, w: usize, k: usize) -> PathBuf {
    dir.join(format!("dos_W{w}_eps{k}.csv"))
}

fn dos_task(config: &RunConfig, task: &Task, dir: &Path) -> Result<Vec<PathBuf>> {
    let (w, spec) = ensemble_for(config, task)?;
    let eps = config.epsilons_for(spec.dim());
    let spectra = sample_spectra(&spec)?;
    let results = dos_from_spectra(&spectra, &config.energy_grid(), &eps)?;
    let mut files = Vec::new();
    for (k, r) in results.iter().enumerate() {
        let p = dos_path(dir, w, k);
        r.write_csv(&p)?;
        files.push(p);
    }
    if config.export_samples {
        for s in 0..spec.sample_count() as u64 {
            let h = sample_h(&spec, s)?;
            let n = h.dim();
            let p = dir.join(format!("samples_W{w}")).join(format!("stream_{s}.csv"));
            let rows = (0..n).flat_map(|i| {
                let h = &h;
                (0..n).map(move |j| {
                    let v = h.entry(i, j);
                    vec![i.to_string(), j.to_string(), fmt_f64(v.re), fmt_f64(v.im)]
                })
            });
            write_csv(&p, &["i", "j", "re", "im"], rows)?;
            files.push(p);
        }
    }
    Ok(files)
}

fn rx_paths(dir: &Path, w: usize, k: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("rx_W{w}_E{k}_eps.csv")),
        dir.join(format!("rx_W{w}_E{k}_half_eps.csv")),
        dir.join(format!("g_W{w}_E{k}.csv")),
    ]
}

fn write_g_csv(path: &Path, profiles: [&TwoPointProfile; 2]) -> Result<()> {
    let rows = profiles.iter().flat_map(|p| {
        p.shells.iter().map(move |s| {
            vec![
                fmt_f64(p.epsilon),
                fmt_f64(s.radius),
                fmt_f64(s.g.re.mean),
                fmt_f64(s.g.im.mean),
                fmt_f64(s.g.re.stderr),
                fmt_f64(s.g.im.stderr),
                s.count.to_string(),
                p.sample_count.to_string(),
            ]
        })
    });
    write_csv(
        path,
        &["epsilon", "radius", "reG_mean", "imG_mean", "reG_stderr", "imG_stderr", "count", "samples"],
        rows,
    )
}

fn rx_task(config: &RunConfig, task: &Task, dir: &Path) -> Result<Vec<PathBuf>> {
    let (w, spec) = ensemble_for(config, task)?;
    let eps = config.epsilons_for(spec.dim())[0];
    let r_max = config
        .max_radius
        .unwrap_or(spec.torus().min_side() as f64 / 2.0);
    let mut files = Vec::new();
    for (k, &e) in config.energy_grid().iter().enumerate() {
        let report = estimate_r(&spec, e, eps, r_max)?;
        let [p_eps, p_half, p_g] = rx_paths(dir, w, k);
        report.at_eps.write_csv(&p_eps)?;
        report.at_half_eps.write_csv(&p_half)?;
        write_g_csv(&p_g, [&report.at_eps, &report.at_half_eps])?;
        files.extend([p_eps, p_half, p_g]);
    }
    if !config.derivative_energies.is_empty() {
        let pts = derivative_check(&spec, &config.derivative_energies, eps, config.derivative_step)?;
        let p = dir.join(format!("derivative_W{w}.csv"));
        let rows = pts.iter().map(|d| {
            vec![
                fmt_f64(d.energy),
                fmt_f64(d.finite_difference.mean),
                fmt_f64(d.finite_difference.stderr),
                fmt_f64(d.from_r.mean),
                fmt_f64(d.from_r.stderr),
                fmt_f64(d.z_score()),
                fmt_f64(eps),
                fmt_f64(config.derivative_step),
                spec.sample_count().to_string(),
            ]
        });
        write_csv(
            &p,
            &["E", "fd_mean", "fd_stderr", "fromR_mean", "fromR_stderr", "z", "epsilon", "step", "samples"],
            rows,
        )?;
        files.push(p);
    }
    Ok(files)
}

/// One line of the SUSY cross-check report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusyRecord {
    #[serde(rename = "W")]
    pub w: usize,
    pub sides: Vec<usize>,
    #[serde(rename = "E")]
    pub energy: f64,
    pub epsilon: f64,
    pub form: DualForm,
    pub value_re: f64,
    pub value_im: f64,
    pub norm_check: f64,
    pub norm_check_im: f64,
    pub error_estimate: f64,
    pub nodes_used: usize,
    pub oracle_re: Option<f64>,
    pub oracle_im: Option<f64>,
    pub mc_re: Option<f64>,
    pub mc_im: Option<f64>,
    pub mc_stderr_re: Option<f64>,
    pub mc_stderr_im: Option<f64>,
    pub mc_z: Option<f64>,
    pub mc_samples: usize,
}

fn susy_task(config: &RunConfig, task: &Task, dir: &Path) -> Result<Vec<PathBuf>> {
    let w = task.bandwidth.expect("per-bandwidth task");
    let torus = config.geometry(w)?;
    let kernel = Arc::new(variance_kernel(&torus, w)?);
    let scheme = config.scheme();
    let mut records = Vec::new();
    let mut point = 0u64;
    for &e in &config.energy_grid() {
        for &eps in &config.epsilons {
            let oracle = if torus.volume() == 1 {
                Some(gaussian_resolvent_oracle(e, eps, kernel.real_entry(0, 0))?)
            } else {
                None
            };
            for (f, &form) in config.forms.iter().enumerate() {
                let spec = DualIntegrandSpec::new(kernel.clone(), e, eps, form)?;
                // Monte Carlo once per (E, eps), attached to the first form
                let (q, mc) = if config.mc_samples > 0 && f == 0 {
                    let ens = EnsembleSpec::new(
                        kernel.clone(),
                        config.mc_samples,
                        derive_seed(task.seed, point),
                    )?;
                    let c = mc_crosscheck(&spec, &scheme, &ens)?;
                    (c.quadrature, Some(c))
                } else {
                    (quadrature(&spec, &scheme)?, None)
                };
                records.push(SusyRecord {
                    w,
                    sides: torus.sides().to_vec(),
                    energy: e,
                    epsilon: eps,
                    form,
                    value_re: q.value.re,
                    value_im: q.value.im,
                    norm_check: q.norm_check.re,
                    norm_check_im: q.norm_check.im,
                    error_estimate: q.error_estimate,
                    nodes_used: q.nodes_used,
                    oracle_re: oracle.map(|o| o.re),
                    oracle_im: oracle.map(|o| o.im),
                    mc_re: mc.map(|c| c.monte_carlo.re.mean),
                    mc_im: mc.map(|c| c.monte_carlo.im.mean),
                    mc_stderr_re: mc.map(|c| c.monte_carlo.re.stderr),
                    mc_stderr_im: mc.map(|c| c.monte_carlo.im.stderr),
                    mc_z: mc.map(|c| c.z),
                    mc_samples: if mc.is_some() { config.mc_samples } else { 0 },
                });
            }
            point += 1;
        }
    }
    let p = dir.join(format!("susy_W{w}.json"));
    write_json(&p, &records)?;
    Ok(vec![p])
}

/// Kernel checks at one bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelAuditRow {
    #[serde(rename = "W")]
    pub w: usize,
    pub kind: String,
    #[serde(rename = "E")]
    pub energy: Option<f64>,
    pub mass: f64,
    pub inverse_residual: f64,
    pub row_sum_deviation: f64,
    pub asymmetry: f64,
    pub min_entry: f64,
    pub decay_rate: Option<f64>,
    pub g_decay_passes: Option<bool>,
}

fn audit_row(k: &KernelMatrix, kind: &str, energy: Option<f64>, mass: f64) -> KernelAuditRow {
    let n = k.dim();
    let min_entry = (0..n).map(|j| k.real_entry(0, j)).fold(f64::INFINITY, f64::min);
    KernelAuditRow {
        w: k.bandwidth(),
        kind: kind.to_string(),
        energy,
        mass,
        inverse_residual: k.inverse_residual(),
        row_sum_deviation: k.max_row_sum_deviation(1.0 / mass),
        asymmetry: k.max_asymmetry(),
        min_entry,
        decay_rate: k.decay_profile().ok().map(|(_, f)| f.rate),
        g_decay_passes: None,
    }
}

fn kernel_task(config: &RunConfig, task: &Task, dir: &Path) -> Result<Vec<PathBuf>> {
    let w = task.bandwidth.expect("per-bandwidth task");
    let torus = config.geometry(w)?;
    let j = variance_kernel(&torus, w)?;
    let mut rows = vec![audit_row(&j, "J", None, 1.0)];
    let mut files = Vec::new();
    for &e in &config.energy_grid() {
        let s = saddle_data(e, DEFAULT_ETA)?;
        let c = covariance_c(&torus, w, &s)?;
        let mut row = audit_row(&c, "C", Some(e), s.m_r2);
        if torus.min_side() >= 4 * w {
            row.g_decay_passes = Some(g_decay_check(e, w, &torus)?.passes());
        }
        rows.push(row);
    }
    let profile = j.radial_profile();
    let p = dir.join(format!("kernel_profile_W{w}.csv"));
    write_csv(
        &p,
        &["radius", "max_abs", "count"],
        profile
            .points
            .iter()
            .map(|pt| vec![fmt_f64(pt.radius), fmt_f64(pt.max_abs), pt.count.to_string()]),
    )?;
    files.push(p);
    if config.export_kernels {
        let csv = dir.join(format!("kernel_J_W{w}.csv"));
        let side = dir.join(format!("kernel_J_W{w}.json"));
        j.export(&csv, &side)?;
        files.extend([csv, side]);
    }
    let p = dir.join(format!("kernel_W{w}.json"));
    write_json(&p, &rows)?;
    files.push(p);
    Ok(files)
}

fn saddle_task(config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let grid = match config.energy_grid() {
        g if g.is_empty() => window_grid(SADDLE_GRID, DEFAULT_ETA),
        g => g,
    };
    let rows: Vec<Vec<String>> = grid
        .iter()
        .map(|&e| {
            let s = saddle_data(e, DEFAULT_ETA)?;
            let inv = saddle_invariants(&s);
            Ok(vec![
                fmt_f64(e),
                fmt_f64(s.cal_e.re),
                fmt_f64(s.cal_e.im),
                fmt_f64(s.rho_sc),
                fmt_f64(s.m_r2),
                fmt_f64(s.m_i2),
                fmt_f64(inv.unit_modulus),
                fmt_f64(inv.conjugate),
                fmt_f64(inv.f1_stationary),
                fmt_f64(inv.f2_stationary),
                fmt_f64(inv.f1_curvature),
                fmt_f64(inv.f2_curvature),
                fmt_f64(inv.well_zero),
                fmt_f64(inv.well_second),
            ])
        })
        .collect::<Result<_>>()?;
    let p = dir.join("saddle_table.csv");
    write_csv(
        &p,
        &[
            "E", "calE_re", "calE_im", "rho_sc", "m_r2", "m_i2", "unit_modulus", "conjugate",
            "f1_stationary", "f2_stationary", "f1_curvature", "f2_curvature", "well_zero",
            "well_second",
        ],
        rows,
    )?;
    let mut files = vec![p];
    let z: Vec<f64> = (0..WELL_GRID)
        .map(|k| -3.0 + 6.0 * k as f64 / (WELL_GRID - 1) as f64)
        .collect();
    for (k, &e) in config.profile_energies.iter().enumerate() {
        let p = dir.join(format!("wells_E{k}.csv"));
        well_profiles(e, &z, &z)?.write_csv(&p)?;
        files.push(p);
    }
    Ok(files)
}

/// Per-bandwidth sup deviation from the semicircle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    #[serde(rename = "W")]
    pub w: usize,
    pub epsilon: f64,
    pub sup_deviation: f64,
    pub stderr: f64,
    /// Energy of the sup.
    pub at_energy: f64,
    /// Same statistic against the semicircle convolved with the broadening Lorentzian.
    pub sup_deviation_broadened: f64,
    pub stderr_broadened: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationTable {
    pub window: [f64; 2],
    pub rows: Vec<DeviationRow>,
    /// Each step in W lowers the deviation by more than [`TREND_SIGMAS`] combined errors.
    pub monotone: bool,
    /// Slope of `ln dev` against `ln W`; `None` when a deviation is zero.
    pub slope: Option<f64>,
    pub slope_broadened: Option<f64>,
}

impl DeviationTable {
    pub fn slope_ok(&self) -> bool {
        self.slope.is_some_and(|s| s <= -1.0)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.rows.iter().map(|r| {
            vec![
                r.w.to_string(),
                fmt_f64(r.epsilon),
                fmt_f64(r.sup_deviation),
                fmt_f64(r.stderr),
                fmt_f64(r.at_energy),
                fmt_f64(r.sup_deviation_broadened),
                fmt_f64(r.stderr_broadened),
            ]
        });
        write_csv(
            path,
            &["W", "epsilon", "sup_deviation", "stderr", "at_E", "sup_deviation_broadened", "stderr_broadened"],
            rows,
        )
    }
}

fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let (header, rows) = read_csv(path)?;
    let idx: Vec<usize> = names.iter().map(|n| column(&header, n)).collect::<Result<_>>()?;
    idx.iter()
        .map(|&i| {
            rows.iter()
                .map(|r| {
                    r.get(i)
                        .ok_or_else(|| Error::InsufficientData(format!("short row in {}", path.display())))
                        .and_then(|s| parse_f64(s))
                })
                .collect()
        })
        .collect()
}

fn log_slope(points: &[(usize, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|p| !(p.1 > 0.0)) {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    Some(linear_fit(&xs, &ys).slope)
}

/// Sup over the window of `|rho_hat - rho_SC|` for each DOS file.
pub fn semicircle_deviation(files: &[(usize, PathBuf)], window: [f64; 2]) -> Result<DeviationTable> {
    let distinct: BTreeSet<usize> = files.iter().map(|f| f.0).collect();
    if distinct.len() < 2 {
        return Err(Error::InsufficientData("need at least two distinct bandwidths".into()));
    }
    let [a, b] = window;
    if !(a < b) {
        return Err(Error::EnergyWindow {
            energy: a,
            reason: format!("empty window [{a}, {b}]"),
        });
    }
    check_window(a, DEFAULT_ETA)?;
    check_window(b, DEFAULT_ETA)?;
    let mut rows = Vec::new();
    for (w, path) in files {
        let cols = read_columns(path, &["E", "dos_mean", "dos_stderr", "epsilon"])?;
        let (e, mean, se, eps) = (&cols[0], &cols[1], &cols[2], &cols[3]);
        let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if a < lo - 1e-9 || b > hi + 1e-9 {
            return Err(Error::EnergyWindow {
                energy: if a < lo { a } else { b },
                reason: format!("window [{a}, {b}] outside the data range [{lo}, {hi}] of {}", path.display()),
            });
        }
        let inside: Vec<usize> = (0..e.len()).filter(|&k| e[k] >= a - 1e-12 && e[k] <= b + 1e-12).collect();
        if inside.is_empty() {
            return Err(Error::InsufficientData(format!("no grid points in the window in {}", path.display())));
        }
        let epsilon = eps[inside[0]];
        let sup = |reference: &dyn Fn(f64) -> f64| {
            inside
                .iter()
                .map(|&k| ((mean[k] - reference(e[k])).abs(), se[k], e[k]))
                .fold((f64::NEG_INFINITY, 0.0, 0.0), |best, x| if x.0 > best.0 { x } else { best })
        };
        let plain = sup(&semicircle);
        let broad = sup(&|x| semicircle_broadened(x, epsilon));
        rows.push(DeviationRow {
            w: *w,
            epsilon,
            sup_deviation: plain.0,
            stderr: plain.1,
            at_energy: plain.2,
            sup_deviation_broadened: broad.0,
            stderr_broadened: broad.1,
        });
    }
    rows.sort_by_key(|r| r.w);
    let monotone = rows.windows(2).all(|p| {
        p[0].sup_deviation - p[1].sup_deviation > TREND_SIGMAS * p[0].stderr.hypot(p[1].stderr)
    });
    let slope = log_slope(&rows.iter().map(|r| (r.w, r.sup_deviation)).collect::<Vec<_>>());
    let slope_broadened =
        log_slope(&rows.iter().map(|r| (r.w, r.sup_deviation_broadened)).collect::<Vec<_>>());
    Ok(DeviationTable {
        window,
        rows,
        monotone,
        slope,
        slope_broadened,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    #[serde(rename = "W")]
    pub w: usize,
    pub rate: f64,
    /// `rate * W`.
    pub c: f64,
    pub amplitude: f64,
    /// `amplitude * W^3`.
    #[serde(rename = "K")]
    pub k: f64,
    pub residual_rms: f64,
    pub radii: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    pub rows: Vec<DecayRow>,
    pub rates_positive: bool,
    /// `max c / min c`.
    pub rate_ratio: f64,
    /// `max K / min K`.
    pub amplitude_ratio: f64,
}

impl DecayTable {
    pub fn rate_stable(&self) -> bool {
        self.rate_ratio <= RATE_STABILITY
    }

    pub fn amplitude_consistent(&self) -> bool {
        self.amplitude_ratio <= AMPLITUDE_STABILITY
    }
}

fn ratio(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let hi = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.fold(f64::INFINITY, f64::min);
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Exponential fits of `|R|` on `[W, max radius]` for each R-profile file.
pub fn decay_report(profiles: &[(usize, PathBuf)]) -> Result<DecayTable> {
    let distinct: BTreeSet<usize> = profiles.iter().map(|f| f.0).collect();
    if distinct.len() < 2 {
        return Err(Error::InsufficientData("need at least two distinct bandwidths".into()));
    }
    let mut rows = Vec::new();
    for (w, path) in profiles {
        let cols = read_columns(path, &["radius", "reR_mean", "imR_mean"])?;
        let wf = *w as f64;
        let pts: Vec<(f64, f64)> = (0..cols[0].len())
            .filter(|&k| cols[0][k] >= wf - 1e-12)
            .map(|k| (cols[0][k], Complex64::new(cols[1][k], cols[2][k]).norm().ln()))
            .filter(|p| p.1.is_finite())
            .collect();
        if pts.len() < MIN_FIT_RADII {
            return Err(Error::InsufficientData(format!(
                "W = {w}: {} radii at or beyond W in {}, need {MIN_FIT_RADII}",
                pts.len(),
                path.display()
            )));
        }
        let fit: DecayFit = fit_log_points(&pts)?;
        rows.push(DecayRow {
            w: *w,
            rate: fit.rate,
            c: fit.rate * wf,
            amplitude: fit.amplitude,
            k: fit.amplitude * wf.powi(3),
            residual_rms: fit.residual_rms,
            radii: fit.radii_used,
        });
    }
    rows.sort_by_key(|r| r.w);
    Ok(DecayTable {
        rates_positive: rows.iter().all(|r| r.rate > 0.0),
        rate_ratio: ratio(rows.iter().map(|r| r.c)),
        amplitude_ratio: ratio(rows.iter().map(|r| r.k)),
        rows,
    })
}

/// Largest normal-equivalent `|<G+_0x>| / stderr` over shells with `x != 0`.
pub fn g_consistency(path: &Path) -> Result<f64> {
    let cols = read_columns(
        path,
        &["radius", "reG_mean", "imG_mean", "reG_stderr", "imG_stderr", "samples"],
    )?;
    let mut worst: f64 = 0.0;
    for k in 0..cols[0].len() {
        if cols[0][k] <= 0.0 {
            continue;
        }
        let dof = (cols[5][k] as usize).saturating_sub(1);
        for (m, s) in [(cols[1][k], cols[3][k]), (cols[2][k], cols[4][k])] {
            let z = if s > 0.0 {
                normal_equivalent_z(m / s, dof)
            } else if m == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
    }
    Ok(worst)
}

fn summarize(config: &RunConfig, dir: &Path) -> Result<(Vec<PathBuf>, Vec<Assertion>)> {
    let mut files = Vec::new();
    let mut checks = Vec::new();
    match config.experiment {
        Experiment::DosSweep => {
            let primary: Vec<(usize, PathBuf)> =
                config.bandwidths.iter().map(|&w| (w, dos_path(dir, w, 0))).collect();
            let mut shifts = Vec::new();
            for &w in &config.bandwidths {
                let second = dos_path(dir, w, 1);
                if second.exists() {
                    let a = read_columns(&dos_path(dir, w, 0), &["E", "dos_mean", "epsilon"])?;
                    let b = read_columns(&second, &["dos_mean", "epsilon"])?;
                    let shift = (0..a[0].len())
                        .filter(|&k| a[0][k].abs() <= 1.0)
                        .map(|k| ((b[0][k] - a[1][k]) / a[1][k]).abs())
                        .fold(0.0, f64::max);
                    shifts.push(json!({"W": w, "epsilon": a[2][0], "epsilon_alt": b[1][0], "bulk_relative_shift": shift}));
                }
            }
            if config.bandwidths.len() >= 2 {
                let table = semicircle_deviation(&primary, config.window)?;
                let p = dir.join("semicircle_summary.csv");
                table.write_csv(&p)?;
                files.push(p);
                checks.push(Assertion::new(
                    "semicircle deviation decreases with W",
                    table.monotone,
                    format!(
                        "sup deviations {:?}, each drop must exceed {TREND_SIGMAS} combined errors",
                        table.rows.iter().map(|r| r.sup_deviation).collect::<Vec<_>>()
                    ),
                ));
                checks.push(Assertion::new(
                    "semicircle log-log slope <= -1",
                    table.slope_ok(),
                    format!("slope {:?}", table.slope),
                ));
                let p = dir.join("semicircle_fit.json");
                write_json(&p, &json!({"table": table, "epsilon_doubling": shifts}))?;
                files.push(p);
            }
        }
        Experiment::RxDecay => {
            let energies = config.energy_grid();
            let mut tables = Vec::new();
            let mut summary_rows = Vec::new();
            for (k, &e) in energies.iter().enumerate() {
                for &w in &config.bandwidths {
                    let [_, _, g] = rx_paths(dir, w, k);
                    let z = g_consistency(&g)?;
                    checks.push(Assertion::new(
                        format!("<G+_0x> = 0 for x != 0 (W={w}, E={e})"),
                        z <= G_SIGMAS,
                        format!("max normal-equivalent z {z:.3}"),
                    ));
                }
                if config.bandwidths.len() < 2 {
                    continue;
                }
                for (label, which) in [("eps", 0usize), ("half_eps", 1)] {
                    let files_k: Vec<(usize, PathBuf)> = config
                        .bandwidths
                        .iter()
                        .map(|&w| (w, rx_paths(dir, w, k)[which].clone()))
                        .collect();
                    let table = decay_report(&files_k)?;
                    for r in &table.rows {
                        summary_rows.push(vec![
                            fmt_f64(e),
                            label.to_string(),
                            r.w.to_string(),
                            fmt_f64(r.rate),
                            fmt_f64(r.c),
                            fmt_f64(r.amplitude),
                            fmt_f64(r.k),
                            fmt_f64(r.residual_rms),
                            r.radii.to_string(),
                        ]);
                    }
                    if which == 0 {
                        checks.push(Assertion::new(
                            format!("decay rates positive (E={e})"),
                            table.rates_positive,
                            format!("rates {:?}", table.rows.iter().map(|r| r.rate).collect::<Vec<_>>()),
                        ));
                        checks.push(Assertion::new(
                            format!("rate*W stable within {RATE_STABILITY} (E={e})"),
                            table.rate_stable(),
                            format!("c {:?}, ratio {:.3}", table.rows.iter().map(|r| r.c).collect::<Vec<_>>(), table.rate_ratio),
                        ));
                        checks.push(Assertion::new(
                            format!("amplitude ~ W^-3 within {AMPLITUDE_STABILITY} (E={e})"),
                            table.amplitude_consistent(),
                            format!("K {:?}, ratio {:.3}", table.rows.iter().map(|r| r.k).collect::<Vec<_>>(), table.amplitude_ratio),
                        ));
                    }
                    tables.push(json!({"E": e, "broadening": label, "table": table}));
                }
            }
            if !summary_rows.is_empty() {
                let p = dir.join("decay_summary.csv");
                write_csv(
                    &p,
                    &["E", "broadening", "W", "rate", "c", "amplitude", "K", "residual_rms", "radii"],
                    summary_rows,
                )?;
                files.push(p);
                let p = dir.join("decay_report.json");
                write_json(&p, &tables)?;
                files.push(p);
            }
            if !config.derivative_energies.is_empty() {
                for &w in &config.bandwidths {
                    let cols = read_columns(&dir.join(format!("derivative_W{w}.csv")), &["E", "z"])?;
                    for (e, z) in cols[0].iter().zip(&cols[1]) {
                        checks.push(Assertion::new(
                            format!("derivative identity (W={w}, E={e})"),
                            *z <= DERIVATIVE_SIGMAS,
                            format!("z {z:.3}"),
                        ));
                    }
                }
            }
        }
        Experiment::SusyCheck => {
            let mut all: Vec<SusyRecord> = Vec::new();
            for &w in &config.bandwidths {
                let text = std::fs::read_to_string(dir.join(format!("susy_W{w}.json")))?;
                all.extend(serde_json::from_str::<Vec<SusyRecord>>(&text)?);
            }
            for r in &all {
                let tag = format!("W={}, E={}, eps={}, {:?}", r.w, r.energy, r.epsilon, r.form);
                let dev = Complex64::new(r.norm_check - 1.0, r.norm_check_im).norm();
                checks.push(Assertion::new(
                    format!("normalisation ({tag})"),
                    dev <= NORM_TOLERANCE,
                    format!("|I_norm - 1| = {dev:.3e}"),
                ));
                if let (Some(re), Some(im)) = (r.oracle_re, r.oracle_im) {
                    let d = Complex64::new(r.value_re - re, r.value_im - im).norm();
                    checks.push(Assertion::new(
                        format!("Gaussian oracle ({tag})"),
                        d <= config.tolerance,
                        format!("|quadrature - oracle| = {d:.3e}"),
                    ));
                }
                if let Some(z) = r.mc_z {
                    checks.push(Assertion::new(
                        format!("Monte Carlo ({tag})"),
                        z <= MC_SIGMAS,
                        format!("z = {z:.3}"),
                    ));
                }
            }
            let mut agreement = Vec::new();
            for a in &all {
                for b in &all {
                    if a.w == b.w && a.energy == b.energy && a.epsilon == b.epsilon && a.form == DualForm::Raw && b.form == DualForm::Shifted {
                        let d = Complex64::new(a.value_re - b.value_re, a.value_im - b.value_im).norm();
                        checks.push(Assertion::new(
                            format!("raw vs shifted (W={}, E={}, eps={})", a.w, a.energy, a.epsilon),
                            d <= config.tolerance,
                            format!("difference {d:.3e}"),
                        ));
                        agreement.push(json!({"W": a.w, "E": a.energy, "epsilon": a.epsilon, "difference": d}));
                    }
                }
            }
            let p = dir.join("susy_check.json");
            write_json(&p, &json!({"records": all, "form_agreement": agreement}))?;
            files.push(p);
        }
        Experiment::GrassmannCheck => {
            let text = std::fs::read_to_string(dir.join("grassmann_check.json"))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            for c in v["checks"].as_array().into_iter().flatten() {
                checks.push(Assertion::new(
                    c["name"].as_str().unwrap_or("?"),
                    c["passed"].as_bool().unwrap_or(false),
                    format!("error {} tolerance {}", c["error"], c["tolerance"]),
                ));
            }
        }
        Experiment::KernelAudit => {
            let mut rows: Vec<KernelAuditRow> = Vec::new();
            for &w in &config.bandwidths {
                let text = std::fs::read_to_string(dir.join(format!("kernel_W{w}.json")))?;
                rows.extend(serde_json::from_str::<Vec<KernelAuditRow>>(&text)?);
            }
            for r in &rows {
                let tag = match r.energy {
                    Some(e) => format!("{} W={} E={e}", r.kind, r.w),
                    None => format!("{} W={}", r.kind, r.w),
                };
                checks.push(Assertion::new(
                    format!("inverse residual ({tag})"),
                    r.inverse_residual <= 1e-10,
                    format!("{:.3e}", r.inverse_residual),
                ));
                if r.kind == "J" {
                    checks.push(Assertion::new(
                        format!("row sums ({tag})"),
                        r.row_sum_deviation <= 1e-12,
                        format!("{:.3e}", r.row_sum_deviation),
                    ));
                    checks.push(Assertion::new(
                        format!("positive entries ({tag})"),
                        r.min_entry > 0.0,
                        format!("min {:.3e}", r.min_entry),
                    ));
                }
                if let Some(ok) = r.g_decay_passes {
                    checks.push(Assertion::new(format!("G decay ({tag})"), ok, String::new()));
                }
            }
            let p = dir.join("kernel_audit.csv");
            let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
            write_csv(
                &p,
                &["W", "kind", "E", "mass", "inverse_residual", "row_sum_deviation", "asymmetry", "min_entry", "decay_rate", "rate_times_W"],
                rows.iter().map(|r| {
                    vec![
                        r.w.to_string(),
                        r.kind.clone(),
                        opt(r.energy),
                        fmt_f64(r.mass),
                        fmt_f64(r.inverse_residual),
                        fmt_f64(r.row_sum_deviation),
                        fmt_f64(r.asymmetry),
                        fmt_f64(r.min_entry),
                        opt(r.decay_rate),
                        opt(r.decay_rate.map(|x| x * r.w as f64)),
                    ]
                }),
            )?;
            files.push(p);
        }
        Experiment::SaddleTable => {
            let cols = read_columns(
                &dir.join("saddle_table.csv"),
                &["unit_modulus", "conjugate", "f1_stationary", "f2_stationary", "f1_curvature", "f2_curvature", "well_zero", "well_second"],
            )?;
            let max = |r: std::ops::Range<usize>| {
                cols[r].iter().flatten().cloned().fold(0.0, f64::max)
            };
            let algebraic = max(0..2);
            let analytic = max(2..8);
            checks.push(Assertion::new(
                "saddle algebraic identities",
                algebraic <= SADDLE_ALGEBRAIC_TOL,
                format!("max residual {algebraic:.3e}"),
            ));
            checks.push(Assertion::new(
                "saddle stationarity, curvature and well heights",
                analytic <= SADDLE_ANALYTIC_TOL,
                format!("max residual {analytic:.3e}"),
            ));
            let (mass, _) = integrate_real(semicircle, -2.0, 2.0, 1e-13, 10_000)?;
            checks.push(Assertion::new(
                "semicircle normalisation",
                (mass - 1.0).abs() <= 1e-12,
                format!("integral {mass:.15}"),
            ));
            let centre = semicircle(0.0);
            checks.push(Assertion::new(
                "semicircle centre value",
                (centre - 1.0 / PI).abs() <= 1e-15,
                format!("rho(0) = {centre:.17}"),
            ));
        }
    }
    Ok((files, checks))
}

/// Description of every config key.
pub fn schema() -> serde_json::Value {
    let f = |name: &str, ty: &str, default: serde_json::Value, used_by: &[&str], doc: &str| {
        json!({"name": name, "type": ty, "default": default, "used_by": used_by, "description": doc})
    };
    let all = ["all"];
    json!({
        "format": "TOML, flat key = value pairs; unknown keys are rejected",
        "experiments": Experiment::ALL.iter().map(|e| e.name()).collect::<Vec<_>>(),
        "fields": [
            f("experiment", "string", json!(null), &all, "one of the experiments listed above (required)"),
            f("d", "integer", json!(3), &all, "lattice dimension, 1 to 3"),
            f("sides", "integer list", json!([]), &all, "side lengths: one value for a cube or d values; empty means side_factor * W"),
            f("side_factor", "integer", json!(2), &all, "cube side as a multiple of W when sides is empty"),
            f("multi_cube", "bool", json!(false), &all, "require every side to be a multiple of W"),
            f("bandwidths", "integer list", json!([]), &["dos-sweep", "rx-decay", "susy-check", "kernel-audit"], "bandwidths W, distinct"),
            f("energies", "float list", json!([]), &["dos-sweep", "rx-decay", "susy-check", "kernel-audit", "saddle-table"], "energy grid; overrides e_min/e_max/e_count"),
            f("e_min", "float", json!(null), &["dos-sweep", "rx-decay", "susy-check", "kernel-audit", "saddle-table"], "first energy of a uniform grid"),
            f("e_max", "float", json!(null), &["dos-sweep", "rx-decay", "susy-check", "kernel-audit", "saddle-table"], "last energy of a uniform grid"),
            f("e_count", "integer", json!(null), &["dos-sweep", "rx-decay", "susy-check", "kernel-audit", "saddle-table"], "number of grid points"),
            f("epsilons", "float list", json!([]), &["dos-sweep", "rx-decay", "susy-check"], "broadenings; empty means max(20/|Lambda|, 0.01) (and its double for dos-sweep); rx-decay uses the first and its half"),
            f("samples", "integer list", json!([DEFAULT_SAMPLES]), &["dos-sweep", "rx-decay"], "samples per bandwidth: one value or one per bandwidth"),
            f("base_seed", "integer", json!(0), &all, "root seed; task seeds are derived from it and the bandwidth"),
            f("output_dir", "path", json!("out"), &all, "directory for outputs, manifest and checkpoint"),
            f("workers", "integer", json!(0), &all, "thread count; 0 uses all cores; outputs do not depend on it"),
            f("window", "[float, float]", json!(default_window()), &["dos-sweep"], "energy window for the semicircle deviation"),
            f("export_samples", "bool", json!(false), &["dos-sweep"], "write every sampled matrix as (i, j, re, im) CSV"),
            f("max_radius", "float", json!(null), &["rx-decay"], "largest radius of R(x); default half the smallest side"),
            f("derivative_energies", "float list", json!([]), &["rx-decay"], "energies for the derivative identity check"),
            f("derivative_step", "float", json!(default_step()), &["rx-decay"], "finite-difference half step"),
            f("forms", "string list", json!(["raw", "shifted"]), &["susy-check"], "dual integrand forms"),
            f("nodes", "integer", json!(default_nodes()), &["susy-check"], "quadrature nodes per axis, at least 16"),
            f("truncation", "float", json!(default_truncation()), &["susy-check"], "integration half-width in standard deviations, at least 8"),
            f("tolerance", "float", json!(default_tolerance()), &["susy-check"], "target accuracy; also the raw/shifted and oracle agreement bound"),
            f("max_refinements", "integer", json!(default_refinements()), &["susy-check"], "node doublings before giving up"),
            f("mc_samples", "integer", json!(0), &["susy-check"], format!("Monte Carlo samples for the cross-check; 0 or at least {MIN_MC_SAMPLES}").as_str()),
            f("profile_energies", "float list", json!([]), &["saddle-table"], "energies for (z, F1, F2) well profiles"),
            f("export_kernels", "bool", json!(false), &["kernel-audit"], "write the dense J kernel and its sidecar"),
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_defaults() {
        let c = RunConfig::from_toml_str(
            "experiment = \"dos-sweep\"\nbandwidths = [2, 3]\nenergies = [0.0, 1.0, 2.0]\n",
        )
        .unwrap();
        assert_eq!(c.d, 3);
        assert_eq!(c.side_factor, 2);
        assert_eq!(c.window, [0.2, 1.8]);
        assert_eq!(c.geometry(3).unwrap().sides(), &[6, 6, 6]);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.epsilons_for(64), vec![20.0 / 64.0, 40.0 / 64.0]);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = RunConfig::from_toml_str("experiment = \"dos-sweep\"\nbandwith = [2]\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "bandwith"), "{err}");
        let err = RunConfig::from_toml_str("experiment = \"nope\"\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));

        let mut c = RunConfig::new(Experiment::DosSweep);
        c.energies = vec![0.0, 1.0, 2.0];
        let field = |c: &RunConfig| match c.validate() {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(field(&c), "bandwidths");
        c.bandwidths = vec![2];
        c.samples = vec![1];
        assert_eq!(field(&c), "samples");
        c.samples = vec![10];
        c.window = [0.05, 1.8];
        assert_eq!(field(&c), "window");
        c.window = [0.2, 1.9];
        assert_eq!(field(&c), "window");
        c.window = [0.2, 1.8];
        c.energies = vec![0.0, 1.0];
        assert_eq!(field(&c), "window");
        c.energies = vec![0.0, 2.0];
        c.sides = vec![5];
        c.multi_cube = true;
        assert_eq!(field(&c), "sides");
        c.multi_cube = false;
        let warnings = c.validate().unwrap();
        assert!(warnings.iter().any(|w| w.contains("multiple of W")));
        c.epsilons = vec![-0.1];
        assert_eq!(field(&c), "epsilons");
    }

    #[test]
    fn susy_config_checks() {
        let mut c = RunConfig::new(Experiment::SusyCheck);
        c.d = 1;
        c.sides = vec![4];
        c.bandwidths = vec![1];
        c.energies = vec![0.5];
        c.epsilons = vec![0.05];
        assert!(matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "sides"));
        c.sides = vec![2];
        c.mc_samples = 50;
        assert!(matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "mc_samples"));
        c.mc_samples = 0;
        c.nodes = 4;
        assert!(matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "nodes"));
    }

    fn write_dos(path: &Path, energies: &[f64], dos: impl Fn(f64) -> f64, se: f64, eps: f64) {
        let rows = energies.iter().map(|&e| {
            vec![fmt_f64(e), fmt_f64(dos(e)), fmt_f64(se), "0".into(), fmt_f64(eps), "100".into()]
        });
        write_csv(path, &["E", "dos_mean", "dos_stderr", "ImG00_mean", "epsilon", "samples"], rows).unwrap();
    }

    fn grid() -> Vec<f64> {
        (0..=40).map(|k| -2.0 + 0.1 * k as f64).collect()
    }

    #[test]
    fn exact_semicircle_has_zero_deviation() {
        let dir = tempfile::tempdir().unwrap();
        let files: Vec<(usize, PathBuf)> = [2usize, 4]
            .iter()
            .map(|&w| {
                let p = dir.path().join(format!("w{w}.csv"));
                write_dos(&p, &grid(), semicircle, 1e-3, 0.1);
                (w, p)
            })
            .collect();
        let t = semicircle_deviation(&files, [0.2, 1.8]).unwrap();
        assert!(t.rows.iter().all(|r| r.sup_deviation == 0.0));
        assert!(!t.monotone);
        assert_eq!(t.slope, None);
    }

    #[test]
    fn quartered_deviation_gives_slope_minus_two() {
        let dir = tempfile::tempdir().unwrap();
        let files: Vec<(usize, PathBuf)> = [(2usize, 0.04), (4, 0.01)]
            .iter()
            .map(|&(w, shift)| {
                let p = dir.path().join(format!("w{w}.csv"));
                write_dos(&p, &grid(), |e| semicircle(e) + shift, 1e-4, 0.1);
                (w, p)
            })
            .collect();
        let t = semicircle_deviation(&files, [0.2, 1.8]).unwrap();
        assert!((t.slope.unwrap() + 2.0).abs() < 1e-9, "{:?}", t.slope);
        assert!(t.monotone && t.slope_ok());
        assert!((t.rows[0].sup_deviation - 0.04).abs() < 1e-12);
        // drop smaller than two combined errors
        let p = dir.path().join("noisy.csv");
        write_dos(&p, &grid(), |e| semicircle(e) + 0.035, 0.01, 0.1);
        let t = semicircle_deviation(&[files[0].clone(), (3, p)], [0.2, 1.8]).unwrap();
        assert!(!t.monotone);
    }

    #[test]
    fn deviation_preconditions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.csv");
        write_dos(&p, &[0.0, 0.5, 1.0], semicircle, 1e-3, 0.1);
        let q = dir.path().join("full.csv");
        write_dos(&q, &grid(), semicircle, 1e-3, 0.1);
        let both = [(2, p.clone()), (3, q.clone())];
        assert!(matches!(semicircle_deviation(&both, [0.2, 1.8]), Err(Error::EnergyWindow { .. })));
        assert!(semicircle_deviation(&[(2, q.clone()), (2, q.clone())], [0.2, 1.8]).is_err());
        assert!(semicircle_deviation(&[(2, q.clone()), (3, q.clone())], [0.05, 1.0]).is_err());
    }

    fn write_rx(path: &Path, radii: &[f64], f: impl Fn(f64) -> f64) {
        let rows = radii
            .iter()
            .map(|&r| vec![fmt_f64(r), fmt_f64(f(r)), "0".into(), "1e-6".into(), "6".into()]);
        write_csv(path, &["radius", "reR_mean", "imR_mean", "stderr", "count"], rows).unwrap();
    }

    #[test]
    fn decay_fixtures() {
        let dir = tempfile::tempdir().unwrap();
        let radii: Vec<f64> = (0..=8).map(|r| r as f64).collect();
        let p1 = dir.path().join("w1.csv");
        write_rx(&p1, &radii, |r| (-r).exp());
        let p2 = dir.path().join("w2.csv");
        write_rx(&p2, &radii, |r| (-r / 2.0).exp() / 8.0);
        let t = decay_report(&[(1, p1.clone()), (2, p2.clone())]).unwrap();
        assert!((t.rows[0].c - 1.0).abs() < 1e-10);
        assert!((t.rows[0].rate - 1.0).abs() < 1e-10);
        assert!((t.rows[1].c - 1.0).abs() < 1e-10);
        assert!((t.amplitude_ratio - 1.0).abs() < 1e-9, "{}", t.amplitude_ratio);
        assert!(t.rates_positive && t.rate_stable() && t.amplitude_consistent());

        let p3 = dir.path().join("w3.csv");
        write_rx(&p3, &[0.0, 1.0, 2.0, 3.0, 4.0], |r| (-r).exp());
        let err = decay_report(&[(1, p1), (3, p3)]).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)), "{err}");
    }

    #[test]
    fn g_consistency_uses_t_tails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        let rows = vec![
            vec!["0.1".into(), "0".into(), "-3".into(), "0.1".into(), "0.1".into(), "0.1".into(), "1".into(), "5".into()],
            vec!["0.1".into(), "1".into(), "0.5".into(), "0.1".into(), "0.1".into(), "0.1".into(), "6".into(), "5".into()],
        ];
        write_csv(&p, &["epsilon", "radius", "reG_mean", "imG_mean", "reG_stderr", "imG_stderr", "count", "samples"], rows).unwrap();
        // t = 5 with 4 degrees of freedom sits well below 5 sigma
        let z = g_consistency(&p).unwrap();
        assert!(z > 2.5 && z < 3.5, "{z}");
    }

    #[test]
    fn grassmann_run_writes_manifest_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::new(Experiment::GrassmannCheck);
        c.output_dir = dir.path().to_path_buf();
        c.base_seed = 3;
        let m = run(&c).unwrap();
        assert!(m.passed, "{:?}", m.failed_assertions());
        assert!(dir.path().join(MANIFEST_FILE).exists());
        assert!(!dir.path().join(CHECKPOINT_FILE).exists());
        assert_eq!(m.tasks.len(), 1);
        assert_eq!(m.all_outputs().len(), 1);
    }

    #[test]
    fn interrupted_sweep_resumes_to_identical_hashes() {
        let mut c = RunConfig::new(Experiment::DosSweep);
        c.d = 1;
        c.bandwidths = vec![1, 2, 3];
        c.side_factor = 4;
        c.samples = vec![8];
        c.e_min = Some(-2.0);
        c.e_max = Some(2.0);
        c.e_count = Some(21);
        c.base_seed = 17;
        c.workers = 1;

        let a = tempfile::tempdir().unwrap();
        c.output_dir = a.path().to_path_buf();
        let straight = run(&c).unwrap();

        let b = tempfile::tempdir().unwrap();
        c.output_dir = b.path().to_path_buf();
        c.workers = 2;
        match run_with(&c, RunOptions { stop_after: Some(1) }).unwrap() {
            RunOutcome::Interrupted { completed, checkpoint } => {
                assert_eq!(completed, 1);
                assert!(checkpoint.exists());
            }
            RunOutcome::Finished(_) => panic!("expected an interruption"),
        }
        let resumed = run(&c).unwrap();
        assert_eq!(resumed.resumed_tasks, vec!["dos-sweep-W1".to_string()]);
        assert_eq!(straight.all_outputs(), resumed.all_outputs());
        assert!(straight.all_outputs().iter().any(|o| o.path == "semicircle_summary.csv"));
        assert_eq!(straight.tasks[0].streams, [0, 8]);
    }

    #[test]
    fn schema_lists_every_field() {
        let s = schema();
        let names: BTreeSet<String> = s["fields"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["name"].as_str().unwrap().to_string())
            .collect();
        let c = serde_json::to_value(RunConfig::new(Experiment::DosSweep)).unwrap();
        let keys: BTreeSet<String> = c.as_object().unwrap().keys().cloned().collect();
        assert_eq!(names, keys);
    }
}

//! Configuration, deterministic seeding, sweep orchestration, export and the CLI.
//!
//! Times given in configuration files and on the command line (`t_end`,
//! `reset_period`, `transient`, `snapshot_every`) are counted in drive
//! periods `2π/Ω`.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classical::{self, BenettinSettings, ClassicalParams, ClassicalState};
use crate::control::{ControlStrategy, Controller, StrategyKind};
use crate::fock::{self, DensityMatrix, FockState, C64};
use crate::lyapunov::{self, default_alpha0, run_twin, TwinFailure, TwinOutcome, TwinRunSettings};
use crate::sse::{self, NoiseStream, Propagator, Scheme, SimParams};

/// Environment variable overriding the sweep worker count.
pub const WORKERS_ENV: &str = "QDUFFING_WORKERS";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config: {key}: {reason}")]
    Config { key: String, reason: String },
    #[error("config: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Sse(#[from] sse::SseError),
    #[error(transparent)]
    Lyapunov(#[from] lyapunov::LyapunovError),
    #[error(transparent)]
    Classical(#[from] classical::ClassicalError),
    #[error(transparent)]
    Fock(#[from] fock::FockError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> RunnerError {
    RunnerError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    control: RawControl,
    #[serde(default)]
    sweep: RawSweep,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    gamma: Option<f64>,
    g: Option<f64>,
    omega: Option<f64>,
    dim: Option<usize>,
    dt: Option<f64>,
    d0: Option<f64>,
    scheme: Option<String>,
    signal_gain: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    update_interval: Option<usize>,
    grid_angles: Option<usize>,
    peak_floor: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    beta: Option<Vec<f64>>,
    strategy: Option<Vec<String>>,
    seeds: Option<usize>,
    master_seed: Option<u64>,
    t_end: Option<f64>,
    reset_period: Option<f64>,
    transient: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    snapshot_every: Option<f64>,
    series_stride: Option<usize>,
}

/// Validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    /// Model parameters; `params.beta` is replaced per job by each entry of `betas`.
    pub params: SimParams,
    pub betas: Vec<f64>,
    pub strategies: Vec<ControlStrategy>,
    pub seeds: usize,
    pub master_seed: u64,
    pub t_end: f64,
    pub reset_period: f64,
    pub transient: f64,
    pub update_interval: usize,
    pub grid_angles: Option<usize>,
    pub peak_floor: f64,
    /// Prefactor of `⟨X_φ⟩dt` in the homodyne record; `√Γ` when unset.
    pub signal_gain: Option<f64>,
    pub output_dir: PathBuf,
    pub snapshot_every: f64,
    /// Steps between rows of the trajectory series; 0 disables the series.
    pub series_stride: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let strategies = ["fixed:0", "fixed:pi/2", "adaptive-parallel", "adaptive-perpendicular"]
            .iter()
            .map(|s| ControlStrategy::parse(s).expect("built-in strategy"))
            .collect();
        Self {
            params: SimParams::canonical(0.3),
            betas: vec![0.3],
            strategies,
            seeds: 10,
            master_seed: 1,
            t_end: 1000.0,
            reset_period: 1.0,
            transient: lyapunov::DEFAULT_TRANSIENT_PERIODS,
            update_interval: 1,
            grid_angles: None,
            peak_floor: crate::control::DEFAULT_PEAK_FLOOR,
            signal_gain: None,
            output_dir: PathBuf::from("out"),
            snapshot_every: 10.0,
            series_stride: 1000,
        }
    }
}

/// Parses TOML with sections `[model]`, `[control]`, `[sweep]`, `[output]`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, RunnerError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| RunnerError::Parse(e.to_string()))?;
    let mut cfg = ExperimentConfig::default();
    let m = raw.model;
    if let Some(v) = m.gamma {
        cfg.params.gamma = v;
    }
    if let Some(v) = m.g {
        cfg.params.g = v;
    }
    if let Some(v) = m.omega {
        cfg.params.omega = v;
    }
    if let Some(v) = m.dim {
        cfg.params.dim = v;
    }
    if let Some(v) = m.dt {
        cfg.params.dt = v;
    }
    if let Some(v) = m.d0 {
        cfg.params.d0 = v;
    }
    if let Some(s) = m.scheme {
        cfg.params.scheme = Scheme::parse(&s)
            .ok_or_else(|| config_err("model.scheme", format!("unknown scheme {s:?}")))?;
    }
    cfg.signal_gain = m.signal_gain;

    let c = raw.control;
    if let Some(v) = c.update_interval {
        cfg.update_interval = v;
    }
    cfg.grid_angles = c.grid_angles;
    if let Some(v) = c.peak_floor {
        cfg.peak_floor = v;
    }

    let s = raw.sweep;
    if let Some(v) = s.beta {
        cfg.betas = v;
    }
    if let Some(list) = s.strategy {
        cfg.strategies = list
            .iter()
            .map(|t| ControlStrategy::parse(t).map_err(|e| config_err("sweep.strategy", e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = s.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = s.master_seed {
        cfg.master_seed = v;
    }
    if let Some(v) = s.t_end {
        cfg.t_end = v;
    }
    if let Some(v) = s.reset_period {
        cfg.reset_period = v;
    }
    if let Some(v) = s.transient {
        cfg.transient = v;
    }

    let o = raw.output;
    if let Some(v) = o.dir {
        cfg.output_dir = v;
    }
    if let Some(v) = o.snapshot_every {
        cfg.snapshot_every = v;
    }
    if let Some(v) = o.series_stride {
        cfg.series_stride = v;
    }
    cfg.finish()
}

impl ExperimentConfig {
    /// Applies the control settings to every strategy and checks all invariants.
    pub fn finish(mut self) -> Result<Self, RunnerError> {
        if self.betas.is_empty() {
            return Err(config_err("sweep.beta", "list is empty"));
        }
        self.params.beta = self.betas[0];
        for &b in &self.betas {
            let mut p = self.params;
            p.beta = b;
            p.validate().map_err(|e| match e {
                sse::SseError::InvalidParameter { name, reason } => {
                    let key = if name == "beta" {
                        "sweep.beta".to_string()
                    } else {
                        format!("model.{name}")
                    };
                    config_err(&key, reason)
                }
                other => config_err("model", other.to_string()),
            })?;
        }
        if self.strategies.is_empty() {
            return Err(config_err("sweep.strategy", "list is empty"));
        }
        for s in &mut self.strategies {
            s.update_interval = self.update_interval;
            s.peak_floor = self.peak_floor;
            if let Some(m) = self.grid_angles {
                s.grid_angles = m;
            }
            s.validate().map_err(|e| {
                let key = match e {
                    crate::control::ControlError::ZeroInterval => "control.update_interval",
                    crate::control::ControlError::TooFewAngles(_) => "control.grid_angles",
                    crate::control::ControlError::NegativeFloor(_) => "control.peak_floor",
                    _ => "sweep.strategy",
                };
                config_err(key, e.to_string())
            })?;
        }
        if self.seeds == 0 {
            return Err(config_err("sweep.seeds", "must be at least 1"));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(config_err("sweep.t_end", format!("{} must be positive", self.t_end)));
        }
        if !(self.reset_period > 0.0 && self.reset_period <= self.t_end) {
            return Err(config_err(
                "sweep.reset_period",
                format!("{} must lie in (0, t_end]", self.reset_period),
            ));
        }
        if !(self.transient >= 0.0) {
            return Err(config_err("sweep.transient", "must be non-negative"));
        }
        if !(self.snapshot_every > 0.0) {
            return Err(config_err("output.snapshot_every", "must be positive"));
        }
        if let Some(g) = self.signal_gain {
            if !g.is_finite() {
                return Err(config_err("model.signal_gain", "must be finite"));
            }
        }
        Ok(self)
    }

    pub fn params_for(&self, beta: f64) -> SimParams {
        SimParams { beta, ..self.params }
    }

    /// Twin settings for one job; the transient is capped at half the run.
    pub fn twin_settings(&self, params: &SimParams) -> TwinRunSettings {
        let period = params.drive_period();
        TwinRunSettings {
            t_end: self.t_end * period,
            reset_period: self.reset_period * period,
            transient: (self.transient * period).min(0.5 * self.t_end * period),
            alpha0: None,
            series_stride: (self.series_stride > 0).then_some(self.series_stride),
        }
    }
}

// ---------------------------------------------------------------------------
// seeding

/// SplitMix64 finalizer applied to `master + (index + 1)·φ64`.
///
/// The golden-ratio increment is odd, so distinct indices map to distinct
/// inputs, and the finalizer is a bijection on `u64`: distinct indices can
/// never collide under one master seed.
pub fn derive_seed(master_seed: u64, job_index: u64) -> u64 {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut z = master_seed.wrapping_add(job_index.wrapping_add(1).wrapping_mul(GOLDEN));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// export

/// Shortest decimal that parses back to the same `f64`.
fn num(x: f64) -> String {
    format!("{x}")
}

fn create(path: &Path) -> Result<BufWriter<File>, RunnerError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Writes a CSV table, optionally preceded by a `#` metadata line.
pub fn write_csv(
    path: &Path,
    comment: Option<&str>,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), RunnerError> {
    let mut file = create(path)?;
    if let Some(c) = comment {
        writeln!(file, "# {c}").map_err(io_err(path))?;
    }
    let mut w = csv::Writer::from_writer(file);
    let fmt_err = |e: csv::Error| RunnerError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    w.write_record(header).map_err(fmt_err)?;
    for row in rows {
        w.write_record(&row).map_err(fmt_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let mut file = create(path)?;
    serde_json::to_writer_pretty(&mut file, value).map_err(|e| RunnerError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    writeln!(file).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

/// Wigner function sampled on a rectangular grid, `values[i·p.len() + j] = W(q_i, p_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerGrid {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub values: Vec<f64>,
}

fn axis(extent: f64, points: usize) -> Vec<f64> {
    let step = 2.0 * extent / (points - 1) as f64;
    (0..points).map(|i| -extent + i as f64 * step).collect()
}

pub fn wigner_grid(rho: &DensityMatrix, extent: f64, points: usize) -> WignerGrid {
    let q = axis(extent, points.max(2));
    let p = q.clone();
    let values = fock::wigner_density(rho, &q, &p);
    WignerGrid { q, p, values }
}

pub fn write_wigner_csv(path: &Path, grid: &WignerGrid) -> Result<(), RunnerError> {
    let meta = format!(
        "q_min={},q_max={},q_count={},p_min={},p_max={},p_count={},order=row-major-q",
        num(grid.q[0]),
        num(*grid.q.last().unwrap()),
        grid.q.len(),
        num(grid.p[0]),
        num(*grid.p.last().unwrap()),
        grid.p.len()
    );
    let rows = grid.q.iter().enumerate().flat_map(|(i, &q)| {
        grid.p
            .iter()
            .enumerate()
            .map(move |(j, &p)| (i, j, q, p))
    });
    let width = grid.p.len();
    write_csv(
        path,
        Some(&meta),
        &["q", "p", "w"],
        rows.map(|(i, j, q, p)| vec![num(q), num(p), num(grid.values[i * width + j])]),
    )
}

/// Quadrature distribution `P(x_θ)` on `grid`.
pub fn write_pdf_csv(
    path: &Path,
    theta: f64,
    grid: &fock::QuadratureGrid,
    pdf: &[f64],
) -> Result<(), RunnerError> {
    let meta = format!(
        "theta={},x_min={},x_max={},count={}",
        num(theta),
        num(grid.x_min()),
        num(grid.x_max()),
        grid.count()
    );
    write_csv(
        path,
        Some(&meta),
        &["x", "pdf"],
        grid.points()
            .into_iter()
            .zip(pdf)
            .map(|(x, p)| vec![num(x), num(*p)]),
    )
}

/// Pure-state snapshot as `(Re C_n, Im C_n)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub coeffs: Vec<[f64; 2]>,
}

impl Snapshot {
    pub fn new(t: f64, state: &FockState) -> Self {
        Self {
            t,
            coeffs: state.coeffs().iter().map(|c| [c.re, c.im]).collect(),
        }
    }

    pub fn state(&self) -> Result<FockState, RunnerError> {
        let coeffs = self.coeffs.iter().map(|&[re, im]| C64::new(re, im)).collect();
        Ok(FockState::from_coeffs(coeffs)?)
    }
}

/// Reads one snapshot or an array of them.
pub fn read_snapshots(path: &Path) -> Result<Vec<Snapshot>, RunnerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |e: serde_json::Error| RunnerError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    match serde_json::from_str::<Vec<Snapshot>>(&text) {
        Ok(list) => Ok(list),
        Err(_) => Ok(vec![serde_json::from_str::<Snapshot>(&text).map_err(bad)?]),
    }
}

/// Equal-weight average of `|ψ⟩⟨ψ|` over the given states.
pub fn accumulate_ensemble_state(states: &[FockState]) -> Result<DensityMatrix, RunnerError> {
    let first = states.first().ok_or_else(|| config_err("snapshots", "no states to average"))?;
    let dim = first.dim();
    let mut rho = DensityMatrix::zeros(dim);
    let w = 1.0 / states.len() as f64;
    for s in states {
        if s.dim() != dim {
            return Err(RunnerError::DimensionMismatch {
                expected: dim,
                found: s.dim(),
            });
        }
        rho.add_pure(s, w);
    }
    Ok(rho)
}

// ---------------------------------------------------------------------------
// single trajectory

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub q: f64,
    pub p: f64,
    pub phi: f64,
    pub tail: f64,
    /// Homodyne record `Σ I dt` accumulated since the previous row.
    pub record: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FringeRow {
    pub t: f64,
    pub theta_max: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryOutput {
    pub series: Vec<TrajectoryRow>,
    pub fringes: Vec<FringeRow>,
    pub snapshots: Vec<Snapshot>,
    pub tail_warnings: u64,
    pub final_state: FockState,
}

/// One controlled conditional trajectory starting at the well minimum.
///
/// `t_end` and `snapshot_every` are model times; `stride` is in steps.
pub fn simulate_trajectory(
    params: &SimParams,
    strategy: &ControlStrategy,
    seed: u64,
    t_end: f64,
    stride: usize,
    snapshot_every: f64,
    signal_gain: Option<f64>,
) -> Result<TrajectoryOutput, RunnerError> {
    let mut prop = Propagator::new(*params)?;
    let mut controller = Controller::new(*strategy, params.dim).map_err(|e| config_err("strategy", e.to_string()))?;
    let mut state = fock::coherent_state(default_alpha0(params.beta), params.dim)?;
    let mut noise = NoiseStream::new(seed, params.dt);
    let gain = signal_gain.unwrap_or(params.gamma.sqrt());
    let dt = params.dt;
    let total = (t_end / dt).round() as u64;
    let stride = stride.max(1) as u64;
    let snap_steps = ((snapshot_every / dt).round() as u64).max(1);

    let row = |t: f64, s: &FockState, phi: f64, record: f64| {
        let c = fock::centroid(s);
        TrajectoryRow {
            t,
            q: c.q,
            p: c.p,
            phi,
            tail: fock::tail_weight(s),
            record,
        }
    };
    let mut series = vec![row(0.0, &state, controller.phase(), 0.0)];
    let mut snapshots = vec![Snapshot::new(0.0, &state)];
    let mut fringes = Vec::new();
    let mut tail_warnings = 0;
    let mut record = 0.0;
    for k in 0..total {
        let t = k as f64 * dt;
        let phi = controller.tick(&state, k);
        let dw = noise.next_increment();
        let mean_a = fock::expect_annihilation(&state);
        record += gain * sse::quadrature_mean(mean_a, phi) * dt + dw;
        let report = prop.step(&mut state, phi, dw, t)?;
        tail_warnings += report.warn as u64;
        let done = k + 1;
        let t_done = done as f64 * dt;
        if done % stride == 0 || done == total {
            series.push(row(t_done, &state, phi, record));
            record = 0.0;
            if let Some(est) = controller.last_estimate() {
                fringes.push(FringeRow {
                    t: t_done,
                    theta_max: est.theta_max,
                    counts: est.peak_counts.clone(),
                });
            }
        }
        if done % snap_steps == 0 {
            snapshots.push(Snapshot::new(t_done, &state));
        }
    }
    Ok(TrajectoryOutput {
        series,
        fringes,
        snapshots,
        tail_warnings,
        final_state: state,
    })
}

fn write_trajectory(dir: &Path, out: &TrajectoryOutput, files: &mut Vec<String>) -> Result<(), RunnerError> {
    let series = dir.join("trajectory.csv");
    write_csv(
        &series,
        None,
        &["t", "q", "p", "phi", "tail", "record"],
        out.series
            .iter()
            .map(|r| vec![num(r.t), num(r.q), num(r.p), num(r.phi), num(r.tail), num(r.record)]),
    )?;
    files.push("trajectory.csv".into());
    if let Some(first) = out.fringes.first() {
        let m = first.counts.len();
        let mut header = vec!["t".to_string(), "theta_max".to_string()];
        header.extend((0..m).map(|k| format!("count_{k}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            &dir.join("fringes.csv"),
            Some(&format!("angles=k*pi/{m}")),
            &header,
            out.fringes.iter().map(|f| {
                let mut row = vec![num(f.t), num(f.theta_max)];
                row.extend(f.counts.iter().map(|c| c.to_string()));
                row
            }),
        )?;
        files.push("fringes.csv".into());
    }
    write_json(&dir.join("snapshots.json"), &out.snapshots)?;
    files.push("snapshots.json".into());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobRecord {
    pub index: usize,
    pub beta: f64,
    pub strategy: String,
    pub seed_index: usize,
    pub seed: u64,
    pub status: String,
    pub lambda: Option<f64>,
    pub error: Option<String>,
    pub failed_at: Option<f64>,
    pub wall_time_s: f64,
    pub tail_warnings: u64,
    pub max_tail: Option<f64>,
}

/// Record of everything a run produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub complete: bool,
    pub jobs: Vec<JobRecord>,
    pub warnings: Vec<String>,
    /// Paths relative to the output directory; includes the manifest itself.
    pub files: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            complete: false,
            jobs: Vec::new(),
            warnings: Vec::new(),
            files: Vec::new(),
        }
    }

    fn write(mut self, dir: &Path) -> Result<RunManifest, RunnerError> {
        if !self.files.iter().any(|f| f == MANIFEST_FILE) {
            self.files.push(MANIFEST_FILE.into());
        }
        write_json(&dir.join(MANIFEST_FILE), &self)?;
        Ok(self)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLambda {
    pub seed_index: usize,
    pub seed: u64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub beta: f64,
    pub strategy: String,
    pub mean: Option<f64>,
    pub two_se: Option<f64>,
    pub n_seeds: usize,
    pub partial: bool,
    pub per_seed: Vec<SeedLambda>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Run length in drive periods.
    pub t_end: f64,
    pub dt: f64,
    pub dim: usize,
    pub scheme: String,
    pub cells: Vec<CellSummary>,
}

/// `0.3` → `0.3`, strategy labels lose `:` and `/`.
pub fn cell_stem(beta: f64, strategy: &ControlStrategy) -> String {
    let label = strategy.label().replace(':', "-").replace('/', "_");
    format!("beta{}_{}", num(beta), label)
}

fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct Job {
    index: usize,
    beta: f64,
    strategy: ControlStrategy,
    seed_index: usize,
    seed: u64,
}

/// Runs every `(β, strategy, seed)` job and writes per-job CSVs, per-cell
/// λ tables, the summary and the manifest into `out`.
///
/// Seed `i` is `derive_seed(master_seed, i)` in every cell, so all cells see
/// the same noise realizations.
pub fn run_sweep(config: &ExperimentConfig, out: &Path) -> Result<RunManifest, RunnerError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut manifest = RunManifest::new("lyapunov-sweep", config);
    let mut jobs = Vec::new();
    for &beta in &config.betas {
        for strategy in &config.strategies {
            for seed_index in 0..config.seeds {
                jobs.push(Job {
                    index: jobs.len(),
                    beta,
                    strategy: *strategy,
                    seed_index,
                    seed: derive_seed(config.master_seed, seed_index as u64),
                });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| config_err("workers", e.to_string()))?;
    let results: Vec<(Result<TwinOutcome, TwinFailure>, f64)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let params = config.params_for(job.beta);
                let settings = config.twin_settings(&params);
                let start = Instant::now();
                let r = run_twin(&params, &job.strategy, job.seed, &settings);
                (r, start.elapsed().as_secs_f64())
            })
            .collect()
    });

    // single committer, index order
    let mut cells: Vec<CellSummary> = Vec::new();
    for (job, (result, wall)) in jobs.iter().zip(&results) {
        let stem = cell_stem(job.beta, &job.strategy);
        let label = job.strategy.label();
        if cells.last().is_none_or(|c| c.beta != job.beta || c.strategy != label) {
            cells.push(CellSummary {
                beta: job.beta,
                strategy: label.clone(),
                mean: None,
                two_se: None,
                n_seeds: 0,
                partial: false,
                per_seed: Vec::new(),
            });
        }
        let cell = cells.last_mut().unwrap();
        let mut record = JobRecord {
            index: job.index,
            beta: job.beta,
            strategy: label,
            seed_index: job.seed_index,
            seed: job.seed,
            status: "ok".into(),
            lambda: None,
            error: None,
            failed_at: None,
            wall_time_s: *wall,
            tail_warnings: 0,
            max_tail: None,
        };
        let (logs, durations) = match result {
            Ok(o) => {
                record.lambda = Some(o.lambda);
                record.tail_warnings = o.tail_warnings;
                record.max_tail = Some(o.max_tail);
                if o.tail_warnings > 0 {
                    manifest.warnings.push(format!(
                        "job {}: tail weight crossed {} on {} steps (max {:e})",
                        job.index,
                        fock::TAIL_WARN,
                        o.tail_warnings,
                        o.max_tail
                    ));
                }
                cell.per_seed.push(SeedLambda {
                    seed_index: job.seed_index,
                    seed: job.seed,
                    lambda: o.lambda,
                });
                if !o.series.is_empty() {
                    let name = format!("series/{stem}_s{}.csv", job.seed_index);
                    write_csv(
                        &out.join(&name),
                        None,
                        &["t", "q", "p", "d_t", "phi", "tail"],
                        o.series.iter().map(|r| {
                            vec![num(r.t), num(r.q), num(r.p), num(r.d_t), num(r.phi), num(r.tail)]
                        }),
                    )?;
                    manifest.files.push(name);
                }
                (&o.window_logs, &o.window_durations)
            }
            Err(f) => {
                record.status = "failed".into();
                record.error = Some(f.error.to_string());
                record.failed_at = Some(f.t);
                cell.partial = true;
                manifest.warnings.push(f.to_string());
                (&f.window_logs, &f.window_durations)
            }
        };
        let name = format!("windows/{stem}_s{}.csv", job.seed_index);
        write_csv(
            &out.join(&name),
            None,
            &["window", "duration", "log"],
            logs.iter()
                .zip(durations)
                .enumerate()
                .map(|(i, (l, d))| vec![i.to_string(), num(*d), num(*l)]),
        )?;
        manifest.files.push(name);
        manifest.jobs.push(record);
    }

    for cell in &mut cells {
        let values: Vec<f64> = cell.per_seed.iter().map(|s| s.lambda).collect();
        cell.n_seeds = values.len();
        if !values.is_empty() {
            let (mean, two_se) = lyapunov::mean_two_se(&values);
            cell.mean = Some(mean);
            cell.two_se = Some(two_se);
        }
        let stem = format!("lambda_{}.csv", cell_stem_from(cell));
        write_csv(
            &out.join(&stem),
            None,
            &["seed_index", "seed", "lambda"],
            cell.per_seed
                .iter()
                .map(|s| vec![s.seed_index.to_string(), s.seed.to_string(), num(s.lambda)]),
        )?;
        manifest.files.push(stem);
    }
    let summary = SweepSummary {
        t_end: config.t_end,
        dt: config.params.dt,
        dim: config.params.dim,
        scheme: config.params.scheme.name().into(),
        cells,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    manifest.files.push(SUMMARY_FILE.into());
    manifest.complete = manifest.jobs.iter().all(|j| j.status == "ok");
    manifest.write(out)
}

fn cell_stem_from(cell: &CellSummary) -> String {
    format!(
        "beta{}_{}",
        num(cell.beta),
        cell.strategy.replace(':', "-").replace('/', "_")
    )
}

// ---------------------------------------------------------------------------
// CLI

#[derive(Debug, Parser)]
#[command(name = "qduffing", version, about = "Monitored quantum Duffing oscillator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One controlled trajectory with its series, fringe counts and snapshots.
    Simulate(CommonArgs),
    /// Lyapunov exponents over every (beta, strategy, seed) job.
    LyapunovSweep(CommonArgs),
    /// Classical Duffing baseline: Poincare section and Lyapunov exponent.
    Classical(CommonArgs),
    /// Wigner function of a stored snapshot or snapshot ensemble.
    Wigner(WignerArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of seeds per cell.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    /// Run length in drive periods.
    #[arg(long)]
    t_end: Option<f64>,
    /// Comma-separated beta values.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    /// Comma-separated strategies: fixed:ANGLE, adaptive-parallel, adaptive-perpendicular.
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<String>>,
    /// ito or stratonovich.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    update_interval: Option<usize>,
}

#[derive(Debug, Args)]
struct WignerArgs {
    /// Snapshot JSON: one snapshot or an array, averaged into a density matrix.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Half-width of the square phase-space window.
    #[arg(long, default_value_t = 8.0)]
    extent: f64,
    #[arg(long, default_value_t = 161)]
    points: usize,
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, RunnerError> {
    let mut cfg = match &args.config {
        Some(path) => parse_config(&fs::read_to_string(path).map_err(io_err(path))?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &args.out {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = args.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = args.master_seed {
        cfg.master_seed = v;
    }
    if let Some(v) = args.t_end {
        cfg.t_end = v;
    }
    if let Some(v) = &args.beta {
        cfg.betas = v.clone();
    }
    if let Some(list) = &args.strategy {
        cfg.strategies = list
            .iter()
            .map(|t| ControlStrategy::parse(t).map_err(|e| config_err("--strategy", e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    if let Some(s) = &args.scheme {
        cfg.params.scheme =
            Scheme::parse(s).ok_or_else(|| config_err("--scheme", format!("unknown scheme {s:?}")))?;
    }
    if let Some(v) = args.dt {
        cfg.params.dt = v;
    }
    if let Some(v) = args.update_interval {
        cfg.update_interval = v;
    }
    cfg.finish()
}

fn cmd_simulate(cfg: &ExperimentConfig) -> Result<RunManifest, (RunnerError, Option<RunManifest>)> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| (io_err(&out)(e), None))?;
    let mut manifest = RunManifest::new("simulate", cfg);
    let params = cfg.params;
    let strategy = cfg.strategies[0];
    let seed = derive_seed(cfg.master_seed, 0);
    let period = params.drive_period();
    let start = Instant::now();
    let result = simulate_trajectory(
        &params,
        &strategy,
        seed,
        cfg.t_end * period,
        cfg.series_stride.max(1),
        cfg.snapshot_every * period,
        cfg.signal_gain,
    );
    let mut job = JobRecord {
        index: 0,
        beta: params.beta,
        strategy: strategy.label(),
        seed_index: 0,
        seed,
        status: "ok".into(),
        lambda: None,
        error: None,
        failed_at: None,
        wall_time_s: start.elapsed().as_secs_f64(),
        tail_warnings: 0,
        max_tail: None,
    };
    match result {
        Ok(traj) => {
            job.tail_warnings = traj.tail_warnings;
            job.max_tail = traj.series.iter().map(|r| r.tail).reduce(f64::max);
            manifest.jobs.push(job);
            if let Err(e) = write_trajectory(&out, &traj, &mut manifest.files) {
                let m = manifest.write(&out).ok();
                return Err((e, m));
            }
            manifest.complete = true;
            manifest.write(&out).map_err(|e| (e, None))
        }
        Err(e) => {
            job.status = "failed".into();
            job.error = Some(e.to_string());
            manifest.jobs.push(job);
            let m = manifest.write(&out).ok();
            Err((e, m))
        }
    }
}

fn cmd_classical(cfg: &ExperimentConfig, t_end_given: bool) -> Result<(f64, RunManifest), RunnerError> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let p = ClassicalParams {
        gamma: cfg.params.gamma,
        g: cfg.params.g,
        omega: cfg.params.omega,
        beta: cfg.params.beta,
    };
    let mut settings = BenettinSettings::defaults_for(&p);
    let period = p.drive_period();
    if t_end_given {
        settings.t_end = cfg.t_end * period;
    }
    let lambda = classical::classical_lyapunov(&p, &settings)?;
    let transient_periods = (settings.transient / period).round() as usize;
    let s0 = ClassicalState::new(settings.initial.0, settings.initial.1, 0.0);
    let traj = classical::integrate_classical(s0, &p, settings.transient + settings.t_end, settings.dt)?;
    let points = classical::poincare_section(&traj, p.omega, transient_periods);
    let mut manifest = RunManifest::new("classical", cfg);
    write_csv(
        &out.join("poincare.csv"),
        Some(&format!("beta={},coordinates=(beta*x,beta*v)", num(p.beta))),
        &["period", "X", "P"],
        points.iter().map(|pt| vec![pt.period.to_string(), num(pt.x), num(pt.p)]),
    )?;
    manifest.files.push("poincare.csv".into());
    #[derive(Serialize)]
    struct ClassicalSummary {
        beta: f64,
        gamma: f64,
        g: f64,
        omega: f64,
        lambda: f64,
        t_end_periods: f64,
        transient_periods: f64,
        d0: f64,
    }
    write_json(
        &out.join("classical.json"),
        &ClassicalSummary {
            beta: p.beta,
            gamma: p.gamma,
            g: p.g,
            omega: p.omega,
            lambda,
            t_end_periods: settings.t_end / period,
            transient_periods: settings.transient / period,
            d0: settings.d0,
        },
    )?;
    manifest.files.push("classical.json".into());
    manifest.complete = true;
    Ok((lambda, manifest.write(out)?))
}

fn cmd_wigner(args: &WignerArgs) -> Result<PathBuf, RunnerError> {
    let snaps = read_snapshots(&args.input)?;
    let states = snaps.iter().map(Snapshot::state).collect::<Result<Vec<_>, _>>()?;
    let rho = accumulate_ensemble_state(&states)?;
    if !(args.extent > 0.0) || args.points < 2 {
        return Err(config_err("--extent/--points", "need a positive extent and at least 2 points"));
    }
    let grid = wigner_grid(&rho, args.extent, args.points);
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let path = out.join("wigner.csv");
    write_wigner_csv(&path, &grid)?;
    Ok(path)
}

/// Parses `argv` (program name first) and runs the subcommand.
///
/// Exit status: 0 on success, 1 on a failed run, 2 on usage errors.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let usage = |e: RunnerError| {
        eprintln!("error: {e}");
        2
    };
    match cli.command {
        Command::Simulate(args) => {
            let cfg = match load_config(&args) {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            match cmd_simulate(&cfg) {
                Ok(_) => {
                    println!("wrote {}", cfg.output_dir.display());
                    0
                }
                Err((e, _)) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
        Command::LyapunovSweep(args) => {
            let cfg = match load_config(&args) {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            match run_sweep(&cfg, &cfg.output_dir) {
                Ok(m) => {
                    for j in m.jobs.iter().filter(|j| j.status != "ok") {
                        eprintln!("job {} failed: {}", j.index, j.error.as_deref().unwrap_or(""));
                    }
                    println!("wrote {}", cfg.output_dir.join(SUMMARY_FILE).display());
                    if m.complete {
                        0
                    } else {
                        1
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
        Command::Classical(args) => {
            let cfg = match load_config(&args) {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            match cmd_classical(&cfg, args.t_end.is_some()) {
                Ok((lambda, _)) => {
                    println!("lambda_cl = {lambda:.6}");
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
        Command::Wigner(args) => match cmd_wigner(&args) {
            Ok(path) => {
                println!("wrote {}", path.display());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
    }
}

/// Strategy kinds in the order used for default sweeps.
pub fn default_strategy_kinds() -> [StrategyKind; 4] {
    [
        StrategyKind::FixedPhase(0.0),
        StrategyKind::FixedPhase(std::f64::consts::FRAC_PI_2),
        StrategyKind::AdaptiveParallel,
        StrategyKind::AdaptivePerpendicular,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn empty_config_is_canonical() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.params.gamma, 0.1);
        assert_eq!(cfg.params.g, 0.3);
        assert_eq!(cfg.params.omega, 1.0);
        assert_eq!(cfg.params.dim, 64);
        assert_eq!(cfg.params.dt, 1e-3);
        assert_eq!(cfg.params.d0, 1e-3);
        let kinds: Vec<_> = cfg.strategies.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, default_strategy_kinds());
        assert_eq!(cfg.strategies[2].grid_angles, 8);
        assert_eq!(cfg.strategies[3].grid_angles, 32);
    }

    #[test]
    fn single_cell_and_overrides() {
        let cfg = parse_config(
            "[sweep]\nbeta = [0.3]\nstrategy = [\"adaptive-parallel\"]\nseeds = 2\n\
             [control]\nupdate_interval = 10\n[model]\nscheme = \"stratonovich\"\n",
        )
        .unwrap();
        assert_eq!(cfg.betas, vec![0.3]);
        assert_eq!(cfg.strategies.len(), 1);
        assert_eq!(cfg.strategies[0].update_interval, 10);
        assert_eq!(cfg.params.scheme, Scheme::StratonovichMidpoint);
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = parse_config("[model]\ndt = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("model.dt"), "{err}");
        let err = parse_config("[model]\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let err = parse_config("[sweep]\nseeds = \"ten\"\n").unwrap_err().to_string();
        assert!(err.contains("seeds"), "{err}");
        let err = parse_config("[sweep]\nbeta = [-1.0]\n").unwrap_err().to_string();
        assert!(err.contains("sweep.beta"), "{err}");
        let err = parse_config("[control]\nupdate_interval = 0\n").unwrap_err().to_string();
        assert!(err.contains("control.update_interval"), "{err}");
        let err = parse_config("[sweep]\nstrategy = [\"greedy\"]\n").unwrap_err().to_string();
        assert!(err.contains("sweep.strategy"), "{err}");
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        for s in [0u64, 1, 42, u64::MAX] {
            assert_eq!(derive_seed(s, 7), derive_seed(s, 7));
            assert_ne!(derive_seed(s, 0), derive_seed(s, 1));
        }
        let mut seen = HashSet::with_capacity(1_000_000);
        for i in 0..1_000_000u64 {
            assert!(seen.insert(derive_seed(12345, i)), "collision at {i}");
        }
    }

    #[test]
    fn ensemble_state_examples() {
        let rho = accumulate_ensemble_state(&[FockState::vacuum(8)]).unwrap();
        assert!((rho.purity() - 1.0).abs() < 1e-15);
        let rho =
            accumulate_ensemble_state(&[FockState::vacuum(8), FockState::number_state(1, 8)]).unwrap();
        assert!((rho.purity() - 0.5).abs() < 1e-15);
        assert_eq!(rho.get(0, 0), C64::new(0.5, 0.0));
        assert_eq!(rho.get(1, 1), C64::new(0.5, 0.0));
        assert!(matches!(
            accumulate_ensemble_state(&[FockState::vacuum(8), FockState::vacuum(9)]),
            Err(RunnerError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(
            cell_stem(0.3, &ControlStrategy::parse("fixed:pi/2").unwrap()),
            "beta0.3_fixed-pi_2"
        );
    }
}

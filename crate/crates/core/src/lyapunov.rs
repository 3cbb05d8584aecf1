//! Quantum Lyapunov exponents from twin conditional trajectories.
//!
//! Two states that start a distance `d0` apart in the `(Q, P)` plane are
//! driven by the same homodyne record: the same `dW` sequence and the same
//! local-oscillator phase, which is always chosen from the fiducial. After
//! every reset period the shadow is re-displaced onto the fiducial along the
//! current separation direction, and `ln(d_t / d_base)` is logged, where
//! `d_base` is the separation actually measured after the previous reset.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::control::{ControlError, ControlStrategy, Controller};
use crate::fock::{self, FockError, FockState, C64};
use crate::sse::{NoiseStream, Propagator, SimParams, SseError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error(transparent)]
    Sse(#[from] SseError),
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("twin trajectories collapsed (d_t = {d:e}) at t = {t:.6}")]
    Collapse { t: f64, d: f64 },
    #[error("invalid setting {name}: {reason}")]
    InvalidSetting { name: &'static str, reason: String },
}

/// Fiducial and shadow states driven by one shared noise stream.
#[derive(Debug, Clone)]
pub struct TwinTrajectory {
    pub fiducial: FockState,
    pub shadow: FockState,
    pub noise: NoiseStream,
    pub d0: f64,
    d_base: f64,
    pub window_logs: Vec<f64>,
    pub window_durations: Vec<f64>,
    /// Model time, which sets the drive phase.
    pub t: f64,
    /// Time covered by recorded windows.
    pub t_elapsed: f64,
    steps: u64,
    window_steps: u64,
}

/// Centroid distance `√(ΔQ² + ΔP²)` between two states.
pub fn state_separation(a: &FockState, b: &FockState) -> f64 {
    fock::centroid(a).distance(&fock::centroid(b))
}

pub fn separation(pair: &TwinTrajectory) -> f64 {
    state_separation(&pair.fiducial, &pair.shadow)
}

/// Fiducial `|α0⟩` and a shadow shifted by `d0` along `Q`.
pub fn initialize_twins(
    alpha0: C64,
    d0: f64,
    params: &SimParams,
    seed: u64,
) -> Result<TwinTrajectory, LyapunovError> {
    if !(d0 > 0.0 && d0.is_finite()) {
        return Err(LyapunovError::InvalidSetting {
            name: "d0",
            reason: format!("{d0} must be positive"),
        });
    }
    let fiducial = fock::coherent_state(alpha0, params.dim)?;
    let shadow = fock::displace(&fiducial, C64::new(d0 / 2f64.sqrt(), 0.0))?;
    let d_base = state_separation(&fiducial, &shadow);
    Ok(TwinTrajectory {
        fiducial,
        shadow,
        noise: NoiseStream::new(seed, params.dt),
        d0,
        d_base,
        window_logs: Vec::new(),
        window_durations: Vec::new(),
        t: 0.0,
        t_elapsed: 0.0,
        steps: 0,
        window_steps: 0,
    })
}

/// Default fiducial amplitude: centroid at the right well minimum `Q = 1/β`.
pub fn default_alpha0(beta: f64) -> C64 {
    C64::new(1.0 / (2f64.sqrt() * beta), 0.0)
}

/// What one reset observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResetOutcome {
    /// Separation before the reset.
    pub d_t: f64,
    /// `ln(d_t / d_base)`.
    pub log: f64,
    /// Measured separation after re-displacement, the next baseline.
    pub d_after: f64,
}

impl TwinTrajectory {
    pub fn d_base(&self) -> f64 {
        self.d_base
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Exchanges fiducial and shadow. The separation is symmetric, so the
    /// baseline carries over.
    pub fn swap_roles(&mut self) {
        std::mem::swap(&mut self.fiducial, &mut self.shadow);
    }

    /// Advances both states by one step with the shared phase and increment.
    pub fn step(
        &mut self,
        fid_prop: &mut Propagator,
        shadow_prop: &mut Propagator,
        phi: f64,
    ) -> Result<(bool, f64), LyapunovError> {
        let dw = self.noise.next_increment();
        let a = fid_prop.step(&mut self.fiducial, phi, dw, self.t)?;
        let b = shadow_prop.step(&mut self.shadow, phi, dw, self.t)?;
        self.steps += 1;
        self.window_steps += 1;
        self.t = self.steps as f64 * fid_prop.params().dt;
        Ok((a.warn || b.warn, a.tail.max(b.tail)))
    }

    /// Logs the current window and re-displaces the shadow to distance `d0`.
    pub fn reset_shadow(&mut self, dt: f64) -> Result<ResetOutcome, LyapunovError> {
        self.reset(dt, true)
    }

    /// Reset that optionally skips the log, used while discarding transients.
    pub fn reset(&mut self, dt: f64, record: bool) -> Result<ResetOutcome, LyapunovError> {
        let pf = fock::centroid(&self.fiducial);
        let ps = fock::centroid(&self.shadow);
        let (dq, dp) = (ps.q - pf.q, ps.p - pf.p);
        let d_t = dq.hypot(dp);
        if !(d_t > 0.0 && d_t.is_finite()) {
            return Err(LyapunovError::Collapse { t: self.t, d: d_t });
        }
        let log = (d_t / self.d_base).ln();
        if record {
            let duration = self.window_steps as f64 * dt;
            self.window_logs.push(log);
            self.window_durations.push(duration);
            self.t_elapsed += duration;
        }
        self.window_steps = 0;
        let alpha = C64::new(dq, dp) * (self.d0 / (2f64.sqrt() * d_t));
        self.shadow = fock::displace(&self.fiducial, alpha)?;
        let d_after = separation(self);
        if !(d_after > 0.0) {
            return Err(LyapunovError::Collapse { t: self.t, d: d_after });
        }
        self.d_base = d_after;
        Ok(ResetOutcome { d_t, log, d_after })
    }

    /// `Σ logs / Σ durations` over the recorded windows.
    pub fn lambda(&self) -> f64 {
        if self.t_elapsed > 0.0 {
            self.window_logs.iter().sum::<f64>() / self.t_elapsed
        } else {
            0.0
        }
    }
}

/// Run-length and bookkeeping options for [`run_twin`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwinRunSettings {
    /// Total simulated time, transient included.
    pub t_end: f64,
    pub reset_period: f64,
    /// Leading time excluded from the window logs.
    pub transient: f64,
    pub alpha0: Option<(f64, f64)>,
    /// Keep every `k`-th step in the diagnostic series; `None` keeps nothing.
    pub series_stride: Option<usize>,
}

/// Transient length in drive periods when none is given.
pub const DEFAULT_TRANSIENT_PERIODS: f64 = 50.0;

impl TwinRunSettings {
    /// `periods` drive periods with one-period resets and the default transient.
    pub fn for_periods(params: &SimParams, periods: f64) -> Self {
        let period = params.drive_period();
        Self {
            t_end: periods * period,
            reset_period: period,
            transient: (DEFAULT_TRANSIENT_PERIODS * period).min(0.5 * periods * period),
            alpha0: None,
            series_stride: None,
        }
    }

    pub fn with_series(mut self, stride: usize) -> Self {
        self.series_stride = Some(stride.max(1));
        self
    }

    fn validate(&self, params: &SimParams) -> Result<(), LyapunovError> {
        let bad = |name, reason: String| Err(LyapunovError::InvalidSetting { name, reason });
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad("t_end", format!("{} must be positive", self.t_end));
        }
        if !(self.reset_period >= params.dt) {
            return bad(
                "reset_period",
                format!("{} is shorter than dt = {}", self.reset_period, params.dt),
            );
        }
        if !(self.transient >= 0.0 && self.transient < self.t_end) {
            return bad(
                "transient",
                format!("{} must lie in [0, t_end)", self.transient),
            );
        }
        Ok(())
    }
}

/// One row of the diagnostic series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesRow {
    pub t: f64,
    pub q: f64,
    pub p: f64,
    pub d_t: f64,
    pub phi: f64,
    pub tail: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinOutcome {
    pub seed: u64,
    pub lambda: f64,
    pub window_logs: Vec<f64>,
    pub window_durations: Vec<f64>,
    pub t_elapsed: f64,
    /// Steps on which either twin crossed the tail warning bound.
    pub tail_warnings: u64,
    pub max_tail: f64,
    pub controller_evaluations: u64,
    pub series: Vec<SeriesRow>,
    pub final_fiducial: FockState,
}

/// Aborted run with whatever was logged before the failure.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("seed {seed} aborted at t = {t:.4}: {error}")]
pub struct TwinFailure {
    pub seed: u64,
    pub t: f64,
    pub error: LyapunovError,
    pub window_logs: Vec<f64>,
    pub window_durations: Vec<f64>,
}

/// Integrates one twin pair from the default start and returns its Lyapunov
/// exponent.
pub fn run_twin(
    params: &SimParams,
    strategy: &ControlStrategy,
    seed: u64,
    settings: &TwinRunSettings,
) -> Result<TwinOutcome, TwinFailure> {
    let alpha0 = settings
        .alpha0
        .map(|(re, im)| C64::new(re, im))
        .unwrap_or_else(|| default_alpha0(params.beta));
    let pair = initialize_twins(alpha0, params.d0, params, seed).map_err(|error| TwinFailure {
        seed,
        t: 0.0,
        error,
        window_logs: Vec::new(),
        window_durations: Vec::new(),
    })?;
    run_pair(params, strategy, pair, settings)
}

/// Integrates an already initialized pair. `settings.alpha0` is ignored.
pub fn run_pair(
    params: &SimParams,
    strategy: &ControlStrategy,
    mut pair: TwinTrajectory,
    settings: &TwinRunSettings,
) -> Result<TwinOutcome, TwinFailure> {
    let seed = pair.noise.seed();
    let fail = |t, error, pair: Option<&TwinTrajectory>| TwinFailure {
        seed,
        t,
        error,
        window_logs: pair.map(|p| p.window_logs.clone()).unwrap_or_default(),
        window_durations: pair.map(|p| p.window_durations.clone()).unwrap_or_default(),
    };
    let setup = || -> Result<_, LyapunovError> {
        settings.validate(params)?;
        let fid = Propagator::new(*params)?;
        let controller = Controller::new(*strategy, params.dim)?;
        Ok((fid.clone(), fid, controller))
    };
    let (mut fid_prop, mut shadow_prop, mut controller) = setup().map_err(|e| fail(0.0, e, None))?;

    let dt = params.dt;
    let total = (settings.t_end / dt).round() as u64;
    let per_reset = ((settings.reset_period / dt).round() as u64).max(1);
    let transient = (settings.transient / dt).round() as u64;
    let mut tail_warnings = 0;
    let mut max_tail: f64 = 0.0;
    let mut series = Vec::new();
    let stride = settings.series_stride.map(|s| s as u64);

    for k in 0..total {
        let phi = controller.tick(&pair.fiducial, k);
        let (warn, tail) = match pair.step(&mut fid_prop, &mut shadow_prop, phi) {
            Ok(r) => r,
            Err(e) => return Err(fail(pair.t, e, Some(&pair))),
        };
        tail_warnings += warn as u64;
        max_tail = max_tail.max(tail);
        let done = k + 1;
        let at_transient_end = done == transient;
        let in_transient = done <= transient;
        let window_full = if in_transient {
            done % per_reset == 0
        } else {
            (done - transient) % per_reset == 0
        };
        if at_transient_end || window_full || done == total {
            let record = !in_transient;
            if let Err(e) = pair.reset(dt, record) {
                return Err(fail(pair.t, e, Some(&pair)));
            }
        }
        if let Some(s) = stride {
            if done % s == 0 {
                let c = fock::centroid(&pair.fiducial);
                series.push(SeriesRow {
                    t: pair.t,
                    q: c.q,
                    p: c.p,
                    d_t: separation(&pair),
                    phi,
                    tail,
                });
            }
        }
    }

    Ok(TwinOutcome {
        seed,
        lambda: pair.lambda(),
        t_elapsed: pair.t_elapsed,
        window_logs: pair.window_logs,
        window_durations: pair.window_durations,
        tail_warnings,
        max_tail,
        controller_evaluations: controller.evaluations(),
        series,
        final_fiducial: pair.fiducial,
    })
}

/// Ensemble statistics over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovEstimate {
    pub seeds: Vec<u64>,
    pub per_seed_lambda: Vec<f64>,
    pub mean: f64,
    /// Twice the standard error, `2σ/√n` with the population deviation.
    pub two_se: f64,
    /// Some seeds aborted; the statistics cover only the survivors.
    pub partial: bool,
    pub failures: Vec<String>,
}

impl LyapunovEstimate {
    pub fn from_values(seeds: Vec<u64>, values: Vec<f64>) -> Self {
        let (mean, two_se) = mean_two_se(&values);
        Self {
            seeds,
            per_seed_lambda: values,
            mean,
            two_se,
            partial: false,
            failures: Vec::new(),
        }
    }
}

/// Mean and `2σ/√n`, summed in slice order.
pub fn mean_two_se(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    if values.iter().all(|v| *v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 2.0 * var.sqrt() / n.sqrt())
}

/// Runs [`run_twin`] for every seed in parallel and reduces in seed order.
pub fn ensemble_lambda(
    params: &SimParams,
    strategy: &ControlStrategy,
    seeds: &[u64],
    settings: &TwinRunSettings,
) -> Result<(LyapunovEstimate, Vec<Result<TwinOutcome, TwinFailure>>), LyapunovError> {
    if seeds.len() < 2 {
        return Err(LyapunovError::InvalidSetting {
            name: "seeds",
            reason: format!("need at least 2 seeds, got {}", seeds.len()),
        });
    }
    let runs: Vec<_> = seeds
        .par_iter()
        .map(|&seed| run_twin(params, strategy, seed, settings))
        .collect();
    Ok((summarize(&runs), runs))
}

/// Estimate from completed runs, in the given order.
pub fn summarize(runs: &[Result<TwinOutcome, TwinFailure>]) -> LyapunovEstimate {
    let mut seeds = Vec::new();
    let mut values = Vec::new();
    let mut failures = Vec::new();
    for run in runs {
        match run {
            Ok(out) => {
                seeds.push(out.seed);
                values.push(out.lambda);
            }
            Err(f) => failures.push(f.to_string()),
        }
    }
    let mut est = LyapunovEstimate::from_values(seeds, values);
    est.partial = !failures.is_empty();
    est.failures = failures;
    est
}

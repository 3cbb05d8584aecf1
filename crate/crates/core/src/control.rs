//! Local-oscillator phase selection from quadrature peak counts.
//!
//! For each trial angle `θ_k = kπ/M` the quadrature distribution `P(x_θ)` is
//! evaluated and its strict local maxima are counted. The angle with the most
//! peaks points across the interference fringes; measuring along the fringes
//! (`φ = θ_max − π/2`) localizes the state, measuring across them
//! (`φ = θ_max`) preserves coherence.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fock::{self, FockState, QuadratureGrid, C64};

/// Sample count of the controller's quadrature grid.
pub const CONTROLLER_GRID_POINTS: usize = 512;

/// Default density floor below which turning points are ignored. Round-off in
/// the far tails of `P(x_θ)` (values around 1e-80 at `N = 64`) otherwise adds
/// spurious peaks.
pub const DEFAULT_PEAK_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("fixed phase {0} is outside [0, π)")]
    PhaseOutOfRange(f64),
    #[error("grid angle count {0} is below 2")]
    TooFewAngles(usize),
    #[error("update interval must be at least 1")]
    ZeroInterval,
    #[error("peak floor {0} must be non-negative")]
    NegativeFloor(f64),
    #[error("unrecognized strategy `{0}` (expected fixed:ANGLE, adaptive-parallel or adaptive-perpendicular)")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "phi", rename_all = "kebab-case")]
pub enum StrategyKind {
    FixedPhase(f64),
    /// Measure parallel to the fringes; enhances chaos.
    AdaptiveParallel,
    /// Measure perpendicular to the fringes; suppresses chaos.
    AdaptivePerpendicular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlStrategy {
    pub kind: StrategyKind,
    /// Number of trial angles `M` spread over `[0, π)`.
    pub grid_angles: usize,
    /// Integration steps between controller evaluations.
    pub update_interval: usize,
    /// Minimum density for a turning point to count as a peak.
    #[serde(default = "default_peak_floor")]
    pub peak_floor: f64,
}

fn default_peak_floor() -> f64 {
    DEFAULT_PEAK_FLOOR
}

impl ControlStrategy {
    pub fn fixed(phi: f64) -> Self {
        Self {
            kind: StrategyKind::FixedPhase(phi),
            grid_angles: 8,
            update_interval: 1,
            peak_floor: DEFAULT_PEAK_FLOOR,
        }
    }

    /// Eight trial angles suffice when enhancing chaos.
    pub fn adaptive_parallel() -> Self {
        Self {
            kind: StrategyKind::AdaptiveParallel,
            grid_angles: 8,
            update_interval: 1,
            peak_floor: DEFAULT_PEAK_FLOOR,
        }
    }

    /// Suppression needs the finer 32-angle grid.
    pub fn adaptive_perpendicular() -> Self {
        Self {
            kind: StrategyKind::AdaptivePerpendicular,
            grid_angles: 32,
            update_interval: 1,
            peak_floor: DEFAULT_PEAK_FLOOR,
        }
    }

    pub fn with_update_interval(mut self, interval: usize) -> Self {
        self.update_interval = interval;
        self
    }

    pub fn with_grid_angles(mut self, m: usize) -> Self {
        self.grid_angles = m;
        self
    }

    pub fn with_peak_floor(mut self, floor: f64) -> Self {
        self.peak_floor = floor;
        self
    }

    pub fn is_adaptive(&self) -> bool {
        !matches!(self.kind, StrategyKind::FixedPhase(_))
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if let StrategyKind::FixedPhase(phi) = self.kind {
            if !(0.0..PI).contains(&phi) {
                return Err(ControlError::PhaseOutOfRange(phi));
            }
        }
        if self.grid_angles < 2 {
            return Err(ControlError::TooFewAngles(self.grid_angles));
        }
        if self.update_interval == 0 {
            return Err(ControlError::ZeroInterval);
        }
        if !(self.peak_floor >= 0.0) {
            return Err(ControlError::NegativeFloor(self.peak_floor));
        }
        Ok(())
    }

    /// Parses `fixed:ANGLE`, `adaptive-parallel` or `adaptive-perpendicular`.
    ///
    /// `ANGLE` is radians, or a multiple of π written `pi/2`, `0.5pi`, `pi`.
    pub fn parse(text: &str) -> Result<Self, ControlError> {
        let text = text.trim();
        match text {
            "adaptive-parallel" => Ok(Self::adaptive_parallel()),
            "adaptive-perpendicular" => Ok(Self::adaptive_perpendicular()),
            _ => {
                let angle = text
                    .strip_prefix("fixed:")
                    .and_then(parse_angle)
                    .ok_or_else(|| ControlError::UnknownStrategy(text.to_string()))?;
                let s = Self::fixed(angle);
                s.validate()?;
                Ok(s)
            }
        }
    }

    /// Stable identifier used in file names and summaries.
    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::FixedPhase(phi) => format!("fixed:{}", format_angle(phi)),
            StrategyKind::AdaptiveParallel => "adaptive-parallel".to_string(),
            StrategyKind::AdaptivePerpendicular => "adaptive-perpendicular".to_string(),
        }
    }
}

impl fmt::Display for ControlStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn parse_angle(text: &str) -> Option<f64> {
    let t = text.trim().to_ascii_lowercase();
    if let Some(idx) = t.find("pi") {
        let (pre, post) = (&t[..idx], &t[idx + 2..]);
        let factor = match pre.trim_end_matches('*') {
            "" => 1.0,
            p => p.parse::<f64>().ok()?,
        };
        let divisor = match post {
            "" => 1.0,
            p => p.strip_prefix('/')?.parse::<f64>().ok()?,
        };
        return Some(factor * PI / divisor);
    }
    t.parse().ok()
}

fn format_angle(phi: f64) -> String {
    if phi == 0.0 {
        return "0".into();
    }
    for denom in [1u32, 2, 3, 4, 6, 8, 16, 32] {
        let k = phi * denom as f64 / PI;
        if (k - k.round()).abs() < 1e-12 {
            let k = k.round() as i64;
            return match (k, denom) {
                (1, 1) => "pi".into(),
                (k, 1) => format!("{k}pi"),
                (1, d) => format!("pi/{d}"),
                (k, d) => format!("{k}pi/{d}"),
            };
        }
    }
    format!("{phi}")
}

/// Result of a peak-count scan over trial angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeEstimate {
    pub theta_max: f64,
    pub peak_counts: Vec<usize>,
}

impl FringeEstimate {
    fn from_counts(peak_counts: Vec<usize>) -> Self {
        let m = peak_counts.len();
        // first maximum wins ties
        let (k_max, _) = peak_counts
            .iter()
            .enumerate()
            .fold((0, 0), |best, (k, &c)| if c > best.1 { (k, c) } else { best });
        Self {
            theta_max: k_max as f64 * PI / m as f64,
            peak_counts,
        }
    }

    pub fn angles(&self) -> Vec<f64> {
        let m = self.peak_counts.len();
        (0..m).map(|k| k as f64 * PI / m as f64).collect()
    }
}

/// Number of local maxima found from sign changes of the forward difference.
///
/// A flat top (equal neighbouring samples) counts as a single peak.
pub fn count_peaks(pdf: &[f64]) -> usize {
    count_peaks_above(pdf, 0.0)
}

/// Local maxima whose value also exceeds `floor`.
pub fn count_peaks_above(pdf: &[f64], floor: f64) -> usize {
    let mut peaks = 0;
    let mut rising = false;
    for j in 1..pdf.len() {
        let d = pdf[j] - pdf[j - 1];
        if d > 0.0 {
            rising = true;
        } else if d < 0.0 {
            if rising && pdf[j - 1] > floor {
                peaks += 1;
            }
            rising = false;
        }
    }
    peaks
}

/// Reference scan: evaluates each `P(x_θ)` directly on `grid` with the
/// default peak floor.
pub fn find_theta_max(state: &FockState, m: usize, grid: &QuadratureGrid) -> FringeEstimate {
    find_theta_max_with_floor(state, m, grid, DEFAULT_PEAK_FLOOR)
}

pub fn find_theta_max_with_floor(
    state: &FockState,
    m: usize,
    grid: &QuadratureGrid,
    floor: f64,
) -> FringeEstimate {
    let table = fock::quadrature_wavefunctions(grid, state.dim());
    let counts = (0..m)
        .map(|k| {
            let theta = k as f64 * PI / m as f64;
            count_peaks_above(&fock::quadrature_pdf_with(state, theta, &table), floor)
        })
        .collect();
    FringeEstimate::from_counts(counts)
}

/// Local-oscillator phase for a strategy given the latest estimate.
pub fn choose_phase(strategy: &ControlStrategy, estimate: Option<&FringeEstimate>) -> f64 {
    match (strategy.kind, estimate) {
        (StrategyKind::FixedPhase(phi), _) => phi,
        (StrategyKind::AdaptiveParallel, Some(e)) => (e.theta_max - PI / 2.0).rem_euclid(PI),
        (StrategyKind::AdaptivePerpendicular, Some(e)) => e.theta_max,
        (_, None) => 0.0,
    }
}

/// Batched peak-count scan for a fixed basis size, angle count and symmetric grid.
///
/// For a grid point `x`, the amplitudes at every trial angle form one discrete
/// Fourier transform of length `2M` over the folded sequence
/// `b_r = Σ_{n ≡ r (mod 2M)} C_n ψ_n(x)`. Bins `k < M` give `⟨x_{θ_k}|ψ⟩` and
/// bins `k + M` give `⟨−x_{θ_k}|ψ⟩` by Hermite–Gauss parity, so only the
/// non-negative half of the grid is tabulated.
pub struct FringeScanner {
    dim: usize,
    angles: usize,
    count: usize,
    /// indices into the full grid for the non-negative half
    half: Vec<usize>,
    /// ψ_n on the half grid, stored `[j][n]`
    table: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    buffer: Vec<C64>,
    scratch: Vec<C64>,
    floor: f64,
    // per-angle streaming peak counter state
    prev: Vec<f64>,
    rising: Vec<bool>,
    peaks: Vec<usize>,
}

impl fmt::Debug for FringeScanner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FringeScanner")
            .field("dim", &self.dim)
            .field("angles", &self.angles)
            .field("count", &self.count)
            .finish()
    }
}

impl Clone for FringeScanner {
    fn clone(&self) -> Self {
        Self::new(self.dim, self.angles, self.count).with_floor(self.floor)
    }
}

impl FringeScanner {
    /// Scanner on the controller grid `±(√(2N)+5)` with `count` points.
    pub fn new(dim: usize, angles: usize, count: usize) -> Self {
        let grid = QuadratureGrid::covering(dim, count);
        let points = grid.points();
        let half: Vec<usize> = (count / 2..count).collect();
        let half_points: Vec<f64> = half.iter().map(|&j| points[j].abs()).collect();
        let herm = fock::hermite_functions_at(&half_points, dim);
        let mut table = vec![0.0; half.len() * dim];
        for (jj, _) in half.iter().enumerate() {
            for n in 0..dim {
                table[jj * dim + n] = herm.get(n, jj);
            }
        }
        let len = 2 * angles;
        let fft = FftPlanner::new().plan_fft_forward(len);
        let scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        Self {
            dim,
            angles,
            count,
            buffer: vec![C64::new(0.0, 0.0); half.len() * len],
            half,
            table,
            fft,
            scratch,
            floor: DEFAULT_PEAK_FLOOR,
            prev: vec![0.0; angles],
            rising: vec![false; angles],
            peaks: vec![0; angles],
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn for_strategy(dim: usize, strategy: &ControlStrategy) -> Self {
        Self::new(dim, strategy.grid_angles, CONTROLLER_GRID_POINTS)
            .with_floor(strategy.peak_floor)
    }

    pub fn grid(&self) -> QuadratureGrid {
        QuadratureGrid::covering(self.dim, self.count)
    }

    pub fn angles(&self) -> usize {
        self.angles
    }

    /// Amplitudes of grid point `j` from the last scan, all angles.
    #[inline]
    fn point_amplitudes(&self, j: usize) -> &[C64] {
        let len = 2 * self.angles;
        let start = self.half[0];
        let (jj, off) = if j >= start {
            (j - start, 0)
        } else {
            (self.count - 1 - j - start, self.angles)
        };
        &self.buffer[jj * len + off..jj * len + off + self.angles]
    }

    /// Quadrature density from the last scan at angle `kπ/M`.
    pub fn last_pdf(&self, k: usize) -> Vec<f64> {
        (0..self.count)
            .map(|j| self.point_amplitudes(j)[k].norm_sqr())
            .collect()
    }

    /// Peak counts for all angles. Points are visited once in grid order and
    /// every angle advances its own [`count_peaks_above`] state machine, so
    /// the densities are never stored.
    pub fn scan(&mut self, state: &FockState) -> FringeEstimate {
        assert_eq!(state.dim(), self.dim, "scanner dimension mismatch");
        let len = 2 * self.angles;
        let coeffs = state.coeffs();
        self.buffer.iter_mut().for_each(|b| *b = C64::new(0.0, 0.0));
        for (jj, chunk) in self.buffer.chunks_exact_mut(len).enumerate() {
            let row = &self.table[jj * self.dim..(jj + 1) * self.dim];
            for (cs, hs) in coeffs.chunks(len).zip(row.chunks(len)) {
                for ((b, c), h) in chunk.iter_mut().zip(cs).zip(hs) {
                    *b += c * h;
                }
            }
        }
        self.fft
            .process_with_scratch(&mut self.buffer, &mut self.scratch);

        let mut prev = std::mem::take(&mut self.prev);
        let mut rising = std::mem::take(&mut self.rising);
        let mut peaks = std::mem::take(&mut self.peaks);
        for (p, a) in prev.iter_mut().zip(self.point_amplitudes(0)) {
            *p = a.norm_sqr();
        }
        rising.iter_mut().for_each(|r| *r = false);
        peaks.iter_mut().for_each(|c| *c = 0);
        let floor = self.floor;
        for j in 1..self.count {
            let amps = self.point_amplitudes(j);
            for k in 0..amps.len() {
                let v = amps[k].norm_sqr();
                let d = v - prev[k];
                if d > 0.0 {
                    rising[k] = true;
                } else if d < 0.0 {
                    if rising[k] && prev[k] > floor {
                        peaks[k] += 1;
                    }
                    rising[k] = false;
                }
                prev[k] = v;
            }
        }
        let estimate = FringeEstimate::from_counts(peaks.clone());
        self.prev = prev;
        self.rising = rising;
        self.peaks = peaks;
        estimate
    }
}

/// Per-trajectory controller holding the cached phase.
#[derive(Debug, Clone)]
pub struct Controller {
    strategy: ControlStrategy,
    scanner: Option<FringeScanner>,
    phi: f64,
    last: Option<FringeEstimate>,
    evaluations: u64,
}

impl Controller {
    pub fn new(strategy: ControlStrategy, dim: usize) -> Result<Self, ControlError> {
        strategy.validate()?;
        let scanner = strategy
            .is_adaptive()
            .then(|| FringeScanner::for_strategy(dim, &strategy));
        Ok(Self {
            strategy,
            scanner,
            phi: choose_phase(&strategy, None),
            last: None,
            evaluations: 0,
        })
    }

    pub fn strategy(&self) -> &ControlStrategy {
        &self.strategy
    }

    pub fn phase(&self) -> f64 {
        self.phi
    }

    pub fn last_estimate(&self) -> Option<&FringeEstimate> {
        self.last.as_ref()
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    /// Returns the phase to use for step `step_index`, rescanning every
    /// `update_interval` steps.
    pub fn tick(&mut self, state: &FockState, step_index: u64) -> f64 {
        if step_index % self.strategy.update_interval as u64 != 0 {
            return self.phi;
        }
        if let Some(scanner) = self.scanner.as_mut() {
            let estimate = scanner.scan(state);
            self.phi = choose_phase(&self.strategy, Some(&estimate));
            self.last = Some(estimate);
            self.evaluations += 1;
        }
        self.phi
    }
}

/// Stateless form of [`Controller::tick`]; `cached` is the phase from the
/// previous evaluation.
pub fn controller_tick(
    state: &FockState,
    strategy: &ControlStrategy,
    step_index: u64,
    cached: f64,
) -> f64 {
    if step_index % strategy.update_interval as u64 != 0 {
        return cached;
    }
    match strategy.kind {
        StrategyKind::FixedPhase(phi) => phi,
        _ => {
            let mut scanner = FringeScanner::for_strategy(state.dim(), strategy);
            choose_phase(strategy, Some(&scanner.scan(state)))
        }
    }
}

//! Conditional-state propagation under homodyne monitoring.
//!
//! The Hamiltonian is
//! `H = P²/2 + β²Q⁴/4 − Q²/2 + (Γ/2)(QP + PQ) − (g/β) Q cos(Ωt)` and the
//! output channel is `L = √(2Γ) a`. Monitoring the quadrature
//! `X_φ = (e^{−iφ}a + e^{iφ}a†)/√2` uses `dξ = e^{−iφ} dW` in the Ito SSE
//!
//! ```text
//! dψ = (−iH − L†L/2 + ⟨L†⟩L − ⟨L†⟩⟨L⟩/2) ψ dt + (L − ⟨L⟩) ψ dξ
//! ```
//!
//! In the number basis every term is banded (offsets 0, ±1, ±2, ±4), so a step
//! costs `O(N)`.

use std::f64::consts::{PI, SQRT_2};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fock::{self, DensityMatrix, FockError, FockState, C64, TAIL_ABORT, TAIL_WARN};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SseError {
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("truncation abort at t = {t:.6}: tail weight {tail:.3e}")]
    Truncation { t: f64, tail: f64 },
    #[error("midpoint iteration did not converge at t = {t:.6} (residual {residual:.3e})")]
    MidpointDiverged { t: f64, residual: f64 },
    #[error("state became non-finite at t = {t:.6}")]
    NonFinite { t: f64 },
    #[error("master-equation trace drifted to {trace:.12} at t = {t:.6}")]
    TraceDrift { t: f64, trace: f64 },
    #[error(transparent)]
    Fock(#[from] FockError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    ItoEuler,
    StratonovichMidpoint,
}

impl Scheme {
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "ito" | "ito-euler" => Some(Scheme::ItoEuler),
            "stratonovich" | "stratonovich-midpoint" => Some(Scheme::StratonovichMidpoint),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::ItoEuler => "ito-euler",
            Scheme::StratonovichMidpoint => "stratonovich-midpoint",
        }
    }
}

/// Dimensionless model and integration parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub beta: f64,
    pub gamma: f64,
    pub g: f64,
    pub omega: f64,
    /// Fock-space dimension `N`.
    pub dim: usize,
    pub dt: f64,
    pub d0: f64,
    pub scheme: Scheme,
}

impl SimParams {
    /// `Γ = 0.1`, `g = 0.3`, `Ω = 1`, `N = 64`, `dt = 1e-3`, `d0 = 1e-3`.
    pub fn canonical(beta: f64) -> Self {
        Self {
            beta,
            gamma: 0.1,
            g: 0.3,
            omega: 1.0,
            dim: 64,
            dt: 1e-3,
            d0: 1e-3,
            scheme: Scheme::ItoEuler,
        }
    }

    pub fn drive_period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    pub fn validate(&self) -> Result<(), SseError> {
        fn bad(name: &'static str, reason: impl Into<String>) -> Result<(), SseError> {
            Err(SseError::InvalidParameter {
                name,
                reason: reason.into(),
            })
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("{} must be positive", self.beta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", format!("{} must be non-negative", self.gamma));
        }
        if !self.g.is_finite() {
            return bad("g", "must be finite");
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return bad("omega", format!("{} must be positive", self.omega));
        }
        if self.dim < 16 {
            return bad("dim", format!("{} is below 16", self.dim));
        }
        if !(self.dt > 0.0) || self.dt * self.omega > 1e-2 * 2.0 * PI {
            return bad(
                "dt",
                format!("{} violates 0 < dt·Ω ≤ 0.02π", self.dt),
            );
        }
        if !(self.d0 > 0.0 && self.d0.is_finite()) {
            return bad("d0", format!("{} must be positive", self.d0));
        }
        Ok(())
    }
}

/// Banded number-basis coefficients of the Hamiltonian and the measurement terms.
///
/// Only the upper bands are stored; the Hamiltonian is Hermitian, so
/// `H_{n+k,n} = conj(H_{n,n+k})`.
#[derive(Debug, Clone)]
pub struct BandCoefficients {
    dim: usize,
    /// `H_{n,n} = (β²/16)(6n² + 6n + 3)`
    pub diag: Vec<f64>,
    /// `H_{n,n+2} = √((n+1)(n+2)) [(β²/16)(4n+6) − (1+iΓ)/2]`
    pub upper2: Vec<C64>,
    /// `H_{n,n+4} = (β²/16) √((n+1)(n+2)(n+3)(n+4))`
    pub upper4: Vec<f64>,
    /// `H_{n,n+1} / cos(Ωt) = −g/(√2 β) √(n+1)`
    pub drive_upper1: Vec<f64>,
    /// `√(n+1)`, the matrix element of `a` from `n+1` to `n`
    pub sqrt_next: Vec<f64>,
    /// `√((n+1)(n+2))`, the matrix element of `a²`
    pub sqrt_next2: Vec<f64>,
    gamma: f64,
    omega: f64,
}

/// Precomputes the static band tables for `N` levels.
pub fn hamiltonian_band_coeffs(dim: usize, params: &SimParams) -> BandCoefficients {
    let q = params.beta * params.beta / 16.0;
    let gamma = params.gamma;
    let drive = -params.g / (SQRT_2 * params.beta);
    let nf = |n: usize| n as f64;
    let diag = (0..dim)
        .map(|n| q * (6.0 * nf(n) * nf(n) + 6.0 * nf(n) + 3.0))
        .collect();
    let upper2 = (0..dim.saturating_sub(2))
        .map(|n| {
            let s = ((nf(n) + 1.0) * (nf(n) + 2.0)).sqrt();
            C64::new(q * (4.0 * nf(n) + 6.0) - 0.5, -0.5 * gamma) * s
        })
        .collect();
    let upper4 = (0..dim.saturating_sub(4))
        .map(|n| q * ((nf(n) + 1.0) * (nf(n) + 2.0) * (nf(n) + 3.0) * (nf(n) + 4.0)).sqrt())
        .collect();
    let sqrt_next: Vec<f64> = (0..dim.saturating_sub(1)).map(|n| (nf(n) + 1.0).sqrt()).collect();
    let drive_upper1 = sqrt_next.iter().map(|s| drive * s).collect();
    let sqrt_next2 = (0..dim.saturating_sub(2))
        .map(|n| ((nf(n) + 1.0) * (nf(n) + 2.0)).sqrt())
        .collect();
    BandCoefficients {
        dim,
        diag,
        upper2,
        upper4,
        drive_upper1,
        sqrt_next,
        sqrt_next2,
        gamma,
        omega: params.omega,
    }
}

impl BandCoefficients {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Matrix element `H_{m,n}` at time `t`.
    pub fn element(&self, m: usize, n: usize, t: f64) -> C64 {
        let cos = (self.omega * t).cos();
        let (lo, hi, flip) = if m <= n { (m, n, false) } else { (n, m, true) };
        let v = match hi - lo {
            0 => C64::new(self.diag[lo], 0.0),
            1 => C64::new(self.drive_upper1[lo] * cos, 0.0),
            2 => self.upper2[lo],
            4 => C64::new(self.upper4[lo], 0.0),
            _ => ZERO,
        };
        if flip {
            v.conj()
        } else {
            v
        }
    }

    /// Row-major dense `H(t)`.
    pub fn dense_hamiltonian(&self, t: f64) -> Vec<C64> {
        let n = self.dim;
        let mut h = vec![ZERO; n * n];
        for m in 0..n {
            for k in m.saturating_sub(4)..(m + 5).min(n) {
                h[m * n + k] = self.element(m, k, t);
            }
        }
        h
    }

    /// `out = H(t) ψ`.
    pub fn apply_hamiltonian(&self, psi: &[C64], t: f64, out: &mut [C64]) {
        let cos = (self.omega * t).cos();
        let n = self.dim;
        if n < 9 {
            for (m, o) in out.iter_mut().enumerate().take(n) {
                *o = self.row_checked(psi, m, cos);
            }
            return;
        }
        for m in (0..4).chain(n - 4..n) {
            out[m] = self.row_checked(psi, m, cos);
        }
        for m in 4..n - 4 {
            out[m] = self.row_interior(psi, m, cos);
        }
    }

    #[inline(always)]
    fn row_interior(&self, psi: &[C64], m: usize, cos: f64) -> C64 {
        let u2 = self.upper2[m];
        let l2 = self.upper2[m - 2].conj();
        psi[m] * self.diag[m]
            + (psi[m + 1] * self.drive_upper1[m] + psi[m - 1] * self.drive_upper1[m - 1]) * cos
            + psi[m + 2] * u2
            + psi[m - 2] * l2
            + psi[m + 4] * self.upper4[m]
            + psi[m - 4] * self.upper4[m - 4]
    }

    fn row_checked(&self, psi: &[C64], m: usize, cos: f64) -> C64 {
        let n = self.dim;
        let mut acc = psi[m] * self.diag[m];
        if m + 1 < n {
            acc += psi[m + 1] * (self.drive_upper1[m] * cos);
        }
        if m >= 1 {
            acc += psi[m - 1] * (self.drive_upper1[m - 1] * cos);
        }
        if m + 2 < n {
            acc += psi[m + 2] * self.upper2[m];
        }
        if m >= 2 {
            acc += psi[m - 2] * self.upper2[m - 2].conj();
        }
        if m + 4 < n {
            acc += psi[m + 4] * self.upper4[m];
        }
        if m >= 4 {
            acc += psi[m - 4] * self.upper4[m - 4];
        }
        acc
    }
}

/// Deterministic Gaussian Wiener increments with variance `dt`.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    rng: ChaCha12Rng,
    sqrt_dt: f64,
    drawn: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, dt: f64) -> Self {
        Self {
            seed,
            rng: ChaCha12Rng::seed_from_u64(seed),
            sqrt_dt: dt.sqrt(),
            drawn: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn drawn(&self) -> u64 {
        self.drawn
    }

    pub fn next_increment(&mut self) -> f64 {
        self.drawn += 1;
        let z: f64 = StandardNormal.sample(&mut self.rng);
        z * self.sqrt_dt
    }
}

impl Iterator for NoiseStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.next_increment())
    }
}

/// `⟨X_φ⟩ = √2 Re(e^{−iφ}⟨a⟩)`.
pub fn quadrature_mean(mean_a: C64, phi: f64) -> f64 {
    SQRT_2 * (C64::from_polar(1.0, -phi) * mean_a).re
}

/// One homodyne increment `gain·⟨X_φ⟩·dt + dW`.
pub fn record_homodyne(state: &FockState, phi: f64, dw: f64, params: &SimParams, gain: f64) -> f64 {
    gain * quadrature_mean(fock::expect_annihilation(state), phi) * params.dt + dw
}

/// Measurement increments `I·dt`; diagnostic only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HomodyneRecord {
    pub gain: f64,
    pub increments: Vec<f64>,
}

impl HomodyneRecord {
    /// Uses the default gain `√Γ`.
    pub fn new(params: &SimParams) -> Self {
        Self {
            gain: params.gamma.sqrt(),
            increments: Vec::new(),
        }
    }

    pub fn push(&mut self, mean_a: C64, phi: f64, dw: f64, dt: f64) {
        self.increments
            .push(self.gain * quadrature_mean(mean_a, phi) * dt + dw);
    }
}

/// Diagnostics produced by one propagation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// `⟨a⟩` of the input state, shared by drift, noise and record terms.
    pub mean_a: C64,
    /// Squared norm before renormalization.
    pub norm_before: f64,
    pub tail: f64,
    /// Tail weight crossed the validity bound `1e-4`.
    pub warn: bool,
}

/// Stepper owning band tables and scratch space for one trajectory.
#[derive(Debug, Clone)]
pub struct Propagator {
    params: SimParams,
    bands: BandCoefficients,
    h_psi: Vec<C64>,
    next: Vec<C64>,
    mid: Vec<C64>,
    prev_iter: Vec<C64>,
}

impl Propagator {
    pub fn new(params: SimParams) -> Result<Self, SseError> {
        params.validate()?;
        let bands = hamiltonian_band_coeffs(params.dim, &params);
        let n = params.dim;
        Ok(Self {
            params,
            bands,
            h_psi: vec![ZERO; n],
            next: vec![ZERO; n],
            mid: vec![ZERO; n],
            prev_iter: vec![ZERO; n],
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn bands(&self) -> &BandCoefficients {
        &self.bands
    }

    /// Advances by one `dt` with the configured scheme.
    pub fn step(
        &mut self,
        state: &mut FockState,
        phi: f64,
        dw: f64,
        t: f64,
    ) -> Result<StepReport, SseError> {
        match self.params.scheme {
            Scheme::ItoEuler => self.step_ito(state, phi, dw, t),
            Scheme::StratonovichMidpoint => self.step_stratonovich(state, phi, dw, t),
        }
    }

    /// Ito step: Euler–Maruyama in the noise, classical RK4 in the drift, then
    /// renormalized.
    ///
    /// The drift `−iH − Γa†a + 2Γ⟨a⟩*a − Γ|⟨a⟩|²` is linear once `⟨a⟩` is frozen
    /// at the start of the step. Plain Euler on it is unstable here: `H` has
    /// eigenvalues of order a few hundred at `N = 64`, and each step would
    /// amplify the top levels by `1 + (ω dt)²`.
    pub fn step_ito(
        &mut self,
        state: &mut FockState,
        phi: f64,
        dw: f64,
        t: f64,
    ) -> Result<StepReport, SseError> {
        self.step_ito_with_dt(state, phi, dw, t, self.params.dt)
    }

    pub fn step_ito_with_dt(
        &mut self,
        state: &mut FockState,
        phi: f64,
        dw: f64,
        t: f64,
        dt: f64,
    ) -> Result<StepReport, SseError> {
        let psi = state.coeffs();
        let n = psi.len();
        debug_assert_eq!(n, self.bands.dim);
        let mean_a = fock::expect_annihilation_raw(psi);

        // RK4 on dψ/dt = Dψ, accumulated into `next`
        let stages = [(0.0, 1.0), (0.5, 2.0), (0.5, 2.0), (1.0, 1.0)];
        self.next.copy_from_slice(psi);
        self.mid.copy_from_slice(psi);
        for (i, &(c, w)) in stages.iter().enumerate() {
            let eval = std::mem::take(&mut self.mid);
            let mut k = std::mem::take(&mut self.prev_iter);
            self.ito_drift(&eval, mean_a, t + c * dt, &mut k);
            let scale = w * dt / 6.0;
            for (x, ki) in self.next.iter_mut().zip(&k) {
                *x += ki * scale;
            }
            let mut eval = eval;
            if let Some(&(c_next, _)) = stages.get(i + 1) {
                for ((e, p), ki) in eval.iter_mut().zip(psi).zip(&k) {
                    *e = p + ki * (c_next * dt);
                }
            }
            self.mid = eval;
            self.prev_iter = k;
        }

        // + √(2Γ) e^{−iφ} (aψ − ⟨a⟩ψ) dW
        let noise = C64::from_polar((2.0 * self.bands.gamma).sqrt() * dw, -phi);
        let noise_const = noise * mean_a;
        for m in 0..n {
            let a_psi = if m + 1 < n {
                psi[m + 1] * self.bands.sqrt_next[m]
            } else {
                ZERO
            };
            self.next[m] += noise * a_psi - noise_const * psi[m];
        }
        self.commit(state, mean_a, t)
    }

    /// `out = [−iH(t) − Γn + 2Γ⟨a⟩*a − Γ|⟨a⟩|²] ψ`.
    fn ito_drift(&mut self, psi: &[C64], mean_a: C64, t: f64, out: &mut [C64]) {
        let n = psi.len();
        let gamma = self.bands.gamma;
        self.bands.apply_hamiltonian(psi, t, &mut self.h_psi);
        let lindblad_a = 2.0 * gamma * mean_a.conj();
        let constant = -gamma * mean_a.norm_sqr();
        let sqrt_next = &self.bands.sqrt_next;
        for m in 0..n - 1 {
            let h = self.h_psi[m];
            out[m] = C64::new(h.im, -h.re)
                + psi[m] * (constant - gamma * m as f64)
                + psi[m + 1] * (sqrt_next[m] * lindblad_a);
        }
        let h = self.h_psi[n - 1];
        out[n - 1] = C64::new(h.im, -h.re) + psi[n - 1] * (constant - gamma * (n - 1) as f64);
    }

    /// Semi-implicit midpoint step of the Stratonovich form
    ///
    /// ```text
    /// dψ = [−iH − Γa†a − Γe^{−2iφ}a² + 2Γ(⟨a⟩* + ⟨a⟩e^{−2iφ}) a] ψ dt
    ///      + √(2Γ) e^{−iφ} a ψ ∘ dW
    /// ```
    ///
    /// with `⟨a⟩` and the drive taken at the midpoint. The iteration is a fixed
    /// point on the end state, capped at ten sweeps.
    pub fn step_stratonovich(
        &mut self,
        state: &mut FockState,
        phi: f64,
        dw: f64,
        t: f64,
    ) -> Result<StepReport, SseError> {
        const MAX_ITER: usize = 10;
        const TOL: f64 = 1e-8;
        let dt = self.params.dt;
        let t_mid = t + 0.5 * dt;
        let mean_start = fock::expect_annihilation_raw(state.coeffs());
        let psi0: Vec<C64> = state.coeffs().to_vec();
        self.mid.copy_from_slice(&psi0);
        // predictor from the start state
        self.strat_update(&psi0, phi, dw, t, dt);
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_ITER {
            self.prev_iter.copy_from_slice(&self.next);
            for ((m, a), b) in self.mid.iter_mut().zip(&psi0).zip(&self.next) {
                *m = (a + b) * 0.5;
            }
            let mid = std::mem::take(&mut self.mid);
            self.strat_update_from(&psi0, &mid, phi, dw, t_mid, dt);
            self.mid = mid;
            residual = self
                .next
                .iter()
                .zip(&self.prev_iter)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            if residual < TOL {
                break;
            }
        }
        if !(residual < TOL) {
            return Err(SseError::MidpointDiverged { t, residual });
        }
        self.commit(state, mean_start, t)
    }

    fn strat_update(&mut self, psi0: &[C64], phi: f64, dw: f64, t: f64, dt: f64) {
        let base = psi0.to_vec();
        self.strat_update_from(psi0, &base, phi, dw, t, dt);
    }

    /// `next = ψ0 + f(eval)·dt + g(eval)·dW`.
    fn strat_update_from(
        &mut self,
        psi0: &[C64],
        eval: &[C64],
        phi: f64,
        dw: f64,
        t: f64,
        dt: f64,
    ) {
        let n = eval.len();
        let gamma = self.bands.gamma;
        let norm: f64 = eval.iter().map(|c| c.norm_sqr()).sum();
        let mean_a = fock::expect_annihilation_raw(eval) / norm;
        self.bands.apply_hamiltonian(eval, t, &mut self.h_psi);
        let rot2 = C64::from_polar(1.0, -2.0 * phi);
        let a2_coef = -gamma * rot2 * dt;
        let a_coef = 2.0 * gamma * (mean_a.conj() + mean_a * rot2) * dt
            + C64::from_polar((2.0 * gamma).sqrt() * dw, -phi);
        for m in 0..n {
            let a_psi = if m + 1 < n {
                eval[m + 1] * self.bands.sqrt_next[m]
            } else {
                ZERO
            };
            let a2_psi = if m + 2 < n {
                eval[m + 2] * self.bands.sqrt_next2[m]
            } else {
                ZERO
            };
            let h = self.h_psi[m];
            let minus_i_h = C64::new(h.im, -h.re);
            self.next[m] = psi0[m] + (minus_i_h - eval[m] * (gamma * m as f64)) * dt
                + a2_psi * a2_coef
                + a_psi * a_coef;
        }
    }

    fn commit(&mut self, state: &mut FockState, mean_a: C64, t: f64) -> Result<StepReport, SseError> {
        let norm_before: f64 = self.next.iter().map(|c| c.norm_sqr()).sum();
        if !norm_before.is_finite() || norm_before <= 0.0 {
            return Err(SseError::NonFinite { t });
        }
        let inv = 1.0 / norm_before.sqrt();
        let out = state.coeffs_mut();
        for (o, x) in out.iter_mut().zip(&self.next) {
            *o = x * inv;
        }
        let tail = fock::tail_weight(state);
        if tail >= TAIL_ABORT {
            return Err(SseError::Truncation { t, tail });
        }
        Ok(StepReport {
            mean_a,
            norm_before,
            tail,
            warn: tail >= TAIL_WARN,
        })
    }
}

/// Single fixed-phase trajectory advanced `steps` times from `t0`.
pub fn evolve_fixed_phase(
    propagator: &mut Propagator,
    state: &mut FockState,
    phi: f64,
    noise: &mut NoiseStream,
    t0: f64,
    steps: usize,
) -> Result<usize, SseError> {
    let dt = propagator.params().dt;
    let mut warnings = 0;
    for k in 0..steps {
        let dw = noise.next_increment();
        let report = propagator.step(state, phi, dw, t0 + k as f64 * dt)?;
        warnings += report.warn as usize;
    }
    Ok(warnings)
}

/// Dense Lindblad integrator used as a reference for trajectory ensembles.
#[derive(Debug, Clone)]
pub struct MasterEquation {
    params: SimParams,
    bands: BandCoefficients,
    include_hamiltonian: bool,
}

/// Largest basis accepted by the dense integrator.
pub const ME_MAX_DIM: usize = 40;

impl MasterEquation {
    pub fn new(params: SimParams) -> Result<Self, SseError> {
        params.validate()?;
        if params.dim > ME_MAX_DIM {
            return Err(SseError::InvalidParameter {
                name: "dim",
                reason: format!("{} exceeds the dense limit {ME_MAX_DIM}", params.dim),
            });
        }
        Ok(Self {
            bands: hamiltonian_band_coeffs(params.dim, &params),
            params,
            include_hamiltonian: true,
        })
    }

    /// Drops `H` entirely, leaving pure damping.
    pub fn without_hamiltonian(mut self) -> Self {
        self.include_hamiltonian = false;
        self
    }

    /// `dρ/dt = −i[H, ρ] + LρL† − ½{L†L, ρ}` with `L = √(2Γ) a`.
    fn rhs(&self, rho: &[C64], t: f64, out: &mut [C64], scratch: &mut [C64]) {
        let n = self.params.dim;
        let gamma = self.bands.gamma;
        if self.include_hamiltonian {
            // scratch = Hρ, column by column
            let mut col = vec![ZERO; n];
            let mut hcol = vec![ZERO; n];
            for c in 0..n {
                for r in 0..n {
                    col[r] = rho[r * n + c];
                }
                self.bands.apply_hamiltonian(&col, t, &mut hcol);
                for r in 0..n {
                    scratch[r * n + c] = hcol[r];
                }
            }
        }
        for m in 0..n {
            for k in 0..n {
                let mut v = ZERO;
                if self.include_hamiltonian {
                    // −i(Hρ − ρH), with ρH = (Hρ)† for Hermitian ρ
                    let comm = scratch[m * n + k] - scratch[k * n + m].conj();
                    v += C64::new(comm.im, -comm.re);
                }
                if m + 1 < n && k + 1 < n {
                    v += rho[(m + 1) * n + k + 1]
                        * (2.0 * gamma * ((m + 1) as f64 * (k + 1) as f64).sqrt());
                }
                v -= rho[m * n + k] * (gamma * (m + k) as f64);
                out[m * n + k] = v;
            }
        }
    }

    /// RK4 from `t0` to `t_end` with the configured `dt`.
    pub fn evolve(&self, rho0: &DensityMatrix, t0: f64, t_end: f64) -> Result<DensityMatrix, SseError> {
        let n = self.params.dim;
        if rho0.dim() != n {
            return Err(FockError::DimensionMismatch {
                expected: n,
                found: rho0.dim(),
            }
            .into());
        }
        let steps = ((t_end - t0) / self.params.dt).round().max(0.0) as usize;
        let dt = if steps > 0 { (t_end - t0) / steps as f64 } else { 0.0 };
        let len = n * n;
        let mut rho = rho0.data().to_vec();
        let mut k1 = vec![ZERO; len];
        let mut k2 = vec![ZERO; len];
        let mut k3 = vec![ZERO; len];
        let mut k4 = vec![ZERO; len];
        let mut tmp = vec![ZERO; len];
        let mut scratch = vec![ZERO; len];
        for s in 0..steps {
            let t = t0 + s as f64 * dt;
            self.rhs(&rho, t, &mut k1, &mut scratch);
            axpy(&rho, &k1, 0.5 * dt, &mut tmp);
            self.rhs(&tmp, t + 0.5 * dt, &mut k2, &mut scratch);
            axpy(&rho, &k2, 0.5 * dt, &mut tmp);
            self.rhs(&tmp, t + 0.5 * dt, &mut k3, &mut scratch);
            axpy(&rho, &k3, dt, &mut tmp);
            self.rhs(&tmp, t + dt, &mut k4, &mut scratch);
            for i in 0..len {
                rho[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0);
            }
            // enforce Hermiticity
            for m in 0..n {
                for k in m..n {
                    let avg = (rho[m * n + k] + rho[k * n + m].conj()) * 0.5;
                    rho[m * n + k] = avg;
                    rho[k * n + m] = avg.conj();
                }
            }
            let trace: f64 = (0..n).map(|i| rho[i * n + i].re).sum();
            if !trace.is_finite() || (trace - 1.0).abs() > 1e-6 {
                return Err(SseError::TraceDrift {
                    t: t + dt,
                    trace,
                });
            }
        }
        Ok(DensityMatrix::from_data(n, rho)?)
    }
}

fn axpy(x: &[C64], y: &[C64], a: f64, out: &mut [C64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + yi * a;
    }
}

/// Reference solution `ρ(t_end)` of the master equation from `ρ(0) = rho0`.
pub fn me_oracle_evolve(
    rho0: &DensityMatrix,
    t_end: f64,
    params: &SimParams,
) -> Result<DensityMatrix, SseError> {
    MasterEquation::new(*params)?.evolve(rho0, 0.0, t_end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{coherent_state, expect_annihilation};
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    /// Dense `a` on `dim` levels.
    fn dense_a(dim: usize) -> Vec<C64> {
        let mut a = vec![ZERO; dim * dim];
        for n in 0..dim - 1 {
            a[n * dim + n + 1] = c(((n + 1) as f64).sqrt(), 0.0);
        }
        a
    }

    fn matmul(x: &[C64], y: &[C64], dim: usize) -> Vec<C64> {
        let mut out = vec![ZERO; dim * dim];
        for i in 0..dim {
            for k in 0..dim {
                let xik = x[i * dim + k];
                if xik == ZERO {
                    continue;
                }
                for j in 0..dim {
                    out[i * dim + j] += xik * y[k * dim + j];
                }
            }
        }
        out
    }

    fn dagger(x: &[C64], dim: usize) -> Vec<C64> {
        let mut out = vec![ZERO; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                out[j * dim + i] = x[i * dim + j].conj();
            }
        }
        out
    }

    /// Builds H from Q and P matrices on an enlarged space, then truncates.
    fn dense_hamiltonian_oracle(p: &SimParams, dim: usize, t: f64) -> Vec<C64> {
        let big = dim + 8;
        let a = dense_a(big);
        let ad = dagger(&a, big);
        let q: Vec<C64> = a.iter().zip(&ad).map(|(x, y)| (x + y) / SQRT_2).collect();
        let pm: Vec<C64> = a
            .iter()
            .zip(&ad)
            .map(|(x, y)| (x - y) / c(0.0, SQRT_2))
            .collect();
        let q2 = matmul(&q, &q, big);
        let q4 = matmul(&q2, &q2, big);
        let p2 = matmul(&pm, &pm, big);
        let qp = matmul(&q, &pm, big);
        let pq = matmul(&pm, &q, big);
        let drive = p.g / p.beta * (p.omega * t).cos();
        let mut h = vec![ZERO; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                let k = i * big + j;
                h[i * dim + j] = p2[k] * 0.5 + q4[k] * (p.beta * p.beta / 4.0) - q2[k] * 0.5
                    + (qp[k] + pq[k]) * (p.gamma / 2.0)
                    - q[k] * drive;
            }
        }
        h
    }

    #[test]
    fn band_coefficients_match_operator_construction() {
        let p = SimParams::canonical(0.3);
        let dim = 20;
        let bands = hamiltonian_band_coeffs(dim, &p);
        for t in [0.0, 0.7, 2.1] {
            let oracle = dense_hamiltonian_oracle(&p, dim, t);
            let dense = bands.dense_hamiltonian(t);
            for (x, y) in dense.iter().zip(&oracle) {
                assert!((x - y).norm() < 1e-11, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn band_coefficient_examples() {
        let p = SimParams::canonical(0.3);
        let b = hamiltonian_band_coeffs(64, &p);
        let q = 0.09 / 16.0;
        assert_abs_diff_eq!(b.upper4[0], q * 24f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(b.diag[0], 3.0 * q, epsilon = 1e-15);
        assert_abs_diff_eq!(b.drive_upper1[0], -0.3 / (SQRT_2 * 0.3), epsilon = 1e-15);
        let h01 = b.element(0, 1, 0.0);
        assert_abs_diff_eq!(h01.re, -1.0 / SQRT_2, epsilon = 1e-15);
        let expected = c(q * 6.0 - 0.5, -0.05) * 2f64.sqrt();
        assert!((b.upper2[0] - expected).norm() < 1e-15);
    }

    #[test]
    fn params_validation() {
        let mut p = SimParams::canonical(0.3);
        assert!(p.validate().is_ok());
        p.dt = 1.0;
        assert!(matches!(
            p.validate(),
            Err(SseError::InvalidParameter { name: "dt", .. })
        ));
        let mut p = SimParams::canonical(0.3);
        p.dim = 8;
        assert!(p.validate().is_err());
        let mut p = SimParams::canonical(0.3);
        p.d0 = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn noise_statistics() {
        let dt = 1e-3;
        let n = 200_000;
        let mut noise = NoiseStream::new(7, dt);
        let xs: Vec<f64> = (&mut noise).take(n).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
        // 3σ bands: sd(mean) = √(dt/n), sd(var) = dt √(2/n)
        assert!(mean.abs() < 3.0 * (dt / n as f64).sqrt());
        assert!((var - dt).abs() < 3.0 * dt * (2.0 / n as f64).sqrt());
        let again: Vec<f64> = NoiseStream::new(7, dt).take(10).collect();
        assert_eq!(&xs[..10], &again[..]);
        assert_eq!(noise.drawn(), n as u64);
    }

    #[test]
    fn closed_system_norm_drift_is_small() {
        let mut p = SimParams::canonical(0.3);
        p.gamma = 0.0;
        p.dim = 32;
        let mut prop = Propagator::new(p).unwrap();
        let mut s = coherent_state(c(1.0, 0.5), 32).unwrap();
        for k in 0..2000 {
            let r = prop.step_ito(&mut s, 0.0, 0.03, k as f64 * p.dt).unwrap();
            assert!((r.norm_before - 1.0).abs() < 1e-6, "{}", r.norm_before);
            assert_abs_diff_eq!(s.norm_sqr(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn undriven_closed_step_matches_propagator_exponential() {
        let mut p = SimParams::canonical(0.3);
        p.gamma = 0.0;
        p.g = 0.0;
        p.dim = 64;
        let mut prop = Propagator::new(p).unwrap();
        let h = prop.bands().dense_hamiltonian(0.0);
        let s0 = coherent_state(c(2.0, -0.5), 64).unwrap();
        // exp(−iH dt)ψ by a long Taylor series
        let mut term = s0.coeffs().to_vec();
        let mut exact = term.clone();
        for k in 1..40 {
            let next: Vec<C64> = (0..64)
                .map(|i| (0..64).map(|j| h[i * 64 + j] * term[j]).sum::<C64>() * C64::new(0.0, -p.dt / k as f64))
                .collect();
            exact.iter_mut().zip(&next).for_each(|(e, x)| *e += x);
            term = next;
        }
        let mut s = s0.clone();
        prop.step_ito(&mut s, 0.0, 0.0, 0.0).unwrap();
        let err = s
            .coeffs()
            .iter()
            .zip(&exact)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn long_run_keeps_the_basis_healthy() {
        let p = SimParams::canonical(0.3);
        let mut prop = Propagator::new(p).unwrap();
        let mut s = coherent_state(c(1.0 / (SQRT_2 * 0.3), 0.0), 64).unwrap();
        let mut noise = NoiseStream::new(4, p.dt);
        let mut max_tail: f64 = 0.0;
        for k in 0..20_000 {
            let r = prop.step_ito(&mut s, 0.0, noise.next_increment(), k as f64 * p.dt).unwrap();
            max_tail = max_tail.max(r.tail);
        }
        assert!(max_tail < 1e-4, "{max_tail:e}");
    }

    #[test]
    fn step_renormalizes_and_reports() {
        let p = SimParams::canonical(0.3);
        let mut prop = Propagator::new(p).unwrap();
        let mut s = coherent_state(c(2.0, 0.0), 64).unwrap();
        let mut noise = NoiseStream::new(1, p.dt);
        for k in 0..500 {
            let r = prop.step_ito(&mut s, 0.3, noise.next_increment(), k as f64 * p.dt).unwrap();
            assert_abs_diff_eq!(s.norm_sqr(), 1.0, epsilon = 1e-12);
            assert!(!r.warn);
        }
    }

    #[test]
    fn truncation_abort_is_reported() {
        let mut p = SimParams::canonical(0.3);
        p.dim = 16;
        let mut prop = Propagator::new(p).unwrap();
        let mut s = FockState::number_state(14, 16);
        assert!(matches!(
            prop.step_ito(&mut s, 0.0, 0.0, 0.0),
            Err(SseError::Truncation { .. })
        ));
    }

    #[test]
    fn stratonovich_noise_free_matches_ito_to_local_third_order() {
        let mut p = SimParams::canonical(0.3);
        p.gamma = 0.0;
        p.dim = 32;
        let s0 = coherent_state(c(1.2, -0.4), 32).unwrap();
        let mut errs = Vec::new();
        for dt in [1e-3, 5e-4] {
            p.dt = dt;
            let mut prop = Propagator::new(p).unwrap();
            let mut a = s0.clone();
            let mut b = s0.clone();
            prop.step_ito(&mut a, 0.0, 0.0, 0.1).unwrap();
            prop.step_stratonovich(&mut b, 0.0, 0.0, 0.1).unwrap();
            let err = a
                .coeffs()
                .iter()
                .zip(b.coeffs())
                .map(|(x, y)| (x - y).norm())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        // the midpoint rule's dt³ local error dominates the RK4 drift
        let ratio = errs[0] / errs[1];
        assert!(ratio > 7.0 && ratio < 9.0, "ratio {ratio} errs {errs:?}");
    }

    #[test]
    fn stratonovich_half_steps_are_consistent() {
        let mut p = SimParams::canonical(0.3);
        p.dim = 32;
        let s0 = coherent_state(c(1.0, 0.3), 32).unwrap();
        let mut diffs = Vec::new();
        for dt in [2e-3, 1e-3] {
            p.dt = dt;
            let mut full = Propagator::new(p).unwrap();
            let mut half_p = p;
            half_p.dt = dt / 2.0;
            let mut half = Propagator::new(half_p).unwrap();
            let mut a = s0.clone();
            let mut b = s0.clone();
            full.step_stratonovich(&mut a, 0.2, 0.0, 0.0).unwrap();
            half.step_stratonovich(&mut b, 0.2, 0.0, 0.0).unwrap();
            half.step_stratonovich(&mut b, 0.2, 0.0, dt / 2.0).unwrap();
            diffs.push(
                a.coeffs()
                    .iter()
                    .zip(b.coeffs())
                    .map(|(x, y)| (x - y).norm())
                    .fold(0.0, f64::max),
            );
        }
        // local error of a second-order step scales as dt³
        assert!(diffs[0] / diffs[1] > 6.0, "{diffs:?}");
    }

    #[test]
    fn homodyne_record_drift() {
        let p = SimParams::canonical(0.3);
        let s = coherent_state(c(2.0, 0.0), 64).unwrap();
        let inc = record_homodyne(&s, 0.0, 0.0, &p, p.gamma.sqrt());
        assert_abs_diff_eq!(inc, 0.1f64.sqrt() * 2.0 * SQRT_2 * p.dt, epsilon = 1e-12);
        let vac = FockState::vacuum(64);
        assert_eq!(record_homodyne(&vac, 1.1, 0.02, &p, 1.0), 0.02);
    }

    #[test]
    fn master_equation_unitary_limit_preserves_purity() {
        let mut p = SimParams::canonical(0.3);
        p.gamma = 0.0;
        p.dim = 24;
        let rho0 = DensityMatrix::from_pure(&coherent_state(c(1.0, 0.5), 24).unwrap());
        let rho = me_oracle_evolve(&rho0, 1.0, &p).unwrap();
        assert_abs_diff_eq!(rho.purity(), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(rho.trace().re, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn master_equation_pure_damping() {
        let mut p = SimParams::canonical(0.3);
        p.dim = 24;
        let alpha = c(0.6, -0.3);
        let rho0 = DensityMatrix::from_pure(&coherent_state(alpha, 24).unwrap());
        let me = MasterEquation::new(p).unwrap().without_hamiltonian();
        let t = 3.0;
        let rho = me.evolve(&rho0, 0.0, t).unwrap();
        let expected = alpha * (-p.gamma * t).exp();
        assert!((rho.expect_annihilation() - expected).norm() < 1e-6);
        assert_abs_diff_eq!(rho.trace().re, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn master_equation_rejects_large_basis() {
        let p = SimParams::canonical(0.3);
        assert!(MasterEquation::new(p).is_err());
    }

    #[test]
    fn vacuum_without_drive_stays_centered() {
        let mut p = SimParams::canonical(0.3);
        p.g = 0.0;
        p.dim = 32;
        let mut prop = Propagator::new(p).unwrap();
        let mut mean = C64::new(0.0, 0.0);
        let n = 40;
        for seed in 0..n {
            let mut s = FockState::vacuum(32);
            let mut noise = NoiseStream::new(seed, p.dt);
            evolve_fixed_phase(&mut prop, &mut s, 0.0, &mut noise, 0.0, 200).unwrap();
            mean += expect_annihilation(&s);
        }
        mean /= n as f64;
        assert!(mean.norm() < 0.05, "{mean}");
    }
}

//! Truncated Fock-space states and phase-space observables.
//!
//! The conditional wavefunction is stored as `N` complex amplitudes `C_n`
//! with `C_n = 0` for `n >= N`. Position and momentum follow
//! `Q = (a + a†)/√2`, `P = (a − a†)/(i√2)`, so a coherent state `|α⟩` sits at
//! `(√2 Re α, √2 Im α)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

/// Tail weight above which a state is no longer considered converged.
pub const TAIL_WARN: f64 = 1e-4;
/// Tail weight above which propagation is aborted.
pub const TAIL_ABORT: f64 = 1e-2;
/// Number of highest basis states included in [`tail_weight`].
pub const TAIL_LEVELS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FockError {
    #[error("basis dimension {dim} is below the minimum of {min}")]
    DimensionTooSmall { dim: usize, min: usize },
    #[error("truncation violated: tail weight {tail:.3e} exceeds {limit:.1e}")]
    Truncation { tail: f64, limit: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid quadrature grid: {0}")]
    InvalidGrid(String),
    #[error("state has zero norm")]
    ZeroNorm,
}

/// A point in the dimensionless `(⟨Q⟩, ⟨P⟩)` phase plane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhasePoint {
    pub q: f64,
    pub p: f64,
}

impl PhasePoint {
    pub fn new(q: f64, p: f64) -> Self {
        Self { q, p }
    }

    pub fn distance(&self, other: &PhasePoint) -> f64 {
        (self.q - other.q).hypot(self.p - other.p)
    }
}

/// Pure state in a truncated number basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FockState {
    coeffs: Vec<C64>,
}

impl FockState {
    /// Wraps raw amplitudes and normalizes them.
    pub fn from_coeffs(coeffs: Vec<C64>) -> Result<Self, FockError> {
        let mut state = Self { coeffs };
        state.normalize()?;
        Ok(state)
    }

    /// Wraps amplitudes as-is. Callers are responsible for normalization.
    pub fn from_coeffs_unnormalized(coeffs: Vec<C64>) -> Self {
        Self { coeffs }
    }

    pub fn vacuum(dim: usize) -> Self {
        Self::number_state(0, dim)
    }

    pub fn number_state(n: usize, dim: usize) -> Self {
        assert!(n < dim, "number state |{n}⟩ outside a {dim}-level basis");
        let mut coeffs = vec![C64::new(0.0, 0.0); dim];
        coeffs[n] = C64::new(1.0, 0.0);
        Self { coeffs }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<C64> {
        self.coeffs
    }

    pub fn norm_sqr(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn normalize(&mut self) -> Result<(), FockError> {
        let norm = self.norm_sqr().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(FockError::ZeroNorm);
        }
        let inv = 1.0 / norm;
        self.coeffs.iter_mut().for_each(|c| *c *= inv);
        Ok(())
    }

    /// Rigid phase-space rotation by `chi` (counter-clockwise): `C_n → C_n e^{inχ}`.
    pub fn rotated(&self, chi: f64) -> FockState {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(n, c)| c * C64::from_polar(1.0, n as f64 * chi))
            .collect();
        FockState { coeffs }
    }

    /// Superposition `a|self⟩ + b|other⟩`, normalized.
    pub fn superpose(&self, a: C64, other: &FockState, b: C64) -> Result<FockState, FockError> {
        if self.dim() != other.dim() {
            return Err(FockError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(x, y)| a * x + b * y)
            .collect();
        FockState::from_coeffs(coeffs)
    }

    pub fn inner(&self, other: &FockState) -> C64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(x, y)| x.conj() * y)
            .sum()
    }
}

/// Weight in the four highest retained levels, `Σ_{n=N−4}^{N−1} |C_n|²`.
pub fn tail_weight(state: &FockState) -> f64 {
    let c = state.coeffs();
    let start = c.len().saturating_sub(TAIL_LEVELS);
    c[start..].iter().map(|x| x.norm_sqr()).sum()
}

/// `⟨a⟩ = Σ_{n=0}^{N−2} √(n+1) C_n* C_{n+1}`.
pub fn expect_annihilation(state: &FockState) -> C64 {
    expect_annihilation_raw(state.coeffs())
}

pub(crate) fn expect_annihilation_raw(c: &[C64]) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for n in 0..c.len().saturating_sub(1) {
        acc += c[n].conj() * c[n + 1] * ((n + 1) as f64).sqrt();
    }
    acc
}

pub fn centroid(state: &FockState) -> PhasePoint {
    let a = expect_annihilation(state);
    PhasePoint {
        q: std::f64::consts::SQRT_2 * a.re,
        p: std::f64::consts::SQRT_2 * a.im,
    }
}

/// Coherent state `|α⟩` truncated to `dim` levels and renormalized.
pub fn coherent_state(alpha: C64, dim: usize) -> Result<FockState, FockError> {
    const MIN_DIM: usize = 8;
    if dim < MIN_DIM {
        return Err(FockError::DimensionTooSmall { dim, min: MIN_DIM });
    }
    let mut coeffs = Vec::with_capacity(dim);
    let mut c = C64::new((-0.5 * alpha.norm_sqr()).exp(), 0.0);
    for n in 0..dim {
        if n > 0 {
            c = c * alpha / (n as f64).sqrt();
        }
        coeffs.push(c);
    }
    let mut state = FockState { coeffs };
    let tail = tail_weight(&state) / state.norm_sqr();
    if !(tail < TAIL_WARN) {
        return Err(FockError::Truncation {
            tail,
            limit: TAIL_WARN,
        });
    }
    state.normalize()?;
    Ok(state)
}

/// Generalized Laguerre values `L_j^{(k)}(x)` for `j = 0..len`.
fn laguerre_column(k: usize, x: f64, len: usize, out: &mut Vec<f64>) {
    out.clear();
    if len == 0 {
        return;
    }
    let kf = k as f64;
    out.push(1.0);
    if len > 1 {
        out.push(1.0 + kf - x);
    }
    for j in 1..len.saturating_sub(1) {
        let jf = j as f64;
        let next = ((2.0 * jf + 1.0 + kf - x) * out[j] - (jf + kf) * out[j - 1]) / (jf + 1.0);
        out.push(next);
    }
}

/// Truncated displacement matrix `⟨m|D(α)|n⟩`, row-major `dim × dim`.
///
/// Elements use the closed form
/// `⟨m|D|n⟩ = √(n!/m!) α^{m−n} e^{−|α|²/2} L_n^{(m−n)}(|α|²)` for `m ≥ n`
/// and the conjugate-symmetric expression with `−α*` for `m < n`.
pub fn displacement_matrix(alpha: C64, dim: usize) -> Vec<C64> {
    let x = alpha.norm_sqr();
    let envelope = (-0.5 * x).exp();
    let neg_conj = -alpha.conj();
    let mut out = vec![C64::new(0.0, 0.0); dim * dim];
    let mut lag = Vec::with_capacity(dim);
    // alpha^k / sqrt(k!) at j = 0, advanced in j by sqrt((j+1)/(j+k+1)).
    let mut lower_k = C64::new(envelope, 0.0);
    let mut upper_k = C64::new(envelope, 0.0);
    for k in 0..dim {
        if k > 0 {
            let s = (k as f64).sqrt();
            lower_k = lower_k * alpha / s;
            upper_k = upper_k * neg_conj / s;
        }
        let len = dim - k;
        laguerre_column(k, x, len, &mut lag);
        let mut ratio = 1.0;
        for j in 0..len {
            if j > 0 {
                ratio *= ((j as f64) / ((j + k) as f64)).sqrt();
            }
            let l = lag[j] * ratio;
            out[(j + k) * dim + j] = lower_k * l;
            if k > 0 {
                out[j * dim + j + k] = upper_k * l;
            }
        }
    }
    out
}

/// Applies the truncated displacement operator and renormalizes.
pub fn displace(state: &FockState, alpha: C64) -> Result<FockState, FockError> {
    if alpha.norm_sqr() == 0.0 {
        return Ok(state.clone());
    }
    let dim = state.dim();
    let d = displacement_matrix(alpha, dim);
    let c = state.coeffs();
    let coeffs: Vec<C64> = (0..dim)
        .map(|m| {
            d[m * dim..(m + 1) * dim]
                .iter()
                .zip(c)
                .map(|(dm, cn)| dm * cn)
                .sum()
        })
        .collect();
    let mut out = FockState { coeffs };
    out.normalize()?;
    let tail = tail_weight(&out);
    if tail >= TAIL_ABORT {
        return Err(FockError::Truncation {
            tail,
            limit: TAIL_ABORT,
        });
    }
    Ok(out)
}

/// Equally spaced sample points for quadrature wavefunctions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureGrid {
    x_min: f64,
    x_max: f64,
    count: usize,
}

impl QuadratureGrid {
    pub fn new(x_min: f64, x_max: f64, count: usize) -> Result<Self, FockError> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_min >= x_max {
            return Err(FockError::InvalidGrid(format!(
                "bounds [{x_min}, {x_max}] are not increasing"
            )));
        }
        if count < 3 {
            return Err(FockError::InvalidGrid(format!(
                "count {count} is below 3"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            count,
        })
    }

    /// Symmetric grid spanning `±(√(2N) + 5)`.
    pub fn covering(dim: usize, count: usize) -> Self {
        let span = (2.0 * dim as f64).sqrt() + 5.0;
        Self::new(-span, span, count).expect("covering grid is always valid")
    }

    /// Analysis default: `±(√(2N) + 5)` with 1024 points.
    pub fn default_for(dim: usize) -> Self {
        Self::covering(dim, 1024)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn spacing(&self) -> f64 {
        (self.x_max - self.x_min) / (self.count - 1) as f64
    }

    pub fn point(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.spacing()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.count).map(|j| self.point(j)).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (self.x_min + self.x_max).abs() <= 1e-12 * self.x_max.abs().max(1.0)
    }
}

/// Normalized Hermite–Gauss functions `ψ_n(x_j)`, stored row-major by `n`.
#[derive(Debug, Clone)]
pub struct HermiteTable {
    dim: usize,
    count: usize,
    values: Vec<f64>,
}

impl HermiteTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.count..(n + 1) * self.count]
    }

    pub fn get(&self, n: usize, j: usize) -> f64 {
        self.values[n * self.count + j]
    }
}

/// Evaluates `ψ_0..ψ_{dim−1}` at arbitrary points using the normalized recurrence
/// `ψ_n = x√(2/n) ψ_{n−1} − √((n−1)/n) ψ_{n−2}`.
pub fn hermite_functions_at(points: &[f64], dim: usize) -> HermiteTable {
    let count = points.len();
    let mut values = vec![0.0; dim * count];
    let norm0 = PI.powf(-0.25);
    for (j, &x) in points.iter().enumerate() {
        let mut prev = 0.0;
        let mut cur = norm0 * (-0.5 * x * x).exp();
        if dim > 0 {
            values[j] = cur;
        }
        for n in 1..dim {
            let nf = n as f64;
            let next = x * (2.0 / nf).sqrt() * cur - ((nf - 1.0) / nf).sqrt() * prev;
            prev = cur;
            cur = next;
            values[n * count + j] = cur;
        }
    }
    HermiteTable {
        dim,
        count,
        values,
    }
}

pub fn quadrature_wavefunctions(grid: &QuadratureGrid, dim: usize) -> HermiteTable {
    hermite_functions_at(&grid.points(), dim)
}

/// Quadrature amplitudes `⟨x_θ|ψ⟩ = Σ_n C_n ψ_n(x) e^{−inθ}` on a precomputed table.
pub fn quadrature_amplitudes(state: &FockState, theta: f64, table: &HermiteTable) -> Vec<C64> {
    assert_eq!(state.dim(), table.dim(), "hermite table dimension mismatch");
    let mut amps = vec![C64::new(0.0, 0.0); table.count()];
    for (n, c) in state.coeffs().iter().enumerate() {
        let w = c * C64::from_polar(1.0, -(n as f64) * theta);
        if w.norm_sqr() == 0.0 {
            continue;
        }
        for (a, &h) in amps.iter_mut().zip(table.row(n)) {
            *a += w * h;
        }
    }
    amps
}

/// Probability density of the rotated quadrature `X_θ` on `grid`.
pub fn quadrature_pdf(state: &FockState, theta: f64, grid: &QuadratureGrid) -> Vec<f64> {
    let table = quadrature_wavefunctions(grid, state.dim());
    quadrature_pdf_with(state, theta, &table)
}

pub fn quadrature_pdf_with(state: &FockState, theta: f64, table: &HermiteTable) -> Vec<f64> {
    quadrature_amplitudes(state, theta, table)
        .into_iter()
        .map(|a| a.norm_sqr())
        .collect()
}

/// Dense density matrix in the truncated number basis, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    dim: usize,
    data: Vec<C64>,
}

impl DensityMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![C64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn from_pure(state: &FockState) -> Self {
        let mut rho = Self::zeros(state.dim());
        rho.add_pure(state, 1.0);
        rho
    }

    pub fn from_data(dim: usize, data: Vec<C64>) -> Result<Self, FockError> {
        if data.len() != dim * dim {
            return Err(FockError::DimensionMismatch {
                expected: dim * dim,
                found: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn get(&self, m: usize, n: usize) -> C64 {
        self.data[m * self.dim + n]
    }

    /// Accumulates `weight·|ψ⟩⟨ψ|`.
    pub fn add_pure(&mut self, state: &FockState, weight: f64) {
        assert_eq!(state.dim(), self.dim, "density matrix dimension mismatch");
        let c = state.coeffs();
        for m in 0..self.dim {
            let cm = c[m] * weight;
            let row = &mut self.data[m * self.dim..(m + 1) * self.dim];
            for (r, cn) in row.iter_mut().zip(c) {
                *r += cm * cn.conj();
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|n| self.get(n, n)).sum()
    }

    pub fn purity(&self) -> f64 {
        // Tr(ρ²) = Σ |ρ_mn|² for Hermitian ρ.
        self.data.iter().map(|x| x.norm_sqr()).sum()
    }

    pub fn expect_annihilation(&self) -> C64 {
        // Tr(ρ a) = Σ_n √(n+1) ρ_{n+1,n}
        (0..self.dim.saturating_sub(1))
            .map(|n| self.get(n + 1, n) * ((n + 1) as f64).sqrt())
            .sum()
    }

    pub fn max_abs_diff(&self, other: &DensityMatrix) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Wigner function of a pure state on the tensor grid `q_grid × p_grid`,
/// row-major with `q` as the outer index.
pub fn wigner(state: &FockState, q_grid: &[f64], p_grid: &[f64]) -> Vec<f64> {
    wigner_density(&DensityMatrix::from_pure(state), q_grid, p_grid)
}

/// Wigner function of a density matrix, normalized so that `∫∫ W dq dp = 1`.
///
/// Uses the number-basis kernel
/// `W[|m⟩⟨n|] = ((−1)^n/π) √(n!/m!) (√2 z)^{m−n} e^{−|z|²} L_n^{(m−n)}(2|z|²)`
/// with `z = q − ip` for `m ≥ n`; the `m < n` half is the complex conjugate.
pub fn wigner_density(rho: &DensityMatrix, q_grid: &[f64], p_grid: &[f64]) -> Vec<f64> {
    let dim = rho.dim();
    let mut out = Vec::with_capacity(q_grid.len() * p_grid.len());
    let mut lag = Vec::with_capacity(dim);
    for &q in q_grid {
        for &p in p_grid {
            let r2 = q * q + p * p;
            let z = C64::new(q, -p) * std::f64::consts::SQRT_2;
            let envelope = (-r2).exp() / PI;
            let mut total = 0.0;
            let mut zk = C64::new(1.0, 0.0);
            for k in 0..dim {
                if k > 0 {
                    zk = zk * z / (k as f64).sqrt();
                }
                let len = dim - k;
                laguerre_column(k, 2.0 * r2, len, &mut lag);
                let mut ratio = 1.0;
                let mut acc = C64::new(0.0, 0.0);
                for j in 0..len {
                    if j > 0 {
                        ratio *= ((j as f64) / ((j + k) as f64)).sqrt();
                    }
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    acc += rho.get(j + k, j) * (sign * ratio * lag[j]);
                }
                let term = acc * zk;
                total += if k == 0 { term.re } else { 2.0 * term.re };
            }
            out.push(envelope * total);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn vacuum_coherent_state() {
        let s = coherent_state(c(0.0, 0.0), 16).unwrap();
        assert_eq!(s.coeffs()[0], c(1.0, 0.0));
        assert!(s.coeffs()[1..].iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn coherent_eigenvalue_and_centroid() {
        let s = coherent_state(c(1.0, 0.0), 64).unwrap();
        assert!((expect_annihilation(&s) - c(1.0, 0.0)).norm() < 1e-6);
        let s = coherent_state(c(0.0, 2.0), 64).unwrap();
        let pt = centroid(&s);
        assert_abs_diff_eq!(pt.q, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(pt.p, 2.0 * 2f64.sqrt(), epsilon = 1e-9);
        let s = coherent_state(c(1.0, 1.0), 64).unwrap();
        let pt = centroid(&s);
        assert_abs_diff_eq!(pt.q, 2f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(pt.p, 2f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn coherent_rejects_overflowing_basis() {
        let err = coherent_state(c(5.0, 0.0), 16).unwrap_err();
        assert!(matches!(err, FockError::Truncation { tail, .. } if tail > 1e-4));
        assert!(matches!(
            coherent_state(c(0.0, 0.0), 4),
            Err(FockError::DimensionTooSmall { .. })
        ));
    }

    #[test]
    fn annihilation_of_number_states() {
        assert_eq!(expect_annihilation(&FockState::vacuum(8)), c(0.0, 0.0));
        assert_eq!(expect_annihilation(&FockState::number_state(1, 8)), c(0.0, 0.0));
        let s = coherent_state(c(0.5, 0.0), 32).unwrap();
        assert!((expect_annihilation(&s) - c(0.5, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn tail_weight_cases() {
        assert_eq!(tail_weight(&FockState::vacuum(64)), 0.0);
        assert_eq!(tail_weight(&FockState::number_state(63, 64)), 1.0);
        let s = coherent_state(c(2.0, 0.0), 64).unwrap();
        // Poisson(4) mass on n = 60..63
        let mut oracle = 0.0;
        let mut log_fact = 0.0;
        for n in 1..64 {
            log_fact += (n as f64).ln();
            if n >= 60 {
                oracle += (-4.0 + n as f64 * 4f64.ln() - log_fact).exp();
            }
        }
        assert!(tail_weight(&s) < 1e-10);
        assert!((tail_weight(&s) - oracle).abs() < 1e-3 * oracle);
    }

    #[test]
    fn displace_vacuum_is_coherent() {
        for alpha in [c(0.3, -0.2), c(1.0, 1.0), c(-2.0, 0.0), c(0.0, 2.0)] {
            let d = displace(&FockState::vacuum(64), alpha).unwrap();
            let coh = coherent_state(alpha, 64).unwrap();
            for (x, y) in d.coeffs().iter().zip(coh.coeffs()) {
                assert!((x - y).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn displace_by_zero_is_identity() {
        let s = coherent_state(c(0.7, 0.1), 32).unwrap();
        assert_eq!(displace(&s, c(0.0, 0.0)).unwrap(), s);
    }

    #[test]
    fn displace_aborts_on_overflow() {
        let s = FockState::number_state(10, 16);
        assert!(matches!(
            displace(&s, c(3.0, 0.0)),
            Err(FockError::Truncation { .. })
        ));
    }

    #[test]
    fn hermite_values() {
        let table = hermite_functions_at(&[0.0, 1.3], 4);
        assert_abs_diff_eq!(table.get(0, 0), PI.powf(-0.25), epsilon = 1e-15);
        assert_abs_diff_eq!(table.get(0, 0), 0.751126, epsilon = 1e-6);
        assert_eq!(table.get(1, 0), 0.0);
        // ψ_2(x) = (2x² − 1) e^{−x²/2} / (√2 π^{1/4})
        let x: f64 = 1.3;
        let psi2 = (2.0 * x * x - 1.0) * (-0.5 * x * x).exp() / (2f64.sqrt() * PI.powf(0.25));
        assert_abs_diff_eq!(table.get(2, 1), psi2, epsilon = 1e-14);
    }

    #[test]
    fn vacuum_pdf_is_ground_gaussian() {
        let grid = QuadratureGrid::new(-5.0, 5.0, 201).unwrap();
        for theta in [0.0, 0.4, 1.3] {
            let pdf = quadrature_pdf(&FockState::vacuum(16), theta, &grid);
            for (x, p) in grid.points().iter().zip(&pdf) {
                assert_abs_diff_eq!(*p, (-x * x).exp() / PI.sqrt(), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn coherent_pdf_centered() {
        let s = coherent_state(c(2.0, 0.0), 64).unwrap();
        let grid = QuadratureGrid::default_for(64);
        let pdf = quadrature_pdf(&s, 0.0, &grid);
        let x0 = 2.0 * 2f64.sqrt();
        for (x, p) in grid.points().iter().zip(&pdf) {
            let expected = (-(x - x0).powi(2)).exp() / PI.sqrt();
            assert_abs_diff_eq!(*p, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(QuadratureGrid::new(1.0, -1.0, 10).is_err());
        assert!(QuadratureGrid::new(-1.0, 1.0, 2).is_err());
        let g = QuadratureGrid::default_for(64);
        assert!(g.is_symmetric());
        assert_eq!(g.count(), 1024);
        assert_abs_diff_eq!(g.x_max(), 128f64.sqrt() + 5.0, epsilon = 1e-12);
    }

    #[test]
    fn wigner_vacuum_and_coherent() {
        let q: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.4).collect();
        let w = wigner(&FockState::vacuum(12), &q, &q);
        for (i, qi) in q.iter().enumerate() {
            for (j, pj) in q.iter().enumerate() {
                let expected = (-(qi * qi + pj * pj)).exp() / PI;
                assert_abs_diff_eq!(w[i * q.len() + j], expected, epsilon = 1e-13);
            }
        }
        let alpha = c(0.8, -0.5);
        let s = coherent_state(alpha, 32).unwrap();
        let (q0, p0) = (2f64.sqrt() * alpha.re, 2f64.sqrt() * alpha.im);
        let w = wigner(&s, &q, &q);
        for (i, qi) in q.iter().enumerate() {
            for (j, pj) in q.iter().enumerate() {
                let expected = (-((qi - q0).powi(2) + (pj - p0).powi(2))).exp() / PI;
                assert_abs_diff_eq!(w[i * q.len() + j], expected, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn density_matrix_mixture() {
        let mut rho = DensityMatrix::zeros(4);
        rho.add_pure(&FockState::vacuum(4), 0.5);
        rho.add_pure(&FockState::number_state(1, 4), 0.5);
        assert_abs_diff_eq!(rho.purity(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rho.trace().re, 1.0, epsilon = 1e-15);
        assert_eq!(rho.get(0, 1), c(0.0, 0.0));
    }

    // exp(αa† − α*a) by scaling and squaring of a Taylor series
    fn expm_displacement(alpha: C64, dim: usize) -> Vec<C64> {
        let mut gen = vec![c(0.0, 0.0); dim * dim];
        for n in 0..dim - 1 {
            let s = ((n + 1) as f64).sqrt();
            gen[(n + 1) * dim + n] = alpha * s;
            gen[n * dim + n + 1] = -alpha.conj() * s;
        }
        let mul = |a: &[C64], b: &[C64]| {
            let mut out = vec![c(0.0, 0.0); dim * dim];
            for i in 0..dim {
                for k in 0..dim {
                    let aik = a[i * dim + k];
                    if aik.norm_sqr() == 0.0 {
                        continue;
                    }
                    for j in 0..dim {
                        out[i * dim + j] += aik * b[k * dim + j];
                    }
                }
            }
            out
        };
        let bound = alpha.norm() * 2.0 * (dim as f64).sqrt();
        let squarings = (bound / 0.25).log2().ceil().max(0.0) as i32;
        let scale = 0.5f64.powi(squarings);
        gen.iter_mut().for_each(|x| *x *= scale);
        let mut result = vec![c(0.0, 0.0); dim * dim];
        let mut term = vec![c(0.0, 0.0); dim * dim];
        for i in 0..dim {
            result[i * dim + i] = c(1.0, 0.0);
            term[i * dim + i] = c(1.0, 0.0);
        }
        for k in 1..30 {
            term = mul(&term, &gen);
            term.iter_mut().for_each(|x| *x /= k as f64);
            result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
        }
        for _ in 0..squarings {
            result = mul(&result, &result);
        }
        result
    }

    fn apply(mat: &[C64], v: &[C64]) -> Vec<C64> {
        let dim = v.len();
        (0..dim)
            .map(|i| (0..dim).map(|j| mat[i * dim + j] * v[j]).sum())
            .collect()
    }

    fn cat(alpha: f64, dim: usize) -> FockState {
        coherent_state(c(alpha, 0.0), dim)
            .unwrap()
            .superpose(
                c(1.0, 0.0),
                &coherent_state(c(-alpha, 0.0), dim).unwrap(),
                c(1.0, 0.0),
            )
            .unwrap()
    }

    fn low_state(parts: &[(f64, f64)], dim: usize) -> FockState {
        let mut coeffs = vec![c(0.0, 0.0); dim];
        for (n, &(re, im)) in parts.iter().enumerate() {
            coeffs[n] = c(re, im);
        }
        coeffs[0] += c(1e-3, 0.0);
        FockState::from_coeffs(coeffs).unwrap()
    }

    fn state_strategy() -> impl proptest::strategy::Strategy<Value = FockState> {
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..24)
            .prop_map(|parts| low_state(&parts, 64))
    }

    use proptest::prelude::*;

    #[test]
    fn closed_form_displacement_matches_expm() {
        let alpha = c(0.4, -0.3);
        let big = 96;
        let oracle = expm_displacement(alpha, big);
        let d = displacement_matrix(alpha, 64);
        for m in 0..30 {
            for n in 0..30 {
                let diff = (d[m * 64 + n] - oracle[m * big + n]).norm();
                assert!(diff < 1e-12, "({m},{n}) off by {diff}");
            }
        }
    }

    #[test]
    fn hermite_functions_are_orthonormal() {
        let grid = QuadratureGrid::covering(64, 2048);
        let table = quadrature_wavefunctions(&grid, 40);
        let dx = grid.spacing();
        for m in 0..40 {
            for n in 0..=m {
                let s: f64 = table.row(m).iter().zip(table.row(n)).map(|(a, b)| a * b).sum();
                let expected = if m == n { 1.0 } else { 0.0 };
                assert!((s * dx - expected).abs() < 1e-6, "({m},{n}): {}", s * dx);
            }
        }
    }

    #[test]
    fn cat_pdf_and_wigner_structure() {
        let cat = cat(2.0, 64);
        let grid = QuadratureGrid::default_for(64);
        let peaks = |pdf: &[f64]| {
            (1..pdf.len() - 1)
                .filter(|&j| pdf[j] > pdf[j - 1] && pdf[j] > pdf[j + 1] && pdf[j] > 1e-12)
                .count()
        };
        assert_eq!(peaks(&quadrature_pdf(&cat, 0.0, &grid)), 2);
        assert!(peaks(&quadrature_pdf(&cat, PI / 2.0, &grid)) > 2);

        let axis: Vec<f64> = (0..161).map(|i| -8.0 + i as f64 * 0.1).collect();
        let w = wigner(&cat, &axis, &axis);
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min < -0.1, "cat Wigner minimum {min}");
        let integral: f64 = w.iter().sum::<f64>() * 0.01;
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn small_displacement_agrees_with_expm(
            state in state_strategy(),
            re in -0.1f64..0.1,
            im in -0.1f64..0.1,
        ) {
            let alpha = c(re, im);
            let d = displacement_matrix(alpha, 64);
            let raw = apply(&d, state.coeffs());
            let norm: f64 = raw.iter().map(|x| x.norm_sqr()).sum();
            prop_assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
            let oracle = apply(&expm_displacement(alpha, 64), state.coeffs());
            for (x, y) in raw.iter().zip(&oracle) {
                prop_assert!((x - y).norm() < 1e-6);
            }
        }

        #[test]
        fn displacement_round_trip_and_centroid_shift(
            state in state_strategy(),
            re in -0.5f64..0.5,
            im in -0.5f64..0.5,
        ) {
            let alpha = c(re, im);
            let moved = displace(&state, alpha).unwrap();
            let back = displace(&moved, -alpha).unwrap();
            for (x, y) in back.coeffs().iter().zip(state.coeffs()) {
                prop_assert!((x - y).norm() < 1e-6);
            }
            let (a, b) = (centroid(&state), centroid(&moved));
            prop_assert!((b.q - a.q - 2f64.sqrt() * re).abs() < 1e-6);
            prop_assert!((b.p - a.p - 2f64.sqrt() * im).abs() < 1e-6);
        }

        #[test]
        fn pdf_integrates_to_one(state in state_strategy(), theta in 0.0f64..PI) {
            let grid = QuadratureGrid::default_for(64);
            let total: f64 = quadrature_pdf(&state, theta, &grid).iter().sum::<f64>() * grid.spacing();
            prop_assert!((total - 1.0).abs() < 1e-4, "{total}");
        }

        #[test]
        fn pdf_rotation_covariance(
            state in state_strategy(),
            theta in 0.0f64..PI,
            chi in 0.0f64..PI,
        ) {
            let grid = QuadratureGrid::default_for(64);
            let count = grid.count();
            let turned = state.rotated(-chi);
            let lhs = quadrature_pdf(&turned, theta, &grid);
            let shifted = theta + chi;
            // X_{θ+π} = −X_θ, so angles past π reflect the grid
            let (angle, flip) = if shifted >= PI { (shifted - PI, true) } else { (shifted, false) };
            let rhs = quadrature_pdf(&state, angle, &grid);
            for j in 0..count {
                let r = if flip { rhs[count - 1 - j] } else { rhs[j] };
                prop_assert!((lhs[j] - r).abs() < 1e-10);
            }
        }

        #[test]
        fn wigner_integrates_to_one(state in state_strategy()) {
            let axis: Vec<f64> = (0..121).map(|i| -9.0 + i as f64 * 0.15).collect();
            let w = wigner(&state, &axis, &axis);
            let integral: f64 = w.iter().sum::<f64>() * 0.15 * 0.15;
            prop_assert!((integral - 1.0).abs() < 1e-3, "{integral}");
        }
    }
}

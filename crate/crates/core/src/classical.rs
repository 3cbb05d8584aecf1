//! Classical driven-damped Duffing oscillator
//! `ẍ + 2Γẋ + β²x³ − x = (g/β) cos(Ωt)`.
//!
//! Under `X = βx` the flow is independent of `β`; Poincaré points are
//! reported in those rescaled coordinates.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassicalError {
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("state became non-finite at t = {t}")]
    NonFinite { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalState {
    pub x: f64,
    pub v: f64,
    pub t: f64,
}

impl ClassicalState {
    pub fn new(x: f64, v: f64, t: f64) -> Self {
        Self { x, v, t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalParams {
    pub gamma: f64,
    pub g: f64,
    pub omega: f64,
    pub beta: f64,
}

impl ClassicalParams {
    /// `Γ = 0.1`, `g = 0.3`, `Ω = 1` at the given `β`.
    pub fn canonical(beta: f64) -> Self {
        Self {
            gamma: 0.1,
            g: 0.3,
            omega: 1.0,
            beta,
        }
    }

    pub fn validate(&self) -> Result<(), ClassicalError> {
        let bad = |name, reason: &str| {
            Err(ClassicalError::InvalidParameter {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.beta > 0.0) {
            return bad("beta", "must be positive");
        }
        if !(self.omega > 0.0) {
            return bad("omega", "must be positive");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma", "must be non-negative");
        }
        if !(self.g >= 0.0) {
            return bad("g", "must be non-negative");
        }
        Ok(())
    }

    pub fn drive_period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    /// Default step: a thousandth of a drive period.
    pub fn default_dt(&self) -> f64 {
        1e-3 * self.drive_period()
    }

    /// Undriven, undamped energy `v²/2 + β²x⁴/4 − x²/2`.
    pub fn energy(&self, s: &ClassicalState) -> f64 {
        0.5 * s.v * s.v + 0.25 * self.beta * self.beta * s.x.powi(4) - 0.5 * s.x * s.x
    }
}

/// Right-hand side `(ẋ, v̇)`.
pub fn classical_rhs(s: &ClassicalState, p: &ClassicalParams) -> (f64, f64) {
    let dv = -2.0 * p.gamma * s.v - p.beta * p.beta * s.x.powi(3) + s.x
        + (p.g / p.beta) * (p.omega * s.t).cos();
    (s.v, dv)
}

/// One classical RK4 step.
pub fn rk4_step(s: &ClassicalState, p: &ClassicalParams, dt: f64) -> ClassicalState {
    let h = 0.5 * dt;
    let (k1x, k1v) = classical_rhs(s, p);
    let s2 = ClassicalState::new(s.x + h * k1x, s.v + h * k1v, s.t + h);
    let (k2x, k2v) = classical_rhs(&s2, p);
    let s3 = ClassicalState::new(s.x + h * k2x, s.v + h * k2v, s.t + h);
    let (k3x, k3v) = classical_rhs(&s3, p);
    let s4 = ClassicalState::new(s.x + dt * k3x, s.v + dt * k3v, s.t + dt);
    let (k4x, k4v) = classical_rhs(&s4, p);
    ClassicalState {
        x: s.x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        v: s.v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
        t: s.t + dt,
    }
}

/// Fixed-step time series of the classical flow.
#[derive(Debug, Clone)]
pub struct ClassicalTrajectory {
    pub params: ClassicalParams,
    pub dt: f64,
    pub states: Vec<ClassicalState>,
}

impl ClassicalTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &ClassicalState {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// Cubic Hermite interpolation of `(x, v)` at time `t` inside the series.
    pub fn interpolate(&self, t: f64) -> Option<ClassicalState> {
        let t0 = self.states.first()?.t;
        let pos = (t - t0) / self.dt;
        if pos < -1e-9 || pos > (self.states.len() - 1) as f64 + 1e-9 {
            return None;
        }
        let i = (pos.floor().max(0.0) as usize).min(self.states.len().saturating_sub(2));
        let a = &self.states[i];
        let frac = pos - i as f64;
        if frac.abs() < 1e-9 || self.states.len() == 1 {
            return Some(ClassicalState::new(a.x, a.v, t));
        }
        let b = &self.states[i + 1];
        if (frac - 1.0).abs() < 1e-9 {
            return Some(ClassicalState::new(b.x, b.v, t));
        }
        let (_, aa) = classical_rhs(a, &self.params);
        let (_, ab) = classical_rhs(b, &self.params);
        let h = self.dt;
        let s = frac;
        let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
        let h10 = s.powi(3) - 2.0 * s * s + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
        let h11 = s.powi(3) - s * s;
        let x = h00 * a.x + h10 * h * a.v + h01 * b.x + h11 * h * b.v;
        let v = h00 * a.v + h10 * h * aa + h01 * b.v + h11 * h * ab;
        Some(ClassicalState::new(x, v, t))
    }
}

pub fn integrate_classical(
    s0: ClassicalState,
    p: &ClassicalParams,
    t_end: f64,
    dt: f64,
) -> Result<ClassicalTrajectory, ClassicalError> {
    p.validate()?;
    if !(dt > 0.0) || dt > 1e-2 * p.drive_period() {
        return Err(ClassicalError::InvalidParameter {
            name: "dt",
            reason: format!("{dt} must lie in (0, 1e-2 drive periods]"),
        });
    }
    let steps = ((t_end - s0.t) / dt).round().max(0.0) as usize;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(s0);
    let mut s = s0;
    for k in 1..=steps {
        s = rk4_step(&s, p, dt);
        // re-anchor time to avoid accumulated rounding in t
        s.t = s0.t + k as f64 * dt;
        if !(s.x.is_finite() && s.v.is_finite()) {
            return Err(ClassicalError::NonFinite { t: s.t });
        }
        states.push(s);
    }
    Ok(ClassicalTrajectory {
        params: *p,
        dt,
        states,
    })
}

/// Rescaled Poincaré point `(X, P) = (βx, βẋ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoincarePoint {
    pub period: usize,
    pub x: f64,
    pub p: f64,
}

/// Strobes the trajectory at `t = 2πk/Ω` for `k = transient+1 ..= ⌊t_end Ω/2π⌋`.
pub fn poincare_section(
    traj: &ClassicalTrajectory,
    omega: f64,
    transient_periods: usize,
) -> Vec<PoincarePoint> {
    let period = 2.0 * PI / omega;
    let t_last = traj.last().t;
    let k_max = (t_last / period + 1e-9).floor() as usize;
    let beta = traj.params.beta;
    (transient_periods + 1..=k_max)
        .filter_map(|k| {
            traj.interpolate(k as f64 * period).map(|s| PoincarePoint {
                period: k,
                x: beta * s.x,
                p: beta * s.v,
            })
        })
        .collect()
}

/// Settings for the twin-trajectory classical Lyapunov estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenettinSettings {
    /// Accumulation time after the transient.
    pub t_end: f64,
    pub d0: f64,
    pub reset_period: f64,
    pub dt: f64,
    pub transient: f64,
    pub initial: (f64, f64),
}

impl BenettinSettings {
    /// 5000 drive periods after a 200-period transient, `d0 = 1e-6`,
    /// resets every drive period, starting at the right-hand well minimum.
    pub fn defaults_for(p: &ClassicalParams) -> Self {
        let period = p.drive_period();
        Self {
            t_end: 5000.0 * period,
            d0: 1e-6,
            reset_period: period,
            dt: p.default_dt(),
            transient: 200.0 * period,
            initial: (1.0 / p.beta, 0.0),
        }
    }
}

/// Largest Lyapunov exponent by periodic renormalization of a twin trajectory.
///
/// The separation is measured in the unscaled `(x, ẋ)` plane and rescaled to
/// `d0` along its current direction every `reset_period`.
pub fn classical_lyapunov(
    p: &ClassicalParams,
    settings: &BenettinSettings,
) -> Result<f64, ClassicalError> {
    p.validate()?;
    let BenettinSettings {
        t_end,
        d0,
        reset_period,
        dt,
        transient,
        initial,
    } = *settings;
    if !(1e-9..=1e-3).contains(&d0) {
        return Err(ClassicalError::InvalidParameter {
            name: "d0",
            reason: format!("{d0} outside [1e-9, 1e-3]"),
        });
    }
    if !(dt > 0.0) || dt > 1e-2 * p.drive_period() {
        return Err(ClassicalError::InvalidParameter {
            name: "dt",
            reason: format!("{dt} must lie in (0, 1e-2 drive periods]"),
        });
    }
    if !(reset_period >= dt) {
        return Err(ClassicalError::InvalidParameter {
            name: "reset_period",
            reason: "must be at least one step".into(),
        });
    }
    let transient_steps = (transient / dt).round() as usize;
    let steps_per_window = (reset_period / dt).round().max(1.0) as usize;
    let windows = ((t_end / dt).round() as usize / steps_per_window).max(1);

    let mut step_count = 0usize;
    let mut advance = |s: &ClassicalState| {
        let mut next = rk4_step(s, p, dt);
        step_count += 1;
        next.t = step_count as f64 * dt;
        next
    };
    let mut a = ClassicalState::new(initial.0, initial.1, 0.0);
    for _ in 0..transient_steps {
        a = advance(&a);
    }
    let t_ref = a.t;
    let mut b = ClassicalState::new(a.x + d0, a.v, a.t);

    let mut log_sum = 0.0;
    for _ in 0..windows {
        for _ in 0..steps_per_window {
            // b shares a's clock
            let nb = rk4_step(&b, p, dt);
            a = advance(&a);
            b = ClassicalState::new(nb.x, nb.v, a.t);
        }
        if !(a.x.is_finite() && a.v.is_finite() && b.x.is_finite() && b.v.is_finite()) {
            return Err(ClassicalError::NonFinite { t: a.t });
        }
        let dx = b.x - a.x;
        let dv = b.v - a.v;
        let d = dx.hypot(dv);
        log_sum += (d / d0).ln();
        let scale = d0 / d;
        b = ClassicalState::new(a.x + dx * scale, a.v + dv * scale, a.t);
    }
    Ok(log_sum / (a.t - t_ref))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rhs_examples() {
        let p = ClassicalParams::canonical(0.3);
        let (_, dv) = classical_rhs(&ClassicalState::new(0.0, 0.0, 0.0), &p);
        assert_abs_diff_eq!(dv, 1.0, epsilon = 1e-15);

        let undriven = ClassicalParams { g: 0.0, ..p };
        let (_, dv) = classical_rhs(&ClassicalState::new(1.0 / 0.3, 0.0, 0.0), &undriven);
        assert_abs_diff_eq!(dv, 0.0, epsilon = 1e-12);
        let (dx, dv) = classical_rhs(&ClassicalState::new(0.0, 1.0, 0.0), &undriven);
        assert_eq!(dx, 1.0);
        assert_abs_diff_eq!(dv, -0.2, epsilon = 1e-15);
    }

    #[test]
    fn damped_relaxation_to_well() {
        let p = ClassicalParams {
            g: 0.0,
            ..ClassicalParams::canonical(0.3)
        };
        let traj =
            integrate_classical(ClassicalState::new(2.5, 0.3, 0.0), &p, 300.0, p.default_dt())
                .unwrap();
        let end = traj.last();
        assert_abs_diff_eq!(end.x, 1.0 / 0.3, epsilon = 1e-6);
        assert_abs_diff_eq!(end.v, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn hamiltonian_limit_conserves_energy() {
        let p = ClassicalParams {
            gamma: 0.0,
            g: 0.0,
            omega: 1.0,
            beta: 0.3,
        };
        let s0 = ClassicalState::new(0.5, 0.8, 0.0);
        let traj = integrate_classical(s0, &p, 100.0 * p.drive_period(), p.default_dt()).unwrap();
        let e0 = p.energy(&s0);
        let drift = traj
            .states
            .iter()
            .map(|s| (p.energy(s) - e0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6, "energy drift {drift}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ClassicalParams::canonical(0.0);
        assert!(p.validate().is_err());
        let p = ClassicalParams::canonical(0.3);
        let s0 = ClassicalState::new(0.0, 0.0, 0.0);
        assert!(integrate_classical(s0, &p, 10.0, 0.5).is_err());
        let mut st = BenettinSettings::defaults_for(&p);
        st.d0 = 1e-2;
        assert!(classical_lyapunov(&p, &st).is_err());
    }

    #[test]
    fn strobe_count_and_locked_orbit() {
        let p = ClassicalParams {
            g: 0.02,
            ..ClassicalParams::canonical(0.3)
        };
        let period = p.drive_period();
        let t_end = 400.5 * period;
        let traj =
            integrate_classical(ClassicalState::new(1.0 / 0.3, 0.0, 0.0), &p, t_end, p.default_dt())
                .unwrap();
        let pts = poincare_section(&traj, p.omega, 200);
        assert_eq!(pts.len(), 400 - 200);
        // small drive: period-1 response inside one well
        let (x0, p0) = (pts[0].x, pts[0].p);
        for pt in &pts {
            assert!((pt.x - x0).abs() < 1e-6 && (pt.p - p0).abs() < 1e-6);
        }
    }

    #[test]
    fn interpolation_matches_direct_integration_off_grid() {
        let p = ClassicalParams::canonical(0.3);
        let dt = p.default_dt();
        let traj = integrate_classical(ClassicalState::new(1.0, 0.0, 0.0), &p, 5.0, dt).unwrap();
        let t_grid = 318.0 * dt;
        let s = traj.interpolate(t_grid + 0.37 * dt).unwrap();
        let fine =
            integrate_classical(ClassicalState::new(1.0, 0.0, 0.0), &p, t_grid, dt).unwrap();
        let direct = rk4_step(fine.last(), &p, 0.37 * dt);
        assert_abs_diff_eq!(s.x, direct.x, epsilon = 1e-10);
        assert_abs_diff_eq!(s.v, direct.v, epsilon = 1e-9);
    }
}

//! Adaptive Dormand–Prince 5(4) integration with PI step control and
//! radius-crossing detection.

use serde::{Deserialize, Serialize};

use super::{norm, ExitStatus, Trajectory, VectorField};
use crate::error::{Error, Result};

/// Tolerances and guards for the adaptive integrator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Trajectories whose state norm exceeds this are aborted with `StateOverflow`.
    pub norm_cap: f64,
    pub min_step: f64,
    pub max_steps: usize,
    /// Width in time to which a radius crossing is localized.
    pub event_time_tol: f64,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            abs_tol: 1e-11,
            norm_cap: 1e8,
            min_step: 1e-14,
            max_steps: 10_000_000,
            event_time_tol: 1e-10,
        }
    }
}

impl IntegratorSettings {
    /// Relative tolerance `tol`, absolute `tol / 100`, event localization to `tol`.
    pub fn with_tol(tol: f64) -> Self {
        Self {
            rel_tol: tol,
            abs_tol: tol * 1e-2,
            event_time_tol: tol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.event_time_tol > 0.0) {
            return Err(Error::InvalidInput("integrator tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum StepControl {
    Continue,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum StopReason {
    ReachedEnd,
    Event,
    Observer,
}

#[derive(Debug)]
pub(crate) struct Outcome {
    pub t: f64,
    pub y: Vec<f64>,
    pub reason: StopReason,
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// PI controller constants (Hairer, Nørsett & Wanner).
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl Stages {
    fn new(m: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; m]),
            tmp: vec![0.0; m],
        }
    }
}

/// One Dormand–Prince step from `(t, y)` with `k[0] = rhs(t, y)` already set.
/// Writes the 5th-order solution to `y_new`, the error estimate to `err`
/// and the FSAL stage to `k[6]`.
fn dp_step<F>(rhs: &F, t: f64, y: &[f64], h: f64, s: &mut Stages, y_new: &mut [f64], err: &mut [f64])
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let m = y.len();
    let Stages { k, tmp } = s;
    for i in 0..m {
        tmp[i] = y[i] + h * A21 * k[0][i];
    }
    rhs(t + C2 * h, tmp, &mut k[1]);
    for i in 0..m {
        tmp[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i]);
    }
    rhs(t + C3 * h, tmp, &mut k[2]);
    for i in 0..m {
        tmp[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
    }
    rhs(t + C4 * h, tmp, &mut k[3]);
    for i in 0..m {
        tmp[i] = y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
    }
    rhs(t + C5 * h, tmp, &mut k[4]);
    for i in 0..m {
        tmp[i] = y[i]
            + h * (A61 * k[0][i] + A62 * k[1][i] + A63 * k[2][i] + A64 * k[3][i] + A65 * k[4][i]);
    }
    rhs(t + h, tmp, &mut k[5]);
    for i in 0..m {
        y_new[i] = y[i]
            + h * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i] + B5 * k[4][i] + B6 * k[5][i]);
    }
    rhs(t + h, y_new, &mut k[6]);
    for i in 0..m {
        err[i] = h
            * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
    }
}

fn error_norm(y: &[f64], y_new: &[f64], err: &[f64], cfg: &IntegratorSettings) -> f64 {
    let m = y.len() as f64;
    let sum: f64 = y
        .iter()
        .zip(y_new)
        .zip(err)
        .map(|((a, b), e)| {
            let sc = cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / m).sqrt()
}

fn initial_step<F>(rhs: &F, t: f64, y: &[f64], f0: &[f64], span: f64, cfg: &IntegratorSettings) -> f64
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let m = y.len() as f64;
    let sc: Vec<f64> = y.iter().map(|v| cfg.abs_tol + cfg.rel_tol * v.abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / m).sqrt();
    let d1 = (f0.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / m).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(v, d)| v + h0 * d).collect();
    let mut f1 = vec![0.0; y.len()];
    rhs(t + h0, &y1, &mut f1);
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(&sc)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / m)
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Integrates `y' = rhs(t, y)` from `t = 0` to `t_end`.
///
/// The first `n_state` components of `y` are the dynamical state: the norm cap
/// and the optional radius event apply to them only. Remaining components are
/// quadrature variables that take part in error control. `observer` sees every
/// accepted step (and the initial point) and may stop the run.
pub(crate) fn integrate<F, O>(
    rhs: &F,
    n_state: usize,
    y0: &[f64],
    t_end: f64,
    event_radius: Option<f64>,
    cfg: &IntegratorSettings,
    mut observer: O,
) -> Result<Outcome>
where
    F: Fn(f64, &[f64], &mut [f64]),
    O: FnMut(f64, &[f64]) -> StepControl,
{
    cfg.validate()?;
    if !(t_end >= 0.0) {
        return Err(Error::InvalidInput(format!("integration horizon must be non-negative, got {t_end}")));
    }
    let m = y0.len();
    let mut t = 0.0;
    let mut y = y0.to_vec();
    let mut y_new = vec![0.0; m];
    let mut err = vec![0.0; m];
    let mut st = Stages::new(m);

    let event_sign = match event_radius {
        Some(r) => {
            let g = norm(&y[..n_state]) - r;
            if g == 0.0 {
                return Err(Error::InvalidInput(format!("initial state lies on the event sphere of radius {r}")));
            }
            Some(g.signum())
        }
        None => None,
    };

    if observer(t, &y) == StepControl::Stop {
        return Ok(Outcome { t, y, reason: StopReason::Observer });
    }
    if t_end == 0.0 {
        return Ok(Outcome { t, y, reason: StopReason::ReachedEnd });
    }

    rhs(t, &y, &mut st.k[0]);
    let mut h = initial_step(rhs, t, &y, &st.k[0], t_end, cfg);
    let mut err_prev: f64 = 1e-4;
    let mut rejected_last = false;
    let mut steps = 0usize;

    loop {
        if steps >= cfg.max_steps {
            return Err(Error::StepSizeUnderflow { t, h });
        }
        steps += 1;
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        if h < cfg.min_step && !last {
            return Err(Error::StepSizeUnderflow { t, h });
        }
        dp_step(rhs, t, &y, h, &mut st, &mut y_new, &mut err);
        let e = error_norm(&y, &y_new, &err, cfg);

        if !e.is_finite() || e > 1.0 {
            let fac = if e.is_finite() {
                (SAFETY * e.powf(-ALPHA)).max(FAC_MIN)
            } else {
                FAC_MIN
            };
            h *= fac;
            rejected_last = true;
            if h < cfg.min_step {
                return Err(Error::StepSizeUnderflow { t, h });
            }
            continue;
        }

        // Accepted.
        let t_new = if last { t_end } else { t + h };
        let state_norm = norm(&y_new[..n_state]);
        if !(state_norm <= cfg.norm_cap) {
            return Err(Error::StateOverflow { t: t_new, norm: state_norm, cap: cfg.norm_cap });
        }

        if let (Some(r), Some(sign)) = (event_radius, event_sign) {
            let g_new = state_norm - r;
            if g_new == 0.0 || g_new.signum() != sign {
                let (t_hit, y_hit) = locate_crossing(rhs, n_state, t, &y, h, r, sign, cfg, &mut st);
                observer(t_hit, &y_hit);
                return Ok(Outcome { t: t_hit, y: y_hit, reason: StopReason::Event });
            }
        }

        std::mem::swap(&mut y, &mut y_new);
        t = t_new;
        st.k.swap(0, 6);

        if observer(t, &y) == StepControl::Stop {
            return Ok(Outcome { t, y, reason: StopReason::Observer });
        }
        if last {
            return Ok(Outcome { t, y, reason: StopReason::ReachedEnd });
        }

        let e_c = e.max(1e-10);
        let mut fac = SAFETY * e_c.powf(-ALPHA) * err_prev.powf(BETA);
        fac = fac.clamp(FAC_MIN, FAC_MAX);
        if rejected_last {
            fac = fac.min(1.0);
        }
        h *= fac;
        err_prev = e_c;
        rejected_last = false;
    }
}

/// Bisection on the step `[t, t + h]` for the first point where the state
/// norm crosses `radius`. `s.k[0]` must hold `rhs(t, y)`.
#[allow(clippy::too_many_arguments)]
fn locate_crossing<F>(
    rhs: &F,
    n_state: usize,
    t: f64,
    y: &[f64],
    h: f64,
    radius: f64,
    sign: f64,
    cfg: &IntegratorSettings,
    s: &mut Stages,
) -> (f64, Vec<f64>)
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let m = y.len();
    let mut y_mid = vec![0.0; m];
    let mut err = vec![0.0; m];
    let (mut lo, mut hi) = (0.0, h);
    let mut iterations = 0;
    while hi - lo > cfg.event_time_tol && iterations < 200 {
        let mid = 0.5 * (lo + hi);
        dp_step(rhs, t, y, mid, s, &mut y_mid, &mut err);
        let g = norm(&y_mid[..n_state]) - radius;
        if g != 0.0 && g.signum() == sign {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    dp_step(rhs, t, y, hi, s, &mut y_mid, &mut err);
    (t + hi, y_mid)
}

fn check_state(f: &VectorField, x0: &[f64]) -> Result<()> {
    if x0.len() != f.dim() {
        return Err(Error::DimensionMismatch { expected: f.dim(), got: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial state must be finite".into()));
    }
    Ok(())
}

/// Flow of `f` from `x0` over duration `t`.
///
/// A negative `t` integrates the reversed field for `|t|`; the recorded times
/// are then elapsed backward time.
pub fn flow(f: &VectorField, x0: &[f64], t: f64, settings: &IntegratorSettings) -> Result<Trajectory> {
    check_state(f, x0)?;
    if t < 0.0 {
        return flow(&f.reversed(), x0, -t, settings);
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| f.eval_into(y, dy);
    integrate(&rhs, f.dim(), x0, t, None, settings, |ti, yi| {
        times.push(ti);
        states.push(yi.to_vec());
        StepControl::Continue
    })?;
    Ok(Trajectory {
        times,
        states,
        exit_status: ExitStatus::Completed,
        exit_time: None,
    })
}

/// Flow of `f` from `x0` until `|x(t)|` first crosses `radius`, or `t_max`.
///
/// Reaching `t_max` is reported through `exit_status`, not as an error.
pub fn flow_until(
    f: &VectorField,
    x0: &[f64],
    radius: f64,
    t_max: f64,
    settings: &IntegratorSettings,
) -> Result<Trajectory> {
    check_state(f, x0)?;
    if !(t_max > 0.0) {
        return Err(Error::InvalidInput(format!("t_max must be positive, got {t_max}")));
    }
    outward_guard(f, x0, radius)?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| f.eval_into(y, dy);
    let out = integrate(&rhs, f.dim(), x0, t_max, Some(radius), settings, |ti, yi| {
        times.push(ti);
        states.push(yi.to_vec());
        StepControl::Continue
    })?;
    let (exit_status, exit_time) = match out.reason {
        StopReason::Event => (ExitStatus::HitEvent, Some(out.t)),
        _ => (ExitStatus::MaxTimeExceeded, None),
    };
    Ok(Trajectory { times, states, exit_status, exit_time })
}

/// Starting outside the event sphere with a non-inward velocity cannot bracket a crossing.
pub(crate) fn outward_guard(f: &VectorField, x0: &[f64], radius: f64) -> Result<()> {
    let r0 = norm(x0);
    if r0 > radius {
        let v = f.eval(x0);
        let radial: f64 = x0.iter().zip(&v).map(|(a, b)| a * b).sum();
        if radial >= 0.0 {
            return Err(Error::NonBracketedEvent { radius, norm: r0 });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn decay() -> VectorField {
        VectorField::new(1, |x, out| out[0] = -x[0])
    }

    fn growth() -> VectorField {
        VectorField::new(1, |x, out| out[0] = x[0])
    }

    fn hamiltonian_b() -> VectorField {
        VectorField::new(2, |x, out| {
            out[0] = -x[0].powi(3) - 0.5 * x[1];
            out[1] = -2.0 * x[0] + 3.0 * x[0] * x[0] * x[1];
        })
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let tol = 1e-9;
        let tr = flow(&decay(), &[1.0], 1.0, &IntegratorSettings::with_tol(tol)).unwrap();
        assert!((tr.final_state()[0] - (-1.0f64).exp()).abs() < tol);
        assert_eq!(tr.times[0], 0.0);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(tr.final_time(), 1.0);
    }

    #[test]
    fn zero_field_keeps_state_constant() {
        let f = VectorField::linear(DMatrix::zeros(2, 2));
        let tr = flow(&f, &[0.7, -3.0], 5.0, &IntegratorSettings::default()).unwrap();
        assert!(tr.states.iter().all(|s| s == &vec![0.7, -3.0]));
    }

    #[test]
    fn stable_direction_contracts_initially() {
        // Stable eigenvector of A = [[0,-0.5],[-2,0]] for eigenvalue -1 is (1, 2).
        let eps = 1e-3;
        let x0 = [eps / 5f64.sqrt(), 2.0 * eps / 5f64.sqrt()];
        let cfg = IntegratorSettings::default();
        let tr = flow(&hamiltonian_b(), &x0, 0.5, &cfg).unwrap();
        let n0 = norm(&x0);
        let n_end = norm(tr.final_state());
        assert!(n_end < n0);
        let expected = n0 * (-0.5f64).exp();
        assert!((n_end - expected).abs() < 1e-3 * n0, "{n_end} vs {expected}");
    }

    #[test]
    fn event_time_for_growth() {
        let cfg = IntegratorSettings::with_tol(1e-9);
        let tr = flow_until(&growth(), &[1.0], std::f64::consts::E, 10.0, &cfg).unwrap();
        assert_eq!(tr.exit_status, ExitStatus::HitEvent);
        assert!((tr.exit_time.unwrap() - 1.0).abs() < 1e-8);
        assert!((tr.final_state()[0] - std::f64::consts::E).abs() < 1e-8);
    }

    #[test]
    fn contracting_flow_times_out() {
        let tr = flow_until(&decay(), &[0.5], 3.0, 10.0, &IntegratorSettings::default()).unwrap();
        assert_eq!(tr.exit_status, ExitStatus::MaxTimeExceeded);
        assert!(tr.exit_time.is_none());
    }

    #[test]
    fn outward_start_beyond_radius_is_not_bracketed() {
        let err = flow_until(&growth(), &[4.0], 3.0, 10.0, &IntegratorSettings::default()).unwrap_err();
        assert!(matches!(err, Error::NonBracketedEvent { .. }));
    }

    #[test]
    fn inward_crossing_from_outside_is_detected() {
        let tr = flow_until(&decay(), &[4.0], 2.0, 10.0, &IntegratorSettings::with_tol(1e-10)).unwrap();
        assert!((tr.exit_time.unwrap() - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn blow_up_hits_norm_cap() {
        let f = VectorField::new(1, |x, out| out[0] = x[0] * x[0]);
        let err = flow(&f, &[1.0], 2.0, &IntegratorSettings::default()).unwrap_err();
        assert!(matches!(err, Error::StateOverflow { .. } | Error::StepSizeUnderflow { .. }));
    }

    #[test]
    fn time_reversal_returns_to_start() {
        let f = hamiltonian_b();
        let cfg = IntegratorSettings::with_tol(1e-11);
        let x0 = [0.4, -0.3];
        let fwd = flow(&f, &x0, 1.5, &cfg).unwrap();
        let back = flow(&f.reversed(), fwd.final_state(), 1.5, &cfg).unwrap();
        for (a, b) in back.final_state().iter().zip(&x0) {
            assert!((a - b).abs() < 1e-8);
        }
        let neg = flow(&f, fwd.final_state(), -1.5, &cfg).unwrap();
        assert_eq!(neg.final_state(), back.final_state());
    }

    #[test]
    fn halving_tolerance_does_not_increase_error() {
        let exact = (-2.0f64).exp();
        let mut prev = f64::INFINITY;
        for k in 0..6 {
            let tol = 1e-6 / 2f64.powi(k);
            let tr = flow(&decay(), &[1.0], 2.0, &IntegratorSettings::with_tol(tol)).unwrap();
            let e = (tr.final_state()[0] - exact).abs();
            assert!(e <= prev * 1.5 + 1e-15, "tol {tol}: {e} > {prev}");
            prev = prev.min(e);
        }
    }

    #[test]
    fn states_agree_with_tighter_reintegration() {
        let f = hamiltonian_b();
        let cfg = IntegratorSettings::with_tol(1e-8);
        let tr = flow(&f, &[0.8, 0.2], 1.0, &cfg).unwrap();
        let tight = IntegratorSettings::with_tol(5e-9);
        for (t, s) in tr.times.iter().zip(&tr.states).step_by(7) {
            let re = flow(&f, &[0.8, 0.2], *t, &tight).unwrap();
            for (a, b) in re.final_state().iter().zip(s) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn semigroup_property(x1 in -2.0f64..2.0, x2 in -2.0f64..2.0, t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
            // Globally Lipschitz: a damped rotation with a bounded nonlinear coupling.
            let f = VectorField::new(2, |x, o| {
                o[0] = -0.5 * x[0] + x[1] + 0.5 * x[1].sin();
                o[1] = -x[0] - 0.5 * x[1];
            });
            let tol = 1e-9;
            let cfg = IntegratorSettings::with_tol(tol);
            let whole = flow(&f, &[x1, x2], t1 + t2, &cfg).unwrap();
            let first = flow(&f, &[x1, x2], t1, &cfg).unwrap();
            let second = flow(&f, first.final_state(), t2, &cfg).unwrap();
            for (a, b) in whole.final_state().iter().zip(second.final_state()) {
                prop_assert!((a - b).abs() <= 10.0 * tol * (1.0 + a.abs()));
            }
        }
    }
}

//! Fixed-step RK4 integration with cubic Hermite dense output, event
//! localization, and event-time gradients through the unrolled solver.

use std::cell::Cell;

use autodiff::{Backend, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{NetcError, Result};

pub const MAX_BISECTIONS: usize = 40;
pub const TANGENTIAL_TOL: f64 = 1e-10;

thread_local! {
    static SOLVER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `integrate`/`find_event` calls made on this thread so far.
pub fn solver_calls() -> u64 {
    SOLVER_CALLS.with(Cell::get)
}

fn count_call() {
    SOLVER_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationConfig {
    pub step: f64,
    pub max_steps: usize,
    pub event_tol: f64,
    /// Steps after the start of a solve during which no event may fire.
    pub min_dwell_steps: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { step: 0.01, max_steps: 10_000_000, event_tol: 1e-9, min_dwell_steps: 1 }
    }
}

impl IntegrationConfig {
    pub fn with_step(step: f64) -> Self {
        Self { step, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.event_tol > 0.0) || self.event_tol >= self.step {
            return Err(NetcError::Config(format!(
                "integration needs step > event_tol > 0, got step {} and event_tol {}",
                self.step, self.event_tol
            )));
        }
        Ok(())
    }
}

/// Knots of an RK4 solution with the field values needed for Hermite output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub derivs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one knot")
    }

    /// Dense output at `t` (clamped to the solved range).
    pub fn at(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let (ta, tb) = (self.times[i], self.times[i + 1]);
        hermite(&self.states[i], &self.derivs[i], &self.states[i + 1], &self.derivs[i + 1], tb - ta, (t - ta) / (tb - ta))
    }
}

fn axpy(x: &[f64], c: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + c * b).collect()
}

/// One classical RK4 step; `k1` is `field(x)` when already known.
pub fn rk4_step(field: &mut impl FnMut(&[f64]) -> Vec<f64>, x: &[f64], k1: &[f64], h: f64) -> Vec<f64> {
    let k2 = field(&axpy(x, 0.5 * h, k1));
    let k3 = field(&axpy(x, 0.5 * h, &k2));
    let k4 = field(&axpy(x, h, &k3));
    x.iter()
        .enumerate()
        .map(|(i, xi)| xi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Cubic Hermite interpolant at fraction `theta` of a step of length `h`.
pub fn hermite(xa: &[f64], fa: &[f64], xb: &[f64], fb: &[f64], h: f64, theta: f64) -> Vec<f64> {
    let [h00, h10, h01, h11] = hermite_basis(theta);
    (0..xa.len())
        .map(|i| h00 * xa[i] + h10 * h * fa[i] + h01 * xb[i] + h11 * h * fb[i])
        .collect()
}

fn hermite_basis(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [2.0 * t3 - 3.0 * t2 + 1.0, t3 - 2.0 * t2 + t, -2.0 * t3 + 3.0 * t2, t3 - t2]
}

fn finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Integrates the autonomous field from `t0` to `t1`.
pub fn integrate(
    mut field: impl FnMut(&[f64]) -> Vec<f64>,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegrationConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if !(t1 > t0) {
        return Err(NetcError::Contract(format!("integration interval [{t0}, {t1}] is empty")));
    }
    count_call();
    let mut t = t0;
    let mut x = x0.to_vec();
    let mut f = field(&x);
    let mut traj = Trajectory { times: vec![t], states: vec![x.clone()], derivs: vec![f.clone()] };
    let mut steps = 0;
    while t < t1 {
        let h = cfg.step.min(t1 - t);
        let xn = rk4_step(&mut field, &x, &f, h);
        let fnext = field(&xn);
        if !finite(&xn) || !finite(&fnext) {
            return Err(NetcError::Divergence { t_last: t });
        }
        steps += 1;
        if steps > cfg.max_steps {
            return Err(NetcError::Contract(format!("more than {} integration steps", cfg.max_steps)));
        }
        // Snap the last knot onto t1 exactly.
        t = if t1 - (t + h) < 1e-12 * cfg.step { t1 } else { t + h };
        x = xn;
        f = fnext;
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.derivs.push(f.clone());
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSolveResult {
    pub t_event: f64,
    pub x_event: Vec<f64>,
    pub converged: bool,
    pub steps_taken: usize,
    /// The event was taken at the end of the dwell window rather than at a
    /// located sign change.
    pub at_dwell_boundary: bool,
    /// Knot interval containing the event.
    pub interval: (f64, f64),
    /// Knot times and states from the start up to (excluding) the event.
    pub knot_times: Vec<f64>,
    pub knot_states: Vec<Vec<f64>>,
}

/// First time after `t0` at which `h(x(t))` reaches zero from below.
///
/// With `min_dwell_steps = 0` the event must be inactive at the start.
/// Otherwise a start with `h ≥ 0` is permitted and the event then fires at
/// the end of the dwell window.
pub fn find_event(
    mut field: impl FnMut(&[f64]) -> Vec<f64>,
    mut h: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    t0: f64,
    t_max: f64,
    cfg: &IntegrationConfig,
) -> Result<EventSolveResult> {
    cfg.validate()?;
    count_call();
    let h0 = h(x0);
    if cfg.min_dwell_steps == 0 && h0 >= 0.0 {
        return Err(NetcError::EventActive { t0, h: h0 });
    }
    let mut t = t0;
    let mut x = x0.to_vec();
    let mut f = field(&x);
    let mut knot_times = vec![t];
    let mut knot_states = vec![x.clone()];
    let mut steps = 0usize;
    let mut h_prev = h0;
    while t_max - t > 1e-12 * cfg.step {
        let dt = cfg.step.min(t_max - t);
        let xn = rk4_step(&mut field, &x, &f, dt);
        let fnext = field(&xn);
        if !finite(&xn) || !finite(&fnext) {
            return Err(NetcError::Divergence { t_last: t });
        }
        steps += 1;
        if steps > cfg.max_steps {
            return Err(NetcError::Contract(format!("more than {} integration steps", cfg.max_steps)));
        }
        let tn = if t_max - (t + dt) < 1e-12 * cfg.step { t_max } else { t + dt };
        let hn = h(&xn);
        if steps <= cfg.min_dwell_steps {
            if steps == cfg.min_dwell_steps && hn >= 0.0 {
                return Ok(EventSolveResult {
                    t_event: tn,
                    x_event: xn,
                    converged: true,
                    steps_taken: steps,
                    at_dwell_boundary: true,
                    interval: (t, tn),
                    knot_times,
                    knot_states,
                });
            }
        } else if h_prev < 0.0 && hn >= 0.0 {
            let (te, xe) = bisect(&mut h, &x, &f, &xn, &fnext, t, tn, cfg.event_tol);
            return Ok(EventSolveResult {
                t_event: te,
                x_event: xe,
                converged: true,
                steps_taken: steps,
                at_dwell_boundary: false,
                interval: (t, tn),
                knot_times,
                knot_states,
            });
        }
        t = tn;
        x = xn;
        f = fnext;
        h_prev = hn;
        knot_times.push(t);
        knot_states.push(x.clone());
    }
    let x_event = knot_states.last().cloned().unwrap_or_default();
    let lo = knot_times.len().checked_sub(2).map_or(t0, |i| knot_times[i]);
    Ok(EventSolveResult {
        t_event: t_max,
        x_event,
        converged: false,
        steps_taken: steps,
        at_dwell_boundary: false,
        interval: (lo, t_max),
        knot_times,
        knot_states,
    })
}

/// Bisection on the Hermite interpolant; returns the right end of the final
/// bracket, where `h ≥ 0`.
#[allow(clippy::too_many_arguments)]
fn bisect(
    h: &mut impl FnMut(&[f64]) -> f64,
    xa: &[f64],
    fa: &[f64],
    xb: &[f64],
    fb: &[f64],
    ta: f64,
    tb: f64,
    tol: f64,
) -> (f64, Vec<f64>) {
    let dt = tb - ta;
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut x_hi = xb.to_vec();
    for _ in 0..MAX_BISECTIONS {
        if (hi - lo) * dt <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let xm = hermite(xa, fa, xb, fb, dt, mid);
        if h(&xm) >= 0.0 {
            hi = mid;
            x_hi = xm;
        } else {
            lo = mid;
        }
    }
    (ta + hi * dt, x_hi)
}

fn rk4_step_tape(tape: &Tape, field: &impl Fn(&Tape, &Var) -> Var, x: &Var, k1: &Var, h: f64) -> Var {
    let k2 = field(tape, &tape.add(x, &tape.scale(k1, 0.5 * h)));
    let k3 = field(tape, &tape.add(x, &tape.scale(&k2, 0.5 * h)));
    let k4 = field(tape, &tape.add(x, &tape.scale(&k3, h)));
    let sum = tape.add(&tape.add(k1, &tape.scale(&k2, 2.0)), &tape.add(&tape.scale(&k3, 2.0), &k4));
    tape.add(x, &tape.scale(&sum, h / 6.0))
}

/// Records the event time as a differentiable scalar on `tape`.
///
/// The solver steps of `result` are replayed on the tape from `x0`, the
/// Hermite interpolant is evaluated at a time leaf `s = t*`, and the
/// returned variable is `t* − (h − h(t*)) / ḣ`: its value is `t*` and its
/// derivative with respect to any parameter `p` is `−(∂h/∂p)/ḣ`, the
/// implicit-function derivative. Unconverged solves and dwell-boundary
/// events yield a constant.
pub fn event_time_gradient(
    tape: &Tape,
    field: impl Fn(&Tape, &Var) -> Var,
    h: impl Fn(&Tape, &Var) -> Var,
    x0: &Var,
    result: &EventSolveResult,
    cfg: &IntegrationConfig,
) -> Result<Var> {
    if !result.converged || result.at_dwell_boundary {
        return Ok(tape.scalar(result.t_event));
    }
    let mut x = x0.clone();
    for _ in 0..result.steps_taken - 1 {
        let k1 = field(tape, &x);
        x = rk4_step_tape(tape, &field, &x, &k1, cfg.step);
    }
    let (ta, tb) = result.interval;
    let dt = tb - ta;
    let fa = field(tape, &x);
    let xb = rk4_step_tape(tape, &field, &x, &fa, dt);
    let fb = field(tape, &xb);

    let s = tape.leaf(Tensor::scalar(result.t_event));
    let theta = tape.add_scalar(&tape.scale(&s, 1.0 / dt), -ta / dt);
    let t2 = tape.mul(&theta, &theta);
    let t3 = tape.mul(&t2, &theta);
    let poly = |c3: f64, c2: f64, c1: f64, c0: f64| {
        let p = tape.add(&tape.add(&tape.scale(&t3, c3), &tape.scale(&t2, c2)), &tape.scale(&theta, c1));
        tape.add_scalar(&p, c0)
    };
    let terms = [
        tape.matmul(&poly(2.0, -3.0, 0.0, 1.0), &x),
        tape.matmul(&poly(dt, -2.0 * dt, dt, 0.0), &fa),
        tape.matmul(&poly(-2.0, 3.0, 0.0, 0.0), &xb),
        tape.matmul(&poly(dt, -dt, 0.0, 0.0), &fb),
    ];
    let xs = tape.add(&tape.add(&terms[0], &terms[1]), &tape.add(&terms[2], &terms[3]));
    let hv = h(tape, &xs);
    let h_val = tape.value(&hv).item();
    let hdot = tape.backward(hv)?.wrt(s).item();
    if hdot.abs() < TANGENTIAL_TOL || !hdot.is_finite() {
        return Err(NetcError::Tangential { t: result.t_event, hdot });
    }
    let shifted = tape.scale(&hv, -1.0 / hdot);
    Ok(tape.add_scalar(&shifted, result.t_event + h_val / hdot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::ParameterSet;

    #[test]
    fn exponential_decay_and_order() {
        let cfg = IntegrationConfig::with_step(0.1);
        let tr = integrate(|x| vec![-x[0]], &[1.0], 0.0, 1.0, &cfg).unwrap();
        let e = (-1.0f64).exp();
        let err1 = (tr.final_state()[0] - e).abs();
        assert!(err1 < 1e-6);
        let tr2 = integrate(|x| vec![-x[0]], &[1.0], 0.0, 1.0, &IntegrationConfig::with_step(0.05)).unwrap();
        let ratio = err1 / (tr2.final_state()[0] - e).abs();
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
        assert_eq!(tr.times.len(), 11);
        assert_eq!(*tr.times.last().unwrap(), 1.0);
    }

    #[test]
    fn trivial_fields() {
        let cfg = IntegrationConfig::with_step(0.1);
        let tr = integrate(|_| vec![0.0, 0.0], &[3.0, -1.0], 0.0, 2.0, &cfg).unwrap();
        assert!(tr.states.iter().all(|s| s == &vec![3.0, -1.0]));
        let tr = integrate(|_| vec![1.0], &[0.0], 0.0, 1.0, &cfg).unwrap();
        for (t, x) in tr.times.iter().zip(&tr.states) {
            assert!((x[0] - t).abs() < 1e-14);
        }
        assert!((tr.at(0.55)[0] - 0.55).abs() < 1e-14);
        assert!(integrate(|_| vec![1.0], &[0.0], 1.0, 1.0, &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = IntegrationConfig::with_step(0.1);
        let err = integrate(|x| vec![x[0] * x[0] * 1e300], &[10.0], 0.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, NetcError::Divergence { .. }));
    }

    #[test]
    fn event_examples() {
        let cfg = IntegrationConfig { min_dwell_steps: 0, ..IntegrationConfig::with_step(0.01) };
        let r = find_event(|_| vec![1.0], |x| x[0] - 1.0, &[0.0], 0.0, 5.0, &cfg).unwrap();
        assert!(r.converged && (r.t_event - 1.0).abs() <= 1e-9);
        let r = find_event(|_| vec![1.0], |_| -1.0, &[0.0], 0.0, 5.0, &cfg).unwrap();
        assert!(!r.converged && r.t_event == 5.0);
        let r = find_event(|x| vec![-x[0]], |x| 1.0 - x[0], &[2.0], 0.0, 5.0, &cfg).unwrap();
        assert!((r.t_event - 2f64.ln()).abs() < 1e-6);
        assert!((1.0 - r.x_event[0]).abs() <= 1e-7);
        let err = find_event(|_| vec![1.0], |x| x[0], &[0.0], 0.0, 5.0, &cfg).unwrap_err();
        assert!(matches!(err, NetcError::EventActive { .. }));
    }

    #[test]
    fn first_crossing_is_returned() {
        // h = sin(2πt) − 0.5 crosses upward near t = 1/12 and again near 13/12.
        let cfg = IntegrationConfig { min_dwell_steps: 0, ..IntegrationConfig::with_step(0.01) };
        let tau = std::f64::consts::TAU;
        let r = find_event(|_| vec![1.0], |x| (tau * x[0]).sin() - 0.5, &[0.0], 0.0, 3.0, &cfg).unwrap();
        assert!((r.t_event - 1.0 / 12.0).abs() < 1e-8);
    }

    #[test]
    fn dwell_allows_active_start() {
        let cfg = IntegrationConfig::with_step(0.01);
        let r = find_event(|_| vec![1.0], |x| x[0], &[0.0], 0.0, 1.0, &cfg).unwrap();
        assert!(r.at_dwell_boundary && (r.t_event - 0.01).abs() < 1e-15);
    }

    fn ift_for(theta: f64) -> (f64, f64) {
        // Tight localization so that re-solving is a usable difference oracle.
        let cfg = IntegrationConfig { min_dwell_steps: 0, event_tol: 1e-14, ..IntegrationConfig::with_step(0.01) };
        let r = find_event(|_| vec![theta], |x| x[0] - 1.0, &[0.0], 0.0, 10.0, &cfg).unwrap();
        let tape = Tape::new();
        let mut p = ParameterSet::new();
        p.insert("theta", Tensor::scalar(theta));
        let x0 = tape.constant(Tensor::scalar(0.0));
        let field = |t: &Tape, _x: &Var| t.param("theta", &Tensor::scalar(theta));
        let h = |t: &Tape, x: &Var| t.add_scalar(x, -1.0);
        let tv = event_time_gradient(&tape, field, h, &x0, &r, &cfg).unwrap();
        let g = tape.grad(tv, &p).unwrap();
        (r.t_event, g.get("theta").unwrap().item())
    }

    #[test]
    fn event_time_gradient_matches_analytic() {
        let (t, g) = ift_for(2.0);
        assert!((t - 0.5).abs() < 1e-9);
        assert!((g + 0.25).abs() < 1e-9, "{g}");
        for theta in [0.7, 1.3, 3.1] {
            let (_, g) = ift_for(theta);
            let fd = (ift_for(theta + 1e-5).0 - ift_for(theta - 1e-5).0) / 2e-5;
            assert!(((g - fd) / fd).abs() < 1e-4, "theta {theta}: {g} vs {fd}");
        }
    }

    #[test]
    fn parameter_free_event_has_zero_gradient() {
        let cfg = IntegrationConfig { min_dwell_steps: 0, ..IntegrationConfig::with_step(0.01) };
        let r = find_event(|x| vec![-x[0]], |x| 1.0 - x[0], &[2.0], 0.0, 5.0, &cfg).unwrap();
        let tape = Tape::new();
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(1.0));
        let x0 = tape.constant(Tensor::scalar(2.0));
        let tv = event_time_gradient(&tape, |t, x| t.neg(x), |t, x| t.add_scalar(&t.neg(x), 1.0), &x0, &r, &cfg).unwrap();
        assert!((tape.value(&tv).item() - r.t_event).abs() < 1e-15);
        assert_eq!(tape.grad(tv, &p).unwrap().get("w").unwrap().item(), 0.0);
    }
}

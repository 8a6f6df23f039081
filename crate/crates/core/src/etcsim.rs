//! Event functions, event-triggered closed-loop simulation and the
//! trajectory metrics reported in the benchmark tables.
//!
//! Between triggers the control is held at `u(x(t_k))`, so the error state
//! `e(t) = x(t_k) − x(t)` is never integrated: it is recovered from the held
//! sample, which makes the reset `e(t_k⁺) = 0` exact.

use std::io::Write as _;
use std::path::Path;

use autodiff::{Backend, Eager, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{NetcError, Result};
use crate::model::Model;
use crate::nets::shift;
use crate::odeint::{find_event, integrate, IntegrationConfig};

pub const ZENO_LIMIT: usize = 1_000_000;
/// Distance to the target at which a simulation is considered finished.
pub const TARGET_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// `∇V·(f(x,u(x+e)) − f(x,u(x))) − σV(x)`.
    HSigmaV,
    /// `∇V·(f(x,u(x+e)) − f(x,u(x))) − σα(‖x − x*‖)`.
    HTilde,
    /// `∇V·(f(x,u(x+e)) − σf(x,u(x)))`.
    NlcRatio,
    /// `(σ−1)(x−x*)ᵀQ₁(x−x*) + 2(x−x*)ᵀ S B K e`.
    LqrQuadratic { q1: Tensor, sbk: Tensor },
    AlwaysNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFunction {
    #[serde(flatten)]
    pub kind: EventKind,
    pub sigma: f64,
}

impl EventFunction {
    pub fn new(kind: EventKind, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(NetcError::Contract(format!("event scale sigma must lie in (0, 1), got {sigma}")));
        }
        Ok(Self { kind, sigma })
    }

    /// Event value on a batch of states `x`, given the held samples `xk`
    /// and the held controls `uk = u(xk)`.
    pub fn value<B: Backend>(&self, b: &B, model: &Model, x: &B::T, xk: &B::T, uk: &B::T) -> Result<B::T> {
        let sys = &model.system;
        let (n, _) = b.dims(x);
        Ok(match &self.kind {
            EventKind::AlwaysNegative => b.add_scalar(&b.zeros(n, 1), -1.0),
            EventKind::HSigmaV | EventKind::HTilde => {
                let du = b.sub(uk, &model.u(b, x));
                let gap = b.row_dot(&model.grad_v(b, x), &sys.actuate(b, x, &du));
                let rate = match self.kind {
                    EventKind::HSigmaV => model.v(b, x),
                    _ => model.alpha_of_state(b, x)?,
                };
                b.sub(&gap, &b.scale(&rate, self.sigma))
            }
            EventKind::NlcRatio => {
                let held = sys.field(b, x, uk);
                let now = sys.field(b, x, &model.u(b, x));
                b.row_dot(&model.grad_v(b, x), &b.sub(&held, &b.scale(&now, self.sigma)))
            }
            EventKind::LqrQuadratic { q1, sbk } => {
                let xs = shift(b, x, model.target());
                let e = b.sub(xk, x);
                let decay = b.row_dot(&b.matmul(&xs, &b.constant(q1.clone())), &xs);
                let cross = b.row_dot(&b.matmul(&xs, &b.constant(sbk.clone())), &e);
                b.add(&b.scale(&decay, self.sigma - 1.0), &b.scale(&cross, 2.0))
            }
        })
    }

    /// Event value at a single `(x, e)` pair.
    pub fn eval(&self, model: &Model, x: &[f64], e: &[f64]) -> Result<f64> {
        let xt = Tensor::row(x);
        let xk = xt.add(&Tensor::row(e));
        let uk = model.u(&Eager, &xk);
        Ok(self.value(&Eager, model, &xt, &xk, &uk)?.item())
    }
}

/// A simulated event-triggered trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtcTrace {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Control applied from each grid point on.
    pub controls: Vec<Vec<f64>>,
    pub trigger_flags: Vec<bool>,
    /// `t₀ = 0` followed by every trigger instant.
    pub trigger_times: Vec<f64>,
    pub held_controls: Vec<Vec<f64>>,
    pub budget_exhausted_at: Option<f64>,
    pub reached_target_at: Option<f64>,
    pub horizon: f64,
}

impl EtcTrace {
    fn new(t0: f64, x0: Vec<f64>, u0: Vec<f64>, horizon: f64) -> Self {
        Self {
            times: vec![t0],
            states: vec![x0],
            controls: vec![u0.clone()],
            trigger_flags: vec![true],
            trigger_times: vec![t0],
            held_controls: vec![u0],
            budget_exhausted_at: None,
            reached_target_at: None,
            horizon,
        }
    }

    fn push(&mut self, t: f64, x: Vec<f64>, u: Vec<f64>, trigger: bool) {
        self.times.push(t);
        self.states.push(x);
        self.controls.push(u);
        self.trigger_flags.push(trigger);
    }

    pub fn num_triggers(&self) -> usize {
        self.trigger_times.len() - 1
    }

    /// Writes `t, x1..xd, u1..um, trigger_flag`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.states.first().map_or(0, Vec::len);
        let m = self.controls.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("trigger_flag".into());
        w.write_record(&header)?;
        for i in 0..self.times.len() {
            let mut row = vec![self.times[i].to_string()];
            row.extend(self.states[i].iter().map(f64::to_string));
            row.extend(self.controls[i].iter().map(f64::to_string));
            row.push(u8::from(self.trigger_flags[i]).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Event-triggered closed loop on `[0, horizon]`.
///
/// With a `budget`, after that many triggers the last control is held
/// until the horizon.
pub fn simulate_etc(
    model: &Model,
    event: &EventFunction,
    x0: &[f64],
    horizon: f64,
    budget: Option<usize>,
    cfg: &IntegrationConfig,
) -> Result<EtcTrace> {
    if x0.len() != model.dim() {
        return Err(NetcError::Contract(format!("initial state has {} entries, system needs {}", x0.len(), model.dim())));
    }
    let sys = &model.system;
    let mut trace = EtcTrace::new(0.0, x0.to_vec(), model.u_at(x0), horizon);
    let fail = |e: NetcError, trace: EtcTrace| NetcError::Simulation { source: Box::new(e), partial: Box::new(trace) };
    let mut t = 0.0;
    let mut xk = x0.to_vec();
    loop {
        let uk = trace.held_controls.last().unwrap().clone();
        if distance(&xk, model.target()) < TARGET_TOL {
            trace.reached_target_at = Some(t);
            if t < horizon {
                trace.push(horizon, xk.clone(), uk, false);
            }
            break;
        }
        let uk_t = Tensor::row(&uk);
        let field = |x: &[f64]| sys.field(&Eager, &Tensor::row(x), &uk_t).data;
        if budget.is_some_and(|b| trace.num_triggers() >= b) {
            trace.budget_exhausted_at = Some(t);
            if horizon - t > 1e-12 {
                let tail = integrate(field, &xk, t, horizon, cfg).map_err(|e| fail(e, trace.clone()))?;
                for (ti, xi) in tail.times.into_iter().zip(tail.states).skip(1) {
                    trace.push(ti, xi, uk.clone(), false);
                }
            }
            break;
        }
        let xk_t = Tensor::row(&xk);
        let mut h_err = None;
        let h = |x: &[f64]| match event.value(&Eager, model, &Tensor::row(x), &xk_t, &uk_t) {
            Ok(v) => v.item(),
            Err(e) => {
                h_err.get_or_insert(e);
                f64::NAN
            }
        };
        let res = find_event(field, h, &xk, t, horizon, cfg).map_err(|e| fail(e, trace.clone()))?;
        if let Some(e) = h_err {
            return Err(fail(e, trace));
        }
        for (ti, xi) in res.knot_times.iter().zip(res.knot_states).skip(1) {
            trace.push(*ti, xi, uk.clone(), false);
        }
        if !res.converged {
            break;
        }
        t = res.t_event;
        xk = res.x_event;
        let un = model.u_at(&xk);
        if !un.iter().all(|v| v.is_finite()) {
            return Err(fail(NetcError::NonFinite { what: "control", coord: 0 }, trace));
        }
        trace.push(t, xk.clone(), un.clone(), true);
        trace.trigger_times.push(t);
        trace.held_controls.push(un);
        if trace.num_triggers() > ZENO_LIMIT {
            return Err(NetcError::Zeno { limit: ZENO_LIMIT, t });
        }
        if horizon - t <= 1e-12 {
            break;
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtcMetrics {
    pub num_triggers: usize,
    /// Smallest gap between consecutive triggers after `t₀`; the horizon
    /// when fewer than two triggers occurred.
    pub min_inter_event: f64,
    pub mse_window: f64,
    /// Final-window MSE of the run with a trigger budget, when one was made.
    pub mse_budget: Option<f64>,
    pub temporal_variance: f64,
}

/// Triggers, inter-event gaps and final-window statistics of `trace`.
pub fn compute_metrics(trace: &EtcTrace, target: &[f64], window_frac: f64) -> Result<EtcMetrics> {
    if trace.times.is_empty() {
        return Err(NetcError::Contract("empty trace".into()));
    }
    if !(window_frac > 0.0 && window_frac <= 1.0) {
        return Err(NetcError::Contract(format!("window fraction must be in (0, 1], got {window_frac}")));
    }
    let events = &trace.trigger_times[1..];
    let min_inter_event = if events.len() < 2 {
        trace.horizon
    } else {
        events.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    };
    let (mse_window, temporal_variance) = window_stats(trace, target, window_frac);
    Ok(EtcMetrics {
        num_triggers: trace.num_triggers(),
        min_inter_event,
        mse_window,
        mse_budget: trace.budget_exhausted_at.map(|_| mse_window),
        temporal_variance,
    })
}

/// Time-averaged `‖x − x*‖²` and summed per-coordinate variance over the
/// last `frac` of the horizon, by the trapezoid rule on the trace grid.
fn window_stats(trace: &EtcTrace, target: &[f64], frac: f64) -> (f64, f64) {
    let t_end = trace.horizon;
    let t_start = t_end * (1.0 - frac);
    let mut pts: Vec<(f64, &[f64])> = Vec::new();
    let interp;
    let first = trace.times.partition_point(|&t| t < t_start);
    if first == trace.times.len() {
        let last = trace.states.last().unwrap();
        let d2 = last.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
        return (d2, 0.0);
    }
    if first > 0 && trace.times[first] > t_start {
        let (ta, tb) = (trace.times[first - 1], trace.times[first]);
        let w = (t_start - ta) / (tb - ta);
        interp = trace.states[first - 1]
            .iter()
            .zip(&trace.states[first])
            .map(|(a, b)| a + w * (b - a))
            .collect::<Vec<_>>();
        pts.push((t_start, &interp));
    }
    for i in first..trace.times.len() {
        pts.push((trace.times[i], &trace.states[i]));
    }
    let span = pts.last().unwrap().0 - pts[0].0;
    if span <= 0.0 {
        let d2 = pts[0].1.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
        return (d2, 0.0);
    }
    let trapz = |f: &dyn Fn(&[f64]) -> f64| {
        pts.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (f(w[0].1) + f(w[1].1))).sum::<f64>() / span
    };
    let mse = trapz(&|x| x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum());
    let d = target.len();
    let var = (0..d)
        .map(|j| {
            let mean = trapz(&|x| x[j]);
            trapz(&|x| (x[j] - mean).powi(2)).max(0.0)
        })
        .sum();
    (mse, var)
}

/// Runs the closed loop without and with a trigger budget and merges the
/// metrics of both runs.
pub fn evaluate_closed_loop(
    model: &Model,
    event: &EventFunction,
    x0: &[f64],
    budget: usize,
    window_frac: f64,
    cfg: &IntegrationConfig,
) -> Result<(EtcTrace, EtcMetrics)> {
    let horizon = model.system.horizon;
    let trace = simulate_etc(model, event, x0, horizon, None, cfg)?;
    let mut metrics = compute_metrics(&trace, model.target(), window_frac)?;
    let budgeted = simulate_etc(model, event, x0, horizon, Some(budget), cfg)?;
    metrics.mse_budget = Some(compute_metrics(&budgeted, model.target(), window_frac)?.mse_window);
    Ok((trace, metrics))
}

/// Writes metrics as pretty JSON.
pub fn write_metrics_json(metrics: &EtcMetrics, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(metrics)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Policy;
    use crate::nets::Lyapunov;
    use crate::systems::System;

    fn lorenz_quadratic(policy: Policy) -> Model {
        let v = Lyapunov::Quadratic { s: Tensor::identity(3), target: vec![0.0; 3] };
        Model::new(System::lorenz(), v, policy)
    }

    #[test]
    fn event_function_examples() {
        // u(y) = y makes f(x,u(x+e)) − f(x,u(x)) = e.
        let m = lorenz_quadratic(Policy::Linear { k: Tensor::identity(3).scale(-1.0) });
        let h = EventFunction::new(EventKind::HSigmaV, 0.5).unwrap();
        assert!((h.eval(&m, &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap() - 0.75).abs() < 1e-14);
        assert!((h.eval(&m, &[1.0, 2.0, 0.0], &[0.0; 3]).unwrap() + 0.5 * 2.5).abs() < 1e-14);
        let z = lorenz_quadratic(Policy::Zero);
        assert!((h.eval(&z, &[1.0, 2.0, 0.0], &[3.0, -1.0, 2.0]).unwrap() + 1.25).abs() < 1e-14);
        assert!(EventFunction::new(EventKind::HSigmaV, 1.0).is_err());
    }

    #[test]
    fn lqr_event_scalar_example() {
        // Embedded in the first Lorenz coordinate: Q₁ = 2, SBK = 1.
        let mut q1 = Tensor::zeros(3, 3);
        q1.set(0, 0, 2.0);
        let mut sbk = Tensor::zeros(3, 3);
        sbk.set(0, 0, 1.0);
        let m = lorenz_quadratic(Policy::Zero);
        let h = EventFunction::new(EventKind::LqrQuadratic { q1, sbk }, 0.5).unwrap();
        assert!((h.eval(&m, &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(h.eval(&m, &[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
        assert!(h.eval(&m, &[1.0, 0.0, 0.0], &[0.0; 3]).unwrap() < 0.0);
    }

    #[test]
    fn zero_controller_never_triggers() {
        let m = lorenz_quadratic(Policy::Zero);
        let h = EventFunction::new(EventKind::HSigmaV, 0.5).unwrap();
        let tr = simulate_etc(&m, &h, &[1.0, 1.0, 1.0], 2.0, None, &IntegrationConfig::with_step(0.001)).unwrap();
        assert_eq!(tr.num_triggers(), 0);
        assert!((tr.times.last().unwrap() - 2.0).abs() < 1e-12);
        let never = EventFunction::new(EventKind::AlwaysNegative, 0.5).unwrap();
        let lin = lorenz_quadratic(Policy::Linear { k: Tensor::identity(3).scale(20.0) });
        let tr = simulate_etc(&lin, &never, &[1.0, 1.0, 1.0], 2.0, None, &IntegrationConfig::with_step(0.001)).unwrap();
        assert_eq!(tr.num_triggers(), 0);
        assert_eq!(tr.held_controls.len(), 1);
    }

    #[test]
    fn triggered_linear_feedback_respects_budget_and_resets() {
        let lin = lorenz_quadratic(Policy::Linear { k: Tensor::identity(3).scale(40.0) });
        let h = EventFunction::new(EventKind::HSigmaV, 0.5).unwrap();
        let cfg = IntegrationConfig::with_step(0.001);
        let tr = simulate_etc(&lin, &h, &[1.0, -2.0, 3.0], 2.0, None, &cfg).unwrap();
        assert!(tr.num_triggers() > 0);
        assert!(tr.trigger_times.windows(2).all(|w| w[1] > w[0]));
        for (i, &flag) in tr.trigger_flags.iter().enumerate() {
            if flag {
                assert_eq!(tr.controls[i], lin.u_at(&tr.states[i]));
            }
        }
        let tb = simulate_etc(&lin, &h, &[1.0, -2.0, 3.0], 2.0, Some(3), &cfg).unwrap();
        assert!(tb.num_triggers() <= 3 && tb.held_controls.len() <= 4);
        assert!((tb.times.last().unwrap() - 2.0).abs() < 1e-12);
    }

    fn trace_from(times: Vec<f64>, states: Vec<Vec<f64>>, triggers: Vec<f64>, horizon: f64) -> EtcTrace {
        let n = times.len();
        EtcTrace {
            times,
            states,
            controls: vec![vec![0.0]; n],
            trigger_flags: vec![false; n],
            trigger_times: triggers,
            held_controls: vec![],
            budget_exhausted_at: None,
            reached_target_at: None,
            horizon,
        }
    }

    #[test]
    fn metric_examples() {
        let tr = trace_from(vec![0.0, 1.0], vec![vec![0.0], vec![0.0]], vec![0.0, 0.1, 0.3, 0.6], 1.0);
        let m = compute_metrics(&tr, &[0.0], 0.1).unwrap();
        assert_eq!(m.num_triggers, 3);
        assert!((m.min_inter_event - 0.2).abs() < 1e-15);
        assert_eq!((m.mse_window, m.temporal_variance), (0.0, 0.0));
        let tr = trace_from(vec![0.0, 2.0], vec![vec![1.0], vec![1.0]], vec![0.0, 0.5], 2.0);
        let m = compute_metrics(&tr, &[0.0], 0.1).unwrap();
        assert_eq!(m.min_inter_event, 2.0);
        assert!((m.mse_window - 1.0).abs() < 1e-15);
        // x(t) = t on [0, 2]: window [1.8, 2] has mean square of t.
        let times: Vec<f64> = (0..=2000).map(|i| i as f64 * 1e-3).collect();
        let states = times.iter().map(|t| vec![*t]).collect();
        let m = compute_metrics(&trace_from(times, states, vec![0.0], 2.0), &[0.0], 0.1).unwrap();
        let exact = (8.0 - 1.8f64.powi(3)) / 3.0 / 0.2;
        assert!((m.mse_window - exact).abs() < 1e-6);
        assert!((m.temporal_variance - 0.04 / 12.0).abs() < 1e-6);
    }

    #[test]
    fn trace_csv_has_expected_columns() {
        let m = lorenz_quadratic(Policy::Linear { k: Tensor::identity(3).scale(40.0) });
        let h = EventFunction::new(EventKind::HSigmaV, 0.5).unwrap();
        let tr = simulate_etc(&m, &h, &[1.0, 0.0, 0.0], 0.1, None, &IntegrationConfig::with_step(0.001)).unwrap();
        let dir = std::env::temp_dir().join(format!("netc-trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.csv");
        tr.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,x1,x2,x3,u1,u2,u3,trigger_flag"));
        assert_eq!(text.lines().count(), tr.times.len() + 1);
        std::fs::remove_dir_all(dir).ok();
    }
}

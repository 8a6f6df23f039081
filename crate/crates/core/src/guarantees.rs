//! Projection onto the stabilizing set, closed-form inter-event-time bounds
//! and the sampled constants that feed them.

use autodiff::{Eager, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{NetcError, Result};
use crate::model::Model;
use crate::rng::Rng;

/// Tolerance on `L V + V` when deciding that a controller is already feasible.
pub const FEASIBILITY_TOL: f64 = 1e-9;
pub const PROBE_STEP: f64 = 1e-4;

/// Projected copy of `model` for a fully actuated system.
pub fn project_controller(model: &Model) -> Result<Model> {
    if !model.system.identity_actuator() {
        return Err(NetcError::UnsupportedActuator(format!(
            "{} is not fully actuated; use project_controller_affine for the g(x)g(x)ᵀ∇V variant",
            model.system.id
        )));
    }
    Ok(project_controller_affine(model))
}

/// Projected copy of `model` along `g(x)ᵀ∇V`, for any control-affine system.
///
/// The stabilizing inequality holds wherever `‖g(x)ᵀ∇V(x)‖²` exceeds the
/// denominator guard; where the actuator cannot move `V` the correction is
/// capped by the guard and the inequality may fail.
pub fn project_controller_affine(model: &Model) -> Model {
    let mut m = model.clone();
    m.projected = true;
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub l_f: f64,
    pub l_u: f64,
    pub l_alpha_inv: f64,
    pub c: f64,
    pub sigma: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(NetcError::Contract(format!("{name} must be positive and finite, got {v}")))
    }
}

/// `τ_h = (1/l_f) ln((P + 1) / (P + l_u/(1 + l_u)))`.
pub fn tau_h(l_f: f64, l_u: f64, p: f64) -> Result<f64> {
    positive("l_f", l_f)?;
    positive("l_u", l_u)?;
    positive("P", p)?;
    Ok(((p + 1.0) / (p + l_u / (1.0 + l_u))).ln() / l_f)
}

/// `τ_h̃`: the same formula with `P = c · (l_{α⁻¹}/σ) · l_u`.
pub fn tau_h_tilde(inputs: &BoundInputs) -> Result<f64> {
    positive("c", inputs.c)?;
    positive("l_alpha_inv", inputs.l_alpha_inv)?;
    if !(inputs.sigma > 0.0 && inputs.sigma <= 1.0) {
        return Err(NetcError::Contract(format!("sigma must lie in (0, 1], got {}", inputs.sigma)));
    }
    let p = inputs.c * inputs.l_alpha_inv / inputs.sigma * inputs.l_u;
    tau_h(inputs.l_f, inputs.l_u, p)
}

fn sample_point(domain: &[(f64, f64)], rng: &mut Rng) -> Vec<f64> {
    domain.iter().map(|&(lo, hi)| if hi > lo { rng.gen_range(lo..hi) } else { lo }).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Largest observed difference quotient over random pairs in `domain`, plus
/// central-difference probes along each coordinate at the first point of
/// every pair. A lower estimate of the true constant.
pub fn estimate_lipschitz(f: impl Fn(&[f64]) -> Vec<f64>, domain: &[(f64, f64)], n_pairs: usize, rng: &mut Rng) -> f64 {
    let mut best = 0.0f64;
    for _ in 0..n_pairs {
        let a = sample_point(domain, rng);
        let b = sample_point(domain, rng);
        let fa = f(&a);
        let d = dist(&a, &b);
        if d > 0.0 {
            best = best.max(dist(&fa, &f(&b)) / d);
        }
        for j in 0..a.len() {
            let mut p = a.clone();
            let mut m = a.clone();
            p[j] += PROBE_STEP;
            m[j] -= PROBE_STEP;
            best = best.max(dist(&f(&p), &f(&m)) / (2.0 * PROBE_STEP));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalityGap {
    /// Lipschitz estimate of the projected controller.
    pub l_proj: f64,
    /// Whether the unprojected controller already satisfies `L V + V ≤ 0`
    /// on every sample.
    pub is_feasible: bool,
    pub violations: usize,
}

/// Lipschitz constant of `π(u)` and feasibility of `u` on `n_pairs` samples.
pub fn optimality_gap(model: &Model, n_pairs: usize, rng: &mut Rng) -> Result<OptimalityGap> {
    let projected = project_controller(model)?;
    let raw = Model { projected: false, ..model.clone() };
    let x = model.system.sample_domain(n_pairs, rng);
    let u = raw.u(&Eager, &x);
    let excess = raw.lie_derivative(&Eager, &x, &u).add(&raw.v(&Eager, &x));
    let violations = excess.data.iter().filter(|v| **v > FEASIBILITY_TOL).count();
    let l_proj = estimate_lipschitz(|p| projected.u_at(p), &model.system.domain, n_pairs, rng);
    Ok(OptimalityGap { l_proj, is_feasible: violations == 0, violations })
}

/// Inputs and both inter-event bounds for a trained closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub l_f: f64,
    pub l_u: f64,
    pub l_alpha_inv: Option<f64>,
    pub c: f64,
    pub sigma: f64,
    /// Theorem-2 bound with `P = c · l_{α⁻¹}`.
    pub tau_h: Option<f64>,
    pub tau_h_tilde: Option<f64>,
    pub empirical_min_inter_event: Option<f64>,
}

/// Samples `l_f`, `l_u`, `max ‖∇V‖` and `l_{α⁻¹}` over the system's domain.
pub fn bound_report(model: &Model, sigma: f64, n_pairs: usize, rng: &mut Rng) -> Result<BoundReport> {
    let sys = &model.system;
    let (d, m) = (sys.dim(), sys.control_dim());
    let probe = sys.sample_domain(n_pairs.max(1), rng);
    let u = model.u(&Eager, &probe);
    let u_max = u.max_abs().max(1.0);
    let l_u = estimate_lipschitz(|x| model.u_at(x), &sys.domain, n_pairs, rng);
    let mut joint = sys.domain.clone();
    joint.extend(std::iter::repeat_n((-u_max, u_max), m));
    let l_f = estimate_lipschitz(
        |z| sys.field(&Eager, &Tensor::row(&z[..d]), &Tensor::row(&z[d..])).data,
        &joint,
        n_pairs,
        rng,
    );
    let grad = model.grad_v(&Eager, &probe);
    let grad_max = (0..grad.rows())
        .map(|i| grad.row_slice(i).iter().map(|g| g * g).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let c = grad_max * l_f;
    let l_alpha_inv = match &model.alpha {
        Some(k) => {
            let r_max = sys
                .domain
                .iter()
                .zip(model.target())
                .map(|(&(lo, hi), t)| (lo - t).abs().max((hi - t).abs()).powi(2))
                .sum::<f64>()
                .sqrt();
            let grid: Vec<f64> = (0..=200).map(|i| r_max * i as f64 / 200.0).collect();
            let q = k.integrand(&Eager, &model.params, &Tensor::column(&grid));
            Some(q.data.iter().map(|v| 1.0 / v.max(crate::trainer::Q_FLOOR)).fold(0.0, f64::max))
        }
        None => None,
    };
    let (tau_h_v, tau_tilde) = match l_alpha_inv {
        Some(l_ai) if l_f > 0.0 && l_u > 0.0 && c > 0.0 => {
            let inputs = BoundInputs { l_f, l_u, l_alpha_inv: l_ai, c, sigma };
            (Some(tau_h(l_f, l_u, c * l_ai)?), Some(tau_h_tilde(&inputs)?))
        }
        _ => (None, None),
    };
    Ok(BoundReport {
        l_f,
        l_u,
        l_alpha_inv,
        c,
        sigma,
        tau_h: tau_h_v,
        tau_h_tilde: tau_tilde,
        empirical_min_inter_event: None,
    })
}

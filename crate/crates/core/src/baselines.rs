//! Comparison controllers: LQR on the linearization at the target, the
//! one-constraint BALSA QP, and the NLC / Quad-NLC training entry points.

use autodiff::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{NetcError, Result};
use crate::etcsim::{EventFunction, EventKind};
use crate::model::{Model, Policy};
use crate::nets::Lyapunov;
use crate::systems::{System, SystemId};
use crate::trainer::{train_baseline, Method, TrainConfig, TrainReport};

pub const MAX_CARE_DIM: usize = 20;
pub const CARE_TOL: f64 = 1e-10;
/// Largest residual accepted when Newton stalls short of [`CARE_TOL`].
pub const CARE_ACCEPT: f64 = 1e-8;
const MAX_NEWTON_STEPS: usize = 100;
const MAX_POLE_PUSH: u32 = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrSolution {
    pub s: Tensor,
    pub k: Tensor,
    /// `Q + KᵀRK`.
    pub q1: Tensor,
    pub residual: f64,
    pub newton_steps: usize,
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), &t.data)
}

fn from_na(m: &DMatrix<f64>) -> Tensor {
    Tensor::new(vec![m.nrows(), m.ncols()], m.transpose().as_slice().to_vec()).expect("shape matches")
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(m: &Tensor) -> f64 {
    to_na(m).complex_eigenvalues().iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
}

/// `‖AᵀS + SA − SBR⁻¹BᵀS + Q‖_F`.
pub fn care_residual(a: &Tensor, b: &Tensor, q: &Tensor, r: &Tensor, s: &Tensor) -> Result<f64> {
    let (a, b, q, r, s) = (to_na(a), to_na(b), to_na(q), to_na(r), to_na(s));
    let r_inv = r.try_inverse().ok_or_else(|| NetcError::Contract("R is singular".into()))?;
    let res = a.transpose() * &s + &s * &a - &s * &b * r_inv * b.transpose() * &s + q;
    Ok(res.norm())
}

/// Solves `AᵀX + XA = −C` by Kronecker vectorization.
fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let m = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(n * n, 1, c.as_slice());
    let x = m.lu().solve(&rhs).ok_or_else(|| NetcError::Infeasible("singular Lyapunov operator".into()))?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

fn hurwitz(m: &DMatrix<f64>) -> bool {
    m.clone().complex_eigenvalues().iter().all(|c| c.re < 0.0)
}

/// Kleinman–Newton iteration for the continuous algebraic Riccati equation
/// from a pole-pushing initial gain `K₀ = c Bᵀ`.
pub fn solve_care(a: &Tensor, b: &Tensor, q: &Tensor, r: &Tensor) -> Result<LqrSolution> {
    let d = a.rows();
    if d > MAX_CARE_DIM {
        return Err(NetcError::TooLarge { dim: d, max: MAX_CARE_DIM });
    }
    let m = b.cols();
    if a.cols() != d || b.rows() != d || q.dims() != (d, d) || r.dims() != (m, m) {
        return Err(NetcError::Contract(format!(
            "CARE shapes A {:?}, B {:?}, Q {:?}, R {:?}",
            a.dims(),
            b.dims(),
            q.dims(),
            r.dims()
        )));
    }
    let (an, bn, qn, rn) = (to_na(a), to_na(b), to_na(q), to_na(r));
    let r_chol = rn.clone().cholesky().ok_or_else(|| NetcError::Contract("R must be positive definite".into()))?;
    let r_inv = r_chol.inverse();

    let mut k = None;
    for i in 0..=MAX_POLE_PUSH {
        let c = if i == 0 { 0.0 } else { 2f64.powi(i as i32 - 1) };
        let k0 = bn.transpose() * c;
        if hurwitz(&(&an - &bn * &k0)) {
            k = Some(k0);
            break;
        }
    }
    let mut k = k.ok_or_else(|| NetcError::Infeasible("no stabilizing initial gain found".into()))?;

    let mut best: Option<(f64, DMatrix<f64>, DMatrix<f64>)> = None;
    let mut steps = 0;
    while steps < MAX_NEWTON_STEPS {
        steps += 1;
        let acl = &an - &bn * &k;
        let s = solve_lyapunov(&acl, &(&qn + k.transpose() * &rn * &k))?;
        k = &r_inv * bn.transpose() * &s;
        let res = care_residual(a, b, q, r, &from_na(&s))?;
        let prev = best.as_ref().map_or(f64::INFINITY, |(r0, _, _)| *r0);
        let improved = res < prev;
        if improved {
            best = Some((res, s, k.clone()));
        }
        // Below tolerance, keep polishing while Newton still gains.
        if res == 0.0 || (res <= CARE_TOL && res > 0.5 * prev) || (!improved && steps > 5) {
            break;
        }
    }
    let (residual, s, k) = best.expect("at least one Newton step");
    if residual > CARE_ACCEPT || !residual.is_finite() {
        return Err(NetcError::Infeasible(format!("Riccati iteration stalled at residual {residual:e}")));
    }
    if !hurwitz(&(&an - &bn * &k)) {
        return Err(NetcError::Infeasible("LQR closed loop is not Hurwitz".into()));
    }
    let q1 = &qn + k.transpose() * &rn * &k;
    Ok(LqrSolution { s: from_na(&s), k: from_na(&k), q1: from_na(&q1), residual, newton_steps: steps })
}

/// State and input weights used for each benchmark.
pub fn lqr_weights(system: &System) -> Result<(Tensor, Tensor)> {
    match system.id {
        SystemId::Grn => Ok((Tensor::identity(2).scale(10.0), Tensor::identity(1).scale(0.1))),
        SystemId::Lorenz => Ok((Tensor::diag(&[5.0, 10.0, 5.0]), Tensor::identity(3).scale(0.1))),
        SystemId::Cell => Err(NetcError::TooLarge { dim: system.dim(), max: MAX_CARE_DIM }),
    }
}

/// LQR designed on the linearization at `(x*, 0)`, packaged as a model with
/// `V = ½(x−x*)ᵀS(x−x*)` and `u = −K(x−x*)`.
pub fn lqr_model(system: &System, q: &Tensor, r: &Tensor) -> Result<(Model, LqrSolution)> {
    if system.dim() > MAX_CARE_DIM {
        return Err(NetcError::TooLarge { dim: system.dim(), max: MAX_CARE_DIM });
    }
    let target = system.target.clone();
    let (a, b) = system.linearize(&target, &vec![0.0; system.control_dim()]);
    let sol = solve_care(&a, &b, q, r)?;
    let v = Lyapunov::Quadratic { s: sol.s.clone(), target };
    Ok((Model::new(system.clone(), v, Policy::Linear { k: sol.k.clone() }), sol))
}

/// LQR event function `(σ−1)(x−x*)ᵀQ₁(x−x*) + 2(x−x*)ᵀ S B K (x − x_k)`.
///
/// The simulator's error state is `x_k − x`, so the cross matrix is stored as `−SBK`.
pub fn lqr_event(system: &System, sol: &LqrSolution, sigma: f64) -> Result<EventFunction> {
    let (_, b) = system.linearize(&system.target, &vec![0.0; system.control_dim()]);
    let sbk = sol.s.matmul(&b).matmul(&sol.k).scale(-1.0);
    EventFunction::new(EventKind::LqrQuadratic { q1: sol.q1.clone(), sbk }, sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalsaSolution {
    pub u: Vec<f64>,
    pub d1: f64,
    pub lambda: f64,
    /// The constraint was active but `b = 0`: the slack took all of it.
    pub absorbed: bool,
}

/// Closed-form KKT point of `min ½‖u‖² + p₁d₁²` s.t. `a + b·u ≤ d₁`.
pub fn balsa_qp(a: f64, b: &[f64], p1: f64) -> Result<BalsaSolution> {
    if !(p1 > 0.0) {
        return Err(NetcError::Contract(format!("p1 must be > 0, got {p1}")));
    }
    if a <= 0.0 {
        return Ok(BalsaSolution { u: vec![0.0; b.len()], d1: 0.0, lambda: 0.0, absorbed: false });
    }
    let bb: f64 = b.iter().map(|v| v * v).sum();
    let lambda = a / (bb + 0.5 / p1);
    Ok(BalsaSolution { u: b.iter().map(|v| -lambda * v).collect(), d1: lambda / (2.0 * p1), lambda, absorbed: bb == 0.0 })
}

/// BALSA penalty used for each benchmark.
pub fn balsa_p1(system: SystemId) -> f64 {
    match system {
        SystemId::Lorenz => 20.0,
        SystemId::Grn | SystemId::Cell => 50.0,
    }
}

/// BALSA as a model: `V = ½‖x−x*‖²` and the QP solved at every evaluation.
pub fn balsa_model(system: &System, p1: f64) -> Model {
    let v = Lyapunov::Quadratic { s: Tensor::identity(system.dim()), target: system.target.clone() };
    Model::new(system.clone(), v, Policy::Balsa { p1 })
}

/// NLC: `(1/N) Σ [(L V)⁺ + (−V)⁺]` plus a pin of the unconstrained
/// candidate at the target.
pub fn train_nlc(cfg: &TrainConfig) -> Result<TrainReport> {
    train_baseline(cfg, Method::Nlc)
}

/// Quad-NLC: `(1/N) Σ (L V + V)⁺ + V(x*)²` with `V = ‖F(x−x*)‖²`.
pub fn train_quad_nlc(cfg: &TrainConfig) -> Result<TrainReport> {
    train_baseline(cfg, Method::QuadNlc)
}

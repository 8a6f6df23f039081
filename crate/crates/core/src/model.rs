//! A closed loop: system, Lyapunov candidate, policy and the optional
//! class-K rate, all evaluated through any [`Backend`].

use autodiff::{Backend, Eager, ParameterSet, Tensor, Unary};
use serde::{Deserialize, Serialize};

use crate::error::{NetcError, Result};
use crate::nets::{shift, ClassK, ControllerNet, Lyapunov};
use crate::systems::System;

/// Floor on `‖g(x)ᵀ∇V(x)‖²` in the projection denominator.
pub const PROJECTION_GUARD: f64 = 1e-12;

/// Constraint violations below this multiple of the magnitude of the terms
/// in `L V + V` are rounding noise and are not projected away.
pub const PROJECTION_SLACK: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Zero,
    Net(ControllerNet),
    /// `u = −K (x − x*)`.
    Linear { k: Tensor },
    /// Closed-form minimizer of `½‖u‖² + p₁d₁²` s.t. `L_{f_u}W − W ≤ d₁`
    /// with `W = ½‖x − x*‖²`.
    Balsa { p1: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub system: System,
    pub v: Lyapunov,
    pub policy: Policy,
    pub alpha: Option<ClassK>,
    pub params: ParameterSet,
    /// Whether [`Model::u`] applies the projection onto `{L V + V ≤ 0}`.
    pub projected: bool,
}

impl Model {
    pub fn new(system: System, v: Lyapunov, policy: Policy) -> Self {
        Self { system, v, policy, alpha: None, params: ParameterSet::new(), projected: false }
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn target(&self) -> &[f64] {
        &self.system.target
    }

    pub fn v<B: Backend>(&self, b: &B, x: &B::T) -> B::T {
        self.v.eval(b, &self.params, x)
    }

    pub fn grad_v<B: Backend>(&self, b: &B, x: &B::T) -> B::T {
        self.v.grad(b, &self.params, x)
    }

    /// The policy before projection (`n × m`).
    pub fn raw_u<B: Backend>(&self, b: &B, x: &B::T) -> B::T {
        let (n, _) = b.dims(x);
        let m = self.system.control_dim();
        match &self.policy {
            Policy::Zero => b.zeros(n, m),
            Policy::Net(c) => c.eval(b, &self.params, x),
            Policy::Linear { k } => {
                let xs = shift(b, x, self.target());
                b.neg(&b.matmul_nt(&xs, &b.constant(k.clone())))
            }
            Policy::Balsa { p1 } => {
                let xs = shift(b, x, self.target());
                let w = b.scale(&b.sum_cols(&b.square(&xs)), 0.5);
                let a = b.sub(&b.row_dot(&xs, &self.system.drift(b, x)), &w);
                let g = self.system.actuate_transpose(b, x, &xs);
                let den = b.add_scalar(&b.row_dot(&g, &g), 0.5 / p1);
                let lambda = b.div(&b.relu(&a), &den);
                b.neg(&b.mul_col(&g, &lambda))
            }
        }
    }

    /// The control actually applied (`n × m`).
    pub fn u<B: Backend>(&self, b: &B, x: &B::T) -> B::T {
        let raw = self.raw_u(b, x);
        if self.projected {
            self.project(b, x, &raw)
        } else {
            raw
        }
    }

    /// `u − (L_{f_u}V + V)⁺ / max(‖gᵀ∇V‖², guard) · gᵀ∇V`.
///
/// `L_{f_u}V` is split as `∇V·f(x) + (gᵀ∇V)·u`.
    pub fn project<B: Backend>(&self, b: &B, x: &B::T, u: &B::T) -> B::T {
        let gv = self.grad_v(b, x);
        let drift = b.row_dot(&gv, &self.system.drift(b, x));
        let dir = self.system.actuate_transpose(b, x, &gv);
        let push = b.row_dot(&dir, u);
        let v = self.v(b, x);
        let raw = b.add(&b.add(&drift, &push), &v);
        let (dv, pv, vv, rv) = (b.value(&drift), b.value(&push), b.value(&v), b.value(&raw));
        let mask: Vec<f64> = (0..rv.data.len())
            .map(|i| {
                let scale = 1.0 + dv.data[i].abs() + pv.data[i].abs() + vv.data[i].abs();
                if rv.data[i] > PROJECTION_SLACK * scale { 1.0 } else { 0.0 }
            })
            .collect();
        let excess = b.mul(&b.relu(&raw), &b.constant(Tensor::column(&mask)));
        let den = b.unary(&b.row_dot(&dir, &dir), Unary::ClampMin(PROJECTION_GUARD));
        b.sub(u, &b.mul_col(&dir, &b.div(&excess, &den)))
    }

    /// `L_{f_u}V = ∇V · f(x, u)` (`n × 1`).
    pub fn lie_derivative<B: Backend>(&self, b: &B, x: &B::T, u: &B::T) -> B::T {
        b.row_dot(&self.grad_v(b, x), &self.system.field(b, x, u))
    }

    /// `‖x − x*‖` as a column.
    pub fn radius<B: Backend>(&self, b: &B, x: &B::T) -> B::T {
        let xs = shift(b, x, self.target());
        b.unary(&b.sum_cols(&b.square(&xs)), Unary::SQRT)
    }

    /// `α(‖x − x*‖)` (`n × 1`).
    pub fn alpha_of_state<B: Backend>(&self, b: &B, x: &B::T) -> Result<B::T> {
        let k = self.alpha.as_ref().ok_or_else(|| NetcError::Contract("model has no class-K function".into()))?;
        Ok(k.eval(b, &self.params, &self.radius(b, x)))
    }

    pub fn v_at(&self, x: &[f64]) -> f64 {
        self.v(&Eager, &Tensor::row(x)).item()
    }

    pub fn grad_v_at(&self, x: &[f64]) -> Vec<f64> {
        self.grad_v(&Eager, &Tensor::row(x)).data
    }

    pub fn u_at(&self, x: &[f64]) -> Vec<f64> {
        self.u(&Eager, &Tensor::row(x)).data
    }

    /// Closed-loop field `f(x, u(x))` at a single state.
    pub fn closed_loop_at(&self, x: &[f64]) -> Vec<f64> {
        let xt = Tensor::row(x);
        let u = self.u(&Eager, &xt);
        self.system.field(&Eager, &xt, &u).data
    }

    /// Copy with any weight normalization folded into the parameters, for
    /// fast repeated evaluation.
    pub fn baked(&self) -> Model {
        let mut m = self.clone();
        if let Policy::Net(c) = &mut m.policy {
            let (net, params) = c.net.baked(&self.params);
            c.net = net;
            m.params = params;
        }
        m
    }

    /// Clamps the weights the Lyapunov family needs nonnegative.
    pub fn clamp_constraints(&mut self) {
        for name in self.v.nonnegative() {
            if let Some(t) = self.params.get_mut(&name) {
                t.data.iter_mut().for_each(|w| *w = w.max(0.0));
            }
        }
    }

    /// Lipschitz regularizer of the controller weights (zero for non-network policies).
    pub fn lipschitz_penalty<B: Backend>(&self, b: &B) -> B::T {
        match &self.policy {
            Policy::Net(c) => c.lipschitz_penalty(b, &self.params),
            _ => b.scalar(0.0),
        }
    }
}

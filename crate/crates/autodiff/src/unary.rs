//! Elementwise scalar functions shared by every backend.
//!
//! Each function knows its own numeric derivative (used by the reverse
//! sweep) and, where the forward-mode layer needs it, the derivative as
//! another [`Unary`] so that it can be recorded on a tape.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Unary {
    /// `c · x^p`; integer powers use `powi` so negative bases are allowed.
    Pow { p: f64, c: f64 },
    Exp,
    Ln,
    Softplus,
    Sigmoid,
    SigmoidGrad,
    SigmoidCurv,
    Tanh,
    TanhGrad,
    TanhCurv,
    /// `max(x, lo)`; `ClampMin(0.0)` is ReLU.
    ClampMin(f64),
    /// Heaviside step at `lo` (1 when `x > lo`).
    StepAt(f64),
    /// Quadratic-then-linear rectifier: 0 for `x ≤ 0`, `x²/2d` on `(0,d)`,
    /// `x − d/2` above. Convex, nondecreasing, C¹ and exactly 0 at 0.
    SmoothRelu(f64),
    SmoothReluGrad(f64),
    SmoothReluCurv(f64),
    Elu,
    EluGrad,
    EluCurv,
}

impl Unary {
    pub const RELU: Unary = Unary::ClampMin(0.0);
    pub const SQUARE: Unary = Unary::Pow { p: 2.0, c: 1.0 };
    pub const SQRT: Unary = Unary::Pow { p: 0.5, c: 1.0 };
    pub const RECIP: Unary = Unary::Pow { p: -1.0, c: 1.0 };

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Pow { p, c } => {
                if c == 0.0 {
                    0.0
                } else if p == 0.0 {
                    c
                } else if p.fract() == 0.0 && p.abs() < 64.0 {
                    c * x.powi(p as i32)
                } else {
                    c * x.powf(p)
                }
            }
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::SigmoidGrad => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Unary::SigmoidCurv => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Unary::Tanh => x.tanh(),
            Unary::TanhGrad => {
                let t = x.tanh();
                1.0 - t * t
            }
            Unary::TanhCurv => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Unary::ClampMin(lo) => x.max(lo),
            Unary::StepAt(lo) => {
                if x > lo {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::SmoothRelu(d) => {
                if x <= 0.0 {
                    0.0
                } else if x < d {
                    x * x / (2.0 * d)
                } else {
                    x - 0.5 * d
                }
            }
            Unary::SmoothReluGrad(d) => {
                if x <= 0.0 {
                    0.0
                } else if x < d {
                    x / d
                } else {
                    1.0
                }
            }
            Unary::SmoothReluCurv(d) => {
                if x > 0.0 && x < d {
                    1.0 / d
                } else {
                    0.0
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::EluGrad => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Unary::EluCurv => {
                if x > 0.0 {
                    0.0
                } else {
                    x.exp()
                }
            }
        }
    }

    /// Numeric derivative used by the reverse sweep.
    pub fn derivative_at(self, x: f64) -> f64 {
        match self {
            Unary::Pow { p, c } => Unary::Pow { p: p - 1.0, c: c * p }.apply(x),
            Unary::Exp => x.exp(),
            Unary::Ln => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => Unary::SigmoidGrad.apply(x),
            Unary::SigmoidGrad => Unary::SigmoidCurv.apply(x),
            Unary::SigmoidCurv => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s)
            }
            Unary::Tanh => Unary::TanhGrad.apply(x),
            Unary::TanhGrad => Unary::TanhCurv.apply(x),
            Unary::TanhCurv => {
                let t = x.tanh();
                (6.0 * t * t - 2.0) * (1.0 - t * t)
            }
            Unary::ClampMin(lo) => Unary::StepAt(lo).apply(x),
            Unary::StepAt(_) | Unary::SmoothReluCurv(_) => 0.0,
            Unary::SmoothRelu(d) => Unary::SmoothReluGrad(d).apply(x),
            Unary::SmoothReluGrad(d) => Unary::SmoothReluCurv(d).apply(x),
            Unary::Elu => Unary::EluGrad.apply(x),
            Unary::EluGrad | Unary::EluCurv => Unary::EluCurv.apply(x),
        }
    }

    /// The derivative as another elementwise function, when one exists in
    /// this family. `None` means the derivative is identically zero.
    pub fn derivative(self) -> Option<Unary> {
        Some(match self {
            Unary::Pow { p, c } => {
                if c == 0.0 || p == 0.0 {
                    return None;
                }
                Unary::Pow { p: p - 1.0, c: c * p }
            }
            Unary::Exp => Unary::Exp,
            Unary::Ln => Unary::RECIP,
            Unary::Softplus => Unary::Sigmoid,
            Unary::Sigmoid => Unary::SigmoidGrad,
            Unary::SigmoidGrad => Unary::SigmoidCurv,
            Unary::Tanh => Unary::TanhGrad,
            Unary::TanhGrad => Unary::TanhCurv,
            Unary::ClampMin(lo) => Unary::StepAt(lo),
            Unary::SmoothRelu(d) => Unary::SmoothReluGrad(d),
            Unary::SmoothReluGrad(d) => Unary::SmoothReluCurv(d),
            Unary::Elu => Unary::EluGrad,
            Unary::EluGrad | Unary::EluCurv => Unary::EluCurv,
            Unary::StepAt(_) | Unary::SmoothReluCurv(_) => return None,
            Unary::SigmoidCurv | Unary::TanhCurv => {
                panic!("third derivatives of {self:?} are not available in forward mode")
            }
        })
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

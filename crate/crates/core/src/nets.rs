//! Parameterized function families: input-convex Lyapunov candidates,
//! controllers, monotone class-K functions and the plain baselines' nets.
//!
//! A net only describes an architecture; its weights live in a shared
//! [`ParameterSet`] under the net's name prefix, so one tape can hold the
//! Lyapunov function, the controller and the class-K function together.

use std::str::FromStr;

use autodiff::{Backend, ParameterSet, Tensor, Unary, DEFAULT_POWER_ITERS};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{NetcError, Result};
use crate::rng::Rng;

/// Width of the quadratic zone of the outer rectifier of the ICNN candidate.
pub const SMOOTH_RELU_WIDTH: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const QUADRATURE_NODES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    Icnn,
    Control,
    K,
    Mlp,
}

/// Architecture string such as `ICNN(2,20,1)`: the input width followed by
/// every layer's output width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub kind: ArchKind,
    pub dims: Vec<usize>,
}

impl FromStr for Arch {
    type Err = NetcError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let open = s.find('(').ok_or_else(|| NetcError::Config(format!("bad architecture {s:?}")))?;
        if !s.ends_with(')') {
            return Err(NetcError::Config(format!("bad architecture {s:?}")));
        }
        let kind = match s[..open].trim().to_ascii_uppercase().as_str() {
            "ICNN" => ArchKind::Icnn,
            "CONTROL" => ArchKind::Control,
            "K" => ArchKind::K,
            "MLP" => ArchKind::Mlp,
            other => return Err(NetcError::Config(format!("unknown architecture family {other:?}"))),
        };
        let dims = s[open + 1..s.len() - 1]
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NetcError::Config(format!("bad architecture {s:?}: {e}")))?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NetcError::Config(format!("architecture {s:?} needs at least two positive widths")));
        }
        Ok(Arch { kind, dims })
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self.kind {
            ArchKind::Icnn => "ICNN",
            ArchKind::Control => "Control",
            ArchKind::K => "K",
            ArchKind::Mlp => "MLP",
        };
        let dims: Vec<String> = self.dims.iter().map(ToString::to_string).collect();
        write!(f, "{name}({})", dims.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    #[serde(rename = "smooth-relu")]
    SmoothRelu,
}

impl Activation {
    fn unary(self) -> Unary {
        match self {
            Activation::Relu => Unary::RELU,
            Activation::Tanh => Unary::Tanh,
            Activation::Softplus => Unary::Softplus,
            Activation::SmoothRelu => Unary::SmoothRelu(SMOOTH_RELU_WIDTH),
        }
    }
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

fn get<'p>(p: &'p ParameterSet, name: &str) -> &'p Tensor {
    p.get(name).unwrap_or_else(|| panic!("parameter {name} missing"))
}

/// `x − target`, row-broadcast.
pub fn shift<B: Backend>(b: &B, x: &B::T, target: &[f64]) -> B::T {
    if target.iter().all(|v| *v == 0.0) {
        return x.clone();
    }
    b.sub_row(x, &b.constant(Tensor::row(target)))
}

fn affine<B: Backend>(b: &B, p: &ParameterSet, x: &B::T, w: &str, bias: Option<&str>) -> B::T {
    let w = b.param(w, get(p, w));
    let z = b.matmul_nt(x, &w);
    match bias {
        Some(name) => b.add_row(&z, &b.param(name, get(p, name))),
        None => z,
    }
}

/// `V(x) = ρ(p(x − x*) − p(0)) + ε‖x − x*‖²` with `p` an input-convex
/// network (softplus activations by default) and `ρ` a rectifier that is zero on
/// `(−∞, 0]`, convex and nondecreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcnnV {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub epsilon: f64,
    pub smooth: f64,
    #[serde(default = "default_inner")]
    pub inner: Activation,
    pub target: Vec<f64>,
}

fn default_inner() -> Activation {
    Activation::Softplus
}

impl IcnnV {
    pub fn new(arch: &Arch, target: Vec<f64>) -> Result<Self> {
        if arch.dims[0] != target.len() || *arch.dims.last().unwrap() != 1 {
            return Err(NetcError::Config(format!(
                "{arch} must map R^{} to a scalar",
                target.len()
            )));
        }
        Ok(Self {
            prefix: "V".into(),
            dims: arch.dims.clone(),
            epsilon: DEFAULT_EPSILON,
            smooth: SMOOTH_RELU_WIDTH,
            inner: default_inner(),
            target,
        })
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn name(&self, kind: &str, i: usize) -> String {
        format!("{}.{kind}{i}", self.prefix)
    }

    pub fn init(&self, rng: &mut Rng) -> ParameterSet {
        let d = self.dims[0];
        let mut p = ParameterSet::new();
        for i in 0..self.layers() {
            let w = self.dims[i + 1];
            let k = 1.0 / (d as f64).sqrt();
            p.insert(self.name("W", i), uniform(rng, w, d, -k, k));
            p.insert(self.name("b", i), uniform(rng, 1, w, -k, k));
            if i > 0 {
                let prev = self.dims[i];
                let k = 1.0 / (prev as f64).sqrt();
                p.insert(self.name("U", i), uniform(rng, w, prev, 0.0, k));
            }
        }
        p
    }

    /// Names of the weights that must stay nonnegative.
    pub fn nonnegative(&self) -> Vec<String> {
        (1..self.layers()).map(|i| self.name("U", i)).collect()
    }

    /// The convex network `p` on already-shifted inputs.
    pub fn icnn<B: Backend>(&self, b: &B, p: &ParameterSet, xs: &B::T) -> B::T {
        let mut z = b.unary(&affine(b, p, xs, &self.name("W", 0), Some(&self.name("b", 0))), self.inner.unary());
        for i in 1..self.layers() {
            let u = b.param(&self.name("U", i), get(p, &self.name("U", i)));
            let pre = b.add(&b.matmul_nt(&z, &u), &affine(b, p, xs, &self.name("W", i), Some(&self.name("b", i))));
            z = b.unary(&pre, self.inner.unary());
        }
        z
    }

    pub fn eval<B: Backend>(&self, b: &B, p: &ParameterSet, x: &B::T) -> B::T {
        let xs = shift(b, x, &self.target);
        let px = self.icnn(b, p, &xs);
        let p0 = self.icnn(b, p, &b.zeros(1, self.dims[0]));
        let gap = b.sub_row(&px, &p0);
        let outer = b.unary(&gap, Unary::SmoothRelu(self.smooth));
        let quad = b.scale(&b.sum_cols(&b.square(&xs)), self.epsilon);
        b.add(&outer, &quad)
    }
}

/// Fully connected net `W_k act(… act(W_0 x + b_0) …)` without output bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub activation: Activation,
    /// Every weight is divided by its spectral norm before use.
    #[serde(default)]
    pub normalized: bool,
}

impl Mlp {
    pub fn new(prefix: &str, arch: &Arch, activation: Activation) -> Self {
        Self { prefix: prefix.into(), dims: arch.dims.clone(), activation, normalized: false }
    }

    fn weight<B: Backend>(&self, b: &B, p: &ParameterSet, name: &str) -> B::T {
        let w = b.param(name, get(p, name));
        if !self.normalized {
            return w;
        }
        let (rows, _) = b.dims(&w);
        let inv = b.unary(&b.spectral_norm(&w, DEFAULT_POWER_ITERS), Unary::RECIP);
        b.mul_col(&w, &b.matmul(&b.constant(Tensor::full(rows, 1, 1.0)), &inv))
    }

    /// Same function with the normalization folded into the weights.
    pub fn baked(&self, p: &ParameterSet) -> (Mlp, ParameterSet) {
        let mut p = p.clone();
        if self.normalized {
            for name in self.weight_names() {
                let w = get(&p, &name).clone();
                let sigma = autodiff::power_iteration(&w, DEFAULT_POWER_ITERS).sigma;
                p.insert(name, w.scale(1.0 / sigma));
            }
        }
        (Mlp { normalized: false, ..self.clone() }, p)
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_names(&self) -> Vec<String> {
        (0..self.layers()).map(|i| format!("{}.W{i}", self.prefix)).collect()
    }

    pub fn init(&self, rng: &mut Rng) -> ParameterSet {
        let mut p = ParameterSet::new();
        for i in 0..self.layers() {
            let (fan_in, out) = (self.dims[i], self.dims[i + 1]);
            let k = 1.0 / (fan_in as f64).sqrt();
            p.insert(format!("{}.W{i}", self.prefix), uniform(rng, out, fan_in, -k, k));
            if i + 1 < self.layers() {
                p.insert(format!("{}.b{i}", self.prefix), uniform(rng, 1, out, -k, k));
            }
        }
        p
    }

    pub fn eval<B: Backend>(&self, b: &B, p: &ParameterSet, x: &B::T) -> B::T {
        let mut z = x.clone();
        let last = self.layers() - 1;
        for i in 0..self.layers() {
            let w = self.weight(b, p, &format!("{}.W{i}", self.prefix));
            z = b.matmul_nt(&z, &w);
            if i != last {
                let bias = format!("{}.b{i}", self.prefix);
                z = b.unary(&b.add_row(&z, &b.param(&bias, get(p, &bias))), self.activation.unary());
            }
        }
        z
    }

    /// `Σ σ(W_i)²` over every (effective) weight matrix.
    pub fn lipschitz_penalty<B: Backend>(&self, b: &B, p: &ParameterSet) -> B::T {
        let mut acc = b.scalar(0.0);
        for name in self.weight_names() {
            let w = self.weight(b, p, &name);
            acc = b.add(&acc, &b.square(&b.spectral_norm(&w, DEFAULT_POWER_ITERS)));
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    /// `u_j = (x − x*)_{gate_j} · NN_j(x)`.
    Gated(Vec<usize>),
    /// `u = NN(x) − NN(x*)`.
    Offset,
    /// `u = NN(x)`, no equilibrium constraint (NLC baselines).
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerNet {
    pub net: Mlp,
    pub mode: ControlMode,
    pub target: Vec<f64>,
}

impl ControllerNet {
    pub fn new(arch: &Arch, activation: Activation, mode: ControlMode, target: Vec<f64>, m: usize) -> Result<Self> {
        if arch.dims[0] != target.len() || *arch.dims.last().unwrap() != m {
            return Err(NetcError::Config(format!(
                "{arch} must map R^{} to R^{m}",
                target.len()
            )));
        }
        if let ControlMode::Gated(g) = &mode {
            if g.len() != m || g.iter().any(|&j| j >= target.len()) {
                return Err(NetcError::Config("gate must name one state coordinate per control".into()));
            }
        }
        Ok(Self { net: Mlp::new("u", arch, activation), mode, target })
    }

    pub fn control_dim(&self) -> usize {
        *self.net.dims.last().unwrap()
    }

    pub fn init(&self, rng: &mut Rng) -> ParameterSet {
        self.net.init(rng)
    }

    pub fn eval<B: Backend>(&self, b: &B, p: &ParameterSet, x: &B::T) -> B::T {
        let xs = shift(b, x, &self.target);
        let out = self.net.eval(b, p, &xs);
        match &self.mode {
            ControlMode::Raw => out,
            ControlMode::Offset => {
                let at_target = self.net.eval(b, p, &b.zeros(1, self.target.len()));
                b.sub_row(&out, &at_target)
            }
            ControlMode::Gated(gate) => {
                let d = self.target.len();
                let gated = if gate.len() == d && gate.iter().enumerate().all(|(i, &g)| i == g) {
                    xs
                } else {
                    let mut sel = Tensor::zeros(d, gate.len());
                    for (j, &g) in gate.iter().enumerate() {
                        sel.set(g, j, 1.0);
                    }
                    b.matmul(&xs, &b.constant(sel))
                };
                b.mul(&gated, &out)
            }
        }
    }

    pub fn lipschitz_penalty<B: Backend>(&self, b: &B, p: &ParameterSet) -> B::T {
        self.net.lipschitz_penalty(b, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrandOutput {
    /// `ELU(z) + 1`, strictly positive.
    EluPlusOne,
    /// `max(z, 0)`.
    Relu,
}

/// `α(r) = ∫₀ʳ q(s) ds` with a nonnegative integrand network `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassK {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub output: IntegrandOutput,
    pub nodes: usize,
}

impl ClassK {
    pub fn new(arch: &Arch) -> Result<Self> {
        if arch.dims[0] != 1 || *arch.dims.last().unwrap() != 1 {
            return Err(NetcError::Config(format!("{arch} must map R to R")));
        }
        Ok(Self { prefix: "a".into(), dims: arch.dims.clone(), output: IntegrandOutput::EluPlusOne, nodes: QUADRATURE_NODES })
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn init(&self, rng: &mut Rng) -> ParameterSet {
        let mut p = ParameterSet::new();
        for i in 0..self.layers() {
            let (fan_in, out) = (self.dims[i], self.dims[i + 1]);
            let k = 1.0 / (fan_in as f64).sqrt();
            p.insert(format!("{}.W{i}", self.prefix), uniform(rng, out, fan_in, -k, k));
            p.insert(format!("{}.b{i}", self.prefix), uniform(rng, 1, out, -k, k));
        }
        p
    }

    /// Integrand on a column of abscissae.
    pub fn integrand<B: Backend>(&self, b: &B, p: &ParameterSet, s: &B::T) -> B::T {
        let mut z = s.clone();
        let last = self.layers() - 1;
        for i in 0..self.layers() {
            let pre = affine(b, p, &z, &format!("{}.W{i}", self.prefix), Some(&format!("{}.b{i}", self.prefix)));
            z = if i < last {
                b.relu(&pre)
            } else {
                match self.output {
                    IntegrandOutput::EluPlusOne => b.add_scalar(&b.unary(&pre, Unary::Elu), 1.0),
                    IntegrandOutput::Relu => b.relu(&pre),
                }
            };
        }
        z
    }

    /// `α` on a column of radii (`n × 1`, entries ≥ 0).
    pub fn eval<B: Backend>(&self, b: &B, p: &ParameterSet, r: &B::T) -> B::T {
        let (n, _) = b.dims(r);
        let (xi, w) = gauss_legendre(self.nodes);
        let half_nodes: Vec<f64> = xi.iter().map(|x| 0.5 * (x + 1.0)).collect();
        let s = b.matmul(r, &b.constant(Tensor::row(&half_nodes)));
        let s = b.reshape(&s, n * self.nodes, 1);
        let q = b.reshape(&self.integrand(b, p, &s), n, self.nodes);
        let integral = b.matmul(&q, &b.constant(Tensor::column(&w)));
        b.scale(&b.mul(&integral, r), 0.5)
    }

    /// Scalar evaluation with the `r ≥ 0` precondition checked.
    pub fn value(&self, p: &ParameterSet, r: f64) -> Result<f64> {
        if r < 0.0 || r.is_nan() {
            return Err(NetcError::Contract(format!("class-K argument must be >= 0, got {r}")));
        }
        Ok(self.eval(&autodiff::Eager, p, &Tensor::scalar(r)).item())
    }
}

/// `V(x) = ‖F (x − x*)‖²` with `F = W₁W₀` (no biases).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadV {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub target: Vec<f64>,
}

impl QuadV {
    pub fn new(arch: &Arch, target: Vec<f64>) -> Result<Self> {
        if arch.dims.len() != 3 || arch.dims[0] != target.len() {
            return Err(NetcError::Config(format!("{arch} must be MLP(d,h,r) for a quadratic candidate")));
        }
        Ok(Self { prefix: "V".into(), dims: arch.dims.clone(), target })
    }

    pub fn init(&self, rng: &mut Rng) -> ParameterSet {
        let mut p = ParameterSet::new();
        for i in 0..2 {
            let (fan_in, out) = (self.dims[i], self.dims[i + 1]);
            let k = 1.0 / (fan_in as f64).sqrt();
            p.insert(format!("{}.W{i}", self.prefix), uniform(rng, out, fan_in, -k, k));
        }
        p
    }

    pub fn eval<B: Backend>(&self, b: &B, p: &ParameterSet, x: &B::T) -> B::T {
        let xs = shift(b, x, &self.target);
        let h = affine(b, p, &xs, &format!("{}.W0", self.prefix), None);
        let y = affine(b, p, &h, &format!("{}.W1", self.prefix), None);
        b.sum_cols(&b.square(&y))
    }
}

/// Every Lyapunov-candidate family in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lyapunov {
    Icnn(IcnnV),
    /// Unconstrained network output (NLC).
    Mlp { net: Mlp, target: Vec<f64> },
    Quad(QuadV),
    /// `½ (x − x*)ᵀ S (x − x*)` with a fixed symmetric `S`.
    Quadratic { s: Tensor, target: Vec<f64> },
}

impl Lyapunov {
    pub fn init(&self, rng: &mut Rng) -> ParameterSet {
        match self {
            Lyapunov::Icnn(v) => v.init(rng),
            Lyapunov::Mlp { net, .. } => net.init(rng),
            Lyapunov::Quad(v) => v.init(rng),
            Lyapunov::Quadratic { .. } => ParameterSet::new(),
        }
    }

    pub fn target(&self) -> &[f64] {
        match self {
            Lyapunov::Icnn(v) => &v.target,
            Lyapunov::Mlp { target, .. } | Lyapunov::Quadratic { target, .. } => target,
            Lyapunov::Quad(v) => &v.target,
        }
    }

    /// `V` on a batch (`n × d` → `n × 1`).
    pub fn eval<B: Backend>(&self, b: &B, p: &ParameterSet, x: &B::T) -> B::T {
        match self {
            Lyapunov::Icnn(v) => v.eval(b, p, x),
            Lyapunov::Mlp { net, target } => net.eval(b, p, &shift(b, x, target)),
            Lyapunov::Quad(v) => v.eval(b, p, x),
            Lyapunov::Quadratic { s, target } => {
                let xs = shift(b, x, target);
                let sx = b.matmul(&xs, &b.constant(s.clone()));
                b.scale(&b.row_dot(&sx, &xs), 0.5)
            }
        }
    }

    /// `∇V` on a batch (`n × d`), differentiable in the parameters.
    pub fn grad<B: Backend>(&self, b: &B, p: &ParameterSet, x: &B::T) -> B::T {
        if let Lyapunov::Quadratic { s, target } = self {
            let xs = shift(b, x, target);
            return b.matmul(&xs, &b.constant(s.clone()));
        }
        autodiff::input_gradient(b, x, |d, xd| self.eval(d, p, xd)).expect("V is scalar per row")
    }

    /// Names of weights constrained to be nonnegative.
    pub fn nonnegative(&self) -> Vec<String> {
        match self {
            Lyapunov::Icnn(v) => v.nonnegative(),
            _ => Vec::new(),
        }
    }
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

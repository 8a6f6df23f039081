//! Loss terms, the Adam optimizer and the two Neural ETC training loops:
//! path integration (events solved during training) and Monte Carlo
//! (class-K rate learned alongside, no ODE solves).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use autodiff::{Backend, Eager, GradientMap, ParameterSet, Tape, Tensor, Unary, Var};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{NetcError, Result};
use crate::etcsim::{simulate_etc, EventFunction, EventKind};
use crate::model::{Model, Policy};
use crate::nets::{Activation, Arch, ClassK, ControlMode, ControllerNet, IcnnV, Lyapunov, Mlp, QuadV, DEFAULT_EPSILON};
use crate::odeint::{event_time_gradient, find_event, IntegrationConfig};
use crate::rng;
use crate::systems::{CellParams, System, SystemId};

/// Floor applied to the class-K integrand before taking reciprocals.
pub const Q_FLOOR: f64 = 1e-6;
pub const DIAG_STEP: f64 = 1e-4;
pub const LAPLACIAN_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NetcPi,
    NetcMc,
    Nlc,
    QuadNlc,
    Lqr,
    Balsa,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::NetcPi => "netc-pi",
            Method::NetcMc => "netc-mc",
            Method::Nlc => "nlc",
            Method::QuadNlc => "quad-nlc",
            Method::Lqr => "lqr",
            Method::Balsa => "balsa",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = NetcError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "netc-pi" => Method::NetcPi,
            "netc-mc" => Method::NetcMc,
            "nlc" => Method::Nlc,
            "quad-nlc" => Method::QuadNlc,
            "lqr" => Method::Lqr,
            "balsa" => Method::Balsa,
            other => return Err(NetcError::Config(format!("unknown method {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlModeSpec {
    Gated,
    Offset,
    Raw,
}

/// How the unconstrained NLC candidate is pinned at the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetPenalty {
    /// `V(x*)²`.
    Square,
    /// `V(x*)⁺`.
    Hinge,
}

/// How the controller's Lipschitz constant is kept in check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LipschitzMode {
    /// `λ₁ Σ σ(W_i)²` added to the loss.
    Penalty,
    /// Each weight divided by its spectral norm inside the network.
    Normalize,
}

/// Topology source for the cell model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellConfig {
    pub n_nodes: usize,
    pub degree: usize,
    pub weight: f64,
    pub b: f64,
    pub topology_seed: u64,
    pub edges: Option<PathBuf>,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self { n_nodes: 100, degree: 6, weight: 1.0, b: 1.0, topology_seed: 0, edges: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub system: SystemId,
    /// Dataset size `N`.
    pub n_data: usize,
    /// Samples from `[−b, b]^d` instead of the system's domain box.
    pub data_bound: Option<f64>,
    /// Initial states per event-solving iteration `M`.
    pub batch: usize,
    /// Class-K grid size `M_α` on `[0, alpha_max]`.
    pub m_alpha: usize,
    pub alpha_max: f64,
    pub lr: f64,
    pub warm_iters: usize,
    pub main_iters: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma: f64,
    pub seed: u64,
    pub v_arch: String,
    pub u_arch: String,
    pub k_arch: String,
    pub control_mode: ControlModeSpec,
    pub activation: Activation,
    pub v_activation: Activation,
    /// Hidden activation of the ICNN certificate.
    pub icnn_activation: Activation,
    pub epsilon: f64,
    pub lipschitz: LipschitzMode,
    /// Path-integral training with the class-K stabilization loss, plus
    /// `L_{α⁻¹}` at this weight.
    pub pi_alpha_weight: Option<f64>,
    pub target_penalty: TargetPenalty,
    pub step: Option<f64>,
    pub diag_every: usize,
    pub diag_points: usize,
    pub trigger_probe: Option<Vec<f64>>,
    pub cell: CellConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            system: SystemId::Grn,
            n_data: 1000,
            data_bound: None,
            batch: 10,
            m_alpha: 100,
            alpha_max: 10.0,
            lr: 0.05,
            warm_iters: 500,
            main_iters: 50,
            lambda1: 1.0,
            lambda2: 0.1,
            sigma: 0.5,
            seed: 0,
            v_arch: "ICNN(2,20,1)".into(),
            u_arch: "Control(2,20,20,1)".into(),
            k_arch: "K(1,20,1)".into(),
            control_mode: ControlModeSpec::Offset,
            activation: Activation::Relu,
            v_activation: Activation::Tanh,
            icnn_activation: Activation::Softplus,
            epsilon: DEFAULT_EPSILON,
            lipschitz: LipschitzMode::Penalty,
            pi_alpha_weight: None,
            target_penalty: TargetPenalty::Square,
            step: None,
            diag_every: 0,
            diag_points: 200,
            trigger_probe: None,
            cell: CellConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Hyperparameters of the benchmark configuration for `(system, method)`.
    pub fn preset(system: SystemId, method: Method) -> Self {
        use Method::*;
        use SystemId::*;
        let base = Self { system, ..Self::default() };
        match (system, method) {
            (Grn, NetcPi) => Self {
                v_arch: "ICNN(2,10,10,1)".into(),
                u_arch: "Control(2,20,20,1)".into(),
                lr: 0.01,
                lambda2: 0.01,
                ..base
            },
            (Grn, NetcMc) => Self { lambda1: 0.01, ..base },
            (Grn, Nlc) => Self { v_arch: "MLP(2,20,20,1)".into(), u_arch: "MLP(2,20,20,1)".into(), ..base },
            (Grn, QuadNlc) => Self { v_arch: "MLP(2,20,2)".into(), u_arch: "MLP(2,20,20,1)".into(), ..base },
            (Lorenz, NetcPi) => Self {
                n_data: 2000,
                v_arch: "ICNN(3,64,1)".into(),
                u_arch: "Control(3,64,64,3)".into(),
                main_iters: 100,
                lambda2: 0.05,
                control_mode: ControlModeSpec::Gated,
                ..base
            },
            (Lorenz, NetcMc) => Self {
                n_data: 5000,
                v_arch: "ICNN(3,64,1)".into(),
                u_arch: "Control(3,64,64,3)".into(),
                main_iters: 100,
                control_mode: ControlModeSpec::Gated,
                ..base
            },
            (Lorenz, Nlc) => Self {
                n_data: 5000,
                data_bound: Some(5.0),
                v_arch: "MLP(3,64,64,1)".into(),
                u_arch: "MLP(3,64,64,3)".into(),
                main_iters: 100,
                target_penalty: TargetPenalty::Hinge,
                ..base
            },
            (Lorenz, QuadNlc) => Self {
                n_data: 5000,
                data_bound: Some(5.0),
                v_arch: "MLP(3,64,3)".into(),
                u_arch: "MLP(3,64,64,3)".into(),
                main_iters: 100,
                ..base
            },
            (Cell, NetcPi) => Self {
                v_arch: "ICNN(100,64,1)".into(),
                u_arch: "Control(100,64,64,100)".into(),
                main_iters: 10,
                batch: 5,
                lr: 0.01,
                lambda2: 0.1,
                pi_alpha_weight: Some(0.1),
                k_arch: "K(1,20,1)".into(),
                ..base
            },
            (Cell, NetcMc) => Self {
                v_arch: "ICNN(100,200,1)".into(),
                u_arch: "Control(100,200,200,100)".into(),
                main_iters: 0,
                alpha_max: 5.0,
                ..base
            },
            (Cell, Nlc) => Self {
                v_arch: "MLP(100,200,200,1)".into(),
                u_arch: "MLP(100,200,200,100)".into(),
                main_iters: 0,
                lr: 0.01,
                ..base
            },
            (Cell, QuadNlc) => Self {
                v_arch: "MLP(100,200,100)".into(),
                u_arch: "MLP(100,200,200,100)".into(),
                main_iters: 0,
                lr: 0.01,
                ..base
            },
            (_, Lqr | Balsa) => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            bad.push("lambda1/lambda2 must be >= 0");
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            bad.push("sigma must lie in (0, 1)");
        }
        if !(self.lr > 0.0) {
            bad.push("lr must be > 0");
        }
        if self.n_data == 0 {
            bad.push("n_data must be >= 1");
        }
        if self.batch == 0 {
            bad.push("batch must be >= 1");
        }
        if self.m_alpha == 0 || !(self.alpha_max > 0.0) {
            bad.push("m_alpha and alpha_max must be positive");
        }
        if self.icnn_activation == Activation::Tanh {
            bad.push("icnn_activation must be convex and nondecreasing");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(NetcError::Config(bad.join("; ")))
        }
    }

    pub fn build_system(&self) -> Result<System> {
        Ok(match self.system {
            SystemId::Grn => System::grn(),
            SystemId::Lorenz => System::lorenz(),
            SystemId::Cell => {
                let c = &self.cell;
                let p = match &c.edges {
                    Some(path) => CellParams::load_edges(path, c.n_nodes, c.b)?,
                    None => CellParams::random_regular(c.n_nodes, c.degree, c.weight, c.b, c.topology_seed)?,
                };
                System::cell_with(p)
            }
        })
    }

    pub fn integration(&self, sys: &System) -> IntegrationConfig {
        IntegrationConfig::with_step(self.step.unwrap_or(sys.step))
    }

    /// Training states: `n_data` uniform samples.
    pub fn dataset(&self, sys: &System) -> Tensor {
        let mut r = rng::stream(self.seed, "data");
        match self.data_bound {
            Some(b) => sys.sample_box(&vec![(-b, b); sys.dim()], self.n_data, &mut r),
            None => sys.sample_domain(self.n_data, &mut r),
        }
    }

    pub fn alpha_grid(&self) -> Vec<f64> {
        let n = self.m_alpha;
        if n == 1 {
            return vec![self.alpha_max];
        }
        (0..n).map(|i| self.alpha_max * i as f64 / (n - 1) as f64).collect()
    }

    /// Untrained model for `method` with freshly initialized weights.
    pub fn build_model(&self, method: Method) -> Result<Model> {
        let sys = self.build_system()?;
        let target = sys.target.clone();
        let m = sys.control_dim();
        let mode = match self.control_mode {
            ControlModeSpec::Gated => ControlMode::Gated(sys.gate.clone()),
            ControlModeSpec::Offset => ControlMode::Offset,
            ControlModeSpec::Raw => ControlMode::Raw,
        };
        let v_arch: Arch = self.v_arch.parse()?;
        let u_arch: Arch = self.u_arch.parse()?;
        let v = match method {
            Method::NetcPi | Method::NetcMc => {
                let mut icnn = IcnnV::new(&v_arch, target.clone())?;
                icnn.epsilon = self.epsilon;
                icnn.inner = self.icnn_activation;
                Lyapunov::Icnn(icnn)
            }
            Method::Nlc => {
                if v_arch.dims[0] != sys.dim() || *v_arch.dims.last().unwrap() != 1 {
                    return Err(NetcError::Config(format!("{v_arch} must map the state to a scalar")));
                }
                Lyapunov::Mlp { net: Mlp::new("V", &v_arch, self.v_activation), target: target.clone() }
            }
            Method::QuadNlc => Lyapunov::Quad(QuadV::new(&v_arch, target.clone())?),
            Method::Lqr | Method::Balsa => {
                return Err(NetcError::Config(format!("{method} has no trainable model")));
            }
        };
        let mut net = ControllerNet::new(&u_arch, self.activation, mode, target, m)?;
        net.net.normalized = self.lipschitz == LipschitzMode::Normalize && matches!(method, Method::NetcPi | Method::NetcMc);
        let policy = Policy::Net(net);
        let mut model = Model::new(sys, v, policy);
        if method == Method::NetcMc || (method == Method::NetcPi && self.pi_alpha_weight.is_some()) {
            model.alpha = Some(ClassK::new(&self.k_arch.parse()?)?);
        }
        let mut params = model.v.init(&mut rng::stream(self.seed, "init-v"));
        if let Policy::Net(c) = &model.policy {
            params.extend(c.init(&mut rng::stream(self.seed, "init-u")))?;
        }
        if let Some(k) = &model.alpha {
            params.extend(k.init(&mut rng::stream(self.seed, "init-alpha")))?;
        }
        model.params = params;
        Ok(model)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradientMap) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// `(1/N) Σ (L V + V)⁺`.
pub fn loss_stab<B: Backend>(b: &B, model: &Model, x: &B::T) -> B::T {
    let u = model.u(b, x);
    let lie = model.lie_derivative(b, x, &u);
    b.mean_all(&b.relu(&b.add(&lie, &model.v(b, x))))
}

/// `(1/N) Σ (L V + α(‖x − x*‖))⁺`.
pub fn loss_stab_mc<B: Backend>(b: &B, model: &Model, x: &B::T) -> Result<B::T> {
    let u = model.u(b, x);
    let lie = model.lie_derivative(b, x, &u);
    Ok(b.mean_all(&b.relu(&b.add(&lie, &model.alpha_of_state(b, x)?))))
}

/// `Σ σ(W_i)²` over the controller's weights.
pub fn loss_lip<B: Backend>(b: &B, model: &Model) -> B::T {
    model.lipschitz_penalty(b)
}

/// `(1/M) Σ 1/t₁`.
pub fn loss_event_pi<B: Backend>(b: &B, times: &[B::T]) -> Result<B::T> {
    if times.is_empty() {
        return Err(NetcError::Contract("no event times".into()));
    }
    let mut acc = b.scalar(0.0);
    for t in times {
        let v = b.scalar_value(t);
        if !(v > 0.0) {
            return Err(NetcError::Contract(format!("event times must be positive, got {v}")));
        }
        acc = b.add(&acc, &b.unary(t, Unary::RECIP));
    }
    Ok(b.scale(&acc, 1.0 / times.len() as f64))
}

/// `(1/M_α) Σ 1/max(q(sᵢ), floor)`.
pub fn loss_alpha_inv<B: Backend>(b: &B, k: &ClassK, params: &ParameterSet, grid: &[f64]) -> B::T {
    let q = k.integrand(b, params, &b.constant(Tensor::column(grid)));
    b.mean_all(&b.unary(&b.unary(&q, Unary::ClampMin(Q_FLOOR)), Unary::RECIP))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub grad_u_norm: f64,
    pub hess_v_trace: f64,
}

/// Mean Frobenius norm of the controller Jacobian and mean Laplacian of
/// `V`, both by central differences.
pub fn training_diagnostics(model: &Model, probe: &Tensor) -> Result<Diagnostics> {
    let (n, d) = probe.dims();
    if n == 0 {
        return Err(NetcError::Contract("empty probe set".into()));
    }
    let shifted = |j: usize, h: f64| {
        let mut p = probe.clone();
        for i in 0..n {
            p.data[i * d + j] += h;
        }
        p
    };
    let mut jac_sq = vec![0.0; n];
    let mut lap = vec![0.0; n];
    let v0 = model.v(&Eager, probe);
    for j in 0..d {
        let up = model.u(&Eager, &shifted(j, DIAG_STEP));
        let um = model.u(&Eager, &shifted(j, -DIAG_STEP));
        let m = up.cols();
        for i in 0..n {
            for c in 0..m {
                let g = (up.get(i, c) - um.get(i, c)) / (2.0 * DIAG_STEP);
                jac_sq[i] += g * g;
            }
        }
        let vp = model.v(&Eager, &shifted(j, LAPLACIAN_STEP));
        let vm = model.v(&Eager, &shifted(j, -LAPLACIAN_STEP));
        for i in 0..n {
            lap[i] += (vp.data[i] - 2.0 * v0.data[i] + vm.data[i]) / (LAPLACIAN_STEP * LAPLACIAN_STEP);
        }
    }
    Ok(Diagnostics {
        grad_u_norm: jac_sq.iter().map(|s| s.sqrt()).sum::<f64>() / n as f64,
        hess_v_trace: lap.iter().sum::<f64>() / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticPoint {
    pub iter: usize,
    pub grad_u_norm: f64,
    pub hess_v_trace: f64,
    pub triggers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    /// One entry per iteration for every loss term (and `total`).
    pub curves: BTreeMap<String, Vec<f64>>,
    pub diagnostics: Vec<DiagnosticPoint>,
    pub wall_clock_secs: f64,
    pub iterations: usize,
    pub model: Model,
}

impl TrainReport {
    pub fn checkpoint(&self) -> &ParameterSet {
        &self.model.params
    }

    /// Writes `report.json`, `checkpoint.json` and `curves.csv` into `dir`.
    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        self.model.params.save(dir.join("checkpoint.json"))?;
        let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
        let names: Vec<&String> = self.curves.keys().collect();
        let mut header = vec!["iter".to_string()];
        header.extend(names.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for i in 0..self.iterations {
            let mut row = vec![i.to_string()];
            row.extend(names.iter().map(|n| self.curves[*n].get(i).map_or(String::new(), f64::to_string)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Recorder {
    curves: BTreeMap<String, Vec<f64>>,
    diagnostics: Vec<DiagnosticPoint>,
    iter: usize,
}

impl Recorder {
    fn new(names: &[&str]) -> Self {
        let mut curves: BTreeMap<String, Vec<f64>> = names.iter().map(|n| (n.to_string(), Vec::new())).collect();
        curves.insert("total".into(), Vec::new());
        Self { curves, diagnostics: Vec::new(), iter: 0 }
    }
}

/// Sums weighted loss terms, takes one Adam step and records every term.
fn optimize(
    tape: &Tape,
    model: &mut Model,
    adam: &mut Adam,
    terms: Vec<(&'static str, f64, Var)>,
    rec: &mut Recorder,
) -> Result<()> {
    let mut total = tape.scalar(0.0);
    let mut values = Vec::with_capacity(terms.len());
    for (name, weight, var) in &terms {
        let v = tape.value(var).item();
        values.push((*name, v));
        if *weight != 0.0 {
            total = tape.add(&total, &tape.scale(var, *weight));
        }
    }
    let total_v = tape.value(&total).item();
    if !total_v.is_finite() {
        return Err(NetcError::Training(format!("loss became non-finite at iteration {}", rec.iter)));
    }
    let grads = tape.grad(total, &model.params)?;
    adam.step(&mut model.params, &grads);
    model.clamp_constraints();
    for (name, v) in values {
        rec.curves.entry(name.to_string()).or_default().push(v);
    }
    rec.curves.get_mut("total").unwrap().push(total_v);
    rec.iter += 1;
    Ok(())
}

fn maybe_diagnose(cfg: &TrainConfig, model: &Model, event: &EventFunction, probe: &Tensor, rec: &mut Recorder) -> Result<()> {
    if cfg.diag_every == 0 || rec.iter % cfg.diag_every != 0 {
        return Ok(());
    }
    let d = training_diagnostics(model, probe)?;
    let triggers = match &cfg.trigger_probe {
        Some(x0) => {
            let cfg_int = cfg.integration(&model.system);
            simulate_etc(model, event, x0, model.system.horizon, None, &cfg_int).ok().map(|t| t.num_triggers())
        }
        None => None,
    };
    rec.diagnostics.push(DiagnosticPoint { iter: rec.iter, grad_u_norm: d.grad_u_norm, hess_v_trace: d.hess_v_trace, triggers });
    Ok(())
}

fn diag_probe(cfg: &TrainConfig, sys: &System) -> Tensor {
    if cfg.diag_every == 0 {
        return Tensor::zeros(0, sys.dim());
    }
    sys.sample_domain(cfg.diag_points, &mut rng::stream(cfg.seed, "diagnostics"))
}

fn finish(method: Method, model: Model, rec: Recorder, start: Instant) -> TrainReport {
    TrainReport {
        method,
        iterations: rec.iter,
        curves: rec.curves,
        diagnostics: rec.diagnostics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        model,
    }
}

/// Stabilization terms shared by both phases of path-integral training.
fn pi_stab_terms(tape: &Tape, model: &Model, cfg: &TrainConfig, x: &Var, grid: &[f64]) -> Result<Vec<(&'static str, f64, Var)>> {
    let mut terms = Vec::new();
    match (cfg.pi_alpha_weight, &model.alpha) {
        (Some(w), Some(k)) => {
            terms.push(("stab", 1.0, loss_stab_mc(tape, model, x)?));
            terms.push(("alpha_inv", w, loss_alpha_inv(tape, k, &model.params, grid)));
        }
        _ => terms.push(("stab", 1.0, loss_stab(tape, model, x))),
    }
    terms.push(("lip", cfg.lambda1, loss_lip(tape, model)));
    Ok(terms)
}

/// Path-integral training: warm-up on the stabilization and Lipschitz
/// losses, then minimization of `L_stab + λ₁L_lip + λ₂L_event` with the
/// first event time of `M` fresh initial states per iteration.
pub fn train_pi(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = cfg.build_model(Method::NetcPi)?;
    let data = cfg.dataset(&model.system);
    let grid = cfg.alpha_grid();
    let int_cfg = cfg.integration(&model.system);
    int_cfg.validate()?;
    let event = EventFunction::new(EventKind::HSigmaV, cfg.sigma)?;
    let probe = diag_probe(cfg, &model.system);
    let mut adam = Adam::new(cfg.lr);
    let mut rec = Recorder::new(&["stab", "lip", "event"]);

    for _ in 0..cfg.warm_iters {
        maybe_diagnose(cfg, &model, &event, &probe, &mut rec)?;
        let tape = Tape::new();
        let x = tape.constant(data.clone());
        let terms = pi_stab_terms(&tape, &model, cfg, &x, &grid)?;
        optimize(&tape, &mut model, &mut adam, terms, &mut rec)?;
        rec.curves.get_mut("event").unwrap().push(f64::NAN);
    }

    let mut batch_rng = rng::stream(cfg.seed, "batch");
    let horizon = model.system.horizon;
    let d = model.dim();
    for _ in 0..cfg.main_iters {
        maybe_diagnose(cfg, &model, &event, &probe, &mut rec)?;
        let idx = sample(&mut batch_rng, data.rows(), cfg.batch.min(data.rows()));
        let mut solved = Vec::new();
        let mut first_error = None;
        let snapshot = model.baked();
        for i in idx.iter() {
            let x0 = data.row_slice(i).to_vec();
            let uk = Tensor::row(&snapshot.u_at(&x0));
            let x0t = Tensor::row(&x0);
            let sys = &snapshot.system;
            let field = |x: &[f64]| sys.field(&Eager, &Tensor::row(x), &uk).data;
            let h = |x: &[f64]| {
                event.value(&Eager, &snapshot, &Tensor::row(x), &x0t, &uk).map_or(f64::NAN, |v| v.item())
            };
            match find_event(field, h, &x0, 0.0, horizon, &int_cfg) {
                Ok(res) => solved.push((x0, res)),
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if solved.is_empty() {
            return Err(NetcError::Training(format!(
                "event solving failed for the whole batch ({}); increase the warm-up iterations",
                first_error.map_or_else(|| "no samples".into(), |e| e.to_string())
            )));
        }
        let tape = Tape::new();
        let x = tape.constant(data.clone());
        let mut terms = pi_stab_terms(&tape, &model, cfg, &x, &grid)?;
        let mut times = Vec::with_capacity(solved.len());
        for (x0, res) in &solved {
            let x0v = tape.constant(Tensor::new(vec![1, d], x0.clone())?);
            let ukv = model.u(&tape, &x0v);
            let sys = &model.system;
            let field = |t: &Tape, x: &Var| sys.field(t, x, &ukv);
            let h = |t: &Tape, x: &Var| {
                event.value(t, &model, x, &x0v, &ukv).expect("h_sigma_V needs no class-K function")
            };
            let tv = match event_time_gradient(&tape, field, h, &x0v, res, &int_cfg) {
                Ok(tv) => tv,
                Err(NetcError::Tangential { .. }) => tape.scalar(res.t_event),
                Err(e) => return Err(e),
            };
            times.push(tv);
        }
        terms.push(("event", cfg.lambda2, loss_event_pi(&tape, &times)?));
        optimize(&tape, &mut model, &mut adam, terms, &mut rec)?;
    }
    if cfg.pi_alpha_weight.is_none() {
        rec.curves.remove("alpha_inv");
    }
    Ok(finish(Method::NetcPi, model, rec, start))
}

/// Monte Carlo training of `L̃_stab + λ₁L_lip + λ₂L_{α⁻¹}` on the full
/// dataset; no trajectories are integrated.
pub fn train_mc(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = cfg.build_model(Method::NetcMc)?;
    let data = cfg.dataset(&model.system);
    let grid = cfg.alpha_grid();
    let event = EventFunction::new(EventKind::HTilde, cfg.sigma)?;
    let probe = diag_probe(cfg, &model.system);
    let mut adam = Adam::new(cfg.lr);
    let mut rec = Recorder::new(&["stab", "lip", "alpha_inv"]);
    let k = model.alpha.clone().expect("built with a class-K function");
    for _ in 0..cfg.warm_iters + cfg.main_iters {
        maybe_diagnose(cfg, &model, &event, &probe, &mut rec)?;
        let tape = Tape::new();
        let x = tape.constant(data.clone());
        let terms = vec![
            ("stab", 1.0, loss_stab_mc(&tape, &model, &x)?),
            ("lip", cfg.lambda1, loss_lip(&tape, &model)),
            ("alpha_inv", cfg.lambda2, loss_alpha_inv(&tape, &k, &model.params, &grid)),
        ];
        optimize(&tape, &mut model, &mut adam, terms, &mut rec)?;
    }
    Ok(finish(Method::NetcMc, model, rec, start))
}

/// Full-batch training of the NLC and Quad-NLC baselines.
pub(crate) fn train_baseline(cfg: &TrainConfig, method: Method) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = cfg.build_model(method)?;
    let data = cfg.dataset(&model.system);
    let kind = if method == Method::Nlc { EventKind::NlcRatio } else { EventKind::HSigmaV };
    let event = EventFunction::new(kind, cfg.sigma)?;
    let probe = diag_probe(cfg, &model.system);
    let mut adam = Adam::new(cfg.lr);
    let mut rec = Recorder::new(&["stab", "target"]);
    let target = Tensor::row(model.target());
    for _ in 0..cfg.warm_iters + cfg.main_iters {
        maybe_diagnose(cfg, &model, &event, &probe, &mut rec)?;
        let tape = Tape::new();
        let x = tape.constant(data.clone());
        let stab = if method == Method::Nlc {
            let u = model.u(&tape, &x);
            let lie = model.lie_derivative(&tape, &x, &u);
            let v = model.v(&tape, &x);
            tape.mean_all(&tape.add(&tape.relu(&lie), &tape.relu(&tape.neg(&v))))
        } else {
            loss_stab(&tape, &model, &x)
        };
        let v_star = model.v(&tape, &tape.constant(target.clone()));
        let pin = match (method, cfg.target_penalty) {
            (Method::Nlc, TargetPenalty::Hinge) => tape.relu(&v_star),
            _ => tape.square(&v_star),
        };
        let pin = tape.sum_all(&pin);
        optimize(&tape, &mut model, &mut adam, vec![("stab", 1.0, stab), ("target", 1.0, pin)], &mut rec)?;
    }
    Ok(finish(method, model, rec, start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::IntegrandOutput;

    fn zeroed(p: &ParameterSet) -> ParameterSet {
        p.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols()))).collect()
    }

    #[test]
    fn hinge_loss_examples() {
        // Quadratic V on a Lorenz model with a linear policy gives L V + V in closed form.
        let v = Lyapunov::Quadratic { s: Tensor::identity(3), target: vec![0.0; 3] };
        let m = Model::new(System::lorenz(), v, Policy::Zero);
        // x = (0,0,z): L V = −β z², V = z²/2, so L V + V = z²(½ − 8/3) < 0.
        let x = Tensor::row(&[0.0, 0.0, 1.0]);
        assert_eq!(loss_stab(&Eager, &m, &x).item(), 0.0);
        // x = (1,1,0): x·f₀ = −10+10 + 28 − 1 = 27, V = 1, hinge 28.
        let x = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!((loss_stab(&Eager, &m, &x).item() - 14.0).abs() < 1e-12);
    }

    #[test]
    fn mc_hinge_examples() {
        let mut cfg = TrainConfig::preset(SystemId::Lorenz, Method::NetcMc);
        cfg.k_arch = "K(1,4,1)".into();
        let mut m = cfg.build_model(Method::NetcMc).unwrap();
        // Constant integrand 1 (zero weights, ELU(0)+1): α(r) = r.
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("a.") {
                t.data.fill(0.0);
            }
        }
        m.v = Lyapunov::Quadratic { s: Tensor::identity(3), target: vec![0.0; 3] };
        m.policy = Policy::Zero;
        // x = (0,0,½): L V = −β/4 = −2/3, α = ½ → inactive.
        assert_eq!(loss_stab_mc(&Eager, &m, &Tensor::row(&[0.0, 0.0, 0.5])).unwrap().item(), 0.0);
        // x = (0.1, 0.1, 0): L V = 0.27, α = √0.02.
        let want = 0.27 + 0.02f64.sqrt();
        assert!((loss_stab_mc(&Eager, &m, &Tensor::row(&[0.1, 0.1, 0.0])).unwrap().item() - want).abs() < 1e-12);
    }

    #[test]
    fn event_and_alpha_inverse_examples() {
        let t = [Tensor::scalar(0.5), Tensor::scalar(0.25)];
        assert_eq!(loss_event_pi(&Eager, &t).unwrap().item(), 3.0);
        assert_eq!(loss_event_pi(&Eager, &[Tensor::scalar(1.0)]).unwrap().item(), 1.0);
        assert!(loss_event_pi(&Eager, &[Tensor::scalar(0.0)]).is_err());

        let mut k = ClassK::new(&"K(1,2,1)".parse().unwrap()).unwrap();
        let mut p = zeroed(&k.init(&mut rng::seeded(0)));
        assert!((loss_alpha_inv(&Eager, &k, &p, &[0.0, 1.0, 5.0]).item() - 1.0).abs() < 1e-15);
        // q(s) = relu(relu(s)) = s: values {1, 2} → 0.75.
        k.output = IntegrandOutput::Relu;
        p.get_mut("a.W0").unwrap().data = vec![1.0, 0.0];
        p.get_mut("a.W1").unwrap().data = vec![1.0, 0.0];
        assert!((loss_alpha_inv(&Eager, &k, &p, &[1.0, 2.0]).item() - 0.75).abs() < 1e-15);
        p.get_mut("a.b1").unwrap().data = vec![10.0];
        p.get_mut("a.W1").unwrap().data = vec![0.0, 0.0];
        assert!((loss_alpha_inv(&Eager, &k, &p, &[1.0, 2.0]).item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::row(&[1.0, -1.0]));
        let mut g = GradientMap::new();
        g.insert("w", Tensor::row(&[3.0, -0.2]));
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &g);
        assert!((p.get("w").unwrap().data[0] - 0.9).abs() < 1e-7);
        assert!((p.get("w").unwrap().data[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn diagnostics_examples() {
        let v = Lyapunov::Quadratic { s: Tensor::identity(3).scale(2e-3), target: vec![0.0; 3] };
        let mut m = Model::new(System::lorenz(), v, Policy::Zero);
        let probe = m.system.sample_domain(50, &mut rng::seeded(4));
        let d = training_diagnostics(&m, &probe).unwrap();
        assert_eq!(d.grad_u_norm, 0.0);
        assert!((d.hess_v_trace - 6e-3).abs() < 1e-6);
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, -1.0, 0.5], vec![3.0, 0.0, 0.0]]);
        m.policy = Policy::Linear { k: a.scale(-1.0) };
        let d = training_diagnostics(&m, &probe).unwrap();
        assert!((d.grad_u_norm - a.frobenius_norm()).abs() < 1e-8);
    }

    fn tiny(system: SystemId, method: Method) -> TrainConfig {
        let mut cfg = TrainConfig::preset(system, method);
        cfg.n_data = 64;
        cfg.warm_iters = 15;
        cfg.main_iters = 2;
        cfg.batch = 3;
        cfg
    }

    #[test]
    fn mc_training_is_deterministic_and_solver_free() {
        let cfg = tiny(SystemId::Grn, Method::NetcMc);
        let before = crate::odeint::solver_calls();
        let a = train_mc(&cfg).unwrap();
        assert_eq!(crate::odeint::solver_calls(), before);
        let b = train_mc(&cfg).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.curves["total"].len(), 17);
        for name in a.model.v.nonnegative() {
            assert!(a.model.params.get(&name).unwrap().data.iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn pi_training_runs_both_phases() {
        let cfg = tiny(SystemId::Grn, Method::NetcPi);
        let r = train_pi(&cfg).unwrap();
        assert_eq!(r.iterations, 17);
        assert!(r.curves["event"][15..].iter().all(|v| v.is_finite() && *v > 0.0));
        let again = train_pi(&cfg).unwrap();
        assert_eq!(r.model.params, again.model.params);
        let warm_only = TrainConfig { main_iters: 0, ..cfg };
        let w = train_pi(&warm_only).unwrap();
        assert!(w.curves["event"].iter().all(|v| v.is_nan()));
    }

    #[test]
    fn baselines_train() {
        for method in [Method::Nlc, Method::QuadNlc] {
            let r = train_baseline(&tiny(SystemId::Grn, method), method).unwrap();
            assert_eq!(r.iterations, 17);
            assert!(r.curves["total"].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.sigma = 1.0;
        cfg.lr = 0.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("sigma") && msg.contains("lr"));
    }
}

//! Benchmark control-affine systems `ẋ = f₀(x) + g(x)u`.
//!
//! Vector fields are written against [`Backend`] and act on batches: a state
//! batch is `n × d`, a control batch `n × m`.

use std::path::Path;

use autodiff::{Backend, Eager, Tensor, Unary};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{NetcError, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemId {
    Grn,
    Lorenz,
    Cell,
}

impl std::fmt::Display for SystemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SystemId::Grn => "grn",
            SystemId::Lorenz => "lorenz",
            SystemId::Cell => "cell",
        })
    }
}

impl std::str::FromStr for SystemId {
    type Err = NetcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grn" => Ok(SystemId::Grn),
            "lorenz" => Ok(SystemId::Lorenz),
            "cell" => Ok(SystemId::Cell),
            other => Err(NetcError::Config(format!("unknown system {other:?}"))),
        }
    }
}

/// Two-gene mutual-activation network, optionally rescaled by `scale`
/// (`x̃ = scale·x`). Control modulates the self-activation of gene 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrnParams {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub n: f64,
    pub k: f64,
    pub s: f64,
    pub scale: f64,
}

impl Default for GrnParams {
    fn default() -> Self {
        Self { a1: 1.0, a2: 1.0, b1: 0.2, b2: 0.2, n: 2.0, k: 1.1, s: 0.5, scale: 10.0 }
    }
}

/// Attractors of the unscaled GRN.
pub const GRN_P1: [f64; 2] = [0.625_620_59, 0.625_620_59];
pub const GRN_P2: [f64; 2] = [0.058_273_8, 0.858_018_53];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }
}

/// Coupled Michaelis–Menten cells; control perturbs the diagonal couplings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub n_nodes: usize,
    pub b: f64,
    pub degree: usize,
    pub weight: f64,
    /// `n × n`, nonnegative.
    pub adjacency: Tensor,
    pub inactive: Vec<f64>,
    pub active: Vec<f64>,
}

impl CellParams {
    /// Random `degree`-regular topology from `seed`, equilibria included.
    pub fn random_regular(n_nodes: usize, degree: usize, weight: f64, b: f64, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "cell-topology");
        let edges = random_regular_graph(n_nodes, degree, &mut rng)?;
        let mut a = Tensor::zeros(n_nodes, n_nodes);
        for (i, j) in edges {
            a.set(i, j, weight);
            a.set(j, i, weight);
        }
        Self::from_adjacency(a, b, degree, weight)
    }

    pub fn from_adjacency(adjacency: Tensor, b: f64, degree: usize, weight: f64) -> Result<Self> {
        let (n, m) = adjacency.dims();
        if n != m {
            return Err(NetcError::Config(format!("adjacency must be square, got {n}x{m}")));
        }
        if adjacency.data.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(NetcError::Config("adjacency entries must be finite and >= 0".into()));
        }
        let inactive = cell_fixed_point(&adjacency, b, &vec![0.0; n])?;
        let active = cell_fixed_point(&adjacency, b, &vec![5.0; n])?;
        Ok(Self { n_nodes: n, b, degree, weight, adjacency, inactive, active })
    }

    /// Reads a `i,j,weight` edge list (0-indexed, directed entries `A_ij`).
    pub fn load_edges(path: impl AsRef<Path>, n_nodes: usize, b: f64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut a = Tensor::zeros(n_nodes, n_nodes);
        for rec in reader.deserialize::<(usize, usize, f64)>() {
            let (i, j, w) = rec?;
            if i >= n_nodes || j >= n_nodes {
                return Err(NetcError::Config(format!("edge ({i},{j}) outside {n_nodes} nodes")));
            }
            a.set(i, j, w);
        }
        Self::from_adjacency(a, b, 0, 0.0)
    }

    pub fn save_edges(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j", "weight"])?;
        let n = self.n_nodes;
        for i in 0..n {
            for j in 0..n {
                let v = self.adjacency.get(i, j);
                if v != 0.0 {
                    w.serialize((i, j, v))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Degree-preserving randomization of a circulant regular graph by seeded
/// double-edge swaps. Returns undirected edges `(i, j)` with `i < j`.
fn random_regular_graph(n: usize, degree: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if degree % 2 != 0 || degree >= n {
        return Err(NetcError::Config(format!(
            "degree must be even and below the node count (got {degree}, n = {n})"
        )));
    }
    let key = |a: usize, b: usize| if a < b { (a, b) } else { (b, a) };
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for off in 1..=degree / 2 {
            edges.push(key(i, (i + off) % n));
        }
    }
    let mut set: std::collections::BTreeSet<(usize, usize)> = edges.iter().copied().collect();
    for _ in 0..20 * edges.len() {
        let p = rng.gen_range(0..edges.len());
        let q = rng.gen_range(0..edges.len());
        if p == q {
            continue;
        }
        let (a, b) = edges[p];
        let (c, d) = edges[q];
        let (c, d) = if rng.gen_bool(0.5) { (c, d) } else { (d, c) };
        // a-b, c-d  ->  a-c, b-d
        if a == c || b == d || a == d || b == c {
            continue;
        }
        let e1 = key(a, c);
        let e2 = key(b, d);
        if set.contains(&e1) || set.contains(&e2) {
            continue;
        }
        set.remove(&edges[p]);
        set.remove(&edges[q]);
        set.insert(e1);
        set.insert(e2);
        edges[p] = e1;
        edges[q] = e2;
    }
    edges.sort_unstable();
    Ok(edges)
}

fn hill_sat(x: f64) -> f64 {
    x * x / (1.0 + x * x)
}

/// Damped fixed-point iteration of `x = A φ(x) / B`.
fn cell_fixed_point(a: &Tensor, b: f64, start: &[f64]) -> Result<Vec<f64>> {
    let n = start.len();
    let mut x = start.to_vec();
    for _ in 0..100_000 {
        let phi: Vec<f64> = x.iter().map(|&v| hill_sat(v)).collect();
        let mut res = 0.0f64;
        let mut next = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..n).map(|j| a.get(i, j) * phi[j]).sum();
            res = res.max((s - b * x[i]).abs());
            next[i] = 0.5 * x[i] + 0.5 * s / b;
        }
        if res < 1e-10 {
            return Ok(x);
        }
        x = next;
    }
    Err(NetcError::Infeasible("cell equilibrium iteration did not converge".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Dynamics {
    Grn(GrnParams),
    Lorenz(LorenzParams),
    Cell(CellParams),
}

/// A benchmark system together with its target, sampling box and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct System {
    pub id: SystemId,
    pub dynamics: Dynamics,
    pub target: Vec<f64>,
    pub domain: Vec<(f64, f64)>,
    pub horizon: f64,
    pub step: f64,
    /// Coordinates multiplying each control channel in the gated controller.
    pub gate: Vec<usize>,
}

impl System {
    pub fn grn() -> Self {
        Self::grn_with(GrnParams::default())
    }

    pub fn grn_with(p: GrnParams) -> Self {
        let target = GRN_P1.iter().map(|v| v * p.scale).collect();
        Self {
            id: SystemId::Grn,
            dynamics: Dynamics::Grn(p),
            target,
            domain: vec![(-10.0, 10.0); 2],
            horizon: 20.0,
            step: 0.01,
            gate: vec![0],
        }
    }

    pub fn lorenz() -> Self {
        Self {
            id: SystemId::Lorenz,
            dynamics: Dynamics::Lorenz(LorenzParams::default()),
            target: vec![0.0; 3],
            domain: vec![(-10.0, 10.0); 3],
            horizon: 2.0,
            step: 0.001,
            gate: vec![0, 1, 2],
        }
    }

    pub fn cell(seed: u64) -> Result<Self> {
        Ok(Self::cell_with(CellParams::random_regular(100, 6, 1.0, 1.0, seed)?))
    }

    pub fn cell_with(p: CellParams) -> Self {
        let n = p.n_nodes;
        Self {
            id: SystemId::Cell,
            target: p.active.clone(),
            dynamics: Dynamics::Cell(p),
            domain: vec![(-10.0, 10.0); n],
            horizon: 30.0,
            step: 0.01,
            gate: (0..n).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn control_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::Grn(_) => 1,
            Dynamics::Lorenz(_) => 3,
            Dynamics::Cell(p) => p.n_nodes,
        }
    }

    /// Whether `g(x)` is the identity.
    pub fn identity_actuator(&self) -> bool {
        matches!(self.dynamics, Dynamics::Lorenz(_))
    }

    /// Uncontrolled drift `f₀` on a batch.
    pub fn drift<B: Backend>(&self, b: &B, x: &B::T) -> B::T {
        match &self.dynamics {
            Dynamics::Grn(p) => {
                let s = p.s * p.scale;
                let x1 = b.col(x, 0);
                let x2 = b.col(x, 1);
                let act1 = hill(b, &x1, p.n, s);
                let act2 = hill(b, &x2, p.n, s);
                let rep1 = b.add_scalar(&b.neg(&act1), 1.0);
                let rep2 = b.add_scalar(&b.neg(&act2), 1.0);
                let c = p.scale;
                let d1 = b.sub(&b.add(&b.scale(&act1, c * p.a1), &b.scale(&rep2, c * p.b1)), &b.scale(&x1, p.k));
                let d2 = b.sub(&b.add(&b.scale(&act2, c * p.a2), &b.scale(&rep1, c * p.b2)), &b.scale(&x2, p.k));
                b.hcat(&[d1, d2])
            }
            Dynamics::Lorenz(p) => {
                let x1 = b.col(x, 0);
                let x2 = b.col(x, 1);
                let x3 = b.col(x, 2);
                let d1 = b.scale(&b.sub(&x2, &x1), p.sigma);
                let d2 = b.sub(&b.sub(&b.scale(&x1, p.rho), &x2), &b.mul(&x1, &x3));
                let d3 = b.sub(&b.mul(&x1, &x2), &b.scale(&x3, p.beta));
                b.hcat(&[d1, d2, d3])
            }
            Dynamics::Cell(p) => {
                let phi = sat(b, x);
                let a = b.constant(p.adjacency.clone());
                b.sub(&b.matmul_nt(&phi, &a), &b.scale(x, p.b))
            }
        }
    }

    /// `g(x) u` on a batch.
    pub fn actuate<B: Backend>(&self, b: &B, x: &B::T, u: &B::T) -> B::T {
        match &self.dynamics {
            Dynamics::Grn(p) => {
                let g = b.scale(&hill(b, &b.col(x, 0), p.n, p.s * p.scale), p.scale);
                let gu = b.mul(&g, u);
                let (n, _) = b.dims(x);
                b.hcat(&[gu, b.zeros(n, 1)])
            }
            Dynamics::Lorenz(_) => u.clone(),
            Dynamics::Cell(_) => b.mul(&sat(b, x), u),
        }
    }

    /// `g(x)ᵀ w` on a batch (`w` is `n × d`, result `n × m`).
    pub fn actuate_transpose<B: Backend>(&self, b: &B, x: &B::T, w: &B::T) -> B::T {
        match &self.dynamics {
            Dynamics::Grn(p) => {
                let g = b.scale(&hill(b, &b.col(x, 0), p.n, p.s * p.scale), p.scale);
                b.mul(&g, &b.col(w, 0))
            }
            Dynamics::Lorenz(_) => w.clone(),
            Dynamics::Cell(_) => b.mul(&sat(b, x), w),
        }
    }

    /// `f(x, u) = f₀(x) + g(x)u` on a batch.
    pub fn field<B: Backend>(&self, b: &B, x: &B::T, u: &B::T) -> B::T {
        b.add(&self.drift(b, x), &self.actuate(b, x, u))
    }

    /// Single-state vector field with a finiteness check.
    pub fn vector_field(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        let out = self.field(&Eager, &Tensor::row(x), &Tensor::row(u));
        if let Some(coord) = out.data.iter().position(|v| !v.is_finite()) {
            return Err(NetcError::NonFinite { what: "vector field", coord });
        }
        Ok(out.data)
    }

    /// Dense `d × m` actuator matrix at `x`.
    pub fn actuator_matrix(&self, x: &[f64]) -> Tensor {
        let (d, m) = (self.dim(), self.control_dim());
        let mut g = Tensor::zeros(d, m);
        match &self.dynamics {
            Dynamics::Grn(p) => {
                let s = p.s * p.scale;
                let xn = x[0].powf(p.n);
                g.set(0, 0, p.scale * xn / (s.powf(p.n) + xn));
            }
            Dynamics::Lorenz(_) => g = Tensor::identity(3),
            Dynamics::Cell(_) => {
                for i in 0..d {
                    g.set(i, i, hill_sat(x[i]));
                }
            }
        }
        g
    }

    /// `count` uniform samples from the domain box, one per row.
    pub fn sample_domain(&self, count: usize, rng: &mut Rng) -> Tensor {
        self.sample_box(&self.domain, count, rng)
    }

    pub fn sample_box(&self, bounds: &[(f64, f64)], count: usize, rng: &mut Rng) -> Tensor {
        let d = bounds.len();
        let mut t = Tensor::zeros(count, d);
        for i in 0..count {
            for (j, &(lo, hi)) in bounds.iter().enumerate() {
                t.set(i, j, rng.gen_range(lo..hi));
            }
        }
        t
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.dim() || u.len() != self.control_dim() {
            return Err(NetcError::Contract(format!(
                "{} expects x in R^{} and u in R^{}, got {} and {}",
                self.id,
                self.dim(),
                self.control_dim(),
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// Central-difference Jacobians `(∂f/∂x, ∂f/∂u)` at `(x, u)`.
    pub fn linearize(&self, x: &[f64], u: &[f64]) -> (Tensor, Tensor) {
        let (d, m) = (self.dim(), self.control_dim());
        let h = 1e-6;
        let f = |x: &[f64], u: &[f64]| self.field(&Eager, &Tensor::row(x), &Tensor::row(u)).data;
        let mut a = Tensor::zeros(d, d);
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f(&xp, u), f(&xm, u));
            for i in 0..d {
                a.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
            }
        }
        let mut bm = Tensor::zeros(d, m);
        for j in 0..m {
            let mut up = u.to_vec();
            let mut um = u.to_vec();
            up[j] += h;
            um[j] -= h;
            let (fp, fm) = (f(x, &up), f(x, &um));
            for i in 0..d {
                bm.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
            }
        }
        (a, bm)
    }

    /// Equilibria the benchmark cares about (target first).
    pub fn equilibria(&self) -> Vec<Vec<f64>> {
        match &self.dynamics {
            Dynamics::Grn(p) => vec![
                GRN_P1.iter().map(|v| v * p.scale).collect(),
                GRN_P2.iter().map(|v| v * p.scale).collect(),
            ],
            Dynamics::Lorenz(_) => vec![vec![0.0; 3]],
            Dynamics::Cell(p) => vec![p.active.clone(), p.inactive.clone()],
        }
    }
}

/// `zⁿ / (sⁿ + zⁿ)`.
fn hill<B: Backend>(b: &B, z: &B::T, n: f64, s: f64) -> B::T {
    let zn = b.unary(z, Unary::Pow { p: n, c: 1.0 });
    let den = b.add_scalar(&zn, s.powf(n));
    b.div(&zn, &den)
}

/// `x² / (1 + x²)` elementwise.
fn sat<B: Backend>(b: &B, x: &B::T) -> B::T {
    let x2 = b.square(x);
    b.div(&x2, &b.add_scalar(&x2, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn lorenz_values() {
        let s = System::lorenz();
        assert_eq!(s.vector_field(&[0.0; 3], &[0.0; 3]).unwrap(), vec![0.0; 3]);
        let f = s.vector_field(&[1.0, 1.0, 1.0], &[0.0; 3]).unwrap();
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 26.0);
        assert!((f[2] - (1.0 - 8.0 / 3.0)).abs() < 1e-15);
        assert_eq!(s.actuator_matrix(&[3.0, -1.0, 2.0]), Tensor::identity(3));
    }

    #[test]
    fn lorenz_divergence_is_constant() {
        let s = System::lorenz();
        for x in [[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0], [7.0, -7.0, -2.0]] {
            let (a, _) = s.linearize(&x, &[0.0; 3]);
            let tr = a.get(0, 0) + a.get(1, 1) + a.get(2, 2);
            assert!((tr + (10.0 + 1.0 + 8.0 / 3.0)).abs() < 1e-7);
        }
    }

    #[test]
    fn grn_attractors_are_fixed_points() {
        let unscaled = System::grn_with(GrnParams { scale: 1.0, ..GrnParams::default() });
        for p in [GRN_P1, GRN_P2] {
            assert!(norm(&unscaled.vector_field(&p, &[0.0]).unwrap()) < 1e-4);
        }
        let s = System::grn();
        for p in s.equilibria() {
            assert!(norm(&s.vector_field(&p, &[0.0]).unwrap()) < 1e-4);
        }
        assert!((s.target[0] - 6.2562059).abs() < 1e-12);
    }

    #[test]
    fn grn_actuator_is_half_at_threshold() {
        let s = System::grn_with(GrnParams { scale: 1.0, ..GrnParams::default() });
        let g = s.actuator_matrix(&[0.5, 3.0]);
        assert_eq!(g.dims(), (2, 1));
        assert!((g.get(0, 0) - 0.5).abs() < 1e-15);
        assert_eq!(g.get(1, 0), 0.0);
    }

    #[test]
    fn cell_equilibria_and_actuator() {
        let s = System::cell(1).unwrap();
        let Dynamics::Cell(p) = &s.dynamics else { unreachable!() };
        for i in 0..100 {
            let row: f64 = (0..100).map(|j| p.adjacency.get(i, j)).sum();
            assert_eq!(row, 6.0);
            assert_eq!(p.adjacency.get(i, i), 0.0);
        }
        let active = 3.0 + 8f64.sqrt();
        assert!(p.active.iter().all(|v| (v - active).abs() < 1e-8));
        assert!(p.inactive.iter().all(|v| v.abs() < 1e-12));
        for e in s.equilibria() {
            assert!(norm(&s.vector_field(&e, &[0.0; 100]).unwrap()) < 1e-4);
        }
        let g = s.actuator_matrix(&[0.0; 100]);
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cell_edges_round_trip_through_csv() {
        let s = System::cell(3).unwrap();
        let Dynamics::Cell(p) = &s.dynamics else { unreachable!() };
        let dir = std::env::temp_dir().join(format!("netc-cell-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("edges.csv");
        p.save_edges(&path).unwrap();
        let back = CellParams::load_edges(&path, 100, 1.0).unwrap();
        assert_eq!(back.adjacency, p.adjacency);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn control_enters_affinely() {
        let mut rng = rng::seeded(4);
        for s in [System::grn(), System::lorenz(), System::cell(0).unwrap()] {
            let x = s.sample_domain(3, &mut rng);
            let m = s.control_dim();
            let u1 = s.sample_box(&vec![(-2.0, 2.0); m], 3, &mut rng);
            let u2 = s.sample_box(&vec![(-2.0, 2.0); m], 3, &mut rng);
            let f = |u: &Tensor| s.field(&Eager, &x, u);
            let lhs = f(&u1.add(&u2)).sub(&f(&u1)).sub(&f(&u2)).add(&f(&Tensor::zeros(3, m)));
            assert!(lhs.max_abs() < 1e-12, "{}: {}", s.id, lhs.max_abs());
        }
    }

    #[test]
    fn batch_transpose_matches_dense_actuator() {
        let mut rng = rng::seeded(2);
        for s in [System::grn(), System::lorenz()] {
            let x = s.sample_domain(1, &mut rng);
            let w = s.sample_domain(1, &mut rng);
            let g = s.actuator_matrix(&x.data);
            let dense = w.matmul(&g);
            let batch = s.actuate_transpose(&Eager, &x, &w);
            assert!(dense.sub(&batch).max_abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_reproducible_and_in_the_box() {
        let s = System::grn();
        let a = s.sample_domain(1000, &mut rng::seeded(9));
        let b = s.sample_domain(1000, &mut rng::seeded(9));
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (-10.0..=10.0).contains(v)));
        assert_eq!(s.sample_domain(0, &mut rng::seeded(1)).rows(), 0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(System::lorenz().vector_field(&[0.0; 2], &[0.0; 3]).is_err());
    }
}

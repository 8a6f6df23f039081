//! Benchmark runs: train or solve a controller, simulate it from the test
//! initial conditions of each seed, and write reports, traces and tables.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::baselines::{balsa_model, balsa_p1, lqr_event, lqr_model, lqr_weights, LqrSolution};
use crate::error::{NetcError, Result};
use crate::etcsim::{evaluate_closed_loop, EtcMetrics, EventFunction, EventKind};
use crate::guarantees::{bound_report, BoundReport};
use crate::model::Model;
use crate::rng;
use crate::systems::{System, SystemId};
use crate::trainer::{train_mc, train_pi, Method, TrainConfig, TrainReport};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub n_initial_conditions: usize,
    pub sigma: f64,
    pub budget: usize,
    pub window_frac: f64,
    /// Evaluate the projected controller instead of the raw one.
    pub project: bool,
    /// Overrides the method's default event function.
    pub event: Option<EventKind>,
    pub step: Option<f64>,
    pub bound_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            n_initial_conditions: 1,
            sigma: 0.5,
            budget: 10,
            window_frac: 0.1,
            project: false,
            event: None,
            step: None,
            bound_pairs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemId,
    pub method: Method,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Benchmark configuration for `(system, method)`.
    pub fn preset(system: SystemId, method: Method) -> Self {
        let seeds = match system {
            SystemId::Grn => vec![2, 4, 5, 6, 7],
            SystemId::Lorenz => vec![3, 5, 7, 8, 9],
            SystemId::Cell => vec![0, 3, 4, 5, 6],
        };
        let sigma = if (system, method) == (SystemId::Lorenz, Method::Lqr) { 0.99 } else { 0.5 };
        let bound_pairs = if system == SystemId::Cell { 100 } else { 500 };
        Self {
            system,
            method,
            train: TrainConfig::preset(system, method),
            evaluation: EvalConfig { seeds, sigma, bound_pairs, ..EvalConfig::default() },
            out_dir: None,
        }
    }

    /// Parses TOML layered over the preset named by its `system` and
    /// `method` keys, then applies `key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let system: SystemId = read_key(&user, "system")?;
        let method: Method = read_key(&user, "method")?;
        let mut merged = toml::Table::try_from(Self::preset(system, method))
            .map_err(|e| NetcError::Config(e.to_string()))?;
        merge(&mut merged, user);
        let mut cfg: Self = toml::Value::Table(merged).try_into()?;
        cfg.train.system = cfg.system;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| NetcError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.evaluation.seeds.is_empty() {
            bad.push("evaluation.seeds must be nonempty".to_string());
        }
        if self.evaluation.n_initial_conditions == 0 {
            bad.push("evaluation.n_initial_conditions must be >= 1".to_string());
        }
        if !(self.evaluation.sigma > 0.0 && self.evaluation.sigma < 1.0) {
            bad.push("evaluation.sigma must lie in (0, 1)".to_string());
        }
        if !(self.evaluation.window_frac > 0.0 && self.evaluation.window_frac <= 1.0) {
            bad.push("evaluation.window_frac must lie in (0, 1]".to_string());
        }
        if self.method == Method::Lqr && self.system == SystemId::Cell {
            bad.push("lqr is not supported on the cell system".to_string());
        }
        if self.train.system != self.system {
            bad.push("train.system must match system".to_string());
        }
        if let Err(NetcError::Config(msg)) = self.train.validate() {
            bad.push(format!("train: {msg}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(NetcError::Config(bad.join("; ")))
        }
    }
}

fn read_key<T: serde::de::DeserializeOwned>(t: &toml::Table, key: &str) -> Result<T> {
    let v = t.get(key).ok_or_else(|| NetcError::Config(format!("missing key {key:?}")))?;
    v.clone().try_into().map_err(|e: toml::de::Error| NetcError::Config(format!("{key}: {e}")))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets a dotted `key=value`; the value is read as a TOML literal, or as a
/// string when it does not parse as one.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| NetcError::Config(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| NetcError::Config(format!("{p} in {key} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Test initial states for one seed.
pub fn initial_conditions(cfg: &ExperimentConfig, sys: &System, seed: u64) -> Vec<Vec<f64>> {
    let n = cfg.evaluation.n_initial_conditions;
    let mut r = rng::seeded(seed);
    match sys.id {
        SystemId::Grn => {
            let p2 = &sys.equilibria()[1];
            (0..n).map(|_| p2.iter().map(|c| c + r.gen_range(-1.0..=1.0)).collect()).collect()
        }
        SystemId::Lorenz => {
            let data = cfg.train.dataset(sys);
            (0..n).map(|_| data.row_slice(r.gen_range(0..data.rows())).to_vec()).collect()
        }
        SystemId::Cell => (0..n).map(|_| (0..sys.dim()).map(|_| r.gen_range(-0.5..=0.5)).collect()).collect(),
    }
}

/// The method's default test-time event function.
pub fn default_event(method: Method, sigma: f64) -> Result<EventFunction> {
    let kind = match method {
        Method::NetcMc => EventKind::HTilde,
        Method::Nlc => EventKind::NlcRatio,
        Method::NetcPi | Method::QuadNlc | Method::Balsa => EventKind::HSigmaV,
        Method::Lqr => return Err(NetcError::Config("the lqr event depends on the Riccati solution".into())),
    };
    EventFunction::new(kind, sigma)
}

/// A controller ready for simulation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: Model,
    pub event: EventFunction,
    pub train: Option<TrainReport>,
    pub lqr: Option<LqrSolution>,
}

/// Trains or solves the configured method.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let sigma = cfg.evaluation.sigma;
    let (mut model, train, lqr) = match cfg.method {
        Method::NetcPi | Method::NetcMc | Method::Nlc | Method::QuadNlc => {
            let report = match cfg.method {
                Method::NetcPi => train_pi(&cfg.train)?,
                Method::NetcMc => train_mc(&cfg.train)?,
                Method::Nlc => crate::baselines::train_nlc(&cfg.train)?,
                _ => crate::baselines::train_quad_nlc(&cfg.train)?,
            };
            (report.model.clone(), Some(report), None)
        }
        Method::Lqr => {
            let sys = cfg.train.build_system()?;
            let (q, r) = lqr_weights(&sys)?;
            let (model, sol) = lqr_model(&sys, &q, &r)?;
            (model, None, Some(sol))
        }
        Method::Balsa => {
            let sys = cfg.train.build_system()?;
            (balsa_model(&sys, balsa_p1(sys.id)), None, None)
        }
    };
    model = model.baked();
    model.projected = cfg.evaluation.project;
    let event = match (&cfg.evaluation.event, &lqr) {
        (Some(kind), _) => EventFunction::new(kind.clone(), sigma)?,
        (None, Some(sol)) => lqr_event(&model.system, sol, sigma)?,
        (None, None) => default_event(cfg.method, sigma)?,
    };
    Ok(Prepared { model, event, train, lqr })
}

/// Like [`prepare`], but neural methods load their weights from a
/// checkpoint written by a previous training run (a file, or a directory
/// holding `checkpoint.json`).
pub fn prepare_from_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Prepared> {
    if matches!(cfg.method, Method::Lqr | Method::Balsa) {
        return prepare(cfg);
    }
    cfg.validate()?;
    let mut model = cfg.train.build_model(cfg.method)?;
    let file = if checkpoint.is_dir() { checkpoint.join("checkpoint.json") } else { checkpoint.to_path_buf() };
    let text = std::fs::read_to_string(file)?;
    model.params = autodiff::ParameterSet::from_json_like(&text, &model.params)?;
    model = model.baked();
    model.projected = cfg.evaluation.project;
    let event = match &cfg.evaluation.event {
        Some(kind) => EventFunction::new(kind.clone(), cfg.evaluation.sigma)?,
        None => default_event(cfg.method, cfg.evaluation.sigma)?,
    };
    Ok(Prepared { model, event, train: None, lqr: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub x0: Vec<f64>,
    pub metrics: EtcMetrics,
    pub trace_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub num_triggers: MeanStd,
    pub min_inter_event: MeanStd,
    pub mse_window: MeanStd,
    pub mse_budget: MeanStd,
    pub temporal_variance: MeanStd,
}

impl Aggregate {
    pub fn of(runs: &[SeedResult]) -> Self {
        let col = |f: &dyn Fn(&EtcMetrics) -> f64| MeanStd::of(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        Self {
            num_triggers: col(&|m| m.num_triggers as f64),
            min_inter_event: col(&|m| m.min_inter_event),
            mse_window: col(&|m| m.mse_window),
            mse_budget: col(&|m| m.mse_budget.unwrap_or(f64::NAN)),
            temporal_variance: col(&|m| m.temporal_variance),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub wall_clock_secs: f64,
    pub iterations: usize,
    pub final_losses: std::collections::BTreeMap<String, f64>,
}

impl TrainSummary {
    pub fn of(r: &TrainReport) -> Self {
        Self {
            wall_clock_secs: r.wall_clock_secs,
            iterations: r.iterations,
            final_losses: r
                .curves
                .iter()
                .filter_map(|(k, v)| v.iter().rev().find(|x| !x.is_nan()).map(|x| (k.clone(), *x)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub system: SystemId,
    pub method: Method,
    pub runs: Vec<SeedResult>,
    pub aggregate: Aggregate,
    pub bounds: Option<BoundReport>,
    pub train: Option<TrainSummary>,
    pub lqr: Option<LqrSolution>,
    pub config: ExperimentConfig,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let version = raw.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(NetcError::Schema(format!(
                "{} has schema version {version:?}, expected {SCHEMA_VERSION}",
                path.display()
            )));
        }
        Ok(serde_json::from_value(raw)?)
    }
}

/// Simulates `prepared` from every seed's initial conditions.
pub fn evaluate(cfg: &ExperimentConfig, prepared: &Prepared, out: Option<&Path>) -> Result<RunReport> {
    let model = &prepared.model;
    let int_cfg = crate::odeint::IntegrationConfig::with_step(cfg.evaluation.step.unwrap_or(model.system.step));
    let mut runs = Vec::new();
    for &seed in &cfg.evaluation.seeds {
        for (i, x0) in initial_conditions(cfg, &model.system, seed).into_iter().enumerate() {
            let name = if cfg.evaluation.n_initial_conditions == 1 {
                format!("trace_seed{seed}.csv")
            } else {
                format!("trace_seed{seed}_{i}.csv")
            };
            let (trace, metrics) = match evaluate_closed_loop(
                model,
                &prepared.event,
                &x0,
                cfg.evaluation.budget,
                cfg.evaluation.window_frac,
                &int_cfg,
            ) {
                Ok(v) => v,
                Err(NetcError::Simulation { source, partial }) => {
                    if let Some(dir) = out {
                        partial.write_csv(dir.join(format!("partial_{name}")))?;
                    }
                    return Err(NetcError::Simulation { source, partial });
                }
                Err(e) => return Err(e),
            };
            let trace_file = match out {
                Some(dir) => {
                    trace.write_csv(dir.join(&name))?;
                    Some(name)
                }
                None => None,
            };
            runs.push(SeedResult { seed, x0, metrics, trace_file });
        }
    }
    let mut bounds = bound_report(
        model,
        cfg.evaluation.sigma,
        cfg.evaluation.bound_pairs,
        &mut rng::stream(cfg.train.seed, "bounds"),
    )
    .ok();
    if let Some(b) = bounds.as_mut() {
        b.empirical_min_inter_event =
            runs.iter().filter(|r| r.metrics.num_triggers >= 2).map(|r| r.metrics.min_inter_event).reduce(f64::min);
    }
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        system: cfg.system,
        method: cfg.method,
        aggregate: Aggregate::of(&runs),
        runs,
        bounds,
        train: prepared.train.as_ref().map(TrainSummary::of),
        lqr: prepared.lqr.clone(),
        config: cfg.clone(),
    })
}

/// Trains or solves, evaluates, and writes `report.json`, the traces and
/// training artifacts under `out` (or the config's `out_dir`).
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    let out = out.map(Path::to_path_buf).or_else(|| cfg.out_dir.clone());
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    let start = Instant::now();
    let prepared = prepare(cfg)?;
    if let (Some(dir), Some(train)) = (&out, &prepared.train) {
        train.write(&dir.join("train"))?;
    }
    let report = evaluate(cfg, &prepared, out.as_deref())?;
    if let Some(dir) = &out {
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        std::fs::write(
            dir.join("timing.json"),
            serde_json::json!({ "wall_clock_secs": start.elapsed().as_secs_f64() }).to_string(),
        )?;
    }
    Ok(report)
}

/// Runs one experiment per value of `key`, each in `out/<key>=<value>`.
pub fn sweep(cfg_text: &str, overrides: &[String], key: &str, values: &[String], out: Option<&Path>) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for v in values {
        let mut ov = overrides.to_vec();
        ov.push(format!("{key}={v}"));
        let cfg = ExperimentConfig::from_toml(cfg_text, &ov)?;
        let dir = out.map(|d| d.join(format!("{key}={v}")));
        reports.push(run_experiment(&cfg, dir.as_deref())?);
    }
    Ok(reports)
}

pub const TABLE_HEADER: [&str; 8] = [
    "system",
    "method",
    "triggers_mean",
    "triggers_std",
    "min_inter_event_mean",
    "min_inter_event_std",
    "mse_budget_mean",
    "mse_budget_std",
];

/// One row per report in the given order.
pub fn emit_table<W: std::io::Write>(reports: &[RunReport], out: W) -> Result<()> {
    if let Some(r) = reports.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(NetcError::Schema(format!("report version {} differs from {SCHEMA_VERSION}", r.schema_version)));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_HEADER)?;
    for r in reports {
        let a = &r.aggregate;
        w.write_record([
            r.system.to_string(),
            r.method.to_string(),
            a.num_triggers.mean.to_string(),
            a.num_triggers.std.to_string(),
            a.min_inter_event.mean.to_string(),
            a.min_inter_event.std.to_string(),
            a.mse_budget.mean.to_string(),
            a.mse_budget.std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_presets() {
        let text = "system = \"lorenz\"\nmethod = \"netc-pi\"\n[train]\nlr = 0.2\n";
        let cfg = ExperimentConfig::from_toml(text, &["evaluation.sigma=0.8".into(), "train.seed=3".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.2);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.evaluation.sigma, 0.8);
        assert_eq!(cfg.train.n_data, 2000);
        assert_eq!(cfg.evaluation.seeds, vec![3, 5, 7, 8, 9]);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_list_fields() {
        let err = ExperimentConfig::from_toml(
            "system = \"cell\"\nmethod = \"lqr\"\n[evaluation]\nseeds = []\n",
            &[],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("seeds") && err.contains("lqr"), "{err}");
        assert!(ExperimentConfig::from_toml("system = \"grn\"", &[]).is_err());
    }

    #[test]
    fn lqr_run_has_no_training() {
        let cfg = ExperimentConfig::preset(SystemId::Grn, Method::Lqr);
        let dir = std::env::temp_dir().join(format!("netc-lqr-{}", std::process::id()));
        let r = run_experiment(&cfg, Some(&dir)).unwrap();
        assert!(r.train.is_none());
        assert!(r.lqr.as_ref().unwrap().residual <= 1e-8);
        assert_eq!(r.runs.len(), 5);
        assert!(dir.join("report.json").exists() && dir.join("trace_seed2.csv").exists());
        let loaded = RunReport::load(&dir.join("report.json")).unwrap();
        assert_eq!(loaded.aggregate, r.aggregate);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn initial_conditions_follow_the_protocol() {
        let cfg = ExperimentConfig::preset(SystemId::Grn, Method::NetcMc);
        let sys = System::grn();
        let p2 = &sys.equilibria()[1];
        let x = initial_conditions(&cfg, &sys, 2);
        assert_eq!(x, initial_conditions(&cfg, &sys, 2));
        assert!(x[0].iter().zip(p2).all(|(a, b)| (a - b).abs() <= 1.0));
        let cfg = ExperimentConfig::preset(SystemId::Lorenz, Method::NetcMc);
        let sys = System::lorenz();
        let data = cfg.train.dataset(&sys);
        let x = &initial_conditions(&cfg, &sys, 3)[0];
        assert!((0..data.rows()).any(|i| data.row_slice(i) == x.as_slice()));
    }

    #[test]
    fn tables() {
        let mut buf = Vec::new();
        emit_table(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), TABLE_HEADER.join(","));

        let cfg = ExperimentConfig::preset(SystemId::Grn, Method::Balsa);
        let r = evaluate(&cfg, &prepare(&cfg).unwrap(), None).unwrap();
        let mut buf = Vec::new();
        emit_table(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], "grn");
        assert_eq!(row[1], "balsa");
        assert_eq!(row[2].parse::<f64>().unwrap(), r.aggregate.num_triggers.mean);
        assert_eq!(row[6].parse::<f64>().unwrap(), r.aggregate.mse_budget.mean);

        let mut bad = r;
        bad.schema_version = 0;
        assert!(matches!(emit_table(&[bad], Vec::new()), Err(NetcError::Schema(_))));
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }
}

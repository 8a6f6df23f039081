use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use netc::etcsim::simulate_etc;
use netc::experiment::{self, ExperimentConfig, Prepared, RunReport};
use netc::guarantees::bound_report;
use netc::odeint::IntegrationConfig;

#[derive(Parser)]
#[command(name = "netc", version, about = "Neural event-triggered control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML (needs `system` and `method`; everything else
    /// defaults to the benchmark preset).
    #[arg(long)]
    config: PathBuf,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` on the config, e.g. `train.lr=0.01` or `evaluation.sigma=0.8`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("train.seed={s}"));
        }
        o
    }

    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides())
            .with_context(|| format!("loading {}", self.config.display()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train (or solve) a controller and write its artifacts.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the event-triggered closed loop from one initial state.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Weights from `netc train`; trains from scratch when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated initial state; defaults to the first test state of the first seed.
        #[arg(long)]
        x0: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
        /// Trace CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Full benchmark run: train, simulate every seed, write report and traces.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inter-event time bounds and Lipschitz estimates as JSON.
    Bound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize report JSON files into one CSV table.
    Table {
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn prepared(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Prepared> {
    Ok(match checkpoint {
        Some(p) => experiment::prepare_from_checkpoint(cfg, p)?,
        None => experiment::prepare(cfg)?,
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common, out } => {
            let cfg = common.load()?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let p = experiment::prepare(&cfg)?;
            if let Some(t) = &p.train {
                t.write(&out)?;
                eprintln!("trained {} on {} in {:.1}s", cfg.method, cfg.system, t.wall_clock_secs);
            }
            if let Some(sol) = &p.lqr {
                std::fs::write(out.join("lqr.json"), serde_json::to_string_pretty(sol)?)?;
                eprintln!("CARE residual {:e}", sol.residual);
            }
        }
        Command::Simulate { common, checkpoint, x0, budget, out } => {
            let cfg = common.load()?;
            let p = prepared(&cfg, checkpoint.as_deref())?;
            let x0 = match x0 {
                Some(s) => s
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad coordinate {v:?}")))
                    .collect::<Result<Vec<_>>>()?,
                None => experiment::initial_conditions(&cfg, &p.model.system, cfg.evaluation.seeds[0]).remove(0),
            };
            let int = IntegrationConfig::with_step(cfg.evaluation.step.unwrap_or(p.model.system.step));
            let trace = simulate_etc(&p.model, &p.event, &x0, p.model.system.horizon, budget, &int)?;
            trace.write_csv(&out)?;
            println!("{} triggers", trace.num_triggers());
        }
        Command::Evaluate { common, checkpoint, out } => {
            let cfg = common.load()?;
            let report = match checkpoint {
                None => experiment::run_experiment(&cfg, Some(&out))?,
                Some(p) => {
                    std::fs::create_dir_all(&out)?;
                    let prep = experiment::prepare_from_checkpoint(&cfg, &p)?;
                    let r = experiment::evaluate(&cfg, &prep, Some(&out))?;
                    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&r)?)?;
                    r
                }
            };
            let a = &report.aggregate;
            println!(
                "{} {}: triggers {:.1} ± {:.1}, min inter-event {:.4}, budget MSE {:.4}",
                report.system, report.method, a.num_triggers.mean, a.num_triggers.std, a.min_inter_event.mean, a.mse_budget.mean
            );
        }
        Command::Bound { common, checkpoint, out } => {
            let cfg = common.load()?;
            let p = prepared(&cfg, checkpoint.as_deref())?;
            let mut rng = netc::rng::stream(cfg.train.seed, "bounds");
            let b = bound_report(&p.model, cfg.evaluation.sigma, cfg.evaluation.bound_pairs, &mut rng)?;
            let json = serde_json::to_string_pretty(&b)?;
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
        }
        Command::Table { reports, out } => {
            let loaded = reports.iter().map(|p| RunReport::load(p)).collect::<netc::Result<Vec<_>>>()?;
            match out {
                Some(path) => experiment::emit_table(&loaded, File::create(path)?)?,
                None => {
                    let mut stdout = std::io::stdout().lock();
                    experiment::emit_table(&loaded, &mut stdout)?;
                    stdout.flush()?;
                }
            }
        }
        Command::Sweep { common, key, values, out } => {
            if values.is_empty() {
                bail!("--values needs at least one entry");
            }
            let text = std::fs::read_to_string(&common.config)?;
            let reports = experiment::sweep(&text, &common.overrides(), &key, &values, Some(&out))?;
            experiment::emit_table(&reports, File::create(out.join("table.csv"))?)?;
            for (v, r) in values.iter().zip(&reports) {
                println!("{key}={v}: triggers {:.1}", r.aggregate.num_triggers.mean);
            }
        }
    }
    Ok(())
}

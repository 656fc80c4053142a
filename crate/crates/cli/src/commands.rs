//! The `train`, `validate`, `eigen` and `report` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use influence_core::checkpoint;
use influence_core::hessian::{HessianOperator, Scope};
use influence_core::influence::write_influence_csv;
use influence_core::loo::{validate_trained, LooError, LooProtocol, RunInputs, ValidationReport};
use influence_core::stats::{interval95, IntervalMethod};
use influence_core::training::{train, Network, TrainError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Cell, DatasetSpec, ExperimentConfig};
use crate::data::{self, Splits};
use crate::rundir::{write_atomic, write_csv_rows, RunDir};
use crate::{report, CliError};

#[derive(Debug, Parser)]
#[command(name = "influence", version, about = "Influence-function validation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every sweep cell and repetition and write checkpoints.
    Train(RunArgs),
    /// Compare influence estimates with leave-one-out retraining.
    Validate(RunArgs),
    /// Estimate the top Hessian eigenvalue of every trained model.
    Eigen(RunArgs),
    /// Build figure tables and ANOVA summaries from a finished run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Parent directory for the new run directory (overrides `output_dir`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Overrides `base_seed`.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Reuse an existing run directory instead of creating a new one.
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => with_context(&a).and_then(|ctx| cmd_train(&ctx)),
        Command::Validate(a) => with_context(&a).and_then(|ctx| cmd_validate(&ctx)),
        Command::Eigen(a) => with_context(&a).and_then(|ctx| cmd_eigen(&ctx)),
        Command::Report(a) => report::cmd_report(&a.run),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Everything a command needs: the validated config, the run directory and
/// a worker pool.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub run: RunDir,
    pool: rayon::ThreadPool,
}

impl Context {
    pub fn new(mut cfg: ExperimentConfig, out: Option<&Path>, run: Option<&Path>, workers: Option<usize>, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            cfg.base_seed = s;
        }
        if let Some(o) = out {
            cfg.output_dir = o.to_path_buf();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.unwrap_or(0))
            .build()
            .map_err(|e| CliError::Other(e.to_string()))?;
        let run = match run {
            Some(r) => RunDir::open(r)?,
            None => RunDir::create(&cfg.output_dir)?,
        };
        let config_copy = run.join("config.toml");
        if !config_copy.exists() {
            write_atomic(&config_copy, cfg.to_toml().as_bytes())?;
        }
        Ok(Self { cfg, run, pool })
    }
}

fn with_context(a: &RunArgs) -> Result<Context, CliError> {
    let cfg = ExperimentConfig::load(&a.config)?;
    Context::new(cfg, a.out.as_deref(), a.run.as_deref(), a.workers, a.seed)
}

/// A trained repetition of one cell.
pub struct Trained {
    pub init: Network,
    pub net: Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub arm: String,
    pub width: usize,
    pub depth: usize,
    pub repetition: usize,
    pub seed: u64,
    pub status: String,
    pub final_loss: Option<f64>,
    pub final_lr: Option<f64>,
    pub epochs: Option<usize>,
    pub reason: String,
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(Cell, usize)> {
    cfg.cells()
        .into_iter()
        .flat_map(|c| (0..cfg.repetitions).map(move |r| (c, r)))
        .collect()
}

fn status_of(e: &CliError) -> &'static str {
    match e {
        CliError::Diverged(_) => "diverged",
        _ => "error",
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
        other => CliError::Other(other.to_string()),
    }
}

fn model_err(e: LooError) -> CliError {
    match e {
        LooError::Train(t) => train_err(t),
        other => CliError::Other(other.to_string()),
    }
}

/// Trains `cell`/`repetition` and stores checkpoints plus the training log.
fn train_one(ctx: &Context, splits: &Splits, cell: Cell, rep: usize) -> Result<(Trained, TrainRow), CliError> {
    let seed = ctx.cfg.seed(rep);
    let spec = ctx.cfg.model_spec(cell, splits.train.n_features, splits.train.n_classes);
    let init = spec.build(seed, splits.train.len()).map_err(model_err)?;
    let (net, log) = train(&init, &splits.train, &ctx.cfg.train_config(cell, seed)).map_err(train_err)?;
    let dir = ctx.run.cell_dir(cell, rep);
    fs::create_dir_all(&dir)?;
    let save = |n: &Network, name: &str| -> Result<(), CliError> {
        let mut buf = Vec::new();
        checkpoint::write_network(n, &mut buf)?;
        write_atomic(&dir.join(name), &buf)?;
        Ok(())
    };
    save(&init, "init.ckpt")?;
    save(&net, "model.ckpt")?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    write_atomic(&dir.join("train_log.csv"), &csv)?;
    let row = TrainRow {
        arm: cell.arm.to_string(),
        width: cell.width,
        depth: cell.depth,
        repetition: rep,
        seed,
        status: "ok".into(),
        final_loss: log.losses.last().copied(),
        final_lr: log.final_lr(),
        epochs: Some(log.final_epoch),
        reason: String::new(),
    };
    Ok((Trained { init, net }, row))
}

/// Loads the checkpoints of `cell`/`repetition`, training them first if
/// they are missing.
fn obtain(ctx: &Context, splits: &Splits, cell: Cell, rep: usize) -> Result<Trained, CliError> {
    let dir = ctx.run.cell_dir(cell, rep);
    let (i, m) = (dir.join("init.ckpt"), dir.join("model.ckpt"));
    if i.exists() && m.exists() {
        let load = |p: &Path| checkpoint::load(p).map_err(|e| CliError::Other(format!("{}: {e}", p.display())));
        return Ok(Trained {
            init: load(&i)?,
            net: load(&m)?,
        });
    }
    train_one(ctx, splits, cell, rep).map(|(t, _)| t)
}

/// Exit status after per-job failures were recorded: divergence wins over
/// other errors.
fn overall(statuses: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
    let mut first_other = None;
    for (status, reason) in statuses {
        match status.as_str() {
            "ok" => {}
            "diverged" => return Err(CliError::Diverged(reason)),
            _ => first_other = first_other.or(Some(reason)),
        }
    }
    first_other.map_or(Ok(()), |r| Err(CliError::Other(r)))
}

pub fn cmd_train(ctx: &Context) -> Result<(), CliError> {
    let splits = data::load(&ctx.cfg.dataset)?;
    let rows: Vec<TrainRow> = ctx.pool.install(|| {
        jobs(&ctx.cfg)
            .par_iter()
            .map(|&(cell, rep)| match train_one(ctx, &splits, cell, rep) {
                Ok((_, row)) => row,
                Err(e) => TrainRow {
                    arm: cell.arm.to_string(),
                    width: cell.width,
                    depth: cell.depth,
                    repetition: rep,
                    seed: ctx.cfg.seed(rep),
                    status: status_of(&e).into(),
                    final_loss: None,
                    final_lr: None,
                    epochs: None,
                    reason: e.to_string(),
                },
            })
            .collect()
    });
    write_csv_rows(&ctx.run.join("train_summary.csv"), &rows, &[])?;
    println!("trained {} models into {}", rows.len(), ctx.run.path().display());
    overall(rows.into_iter().map(|r| (r.status, r.reason)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub width: usize,
    pub depth: usize,
    pub repetition: usize,
    pub seed: u64,
    pub status: String,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub records: usize,
    pub excluded: usize,
    pub test_index: Option<usize>,
    pub reason: String,
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const EIGEN_FILE: &str = "eigen.csv";
pub const REPORT_FILE: &str = "report.json";

fn validate_one(ctx: &Context, splits: &Splits, cell: Cell, rep: usize) -> Result<ValidationReport, CliError> {
    let t = obtain(ctx, splits, cell, rep)?;
    let protocol = LooProtocol {
        selection: ctx.cfg.protocol.selection,
        retrain: ctx.cfg.protocol.retrain.clone(),
        test_point: ctx.cfg.protocol.test_point,
        repetitions: ctx.cfg.repetitions,
        base_seed: ctx.cfg.base_seed,
        influence: ctx.cfg.influence,
    };
    let inputs = RunInputs {
        spec: ctx.cfg.model_spec(cell, splits.train.n_features, splits.train.n_classes),
        train_cfg: ctx.cfg.train_config(cell, ctx.cfg.seed(rep)),
        train: &splits.train,
        test: &splits.test,
        regularization: ctx.cfg.regularization(cell),
    };
    let (rep_out, influence) = validate_trained(&protocol, &inputs, rep, &t.init, &t.net).map_err(model_err)?;
    let dir = ctx.run.cell_dir(cell, rep);
    let mut buf = Vec::new();
    write_influence_csv(&influence, &mut buf)?;
    write_atomic(&dir.join("influence.csv"), &buf)?;
    for rec in &rep_out.records {
        let mut csv = String::from("epoch,test_loss\n");
        for s in &rec.trajectory {
            csv.push_str(&format!("{},{}\n", s.epoch, s.test_loss));
        }
        write_atomic(&dir.join("trajectories").join(format!("removal-{:05}.csv", rec.train_index)), csv.as_bytes())?;
    }
    write_atomic(&dir.join(REPORT_FILE), serde_json::to_string_pretty(&rep_out)?.as_bytes())?;
    Ok(rep_out)
}

pub fn cmd_validate(ctx: &Context) -> Result<(), CliError> {
    let splits = data::load(&ctx.cfg.dataset)?;
    let rows: Vec<SummaryRow> = ctx.pool.install(|| {
        jobs(&ctx.cfg)
            .par_iter()
            .map(|&(cell, rep)| {
                let base = SummaryRow {
                    arm: cell.arm.to_string(),
                    width: cell.width,
                    depth: cell.depth,
                    repetition: rep,
                    seed: ctx.cfg.seed(rep),
                    status: "ok".into(),
                    spearman: None,
                    pearson: None,
                    records: 0,
                    excluded: 0,
                    test_index: None,
                    reason: String::new(),
                };
                match validate_one(ctx, &splits, cell, rep) {
                    Ok(r) => SummaryRow {
                        spearman: Some(r.spearman),
                        pearson: Some(r.pearson),
                        records: r.records.len(),
                        excluded: r.excluded(),
                        test_index: Some(r.test_index),
                        ..base
                    },
                    Err(e) => SummaryRow {
                        status: status_of(&e).into(),
                        reason: e.to_string(),
                        ..base
                    },
                }
            })
            .collect()
    });
    write_csv_rows(&ctx.run.join(SUMMARY_FILE), &rows, &[])?;
    for cell in ctx.cfg.cells() {
        let rho: Vec<f64> = rows
            .iter()
            .filter(|r| r.arm == cell.arm.name() && r.width == cell.width && r.depth == cell.depth)
            .filter_map(|r| r.spearman)
            .collect();
        match rho.len() {
            0 => println!("{}: no successful repetitions", cell.id()),
            1 => println!("{}: spearman {:.3} (single repetition)", cell.id(), rho[0]),
            _ => {
                let iv = interval95(&rho, IntervalMethod::Percentile).map_err(|e| CliError::Other(e.to_string()))?;
                let med = report::median(&rho);
                println!("{}: spearman median {med:.3}, 95% interval [{:.3}, {:.3}] over {} runs", cell.id(), iv.low, iv.high, rho.len());
            }
        }
    }
    println!("results in {}", ctx.run.path().display());
    overall(rows.into_iter().map(|r| (r.status, r.reason)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenRow {
    pub arm: String,
    pub width: usize,
    pub depth: usize,
    pub rep: usize,
    pub lambda_max: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub status: String,
    pub reason: String,
}

fn eigen_one(ctx: &Context, splits: &Splits, cell: Cell, rep: usize) -> Result<(f64, bool, usize), CliError> {
    let t = obtain(ctx, splits, cell, rep)?;
    let wd = ctx.cfg.train_config(cell, 0).weight_decay;
    let ec = ctx.cfg.eigen;
    let op = match ec.scope {
        Scope::AllParams => HessianOperator::new(t.net.objective(&splits.train.instances, wd), t.net.flat_params(), 0.0, ctx.cfg.influence.hvp_method, Scope::AllParams),
        Scope::LastLayer => {
            let head = t.net.influence_head(&splits.train.instances, wd);
            let theta = head.initial_params();
            HessianOperator::new(Box::new(head), theta, 0.0, ctx.cfg.influence.hvp_method, Scope::LastLayer)
        }
    };
    let r = op.top_eigenvalue(ec.max_iters, ec.tol, ctx.cfg.seed(rep)).map_err(|e| CliError::Other(e.to_string()))?;
    Ok((r.value, r.converged, r.iterations))
}

pub fn cmd_eigen(ctx: &Context) -> Result<(), CliError> {
    let ec = ctx.cfg.eigen;
    let rows: Vec<EigenRow> = if let DatasetSpec::Quadratic { eigenvalues } = &ctx.cfg.dataset {
        (0..ctx.cfg.repetitions)
            .map(|rep| {
                let q = data::quadratic_objective(eigenvalues, ctx.cfg.seed(rep));
                let op = HessianOperator::new(Box::new(q), vec![0.0; eigenvalues.len()], 0.0, ctx.cfg.influence.hvp_method, Scope::AllParams);
                let (lambda_max, converged, iterations, status, reason) = match op.top_eigenvalue(ec.max_iters, ec.tol, ctx.cfg.seed(rep)) {
                    Ok(r) => (Some(r.value), r.converged, r.iterations, "ok".to_string(), String::new()),
                    Err(e) => (None, false, 0, "error".to_string(), e.to_string()),
                };
                EigenRow {
                    arm: "quadratic".into(),
                    width: eigenvalues.len(),
                    depth: 0,
                    rep,
                    lambda_max,
                    converged,
                    iterations,
                    status,
                    reason,
                }
            })
            .collect()
    } else {
        let splits = data::load(&ctx.cfg.dataset)?;
        ctx.pool.install(|| {
            jobs(&ctx.cfg)
                .par_iter()
                .map(|&(cell, rep)| {
                    let (lambda_max, converged, iterations, status, reason) = match eigen_one(ctx, &splits, cell, rep) {
                        Ok((v, c, it)) => (Some(v), c, it, "ok".to_string(), String::new()),
                        Err(e) => (None, false, 0, status_of(&e).to_string(), e.to_string()),
                    };
                    EigenRow {
                        arm: cell.arm.to_string(),
                        width: cell.width,
                        depth: cell.depth,
                        rep,
                        lambda_max,
                        converged,
                        iterations,
                        status,
                        reason,
                    }
                })
                .collect()
        })
    };
    write_csv_rows(&ctx.run.join(EIGEN_FILE), &rows, &[])?;
    for r in &rows {
        if let Some(l) = r.lambda_max {
            println!("{}-d{}-w{} rep {}: lambda_max {l:.6e}{}", r.arm, r.depth, r.width, r.rep, if r.converged { "" } else { " (not converged)" });
        }
    }
    overall(rows.into_iter().map(|r| (r.status, r.reason)))
}

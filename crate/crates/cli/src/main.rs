//! `fesel`: run the checkpoint-selection pipeline or any single stage of it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use fesel::bayes_diag::{gibbs_report, GibbsConfig};
use fesel::free_energy::{estimate_wbic, load_estimates, Beta};
use fesel::harness::{
    correlate, correlation_reports, emit_plot_data, run_experiment, with_workers, write_correlations, CellSelector, ExperimentConfig, RunManifest,
};
use fesel::model::Side;
use fesel::pretrain::{run_sweep, Checkpoint};
use fesel::selection::{beta0, check_prop1_bound, rank, write_ranking_csv, LambdaHat, SelectionScore};
use fesel::transfer::{eval_fewshot, eval_full, finetune, ProtocolKind};

#[derive(Parser)]
#[command(name = "fesel", version, about = "Free-energy selection of pretraining checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Restrict to one sweep cell, e.g. `learning_rate=0.05,seed=1`.
    #[arg(long)]
    cell: Option<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct OnCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Whole pipeline: sweep, WBIC, transfer, correlations and plots.
    Run(Common),
    /// Pretraining sweep only; writes checkpoints and a sweep manifest.
    Pretrain(Common),
    /// WBIC and local learning coefficient of one checkpoint.
    Wbic {
        #[command(flatten)]
        on: OnCheckpoint,
        /// Dataset side to sample.
        #[arg(long, default_value = "pretrain")]
        side: String,
        /// Number of examples (defaults to data.pretrain_samples).
        #[arg(long)]
        samples: Option<usize>,
        /// Write per-step chain traces to this CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Full-protocol fine-tuning accuracy of one checkpoint.
    Finetune(OnCheckpoint),
    /// Few-shot accuracy of one checkpoint.
    Fewshot {
        #[command(flatten)]
        on: OnCheckpoint,
        /// Write per-task accuracies to this CSV.
        #[arg(long)]
        tasks_csv: Option<PathBuf>,
    },
    /// Rank the checkpoints of a finished run by the free-energy score.
    Rank {
        /// Output directory of a previous `run`.
        #[arg(long)]
        run: PathBuf,
        /// Shift constant M; with `--m` gives β₀ = M m log n / (n log m).
        #[arg(long)]
        m_const: Option<f64>,
        /// Downstream sample size.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Check the transfer bound for a checkpoint on an analytic task.
    Prop1 {
        #[command(flatten)]
        on: OnCheckpoint,
        #[arg(long)]
        m: usize,
    },
    /// Gibbs training/test errors and the Bayes test error downstream.
    Gibbs {
        #[command(flatten)]
        on: OnCheckpoint,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 2000)]
        eval_samples: usize,
    },
    /// Correlation of a metric with transfer accuracy in a finished run.
    Correlate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "wbic")]
        metric: String,
        #[arg(long, default_value = "full")]
        protocol: String,
    },
    /// Rebuild correlations and plot data of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Signals a run that finished with some failed cells.
#[derive(Debug)]
struct PartialFailure(usize);

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} cell(s) failed", self.0)
    }
}

impl std::error::Error for PartialFailure {}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn selector(common: &Common) -> Result<Option<CellSelector>> {
    common.cell.as_deref().map(str::parse).transpose().map_err(Into::into)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_side(s: &str) -> Result<Side> {
    match s {
        "pretrain" => Ok(Side::Pretrain),
        "downstream" => Ok(Side::Downstream),
        other => bail!("unknown side `{other}` (expected pretrain or downstream)"),
    }
}

fn parse_protocol(s: &str) -> Result<ProtocolKind> {
    match s {
        "full" => Ok(ProtocolKind::Full),
        "fewshot" => Ok(ProtocolKind::Fewshot),
        other => bail!("unknown protocol `{other}` (expected full or fewshot)"),
    }
}

fn cmd_run(common: &Common) -> Result<()> {
    let config = load(common)?;
    let summary = run_experiment(&config, common.workers, selector(common)?)?;
    log::info!(
        "{} cell(s) computed, {} reused, {} failed",
        summary.computed.len(),
        summary.skipped.len(),
        summary.failed.len()
    );
    for (id, e) in &summary.failed {
        eprintln!("cell {id} failed: {e}");
    }
    println!("{}", summary.manifest_path.display());
    if !summary.failed.is_empty() {
        return Err(PartialFailure(summary.failed.len()).into());
    }
    Ok(())
}

fn cmd_pretrain(common: &Common) -> Result<()> {
    let config = load(common)?;
    let task = config.task.build()?;
    let data = task.sample(Side::Pretrain, config.data.pretrain_samples, config.data.seed)?;
    let (values, seeds) = match selector(common)? {
        Some(sel) => (vec![sel.axis_value], vec![sel.seed]),
        None => (config.sweep.values.clone(), config.sweep.seeds.clone()),
    };
    let manifest = with_workers(common.workers, || run_sweep(&config.model, &data, &config.pretrain, config.sweep.axis, &values, &seeds))??;
    let path = manifest.persist(&config.output_dir)?;
    let failed = manifest.trajectories.iter().filter(|t| t.error.is_some()).count();
    println!("{}", path.display());
    if failed > 0 {
        return Err(PartialFailure(failed).into());
    }
    Ok(())
}

fn cmd_wbic(on: &OnCheckpoint, side: &str, samples: Option<usize>, trace: Option<&Path>) -> Result<()> {
    let mut config = load(&on.common)?;
    let ckpt = Checkpoint::load(&on.checkpoint)?;
    let task = config.task.build()?;
    let side = parse_side(side)?;
    let data = task.sample(side, samples.unwrap_or(config.data.pretrain_samples), config.data.seed)?;
    config.sgld.record_trace = trace.is_some();
    let fe = estimate_wbic(&ckpt.spec, &ckpt, &data, &config.sgld)?;
    if let Some(p) = trace {
        fe.write_trace_csv(p)?;
    }
    print_json(&fe)
}

fn cmd_finetune(on: &OnCheckpoint) -> Result<()> {
    let config = load(&on.common)?;
    let ckpt = Checkpoint::load(&on.checkpoint)?;
    print_json(&eval_full(&ckpt, &config.task.build()?, &config.finetune, &config.full)?)
}

fn cmd_fewshot(on: &OnCheckpoint, tasks_csv: Option<&Path>) -> Result<()> {
    let config = load(&on.common)?;
    let ckpt = Checkpoint::load(&on.checkpoint)?;
    let result = eval_fewshot(&ckpt, &config.task.build()?, &config.fewshot, &config.finetune)?;
    if let Some(p) = tasks_csv {
        result.write_tasks_csv(p)?;
    }
    print_json(&result)
}

fn cmd_rank(run: &Path, m_const: Option<f64>, m: Option<usize>) -> Result<()> {
    let config = ExperimentConfig::load(&run.join("config.toml"))?;
    let manifest = RunManifest::load(run)?;
    let n = config.data.pretrain_samples;
    let b0 = match (m_const, m) {
        (Some(mc), Some(m)) => beta0(mc, m, n)?,
        (None, None) => 1.0,
        _ => bail!("--m-const and --m must be given together"),
    };
    let mut scores = Vec::new();
    for cell in &manifest.cells {
        let path = run.join("cells").join(&cell.id).join("wbic.json");
        if !path.exists() {
            continue;
        }
        let estimates = load_estimates(&path)?;
        for row in manifest.rows.iter().filter(|r| r.seed == cell.seed && r.axis_value == cell.axis_value) {
            if let Some(fe) = estimates.get(&row.id) {
                scores.push(SelectionScore::from_terms(row.id.clone(), row.step, fe.anchor_loss / fe.n as f64, fe.llc, b0, n));
            }
        }
    }
    if scores.is_empty() {
        bail!("no free-energy estimates found under {}", run.display());
    }
    let ranked = rank(&scores)?;
    write_ranking_csv(&run.join("ranking.csv"), &ranked)?;
    std::fs::write(run.join("ranking.json"), serde_json::to_string_pretty(&ranked)?)?;
    print!("{}", std::fs::read_to_string(run.join("ranking.csv"))?);
    Ok(())
}

fn cmd_prop1(on: &OnCheckpoint, m: usize) -> Result<()> {
    let config = load(&on.common)?;
    let ckpt = Checkpoint::load(&on.checkpoint)?;
    let task = config.task.build()?;
    let pre = task.sample(Side::Pretrain, config.data.pretrain_samples, config.data.seed)?;
    let down = task.sample(Side::Downstream, m, config.data.seed)?;
    let l0 = estimate_wbic(&ckpt.spec, &ckpt, &pre, &config.sgld)?;
    let l1 = estimate_wbic(&ckpt.spec, &ckpt, &down, &config.sgld)?;
    let report = check_prop1_bound(&task, &ckpt, LambdaHat::from(&l0), LambdaHat::from(&l1), m, config.sgld.gamma)?;
    print_json(&report)
}

fn cmd_gibbs(on: &OnCheckpoint, m: usize, eval_samples: usize) -> Result<()> {
    let config = load(&on.common)?;
    let ckpt = Checkpoint::load(&on.checkpoint)?;
    let task = config.task.build()?;
    let data = task.sample(Side::Downstream, m, config.data.seed)?;
    let labels = task.n_labels(Side::Downstream);
    let ckpt = if task.is_classification() && ckpt.spec.head_dim != labels {
        // Classification heads are refit to the downstream classes first.
        let (params, _) = finetune(&ckpt, &data, labels, &config.finetune)?;
        Checkpoint { spec: ckpt.spec.with_head_dim(labels), params, id: format!("{}-finetuned", ckpt.id), ..ckpt }
    } else {
        ckpt
    };
    let mut sgld = config.sgld.clone();
    sgld.beta = Beta::Fixed(1.0);
    let cfg = GibbsConfig { sgld, eval_samples, ..GibbsConfig::default() };
    print_json(&gibbs_report(&ckpt, &task, &data, &cfg)?)
}

fn cmd_correlate(run: &Path, metric: &str, protocol: &str) -> Result<()> {
    let manifest = RunManifest::load(run)?;
    print_json(&correlate(&manifest.rows, metric, parse_protocol(protocol)?))
}

fn cmd_report(run: &Path) -> Result<()> {
    let config = ExperimentConfig::load(&run.join("config.toml"))?;
    let manifest = RunManifest::load(run)?;
    let reports = correlation_reports(&manifest, &config.evaluation.metrics);
    write_correlations(run, &reports)?;
    for p in emit_plot_data(&manifest, run)? {
        println!("{}", p.display());
    }
    for r in &reports {
        let shown = r.pearson_r.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        eprintln!("{} vs {} accuracy: r = {shown} ({} pairs)", r.metric_name, r.protocol.name(), r.pairs.len());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => cmd_run(&c),
        Command::Pretrain(c) => cmd_pretrain(&c),
        Command::Wbic { on, side, samples, trace } => cmd_wbic(&on, &side, samples, trace.as_deref()),
        Command::Finetune(on) => cmd_finetune(&on),
        Command::Fewshot { on, tasks_csv } => cmd_fewshot(&on, tasks_csv.as_deref()),
        Command::Rank { run, m_const, m } => cmd_rank(&run, m_const, m),
        Command::Prop1 { on, m } => cmd_prop1(&on, m),
        Command::Gibbs { on, m, eval_samples } => cmd_gibbs(&on, m, eval_samples),
        Command::Correlate { run, metric, protocol } => cmd_correlate(&run, &metric, &protocol),
        Command::Report { run } => cmd_report(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<PartialFailure>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

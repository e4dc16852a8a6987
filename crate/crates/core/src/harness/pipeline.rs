use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{EvalScope, ExperimentConfig};
use super::report::{correlation_reports, write_correlations};
use crate::error::{Error, Result};
use crate::free_energy::{estimate_wbic, FreeEnergyEstimate};
use crate::model::{LabeledDataset, Side};
use crate::pretrain::{cell_id, sgd_train_with_prefix, write_file, SweepAxis};
use crate::registry::{metric_registry, protocol_registry};
use crate::synth::TaskFamily;
use crate::transfer::{ProtocolKind, TransferResult};

pub const MANIFEST_VERSION: u32 = 1;
pub const ROWS_HEADER: &str = "id,axis_value,seed,step,train_loss,wbic,llc,full_acc,fewshot_acc";

/// One checkpoint's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: String,
    pub axis_value: f64,
    pub seed: u64,
    pub step: usize,
    /// Whether this is the last checkpoint of its trajectory.
    pub is_final: bool,
    pub train_loss: f64,
    pub wbic: Option<f64>,
    pub llc: Option<f64>,
    pub full_acc: Option<f64>,
    pub fewshot_acc: Option<f64>,
    /// Every configured metric by name.
    pub metrics: BTreeMap<String, f64>,
    /// Checkpoint file relative to the output directory.
    pub checkpoint_path: String,
}

impl Row {
    pub fn accuracy(&self, protocol: ProtocolKind) -> Option<f64> {
        match protocol {
            ProtocolKind::Full => self.full_acc,
            ProtocolKind::Fewshot => self.fewshot_acc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub id: String,
    pub axis_value: f64,
    pub seed: u64,
    pub hash: String,
    pub status: CellStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellEntry>,
    pub rows: Vec<Row>,
}

impl RunManifest {
    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn failed_cells(&self) -> Vec<&CellEntry> {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub manifest_path: PathBuf,
    pub computed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct CellStatusFile {
    hash: String,
    status: CellStatus,
    error: Option<String>,
}

/// Restricts a run to one `(axis value, seed)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSelector {
    pub axis_value: f64,
    pub seed: u64,
}

impl std::str::FromStr for CellSelector {
    type Err = Error;

    /// `learning_rate=0.05,seed=2`; the axis name is accepted as given.
    fn from_str(s: &str) -> Result<Self> {
        let mut value = None;
        let mut seed = None;
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad cell selector `{s}`")))?;
            let k = k.trim();
            if k == "seed" {
                seed = Some(v.trim().parse().map_err(|_| Error::Config(format!("bad seed in `{s}`")))?);
            } else {
                k.parse::<SweepAxis>().map_err(|e| Error::Config(e.to_string()))?;
                value = Some(v.trim().parse().map_err(|_| Error::Config(format!("bad axis value in `{s}`")))?);
            }
        }
        match (value, seed) {
            (Some(axis_value), Some(seed)) => Ok(Self { axis_value, seed }),
            _ => Err(Error::Config(format!("cell selector `{s}` needs axis=value,seed=s"))),
        }
    }
}

/// Run `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything that determines a cell's outputs.
fn cell_hash(config: &ExperimentConfig, value: f64, seed: u64) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        version: u32,
        task: &'a super::config::TaskConfig,
        data: &'a super::config::DataConfig,
        model: &'a crate::model::ModelSpec,
        pretrain: crate::pretrain::PretrainConfig,
        sgld: &'a crate::free_energy::SgldConfig,
        finetune: &'a crate::transfer::FinetuneConfig,
        full: &'a crate::transfer::FullProtocol,
        fewshot: &'a crate::transfer::FewShotProtocol,
        evaluation: &'a super::config::EvaluationConfig,
    }
    let key = Key {
        version: MANIFEST_VERSION,
        task: &config.task,
        data: &config.data,
        model: &config.model,
        pretrain: config.sweep.axis.apply(&config.pretrain, value, seed)?,
        sgld: &config.sgld,
        finetune: &config.finetune,
        full: &config.full,
        fewshot: &config.fewshot,
        evaluation: &config.evaluation,
    };
    Ok(sha256_hex(serde_json::to_string(&key)?.as_bytes()))
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    task: TaskFamily,
    data: LabeledDataset,
    out: &'a Path,
}

fn read_completed(dir: &Path, hash: &str) -> Option<Vec<Row>> {
    let status: CellStatusFile = serde_json::from_str(&std::fs::read_to_string(dir.join("status.json")).ok()?).ok()?;
    if status.hash != hash || status.status != CellStatus::Ok {
        return None;
    }
    serde_json::from_str(&std::fs::read_to_string(dir.join("rows.json")).ok()?).ok()
}

fn compute_cell(ctx: &Context<'_>, id: &str, value: f64, seed: u64, dir: &Path) -> Result<Vec<Row>> {
    let config = ctx.config;
    let pretrain = config.sweep.axis.apply(&config.pretrain, value, seed)?;
    let checkpoints = sgd_train_with_prefix(&config.model, &ctx.data, &pretrain, id)?;
    let metrics = metric_registry();
    let protocols = protocol_registry(&config.full, &config.fewshot);
    let needs_fe = config
        .evaluation
        .metrics
        .iter()
        .map(|m| metrics.get(m).map(|x| x.needs_free_energy()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .any(|b| b);

    let mut wbic_out: BTreeMap<String, FreeEnergyEstimate> = BTreeMap::new();
    let mut transfer_out: BTreeMap<ProtocolKind, BTreeMap<String, TransferResult>> = BTreeMap::new();
    let mut fewshot_tasks = String::from("checkpoint_id,task_index,accuracy\n");
    let mut rows = Vec::with_capacity(checkpoints.len());
    let last = checkpoints.len().saturating_sub(1);
    for (k, ckpt) in checkpoints.iter().enumerate() {
        let rel = format!("cells/{id}/checkpoints/{}.json", ckpt.id);
        ckpt.save(&ctx.out.join(&rel))?;
        let evaluate = k == last || config.evaluation.checkpoints == EvalScope::All;
        let mut row = Row {
            id: ckpt.id.clone(),
            axis_value: value,
            seed,
            step: ckpt.step,
            is_final: k == last,
            train_loss: ckpt.train_loss,
            wbic: None,
            llc: None,
            full_acc: None,
            fewshot_acc: None,
            metrics: BTreeMap::new(),
            checkpoint_path: rel,
        };
        if evaluate {
            let fe = if needs_fe {
                Some(estimate_wbic(&config.model, ckpt, &ctx.data, &config.sgld)?)
            } else {
                None
            };
            for name in &config.evaluation.metrics {
                row.metrics.insert(name.clone(), metrics.get(name)?.evaluate(ckpt, fe.as_ref())?);
            }
            if let Some(fe) = fe {
                row.wbic = Some(fe.wbic);
                row.llc = Some(fe.llc);
                wbic_out.insert(ckpt.id.clone(), fe);
            }
            for name in &config.evaluation.protocols {
                let protocol = protocols.get(name)?;
                let result = protocol.evaluate(ckpt, &ctx.task, &config.finetune)?;
                match result.protocol {
                    ProtocolKind::Full => row.full_acc = Some(result.accuracy),
                    ProtocolKind::Fewshot => {
                        row.fewshot_acc = Some(result.accuracy);
                        for (t, a) in result.per_task_accuracies.iter().flatten().enumerate() {
                            let _ = writeln!(fewshot_tasks, "{},{t},{a}", ckpt.id);
                        }
                    }
                }
                transfer_out.entry(result.protocol).or_default().insert(ckpt.id.clone(), result);
            }
        }
        rows.push(row);
    }
    if !wbic_out.is_empty() {
        write_file(&dir.join("wbic.json"), serde_json::to_string_pretty(&wbic_out)?.as_bytes())?;
    }
    if let Some(r) = transfer_out.get(&ProtocolKind::Full) {
        write_file(&dir.join("full.json"), serde_json::to_string_pretty(r)?.as_bytes())?;
    }
    if let Some(r) = transfer_out.get(&ProtocolKind::Fewshot) {
        write_file(&dir.join("fewshot.json"), serde_json::to_string_pretty(r)?.as_bytes())?;
        write_file(&dir.join("fewshot_tasks.csv"), fewshot_tasks.as_bytes())?;
    }
    Ok(rows)
}

enum CellRun {
    Computed(Vec<Row>),
    Skipped(Vec<Row>),
    Failed(String),
}

fn reuse_cell(ctx: &Context<'_>, value: f64, seed: u64) -> Option<(CellEntry, CellRun)> {
    let id = cell_id(ctx.config.sweep.axis, value, seed);
    let hash = cell_hash(ctx.config, value, seed).ok()?;
    let rows = read_completed(&ctx.out.join("cells").join(&id), &hash)?;
    let entry = CellEntry { id, axis_value: value, seed, hash, status: CellStatus::Ok, error: None };
    Some((entry, CellRun::Skipped(rows)))
}

fn run_cell(ctx: &Context<'_>, value: f64, seed: u64) -> (CellEntry, CellRun) {
    let id = cell_id(ctx.config.sweep.axis, value, seed);
    let dir = ctx.out.join("cells").join(&id);
    let entry = |hash: String, status, error| CellEntry { id: id.clone(), axis_value: value, seed, hash, status, error };
    let hash = match cell_hash(ctx.config, value, seed) {
        Ok(h) => h,
        Err(e) => return (entry(String::new(), CellStatus::Failed, Some(e.to_string())), CellRun::Failed(e.to_string())),
    };
    if let Some(rows) = read_completed(&dir, &hash) {
        return (entry(hash, CellStatus::Ok, None), CellRun::Skipped(rows));
    }
    let outcome = compute_cell(ctx, &id, value, seed, &dir).and_then(|rows| {
        write_file(&dir.join("rows.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
        Ok(rows)
    });
    let (status, error, run) = match outcome {
        Ok(rows) => (CellStatus::Ok, None, CellRun::Computed(rows)),
        Err(e) => {
            log::warn!("cell {id} failed: {e}");
            (CellStatus::Failed, Some(e.to_string()), CellRun::Failed(e.to_string()))
        }
    };
    let file = CellStatusFile { hash: hash.clone(), status, error: error.clone() };
    if let Err(e) = serde_json::to_string_pretty(&file)
        .map_err(Error::from)
        .and_then(|s| write_file(&dir.join("status.json"), s.as_bytes()))
    {
        log::warn!("could not record status of cell {id}: {e}");
    }
    (entry(hash, status, error), run)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn rows_csv(rows: &[Row]) -> String {
    let mut s = format!("{ROWS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.id,
            r.axis_value,
            r.seed,
            r.step,
            r.train_loss,
            fmt_opt(r.wbic),
            fmt_opt(r.llc),
            fmt_opt(r.full_acc),
            fmt_opt(r.fewshot_acc)
        );
    }
    s
}

/// Sweep → free energy per checkpoint → transfer evaluation → reports.
/// Cells run on `workers` threads; completed cells whose hash matches are
/// reused. `only` restricts the run to a single cell.
pub fn run_experiment(config: &ExperimentConfig, workers: usize, only: Option<CellSelector>) -> Result<RunSummary> {
    config.validate()?;
    let task = config.task.build()?;
    let data = task.sample(Side::Pretrain, config.data.pretrain_samples, config.data.seed)?;
    let out = config.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ctx = Context { config, task, data, out };

    let cells: Vec<(f64, u64)> = config
        .sweep
        .values
        .iter()
        .flat_map(|&v| config.sweep.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let selected = |v: f64, s: u64| only.is_none_or(|sel| v == sel.axis_value && s == sel.seed);
    if let Some(sel) = only {
        if !cells.iter().any(|&(v, s)| selected(v, s)) {
            return Err(Error::Config(format!("cell {}={},seed={} is not in the sweep", config.sweep.axis, sel.axis_value, sel.seed)));
        }
    }
    // Unselected cells appear in the manifest only if already complete.
    let results: Vec<(CellEntry, CellRun)> = with_workers(workers, || {
        cells
            .par_iter()
            .filter_map(|&(v, s)| if selected(v, s) { Some(run_cell(&ctx, v, s)) } else { reuse_cell(&ctx, v, s) })
            .collect()
    })?;

    let mut summary = RunSummary {
        manifest_path: out.join("manifest.json"),
        computed: Vec::new(),
        skipped: Vec::new(),
        failed: Vec::new(),
    };
    let mut entries = Vec::with_capacity(results.len());
    let mut rows = Vec::new();
    for (entry, run) in results {
        match run {
            CellRun::Computed(r) => {
                summary.computed.push(entry.id.clone());
                rows.extend(r);
            }
            CellRun::Skipped(r) => {
                summary.skipped.push(entry.id.clone());
                rows.extend(r);
            }
            CellRun::Failed(e) => summary.failed.push((entry.id.clone(), e)),
        }
        entries.push(entry);
    }
    let config_hash = sha256_hex(config.to_toml_string()?.as_bytes());
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        config_hash,
        axis: config.sweep.axis,
        values: config.sweep.values.clone(),
        seeds: config.sweep.seeds.clone(),
        cells: entries,
        rows,
    };
    write_file(&out.join("config.toml"), config.to_toml_string()?.as_bytes())?;
    write_file(&summary.manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_file(&out.join("rows.csv"), rows_csv(&manifest.rows).as_bytes())?;
    let reports = correlation_reports(&manifest, &config.evaluation.metrics);
    write_correlations(out, &reports)?;
    if !manifest.rows.is_empty() {
        super::report::emit_plot_data(&manifest, out)?;
    }
    Ok(summary)
}

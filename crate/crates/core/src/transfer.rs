//! Limited fine-tuning with a fresh head and the two downstream evaluation
//! protocols: full fine-tuning on a stratified split, and few-shot tasks.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DatasetNll, LabeledDataset, LikelihoodModel, ModelSpec, Objective, OutputKind, ParamVector, Predictive, Side, Targets};
use crate::numeric::{derive_seed, mean, rng_from, stream};
use crate::pretrain::{write_file, BatchSchedule, Checkpoint};
use crate::synth::TaskFamily;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub steps: usize,
    /// `None` means full-batch gradient descent.
    pub batch_size: Option<usize>,
    pub l2: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            head_lr: 0.1,
            backbone_lr: 0.001,
            steps: 100,
            batch_size: None,
            l2: 0.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.head_lr > 0.0 && self.head_lr.is_finite()) {
            return Err(Error::invalid("head_lr must be positive"));
        }
        if !(self.backbone_lr >= 0.0 && self.backbone_lr <= self.head_lr) {
            return Err(Error::invalid("backbone_lr must lie in [0, head_lr]"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::invalid("l2 must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotProtocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_tasks: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for FewShotProtocol {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            n_tasks: 100,
            test_per_class: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FullProtocol {
    pub examples_per_class: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for FullProtocol {
    fn default() -> Self {
        Self {
            examples_per_class: 100,
            split_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Full,
    Fewshot,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Full => "full",
            ProtocolKind::Fewshot => "fewshot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub checkpoint_id: String,
    pub protocol: ProtocolKind,
    pub accuracy: f64,
    pub per_task_accuracies: Option<Vec<f64>>,
    pub train_accuracy: f64,
}

impl TransferResult {
    /// CSV with columns `task_index,accuracy`.
    pub fn write_tasks_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("task_index,accuracy\n");
        for (i, a) in self.per_task_accuracies.iter().flatten().enumerate() {
            let _ = writeln!(s, "{i},{a}");
        }
        write_file(path, s.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Fraction of examples whose most probable class equals the label.
pub fn accuracy(model: &dyn LikelihoodModel, w: &[f64], data: &LabeledDataset) -> Result<f64> {
    let labels = data.classes().ok_or_else(|| Error::invalid("accuracy needs class labels"))?;
    if labels.is_empty() {
        return Err(Error::Degenerate("empty evaluation set".into()));
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let Predictive::Categorical(p) = model.predictive(w, data.x(i)) else {
            return Err(Error::invalid("accuracy needs a categorical model"));
        };
        let best = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
            .0;
        hits += usize::from(best == y);
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Attach a fresh `new_head_dim` head and train with per-partition rates.
pub fn finetune(ckpt: &Checkpoint, downstream: &LabeledDataset, new_head_dim: usize, config: &FinetuneConfig) -> Result<(ParamVector, FinetuneOutcome)> {
    config.validate()?;
    if ckpt.spec.output_kind != OutputKind::CategoricalSoftmax {
        return Err(Error::Unsupported("fine-tuning protocols need a classification model".into()));
    }
    let labels = downstream.classes().ok_or_else(|| Error::invalid("downstream data must be labelled"))?;
    if downstream.is_empty() {
        return Err(Error::Degenerate("empty downstream dataset".into()));
    }
    if labels.iter().any(|&y| y >= new_head_dim) {
        return Err(Error::invalid(format!("downstream labels must lie in [0, {new_head_dim})")));
    }
    let spec: ModelSpec = ckpt.spec.with_head_dim(new_head_dim);
    let start = ckpt.params.reinit_head(&spec, &mut rng_from(config.seed, &[stream::HEAD]))?;
    let b = start.backbone_len();
    let objective = DatasetNll::new(&spec, downstream);
    let n = downstream.len();
    let mut schedule = config
        .batch_size
        .filter(|&bs| bs < n)
        .map(|bs| BatchSchedule::new(n, bs, rng_from(config.seed, &[stream::SHUFFLE])));
    let mut w = start.values;
    let mut g = vec![0.0; w.len()];
    let mut final_loss = f64::NAN;
    for step in 1..=config.steps {
        let loss = match schedule.as_mut() {
            Some(s) => objective.batch_value_grad(&w, s.next_batch(), &mut g)?,
            None => objective.value_grad(&w, &mut g)?,
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        for (j, (wj, gj)) in w.iter_mut().zip(&g).enumerate() {
            let lr = if j < b { config.backbone_lr } else { config.head_lr };
            if lr != 0.0 {
                *wj -= lr * (gj + config.l2 * *wj);
            }
        }
        final_loss = loss;
    }
    let params = ParamVector::new(w, b);
    let train_accuracy = accuracy(&spec, &params.values, downstream)?;
    if config.steps == 0 || !final_loss.is_finite() {
        final_loss = objective.value(&params.values)?;
    }
    Ok((params, FinetuneOutcome { train_accuracy, final_loss }))
}

/// Stratified split: each class contributes `floor(fraction · count)`
/// (clamped to `[1, count − 1]`) training examples.
pub fn stratified_split(data: &LabeledDataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("split_fraction must lie in (0, 1)"));
    }
    let labels = data.classes().ok_or_else(|| Error::invalid("stratification needs class labels"))?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = rng_from(seed, &[stream::SPLIT]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Protocol(format!("class {c} has fewer than two examples")));
        }
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).floor() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Full-protocol evaluation on a given labelled downstream dataset.
pub fn eval_full_on(ckpt: &Checkpoint, data: &LabeledDataset, n_classes: usize, config: &FinetuneConfig, split_fraction: f64, seed: u64) -> Result<TransferResult> {
    if n_classes < 2 {
        return Err(Error::Protocol("full protocol needs at least two classes".into()));
    }
    let (train_idx, test_idx) = stratified_split(data, split_fraction, seed)?;
    let train = data.subset(&train_idx);
    let test = data.subset(&test_idx);
    let (params, outcome) = finetune(ckpt, &train, n_classes, config)?;
    let spec = ckpt.spec.with_head_dim(n_classes);
    Ok(TransferResult {
        checkpoint_id: ckpt.id.clone(),
        protocol: ProtocolKind::Full,
        accuracy: accuracy(&spec, &params.values, &test)?,
        per_task_accuracies: None,
        train_accuracy: outcome.train_accuracy,
    })
}

/// Balanced downstream sample: `per_class` inputs for each listed class,
/// labelled by position in `class_ids`.
fn class_sample(task: &TaskFamily, class_ids: &[usize], per_class: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<LabeledDataset> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (local, &c) in class_ids.iter().enumerate() {
        inputs.extend(task.sample_class_inputs(c, per_class, rng)?);
        labels.extend(std::iter::repeat_n(local, per_class));
    }
    Ok(LabeledDataset::new(task.input_dim(), inputs, Targets::Classes(labels), Side::Downstream)?.with_class_ids(class_ids.to_vec()))
}

/// Full protocol on all downstream classes of a cluster task.
pub fn eval_full(ckpt: &Checkpoint, task: &TaskFamily, config: &FinetuneConfig, protocol: &FullProtocol) -> Result<TransferResult> {
    let split = task.split().ok_or_else(|| Error::Protocol("full protocol needs a classification task".into()))?;
    let ids = split.ids(Side::Downstream).to_vec();
    let mut rng = rng_from(task.rng_seed, &[stream::SPLIT, protocol.seed]);
    let data = class_sample(task, &ids, protocol.examples_per_class, &mut rng)?;
    eval_full_on(ckpt, &data, ids.len(), config, protocol.split_fraction, protocol.seed)
}

/// The classes and examples of few-shot task `t`.
pub fn fewshot_task_data(task: &TaskFamily, protocol: &FewShotProtocol, t: usize) -> Result<(Vec<usize>, LabeledDataset, LabeledDataset)> {
    let split = task.split().ok_or_else(|| Error::Protocol("few-shot protocol needs a classification task".into()))?;
    let pool = split.ids(Side::Downstream);
    if protocol.n_way < 2 || protocol.n_way > pool.len() {
        return Err(Error::Protocol(format!(
            "n_way = {} needs between 2 and {} downstream classes",
            protocol.n_way,
            pool.len()
        )));
    }
    if protocol.k_shot == 0 || protocol.test_per_class == 0 {
        return Err(Error::Protocol("k_shot and test_per_class must be positive".into()));
    }
    let mut rng = rng_from(task.rng_seed, &[stream::FEWSHOT, protocol.seed, t as u64]);
    let chosen: Vec<usize> = index::sample(&mut rng, pool.len(), protocol.n_way).into_iter().map(|i| pool[i]).collect();
    let train = class_sample(task, &chosen, protocol.k_shot, &mut rng)?;
    let test = class_sample(task, &chosen, protocol.test_per_class, &mut rng)?;
    Ok((chosen, train, test))
}

pub fn eval_fewshot(ckpt: &Checkpoint, task: &TaskFamily, protocol: &FewShotProtocol, config: &FinetuneConfig) -> Result<TransferResult> {
    if protocol.n_tasks == 0 {
        return Err(Error::Protocol("n_tasks must be positive".into()));
    }
    let spec = ckpt.spec.with_head_dim(protocol.n_way);
    let per_task: Vec<(f64, f64)> = (0..protocol.n_tasks)
        .into_par_iter()
        .map(|t| {
            let (_, train, test) = fewshot_task_data(task, protocol, t)?;
            let cfg = FinetuneConfig {
                seed: derive_seed(config.seed, &[stream::FEWSHOT, t as u64]),
                ..config.clone()
            };
            let (params, outcome) = finetune(ckpt, &train, protocol.n_way, &cfg)?;
            Ok((accuracy(&spec, &params.values, &test)?, outcome.train_accuracy))
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = per_task.iter().map(|p| p.0).collect();
    let train: Vec<f64> = per_task.iter().map(|p| p.1).collect();
    Ok(TransferResult {
        checkpoint_id: ckpt.id.clone(),
        protocol: ProtocolKind::Fewshot,
        accuracy: mean(&accs),
        per_task_accuracies: Some(accs),
        train_accuracy: mean(&train),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn ckpt(seed: u64, spec: ModelSpec) -> Checkpoint {
        let params = spec.init_params(&mut rng_from(seed, &[stream::INIT]));
        Checkpoint { spec, params, step: 0, config: Default::default(), train_loss: 0.0, id: format!("c{seed}") }
    }

    fn spec() -> ModelSpec {
        ModelSpec::new(2, vec![8], 4, Activation::Relu, OutputKind::CategoricalSoftmax).unwrap()
    }

    #[test]
    fn zero_steps_keeps_backbone_and_fresh_head() {
        let c = ckpt(1, spec());
        let data = LabeledDataset::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], Targets::Classes(vec![0, 1]), Side::Downstream).unwrap();
        let cfg = FinetuneConfig { steps: 0, seed: 9, ..Default::default() };
        let (p, _) = finetune(&c, &data, 2, &cfg).unwrap();
        assert_eq!(p.backbone(), c.params.backbone());
        let fresh = c.params.reinit_head(&c.spec.with_head_dim(2), &mut rng_from(9, &[stream::HEAD])).unwrap();
        assert_eq!(p, fresh);
    }

    #[test]
    fn zero_backbone_lr_freezes_backbone() {
        let c = ckpt(2, spec());
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0, 1.0 - i as f64 / 20.0]).collect();
        let ys: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let data = LabeledDataset::from_rows(&rows, Targets::Classes(ys), Side::Downstream).unwrap();
        let cfg = FinetuneConfig { backbone_lr: 0.0, steps: 50, batch_size: Some(4), ..Default::default() };
        let (p, _) = finetune(&c, &data, 3, &cfg).unwrap();
        assert_eq!(p.backbone().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.params.backbone().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn separable_two_class_reaches_full_train_accuracy() {
        let c = ckpt(3, spec());
        let rows: Vec<Vec<f64>> = (0..40).map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            vec![s * (1.0 + (i as f64) * 0.01), 0.3 * ((i * 7 % 5) as f64 - 2.0)]
        }).collect();
        let ys: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let data = LabeledDataset::from_rows(&rows, Targets::Classes(ys), Side::Downstream).unwrap();
        let cfg = FinetuneConfig { head_lr: 0.5, backbone_lr: 0.05, steps: 500, ..Default::default() };
        let (_, out) = finetune(&c, &data, 2, &cfg).unwrap();
        assert_eq!(out.train_accuracy, 1.0);
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let ys: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let data = LabeledDataset::from_rows(&rows, Targets::Classes(ys), Side::Downstream).unwrap();
        let (a, b) = stratified_split(&data, 0.8, 5).unwrap();
        assert_eq!((a.len(), b.len()), (24, 6));
        assert_eq!(stratified_split(&data, 0.8, 5).unwrap(), (a.clone(), b.clone()));
        for i in &a {
            assert!(!b.contains(i));
        }
        let single = LabeledDataset::from_rows(&[vec![0.0], vec![1.0], vec![2.0]], Targets::Classes(vec![0, 0, 1]), Side::Downstream).unwrap();
        assert!(matches!(stratified_split(&single, 0.5, 0), Err(Error::Protocol(_))));
    }

    #[test]
    fn fewshot_bookkeeping_and_reproducibility() {
        let task = TaskFamily::cluster(10, 6, 4, 2, 4.0, 0.5, 7).unwrap();
        let c = ckpt(4, ModelSpec::new(2, vec![8], 6, Activation::Relu, OutputKind::CategoricalSoftmax).unwrap());
        let protocol = FewShotProtocol { n_way: 3, k_shot: 3, n_tasks: 6, test_per_class: 10, seed: 1 };
        let cfg = FinetuneConfig { steps: 20, ..Default::default() };
        let r = eval_fewshot(&c, &task, &protocol, &cfg).unwrap();
        let per = r.per_task_accuracies.clone().unwrap();
        assert_eq!(per.len(), 6);
        assert!((mean(&per) - r.accuracy).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.accuracy) && (0.0..=1.0).contains(&r.train_accuracy));
        assert_eq!(eval_fewshot(&c, &task, &protocol, &cfg).unwrap(), r);
        assert_eq!(fewshot_task_data(&task, &protocol, 2).unwrap(), fewshot_task_data(&task, &protocol, 2).unwrap());
        let too_many = FewShotProtocol { n_way: 5, ..protocol };
        assert!(matches!(eval_fewshot(&c, &task, &too_many, &cfg), Err(Error::Protocol(_))));
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::free_energy::SgldConfig;
use crate::model::{Activation, ModelSpec, OutputKind};
use crate::pretrain::{PretrainConfig, SweepAxis};
use crate::registry::{metric_registry, protocol_registry};
use crate::synth::{TaskFamily, Teacher};
use crate::transfer::{FewShotProtocol, FinetuneConfig, FullProtocol};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Cluster {
        n_classes_total: usize,
        n_pretrain: usize,
        n_downstream: usize,
        dim: usize,
        radius: f64,
        class_sigma: f64,
        seed: u64,
    },
    CovariateShift {
        mu0: Vec<f64>,
        sigma0: f64,
        mu1: Vec<f64>,
        sigma1: f64,
        noise_sigma: f64,
        teacher_hidden: Vec<usize>,
        teacher_activation: Activation,
        teacher_seed: u64,
        seed: u64,
    },
    Nuisance {
        input_dim: usize,
        sigma0: f64,
        sigma1: f64,
        teacher_hidden: Vec<usize>,
        teacher_activation: Activation,
        teacher_seed: u64,
        seed: u64,
    },
}

impl TaskConfig {
    pub fn build(&self) -> Result<TaskFamily> {
        let teacher = |input_dim: usize, hidden: &[usize], act: Activation, sigma: f64, seed: u64| {
            let spec = ModelSpec::new(input_dim, hidden.to_vec(), 1, act, OutputKind::GaussianFixedSigma { sigma })?;
            Teacher::random(spec, seed)
        };
        match self {
            TaskConfig::Cluster { n_classes_total, n_pretrain, n_downstream, dim, radius, class_sigma, seed } => {
                TaskFamily::cluster(*n_classes_total, *n_pretrain, *n_downstream, *dim, *radius, *class_sigma, *seed)
            }
            TaskConfig::CovariateShift { mu0, sigma0, mu1, sigma1, noise_sigma, teacher_hidden, teacher_activation, teacher_seed, seed } => {
                let t = teacher(mu0.len(), teacher_hidden, *teacher_activation, *noise_sigma, *teacher_seed)?;
                TaskFamily::covariate_shift(mu0.clone(), *sigma0, mu1.clone(), *sigma1, *noise_sigma, t, *seed)
            }
            TaskConfig::Nuisance { input_dim, sigma0, sigma1, teacher_hidden, teacher_activation, teacher_seed, seed } => {
                let t = teacher(*input_dim, teacher_hidden, *teacher_activation, *sigma0, *teacher_seed)?;
                TaskFamily::nuisance(*sigma0, *sigma1, t, *seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub pretrain_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalScope {
    /// Only the last checkpoint of each trajectory.
    #[default]
    Final,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub checkpoints: EvalScope,
    pub metrics: Vec<String>,
    pub protocols: Vec<String>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            checkpoints: EvalScope::Final,
            metrics: vec!["wbic".into(), "llc".into(), "train_loss".into()],
            protocols: vec!["full".into(), "fewshot".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub pretrain: PretrainConfig,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub sgld: SgldConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub full: FullProtocol,
    #[serde(default)]
    pub fewshot: FewShotProtocol,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        let task = self.task.build().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        self.pretrain.validate().map_err(cfg)?;
        self.sgld.validate().map_err(cfg)?;
        self.finetune.validate().map_err(cfg)?;
        if self.model.input_dim != task.input_dim() {
            return Err(Error::Config("model.input_dim does not match the task".into()));
        }
        if task.is_classification() {
            if self.model.output_kind != OutputKind::CategoricalSoftmax || self.model.head_dim != task.n_labels(crate::model::Side::Pretrain) {
                return Err(Error::Config("classification tasks need a softmax head sized to the pretraining classes".into()));
            }
        } else if !self.evaluation.protocols.is_empty() {
            return Err(Error::Config("transfer protocols need a cluster task; set evaluation.protocols = []".into()));
        }
        if self.data.pretrain_samples < self.pretrain.batch_size {
            return Err(Error::Config("data.pretrain_samples is smaller than pretrain.batch_size".into()));
        }
        if self.sweep.values.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one value and one seed".into()));
        }
        for &v in &self.sweep.values {
            self.sweep.axis.apply(&self.pretrain, v, 0).map_err(cfg)?;
        }
        let metrics = metric_registry();
        for m in &self.evaluation.metrics {
            metrics.get(m).map_err(cfg)?;
        }
        let protocols = protocol_registry(&self.full, &self.fewshot);
        for p in &self.evaluation.protocols {
            protocols.get(p).map_err(cfg)?;
        }
        Ok(())
    }
}

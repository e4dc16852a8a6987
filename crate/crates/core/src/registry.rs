//! Name-keyed registries of interchangeable strategies, selected at run
//! time from config or the command line.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::free_energy::FreeEnergyEstimate;
use crate::pretrain::Checkpoint;
use crate::synth::TaskFamily;
use crate::transfer::{eval_fewshot, eval_full, FewShotProtocol, FinetuneConfig, FullProtocol, ProtocolKind, TransferResult};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Box<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    /// Later registrations under the same name replace earlier ones.
    pub fn register(&mut self, name: impl Into<String>, entry: Box<T>) -> &mut Self {
        self.entries.insert(name.into(), entry);
        self
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| Error::UnknownName {
            kind: self.kind,
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

/// A scalar computed per checkpoint and correlated against transfer accuracy.
pub trait CheckpointMetric: Send + Sync {
    /// Whether `evaluate` reads the free-energy estimate.
    fn needs_free_energy(&self) -> bool;
    fn evaluate(&self, ckpt: &Checkpoint, fe: Option<&FreeEnergyEstimate>) -> Result<f64>;
}

fn require(fe: Option<&FreeEnergyEstimate>) -> Result<&FreeEnergyEstimate> {
    fe.ok_or_else(|| Error::invalid("metric needs a free-energy estimate"))
}

pub struct WbicMetric;

impl CheckpointMetric for WbicMetric {
    fn needs_free_energy(&self) -> bool {
        true
    }

    fn evaluate(&self, _ckpt: &Checkpoint, fe: Option<&FreeEnergyEstimate>) -> Result<f64> {
        Ok(require(fe)?.wbic)
    }
}

pub struct LlcMetric;

impl CheckpointMetric for LlcMetric {
    fn needs_free_energy(&self) -> bool {
        true
    }

    fn evaluate(&self, _ckpt: &Checkpoint, fe: Option<&FreeEnergyEstimate>) -> Result<f64> {
        Ok(require(fe)?.llc)
    }
}

pub struct TrainLossMetric;

impl CheckpointMetric for TrainLossMetric {
    fn needs_free_energy(&self) -> bool {
        false
    }

    fn evaluate(&self, ckpt: &Checkpoint, _fe: Option<&FreeEnergyEstimate>) -> Result<f64> {
        Ok(ckpt.train_loss)
    }
}

pub fn metric_registry() -> Registry<dyn CheckpointMetric> {
    let mut r: Registry<dyn CheckpointMetric> = Registry::new("metric");
    r.register("wbic", Box::new(WbicMetric))
        .register("llc", Box::new(LlcMetric))
        .register("train_loss", Box::new(TrainLossMetric));
    r
}

/// A downstream evaluation protocol.
pub trait TransferProtocol: Send + Sync {
    fn kind(&self) -> ProtocolKind;
    fn evaluate(&self, ckpt: &Checkpoint, task: &TaskFamily, finetune: &FinetuneConfig) -> Result<TransferResult>;
}

pub struct FullTransfer(pub FullProtocol);

impl TransferProtocol for FullTransfer {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Full
    }

    fn evaluate(&self, ckpt: &Checkpoint, task: &TaskFamily, finetune: &FinetuneConfig) -> Result<TransferResult> {
        eval_full(ckpt, task, finetune, &self.0)
    }
}

pub struct FewShotTransfer(pub FewShotProtocol);

impl TransferProtocol for FewShotTransfer {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Fewshot
    }

    fn evaluate(&self, ckpt: &Checkpoint, task: &TaskFamily, finetune: &FinetuneConfig) -> Result<TransferResult> {
        eval_fewshot(ckpt, task, &self.0, finetune)
    }
}

pub fn protocol_registry(full: &FullProtocol, fewshot: &FewShotProtocol) -> Registry<dyn TransferProtocol> {
    let mut r: Registry<dyn TransferProtocol> = Registry::new("protocol");
    r.register("full", Box::new(FullTransfer(full.clone())))
        .register("fewshot", Box::new(FewShotTransfer(fewshot.clone())));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_unknown_names() {
        let r = metric_registry();
        assert_eq!(r.names(), ["llc", "train_loss", "wbic"]);
        assert!(r.get("wbic").unwrap().needs_free_energy());
        assert!(matches!(r.get("nope"), Err(Error::UnknownName { kind: "metric", .. })));
        let p = protocol_registry(&FullProtocol::default(), &FewShotProtocol::default());
        assert_eq!(p.get("fewshot").unwrap().kind(), ProtocolKind::Fewshot);
    }
}

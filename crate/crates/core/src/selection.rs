//! Asymptotic free-energy checkpoint selection, pairwise preference flips
//! and an empirical check of the downstream transfer bound.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::free_energy::FreeEnergyEstimate;
use crate::model::{DatasetNll, LabeledDataset, LossKind, Objective, OutputKind, ParamVector, Side, Targets};
use crate::model::population_loss;
use crate::pretrain::{write_file, Checkpoint};
use crate::synth::{shift_constants, Conditional, TaskFamily};

/// `β₀ = M · m · log n / (n · log m)`.
pub fn beta0(m_const: f64, m: usize, n: usize) -> Result<f64> {
    if m < 2 || n < 2 {
        return Err(Error::invalid("beta0 needs m ≥ 2 and n ≥ 2"));
    }
    if m_const.is_infinite() {
        return Err(Error::Uninformative("M is infinite: supports are not nested".into()));
    }
    if !(m_const > 0.0) {
        return Err(Error::invalid("M must be positive"));
    }
    let (mf, nf) = (m as f64, n as f64);
    Ok(m_const * mf * nf.ln() / (nf * mf.ln()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub checkpoint_id: String,
    pub step: usize,
    /// `n β₀ L̂(w*)`.
    pub loss_term: f64,
    /// `λ̂ log n`.
    pub complexity_term: f64,
    pub score: f64,
    pub beta0: f64,
}

impl SelectionScore {
    /// Score from a mean training loss and a complexity estimate.
    pub fn from_terms(checkpoint_id: impl Into<String>, step: usize, mean_loss: f64, llc: f64, beta0: f64, n: usize) -> Self {
        let nf = n as f64;
        let loss_term = nf * beta0 * mean_loss;
        let complexity_term = llc * nf.ln();
        Self {
            checkpoint_id: checkpoint_id.into(),
            step,
            loss_term,
            complexity_term,
            score: loss_term + complexity_term,
            beta0,
        }
    }
}

pub fn score_checkpoint(ckpt: &Checkpoint, fe: &FreeEnergyEstimate, beta0: f64, n: usize) -> SelectionScore {
    SelectionScore::from_terms(ckpt.id.clone(), ckpt.step, fe.anchor_loss / fe.n as f64, fe.llc, beta0, n)
}

fn rank_order(a: &SelectionScore, b: &SelectionScore) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.complexity_term.total_cmp(&b.complexity_term))
        .then(a.step.cmp(&b.step))
        .then_with(|| a.checkpoint_id.cmp(&b.checkpoint_id))
}

/// Ascending by score; ties by complexity, then step, then id.
pub fn rank(scores: &[SelectionScore]) -> Result<Vec<SelectionScore>> {
    if scores.is_empty() {
        return Err(Error::invalid("nothing to rank"));
    }
    let mut out = scores.to_vec();
    out.sort_by(rank_order);
    Ok(out)
}

pub fn write_ranking_csv(path: &Path, ranked: &[SelectionScore]) -> Result<()> {
    let mut s = String::from("checkpoint_id,loss_term,complexity_term,score,rank\n");
    for (i, r) in ranked.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},{}", r.checkpoint_id, r.loss_term, r.complexity_term, r.score, i + 1);
    }
    write_file(path, s.as_bytes())
}

/// Threshold on `m / log m` below which the higher-loss, lower-complexity
/// checkpoint is preferred: `Δλ / (M ΔK)`.
pub fn observation1_threshold(delta_k: f64, delta_lambda: f64, m_const: f64) -> Result<f64> {
    if !(delta_k > 0.0 && delta_lambda > 0.0) {
        return Err(Error::invalid("loss and complexity gaps must both be positive"));
    }
    if !(m_const > 0.0 && m_const.is_finite()) {
        return Err(Error::invalid("M must be positive and finite"));
    }
    Ok(delta_lambda / (m_const * delta_k))
}

/// Whether downstream size `m` makes the simpler checkpoint preferable.
pub fn prefers_simpler(m: usize, threshold: f64) -> bool {
    let mf = m as f64;
    mf / mf.ln() < threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaHat {
    pub value: f64,
    pub std_error: f64,
}

impl From<&FreeEnergyEstimate> for LambdaHat {
    fn from(fe: &FreeEnergyEstimate) -> Self {
        Self {
            value: fe.llc,
            std_error: fe.std_error / (fe.n as f64).ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `K¹` at the localized downstream minimizer.
    pub k1_at_w1: f64,
    /// `K¹` at the anchor, for reference.
    pub k1_at_anchor: f64,
    pub lambda1: LambdaHat,
    pub k0_at_anchor: f64,
    pub lambda0: LambdaHat,
    pub m_const: f64,
    pub d_const: f64,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs ≤ rhs + 1e-12`.
    pub satisfied: bool,
    pub slack: f64,
    /// Standard deviation of `rhs − lhs` from the complexity estimates.
    pub sigma: f64,
    /// `λ̂¹ ≤ λ̂⁰`.
    pub hypothesis_holds: bool,
    pub inputs: BoundInputs,
}

impl BoundReport {
    pub fn from_inputs(inputs: BoundInputs) -> Self {
        let mf = inputs.m as f64;
        let c = mf.ln() / mf;
        let lhs = inputs.k1_at_w1 + inputs.lambda1.value * c;
        let rhs = inputs.m_const * inputs.k0_at_anchor + inputs.d_const + inputs.lambda0.value * c;
        let sigma = c * inputs.lambda0.std_error.hypot(inputs.lambda1.std_error);
        Self {
            lhs,
            rhs,
            satisfied: lhs <= rhs + 1e-12,
            slack: rhs - lhs,
            sigma,
            hypothesis_holds: inputs.lambda1.value <= inputs.lambda0.value,
            inputs,
        }
    }

    /// `lhs ≤ rhs + k σ`.
    pub fn satisfied_within(&self, k: f64) -> bool {
        self.lhs <= self.rhs + 1e-12 + k * self.sigma
    }
}

/// Gradient descent with Armijo backtracking on
/// `f(w) + γ ‖θ − θ*‖²` over the backbone, head held fixed.
pub fn localized_minimize(objective: &dyn Objective, start: &ParamVector, gamma: f64, max_iter: usize) -> Result<ParamVector> {
    let b = start.backbone_len();
    let anchor = &start.values;
    let penalized = |w: &[f64], g: &mut [f64]| -> Result<f64> {
        let v = objective.value_grad(w, g)?;
        let mut pen = 0.0;
        for j in 0..g.len() {
            if j < b {
                let r = w[j] - anchor[j];
                pen += r * r;
                g[j] += 2.0 * gamma * r;
            } else {
                g[j] = 0.0;
            }
        }
        Ok(v + gamma * pen)
    };
    let mut w = anchor.clone();
    let mut g = vec![0.0; w.len()];
    let mut f = penalized(&w, &mut g)?;
    let mut step = 1.0;
    let mut trial_g = vec![0.0; w.len()];
    for _ in 0..max_iter {
        let gg: f64 = g.iter().map(|x| x * x).sum();
        if gg.sqrt() < 1e-12 {
            break;
        }
        let mut accepted = false;
        while step > 1e-20 {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(a, d)| a - step * d).collect();
            let ft = penalized(&trial, &mut trial_g)?;
            if ft.is_finite() && ft <= f - 0.5 * step * gg {
                w = trial;
                std::mem::swap(&mut g, &mut trial_g);
                let improvement = f - ft;
                f = ft;
                step *= 2.0;
                accepted = true;
                if improvement <= 1e-15 * f.abs().max(1.0) {
                    return Ok(ParamVector::new(w, b));
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(ParamVector::new(w, b))
}

/// `K` on one side as a quadrature-weighted objective with matching gradient
/// (up to an additive constant).
fn population_objective_data(task: &TaskFamily, side: Side) -> Result<(LabeledDataset, Vec<f64>)> {
    let (nodes, weights) = task
        .x_quadrature(side)
        .ok_or_else(|| Error::Unsupported("bound check needs an analytic task with input dimension ≤ 3".into()))?;
    let ys: Vec<f64> = nodes
        .iter()
        .map(|x| match task.conditional(side, x) {
            Conditional::Gaussian { mean, .. } => Ok(mean),
            Conditional::Categorical(_) => Err(Error::Unsupported("bound check needs a Gaussian task".into())),
        })
        .collect::<Result<_>>()?;
    let data = LabeledDataset::from_rows(&nodes, Targets::Real(ys), side)?;
    Ok((data, weights))
}

/// Empirical check of `K¹(w*¹) + λ¹ log m / m ≤ M K⁰(w*) + D + λ⁰ log m / m`.
pub fn check_prop1_bound(
    task: &TaskFamily,
    ckpt: &Checkpoint,
    lambda0: LambdaHat,
    lambda1: LambdaHat,
    m: usize,
    gamma: f64,
) -> Result<BoundReport> {
    if m < 2 {
        return Err(Error::invalid("m must be at least 2"));
    }
    if !matches!(ckpt.spec.output_kind, OutputKind::GaussianFixedSigma { .. }) {
        return Err(Error::Unsupported("bound check needs a Gaussian-output model".into()));
    }
    let shift = shift_constants(task)?;
    if shift.m.is_infinite() {
        return Err(Error::Uninformative("M is infinite for this task".into()));
    }
    let k = |w: &ParamVector, side| population_loss(&ckpt.spec, w, task, LossKind::K, side, 1, 0).map(|p| p.value);
    let k0 = k(&ckpt.params, Side::Pretrain)?;
    let k1_anchor = k(&ckpt.params, Side::Downstream)?;
    let (data, weights) = population_objective_data(task, Side::Downstream)?;
    let objective = DatasetNll::weighted(&ckpt.spec, &data, &weights);
    let w1 = localized_minimize(&objective, &ckpt.params, gamma, 2000)?;
    let k1 = k(&w1, Side::Downstream)?;
    Ok(BoundReport::from_inputs(BoundInputs {
        k1_at_w1: k1,
        k1_at_anchor: k1_anchor,
        lambda1,
        k0_at_anchor: k0,
        lambda0,
        m_const: shift.m,
        d_const: shift.d,
        m,
    }))
}

//! Downstream Gibbs training/test errors, the Bayes (model-averaged) test
//! error and the singular-fluctuation estimate, from SGLD posterior samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::free_energy::{run_chains, Beta, SgldConfig};
use crate::model::{DatasetNll, LabeledDataset, LikelihoodModel, ParamVector, Predictive, Side, TargetRef};
use crate::numeric::{log_sum_exp, mean, std_error};
use crate::pretrain::Checkpoint;
use crate::synth::TaskFamily;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsConfig {
    /// Posterior sampler; `beta` is normally `Fixed(1.0)`.
    pub sgld: SgldConfig,
    /// Size of the shared fresh evaluation set.
    pub eval_samples: usize,
    pub eval_seed: u64,
    /// Keep every `thin`-th post-burn-in sample.
    pub thin: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            sgld: SgldConfig {
                beta: Beta::Fixed(1.0),
                ..SgldConfig::default()
            },
            eval_samples: 2000,
            eval_seed: 0,
            thin: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsStdErrors {
    pub t_m: f64,
    pub g_m: f64,
    pub g_bma: f64,
    pub nu_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsReport {
    /// Posterior mean of the empirical downstream loss `K̂¹`.
    pub t_m: f64,
    /// Posterior mean of the population loss `K¹`.
    pub g_m: f64,
    /// `K¹` of the posterior-averaged predictive.
    pub g_bma: f64,
    /// `m (G_m − T_m) / 2`.
    pub nu_hat: f64,
    pub m: usize,
    pub samples_used: usize,
    pub std_errors: GibbsStdErrors,
}

/// Pointwise average of member predictives.
#[derive(Debug, Clone, PartialEq)]
pub enum BmaPredictive {
    Categorical(Vec<f64>),
    GaussianMixture { means: Vec<f64>, sigma: f64 },
}

impl BmaPredictive {
    pub fn log_prob(&self, y: TargetRef<'_>) -> f64 {
        match (self, y) {
            (BmaPredictive::Categorical(p), TargetRef::Class(c)) => p[c].ln(),
            (BmaPredictive::GaussianMixture { means, sigma }, TargetRef::Real(_)) => {
                let terms: Vec<f64> = means
                    .iter()
                    .map(|&mean| Predictive::Gaussian { mean, sigma: *sigma }.log_prob(y))
                    .collect();
                log_sum_exp(&terms) - (means.len() as f64).ln()
            }
            _ => f64::NAN,
        }
    }
}

pub fn bma_predictive(model: &dyn LikelihoodModel, samples: &[ParamVector], x: &[f64]) -> Result<BmaPredictive> {
    let first = samples.first().ok_or_else(|| Error::invalid("no posterior samples"))?;
    match model.predictive(&first.values, x) {
        Predictive::Categorical(p0) => {
            let mut acc = vec![0.0; p0.len()];
            for s in samples {
                let Predictive::Categorical(p) = model.predictive(&s.values, x) else { unreachable!() };
                for (a, v) in acc.iter_mut().zip(&p) {
                    *a += v;
                }
            }
            let k = samples.len() as f64;
            Ok(BmaPredictive::Categorical(acc.into_iter().map(|a| a / k).collect()))
        }
        Predictive::Gaussian { sigma, .. } => Ok(BmaPredictive::GaussianMixture {
            means: samples
                .iter()
                .map(|s| match model.predictive(&s.values, x) {
                    Predictive::Gaussian { mean, .. } => mean,
                    Predictive::Categorical(_) => f64::NAN,
                })
                .collect(),
            sigma,
        }),
    }
}

/// Per-chain accumulators over posterior samples.
struct ChainStats {
    samples: usize,
    /// Per-sample `K̂¹(w)`.
    k_hat: Vec<f64>,
    /// Per eval point: `Σ_s log p(y_j | x_j, w_s)`.
    sum_log_p: Vec<f64>,
    /// Per eval point: `log Σ_s p(y_j | x_j, w_s)`.
    lse_log_p: Vec<f64>,
}

/// Gibbs quantities for any likelihood model against a known truth
/// `log r(y | x)`, sampling the localized posterior on `data` started at
/// `anchor` and evaluating on the shared `eval` set.
pub fn gibbs_report_with(
    model: &dyn LikelihoodModel,
    log_truth: &(dyn Fn(&[f64], TargetRef<'_>) -> f64 + Sync),
    anchor: &ParamVector,
    data: &LabeledDataset,
    eval: &LabeledDataset,
    config: &GibbsConfig,
) -> Result<GibbsReport> {
    if data.is_empty() || eval.is_empty() {
        return Err(Error::Degenerate("empty training or evaluation set".into()));
    }
    let m = data.len();
    let mf = m as f64;
    let objective = DatasetNll::new(model, data);
    let chains = run_chains(&objective, anchor, &config.sgld, Some(config.thin.max(1)))?;
    let survivors: Vec<_> = chains
        .into_iter()
        .enumerate()
        .filter_map(|(c, r)| match r {
            Ok(out) => Some(out),
            Err(e) => {
                log::warn!("posterior chain {c} aborted: {e}");
                None
            }
        })
        .collect();
    if survivors.is_empty() {
        return Err(Error::EstimationFailed("all posterior chains aborted".into()));
    }
    let truth_train: f64 = (0..m).map(|i| log_truth(data.x(i), data.target(i))).sum::<f64>() / mf;
    let truth_eval: Vec<f64> = (0..eval.len()).map(|j| log_truth(eval.x(j), eval.target(j))).collect();
    let all: Vec<usize> = (0..m).collect();

    let stats: Vec<ChainStats> = survivors
        .par_iter()
        .map(|out| {
            let j_len = eval.len();
            let mut sum_log_p = vec![0.0; j_len];
            let mut per_point: Vec<Vec<f64>> = vec![Vec::with_capacity(out.samples.len()); j_len];
            let mut k_hat = Vec::with_capacity(out.samples.len());
            for w in &out.samples {
                k_hat.push(model.sum_nll(w, data, &all, None, None) / mf + truth_train);
                for j in 0..j_len {
                    let lp = model.predictive(w, eval.x(j)).log_prob(eval.target(j));
                    sum_log_p[j] += lp;
                    per_point[j].push(lp);
                }
            }
            ChainStats {
                samples: out.samples.len(),
                k_hat,
                sum_log_p,
                lse_log_p: per_point.iter().map(|v| log_sum_exp(v)).collect(),
            }
        })
        .collect();

    let s_total: usize = stats.iter().map(|c| c.samples).sum();
    if s_total == 0 {
        return Err(Error::EstimationFailed("no posterior samples kept".into()));
    }
    let sf = s_total as f64;
    let j_len = eval.len();
    let mut gm_points = Vec::with_capacity(j_len);
    let mut bma_points = Vec::with_capacity(j_len);
    for j in 0..j_len {
        let mean_log = stats.iter().map(|c| c.sum_log_p[j]).sum::<f64>() / sf;
        let lse = log_sum_exp(&stats.iter().map(|c| c.lse_log_p[j]).collect::<Vec<_>>());
        gm_points.push(truth_eval[j] - mean_log);
        bma_points.push(truth_eval[j] - (lse - sf.ln()));
    }
    let all_k_hat: Vec<f64> = stats.iter().flat_map(|c| c.k_hat.iter().copied()).collect();
    let t_m = mean(&all_k_hat);
    let g_m = mean(&gm_points);
    let g_bma = mean(&bma_points);

    // Between-chain spread of per-chain estimates, combined with the
    // evaluation-set Monte-Carlo error where the eval set enters.
    let per_chain_t: Vec<f64> = stats.iter().map(|c| mean(&c.k_hat)).collect();
    let per_chain_g: Vec<f64> = stats
        .iter()
        .map(|c| mean(&(0..j_len).map(|j| truth_eval[j] - c.sum_log_p[j] / c.samples as f64).collect::<Vec<_>>()))
        .collect();
    let per_chain_bma: Vec<f64> = stats
        .iter()
        .map(|c| mean(&(0..j_len).map(|j| truth_eval[j] - (c.lse_log_p[j] - (c.samples as f64).ln())).collect::<Vec<_>>()))
        .collect();
    let per_chain_nu: Vec<f64> = per_chain_g.iter().zip(&per_chain_t).map(|(g, t)| mf * (g - t) / 2.0).collect();
    let between = |v: &[f64]| if v.len() > 1 { std_error(v) } else { 0.0 };
    let se_eval_g = std_error(&gm_points);
    let se_eval_bma = std_error(&bma_points);
    let se_t = if stats.len() > 1 {
        between(&per_chain_t)
    } else {
        crate::numeric::batch_means_std_error(&all_k_hat, 10)
    };
    let se_g = between(&per_chain_g).hypot(se_eval_g);
    Ok(GibbsReport {
        t_m,
        g_m,
        g_bma,
        nu_hat: mf * (g_m - t_m) / 2.0,
        m,
        samples_used: s_total,
        std_errors: GibbsStdErrors {
            t_m: se_t,
            g_m: se_g,
            g_bma: between(&per_chain_bma).hypot(se_eval_bma),
            nu_hat: between(&per_chain_nu).hypot(mf / 2.0 * se_eval_g),
        },
    })
}

/// Gibbs report of a checkpoint on a downstream dataset of a synthetic task.
/// The evaluation set is a fresh downstream sample of `eval_samples` points.
pub fn gibbs_report(ckpt: &Checkpoint, task: &TaskFamily, data: &LabeledDataset, config: &GibbsConfig) -> Result<GibbsReport> {
    ckpt.spec.check_params(&ckpt.params)?;
    if ckpt.spec.input_dim != task.input_dim() {
        return Err(Error::invalid("checkpoint input dimension does not match task"));
    }
    if task.is_classification() && ckpt.spec.head_dim != task.n_labels(Side::Downstream) {
        return Err(Error::invalid("checkpoint head does not match the downstream label count"));
    }
    let eval = task.sample(Side::Downstream, config.eval_samples.max(2), config.eval_seed)?;
    let truth = |x: &[f64], y: TargetRef<'_>| task.conditional(Side::Downstream, x).log_prob(y);
    gibbs_report_with(&ckpt.spec, &truth, &ckpt.params, data, &eval, config)
}

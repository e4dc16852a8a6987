//! SGLD sampling of the localized tempered posterior
//! `p(w) ∝ exp(−nβ L̂(w)) · exp(−γ ‖w − w*‖²)` and the WBIC / local
//! learning coefficient estimators built on it.
//!
//! Only backbone coordinates move; head coordinates stay at the anchor.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{DatasetNll, LabeledDataset, Objective, ParamVector};
use crate::numeric::{batch_means_std_error, mean, rng_from, stable_sum, std_error, stream};
use crate::pretrain::{write_file, BatchSchedule, Checkpoint};
use crate::quadrature::integrate_box;

/// Inverse temperature of the sampled posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    /// `β* = 1 / log n`.
    AutoWbic,
    Fixed(f64),
}

impl Beta {
    pub fn resolve(self, n: usize) -> Result<f64> {
        match self {
            Beta::AutoWbic => {
                if n < 2 {
                    return Err(Error::invalid("auto_wbic needs n ≥ 2"));
                }
                Ok(1.0 / (n as f64).ln())
            }
            Beta::Fixed(b) if b > 0.0 && b.is_finite() => Ok(b),
            Beta::Fixed(b) => Err(Error::invalid(format!("beta must be positive, got {b}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BetaRepr {
    Fixed(f64),
    Named(String),
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Beta::AutoWbic => BetaRepr::Named("auto_wbic".into()),
            Beta::Fixed(b) => BetaRepr::Fixed(*b),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match BetaRepr::deserialize(d)? {
            BetaRepr::Fixed(b) => Ok(Beta::Fixed(b)),
            BetaRepr::Named(s) if s == "auto_wbic" => Ok(Beta::AutoWbic),
            BetaRepr::Named(s) => Err(serde::de::Error::custom(format!("unknown beta `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgldConfig {
    pub step_size: f64,
    pub chain_length: usize,
    pub burn_in: usize,
    /// Minibatch size; values ≥ n mean full-batch gradients.
    pub batch_size: usize,
    pub gamma: f64,
    pub beta: Beta,
    pub chains: usize,
    pub seed: u64,
    pub record_trace: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-5,
            chain_length: 2000,
            burn_in: 500,
            batch_size: 4096,
            gamma: 1.0,
            beta: Beta::AutoWbic,
            chains: 4,
            seed: 0,
            record_trace: false,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if self.chain_length == 0 || self.chains == 0 || self.batch_size == 0 {
            return Err(Error::invalid("chain_length, chains and batch_size must be positive"));
        }
        if self.burn_in >= self.chain_length {
            return Err(Error::invalid("burn_in must be smaller than chain_length"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be positive"));
        }
        if let Beta::Fixed(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::invalid("beta must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    /// Mean backbone distance `‖w − w*‖` over kept samples.
    pub mean_drift_from_anchor: f64,
    /// Largest single-coordinate excursion `|w_j − w*_j|`.
    pub max_param_excursion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub chain: usize,
    pub step: usize,
    pub n_loss: f64,
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyEstimate {
    pub wbic: f64,
    pub llc: f64,
    pub n: usize,
    pub beta: f64,
    /// `n L̂(w*)`.
    pub anchor_loss: f64,
    pub per_chain_wbic: Vec<f64>,
    pub std_error: f64,
    pub diagnostics: ChainDiagnostics,
    pub aborted_chains: Vec<usize>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

/// One chain's output: `n L̂` at every kept step and optionally thinned samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub chain: usize,
    pub n_losses: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub drift_sum: f64,
    pub max_excursion: f64,
    pub trace: Vec<TraceRow>,
}

/// Run one SGLD chain started at the anchor. `thin = Some(k)` keeps every
/// k-th post-burn-in parameter vector.
pub fn run_chain(objective: &dyn Objective, anchor: &ParamVector, config: &SgldConfig, chain: usize, thin: Option<usize>) -> Result<ChainOutput> {
    config.validate()?;
    if objective.dim() != anchor.len() {
        return Err(Error::invalid(format!(
            "anchor has {} parameters, objective expects {}",
            anchor.len(),
            objective.dim()
        )));
    }
    let n = objective.n_examples();
    if n == 0 {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    let nf = n as f64;
    let beta = config.beta.resolve(n)?;
    let eps = config.step_size;
    let noise_sd = eps.sqrt();
    let b = anchor.backbone_len();
    let w_star = &anchor.values;
    let mut rng = rng_from(config.seed, &[stream::SGLD, chain as u64]);
    let mut batches = (config.batch_size < n)
        .then(|| BatchSchedule::new(n, config.batch_size, rng_from(config.seed, &[stream::SGLD, chain as u64, stream::SHUFFLE])));
    let mut w = w_star.clone();
    let mut grad = vec![0.0; w.len()];
    let kept = config.chain_length - config.burn_in;
    let mut out = ChainOutput {
        chain,
        n_losses: Vec::with_capacity(kept),
        samples: Vec::new(),
        drift_sum: 0.0,
        max_excursion: 0.0,
        trace: Vec::new(),
    };
    for step in 0..config.chain_length {
        let loss = match batches.as_mut() {
            Some(s) => objective.batch_value_grad(&w, s.next_batch(), &mut grad)?,
            None => objective.value_grad(&w, &mut grad)?,
        };
        if !loss.is_finite() || grad[..b].iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        if step >= config.burn_in {
            let mut sq = 0.0;
            for j in 0..b {
                let r = w[j] - w_star[j];
                sq += r * r;
                out.max_excursion = out.max_excursion.max(r.abs());
            }
            let drift = sq.sqrt();
            out.drift_sum += drift;
            out.n_losses.push(nf * loss);
            if config.record_trace {
                out.trace.push(TraceRow { chain, step, n_loss: nf * loss, drift });
            }
            if let Some(k) = thin {
                if (step - config.burn_in) % k.max(1) == 0 {
                    out.samples.push(w.clone());
                }
            }
        }
        for j in 0..b {
            let z: f64 = rng.sample(StandardNormal);
            w[j] -= 0.5 * eps * (nf * beta * grad[j] + 2.0 * config.gamma * (w[j] - w_star[j])) - noise_sd * z;
        }
    }
    Ok(out)
}

/// All chains in parallel, returned in chain order. Failed chains are
/// reported as `Err` entries.
pub fn run_chains(objective: &dyn Objective, anchor: &ParamVector, config: &SgldConfig, thin: Option<usize>) -> Result<Vec<Result<ChainOutput>>> {
    config.validate()?;
    Ok((0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(objective, anchor, config, c, thin))
        .collect())
}

/// Post-burn-in samples of one chain on a dataset objective.
pub fn sgld_chain(spec: &crate::model::ModelSpec, anchor: &Checkpoint, dataset: &LabeledDataset, config: &SgldConfig) -> Result<Vec<ParamVector>> {
    spec.check_params(&anchor.params)?;
    if dataset.is_empty() {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    let objective = DatasetNll::new(spec, dataset);
    let out = run_chain(&objective, &anchor.params, config, 0, Some(1))?;
    let b = anchor.params.backbone_len();
    Ok(out.samples.into_iter().map(|v| ParamVector::new(v, b)).collect())
}

/// WBIC and local learning coefficient for any objective.
pub fn estimate_wbic_objective(objective: &dyn Objective, anchor: &ParamVector, config: &SgldConfig) -> Result<FreeEnergyEstimate> {
    let n = objective.n_examples();
    let beta = config.beta.resolve(n)?;
    let nf = n as f64;
    let anchor_loss = nf * objective.value(&anchor.values)?;
    if !anchor_loss.is_finite() {
        return Err(Error::NonFinite("loss at the anchor".into()));
    }
    let results = run_chains(objective, anchor, config, None)?;
    let mut ok = Vec::new();
    let mut aborted = Vec::new();
    for (c, r) in results.into_iter().enumerate() {
        match r {
            Ok(out) => ok.push(out),
            Err(e) => {
                log::warn!("SGLD chain {c} aborted: {e}");
                aborted.push(c);
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::EstimationFailed(format!("all {} SGLD chains aborted", config.chains)));
    }
    let per_chain: Vec<f64> = ok.iter().map(|o| mean(&o.n_losses)).collect();
    let wbic = mean(&per_chain);
    let std_error = if per_chain.len() > 1 {
        std_error(&per_chain)
    } else {
        batch_means_std_error(&ok[0].n_losses, 10)
    };
    let total: usize = ok.iter().map(|o| o.n_losses.len()).sum();
    let drift = stable_sum(&ok.iter().map(|o| o.drift_sum).collect::<Vec<_>>()) / total as f64;
    let max_excursion = ok.iter().map(|o| o.max_excursion).fold(0.0, f64::max);
    let trace = ok.iter().flat_map(|o| o.trace.iter().copied()).collect();
    Ok(FreeEnergyEstimate {
        wbic,
        llc: (wbic - anchor_loss) / nf.ln(),
        n,
        beta,
        anchor_loss,
        per_chain_wbic: per_chain,
        std_error,
        diagnostics: ChainDiagnostics {
            mean_drift_from_anchor: drift,
            max_param_excursion: max_excursion,
        },
        aborted_chains: aborted,
        trace,
    })
}

/// Pretraining (or downstream) WBIC of a checkpoint on a dataset.
pub fn estimate_wbic(spec: &crate::model::ModelSpec, anchor: &Checkpoint, dataset: &LabeledDataset, config: &SgldConfig) -> Result<FreeEnergyEstimate> {
    spec.check_params(&anchor.params)?;
    if dataset.is_empty() {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    estimate_wbic_objective(&DatasetNll::new(spec, dataset), &anchor.params, config)
}

impl FreeEnergyEstimate {
    /// CSV with columns `chain,step,n_loss,drift`.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("chain,step,n_loss,drift\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{},{},{}", r.chain, r.step, r.n_loss, r.drift);
        }
        write_file(path, s.as_bytes())
    }
}

/// Estimates keyed by checkpoint id, as written by the harness.
pub fn load_estimates(path: &Path) -> Result<std::collections::BTreeMap<String, FreeEnergyEstimate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Half-width of the integration box: twelve localizer standard deviations.
fn posterior_box(gamma: f64) -> f64 {
    12.0 / (2.0 * gamma).sqrt()
}

/// `−log ∫ exp(−nβ L(w) − γ ‖w − w*‖²) dw` by nested adaptive quadrature
/// (at most three dimensions).
pub fn quadrature_free_energy<F: Fn(&[f64]) -> f64>(loss: F, n: usize, beta: f64, gamma: f64, w_star: &[f64]) -> Result<f64> {
    let nb = n as f64 * beta;
    let shift = nb * loss(w_star);
    let z = integrate_box(
        &|w: &[f64]| {
            let sq: f64 = w.iter().zip(w_star).map(|(a, b)| (a - b) * (a - b)).sum();
            (-(nb * loss(w) - shift) - gamma * sq).exp()
        },
        w_star,
        posterior_box(gamma),
        1e-11,
    )?;
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::NonFinite("partition function".into()));
    }
    Ok(shift - z.ln())
}

/// Posterior expectation `E[g(w)]` under the same localized tempered
/// posterior, by quadrature.
pub fn quadrature_posterior_mean<F, G>(loss: F, observable: G, n: usize, beta: f64, gamma: f64, w_star: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> f64,
{
    let nb = n as f64 * beta;
    let shift = nb * loss(w_star);
    let density = |w: &[f64]| {
        let sq: f64 = w.iter().zip(w_star).map(|(a, b)| (a - b) * (a - b)).sum();
        (-(nb * loss(w) - shift) - gamma * sq).exp()
    };
    let hw = posterior_box(gamma);
    let z = integrate_box(&density, w_star, hw, 1e-11)?;
    let num = integrate_box(&|w: &[f64]| observable(w) * density(w), w_star, hw, 1e-11)?;
    Ok(num / z)
}

/// WBIC oracle: `E[n L(w)]` at `β* = 1/log n`.
pub fn quadrature_wbic<F: Fn(&[f64]) -> f64 + Copy>(loss: F, n: usize, gamma: f64, w_star: &[f64]) -> Result<f64> {
    let beta = Beta::AutoWbic.resolve(n)?;
    let nf = n as f64;
    quadrature_posterior_mean(loss, |w| nf * loss(w), n, beta, gamma, w_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surfaces::{ConstantLoss, QuadraticLoss};
    use std::f64::consts::PI;

    fn cfg(eps: f64, len: usize, chains: usize) -> SgldConfig {
        SgldConfig { step_size: eps, chain_length: len, burn_in: len / 4, chains, seed: 11, ..Default::default() }
    }

    #[test]
    fn constant_loss_gives_exact_wbic() {
        let obj = ConstantLoss { dim: 3, value: 0.7, n: 500 };
        let est = estimate_wbic_objective(&obj, &ParamVector::all_backbone(vec![0.0; 3]), &cfg(1e-3, 200, 2)).unwrap();
        assert_eq!(est.wbic, 500.0 * 0.7);
        assert_eq!(est.llc, 0.0);
    }

    #[test]
    fn pure_localizer_variance() {
        let obj = ConstantLoss { dim: 2, value: 0.0, n: 10 };
        let gamma = 2.0;
        let c = SgldConfig { gamma, ..cfg(1e-2, 60_000, 1) };
        let out = run_chain(&obj, &ParamVector::all_backbone(vec![0.5, -0.5]), &c, 0, Some(1)).unwrap();
        for j in 0..2 {
            let xs: Vec<f64> = out.samples.iter().map(|s| s[j]).collect();
            let v = crate::numeric::sample_variance(&xs);
            assert!((v / (1.0 / (2.0 * gamma)) - 1.0).abs() < 0.1, "variance {v}");
        }
    }

    #[test]
    fn head_coordinates_frozen() {
        let obj = QuadraticLoss::isotropic(4, 1.0, 100);
        let anchor = ParamVector::new(vec![0.1, 0.2, 0.3, 0.4], 2);
        let out = run_chain(&obj, &anchor, &cfg(1e-3, 500, 1), 0, Some(7)).unwrap();
        for s in &out.samples {
            assert_eq!(s[2].to_bits(), 0.3f64.to_bits());
            assert_eq!(s[3].to_bits(), 0.4f64.to_bits());
        }
    }

    #[test]
    fn gaussian_localizer_free_energy() {
        let gamma = 1.7;
        let f = quadrature_free_energy(|_| 0.0, 10, 0.0, gamma, &[0.3]).unwrap();
        assert!((f - 0.5 * (gamma / PI).ln()).abs() < 1e-8);
    }

    #[test]
    fn quadratic_free_energy_closed_form() {
        let (a, n, beta, gamma) = (1.3, 200usize, 0.4, 0.8);
        let f = quadrature_free_energy(|w| 0.5 * a * w[0] * w[0], n, beta, gamma, &[0.0]).unwrap();
        let exact = 0.5 * ((n as f64 * beta * a + 2.0 * gamma) / (2.0 * PI)).ln();
        assert!((f - exact).abs() < 1e-6 * exact.abs().max(1.0));
        // 2-D anisotropic
        let f2 = quadrature_free_energy(|w| 0.5 * (a * w[0] * w[0] + 2.0 * w[1] * w[1]), n, beta, gamma, &[0.0, 0.0]).unwrap();
        let exact2 = exact + 0.5 * ((n as f64 * beta * 2.0 + 2.0 * gamma) / (2.0 * PI)).ln();
        assert!((f2 - exact2).abs() < 1e-6 * exact2.abs().max(1.0));
    }

    #[test]
    fn free_energy_grows_by_half_log_four_per_parameter() {
        let loss = |w: &[f64]| 0.5 * (w[0] * w[0] + w[1] * w[1]);
        let f1 = quadrature_free_energy(loss, 10_000, 1.0, 1.0, &[0.0, 0.0]).unwrap();
        let f4 = quadrature_free_energy(loss, 40_000, 1.0, 1.0, &[0.0, 0.0]).unwrap();
        let predicted = 2.0 * 0.5 * 4.0f64.ln();
        assert!(((f4 - f1) / predicted - 1.0).abs() < 0.05);
    }

    #[test]
    fn too_many_dimensions_unsupported() {
        assert!(matches!(
            quadrature_free_energy(|_| 0.0, 10, 1.0, 1.0, &[0.0; 4]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn all_chains_aborted_is_an_error() {
        struct Nan;
        impl Objective for Nan {
            fn dim(&self) -> usize {
                1
            }
            fn n_examples(&self) -> usize {
                10
            }
            fn value_grad(&self, _w: &[f64], g: &mut [f64]) -> Result<f64> {
                g[0] = 0.0;
                Ok(f64::NAN)
            }
        }
        let r = estimate_wbic_objective(&Nan, &ParamVector::all_backbone(vec![0.0]), &cfg(1e-3, 10, 2));
        assert!(matches!(r, Err(Error::NonFinite(_)) | Err(Error::EstimationFailed(_))));
    }

    #[test]
    fn beta_serde_forms() {
        let c: SgldConfig = toml::from_str("beta = \"auto_wbic\"\nstep_size = 0.001").unwrap();
        assert_eq!(c.beta, Beta::AutoWbic);
        let c: SgldConfig = toml::from_str("beta = 0.5").unwrap();
        assert_eq!(c.beta, Beta::Fixed(0.5));
        assert!(toml::from_str::<SgldConfig>("beta = \"hot\"").is_err());
    }
}

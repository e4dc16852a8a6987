//! Synthetic pretraining/downstream distribution pairs and the shift
//! constants `M` (maximal joint density ratio) and `D` (conditional KL
//! shift) relating them.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LabeledDataset, ModelSpec, OutputKind, ParamVector, Side, TargetRef, Targets};
use crate::model::LikelihoodModel;
use crate::numeric::{log_sum_exp, mean, rng_from, std_error, stream};
use crate::quadrature::isotropic_normal_rule;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A fixed network defining `r(y | x) = N(f_teacher(x), σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

impl Teacher {
    /// Teacher with Glorot-initialized weights drawn from `seed`.
    pub fn random(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if !matches!(spec.output_kind, OutputKind::GaussianFixedSigma { .. }) {
            return Err(Error::invalid("teacher must have a scalar gaussian output"));
        }
        let mut rng = rng_from(seed, &[stream::INIT]);
        let params = spec.init_params(&mut rng).values;
        Ok(Self { spec, params })
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        match self.spec.predictive(&self.params, x) {
            crate::model::Predictive::Gaussian { mean, .. } => mean,
            crate::model::Predictive::Categorical(_) => unreachable!("validated gaussian"),
        }
    }

    pub fn param_vector(&self) -> ParamVector {
        ParamVector::new(self.params.clone(), self.spec.backbone_boundary())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSplit {
    pub n_classes_total: usize,
    pub pretrain_class_ids: Vec<usize>,
    pub downstream_class_ids: Vec<usize>,
}

impl MetaSplit {
    pub fn new(n_classes_total: usize, pretrain_class_ids: Vec<usize>, downstream_class_ids: Vec<usize>) -> Result<Self> {
        let split = Self {
            n_classes_total,
            pretrain_class_ids,
            downstream_class_ids,
        };
        split.validate()?;
        Ok(split)
    }

    /// Random disjoint split; classes left over play the role of an unused
    /// validation group.
    pub fn random(n_classes_total: usize, n_pretrain: usize, n_downstream: usize, seed: u64) -> Result<Self> {
        if n_pretrain + n_downstream > n_classes_total {
            return Err(Error::invalid("split asks for more classes than exist"));
        }
        let mut ids: Vec<usize> = (0..n_classes_total).collect();
        ids.shuffle(&mut rng_from(seed, &[stream::SPLIT]));
        let mut pre = ids[..n_pretrain].to_vec();
        let mut down = ids[n_pretrain..n_pretrain + n_downstream].to_vec();
        pre.sort_unstable();
        down.sort_unstable();
        Self::new(n_classes_total, pre, down)
    }

    pub fn validate(&self) -> Result<()> {
        let pre: BTreeSet<_> = self.pretrain_class_ids.iter().collect();
        let down: BTreeSet<_> = self.downstream_class_ids.iter().collect();
        if pre.len() != self.pretrain_class_ids.len() || down.len() != self.downstream_class_ids.len() {
            return Err(Error::invalid("duplicate class ids in split"));
        }
        if pre.iter().chain(down.iter()).any(|&&c| c >= self.n_classes_total) {
            return Err(Error::invalid("class id out of range"));
        }
        if !pre.is_disjoint(&down) {
            return Err(Error::invalid("pretrain and downstream classes overlap"));
        }
        if down.is_empty() || pre.len() <= down.len() {
            return Err(Error::invalid("pretrain split must be strictly larger than a nonempty downstream split"));
        }
        Ok(())
    }

    pub fn ids(&self, side: Side) -> &[usize] {
        match side {
            Side::Pretrain => &self.pretrain_class_ids,
            Side::Downstream => &self.downstream_class_ids,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// `rⁱ(x) = N(μᵢ, σᵢ² I)`, shared `r(y|x) = N(f_teacher(x), noise_sigma²)`.
    GaussianCovariateShift {
        mu0: Vec<f64>,
        sigma0: f64,
        mu1: Vec<f64>,
        sigma1: f64,
        noise_sigma: f64,
        teacher: Teacher,
    },
    /// `r(x) = N(0, I)`, `rⁱ(y|x) = N(f_teacher(x), σᵢ²)`.
    GaussianNuisance { sigma0: f64, sigma1: f64, teacher: Teacher },
    /// Isotropic Gaussian clusters, one per class, split into disjoint
    /// pretraining and downstream class groups. Labels are positions in
    /// the side's class list.
    ClusterClassification {
        class_means: Vec<Vec<f64>>,
        class_sigma: f64,
        split: MetaSplit,
    },
}

/// The conditional `rⁱ(y | x)` at one input.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditional {
    Gaussian { mean: f64, sigma: f64 },
    Categorical(Vec<f64>),
}

impl Conditional {
    pub fn log_prob(&self, y: TargetRef<'_>) -> f64 {
        match (self, y) {
            (Conditional::Gaussian { mean, sigma }, TargetRef::Real(y)) => {
                let z = (y - mean) / sigma;
                -0.5 * z * z - sigma.ln() - HALF_LN_2PI
            }
            (Conditional::Categorical(p), TargetRef::Class(c)) => p.get(c).map_or(f64::NEG_INFINITY, |q| q.ln()),
            _ => f64::NAN,
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            Conditional::Gaussian { sigma, .. } => 0.5 + sigma.ln() + HALF_LN_2PI,
            Conditional::Categorical(p) => -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub kind: TaskKind,
    pub rng_seed: u64,
}

/// `M` and `D`. Monte-Carlo estimates carry standard errors and report `M`
/// as an empirical maximum, which can only under-estimate the supremum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConstants {
    pub m: f64,
    pub d: f64,
    pub m_std_error: Option<f64>,
    pub d_std_error: Option<f64>,
    /// `true` when `m` is an empirical maximum (a lower bound on the true `M`).
    pub m_is_lower_bound: bool,
    /// `true` when the empirical ratio exceeded the cap and `m` was set to +∞.
    pub capped: bool,
}

impl ShiftConstants {
    fn exact(m: f64, d: f64) -> Self {
        Self {
            m,
            d,
            m_std_error: None,
            d_std_error: None,
            m_is_lower_bound: false,
            capped: false,
        }
    }
}

fn normal_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn log_isotropic_normal(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq / (sigma * sigma) - x.len() as f64 * (sigma.ln() + HALF_LN_2PI)
}

impl TaskFamily {
    pub fn covariate_shift(mu0: Vec<f64>, sigma0: f64, mu1: Vec<f64>, sigma1: f64, noise_sigma: f64, teacher: Teacher, rng_seed: u64) -> Result<Self> {
        let t = Self {
            kind: TaskKind::GaussianCovariateShift { mu0, sigma0, mu1, sigma1, noise_sigma, teacher },
            rng_seed,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn nuisance(sigma0: f64, sigma1: f64, teacher: Teacher, rng_seed: u64) -> Result<Self> {
        let t = Self {
            kind: TaskKind::GaussianNuisance { sigma0, sigma1, teacher },
            rng_seed,
        };
        t.validate()?;
        Ok(t)
    }

    /// Class means uniform on a sphere of `radius` in `dim` dimensions,
    /// with a random disjoint meta-split.
    pub fn cluster(n_classes_total: usize, n_pretrain: usize, n_downstream: usize, dim: usize, radius: f64, class_sigma: f64, rng_seed: u64) -> Result<Self> {
        let mut rng = rng_from(rng_seed, &[stream::TASK]);
        let class_means = (0..n_classes_total)
            .map(|_| {
                let v = normal_vec(&mut rng, dim);
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|a| radius * a / norm).collect()
            })
            .collect();
        let split = MetaSplit::random(n_classes_total, n_pretrain, n_downstream, rng_seed)?;
        let t = Self {
            kind: TaskKind::ClusterClassification { class_means, class_sigma, split },
            rng_seed,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            TaskKind::GaussianCovariateShift { mu0, sigma0, mu1, sigma1, noise_sigma, teacher } => {
                if !(*sigma0 > 0.0 && *sigma1 > 0.0 && *noise_sigma > 0.0) {
                    return Err(Error::invalid("standard deviations must be positive"));
                }
                if mu0.len() != teacher.spec.input_dim || mu1.len() != teacher.spec.input_dim {
                    return Err(Error::invalid("covariate means must match the teacher input dimension"));
                }
            }
            TaskKind::GaussianNuisance { sigma0, sigma1, .. } => {
                if !(*sigma0 > 0.0 && *sigma1 > 0.0) {
                    return Err(Error::invalid("standard deviations must be positive"));
                }
            }
            TaskKind::ClusterClassification { class_means, class_sigma, split } => {
                if !(*class_sigma > 0.0) {
                    return Err(Error::invalid("class_sigma must be positive"));
                }
                if class_means.len() != split.n_classes_total {
                    return Err(Error::invalid("one mean per class required"));
                }
                let d = class_means.first().map_or(0, Vec::len);
                if d == 0 || class_means.iter().any(|m| m.len() != d) {
                    return Err(Error::invalid("class means must share a positive dimension"));
                }
                split.validate()?;
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            TaskKind::GaussianCovariateShift { teacher, .. } | TaskKind::GaussianNuisance { teacher, .. } => teacher.spec.input_dim,
            TaskKind::ClusterClassification { class_means, .. } => class_means[0].len(),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.kind, TaskKind::ClusterClassification { .. })
    }

    /// Number of labels on `side` (1 for regression tasks).
    pub fn n_labels(&self, side: Side) -> usize {
        match &self.kind {
            TaskKind::ClusterClassification { split, .. } => split.ids(side).len(),
            _ => 1,
        }
    }

    pub fn split(&self) -> Option<&MetaSplit> {
        match &self.kind {
            TaskKind::ClusterClassification { split, .. } => Some(split),
            _ => None,
        }
    }

    fn sample_x<R: Rng>(&self, side: Side, rng: &mut R) -> Vec<f64> {
        match &self.kind {
            TaskKind::GaussianCovariateShift { mu0, sigma0, mu1, sigma1, .. } => {
                let (mu, s) = match side {
                    Side::Pretrain => (mu0, *sigma0),
                    Side::Downstream => (mu1, *sigma1),
                };
                normal_vec(rng, mu.len()).iter().zip(mu).map(|(z, m)| m + s * z).collect()
            }
            TaskKind::GaussianNuisance { teacher, .. } => normal_vec(rng, teacher.spec.input_dim),
            TaskKind::ClusterClassification { .. } => unreachable!("cluster inputs are drawn per class"),
        }
    }

    /// Inputs of one class (global id) of a cluster task.
    pub fn sample_class_inputs<R: Rng>(&self, class_id: usize, count: usize, rng: &mut R) -> Result<Vec<f64>> {
        let TaskKind::ClusterClassification { class_means, class_sigma, .. } = &self.kind else {
            return Err(Error::Unsupported("class-conditional sampling needs a cluster task".into()));
        };
        let mu = class_means.get(class_id).ok_or_else(|| Error::invalid("class id out of range"))?;
        let mut out = Vec::with_capacity(count * mu.len());
        for _ in 0..count {
            out.extend(normal_vec(rng, mu.len()).iter().zip(mu).map(|(z, m)| m + class_sigma * z));
        }
        Ok(out)
    }

    /// `count` i.i.d. draws from `rⁱ(x, y)`, reproducible from `seed`.
    pub fn sample(&self, side: Side, count: usize, seed: u64) -> Result<LabeledDataset> {
        if count == 0 {
            return Err(Error::invalid("count must be at least 1"));
        }
        let mut rng = rng_from(self.rng_seed, &[stream::SAMPLE, side.index(), seed]);
        self.sample_with(side, count, &mut rng)
    }

    pub(crate) fn sample_with(&self, side: Side, count: usize, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
        let d = self.input_dim();
        let mut inputs = Vec::with_capacity(count * d);
        match &self.kind {
            TaskKind::ClusterClassification { class_means, class_sigma, split } => {
                let ids = split.ids(side);
                let mut labels = Vec::with_capacity(count);
                for _ in 0..count {
                    let label = rng.random_range(0..ids.len());
                    let mu = &class_means[ids[label]];
                    inputs.extend(normal_vec(rng, d).iter().zip(mu).map(|(z, m)| m + class_sigma * z));
                    labels.push(label);
                }
                Ok(LabeledDataset::new(d, inputs, Targets::Classes(labels), side)?.with_class_ids(ids.to_vec()))
            }
            _ => {
                let mut ys = Vec::with_capacity(count);
                for _ in 0..count {
                    let x = self.sample_x(side, rng);
                    let Conditional::Gaussian { mean, sigma } = self.conditional(side, &x) else { unreachable!() };
                    ys.push(mean + sigma * rng.sample::<f64, _>(StandardNormal));
                    inputs.extend(x);
                }
                LabeledDataset::new(d, inputs, Targets::Real(ys), side)
            }
        }
    }

    /// `rⁱ(y | x)`.
    pub fn conditional(&self, side: Side, x: &[f64]) -> Conditional {
        match &self.kind {
            TaskKind::GaussianCovariateShift { noise_sigma, teacher, .. } => Conditional::Gaussian {
                mean: teacher.mean(x),
                sigma: *noise_sigma,
            },
            TaskKind::GaussianNuisance { sigma0, sigma1, teacher } => Conditional::Gaussian {
                mean: teacher.mean(x),
                sigma: match side {
                    Side::Pretrain => *sigma0,
                    Side::Downstream => *sigma1,
                },
            },
            TaskKind::ClusterClassification { class_means, class_sigma, split } => {
                let logits: Vec<f64> = split
                    .ids(side)
                    .iter()
                    .map(|&c| {
                        let sq: f64 = x.iter().zip(&class_means[c]).map(|(a, b)| (a - b) * (a - b)).sum();
                        -0.5 * sq / (class_sigma * class_sigma)
                    })
                    .collect();
                let lse = log_sum_exp(&logits);
                Conditional::Categorical(logits.iter().map(|l| (l - lse).exp()).collect())
            }
        }
    }

    /// `log rⁱ(x, y)`; `-inf` outside the support.
    pub fn log_joint(&self, side: Side, x: &[f64], y: TargetRef<'_>) -> f64 {
        match &self.kind {
            TaskKind::GaussianCovariateShift { mu0, sigma0, mu1, sigma1, .. } => {
                let (mu, s) = match side {
                    Side::Pretrain => (mu0, *sigma0),
                    Side::Downstream => (mu1, *sigma1),
                };
                log_isotropic_normal(x, mu, s) + self.conditional(side, x).log_prob(y)
            }
            TaskKind::GaussianNuisance { .. } => {
                log_isotropic_normal(x, &vec![0.0; x.len()], 1.0) + self.conditional(side, x).log_prob(y)
            }
            TaskKind::ClusterClassification { class_means, class_sigma, split } => {
                let ids = split.ids(side);
                match y {
                    TargetRef::Class(c) if c < ids.len() => {
                        -(ids.len() as f64).ln() + log_isotropic_normal(x, &class_means[ids[c]], *class_sigma)
                    }
                    _ => f64::NEG_INFINITY,
                }
            }
        }
    }

    /// Gauss–Hermite rule for `E_{rⁱ(x)}` when the input law is Gaussian
    /// and at most three-dimensional.
    pub fn x_quadrature(&self, side: Side) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
        let d = self.input_dim();
        let per_dim = match d {
            1 => 64,
            2 => 32,
            3 => 16,
            _ => return None,
        };
        match &self.kind {
            TaskKind::GaussianCovariateShift { mu0, sigma0, mu1, sigma1, .. } => Some(match side {
                Side::Pretrain => isotropic_normal_rule(mu0, *sigma0, per_dim),
                Side::Downstream => isotropic_normal_rule(mu1, *sigma1, per_dim),
            }),
            TaskKind::GaussianNuisance { .. } => Some(isotropic_normal_rule(&vec![0.0; d], 1.0, per_dim)),
            TaskKind::ClusterClassification { .. } => None,
        }
    }
}

/// Closed-form `M` and `D` for the analytic Gaussian families.
pub fn shift_constants(task: &TaskFamily) -> Result<ShiftConstants> {
    match &task.kind {
        TaskKind::GaussianCovariateShift { mu0, sigma0, mu1, sigma1, .. } => {
            let sq: f64 = mu0.iter().zip(mu1).map(|(a, b)| (a - b) * (a - b)).sum();
            let d = mu0.len() as i32;
            let m = if sigma0 > sigma1 {
                (sigma0 / sigma1).powi(d) * (sq / (2.0 * (sigma0 * sigma0 - sigma1 * sigma1))).exp()
            } else if sigma0 == sigma1 && sq == 0.0 {
                1.0
            } else {
                f64::INFINITY
            };
            Ok(ShiftConstants::exact(m, 0.0))
        }
        TaskKind::GaussianNuisance { sigma0, sigma1, .. } => {
            let m = if sigma0 >= sigma1 { sigma0 / sigma1 } else { f64::INFINITY };
            let d = (sigma0 / sigma1).ln() + sigma1 * sigma1 / (2.0 * sigma0 * sigma0) - 0.5;
            Ok(ShiftConstants::exact(m, d))
        }
        TaskKind::ClusterClassification { .. } => Err(Error::Unsupported(
            "no closed-form shift constants for cluster tasks; use mc_shift_constants".into(),
        )),
    }
}

/// Monte-Carlo surrogate: `M` as the largest density ratio seen on draws
/// from `r⁰` (plus a support check on draws from `r¹`), `D` as a sample
/// mean over `r¹`. Ratios above `cap` are reported as `M = +∞`.
pub fn mc_shift_constants(task: &TaskFamily, samples: usize, seed: u64, cap: f64) -> Result<ShiftConstants> {
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::numeric::derive_seed(task.rng_seed, &[stream::EVAL, seed]));
    let pre = task.sample_with(Side::Pretrain, samples, &mut rng)?;
    let down = task.sample_with(Side::Downstream, samples, &mut rng)?;

    let half = samples / 2;
    let mut max_first = 0.0f64;
    let mut max_second = 0.0f64;
    for i in 0..pre.len() {
        let (x, y) = (pre.x(i), pre.target(i));
        let ratio = (task.log_joint(Side::Downstream, x, y) - task.log_joint(Side::Pretrain, x, y)).exp();
        if i < half {
            max_first = max_first.max(ratio);
        } else {
            max_second = max_second.max(ratio);
        }
    }
    let mut outside_support = false;
    let mut log_ratios = Vec::with_capacity(down.len());
    for i in 0..down.len() {
        let (x, y) = (down.x(i), down.target(i));
        if task.log_joint(Side::Pretrain, x, y) == f64::NEG_INFINITY {
            outside_support = true;
        }
        let r1 = task.conditional(Side::Downstream, x).log_prob(y);
        let r0 = task.conditional(Side::Pretrain, x).log_prob(y);
        log_ratios.push(r1 - r0);
    }
    let m_raw = max_first.max(max_second);
    let capped = outside_support || m_raw > cap;
    Ok(ShiftConstants {
        m: if capped { f64::INFINITY } else { m_raw },
        d: mean(&log_ratios),
        m_std_error: Some(0.5 * (max_first - max_second).abs()),
        d_std_error: Some(std_error(&log_ratios)),
        m_is_lower_bound: true,
        capped,
    })
}

//! Small numeric helpers shared across modules: deterministic summation,
//! log-sum-exp, sample statistics and seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Arrays longer than this are summed pairwise; shorter ones in index order.
pub const PAIRWISE_THRESHOLD: usize = 4096;

/// Sum in a fixed order: sequential for short slices, pairwise above
/// [`PAIRWISE_THRESHOLD`].
pub fn stable_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_THRESHOLD {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        stable_sum(&xs[..mid]) + stable_sum(&xs[mid..])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    stable_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance (n - 1 denominator). Zero for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    stable_sum(&ss) / (xs.len() - 1) as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    (sample_variance(xs) / xs.len() as f64).sqrt()
}

/// Batch-means standard error for a single correlated series.
pub fn batch_means_std_error(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches.max(1);
    if size == 0 || batches < 2 {
        return 0.0;
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| mean(&xs[b * size..(b + 1) * size]))
        .collect();
    std_error(&means)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// log of the arithmetic mean of `exp(xs)`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a sequence of stream labels.
pub fn derive_seed(parent: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(parent), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn rng_from(parent: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, labels))
}

/// Stream labels used with [`derive_seed`].
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SGLD: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const HEAD: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const FEWSHOT: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const TASK: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_sequential_on_exact_values() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i % 7) as f64).collect();
        let seq: f64 = xs.iter().sum();
        assert_eq!(stable_sum(&xs), seq);
    }

    #[test]
    fn log_mean_exp_of_constant() {
        assert!((log_mean_exp(&[2.0, 2.0, 2.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(7, &[1]), derive_seed(7, &[2]));
        assert_eq!(derive_seed(7, &[1, 3]), derive_seed(7, &[1, 3]));
    }

    #[test]
    fn sample_statistics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((sample_variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
    }
}

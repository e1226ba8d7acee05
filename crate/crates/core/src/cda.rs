//! Correlation distribution alignment: sample cost-volume entries, bin them
//! into a Laplace-smoothed histogram, and compare domains with KL.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost_volume::CostVolume;
use crate::error::{ensure, Error, Result};
use crate::tensor::{Graph, Var};

pub const DEFAULT_N: usize = 1000;
pub const DEFAULT_K_CDA: usize = 10;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdaConfig {
    pub n_samples: usize,
    pub k_cda: usize,
    /// `k_cda - 1` ascending interior bin edges in `(0, 1)`.
    pub thresholds: Vec<f64>,
    pub seed: u64,
    /// Softmax temperature of the differentiable binning.
    pub temperature: f64,
}

impl Default for CdaConfig {
    fn default() -> Self {
        Self::linear(DEFAULT_N, DEFAULT_K_CDA, 0)
    }
}

impl CdaConfig {
    /// Thresholds `i / k` for `i = 1..k`.
    pub fn linear(n_samples: usize, k_cda: usize, seed: u64) -> Self {
        Self {
            n_samples,
            k_cda,
            thresholds: (1..k_cda).map(|i| i as f64 / k_cda as f64).collect(),
            seed,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            self.k_cda >= 2 && self.thresholds.len() == self.k_cda - 1,
            || {
                Error::InvalidArgument(format!(
                    "{} thresholds for {} classes",
                    self.thresholds.len(),
                    self.k_cda
                ))
            },
        )?;
        ensure(
            self.thresholds.windows(2).all(|w| w[0] < w[1])
                && self.thresholds.iter().all(|t| *t > 0.0 && *t < 1.0),
            || Error::InvalidArgument("thresholds must ascend strictly inside (0, 1)".into()),
        )?;
        ensure(self.n_samples >= self.k_cda, || {
            Error::InvalidArgument(format!(
                "N = {} is below k = {}",
                self.n_samples, self.k_cda
            ))
        })?;
        ensure(self.temperature > 0.0, || {
            Error::InvalidArgument("temperature must be positive".into())
        })
    }

    /// Bin centres used by the soft assignment.
    pub fn centers(&self) -> Vec<f64> {
        let mut edges = vec![0.0];
        edges.extend_from_slice(&self.thresholds);
        edges.push(1.0);
        edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn bin_of(&self, v: f64) -> usize {
        self.thresholds.partition_point(|t| *t <= v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationDistribution {
    pub probs: Vec<f64>,
}

impl CorrelationDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        ensure(
            !probs.is_empty() && probs.iter().all(|p| p.is_finite() && *p > 0.0),
            || Error::InvalidArgument("probabilities must be positive and finite".into()),
        )?;
        let s: f64 = probs.iter().sum();
        ensure((s - 1.0).abs() <= 1e-9, || {
            Error::InvalidArgument(format!("probabilities sum to {s}"))
        })?;
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Flat slot indices drawn uniformly without replacement.
pub fn sample_indices(num_slots: usize, cfg: &CdaConfig) -> Result<Vec<usize>> {
    ensure(num_slots >= cfg.n_samples, || {
        Error::TooSmall(format!(
            "cost volume has {num_slots} slots, {} samples requested",
            cfg.n_samples
        ))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(index::sample(&mut rng, num_slots, cfg.n_samples).into_vec())
}

pub fn sample_correlations(cv: &CostVolume, cfg: &CdaConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let data = cv.scores.data();
    Ok(sample_indices(data.len(), cfg)?
        .into_iter()
        .map(|i| data[i])
        .collect())
}

pub fn histogram_counts(samples: &[f64], cfg: &CdaConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut counts = vec![0usize; cfg.k_cda];
    for &s in samples {
        ensure((0.0..=1.0).contains(&s), || {
            Error::InvalidArgument(format!("correlation sample {s} outside [0, 1]"))
        })?;
        counts[cfg.bin_of(s)] += 1;
    }
    Ok(counts)
}

/// `p_i = (n_i + 1) / (N + k)`.
pub fn histogram(samples: &[f64], cfg: &CdaConfig) -> Result<CorrelationDistribution> {
    let counts = histogram_counts(samples, cfg)?;
    let denom = (samples.len() + cfg.k_cda) as f64;
    Ok(CorrelationDistribution {
        probs: counts.iter().map(|&n| (n + 1) as f64 / denom).collect(),
    })
}

/// Sample, then histogram with hard bins.
pub fn distribution(cv: &CostVolume, cfg: &CdaConfig) -> Result<CorrelationDistribution> {
    histogram(&sample_correlations(cv, cfg)?, cfg)
}

/// `sum_i p_r,i ln(p_r,i / p_s,i)`.
pub fn kl_loss(p_r: &CorrelationDistribution, p_s: &CorrelationDistribution) -> Result<f64> {
    ensure(p_r.len() == p_s.len(), || {
        Error::ExtentMismatch(format!("{} vs {} classes", p_r.len(), p_s.len()))
    })?;
    Ok(p_r
        .probs
        .iter()
        .zip(&p_s.probs)
        .map(|(r, s)| r * (r / s).ln())
        .sum())
}

/// Soft-binned distribution of the entries of a normalized cost volume
/// node at the slots `picks`.
pub fn soft_distribution_var(g: &mut Graph, cv: Var, picks: Vec<usize>, cfg: &CdaConfig) -> Var {
    g.soft_histogram(cv, picks, cfg.centers(), cfg.temperature)
}

/// KL between two `1x1xk` distribution nodes.
pub fn kl_var(g: &mut Graph, p_r: Var, p_s: Var) -> Var {
    let lr = g.ln(p_r);
    let ls = g.ln(p_s);
    let d = g.sub(lr, ls);
    let t = g.mul(p_r, d);
    g.sum(t)
}

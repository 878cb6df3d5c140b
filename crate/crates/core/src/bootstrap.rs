//! Nonparametric bootstrap variance and normal-approximation intervals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{KdpeError, Result};
use crate::observation::Observation;
use crate::simulation::{domain, stream_rng};

/// Resampling attempts per replication after the first failure.
pub const MAX_RETRIES: usize = 3;
/// Largest tolerated share of replications with no usable estimate.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantile {
    /// `z = Phi^-1(1 - alpha / 2)`, the usual two-sided interval.
    TwoSided,
    /// `z = Phi^-1(1 - alpha)`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub m: usize,
    pub alpha_level: f64,
    pub dedupe: bool,
    pub quantile: Quantile,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            m: 100,
            alpha_level: 0.05,
            dedupe: true,
            quantile: Quantile::TwoSided,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(KdpeError::InvalidInput(format!("bootstrap m must be >= 2, got {}", self.m)));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return Err(KdpeError::InvalidInput(format!(
                "alpha_level must lie in (0, 1), got {}",
                self.alpha_level
            )));
        }
        Ok(())
    }

    pub fn z(&self) -> f64 {
        let p = match self.quantile {
            Quantile::TwoSided => 1.0 - self.alpha_level / 2.0,
            Quantile::Literal => 1.0 - self.alpha_level,
        };
        Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimate: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
    /// Replications that produced an estimate.
    pub replicates: usize,
    /// Replications recorded as missing after all retries.
    pub failed: usize,
}

impl BootstrapResult {
    pub fn covers(&self, truth: f64) -> bool {
        self.lower <= truth && truth <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Row indices of one resample; sorted and unique when deduplicating.
pub fn resample_indices(n: usize, seed: u64, stream: u64, dedupe: bool) -> Vec<usize> {
    let mut rng = stream_rng(seed, domain::BOOTSTRAP, stream);
    let mut idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    if dedupe {
        idx.sort_unstable();
        idx.dedup();
    }
    idx
}

/// Bootstrap of an estimator returning one value per target.
///
/// A failed replication is redrawn up to [`MAX_RETRIES`] times and then
/// recorded as missing.
pub fn bootstrap_multi<F>(
    data: &[Observation],
    estimator: F,
    cfg: &BootstrapConfig,
    seed: u64,
) -> Result<Vec<BootstrapResult>>
where
    F: Fn(&[Observation]) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    let point = estimator(data)?;
    let k = point.len();
    let draws: Vec<Option<Vec<f64>>> = (0..cfg.m)
        .into_par_iter()
        .map(|j| {
            for attempt in 0..=MAX_RETRIES {
                let stream = (j * (MAX_RETRIES + 1) + attempt) as u64;
                let idx = resample_indices(data.len(), seed, stream, cfg.dedupe);
                let sample: Vec<Observation> = idx.iter().map(|&i| data[i]).collect();
                match estimator(&sample) {
                    Ok(v) if v.len() == k && v.iter().all(|x| x.is_finite()) => return Some(v),
                    Ok(_) => log::debug!("bootstrap {j}/{attempt}: non-finite estimate"),
                    Err(e) => log::debug!("bootstrap {j}/{attempt}: {e}"),
                }
            }
            None
        })
        .collect();
    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    let failed = cfg.m - ok.len();
    if failed as f64 > MAX_FAILURE_SHARE * cfg.m as f64 || ok.len() < 2 {
        return Err(KdpeError::BootstrapFailure {
            failed,
            total: cfg.m,
        });
    }
    let z = cfg.z();
    Ok((0..k)
        .map(|t| {
            let vals: Vec<f64> = ok.iter().map(|v| v[t]).collect();
            let variance = sample_variance(&vals);
            let half = z * variance.sqrt();
            BootstrapResult {
                estimate: point[t],
                variance,
                lower: point[t] - half,
                upper: point[t] + half,
                replicates: ok.len(),
                failed,
            }
        })
        .collect())
}

/// Unbiased sample variance, shifted by the first value so constant input
/// gives exactly zero.
fn sample_variance(vals: &[f64]) -> f64 {
    let k = vals.len() as f64;
    let shift = vals[0];
    let d: Vec<f64> = vals.iter().map(|v| v - shift).collect();
    let mean = d.iter().sum::<f64>() / k;
    (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).max(0.0)
}

/// Single-valued bootstrap.
pub fn bootstrap_ci<F>(
    data: &[Observation],
    estimator: F,
    cfg: &BootstrapConfig,
    seed: u64,
) -> Result<BootstrapResult>
where
    F: Fn(&[Observation]) -> Result<f64> + Sync,
{
    let wrapped = |d: &[Observation]| estimator(d).map(|v| vec![v]);
    Ok(bootstrap_multi(data, wrapped, cfg, seed)?[0])
}

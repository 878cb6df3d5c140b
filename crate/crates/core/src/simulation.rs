//! Data-generating processes, true parameter values and efficiency bounds.
//!
//! Randomness comes from ChaCha8 streams keyed by `(seed, domain)` with the
//! replication index as the stream id, so any replication can be produced
//! independently of the others and parallel runs match serial ones.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{KdpeError, Result};
use crate::functionals::TargetParameter;
use crate::observation::{Observation, Schema};
use crate::quadrature::adaptive_simpson;

/// Stream domains; each consumer of randomness gets its own key.
pub mod domain {
    pub const DATA: u64 = 1;
    pub const BOOTSTRAP: u64 = 2;
    pub const TRUTH: u64 = 3;
    pub const BOUND: u64 = 4;
}

/// Monte Carlo draws for DGP2 truths and efficiency bounds.
pub const MC_DRAWS: usize = 10_000_000;
const TRUTH_SEED: u64 = 0x6b64_7065_7472_7574;

pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Child seed for replication `index` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub kind: Schema,
    pub n: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(kind: Schema, n: usize, seed: u64) -> Result<Self> {
        let spec = DgpSpec { kind, n, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(KdpeError::InvalidInput(format!("n must be at least 2, got {}", self.n)));
        }
        Ok(())
    }
}

pub fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn std_normal_cdf(v: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").cdf(v)
}

/// True conditional laws of the point-treatment study.
pub mod dgp1 {
    use std::f64::consts::PI;

    pub fn propensity(x: f64) -> f64 {
        0.5 + (50.0 * x / PI).sin() / 3.0
    }

    pub fn outcome(a: u8, x: f64) -> f64 {
        0.4 + f64::from(a) * (x - 0.3).powi(2) + 0.25 * (40.0 * x / PI).sin()
    }
}

/// True conditional laws of the longitudinal study.
pub mod dgp2 {
    use super::{expit, std_normal_cdf};

    pub const X_MAX: f64 = 8.0;

    pub fn propensity0(_x: f64) -> f64 {
        0.5
    }

    /// `P(L1 = 1 | a0, x)` with `L1 = 1[3 + a0 - 0.75 x + e1 > 0]`.
    pub fn intermediate(a0: u8, x: f64) -> f64 {
        std_normal_cdf(3.0 + f64::from(a0) - 0.75 * x)
    }

    /// `A1` is a deterministic threshold of `(x, l1)`.
    pub fn treatment1(l1: u8, x: f64) -> u8 {
        u8::from(expit(-3.0 + 0.5 * x + 0.4 * f64::from(l1)) >= 0.3)
    }

    fn outcome_index(a0: u8, l1: u8, a1: u8, x: f64) -> f64 {
        x - 3.5 - 0.3 * f64::from(a0) - 0.5 * f64::from(l1) - 0.5 * f64::from(a1)
    }

    /// `P(Y = 1 | a1, l1, a0, x)` with `Y = 1[expit(index + e2) >= 0.5]`.
    pub fn outcome(a0: u8, l1: u8, a1: u8, x: f64) -> f64 {
        std_normal_cdf(outcome_index(a0, l1, a1, x))
    }

    pub(crate) fn draw_y(a0: u8, l1: u8, a1: u8, x: f64, e2: f64) -> u8 {
        u8::from(expit(outcome_index(a0, l1, a1, x) + e2) >= 0.5)
    }

    pub(crate) fn draw_l1(a0: u8, x: f64, e1: f64) -> u8 {
        u8::from(3.0 + f64::from(a0) - 0.75 * x + e1 > 0.0)
    }
}

fn draw_dgp1(rng: &mut ChaCha8Rng) -> Observation {
    let x: f64 = rng.gen();
    let a = u8::from(rng.gen::<f64>() < dgp1::propensity(x));
    let y = u8::from(rng.gen::<f64>() < dgp1::outcome(a, x));
    Observation::dgp1(x, a, y)
}

fn draw_dgp2(rng: &mut ChaCha8Rng) -> Observation {
    let x = dgp2::X_MAX * rng.gen::<f64>();
    let a0 = u8::from(rng.gen::<f64>() < dgp2::propensity0(x));
    let e1: f64 = rng.sample(StandardNormal);
    let l1 = dgp2::draw_l1(a0, x, e1);
    let a1 = dgp2::treatment1(l1, x);
    let e2: f64 = rng.sample(StandardNormal);
    let y = dgp2::draw_y(a0, l1, a1, x, e2);
    Observation::dgp2(x, a0, l1, a1, y)
}

/// Draws `spec.n` i.i.d. observations (replication 0).
pub fn generate(spec: &DgpSpec) -> Result<Vec<Observation>> {
    generate_replication(spec, 0)
}

/// Draws the dataset of replication `index`.
pub fn generate_replication(spec: &DgpSpec, index: u64) -> Result<Vec<Observation>> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, domain::DATA, index);
    let draw = match spec.kind {
        Schema::Dgp1 => draw_dgp1,
        Schema::Dgp2 => draw_dgp2,
    };
    Ok((0..spec.n).map(|_| draw(&mut rng)).collect())
}

/// Mean potential outcomes of a DGP with an optional Monte Carlo error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueParameters {
    pub mu1: f64,
    pub mu0: f64,
    /// Standard errors of `(mu1, mu0)` when computed by Monte Carlo.
    pub std_errors: Option<(f64, f64)>,
}

impl TrueParameters {
    pub fn value(&self, t: TargetParameter) -> f64 {
        t.combine(self.mu1, self.mu0)
    }
}

fn dgp1_truth() -> TrueParameters {
    let mu = |a: u8| adaptive_simpson(&|x| dgp1::outcome(a, x), 0.0, 1.0, 1e-14);
    TrueParameters {
        mu1: mu(1),
        mu0: mu(0),
        std_errors: None,
    }
}

/// g-computation under the clamped interventions `a0 = a1 = a`, using
/// common random numbers for both arms.
pub fn dgp2_truth_mc(draws: usize, seed: u64) -> TrueParameters {
    let mut rng = stream_rng(seed, domain::TRUTH, 0);
    let mut sums = [0.0f64; 2];
    for _ in 0..draws {
        let x = dgp2::X_MAX * rng.gen::<f64>();
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        for a in 0..2u8 {
            let l1 = dgp2::draw_l1(a, x, e1);
            sums[a as usize] += f64::from(dgp2::draw_y(a, l1, a, x, e2));
        }
    }
    let n = draws as f64;
    let (mu0, mu1) = (sums[0] / n, sums[1] / n);
    let se = |p: f64| (p * (1.0 - p) / n).sqrt();
    TrueParameters {
        mu1,
        mu0,
        std_errors: Some((se(mu1), se(mu0))),
    }
}

/// True parameters: quadrature for DGP1, cached Monte Carlo for DGP2.
pub fn true_parameters(kind: Schema) -> TrueParameters {
    static DGP2: OnceLock<TrueParameters> = OnceLock::new();
    match kind {
        Schema::Dgp1 => dgp1_truth(),
        Schema::Dgp2 => *DGP2.get_or_init(|| dgp2_truth_mc(MC_DRAWS, TRUTH_SEED)),
    }
}

/// A point-treatment law `X ~ U[0,1]`, `A|X ~ Bern(g)`, `Y|A,X ~ Bern(Q)`.
#[derive(Clone, Copy)]
pub struct PointTreatmentLaw {
    pub propensity: fn(f64) -> f64,
    pub outcome: fn(u8, f64) -> f64,
}

pub const DGP1_LAW: PointTreatmentLaw = PointTreatmentLaw {
    propensity: dgp1::propensity,
    outcome: dgp1::outcome,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte Carlo `E[phi^2]` of the efficient influence function of `t`.
pub fn efficiency_bound_for(
    law: &PointTreatmentLaw,
    t: TargetParameter,
    draws: usize,
    seed: u64,
) -> McEstimate {
    let mu = |a: u8| adaptive_simpson(&|x| (law.outcome)(a, x), 0.0, 1.0, 1e-14);
    let (mu1, mu0) = (mu(1), mu(0));
    let (w1, w0) = t.delta_weights(mu1, mu0);
    let mut rng = stream_rng(seed, domain::BOUND, 0);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let x: f64 = rng.gen();
        let g = (law.propensity)(x);
        let a = u8::from(rng.gen::<f64>() < g);
        let q_obs = (law.outcome)(a, x);
        let y = f64::from(u8::from(rng.gen::<f64>() < q_obs));
        let (q1, q0) = ((law.outcome)(1, x), (law.outcome)(0, x));
        let phi1 = if a == 1 { (y - q1) / g } else { 0.0 } + q1 - mu1;
        let phi0 = if a == 0 { (y - q0) / (1.0 - g) } else { 0.0 } + q0 - mu0;
        let phi = w1 * phi1 + w0 * phi0;
        let v = phi * phi;
        s += v;
        s2 += v * v;
    }
    let n = draws as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    McEstimate {
        mean,
        std_error: (var / n).sqrt(),
    }
}

/// `P*[phi^2]` under the true DGP (10^7 draws).
pub fn efficiency_bound(kind: Schema, t: TargetParameter) -> Result<McEstimate> {
    match kind {
        Schema::Dgp1 => Ok(efficiency_bound_for(&DGP1_LAW, t, MC_DRAWS, TRUTH_SEED)),
        Schema::Dgp2 => Err(KdpeError::Unsupported(
            "DGP2 assigns A1 deterministically, so the efficient influence function is unbounded"
                .into(),
        )),
    }
}

//! Initial model fits.
//!
//! The covariate marginal is always the empirical distribution. Each
//! conditional table is fit by a Gaussian Nadaraya-Watson smoother within
//! strata of its discrete parents, by a linear-logistic regression, or read
//! off the true DGP (diagnostics), and then clipped to `[clip, 1 - clip]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distribution::FiniteModel;
use crate::error::{KdpeError, Result};
use crate::observation::{dataset_schema, Observation, Schema};
use crate::simulation::{dgp1, dgp2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreEstimateMethod {
    NadarayaWatson,
    LogisticLinear,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Silverman,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreEstimateConfig {
    pub method: PreEstimateMethod,
    pub bandwidth_rule: BandwidthRule,
    pub clip: f64,
}

impl Default for PreEstimateConfig {
    fn default() -> Self {
        PreEstimateConfig {
            method: PreEstimateMethod::NadarayaWatson,
            bandwidth_rule: BandwidthRule::Silverman,
            clip: 0.01,
        }
    }
}

impl PreEstimateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(KdpeError::InvalidInput(format!(
                "clip must lie in (0, 0.5), got {}",
                self.clip
            )));
        }
        if let BandwidthRule::Fixed(h) = self.bandwidth_rule {
            if !(h > 0.0 && h.is_finite()) {
                return Err(KdpeError::InvalidInput(format!("fixed bandwidth must be > 0, got {h}")));
            }
        }
        Ok(())
    }
}

/// A fitted initial model plus notes on any fallbacks taken.
#[derive(Clone, Debug)]
pub struct PreEstimate {
    pub model: FiniteModel,
    pub diagnostics: Vec<String>,
}

/// `1.06 * sd(x) * n^(-1/5)`.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// One conditional table to fit: which observations form each parent
/// stratum, and the binary response.
struct TableSpec<'a> {
    name: &'static str,
    strata: usize,
    stratum_of: &'a dyn Fn(&Observation) -> usize,
    response: &'a dyn Fn(&Observation) -> u8,
}

fn bits(o: &Observation) -> (u8, u8, u8, u8) {
    match *o {
        Observation::Dgp1 { a, y, .. } => (a, 0, 0, y),
        Observation::Dgp2 { a0, l1, a1, y, .. } => (a0, l1, a1, y),
    }
}

fn nadaraya_watson(
    data: &[Observation],
    atoms: &[f64],
    h: f64,
    spec: &TableSpec,
    diagnostics: &mut Vec<String>,
) -> Vec<f64> {
    let marginal =
        data.iter().map(|o| f64::from((spec.response)(o))).sum::<f64>() / data.len() as f64;
    let mut out = vec![0.0; atoms.len() * spec.strata];
    for s in 0..spec.strata {
        let members: Vec<(f64, f64)> = data
            .iter()
            .filter(|o| (spec.stratum_of)(o) == s)
            .map(|o| (o.x(), f64::from((spec.response)(o))))
            .collect();
        if members.is_empty() {
            diagnostics.push(format!(
                "{}: stratum {s} is empty, using marginal rate {marginal:.4}",
                spec.name
            ));
            for i in 0..atoms.len() {
                out[i * spec.strata + s] = marginal;
            }
            continue;
        }
        let stratum_mean = members.iter().map(|m| m.1).sum::<f64>() / members.len() as f64;
        for (i, &x) in atoms.iter().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for &(xj, r) in &members {
                let u = (x - xj) / h;
                let w = (-0.5 * u * u).exp();
                num += w * r;
                den += w;
            }
            out[i * spec.strata + s] = if den > 0.0 { num / den } else { stratum_mean };
        }
    }
    out
}

/// Logistic regression by iteratively reweighted least squares.
fn logistic_fit(design: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let p = design.ncols();
    let mut beta = DVector::zeros(p);
    for _ in 0..50 {
        let eta = design * &beta;
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let w = mu.map(|m| (m * (1.0 - m)).max(1e-10));
        let mut xtwx = DMatrix::zeros(p, p);
        let mut grad = DVector::zeros(p);
        for i in 0..design.nrows() {
            let row = design.row(i);
            xtwx += row.transpose() * row * w[i];
            grad += row.transpose() * (y[i] - mu[i]);
        }
        for k in 0..p {
            xtwx[(k, k)] += 1e-8;
        }
        let Some(ch) = xtwx.cholesky() else { break };
        let step = ch.solve(&grad);
        beta += &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    beta
}

fn logistic_table(data: &[Observation], atoms: &[f64], spec: &TableSpec, schema: Schema) -> Vec<f64> {
    // features: intercept, x, then the parent bits decoded from the stratum
    let parent_bits = (spec.strata as f64).log2() as usize;
    let features = |x: f64, s: usize| -> Vec<f64> {
        let mut f = vec![1.0, x];
        f.extend((0..parent_bits).map(|d| ((s >> (parent_bits - 1 - d)) & 1) as f64));
        f
    };
    let _ = schema;
    let rows: Vec<Vec<f64>> = data.iter().map(|o| features(o.x(), (spec.stratum_of)(o))).collect();
    let design = DMatrix::from_fn(rows.len(), 2 + parent_bits, |i, j| rows[i][j]);
    let y = DVector::from_iterator(data.len(), data.iter().map(|o| f64::from((spec.response)(o))));
    let beta = logistic_fit(&design, &y);
    let mut out = vec![0.0; atoms.len() * spec.strata];
    for (i, &x) in atoms.iter().enumerate() {
        for s in 0..spec.strata {
            let eta: f64 = features(x, s).iter().zip(beta.iter()).map(|(f, b)| f * b).sum();
            out[i * spec.strata + s] = 1.0 / (1.0 + (-eta).exp());
        }
    }
    out
}

fn oracle_tables(schema: Schema, atoms: &[f64]) -> [Vec<f64>; 4] {
    match schema {
        Schema::Dgp1 => {
            let g0 = atoms.iter().map(|&x| dgp1::propensity(x)).collect();
            let q_y = atoms
                .iter()
                .flat_map(|&x| [dgp1::outcome(0, x), dgp1::outcome(1, x)])
                .collect();
            [g0, Vec::new(), Vec::new(), q_y]
        }
        Schema::Dgp2 => {
            let mut g0 = Vec::new();
            let mut q_l1 = Vec::new();
            let mut g1 = Vec::new();
            let mut q_y = Vec::new();
            for &x in atoms {
                g0.push(dgp2::propensity0(x));
                for a0 in 0..2u8 {
                    q_l1.push(dgp2::intermediate(a0, x));
                    for l1 in 0..2u8 {
                        g1.push(f64::from(dgp2::treatment1(l1, x)));
                        for a1 in 0..2u8 {
                            q_y.push(dgp2::outcome(a0, l1, a1, x));
                        }
                    }
                }
            }
            [g0, q_l1, g1, q_y]
        }
    }
}

/// Fits the initial model `P_n^0`.
pub fn fit_pre_estimate(data: &[Observation], cfg: &PreEstimateConfig) -> Result<FiniteModel> {
    fit_pre_estimate_with_diagnostics(data, cfg).map(|p| p.model)
}

pub fn fit_pre_estimate_with_diagnostics(
    data: &[Observation],
    cfg: &PreEstimateConfig,
) -> Result<PreEstimate> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(KdpeError::InvalidInput("pre-estimation needs n >= 2".into()));
    }
    let schema = dataset_schema(data)?;
    let atoms: Vec<f64> = data.iter().map(Observation::x).collect();
    let mut diagnostics = Vec::new();

    let none = |_: &Observation| 0usize;
    let by_a0 = |o: &Observation| bits(o).0 as usize;
    let by_l1_a0 = |o: &Observation| {
        let (a0, l1, _, _) = bits(o);
        ((a0 << 1) | l1) as usize
    };
    let by_a1_l1_a0 = |o: &Observation| {
        let (a0, l1, a1, _) = bits(o);
        ((a0 << 2) | (l1 << 1) | a1) as usize
    };
    let resp_a0 = |o: &Observation| bits(o).0;
    let resp_l1 = |o: &Observation| bits(o).1;
    let resp_a1 = |o: &Observation| bits(o).2;
    let resp_y = |o: &Observation| bits(o).3;

    let specs: Vec<TableSpec> = match schema {
        Schema::Dgp1 => vec![
            TableSpec { name: "g0", strata: 1, stratum_of: &none, response: &resp_a0 },
            TableSpec { name: "q_y", strata: 2, stratum_of: &by_a0, response: &resp_y },
        ],
        Schema::Dgp2 => vec![
            TableSpec { name: "g0", strata: 1, stratum_of: &none, response: &resp_a0 },
            TableSpec { name: "q_l1", strata: 2, stratum_of: &by_a0, response: &resp_l1 },
            TableSpec { name: "g1", strata: 4, stratum_of: &by_l1_a0, response: &resp_a1 },
            TableSpec { name: "q_y", strata: 8, stratum_of: &by_a1_l1_a0, response: &resp_y },
        ],
    };

    let mut tables: Vec<Vec<f64>> = match cfg.method {
        PreEstimateMethod::NadarayaWatson => {
            let mut h = match cfg.bandwidth_rule {
                BandwidthRule::Silverman => silverman_bandwidth(&atoms),
                BandwidthRule::Fixed(h) => h,
            };
            if !(h > 0.0 && h.is_finite()) {
                // all covariates identical: every weight is equal anyway
                h = 1.0;
            }
            specs
                .iter()
                .map(|s| nadaraya_watson(data, &atoms, h, s, &mut diagnostics))
                .collect()
        }
        PreEstimateMethod::LogisticLinear => specs
            .iter()
            .map(|s| logistic_table(data, &atoms, s, schema))
            .collect(),
        PreEstimateMethod::Oracle => {
            let [g0, q_l1, g1, q_y] = oracle_tables(schema, &atoms);
            match schema {
                Schema::Dgp1 => vec![g0, q_y],
                Schema::Dgp2 => vec![g0, q_l1, g1, q_y],
            }
        }
    };

    let clip = cfg.clip;
    for t in tables.iter_mut() {
        t.iter_mut().for_each(|v| *v = v.clamp(clip, 1.0 - clip));
    }
    let model = match schema {
        Schema::Dgp1 => {
            let q_y = tables.pop().unwrap();
            let g0 = tables.pop().unwrap();
            FiniteModel::from_parts(schema, atoms, g0, Vec::new(), Vec::new(), q_y)?
        }
        Schema::Dgp2 => {
            let q_y = tables.pop().unwrap();
            let g1 = tables.pop().unwrap();
            let q_l1 = tables.pop().unwrap();
            let g0 = tables.pop().unwrap();
            FiniteModel::from_parts(schema, atoms, g0, q_l1, g1, q_y)?
        }
    };
    for d in &diagnostics {
        log::debug!("pre-estimate: {d}");
    }
    Ok(PreEstimate { model, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate, DgpSpec};

    #[test]
    fn all_ones_stratum_hits_ceiling() {
        let data: Vec<Observation> = (0..6)
            .map(|i| Observation::dgp1(i as f64 / 5.0, (i % 2) as u8, if i % 2 == 1 { 1 } else { i as u8 % 4 / 2 }))
            .collect();
        let cfg = PreEstimateConfig { clip: 0.02, ..Default::default() };
        let m = fit_pre_estimate(&data, &cfg).unwrap();
        for i in 0..6 {
            assert_eq!(m.q_y()[i * 2 + 1], 0.98);
        }
    }

    #[test]
    fn identical_covariates_give_stratum_means() {
        let data = vec![
            Observation::dgp1(0.5, 1, 1),
            Observation::dgp1(0.5, 1, 0),
            Observation::dgp1(0.5, 1, 1),
            Observation::dgp1(0.5, 0, 0),
            Observation::dgp1(0.5, 0, 1),
        ];
        let m = fit_pre_estimate(&data, &PreEstimateConfig::default()).unwrap();
        for i in 0..5 {
            assert!((m.q_y()[i * 2 + 1] - 2.0 / 3.0).abs() < 1e-15);
            assert!((m.q_y()[i * 2] - 0.5).abs() < 1e-15);
            assert!((m.g0()[i] - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_weighted_averages() {
        let xs = [0.1, 0.35, 0.4, 0.8, 0.95];
        let a = [1u8, 0, 1, 1, 0];
        let y = [1u8, 1, 0, 1, 0];
        let data: Vec<Observation> = (0..5).map(|i| Observation::dgp1(xs[i], a[i], y[i])).collect();
        let h = 0.3;
        let cfg = PreEstimateConfig {
            bandwidth_rule: BandwidthRule::Fixed(h),
            clip: 0.001,
            ..Default::default()
        };
        let m = fit_pre_estimate(&data, &cfg).unwrap();
        let w = |u: f64, v: f64| (-0.5 * ((u - v) / h).powi(2)).exp();
        for i in 0..5 {
            // treated stratum: indices 0, 2, 3
            let num = w(xs[i], xs[0]) * 1.0 + w(xs[i], xs[2]) * 0.0 + w(xs[i], xs[3]) * 1.0;
            let den = w(xs[i], xs[0]) + w(xs[i], xs[2]) + w(xs[i], xs[3]);
            assert!((m.q_y()[i * 2 + 1] - num / den).abs() < 1e-12);
            let g_num: f64 = (0..5).map(|j| w(xs[i], xs[j]) * f64::from(a[j])).sum();
            let g_den: f64 = (0..5).map(|j| w(xs[i], xs[j])).sum();
            assert!((m.g0()[i] - g_num / g_den).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_reproduces_truth() {
        let data = generate(&DgpSpec::new(Schema::Dgp1, 40, 1).unwrap()).unwrap();
        let cfg = PreEstimateConfig { method: PreEstimateMethod::Oracle, clip: 0.001, ..Default::default() };
        let m = fit_pre_estimate(&data, &cfg).unwrap();
        for (i, o) in data.iter().enumerate() {
            for a in 0..2u8 {
                assert_eq!(m.q_y()[i * 2 + a as usize], dgp1::outcome(a, o.x()));
            }
        }
    }

    #[test]
    fn dgp2_small_sample_falls_back() {
        let data = generate(&DgpSpec::new(Schema::Dgp2, 12, 4).unwrap()).unwrap();
        let fit = fit_pre_estimate_with_diagnostics(&data, &PreEstimateConfig::default()).unwrap();
        assert!(!fit.diagnostics.is_empty());
        let all = [fit.model.g0(), fit.model.q_l1(), fit.model.g1(), fit.model.q_y()];
        for t in all {
            assert!(t.iter().all(|&v| (0.01..=0.99).contains(&v)));
        }
    }

    #[test]
    fn logistic_fit_recovers_slope() {
        let data = generate(&DgpSpec::new(Schema::Dgp1, 400, 8).unwrap()).unwrap();
        let cfg = PreEstimateConfig { method: PreEstimateMethod::LogisticLinear, ..Default::default() };
        let m = fit_pre_estimate(&data, &cfg).unwrap();
        assert!(m.q_y().iter().all(|&v| (0.01..=0.99).contains(&v)));
        // treated arm outcome increases on average with x in this DGP
        let lo = m.q_y()[data.iter().position(|o| o.x() < 0.2).unwrap() * 2 + 1];
        let hi = m.q_y()[data.iter().position(|o| o.x() > 0.9).unwrap() * 2 + 1];
        assert!(hi > lo);
    }

    #[test]
    fn bad_config_rejected() {
        let data = vec![Observation::dgp1(0.1, 0, 0), Observation::dgp1(0.2, 1, 1)];
        let cfg = PreEstimateConfig { clip: 0.6, ..Default::default() };
        assert!(fit_pre_estimate(&data, &cfg).is_err());
        assert!(fit_pre_estimate(&data[..1], &PreEstimateConfig::default()).is_err());
        let bad = [Observation::dgp1(0.1, 2, 0), Observation::dgp1(0.2, 1, 1)];
        assert!(fit_pre_estimate(&bad, &PreEstimateConfig::default()).is_err());
    }
}

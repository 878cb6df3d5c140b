//! Comparator estimators: the naive plug-in, TMLE with a linear
//! fluctuation (DGP1) and sequential-regression LTMLE (DGP2).

use serde::{Deserialize, Serialize};

use crate::distribution::{apply_fluctuation, project_dgp1, FiniteModel, ProjectedScore, ScoreField};
use crate::error::{KdpeError, Result};
use crate::functionals::{evaluate, influence_field, TargetParameter};
use crate::observation::{Observation, Schema};
use crate::simulation::expit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmleConfig {
    pub epsilon_tol: f64,
    pub max_iterations: usize,
    pub c_bound: f64,
    pub targets: Vec<TargetParameter>,
}

impl Default for TmleConfig {
    fn default() -> Self {
        TmleConfig {
            epsilon_tol: 1e-10,
            max_iterations: 100,
            c_bound: 0.001,
            targets: TargetParameter::ALL.to_vec(),
        }
    }
}

impl TmleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_tol > 0.0) || self.max_iterations == 0 {
            return Err(KdpeError::InvalidInput(
                "TMLE needs epsilon_tol > 0 and max_iterations >= 1".into(),
            ));
        }
        if !(self.c_bound > 0.0 && self.c_bound < 0.5) {
            return Err(KdpeError::InvalidInput(format!(
                "c_bound must lie in (0, 0.5), got {}",
                self.c_bound
            )));
        }
        if self.targets.is_empty() {
            return Err(KdpeError::InvalidInput("TMLE needs at least one target".into()));
        }
        Ok(())
    }
}

/// The plug-in value at the pre-estimate.
pub fn naive_plugin(pre: &FiniteModel, t: TargetParameter) -> Result<f64> {
    evaluate(pre, t)
}

#[derive(Clone, Debug)]
pub struct TmleFit {
    pub target: TargetParameter,
    pub model: FiniteModel,
    pub estimate: f64,
    pub epsilons: Vec<f64>,
    pub converged: bool,
}

impl TmleFit {
    pub fn iterations(&self) -> usize {
        self.epsilons.len()
    }
}

/// Range of `eps` keeping every `q (1 + eps h1)` inside `[c, 1 - c]`.
fn feasible_interval(m: &FiniteModel, h: &ScoreField, c: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for (k, &q) in m.q_y().iter().enumerate() {
        let (i, a) = (k / 2, k % 2);
        let slope = q * h.get(i, (a << 1) | 1);
        if slope == 0.0 {
            continue;
        }
        // c <= q + eps * slope <= 1 - c
        let (e1, e2) = ((c - q) / slope, (1.0 - c - q) / slope);
        lo = lo.max(e1.min(e2));
        hi = hi.min(e1.max(e2));
    }
    (lo.min(0.0), hi.max(0.0))
}

/// Maximizes `sum log(1 + eps h_i)` over `[lo, hi]`.
fn linear_mle(h: &[f64], lo: f64, hi: f64) -> f64 {
    let deriv = |e: f64| h.iter().map(|v| v / (1.0 + e * v)).sum::<f64>();
    let d0 = deriv(0.0);
    if d0 == 0.0 {
        return 0.0;
    }
    let (mut a, mut b) = if d0 > 0.0 { (0.0, hi) } else { (lo, 0.0) };
    // the derivative is decreasing; an endpoint is optimal if it keeps its sign
    if d0 > 0.0 && deriv(b) >= 0.0 {
        return b;
    }
    if d0 < 0.0 && deriv(a) <= 0.0 {
        return a;
    }
    let mut e = 0.0;
    for _ in 0..200 {
        let d = deriv(e);
        if d.abs() < 1e-15 || (b - a) < 1e-15 * (1.0 + e.abs()) {
            break;
        }
        if d > 0.0 {
            a = e;
        } else {
            b = e;
        }
        let curv: f64 = -h.iter().map(|v| (v / (1.0 + e * v)).powi(2)).sum::<f64>();
        let newton = e - d / curv;
        e = if newton > a && newton < b { newton } else { 0.5 * (a + b) };
    }
    e
}

fn tmle_one(
    data: &[Observation],
    pre: &FiniteModel,
    t: TargetParameter,
    cfg: &TmleConfig,
) -> Result<TmleFit> {
    let mut m = pre.clone();
    let mut epsilons = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let phi = ScoreField::new(Schema::Dgp1, m.n_atoms(), influence_field(&m, t)?)?;
        let h = project_dgp1(&m, &phi)?;
        let at_obs: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, o)| h.get(i, o.combo()))
            .collect();
        let (lo, hi) = feasible_interval(&m, &h, cfg.c_bound);
        let eps = linear_mle(&at_obs, lo, hi);
        epsilons.push(eps);
        if eps != 0.0 {
            m = apply_fluctuation(&m, &ProjectedScore::Outcome(h.scaled(eps)), cfg.c_bound)?;
        }
        if eps.abs() <= cfg.epsilon_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("TMLE for {t} stopped at the iteration cap");
    }
    Ok(TmleFit {
        target: t,
        estimate: evaluate(&m, t)?,
        model: m,
        epsilons,
        converged,
    })
}

/// One targeted model per requested parameter.
pub fn tmle_fit_dgp1(
    data: &[Observation],
    pre: &FiniteModel,
    cfg: &TmleConfig,
) -> Result<Vec<TmleFit>> {
    cfg.validate()?;
    Schema::Dgp1.check(pre.schema())?;
    pre.check_atoms(data)?;
    cfg.targets.iter().map(|&t| tmle_one(data, pre, t, cfg)).collect()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Solves `sum w_i (z_i - expit(off_i + eps w_i)) = 0`, the score of a
/// logistic fluctuation with offset `off` and covariate `w`.
fn logistic_epsilon(off: &[f64], w: &[f64], z: &[f64]) -> f64 {
    if off.is_empty() {
        return 0.0;
    }
    let loglik = |e: f64| -> f64 {
        off.iter()
            .zip(w)
            .zip(z)
            .map(|((o, wi), zi)| {
                let eta = o + e * wi;
                // z log p + (1-z) log(1-p), stable in eta
                zi * eta - eta.max(0.0) - (-eta.abs()).exp().ln_1p()
            })
            .sum()
    };
    let mut e = 0.0;
    for _ in 0..100 {
        let (mut g, mut hess) = (0.0, 0.0);
        for ((o, wi), zi) in off.iter().zip(w).zip(z) {
            let p = expit(o + e * wi);
            g += wi * (zi - p);
            hess += wi * wi * p * (1.0 - p);
        }
        if g.abs() < 1e-14 || hess <= 0.0 {
            break;
        }
        let step = g / hess;
        let base = loglik(e);
        let mut t = 1.0;
        while t > 1e-12 && loglik(e + t * step) < base {
            t *= 0.5;
        }
        e += t * step;
        if (t * step).abs() < 1e-13 * (1.0 + e.abs()) {
            break;
        }
    }
    e
}

#[derive(Clone, Debug, PartialEq)]
pub struct LtmleFit {
    pub mu: f64,
    /// Fluctuation parameters of the outcome and intermediate stages.
    pub epsilons: [f64; 2],
}

/// Targeted estimate of the mean outcome under `A0 = A1 = a`.
pub fn ltmle_fit_dgp2(data: &[Observation], pre: &FiniteModel, a: u8) -> Result<LtmleFit> {
    Schema::Dgp2.check(pre.schema())?;
    pre.check_atoms(data)?;
    if a > 1 {
        return Err(KdpeError::InvalidInput(format!("treatment must be 0 or 1, got {a}")));
    }
    let n = pre.n_atoms();
    let au = a as usize;
    let g0 = |i: usize| pre.treatment_prob(i, a);
    let g1 = |i: usize, l1: usize| {
        let p = pre.g1()[i * 4 + ((au << 1) | l1)];
        if a == 1 {
            p
        } else {
            1.0 - p
        }
    };
    let qy = |i: usize, l1: usize| pre.q_y()[i * 8 + ((au << 2) | (l1 << 1) | au)];
    let h_y = |i: usize, l1: usize| 1.0 / (g0(i) * g1(i, l1));

    // outcome stage: observations following the regime through A1
    let (mut off, mut w, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for (i, o) in data.iter().enumerate() {
        if let Observation::Dgp2 { a0, l1, a1, y, .. } = *o {
            if a0 == a && a1 == a {
                off.push(logit(qy(i, l1 as usize)));
                w.push(h_y(i, l1 as usize));
                z.push(f64::from(y));
            }
        }
    }
    let eps_y = logistic_epsilon(&off, &w, &z);
    let qy_star = |i: usize, l1: usize| expit(logit(qy(i, l1)) + eps_y * h_y(i, l1));

    // intermediate stage: regress the targeted outcome fit on (A0 = a, X)
    let q_bar = |i: usize| {
        let pl = pre.q_l1()[i * 2 + au];
        (1.0 - pl) * qy_star(i, 0) + pl * qy_star(i, 1)
    };
    let (mut off, mut w, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for (i, o) in data.iter().enumerate() {
        if let Observation::Dgp2 { a0, l1, .. } = *o {
            if a0 == a {
                off.push(logit(q_bar(i)));
                w.push(1.0 / g0(i));
                z.push(qy_star(i, l1 as usize));
            }
        }
    }
    let eps_l = logistic_epsilon(&off, &w, &z);
    let mu = (0..n)
        .map(|i| expit(logit(q_bar(i)) + eps_l / g0(i)))
        .sum::<f64>()
        / n as f64;
    Ok(LtmleFit {
        mu,
        epsilons: [eps_y, eps_l],
    })
}

/// LTMLE estimates of `t`, combining the two regime means.
pub fn ltmle_estimate(data: &[Observation], pre: &FiniteModel, t: TargetParameter) -> Result<f64> {
    let mu1 = ltmle_fit_dgp2(data, pre, 1)?.mu;
    let mu0 = ltmle_fit_dgp2(data, pre, 0)?.mu;
    Ok(t.combine(mu1, mu0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::empirical_influence_mean;
    use crate::preestimate::{fit_pre_estimate, PreEstimateConfig};
    use crate::simulation::{generate, DgpSpec};

    fn dgp1_fixture(n: usize, seed: u64) -> (Vec<Observation>, FiniteModel) {
        let data = generate(&DgpSpec::new(Schema::Dgp1, n, seed).unwrap()).unwrap();
        let pre = fit_pre_estimate(&data, &PreEstimateConfig::default()).unwrap();
        (data, pre)
    }

    #[test]
    fn naive_is_evaluate() {
        let (_, pre) = dgp1_fixture(30, 1);
        for t in TargetParameter::ALL {
            assert_eq!(naive_plugin(&pre, t).unwrap().to_bits(), evaluate(&pre, t).unwrap().to_bits());
        }
    }

    #[test]
    fn tmle_solves_influence_equation() {
        let (data, pre) = dgp1_fixture(200, 3);
        let fits = tmle_fit_dgp1(&data, &pre, &TmleConfig::default()).unwrap();
        assert_eq!(fits.len(), 3);
        for f in &fits {
            assert!(f.converged, "{:?}", f.epsilons);
            let score = empirical_influence_mean(&f.model, &data, f.target).unwrap();
            assert!(score.abs() <= 1e-8, "{} {score}", f.target);
            assert_eq!(f.model.g0(), pre.g0());
            assert!(f.model.updatable_margin(0.001) >= -1e-12);
        }
    }

    #[test]
    fn tmle_steps_never_lower_likelihood() {
        let (data, pre) = dgp1_fixture(150, 9);
        let loglik = |m: &FiniteModel| -> f64 {
            data.iter()
                .enumerate()
                .map(|(i, o)| m.cell_mass(i, o.combo()).ln())
                .sum()
        };
        let cfg = TmleConfig { max_iterations: 1, ..Default::default() };
        let mut m = pre.clone();
        for _ in 0..5 {
            let next = tmle_one(&data, &m, TargetParameter::Ate, &cfg).unwrap().model;
            assert!(loglik(&next) >= loglik(&m) - 1e-12);
            m = next;
        }
    }

    #[test]
    fn tmle_at_a_solved_model_does_nothing() {
        let (data, pre) = dgp1_fixture(100, 4);
        let first = tmle_fit_dgp1(&data, &pre, &TmleConfig::default()).unwrap();
        let solved = &first[0].model;
        let again = tmle_one(&data, solved, TargetParameter::Ate, &TmleConfig::default()).unwrap();
        assert_eq!(again.iterations(), 1);
        assert!(again.epsilons[0].abs() <= 1e-10);
    }

    #[test]
    fn linear_mle_hits_interior_root_and_bounds() {
        // d/de [log(1+e) + log(1-2e)] = 0 at e = -1/4
        let e = linear_mle(&[1.0, -2.0], -0.4, 0.4);
        assert!((e + 0.25).abs() < 1e-14);
        assert_eq!(linear_mle(&[1.0, -2.0], -0.1, 0.4), -0.1);
        assert_eq!(linear_mle(&[1.0, 1.0], -0.1, 0.3), 0.3);
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn ltmle_matches_hand_sequential_regression() {
        let data = vec![
            Observation::dgp2(1.0, 1, 0, 1, 1),
            Observation::dgp2(5.0, 1, 1, 1, 0),
            Observation::dgp2(3.0, 1, 0, 1, 0),
        ];
        let g0 = vec![0.6, 0.5, 0.7];
        let q_l1 = vec![0.3, 0.4, 0.2, 0.6, 0.5, 0.5];
        let g1 = vec![0.5, 0.5, 0.8, 0.9, 0.5, 0.5, 0.7, 0.6, 0.5, 0.5, 0.75, 0.85];
        let mut q_y = vec![0.5; 24];
        q_y[7] = 0.6; // atom 0, a0=1, l1=1, a1=1
        q_y[5] = 0.45; // atom 0, a0=1, l1=0, a1=1
        q_y[8 + 7] = 0.35;
        q_y[8 + 5] = 0.55;
        q_y[16 + 7] = 0.25;
        q_y[16 + 5] = 0.4;
        let x = data.iter().map(Observation::x).collect();
        let m = FiniteModel::from_parts(Schema::Dgp2, x, g0.clone(), q_l1.clone(), g1.clone(), q_y.clone()).unwrap();
        let fit = ltmle_fit_dgp2(&data, &m, 1).unwrap();

        let lg = |p: f64| (p / (1.0 - p)).ln();
        let ex = |v: f64| 1.0 / (1.0 + (-v).exp());
        // stage one by hand: obs (atom, l1, y)
        let obs = [(0usize, 0usize, 1.0), (1, 1, 0.0), (2, 0, 0.0)];
        let q = |i: usize, l1: usize| q_y[i * 8 + 4 + l1 * 2 + 1];
        let h = |i: usize, l1: usize| 1.0 / (g0[i] * g1[i * 4 + 2 + l1]);
        let s1 = |e: f64| obs.iter().map(|&(i, l, y)| h(i, l) * (y - ex(lg(q(i, l)) + e * h(i, l)))).sum::<f64>();
        let e1 = bisect(s1, -20.0, 20.0);
        assert!((fit.epsilons[0] - e1).abs() < 1e-10);
        let qs = |i: usize, l1: usize| ex(lg(q(i, l1)) + e1 * h(i, l1));
        let qb = |i: usize| (1.0 - q_l1[i * 2 + 1]) * qs(i, 0) + q_l1[i * 2 + 1] * qs(i, 1);
        let s2 = |e: f64| {
            obs.iter()
                .map(|&(i, l, _)| (1.0 / g0[i]) * (qs(i, l) - ex(lg(qb(i)) + e / g0[i])))
                .sum::<f64>()
        };
        let e2 = bisect(s2, -20.0, 20.0);
        assert!((fit.epsilons[1] - e2).abs() < 1e-10);
        let mu = (0..3).map(|i| ex(lg(qb(i)) + e2 / g0[i])).sum::<f64>() / 3.0;
        assert!((fit.mu - mu).abs() < 1e-10);
    }

    #[test]
    fn ltmle_runs_on_simulated_data() {
        let data = generate(&DgpSpec::new(Schema::Dgp2, 150, 6).unwrap()).unwrap();
        let pre = fit_pre_estimate(&data, &PreEstimateConfig::default()).unwrap();
        for t in TargetParameter::ALL {
            assert!(ltmle_estimate(&data, &pre, t).unwrap().is_finite());
        }
        assert!(tmle_fit_dgp1(&data, &pre, &TmleConfig::default()).is_err());
    }
}

//! Target parameters (ATE, relative risk, odds ratio) and their influence
//! functions.
//!
//! The influence functions are only used by the baselines and by external
//! diagnostics; the KDPE loop never touches them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distribution::FiniteModel;
use crate::error::{KdpeError, Result};
use crate::observation::{Observation, Schema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetParameter {
    Ate,
    Rr,
    Or,
}

impl TargetParameter {
    pub const ALL: [TargetParameter; 3] = [TargetParameter::Ate, TargetParameter::Rr, TargetParameter::Or];

    pub fn name(self) -> &'static str {
        match self {
            TargetParameter::Ate => "ate",
            TargetParameter::Rr => "rr",
            TargetParameter::Or => "or",
        }
    }

    /// Value of the parameter from the two mean potential outcomes.
    pub fn combine(self, mu1: f64, mu0: f64) -> f64 {
        match self {
            TargetParameter::Ate => mu1 - mu0,
            TargetParameter::Rr => mu1 / mu0,
            TargetParameter::Or => (mu1 / (1.0 - mu1)) / (mu0 / (1.0 - mu0)),
        }
    }

    /// Delta-method weights `(w1, w0)`: `phi_t = w1 phi_mu1 + w0 phi_mu0`.
    pub fn delta_weights(self, mu1: f64, mu0: f64) -> (f64, f64) {
        match self {
            TargetParameter::Ate => (1.0, -1.0),
            TargetParameter::Rr => (1.0 / mu0, -mu1 / (mu0 * mu0)),
            TargetParameter::Or => {
                let psi = self.combine(mu1, mu0);
                (psi / (mu1 * (1.0 - mu1)), -psi / (mu0 * (1.0 - mu0)))
            }
        }
    }

    fn check_domain(self, mu1: f64, mu0: f64) -> Result<()> {
        let ok = match self {
            TargetParameter::Ate => mu1.is_finite() && mu0.is_finite(),
            TargetParameter::Rr => mu0 > 0.0,
            TargetParameter::Or => mu1 > 0.0 && mu1 < 1.0 && mu0 > 0.0 && mu0 < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(KdpeError::Internal(format!(
                "{self} undefined at mu1 = {mu1}, mu0 = {mu0}"
            )))
        }
    }
}

impl fmt::Display for TargetParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for TargetParameter {
    type Err = KdpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ate" => Ok(TargetParameter::Ate),
            "rr" => Ok(TargetParameter::Rr),
            "or" => Ok(TargetParameter::Or),
            _ => Err(KdpeError::InvalidInput(format!("unknown target '{s}'"))),
        }
    }
}

/// Plug-in value of `t` at `m`.
pub fn evaluate(m: &FiniteModel, t: TargetParameter) -> Result<f64> {
    let (mu1, mu0) = (m.mu_a(1), m.mu_a(0));
    t.check_domain(mu1, mu0)?;
    Ok(t.combine(mu1, mu0))
}

fn require_dgp1(m: &FiniteModel) -> Result<()> {
    if m.schema() == Schema::Dgp1 {
        Ok(())
    } else {
        Err(KdpeError::Unsupported(
            "closed-form influence functions are implemented for DGP1 only".into(),
        ))
    }
}

/// `phi_mu_a` at support point `(i, combo)`, given `mu_a`.
#[inline]
fn influence_mu_at(m: &FiniteModel, i: usize, combo: usize, a: u8, mu: f64) -> f64 {
    let obs_a = (combo >> 1) as u8;
    let y = (combo & 1) as f64;
    let q = m.q_y()[i * 2 + a as usize];
    let residual = if obs_a == a {
        (y - q) / m.treatment_prob(i, a)
    } else {
        0.0
    };
    residual + q - mu
}

#[inline]
fn influence_at_with(
    m: &FiniteModel,
    i: usize,
    combo: usize,
    t: TargetParameter,
    mu1: f64,
    mu0: f64,
) -> f64 {
    let p1 = influence_mu_at(m, i, combo, 1, mu1);
    let p0 = influence_mu_at(m, i, combo, 0, mu0);
    match t {
        TargetParameter::Ate => p1 - p0,
        _ => {
            let (w1, w0) = t.delta_weights(mu1, mu0);
            w1 * p1 + w0 * p0
        }
    }
}

fn locate(m: &FiniteModel, o: &Observation) -> Result<(usize, usize)> {
    m.schema().check(o.schema())?;
    let i = m.atom_index(o.x()).ok_or(KdpeError::OffSupport(o.x()))?;
    Ok((i, o.combo()))
}

/// `1{A=a}/g_a(X) (Y - Q(a,X)) + Q(a,X) - mu_a`.
pub fn influence_mu_a(m: &FiniteModel, o: &Observation, a: u8) -> Result<f64> {
    require_dgp1(m)?;
    let (i, c) = locate(m, o)?;
    Ok(influence_mu_at(m, i, c, a, m.mu_a(a)))
}

pub fn influence_target(m: &FiniteModel, o: &Observation, t: TargetParameter) -> Result<f64> {
    require_dgp1(m)?;
    let (mu1, mu0) = (m.mu_a(1), m.mu_a(0));
    t.check_domain(mu1, mu0)?;
    let (i, c) = locate(m, o)?;
    Ok(influence_at_with(m, i, c, t, mu1, mu0))
}

/// Empirical mean of the influence function, i.e. the first-order plug-in
/// bias term. Observation `j` is matched to its atom by value.
pub fn empirical_influence_mean(
    m: &FiniteModel,
    data: &[Observation],
    t: TargetParameter,
) -> Result<f64> {
    require_dgp1(m)?;
    let (mu1, mu0) = (m.mu_a(1), m.mu_a(0));
    t.check_domain(mu1, mu0)?;
    let mut acc = 0.0;
    for (j, o) in data.iter().enumerate() {
        let i = if m.x_atoms().get(j).map(|x| x.to_bits()) == Some(o.x().to_bits()) {
            j
        } else {
            locate(m, o)?.0
        };
        acc += influence_at_with(m, i, o.combo(), t, mu1, mu0);
    }
    Ok(acc / data.len() as f64)
}

/// Influence function on the whole support, atom-major (DGP1).
pub fn influence_field(m: &FiniteModel, t: TargetParameter) -> Result<Vec<f64>> {
    require_dgp1(m)?;
    let (mu1, mu0) = (m.mu_a(1), m.mu_a(0));
    t.check_domain(mu1, mu0)?;
    Ok((0..m.support_len())
        .map(|k| influence_at_with(m, k / 4, k % 4, t, mu1, mu0))
        .collect())
}

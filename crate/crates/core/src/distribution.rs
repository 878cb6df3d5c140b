//! Finite-support distribution models.
//!
//! The covariate marginal is the empirical distribution of the observed
//! `x` values (weight `1/n` per atom). Everything downstream of `x` is a
//! table of conditional Bernoulli probabilities per atom, so every
//! integral against a model is an exact finite sum over
//! `atoms x combos`.
//!
//! Table layout (each entry is the probability of the coordinate being 1):
//!
//! | table  | schema | stride | index                     |
//! |--------|--------|--------|---------------------------|
//! | `g0`   | both   | 1      | -                         |
//! | `q_l1` | DGP2   | 2      | `a0`                      |
//! | `g1`   | DGP2   | 4      | `(a0 << 1) \| l1`         |
//! | `q_y`  | DGP1   | 2      | `a`                       |
//! | `q_y`  | DGP2   | 8      | `(a0 << 2) \| (l1 << 1) \| a1` |
//!
//! With combos packed most-significant-first, the parent index of every
//! table is simply `combo >> k` for the right shift `k`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{KdpeError, Result};
use crate::observation::{Observation, Schema};

/// Slack allowed when checking the table bounds after an update.
const BOUND_SLACK: f64 = 1e-9;
/// Entries that cross a bound within the slack are put back this far inside,
/// so the next zero update stays strictly feasible.
const INTERIOR_NUDGE: f64 = 1e-12;
/// Tolerance on conditional-table normalization after an update.
const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteModel {
    schema: Schema,
    x_atoms: Vec<f64>,
    g0: Vec<f64>,
    q_l1: Vec<f64>,
    g1: Vec<f64>,
    q_y: Vec<f64>,
}

#[inline]
fn bern(p1: f64, bit: u8) -> f64 {
    if bit == 1 {
        p1
    } else {
        1.0 - p1
    }
}

fn check_table(name: &str, values: &[f64], expected: usize) -> Result<()> {
    if values.len() != expected {
        return Err(KdpeError::InvalidInput(format!(
            "table {name} has {} entries, expected {expected}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(KdpeError::InvalidInput(format!(
            "table {name} has entry {v} outside [0, 1]"
        )));
    }
    Ok(())
}

impl FiniteModel {
    /// Point-treatment model: `g0[i] = P(A=1|x_i)`, `q_y[i][a] = P(Y=1|a,x_i)`.
    pub fn dgp1(x_atoms: Vec<f64>, g0: Vec<f64>, q_y: Vec<[f64; 2]>) -> Result<Self> {
        let q_y: Vec<f64> = q_y.into_iter().flatten().collect();
        Self::from_parts(Schema::Dgp1, x_atoms, g0, Vec::new(), Vec::new(), q_y)
    }

    /// Longitudinal model, tables indexed as described in the module docs.
    pub fn dgp2(
        x_atoms: Vec<f64>,
        g0: Vec<f64>,
        q_l1: Vec<[f64; 2]>,
        g1: Vec<[f64; 4]>,
        q_y: Vec<[f64; 8]>,
    ) -> Result<Self> {
        Self::from_parts(
            Schema::Dgp2,
            x_atoms,
            g0,
            q_l1.into_iter().flatten().collect(),
            g1.into_iter().flatten().collect(),
            q_y.into_iter().flatten().collect(),
        )
    }

    pub(crate) fn from_parts(
        schema: Schema,
        x_atoms: Vec<f64>,
        g0: Vec<f64>,
        q_l1: Vec<f64>,
        g1: Vec<f64>,
        q_y: Vec<f64>,
    ) -> Result<Self> {
        let n = x_atoms.len();
        if n == 0 {
            return Err(KdpeError::InvalidInput("model needs at least one atom".into()));
        }
        if let Some(x) = x_atoms.iter().find(|x| !x.is_finite()) {
            return Err(KdpeError::InvalidInput(format!("non-finite atom {x}")));
        }
        check_table("g0", &g0, n)?;
        match schema {
            Schema::Dgp1 => {
                check_table("q_l1", &q_l1, 0)?;
                check_table("g1", &g1, 0)?;
                check_table("q_y", &q_y, 2 * n)?;
            }
            Schema::Dgp2 => {
                check_table("q_l1", &q_l1, 2 * n)?;
                check_table("g1", &g1, 4 * n)?;
                check_table("q_y", &q_y, 8 * n)?;
            }
        }
        Ok(FiniteModel {
            schema,
            x_atoms,
            g0,
            q_l1,
            g1,
            q_y,
        })
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn n_atoms(&self) -> usize {
        self.x_atoms.len()
    }

    pub fn x_atoms(&self) -> &[f64] {
        &self.x_atoms
    }

    /// Number of support points (`atoms x combos`).
    pub fn support_len(&self) -> usize {
        self.n_atoms() * self.schema.combos()
    }

    pub fn g0(&self) -> &[f64] {
        &self.g0
    }

    pub fn q_l1(&self) -> &[f64] {
        &self.q_l1
    }

    pub fn g1(&self) -> &[f64] {
        &self.g1
    }

    pub fn q_y(&self) -> &[f64] {
        &self.q_y
    }

    /// Stride of the outcome table per atom.
    pub(crate) fn q_y_stride(&self) -> usize {
        match self.schema {
            Schema::Dgp1 => 2,
            Schema::Dgp2 => 8,
        }
    }

    /// `P(Y=1 | parents(combo), x_i)`.
    #[inline]
    pub fn outcome_prob(&self, i: usize, combo: usize) -> f64 {
        self.q_y[i * self.q_y_stride() + (combo >> 1)]
    }

    /// `P(L1=1 | a0(combo), x_i)` (DGP2 only).
    #[inline]
    pub fn intermediate_prob(&self, i: usize, combo: usize) -> f64 {
        self.q_l1[i * 2 + (combo >> 3)]
    }

    /// Product of all conditional factors at a support point, excluding `1/n`.
    pub fn conditional_mass(&self, i: usize, combo: usize) -> f64 {
        let s = self.schema;
        let b = |d| s.bit(combo, d);
        match s {
            Schema::Dgp1 => bern(self.g0[i], b(0)) * bern(self.outcome_prob(i, combo), b(1)),
            Schema::Dgp2 => {
                bern(self.g0[i], b(0))
                    * bern(self.intermediate_prob(i, combo), b(1))
                    * bern(self.g1[i * 4 + (combo >> 2)], b(2))
                    * bern(self.outcome_prob(i, combo), b(3))
            }
        }
    }

    /// Joint mass of support point `(i, combo)`.
    #[inline]
    pub fn cell_mass(&self, i: usize, combo: usize) -> f64 {
        self.conditional_mass(i, combo) / self.n_atoms() as f64
    }

    /// Joint masses over the full support, atom-major.
    pub fn joint_masses(&self) -> Vec<f64> {
        let c = self.schema.combos();
        (0..self.support_len())
            .map(|k| self.cell_mass(k / c, k % c))
            .collect()
    }

    pub fn atom_index(&self, x: f64) -> Option<usize> {
        self.x_atoms.iter().position(|&a| a.to_bits() == x.to_bits())
    }

    /// Density of an observation; sums over duplicated atoms.
    pub fn density(&self, o: &Observation) -> Result<f64> {
        self.schema.check(o.schema())?;
        let combo = o.combo();
        let mut total = 0.0;
        let mut hit = false;
        for (i, &a) in self.x_atoms.iter().enumerate() {
            if a.to_bits() == o.x().to_bits() {
                hit = true;
                total += self.cell_mass(i, combo);
            }
        }
        if hit {
            Ok(total)
        } else {
            Err(KdpeError::OffSupport(o.x()))
        }
    }

    /// Checks that the atoms are the covariates of `data`, in order.
    pub fn check_atoms(&self, data: &[Observation]) -> Result<()> {
        if data.is_empty() {
            return Err(KdpeError::InvalidInput("empty dataset".into()));
        }
        for o in data {
            o.validate()?;
            self.schema.check(o.schema())?;
        }
        if data.len() != self.n_atoms()
            || data
                .iter()
                .zip(&self.x_atoms)
                .any(|(o, x)| o.x().to_bits() != x.to_bits())
        {
            return Err(KdpeError::InvalidInput(
                "model atoms must be the observed covariates in data order".into(),
            ));
        }
        Ok(())
    }

    /// Mean potential outcome under treatment `a` (all time points for DGP2).
    pub fn mu_a(&self, a: u8) -> f64 {
        let n = self.n_atoms();
        let a = a as usize;
        let sum: f64 = match self.schema {
            Schema::Dgp1 => (0..n).map(|i| self.q_y[i * 2 + a]).sum(),
            Schema::Dgp2 => (0..n)
                .map(|i| {
                    (0..2)
                        .map(|l1| {
                            let pl = bern(self.q_l1[i * 2 + a], l1 as u8);
                            pl * self.q_y[i * 8 + ((a << 2) | (l1 << 1) | a)]
                        })
                        .sum::<f64>()
                })
                .sum(),
        };
        sum / n as f64
    }

    /// `P(A=a|x_i)` for DGP1, `P(A0=a|x_i)` for DGP2.
    pub fn treatment_prob(&self, i: usize, a: u8) -> f64 {
        bern(self.g0[i], a)
    }

    /// L2 distance of joint densities under counting measure.
    pub fn l2_distance(&self, other: &FiniteModel) -> Result<f64> {
        self.schema.check(other.schema)?;
        if self.x_atoms.len() != other.x_atoms.len()
            || self
                .x_atoms
                .iter()
                .zip(&other.x_atoms)
                .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(KdpeError::InvalidInput(
                "models are defined on different atoms".into(),
            ));
        }
        let c = self.schema.combos();
        let mut acc = 0.0;
        for i in 0..self.n_atoms() {
            for k in 0..c {
                let d = self.cell_mass(i, k) - other.cell_mass(i, k);
                acc += d * d;
            }
        }
        Ok(acc.sqrt())
    }

    /// Smallest distance of any updatable table entry to the box `[c, 1-c]`
    /// (negative when outside).
    pub fn updatable_margin(&self, c_bound: f64) -> f64 {
        let tables: &[&[f64]] = match self.schema {
            Schema::Dgp1 => &[&self.q_y],
            Schema::Dgp2 => &[&self.q_l1, &self.q_y],
        };
        tables
            .iter()
            .flat_map(|t| t.iter())
            .map(|&p| (p - c_bound).min(1.0 - c_bound - p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Stable hash over schema, atoms and every table entry.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.schema.hash(&mut h);
        for t in [&self.x_atoms, &self.g0, &self.q_l1, &self.g1, &self.q_y] {
            t.len().hash(&mut h);
            for v in t.iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Replace the outcome table (used by targeting baselines).
    pub(crate) fn with_q_y(&self, q_y: Vec<f64>) -> Self {
        debug_assert_eq!(q_y.len(), self.q_y.len());
        FiniteModel {
            q_y,
            ..self.clone()
        }
    }
}

/// Which conditional-mean-zero identity a score field satisfies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// No projection applied.
    Raw,
    /// Mean zero over `y` given every parent configuration.
    Outcome,
    /// DGP2 only: depends on `(l1, a0, x)` and is mean zero over `l1` given `(a0, x)`.
    Intermediate,
}

/// Real values on every support point of a model, atom-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    schema: Schema,
    n: usize,
    values: Vec<f64>,
    projection: Projection,
}

impl ScoreField {
    pub fn new(schema: Schema, n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * schema.combos() {
            return Err(KdpeError::InvalidInput(format!(
                "score field has {} values, expected {}",
                values.len(),
                n * schema.combos()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KdpeError::InvalidInput("score field is not finite".into()));
        }
        Ok(ScoreField {
            schema,
            n,
            values,
            projection: Projection::Raw,
        })
    }

    /// A field the caller has already projected.
    pub(crate) fn with_projection(
        schema: Schema,
        n: usize,
        values: Vec<f64>,
        projection: Projection,
    ) -> Result<Self> {
        let mut f = Self::new(schema, n, values)?;
        f.projection = projection;
        Ok(f)
    }

    pub fn from_fn(m: &FiniteModel, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let c = m.schema().combos();
        let values = (0..m.support_len()).map(|k| f(k / c, k % c)).collect();
        Self::new(m.schema(), m.n_atoms(), values)
    }

    pub fn constant(m: &FiniteModel, v: f64) -> Result<Self> {
        Self::from_fn(m, |_, _| v)
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn projection(&self) -> Projection {
        self.projection
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, combo: usize) -> f64 {
        self.values[i * self.schema.combos() + combo]
    }

    pub fn scaled(&self, s: f64) -> ScoreField {
        ScoreField {
            values: self.values.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    fn check_model(&self, m: &FiniteModel) -> Result<()> {
        m.schema().check(self.schema)?;
        if self.n != m.n_atoms() {
            return Err(KdpeError::InvalidInput(format!(
                "score field spans {} atoms, model has {}",
                self.n,
                m.n_atoms()
            )));
        }
        Ok(())
    }
}

/// `out = h - E[h | parents of Y]` on one atom's block of combos.
#[inline]
pub(crate) fn project_outcome_block(m: &FiniteModel, i: usize, raw: &[f64], out: &mut [f64]) {
    for parent in (0..raw.len()).step_by(2) {
        let q1 = m.outcome_prob(i, parent);
        let mean = raw[parent] * (1.0 - q1) + raw[parent + 1] * q1;
        out[parent] = raw[parent] - mean;
        out[parent + 1] = raw[parent + 1] - mean;
    }
}

/// DGP2 `E[h|l1,a0,x] - E[h|a0,x]`, broadcast to the 16 combos of atom `i`.
#[inline]
pub(crate) fn project_intermediate_block(
    m: &FiniteModel,
    i: usize,
    raw: &[f64],
    out: &mut [f64],
) {
    let g1 = &m.g1()[i * 4..i * 4 + 4];
    let qy = &m.q_y()[i * 8..i * 8 + 8];
    for a0 in 0..2usize {
        let mut given_l1 = [0.0; 2];
        for (l1, slot) in given_l1.iter_mut().enumerate() {
            let mut acc = 0.0;
            let pa1 = g1[(a0 << 1) | l1];
            for a1 in 0..2usize {
                let py = qy[(a0 << 2) | (l1 << 1) | a1];
                let base = (a0 << 3) | (l1 << 2) | (a1 << 1);
                let e_y = raw[base] * (1.0 - py) + raw[base + 1] * py;
                acc += bern(pa1, a1 as u8) * e_y;
            }
            *slot = acc;
        }
        let pl = m.q_l1()[i * 2 + a0];
        let given_a0 = given_l1[0] * (1.0 - pl) + given_l1[1] * pl;
        for l1 in 0..2usize {
            let v = given_l1[l1] - given_a0;
            let base = (a0 << 3) | (l1 << 2);
            out[base..base + 4].iter_mut().for_each(|o| *o = v);
        }
    }
}

/// Projection onto the tangent space of `P(Y | A, X)`.
pub fn project_dgp1(m: &FiniteModel, h: &ScoreField) -> Result<ScoreField> {
    Schema::Dgp1.check(m.schema())?;
    h.check_model(m)?;
    let mut values = vec![0.0; h.values.len()];
    for i in 0..m.n_atoms() {
        let r = i * 4..i * 4 + 4;
        project_outcome_block(m, i, &h.values[r.clone()], &mut values[r]);
    }
    Ok(ScoreField {
        schema: Schema::Dgp1,
        n: h.n,
        values,
        projection: Projection::Outcome,
    })
}

/// Projections onto the tangent spaces of `P(L1 | A0, X)` and
/// `P(Y | A1, L1, A0, X)`.
pub fn project_dgp2(m: &FiniteModel, h: &ScoreField) -> Result<(ScoreField, ScoreField)> {
    Schema::Dgp2.check(m.schema())?;
    h.check_model(m)?;
    let mut l1 = vec![0.0; h.values.len()];
    let mut y = vec![0.0; h.values.len()];
    for i in 0..m.n_atoms() {
        let r = i * 16..i * 16 + 16;
        project_intermediate_block(m, i, &h.values[r.clone()], &mut l1[r.clone()]);
        project_outcome_block(m, i, &h.values[r.clone()], &mut y[r]);
    }
    let make = |values, projection| ScoreField {
        schema: Schema::Dgp2,
        n: h.n,
        values,
        projection,
    };
    Ok((make(l1, Projection::Intermediate), make(y, Projection::Outcome)))
}

/// A projected perturbation direction ready to be applied to a model.
#[derive(Clone, Debug)]
pub enum ProjectedScore {
    Outcome(ScoreField),
    Longitudinal { l1: ScoreField, y: ScoreField },
}

impl ProjectedScore {
    /// Sum of the components, i.e. the score of the joint density.
    pub fn total(&self, i: usize, combo: usize) -> f64 {
        match self {
            ProjectedScore::Outcome(h) => h.get(i, combo),
            ProjectedScore::Longitudinal { l1, y } => l1.get(i, combo) + y.get(i, combo),
        }
    }
}

fn fluctuate_table(
    name: &str,
    table: &[f64],
    stride: usize,
    h: &ScoreField,
    combo_of: impl Fn(usize) -> usize,
    c_bound: f64,
) -> Result<Vec<f64>> {
    let c = h.schema.combos();
    let mut out = Vec::with_capacity(table.len());
    for (k, &p1) in table.iter().enumerate() {
        let i = k / stride;
        let one = combo_of(k % stride);
        let zero = one & !bit_mask(h.schema, name);
        let h1 = h.values[i * c + one];
        let h0 = h.values[i * c + zero];
        if 1.0 + h1 <= 0.0 || 1.0 + h0 <= 0.0 {
            return Err(KdpeError::ConstraintViolation(format!(
                "1 + h is not positive in table {name} at atom {i}"
            )));
        }
        let new1 = p1 * (1.0 + h1);
        let new0 = (1.0 - p1) * (1.0 + h0);
        let scale = 1.0 + (p1 * h1).abs() + ((1.0 - p1) * h0).abs();
        if (new1 + new0 - 1.0).abs() > NORMALIZATION_TOL * scale {
            return Err(KdpeError::ConstraintViolation(format!(
                "table {name} at atom {i} no longer normalized (sum {})",
                new1 + new0
            )));
        }
        if new1 < c_bound - BOUND_SLACK || new1 > 1.0 - c_bound + BOUND_SLACK {
            return Err(KdpeError::ConstraintViolation(format!(
                "table {name} at atom {i} leaves [{c_bound}, {}]: {new1}",
                1.0 - c_bound
            )));
        }
        out.push(new1.clamp(c_bound + INTERIOR_NUDGE, 1.0 - c_bound - INTERIOR_NUDGE));
    }
    Ok(out)
}

/// Bit of the combo index that holds the coordinate a table describes.
fn bit_mask(schema: Schema, table: &str) -> usize {
    match (schema, table) {
        (Schema::Dgp2, "q_l1") => 1 << 2,
        _ => 1,
    }
}

/// Multiplicative update `p <- (1 + h) p` of the updatable factors.
pub fn apply_fluctuation(
    m: &FiniteModel,
    score: &ProjectedScore,
    c_bound: f64,
) -> Result<FiniteModel> {
    match (m.schema(), score) {
        (Schema::Dgp1, ProjectedScore::Outcome(h)) => {
            h.check_model(m)?;
            expect_projection(h, Projection::Outcome)?;
            let q_y = fluctuate_table("q_y", m.q_y(), 2, h, |a| (a << 1) | 1, c_bound)?;
            Ok(m.with_q_y(q_y))
        }
        (Schema::Dgp2, ProjectedScore::Longitudinal { l1, y }) => {
            l1.check_model(m)?;
            y.check_model(m)?;
            expect_projection(l1, Projection::Intermediate)?;
            expect_projection(y, Projection::Outcome)?;
            let q_l1 = fluctuate_table("q_l1", m.q_l1(), 2, l1, |a0| (a0 << 3) | (1 << 2), c_bound)?;
            let q_y = fluctuate_table("q_y", m.q_y(), 8, y, |p| (p << 1) | 1, c_bound)?;
            Ok(FiniteModel {
                q_l1,
                q_y,
                ..m.clone()
            })
        }
        (s, _) => Err(KdpeError::InvalidInput(format!(
            "projected score does not match schema {s}"
        ))),
    }
}

fn expect_projection(h: &ScoreField, p: Projection) -> Result<()> {
    if h.projection == p {
        Ok(())
    } else {
        Err(KdpeError::InvalidInput(format!(
            "score field is {:?}, expected {p:?}",
            h.projection
        )))
    }
}

/// Versioned JSON document for saving and loading models.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub schema: Schema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_bound: Option<f64>,
    pub x_atoms: Vec<f64>,
    pub g0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub q_l1: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub g1: Vec<Vec<f64>>,
    pub q_y: Vec<Vec<f64>>,
}

pub const MODEL_FORMAT: &str = "kdpe-finite-model";
pub const MODEL_VERSION: u32 = 1;

impl ModelDocument {
    pub fn from_model(m: &FiniteModel, c_bound: Option<f64>) -> Self {
        let rows = |t: &[f64], stride: usize| -> Vec<Vec<f64>> {
            t.chunks(stride).map(<[f64]>::to_vec).collect()
        };
        ModelDocument {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            schema: m.schema,
            c_bound,
            x_atoms: m.x_atoms.clone(),
            g0: m.g0.clone(),
            q_l1: rows(&m.q_l1, 2),
            g1: rows(&m.g1, 4),
            q_y: rows(&m.q_y, m.q_y_stride()),
        }
    }

    pub fn into_model(self) -> Result<FiniteModel> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(KdpeError::InvalidInput(format!(
                "unsupported model document {} v{}",
                self.format, self.version
            )));
        }
        let flat = |rows: Vec<Vec<f64>>, stride: usize, name: &str| -> Result<Vec<f64>> {
            if rows.iter().any(|r| r.len() != stride) {
                return Err(KdpeError::InvalidInput(format!(
                    "rows of {name} must have {stride} entries"
                )));
            }
            Ok(rows.into_iter().flatten().collect())
        };
        let stride_y = match self.schema {
            Schema::Dgp1 => 2,
            Schema::Dgp2 => 8,
        };
        FiniteModel::from_parts(
            self.schema,
            self.x_atoms,
            self.g0,
            flat(self.q_l1, 2, "q_l1")?,
            flat(self.g1, 4, "g1")?,
            flat(self.q_y, stride_y, "q_y")?,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_atom_dgp1() -> FiniteModel {
        FiniteModel::dgp1(
            vec![0.1, 0.5, 0.9],
            vec![0.3, 0.6, 0.5],
            vec![[0.2, 0.7], [0.4, 0.45], [0.9, 0.15]],
        )
        .unwrap()
    }

    fn two_atom_dgp2() -> FiniteModel {
        FiniteModel::dgp2(
            vec![1.0, 6.5],
            vec![0.4, 0.55],
            vec![[0.7, 0.2], [0.35, 0.6]],
            vec![[0.1, 0.8, 0.3, 0.65], [0.5, 0.25, 0.9, 0.05]],
            vec![
                [0.11, 0.22, 0.33, 0.44, 0.55, 0.66, 0.77, 0.88],
                [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2],
            ],
        )
        .unwrap()
    }

    fn raw_field(m: &FiniteModel, seed: u64) -> ScoreField {
        // deterministic pseudo-random values
        ScoreField::from_fn(m, |i, c| {
            let t = (seed as f64 + 1.0) * (i as f64 * 7.3 + c as f64 * 1.9 + 0.37);
            (t.sin() * 43758.5453).fract()
        })
        .unwrap()
    }

    #[test]
    fn density_single_atom() {
        let m = FiniteModel::dgp1(vec![0.3], vec![0.5], vec![[0.5, 0.5]]).unwrap();
        assert_eq!(m.density(&Observation::dgp1(0.3, 1, 1)).unwrap(), 0.25);
        assert!(matches!(
            m.density(&Observation::dgp1(0.4, 1, 1)),
            Err(KdpeError::OffSupport(_))
        ));
    }

    #[test]
    fn density_matches_hand_multiplication() {
        let m = three_atom_dgp1();
        // atom 2: g0 = 0.5, q(1|a=0) = 0.9, q(1|a=1) = 0.15
        let cases = [
            (Observation::dgp1(0.9, 0, 0), (1.0 / 3.0) * 0.5 * (1.0 - 0.9)),
            (Observation::dgp1(0.9, 1, 1), (1.0 / 3.0) * 0.5 * 0.15),
            (Observation::dgp1(0.1, 1, 0), (1.0 / 3.0) * 0.3 * (1.0 - 0.7)),
            (Observation::dgp1(0.5, 0, 1), (1.0 / 3.0) * (1.0 - 0.6) * 0.4),
        ];
        for (o, expected) in cases {
            assert!((m.density(&o).unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_normalizes() {
        for m in [three_atom_dgp1(), two_atom_dgp2()] {
            let total: f64 = m.joint_masses().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_fields_project_to_zero() {
        let m = three_atom_dgp1();
        let h = ScoreField::constant(&m, 3.0).unwrap();
        let p = project_dgp1(&m, &h).unwrap();
        assert!(p.values().iter().all(|v| v.abs() < 1e-15));

        let m2 = two_atom_dgp2();
        let (a, b) = project_dgp2(&m2, &ScoreField::constant(&m2, 3.0).unwrap()).unwrap();
        assert!(a.values().iter().chain(b.values()).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn dgp1_projection_matches_brute_force() {
        let m = three_atom_dgp1();
        let h = raw_field(&m, 1);
        let p = project_dgp1(&m, &h).unwrap();
        for i in 0..3 {
            for a in 0..2usize {
                // brute force conditional mean via joint masses
                let mut num = 0.0;
                let mut den = 0.0;
                for y in 0..2usize {
                    let c = (a << 1) | y;
                    num += m.cell_mass(i, c) * h.get(i, c);
                    den += m.cell_mass(i, c);
                }
                for y in 0..2usize {
                    let c = (a << 1) | y;
                    assert!((p.get(i, c) - (h.get(i, c) - num / den)).abs() < 1e-14);
                }
                let cm: f64 = (0..2)
                    .map(|y| p.get(i, (a << 1) | y) * bern(m.outcome_prob(i, a << 1), y as u8))
                    .sum();
                assert!(cm.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dgp2_projection_matches_enumeration() {
        let m = two_atom_dgp2();
        let h = raw_field(&m, 2);
        let (pl, py) = project_dgp2(&m, &h).unwrap();
        for i in 0..2 {
            // conditional expectations by brute force over the 16 joint cells,
            // using masses divided by the marginal mass of the conditioning set
            let cond = |fix: &dyn Fn(usize) -> bool| {
                let mut num = 0.0;
                let mut den = 0.0;
                for c in 0..16 {
                    if fix(c) {
                        num += m.cell_mass(i, c) * h.get(i, c);
                        den += m.cell_mass(i, c);
                    }
                }
                num / den
            };
            for c in 0..16usize {
                let (a0, l1) = (c >> 3, (c >> 2) & 1);
                let e_l1 = cond(&|k| k >> 2 == c >> 2);
                let e_a0 = cond(&|k| k >> 3 == a0);
                assert!((pl.get(i, c) - (e_l1 - e_a0)).abs() < 1e-13, "l1 proj at {i},{c}");
                let e_y = cond(&|k| k >> 1 == c >> 1);
                assert!((py.get(i, c) - (h.get(i, c) - e_y)).abs() < 1e-13);
                let _ = l1;
            }
            for a0 in 0..2usize {
                let pl1 = m.q_l1()[i * 2 + a0];
                let s = pl.get(i, a0 << 3) * (1.0 - pl1) + pl.get(i, (a0 << 3) | 4) * pl1;
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_update_is_identity() {
        let m = three_atom_dgp1();
        let h = project_dgp1(&m, &ScoreField::constant(&m, 0.0).unwrap()).unwrap();
        let out = apply_fluctuation(&m, &ProjectedScore::Outcome(h), 0.001).unwrap();
        assert_eq!(out, m);

        let m2 = two_atom_dgp2();
        let (l1, y) = project_dgp2(&m2, &ScoreField::constant(&m2, 0.0).unwrap()).unwrap();
        let out = apply_fluctuation(&m2, &ProjectedScore::Longitudinal { l1, y }, 0.001).unwrap();
        assert_eq!(out, m2);
    }

    #[test]
    fn hand_checked_update() {
        let m = FiniteModel::dgp1(vec![0.0, 1.0], vec![0.5, 0.5], vec![[0.5, 0.25], [0.8, 0.4]])
            .unwrap();
        // h'(x_0, a=1, y=1) = 0.2 requires h'(x_0, 1, 0) = -0.2 * 0.25 / 0.75
        let mut v = vec![0.0; 8];
        v[3] = 0.2;
        v[2] = -0.2 * 0.25 / 0.75;
        v[4 + 1] = -0.1;
        v[4] = 0.1 * 0.8 / 0.2;
        let raw = ScoreField::new(Schema::Dgp1, 2, v.clone()).unwrap();
        let h = project_dgp1(&m, &raw).unwrap();
        for (a, b) in h.values().iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
        let out = apply_fluctuation(&m, &ProjectedScore::Outcome(h), 0.001).unwrap();
        assert!((out.q_y()[1] - 0.25 * 1.2).abs() < 1e-15);
        assert!((out.q_y()[2] - 0.8 * 0.9).abs() < 1e-15);
        assert_eq!(out.q_y()[0], 0.5);
        assert_eq!(out.g0(), m.g0());
    }

    #[test]
    fn update_rejects_bound_violation_and_raw_fields() {
        let m = FiniteModel::dgp1(vec![0.0], vec![0.5], vec![[0.5, 0.5]]).unwrap();
        let raw = ScoreField::new(Schema::Dgp1, 1, vec![0.0, 0.0, -0.999, 0.999]).unwrap();
        assert!(apply_fluctuation(&m, &ProjectedScore::Outcome(raw.clone()), 0.001).is_err());
        let h = project_dgp1(&m, &raw).unwrap();
        assert!(matches!(
            apply_fluctuation(&m, &ProjectedScore::Outcome(h), 0.001),
            Err(KdpeError::ConstraintViolation(_))
        ));
    }

    #[test]
    fn mu_a_examples() {
        let m = FiniteModel::dgp1(vec![0.0, 1.0], vec![0.5, 0.5], vec![[0.3, 0.2], [0.1, 0.6]])
            .unwrap();
        assert!((m.mu_a(1) - 0.4).abs() < 1e-15);
        let ones = FiniteModel::dgp1(vec![0.0, 1.0], vec![0.5, 0.5], vec![[1.0, 1.0]; 2]).unwrap();
        assert_eq!(ones.mu_a(0), 1.0);
        assert_eq!(ones.mu_a(1), 1.0);
    }

    #[test]
    fn mu_a_ignores_propensity() {
        let m = three_atom_dgp1();
        let other = FiniteModel::dgp1(
            m.x_atoms().to_vec(),
            vec![0.9, 0.05, 0.2],
            vec![[0.2, 0.7], [0.4, 0.45], [0.9, 0.15]],
        )
        .unwrap();
        assert_eq!(m.mu_a(0).to_bits(), other.mu_a(0).to_bits());
        assert_eq!(m.mu_a(1).to_bits(), other.mu_a(1).to_bits());
    }

    #[test]
    fn dgp2_mu_a_by_enumeration() {
        let m = two_atom_dgp2();
        for a in 0..2u8 {
            // g-computation: clamp a0 = a1 = a, integrate over x and l1, read P(Y=1)
            let mut total = 0.0;
            for i in 0..2 {
                for l1 in 0..2u8 {
                    let c1 = Observation::dgp2(m.x_atoms()[i], a, l1, a, 1).combo();
                    let c0 = Observation::dgp2(m.x_atoms()[i], a, l1, a, 0).combo();
                    let pl = bern(m.q_l1()[i * 2 + a as usize], l1);
                    let py1 = m.conditional_mass(i, c1);
                    let py0 = m.conditional_mass(i, c0);
                    // P(y=1 | a1, l1, a0, x) from the joint ratio
                    total += 0.5 * pl * py1 / (py1 + py0);
                }
            }
            assert!((m.mu_a(a) - total).abs() < 1e-14);
        }
    }

    #[test]
    fn l2_distance_hand_formula() {
        let m1 = FiniteModel::dgp1(vec![0.5], vec![0.4], vec![[0.3, 0.6]]).unwrap();
        let d = 0.05;
        let m2 = FiniteModel::dgp1(vec![0.5], vec![0.4], vec![[0.3 + d, 0.6 + d]]).unwrap();
        // joint differences: a=0 cells +-0.6 d, a=1 cells +-0.4 d
        let expected = (2.0 * (0.6 * d).powi(2) + 2.0 * (0.4 * d).powi(2)).sqrt();
        assert!((m1.l2_distance(&m2).unwrap() - expected).abs() < 1e-15);
        assert_eq!(m1.l2_distance(&m1).unwrap(), 0.0);
        assert_eq!(m1.l2_distance(&m2).unwrap(), m2.l2_distance(&m1).unwrap());
        let other = FiniteModel::dgp1(vec![0.6], vec![0.4], vec![[0.3, 0.6]]).unwrap();
        assert!(m1.l2_distance(&other).is_err());
    }

    #[test]
    fn json_roundtrip_lossless() {
        for m in [three_atom_dgp1(), two_atom_dgp2()] {
            let doc = ModelDocument::from_model(&m, Some(0.001));
            let text = doc.to_json().unwrap();
            let back = ModelDocument::from_json(&text).unwrap().into_model().unwrap();
            assert_eq!(back, m);
            assert_eq!(back.fingerprint(), m.fingerprint());
        }
    }

    proptest! {
        #[test]
        fn valid_updates_preserve_normalization(
            q in proptest::collection::vec(0.05f64..0.95, 6),
            raw in proptest::collection::vec(-1.0f64..1.0, 12),
            scale in 0.0f64..0.04,
        ) {
            let m = FiniteModel::dgp1(
                vec![0.0, 0.5, 1.0],
                vec![0.5; 3],
                q.chunks(2).map(|c| [c[0], c[1]]).collect(),
            ).unwrap();
            let h = ScoreField::new(Schema::Dgp1, 3, raw).unwrap().scaled(scale);
            let p = project_dgp1(&m, &h).unwrap();
            let out = apply_fluctuation(&m, &ProjectedScore::Outcome(p), 0.001).unwrap();
            let total: f64 = out.joint_masses().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn dgp2_updates_preserve_normalization(
            raw in proptest::collection::vec(-1.0f64..1.0, 32),
            scale in 0.0f64..0.02,
        ) {
            let m = two_atom_dgp2();
            let h = ScoreField::new(Schema::Dgp2, 2, raw).unwrap().scaled(scale);
            let (l1, y) = project_dgp2(&m, &h).unwrap();
            let out = apply_fluctuation(&m, &ProjectedScore::Longitudinal { l1, y }, 0.001).unwrap();
            let total: f64 = out.joint_masses().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert_eq!(out.g1(), m.g1());
            prop_assert_eq!(out.g0(), m.g0());
        }
    }
}

//! Gaussian kernels and their mean-zero (centered) versions on a finite model.
//!
//! For a model `P` on the finite support, the centered kernel is
//!
//! ```text
//! K_P(o, o') = K(o, o') - f_P(o) f_P(o') / c_P
//! f_P(o)     = sum_s p(s) K(o, s)
//! c_P        = sum_s p(s) f_P(s)
//! ```
//!
//! so that `sum_o p(o) K_P(o, o') = 0` for every `o'`. Both sums are exact
//! finite sums over `atoms x combos`.
//!
//! The Gaussian kernel factorizes over coordinates, and the binary part only
//! takes `combos^2` distinct values, so evaluation on the support uses an
//! `n x n` table of covariate factors and a small `combos x combos` table.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distribution::FiniteModel;
use crate::error::{KdpeError, Result};
use crate::observation::{Observation, Schema};

/// Diagonal jitter added once when a Gram matrix fails the PSD check.
pub const GRAM_JITTER: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseKernel {
    pub family: KernelFamily,
    /// One multiplier per coordinate, `x` first.
    pub length_scales: Vec<f64>,
}

impl BaseKernel {
    pub fn gaussian(length_scales: Vec<f64>) -> Result<Self> {
        if length_scales.is_empty() || length_scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(KdpeError::InvalidInput(
                "length scales must be positive and finite".into(),
            ));
        }
        Ok(BaseKernel {
            family: KernelFamily::Gaussian,
            length_scales,
        })
    }

    /// Unit scales for DGP1; DGP2 maps `x` from `[0, 8]` to `[0, 1]`.
    pub fn default_for(schema: Schema) -> Self {
        let mut scales = vec![1.0; schema.dims()];
        if schema == Schema::Dgp2 {
            scales[0] = 0.125;
        }
        BaseKernel {
            family: KernelFamily::Gaussian,
            length_scales: scales,
        }
    }

    fn check_schema(&self, schema: Schema) -> Result<()> {
        if self.length_scales.len() != schema.dims() {
            return Err(KdpeError::InvalidInput(format!(
                "kernel has {} length scales, schema {schema} has {} coordinates",
                self.length_scales.len(),
                schema.dims()
            )));
        }
        Ok(())
    }

    /// `exp(-sum_d (s_d (o_d - o2_d))^2)`.
    pub fn eval(&self, o: &Observation, o2: &Observation) -> Result<f64> {
        o.schema().check(o2.schema())?;
        self.check_schema(o.schema())?;
        let d2: f64 = o
            .coords()
            .iter()
            .zip(o2.coords())
            .zip(&self.length_scales)
            .map(|((a, b), s)| (s * (a - b)).powi(2))
            .sum();
        Ok((-d2).exp())
    }

    #[inline]
    fn x_factor(&self, x: f64, x2: f64) -> f64 {
        let d = self.length_scales[0] * (x - x2);
        (-d * d).exp()
    }

    /// `combos x combos` table of the binary-coordinate factor.
    fn discrete_table(&self, schema: Schema) -> Vec<f64> {
        let c = schema.combos();
        let mut t = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                let d2: f64 = (0..schema.binary_dims())
                    .map(|d| {
                        let diff = f64::from(schema.bit(a, d)) - f64::from(schema.bit(b, d));
                        (self.length_scales[d + 1] * diff).powi(2)
                    })
                    .sum();
                t[a * c + b] = (-d2).exp();
            }
        }
        t
    }
}

/// Mean-zero kernel with cached centering data for one model.
#[derive(Clone, Debug)]
pub struct CenteredKernel {
    base: BaseKernel,
    schema: Schema,
    x_atoms: Vec<f64>,
    x_gram: DMatrix<f64>,
    discrete: Vec<f64>,
    f_values: Vec<f64>,
    c_scalar: f64,
    model_fingerprint: u64,
}

/// Center `k` against `m` by exact summation over the model support.
pub fn center_kernel(k: &BaseKernel, m: &FiniteModel) -> Result<CenteredKernel> {
    let schema = m.schema();
    k.check_schema(schema)?;
    let n = m.n_atoms();
    let c = schema.combos();
    let atoms = m.x_atoms();

    let x_gram = DMatrix::from_fn(n, n, |i, j| k.x_factor(atoms[i], atoms[j]));
    let discrete = k.discrete_table(schema);

    // mix[i, c'] = sum_c P(c | x_i) D[c, c']
    let mut mix = DMatrix::<f64>::zeros(n, c);
    for i in 0..n {
        for cc in 0..c {
            let p = m.conditional_mass(i, cc);
            if p == 0.0 {
                continue;
            }
            for c2 in 0..c {
                mix[(i, c2)] += p * discrete[cc * c + c2];
            }
        }
    }
    // f[i', c'] = (1/n) sum_i Kx(x_i', x_i) mix[i, c']
    let f = (&x_gram * &mix) / n as f64;
    let mut f_values = vec![0.0; n * c];
    for i in 0..n {
        for cc in 0..c {
            f_values[i * c + cc] = f[(i, cc)];
        }
    }
    let c_scalar: f64 = (0..n * c)
        .map(|idx| m.cell_mass(idx / c, idx % c) * f_values[idx])
        .sum();
    if !(c_scalar > 0.0) || !c_scalar.is_finite() {
        return Err(KdpeError::Internal(format!(
            "centering constant is not positive: {c_scalar}"
        )));
    }
    Ok(CenteredKernel {
        base: k.clone(),
        schema,
        x_atoms: atoms.to_vec(),
        x_gram,
        discrete,
        f_values,
        c_scalar,
        model_fingerprint: m.fingerprint(),
    })
}

impl CenteredKernel {
    pub fn base(&self) -> &BaseKernel {
        &self.base
    }

    pub fn c_scalar(&self) -> f64 {
        self.c_scalar
    }

    /// `f_P` on the support, atom-major.
    pub fn f_values(&self) -> &[f64] {
        &self.f_values
    }

    pub fn model_fingerprint(&self) -> u64 {
        self.model_fingerprint
    }

    pub fn n_atoms(&self) -> usize {
        self.x_atoms.len()
    }

    pub fn check_model(&self, m: &FiniteModel) -> Result<()> {
        if m.fingerprint() == self.model_fingerprint {
            Ok(())
        } else {
            Err(KdpeError::StaleKernel)
        }
    }

    /// Base kernel between support points `(i, c)` and `(j, c2)`.
    #[inline]
    pub fn base_support(&self, i: usize, c: usize, j: usize, c2: usize) -> f64 {
        self.x_gram[(i, j)] * self.discrete[c * self.schema.combos() + c2]
    }

    #[inline]
    pub fn f_at(&self, i: usize, c: usize) -> f64 {
        self.f_values[i * self.schema.combos() + c]
    }

    /// Centered kernel between support points `(i, c)` and `(j, c2)`.
    #[inline]
    pub fn eval_support(&self, i: usize, c: usize, j: usize, c2: usize) -> f64 {
        self.base_support(i, c, j, c2) - self.f_at(i, c) * self.f_at(j, c2) / self.c_scalar
    }

    /// Writes `K_P((i, c), .)` over the full support into `out`.
    pub fn column_into(&self, i: usize, c: usize, out: &mut [f64]) {
        let cc = self.schema.combos();
        let fi = self.f_at(i, c) / self.c_scalar;
        let drow = &self.discrete[c * cc..(c + 1) * cc];
        for j in 0..self.n_atoms() {
            let kx = self.x_gram[(i, j)];
            let block = &mut out[j * cc..(j + 1) * cc];
            let fblock = &self.f_values[j * cc..(j + 1) * cc];
            for c2 in 0..cc {
                block[c2] = kx * drow[c2] - fi * fblock[c2];
            }
        }
    }

    fn locate(&self, m: &FiniteModel, o: &Observation) -> Result<(usize, usize)> {
        self.schema.check(o.schema())?;
        let i = m.atom_index(o.x()).ok_or(KdpeError::OffSupport(o.x()))?;
        Ok((i, o.combo()))
    }

    /// `K_P(o, o2)`; both points must lie on the support of `m`.
    pub fn eval(&self, m: &FiniteModel, o: &Observation, o2: &Observation) -> Result<f64> {
        self.check_model(m)?;
        let (i, c) = self.locate(m, o)?;
        let (j, c2) = self.locate(m, o2)?;
        Ok(self.eval_support(i, c, j, c2))
    }

    /// Gram matrix `G[i][j] = K_P(O_i, O_j)`; exactly symmetric.
    pub fn gram(&self, m: &FiniteModel, points: &[Observation]) -> Result<DMatrix<f64>> {
        self.check_model(m)?;
        if points.is_empty() {
            return Err(KdpeError::InvalidInput("gram needs at least one point".into()));
        }
        let idx: Vec<(usize, usize)> = points
            .iter()
            .map(|o| self.locate(m, o))
            .collect::<Result<_>>()?;
        Ok(self.gram_at(&idx))
    }

    /// Gram matrix on support indices.
    pub(crate) fn gram_at(&self, idx: &[(usize, usize)]) -> DMatrix<f64> {
        let n = idx.len();
        let mut g = DMatrix::zeros(n, n);
        for a in 0..n {
            let (i, c) = idx[a];
            for b in a..n {
                let (j, c2) = idx[b];
                let v = self.eval_support(i, c, j, c2);
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        g
    }
}

/// Adds [`GRAM_JITTER`] to the diagonal when `g` has no Cholesky factor.
/// Returns whether jitter was applied.
pub fn jitter_if_needed(g: &mut DMatrix<f64>) -> bool {
    if g.clone().cholesky().is_some() {
        return false;
    }
    for i in 0..g.nrows() {
        g[(i, i)] += GRAM_JITTER;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit3() -> BaseKernel {
        BaseKernel::gaussian(vec![1.0; 3]).unwrap()
    }

    #[test]
    fn eval_base_closed_forms() {
        let k = unit3();
        let o = Observation::dgp1(0.3, 1, 0);
        assert_eq!(k.eval(&o, &o).unwrap(), 1.0);
        let v = k
            .eval(&Observation::dgp1(0.0, 0, 0), &Observation::dgp1(1.0, 0, 0))
            .unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn eval_base_symmetric() {
        let k = unit3();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = Observation::dgp1(rng.gen(), rng.gen_range(0..2), rng.gen_range(0..2));
            let b = Observation::dgp1(rng.gen(), rng.gen_range(0..2), rng.gen_range(0..2));
            let (ab, ba) = (k.eval(&a, &b).unwrap(), k.eval(&b, &a).unwrap());
            assert_eq!(ab, ba);
            assert!(ab > 0.0 && ab <= 1.0);
        }
    }

    #[test]
    fn eval_base_schema_mismatch() {
        let k = unit3();
        let a = Observation::dgp1(0.0, 0, 0);
        let b = Observation::dgp2(0.0, 0, 0, 0, 0);
        assert!(k.eval(&a, &b).is_err());
        assert!(k.eval(&b, &b).is_err());
    }

    #[test]
    fn single_atom_degenerates() {
        // all mass on (0.4, a=1, y=0)
        let m = FiniteModel::dgp1(vec![0.4], vec![1.0], vec![[0.5, 0.0]]).unwrap();
        let ck = center_kernel(&unit3(), &m).unwrap();
        let o = Observation::dgp1(0.4, 1, 0);
        assert!(ck.eval(&m, &o, &o).unwrap().abs() < 1e-15);
    }

    #[test]
    fn two_atom_hand_sums() {
        // x in {0, 1}, a = y = 0 almost surely
        let m = FiniteModel::dgp1(vec![0.0, 1.0], vec![0.0, 0.0], vec![[0.0, 0.0]; 2]).unwrap();
        let ck = center_kernel(&unit3(), &m).unwrap();
        let e = (-1.0f64).exp();
        let f0 = 0.5 * (1.0 + e);
        let f1 = 0.5 * (e + 1.0);
        let c = 0.5 * f0 + 0.5 * f1;
        let k00 = 1.0 - f0 * f0 / c;
        let k01 = e - f0 * f1 / c;
        let p0 = Observation::dgp1(0.0, 0, 0);
        let p1 = Observation::dgp1(1.0, 0, 0);
        assert!((ck.eval(&m, &p0, &p0).unwrap() - k00).abs() < 1e-12);
        assert!((ck.eval(&m, &p0, &p1).unwrap() - k01).abs() < 1e-12);
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize, schema: Schema) -> FiniteModel {
        let atoms: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 8.0).collect();
        let g0 = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        match schema {
            Schema::Dgp1 => FiniteModel::dgp1(
                atoms,
                g0,
                (0..n).map(|_| [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]).collect(),
            ),
            Schema::Dgp2 => FiniteModel::dgp2(
                atoms,
                g0,
                (0..n).map(|_| [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]).collect(),
                (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(0.05..0.95))).collect(),
                (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(0.05..0.95))).collect(),
            ),
        }
        .unwrap()
    }

    #[test]
    fn centering_is_mean_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for schema in [Schema::Dgp1, Schema::Dgp2] {
            let m = random_model(&mut rng, 12, schema);
            let ck = center_kernel(&BaseKernel::default_for(schema), &m).unwrap();
            let c = schema.combos();
            for j in 0..m.n_atoms() {
                for c2 in 0..c {
                    let s: f64 = (0..m.support_len())
                        .map(|k| m.cell_mass(k / c, k % c) * ck.eval_support(k / c, k % c, j, c2))
                        .sum();
                    assert!(s.abs() < 1e-10, "{schema}: {s}");
                }
            }
        }
    }

    #[test]
    fn f_values_match_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 6, Schema::Dgp2);
        let k = BaseKernel::default_for(Schema::Dgp2);
        let ck = center_kernel(&k, &m).unwrap();
        for i in 0..6 {
            for c in 0..16 {
                let o = Observation::from_combo(Schema::Dgp2, m.x_atoms()[i], c);
                let direct: f64 = (0..m.support_len())
                    .map(|s| {
                        let o2 = Observation::from_combo(Schema::Dgp2, m.x_atoms()[s / 16], s % 16);
                        m.cell_mass(s / 16, s % 16) * k.eval(&o, &o2).unwrap()
                    })
                    .sum();
                assert!((ck.f_at(i, c) - direct).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn recentering_has_nothing_to_remove() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_model(&mut rng, 10, Schema::Dgp1);
        let ck = center_kernel(&unit3(), &m).unwrap();
        let c = 4;
        let f2: Vec<f64> = (0..m.support_len())
            .map(|o| {
                (0..m.support_len())
                    .map(|s| m.cell_mass(s / c, s % c) * ck.eval_support(o / c, o % c, s / c, s % c))
                    .sum()
            })
            .collect();
        let c2: f64 = (0..m.support_len()).map(|s| m.cell_mass(s / c, s % c) * f2[s]).sum();
        assert!(f2.iter().all(|v| v.abs() < 1e-10));
        assert!(c2.abs() < 1e-10);
    }

    #[test]
    fn gram_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_model(&mut rng, 50, Schema::Dgp1);
        let ck = center_kernel(&unit3(), &m).unwrap();
        let pts: Vec<Observation> = m
            .x_atoms()
            .iter()
            .map(|&x| Observation::dgp1(x, rng.gen_range(0..2), rng.gen_range(0..2)))
            .collect();
        let g = ck.gram(&m, &pts).unwrap();
        assert_eq!(g, g.transpose());
        let min_eig = g.clone().symmetric_eigenvalues().min();
        assert!(min_eig >= -1e-8, "{min_eig}");

        let one = ck.gram(&m, &pts[..1]).unwrap();
        assert_eq!(one[(0, 0)], ck.eval(&m, &pts[0], &pts[0]).unwrap());
    }

    #[test]
    fn stale_kernel_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 4, Schema::Dgp1);
        let other = random_model(&mut rng, 4, Schema::Dgp1);
        let ck = center_kernel(&unit3(), &m).unwrap();
        let p = [Observation::dgp1(m.x_atoms()[0], 0, 1)];
        assert!(matches!(ck.gram(&other, &p), Err(KdpeError::StaleKernel)));
    }

    #[test]
    fn jitter_only_when_needed() {
        let mut pd = DMatrix::<f64>::identity(3, 3);
        assert!(!jitter_if_needed(&mut pd));
        let mut singular = DMatrix::from_element(3, 3, 1.0);
        assert!(jitter_if_needed(&mut singular));
        assert_eq!(singular[(0, 0)], 1.0 + GRAM_JITTER);
    }
}

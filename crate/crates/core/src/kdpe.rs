//! The KDPE outer loop.
//!
//! Each iteration re-centers the kernel against the current model, projects
//! the kernel sections at the observed points onto the tangent space of the
//! updatable factors, solves the fluctuation problem and applies the update.
//! The loop stops once the L2 step between consecutive models falls to `gamma`.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distribution::{
    apply_fluctuation, project_intermediate_block, project_outcome_block, FiniteModel, Projection,
    ProjectedScore, ScoreField,
};
use crate::error::{KdpeError, Result};
use crate::kernel::{center_kernel, jitter_if_needed, BaseKernel, CenteredKernel};
use crate::observation::{Observation, Schema};
use crate::solver::{solve_fluctuation, BoundRows, FluctuationProblem, SolverStatus};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdpeConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub c_bound: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer_iterations: usize,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
}

fn default_max_outer() -> usize {
    50
}

fn default_solver_tol() -> f64 {
    1e-8
}

impl KdpeConfig {
    pub fn default_for(schema: Schema) -> Self {
        let (lambda, gamma) = match schema {
            Schema::Dgp1 => (0.0, 0.002),
            Schema::Dgp2 => (15.0, 0.0001),
        };
        KdpeConfig {
            lambda,
            gamma,
            c_bound: 0.001,
            max_outer_iterations: default_max_outer(),
            solver_tol: default_solver_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(KdpeError::InvalidInput(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0) {
            return Err(KdpeError::InvalidInput(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.c_bound > 0.0 && self.c_bound < 0.5) {
            return Err(KdpeError::InvalidInput(format!(
                "c_bound must lie in (0, 0.5), got {}",
                self.c_bound
            )));
        }
        if self.max_outer_iterations == 0 {
            return Err(KdpeError::InvalidInput("max_outer_iterations must be >= 1".into()));
        }
        if !(self.solver_tol > 0.0) {
            return Err(KdpeError::InvalidInput("solver_tol must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub alpha_norm: f64,
    pub objective_drop: f64,
    pub l2_step: f64,
    /// `max_j |P_n k_j|` of the projected columns before the update.
    pub max_score_residual: f64,
    pub newton_iterations: usize,
    pub barrier_outer_rounds: usize,
    pub kkt_residual: f64,
    pub solver_status: SolverStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdpeStatus {
    Converged,
    IterationCap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdpeTrace {
    pub records: Vec<IterationRecord>,
    pub status: KdpeStatus,
}

impl KdpeTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn converged(&self) -> bool {
        self.status == KdpeStatus::Converged
    }

    /// One JSON object per iteration, then a terminal status line.
    pub fn write_json_lines<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        serde_json::to_writer(&mut w, &serde_json::json!({ "status": self.status }))?;
        writeln!(w)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct KdpeFit {
    pub model: FiniteModel,
    pub trace: KdpeTrace,
    pub seconds: f64,
}

/// Projected kernel sections at the observed points, evaluated where the
/// solver needs them.
struct Columns {
    /// `H[i][j]`: total projected section `j` at observation `i`.
    observed: DMatrix<f64>,
    /// Projected sections at the `P(=1)` cell of every updatable table entry.
    bound_scores: DMatrix<f64>,
    bound_base: Vec<f64>,
}

fn support_index(data: &[Observation]) -> Vec<(usize, usize)> {
    data.iter().enumerate().map(|(i, o)| (i, o.combo())).collect()
}

/// Base values of the updatable tables, in bound-row order.
fn updatable_entries(m: &FiniteModel) -> Vec<f64> {
    match m.schema() {
        Schema::Dgp1 => m.q_y().to_vec(),
        Schema::Dgp2 => m.q_l1().iter().chain(m.q_y()).copied().collect(),
    }
}

fn build_columns(m: &FiniteModel, kc: &CenteredKernel, idx: &[(usize, usize)]) -> Columns {
    let n = idx.len();
    let c = m.schema().combos();
    let bound_base = updatable_entries(m);
    let mut observed = DMatrix::zeros(n, n);
    let mut bound_scores = DMatrix::zeros(bound_base.len(), n);
    let mut raw = vec![0.0; n * c];
    let mut proj_y = vec![0.0; c];
    let mut proj_l1 = vec![0.0; c];
    for (j, &(aj, cj)) in idx.iter().enumerate() {
        kc.column_into(aj, cj, &mut raw);
        for i in 0..n {
            let block = &raw[i * c..(i + 1) * c];
            project_outcome_block(m, i, block, &mut proj_y);
            match m.schema() {
                Schema::Dgp1 => {
                    for a in 0..2 {
                        bound_scores[(i * 2 + a, j)] = proj_y[(a << 1) | 1];
                    }
                    observed[(i, j)] = proj_y[idx[i].1];
                }
                Schema::Dgp2 => {
                    project_intermediate_block(m, i, block, &mut proj_l1);
                    for a0 in 0..2 {
                        bound_scores[(i * 2 + a0, j)] = proj_l1[(a0 << 3) | (1 << 2)];
                    }
                    let off = 2 * n;
                    for p in 0..8 {
                        bound_scores[(off + i * 8 + p, j)] = proj_y[(p << 1) | 1];
                    }
                    let ci = idx[i].1;
                    observed[(i, j)] = proj_y[ci] + proj_l1[ci];
                }
            }
        }
    }
    Columns {
        observed,
        bound_scores,
        bound_base,
    }
}

/// `sum_j alpha_j k_j` over the full support, projected per schema.
fn combined_score(
    m: &FiniteModel,
    kc: &CenteredKernel,
    idx: &[(usize, usize)],
    alpha: &[f64],
) -> Result<ProjectedScore> {
    let c = m.schema().combos();
    let len = m.support_len();
    let mut raw = vec![0.0; len];
    let mut col = vec![0.0; len];
    for (&(aj, cj), &w) in idx.iter().zip(alpha) {
        if w == 0.0 {
            continue;
        }
        kc.column_into(aj, cj, &mut col);
        raw.iter_mut().zip(&col).for_each(|(r, v)| *r += w * v);
    }
    let mut y = vec![0.0; len];
    let mut l1 = vec![0.0; len];
    for i in 0..m.n_atoms() {
        let r = i * c..(i + 1) * c;
        project_outcome_block(m, i, &raw[r.clone()], &mut y[r.clone()]);
        if m.schema() == Schema::Dgp2 {
            project_intermediate_block(m, i, &raw[r.clone()], &mut l1[r]);
        }
    }
    let field = |values, p| ScoreField::with_projection(m.schema(), m.n_atoms(), values, p);
    Ok(match m.schema() {
        Schema::Dgp1 => ProjectedScore::Outcome(field(y, Projection::Outcome)?),
        Schema::Dgp2 => ProjectedScore::Longitudinal {
            l1: field(l1, Projection::Intermediate)?,
            y: field(y, Projection::Outcome)?,
        },
    })
}

fn column_means(h: &DMatrix<f64>) -> Vec<f64> {
    let n = h.nrows() as f64;
    h.column_iter().map(|c| c.sum() / n).collect()
}

/// Runs KDPE from `pre`. The model atoms must be the observed covariates.
pub fn kdpe_fit(
    data: &[Observation],
    pre: &FiniteModel,
    k: &BaseKernel,
    cfg: &KdpeConfig,
) -> Result<KdpeFit> {
    cfg.validate()?;
    pre.check_atoms(data)?;
    let margin = pre.updatable_margin(cfg.c_bound);
    if !(margin > 0.0) {
        return Err(KdpeError::InvalidInput(format!(
            "initial tables must lie strictly inside [{c}, {}]; clip the pre-estimate above c_bound",
            1.0 - cfg.c_bound,
            c = cfg.c_bound
        )));
    }
    let start = Instant::now();
    let idx = support_index(data);
    let mut model = pre.clone();
    let mut records = Vec::new();
    let mut status = KdpeStatus::IterationCap;

    for iteration in 0..cfg.max_outer_iterations {
        let kc = center_kernel(k, &model)?;
        let cols = build_columns(&model, &kc, &idx);
        let max_score_residual = column_means(&cols.observed)
            .into_iter()
            .fold(0.0, |a: f64, v| a.max(v.abs()));
        let mut gram = kc.gram_at(&idx);
        if cfg.lambda > 0.0 && jitter_if_needed(&mut gram) {
            log::debug!("iteration {iteration}: gram jittered");
        }
        let prob = FluctuationProblem {
            observed: cols.observed,
            gram,
            lambda: cfg.lambda,
            bounds: BoundRows::from_scores(cols.bound_base, &cols.bound_scores, cfg.c_bound),
        };
        let sol = solve_fluctuation(&prob, cfg.solver_tol)?;
        debug_assert!(sol.objective <= sol.objective_at_zero + 1e-10);

        let score = combined_score(&model, &kc, &idx, &sol.alpha)?;
        let next = apply_fluctuation(&model, &score, cfg.c_bound).map_err(|e| {
            KdpeError::Solver(format!("update at iteration {iteration} is infeasible: {e}"))
        })?;
        let l2_step = next.l2_distance(&model)?;
        let alpha_norm = sol.alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
        log::debug!(
            "iteration {iteration}: |alpha| = {alpha_norm:.3e}, l2 = {l2_step:.3e}, residual = {max_score_residual:.3e}"
        );
        records.push(IterationRecord {
            iteration,
            alpha_norm,
            objective_drop: sol.objective_at_zero - sol.objective,
            l2_step,
            max_score_residual,
            newton_iterations: sol.newton_iterations,
            barrier_outer_rounds: sol.barrier_outer_rounds,
            kkt_residual: sol.kkt_residual,
            solver_status: sol.status,
        });
        model = next;
        if l2_step <= cfg.gamma {
            status = KdpeStatus::Converged;
            break;
        }
    }
    if status == KdpeStatus::IterationCap {
        log::warn!("KDPE stopped at the iteration cap ({})", cfg.max_outer_iterations);
    }
    Ok(KdpeFit {
        model,
        trace: KdpeTrace { records, status },
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// `P_n` of each projected, centered kernel section at the observed points.
pub fn score_residuals(m: &FiniteModel, data: &[Observation], k: &BaseKernel) -> Result<Vec<f64>> {
    m.check_atoms(data)?;
    let kc = center_kernel(k, m)?;
    let cols = build_columns(m, &kc, &support_index(data));
    Ok(column_means(&cols.observed))
}

/// `P_n` of the raw base-kernel sections, with no centering or projection.
pub fn raw_kernel_residuals(data: &[Observation], k: &BaseKernel) -> Result<Vec<f64>> {
    let n = data.len() as f64;
    data.iter()
        .map(|oj| {
            data.iter()
                .map(|oi| k.eval(oj, oi))
                .sum::<Result<f64>>()
                .map(|s| s / n)
        })
        .collect()
}

//! Monte Carlo campaigns: replications x methods x targets, plus the
//! bootstrap study. Output does not depend on the worker count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ltmle_fit_dgp2, naive_plugin, tmle_fit_dgp1, TmleConfig};
use crate::bootstrap::{bootstrap_multi, BootstrapResult};
use crate::config::{Method, RunConfig};
use crate::distribution::FiniteModel;
use crate::error::{KdpeError, Result};
use crate::functionals::{evaluate, TargetParameter};
use crate::kdpe::{kdpe_fit, KdpeTrace};
use crate::observation::Observation;
use crate::preestimate::fit_pre_estimate;
use crate::simulation::{derive_seed, generate_replication, true_parameters};

pub const HISTOGRAM_BINS: usize = 30;

/// One estimate of one target by one method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub target: TargetParameter,
    pub estimate: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct MethodRun {
    pub estimates: Vec<MethodEstimate>,
    /// KDPE only.
    pub trace: Option<KdpeTrace>,
    /// KDPE only.
    pub model: Option<FiniteModel>,
}

/// Fits `method` on `data` from the shared pre-estimate.
pub fn run_method(
    data: &[Observation],
    pre: &FiniteModel,
    method: Method,
    cfg: &RunConfig,
) -> Result<MethodRun> {
    let targets = &cfg.targets;
    let start = Instant::now();
    match method {
        Method::Naive => {
            let estimates = targets
                .iter()
                .map(|&t| {
                    Ok(MethodEstimate {
                        target: t,
                        estimate: naive_plugin(pre, t)?,
                        iterations: 0,
                        converged: true,
                        seconds: 0.0,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(MethodRun { estimates, trace: None, model: None })
        }
        Method::Kdpe => {
            let fit = kdpe_fit(data, pre, &cfg.kernel()?, &cfg.kdpe_config())?;
            let estimates = targets
                .iter()
                .map(|&t| {
                    Ok(MethodEstimate {
                        target: t,
                        estimate: evaluate(&fit.model, t)?,
                        iterations: fit.trace.iterations(),
                        converged: fit.trace.converged(),
                        seconds: fit.seconds,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(MethodRun { estimates, trace: Some(fit.trace), model: Some(fit.model) })
        }
        Method::Tmle => {
            let mut estimates = Vec::with_capacity(targets.len());
            for &t in targets {
                let t0 = Instant::now();
                let one = TmleConfig { targets: vec![t], ..cfg.tmle.clone() };
                let fit = tmle_fit_dgp1(data, pre, &one)?.remove(0);
                estimates.push(MethodEstimate {
                    target: t,
                    estimate: fit.estimate,
                    iterations: fit.iterations(),
                    converged: fit.converged,
                    seconds: t0.elapsed().as_secs_f64(),
                });
            }
            Ok(MethodRun { estimates, trace: None, model: None })
        }
        Method::Ltmle => {
            let mu1 = ltmle_fit_dgp2(data, pre, 1)?.mu;
            let mu0 = ltmle_fit_dgp2(data, pre, 0)?.mu;
            let seconds = start.elapsed().as_secs_f64();
            let estimates = targets
                .iter()
                .map(|&t| MethodEstimate {
                    target: t,
                    estimate: t.combine(mu1, mu0),
                    iterations: 1,
                    converged: true,
                    seconds,
                })
                .collect();
            Ok(MethodRun { estimates, trace: None, model: None })
        }
    }
}

/// A row of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sim_id: u64,
    pub method: Method,
    pub target: TargetParameter,
    pub estimate: f64,
    pub true_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Replication {
    pub sim_id: u64,
    pub rows: Vec<ResultRow>,
    pub kdpe_trace: Option<KdpeTrace>,
}

/// Runs every configured method on replication `sim_id`. A method that
/// errors yields non-converged rows with `NaN` estimates.
pub fn run_replication(cfg: &RunConfig, sim_id: u64) -> Result<Replication> {
    let truth = true_parameters(cfg.dgp.kind);
    let data = generate_replication(&cfg.dgp, sim_id)?;
    let pre = fit_pre_estimate(&data, &cfg.pre_estimate)?;
    let mut rows = Vec::new();
    let mut kdpe_trace = None;
    for method in cfg.methods() {
        let run = run_method(&data, &pre, method, cfg).unwrap_or_else(|e| {
            log::warn!("sim {sim_id}: {method} failed: {e}");
            MethodRun {
                estimates: cfg
                    .targets
                    .iter()
                    .map(|&t| MethodEstimate {
                        target: t,
                        estimate: f64::NAN,
                        iterations: 0,
                        converged: false,
                        seconds: 0.0,
                    })
                    .collect(),
                trace: None,
                model: None,
            }
        });
        if method == Method::Kdpe {
            kdpe_trace = run.trace;
        }
        rows.extend(run.estimates.iter().map(|e| ResultRow {
            sim_id,
            method,
            target: e.target,
            estimate: e.estimate,
            true_value: truth.value(e.target),
            iterations: e.iterations,
            converged: e.converged,
            seconds: e.seconds,
        }));
    }
    Ok(Replication {
        sim_id,
        rows,
        kdpe_trace,
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| KdpeError::Internal(format!("thread pool: {e}")))
}

/// All replications, in `sim_id` order.
pub fn run_benchmark(cfg: &RunConfig) -> Result<Vec<Replication>> {
    cfg.validate()?;
    // computed once up front so workers do not race to initialize it
    let _ = true_parameters(cfg.dgp.kind);
    pool(cfg.jobs)?.install(|| {
        (0..cfg.sims as u64)
            .into_par_iter()
            .map(|s| run_replication(cfg, s))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub target: TargetParameter,
    pub runs: usize,
    pub failed: usize,
    pub not_converged: usize,
    pub true_value: f64,
    pub mean_estimate: f64,
    pub rmse: f64,
    pub bias: f64,
    pub variance: f64,
    pub mean_iterations: f64,
    pub median_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub dgp: String,
    pub n: usize,
    pub sims: usize,
    pub cells: Vec<CellSummary>,
}

impl BenchmarkSummary {
    pub fn cell(&self, method: Method, target: TargetParameter) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.method == method && c.target == target)
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// RMSE, bias and variance over the finite estimates of each cell.
pub fn summarize(cfg: &RunConfig, rows: &[ResultRow]) -> BenchmarkSummary {
    let mut groups: BTreeMap<(Method, TargetParameter), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method, r.target)).or_default().push(r);
    }
    let cells = groups
        .into_iter()
        .map(|((method, target), rs)| {
            let ok: Vec<&&ResultRow> = rs.iter().filter(|r| r.estimate.is_finite()).collect();
            let k = ok.len() as f64;
            let truth = rs[0].true_value;
            let mean = ok.iter().map(|r| r.estimate).sum::<f64>() / k;
            let mse = ok.iter().map(|r| (r.estimate - truth).powi(2)).sum::<f64>() / k;
            let variance = ok.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / k;
            let mut secs: Vec<f64> = ok.iter().map(|r| r.seconds).collect();
            CellSummary {
                method,
                target,
                runs: rs.len(),
                failed: rs.len() - ok.len(),
                not_converged: rs.iter().filter(|r| !r.converged).count(),
                true_value: truth,
                mean_estimate: mean,
                rmse: mse.sqrt(),
                bias: mean - truth,
                variance,
                mean_iterations: ok.iter().map(|r| r.iterations as f64).sum::<f64>() / k,
                median_seconds: median(&mut secs),
            }
        })
        .collect();
    BenchmarkSummary {
        dgp: cfg.dgp.kind.to_string(),
        n: cfg.dgp.n,
        sims: cfg.sims,
        cells,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub method: Method,
    pub target: TargetParameter,
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub count: usize,
}

/// Estimate histograms with shared bin edges per target.
pub fn histogram(rows: &[ResultRow], bins: usize) -> Vec<HistogramBin> {
    let mut by_target: BTreeMap<TargetParameter, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.estimate.is_finite()) {
        by_target.entry(r.target).or_default().push(r);
    }
    let mut out = Vec::new();
    for (target, rs) in by_target {
        let lo = rs.iter().map(|r| r.estimate).fold(f64::INFINITY, f64::min);
        let hi = rs.iter().map(|r| r.estimate).fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut methods: Vec<Method> = rs.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        for method in methods {
            let mut counts = vec![0usize; bins];
            for r in rs.iter().filter(|r| r.method == method) {
                let b = (((r.estimate - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            out.extend(counts.into_iter().enumerate().map(|(b, count)| HistogramBin {
                method,
                target,
                bin_lower: lo + b as f64 * width,
                bin_upper: lo + (b + 1) as f64 * width,
                count,
            }));
        }
    }
    out
}

/// A row of the bootstrap CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub sim_id: u64,
    pub method: Method,
    pub target: TargetParameter,
    pub estimate: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: u8,
}

fn bootstrap_replication(cfg: &RunConfig, sim_id: u64) -> Result<Vec<BootstrapRow>> {
    let truth = true_parameters(cfg.dgp.kind);
    let data = generate_replication(&cfg.dgp, sim_id)?;
    let mut rows = Vec::new();
    for method in cfg.methods() {
        let estimator = |d: &[Observation]| -> Result<Vec<f64>> {
            let pre = fit_pre_estimate(d, &cfg.pre_estimate)?;
            let run = run_method(d, &pre, method, cfg)?;
            if let Some(e) = run.estimates.iter().find(|e| !e.converged) {
                return Err(KdpeError::Solver(format!("{method} did not converge for {}", e.target)));
            }
            Ok(run.estimates.iter().map(|e| e.estimate).collect())
        };
        let seed = derive_seed(cfg.dgp.seed, sim_id);
        let results: Vec<BootstrapResult> = match bootstrap_multi(&data, estimator, &cfg.bootstrap, seed) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("sim {sim_id}: bootstrap for {method} failed: {e}");
                continue;
            }
        };
        rows.extend(cfg.targets.iter().zip(results).map(|(&t, r)| BootstrapRow {
            sim_id,
            method,
            target: t,
            estimate: r.estimate,
            variance: r.variance,
            lower: r.lower,
            upper: r.upper,
            covered: u8::from(r.covers(truth.value(t))),
        }));
    }
    Ok(rows)
}

/// Bootstrap intervals for every replication, method and target. Failed
/// cells are logged and left out.
pub fn run_bootstrap_study(cfg: &RunConfig) -> Result<Vec<BootstrapRow>> {
    cfg.validate()?;
    let _ = true_parameters(cfg.dgp.kind);
    let per_sim: Vec<Vec<BootstrapRow>> = pool(cfg.jobs)?.install(|| {
        (0..cfg.sims as u64)
            .into_par_iter()
            .map(|s| bootstrap_replication(cfg, s))
            .collect::<Result<_>>()
    })?;
    Ok(per_sim.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub method: Method,
    pub target: TargetParameter,
    pub intervals: usize,
    pub coverage: f64,
    pub mean_length: f64,
}

pub fn coverage_summary(rows: &[BootstrapRow]) -> Vec<CoverageSummary> {
    let mut groups: BTreeMap<(Method, TargetParameter), Vec<&BootstrapRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method, r.target)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, target), rs)| {
            let k = rs.len() as f64;
            CoverageSummary {
                method,
                target,
                intervals: rs.len(),
                coverage: rs.iter().map(|r| f64::from(r.covered)).sum::<f64>() / k,
                mean_length: rs.iter().map(|r| r.upper - r.lower).sum::<f64>() / k,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize, W: Write>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_csv(std::fs::File::create(path)?, rows)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

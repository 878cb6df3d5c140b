use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kdpe_core::benchmark::{
    coverage_summary, histogram, run_benchmark, run_bootstrap_study, run_method, summarize,
    write_csv_file, write_json_file, ResultRow, HISTOGRAM_BINS,
};
use kdpe_core::config::{parse_methods, Method, RunConfig};
use kdpe_core::distribution::ModelDocument;
use kdpe_core::functionals::TargetParameter;
use kdpe_core::observation::{read_dataset_csv, write_dataset_csv, Schema};
use kdpe_core::preestimate::fit_pre_estimate;
use kdpe_core::simulation::{generate, DgpSpec};
use kdpe_core::KdpeError;

const EXIT_ERROR: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "kdpe", version, about = "Kernel debiased plug-in estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one dataset and write it as CSV.
    Simulate(Overrides),
    /// Fit every configured method on one dataset.
    Fit {
        #[command(flatten)]
        o: Overrides,
        /// Dataset CSV to fit instead of simulating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Monte Carlo campaign: results CSV, summary JSON and histogram bins.
    Benchmark(Overrides),
    /// Bootstrap intervals and coverage over replications.
    Bootstrap {
        #[command(flatten)]
        o: Overrides,
        /// Bootstrap resamples per interval.
        #[arg(long)]
        resamples: Option<usize>,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dgp: Option<Schema>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sims: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "c-bound")]
    c_bound: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated, e.g. `kdpe,tmle,naive`.
    #[arg(long)]
    methods: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Write per-iteration KDPE traces as JSON lines.
    #[arg(long)]
    trace: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, KdpeError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(DgpSpec::new(Schema::Dgp1, 300, 0)?),
        };
        if let Some(kind) = self.dgp {
            if kind != cfg.dgp.kind {
                cfg.dgp.kind = kind;
                cfg.kdpe = None;
                cfg.kernel_length_scales = None;
            }
        }
        if let Some(n) = self.n {
            cfg.dgp.n = n;
        }
        if let Some(s) = self.seed {
            cfg.dgp.seed = s;
        }
        if let Some(s) = self.sims {
            cfg.sims = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(m) = &self.methods {
            cfg.methods = Some(parse_methods(m)?);
        }
        if self.lambda.is_some() || self.gamma.is_some() || self.c_bound.is_some() {
            let mut k = cfg.kdpe_config();
            k.lambda = self.lambda.unwrap_or(k.lambda);
            k.gamma = self.gamma.unwrap_or(k.gamma);
            k.c_bound = self.c_bound.unwrap_or(k.c_bound);
            cfg.kdpe = Some(k);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn prepare_dir(dir: &Path) -> Result<(), KdpeError> {
    fs::create_dir_all(dir)
        .map_err(|e| KdpeError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn simulate(o: &Overrides) -> Result<u8, KdpeError> {
    let cfg = o.resolve()?;
    prepare_dir(&cfg.output_dir)?;
    let data = generate(&cfg.dgp)?;
    let path = cfg.output_dir.join(format!(
        "{}_n{}_seed{}.csv",
        cfg.dgp.kind, cfg.dgp.n, cfg.dgp.seed
    ));
    write_dataset_csv(fs::File::create(&path)?, &data)?;
    println!("{}", path.display());
    Ok(0)
}

fn fit(o: &Overrides, data_path: Option<&Path>) -> Result<u8, KdpeError> {
    let mut cfg = o.resolve()?;
    let data = match data_path {
        Some(p) => {
            let d = read_dataset_csv(fs::File::open(p)?)?;
            let kind = d[0].schema();
            if kind != cfg.dgp.kind && o.dgp.is_none() {
                let mut with_kind = o.clone();
                with_kind.dgp = Some(kind);
                cfg = with_kind.resolve()?;
            }
            d
        }
        None => generate(&cfg.dgp)?,
    };
    if data[0].schema() != cfg.dgp.kind {
        return Err(KdpeError::Config(format!(
            "dataset is {} but the run is configured for {}",
            data[0].schema(),
            cfg.dgp.kind
        )));
    }
    prepare_dir(&cfg.output_dir)?;
    let pre = fit_pre_estimate(&data, &cfg.pre_estimate)?;
    let mut rows = Vec::new();
    println!("{:<6} {:<4} {:>12} {:>6} {:>9}", "method", "target", "estimate", "iters", "converged");
    for method in cfg.methods() {
        let run = run_method(&data, &pre, method, &cfg)?;
        for e in &run.estimates {
            println!(
                "{:<6} {:<4} {:>12.6} {:>6} {:>9}",
                method, e.target, e.estimate, e.iterations, e.converged
            );
            rows.push(FitRow {
                method,
                target: e.target,
                estimate: e.estimate,
                iterations: e.iterations,
                converged: e.converged,
                seconds: e.seconds,
            });
        }
        if let Some(model) = &run.model {
            let doc = ModelDocument::from_model(model, Some(cfg.kdpe_config().c_bound));
            fs::write(cfg.output_dir.join("kdpe_model.json"), doc.to_json()?)?;
        }
        if let (Some(trace), true) = (&run.trace, o.trace) {
            trace.write_json_lines(fs::File::create(cfg.output_dir.join("kdpe_trace.jsonl"))?)?;
        }
    }
    write_csv_file(&cfg.output_dir.join("fit.csv"), &rows)?;
    let converged = rows.iter().all(|r| r.converged);
    Ok(if converged { 0 } else { EXIT_NOT_CONVERGED })
}

#[derive(serde::Serialize)]
struct FitRow {
    method: Method,
    target: TargetParameter,
    estimate: f64,
    iterations: usize,
    converged: bool,
    seconds: f64,
}

fn benchmark(o: &Overrides) -> Result<u8, KdpeError> {
    let cfg = o.resolve()?;
    prepare_dir(&cfg.output_dir)?;
    let reps = run_benchmark(&cfg)?;
    if o.trace {
        let dir = cfg.output_dir.join("traces");
        prepare_dir(&dir)?;
        for r in &reps {
            if let Some(t) = &r.kdpe_trace {
                t.write_json_lines(fs::File::create(dir.join(format!("sim_{:04}.jsonl", r.sim_id)))?)?;
            }
        }
    }
    let rows: Vec<ResultRow> = reps.into_iter().flat_map(|r| r.rows).collect();
    write_csv_file(&cfg.output_dir.join("results.csv"), &rows)?;
    let summary = summarize(&cfg, &rows);
    write_json_file(&cfg.output_dir.join("summary.json"), &summary)?;
    write_csv_file(&cfg.output_dir.join("histogram.csv"), &histogram(&rows, HISTOGRAM_BINS))?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml_string()?)?;

    println!("{:<6} {:<4} {:>10} {:>10} {:>10} {:>8}", "method", "target", "rmse", "bias", "variance", "iters");
    for c in &summary.cells {
        println!(
            "{:<6} {:<4} {:>10.5} {:>10.5} {:>10.3e} {:>8.2}",
            c.method, c.target, c.rmse, c.bias, c.variance, c.mean_iterations
        );
    }
    let stalled = rows.iter().filter(|r| !r.converged).count();
    if stalled > 0 {
        log::warn!("{stalled} result rows did not converge");
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn bootstrap(o: &Overrides, resamples: Option<usize>) -> Result<u8, KdpeError> {
    let mut cfg = o.resolve()?;
    if let Some(m) = resamples {
        cfg.bootstrap.m = m;
        cfg.validate()?;
    }
    prepare_dir(&cfg.output_dir)?;
    let rows = run_bootstrap_study(&cfg)?;
    write_csv_file(&cfg.output_dir.join("bootstrap.csv"), &rows)?;
    let coverage = coverage_summary(&rows);
    write_json_file(&cfg.output_dir.join("coverage.json"), &coverage)?;
    println!("{:<6} {:<4} {:>9} {:>9} {:>9}", "method", "target", "intervals", "coverage", "length");
    for c in &coverage {
        println!(
            "{:<6} {:<4} {:>9} {:>9.3} {:>9.4}",
            c.method, c.target, c.intervals, c.coverage, c.mean_length
        );
    }
    let expected = cfg.sims * cfg.methods().len() * cfg.targets.len();
    Ok(if rows.len() == expected { 0 } else { EXIT_NOT_CONVERGED })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KDPE_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(o) => simulate(o),
        Command::Fit { o, data } => fit(o, data.as_deref()),
        Command::Benchmark(o) => benchmark(o),
        Command::Bootstrap { o, resamples } => bootstrap(o, *resamples),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

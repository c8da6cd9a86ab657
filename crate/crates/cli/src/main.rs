use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::error;

use plpmlg::design::{CovariateKind, SampleDesign};
use plpmlg::estimators::Method;
use plpmlg::harness::{
    draw_sample, emit_report, fit_method, load_run_config, prepare_population, read_estimates_csv,
    read_truth_csv, run_replicates, write_estimates_csv, write_metric_reports, Prepared, RunConfig, RunOutput,
};

#[derive(Parser)]
#[command(name = "plpmlg", version, about = "Small area estimation of vacancy totals under informative sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration (or a previous run's manifest.toml).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    #[arg(long = "sample-size", global = true)]
    sample_size: Option<usize>,
    /// Comma-separated subset of direct, GA, PL-PMLG, UW-PMLG.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full replicated protocol and write the reports.
    Simulate,
    /// Draw one replicate's Midzuno sample and write it as CSV.
    Sample {
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Fit one method to a sample written by `sample`.
    Fit {
        #[arg(long)]
        method: String,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Recompute metrics from `estimates.csv` and `truth.csv` in the output directory.
    Report {
        #[arg(long, default_value_t = 0)]
        points_replicate: usize,
    },
}

fn resolve_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.replicates {
        cfg.n_replicates = v;
    }
    if let Some(v) = common.sample_size {
        cfg.n_sample = v;
    }
    if let Some(list) = &common.methods {
        cfg.methods = list.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    }
    if let Some(v) = &common.out {
        cfg.out = v.clone();
    }
    if let Some(v) = common.workers {
        cfg.workers = v;
    }
    Ok(cfg)
}

fn simulate(cfg: &RunConfig) -> anyhow::Result<bool> {
    let output = run_replicates(cfg)?;
    let metrics = output.metrics(&cfg.method_list(), cfg.abs_bias)?;
    emit_report(&output, &metrics, cfg)?;
    for m in &metrics {
        println!("{:<8} mse {:>12.3}  abs_bias {:>10.3}", m.method.name(), m.mse, m.abs_bias);
    }
    for f in &output.failures {
        eprintln!("failed: replicate {} {}: {}", f.replicate, f.method, f.message);
    }
    Ok(output.failures.is_empty())
}

fn write_sample(prepared: &Prepared, sample: &SampleDesign, path: &Path) -> anyhow::Result<()> {
    let pop = &prepared.population;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["unit_id".to_string(), "area_id".into(), "z".into(), "size".into()];
    header.extend(pop.covariates().iter().map(|c| c.name.clone()));
    header.extend(["pi".to_string(), "w".into()]);
    w.write_record(&header)?;
    for ((&i, pi), wt) in sample.selected.iter().zip(&sample.pi).zip(&sample.w) {
        let u = &pop.units()[i];
        let mut rec = vec![u.unit_id.to_string(), u.area_id.to_string(), u.z.to_string(), u.size.to_string()];
        for (c, v) in pop.covariates().iter().zip(&u.covariates) {
            rec.push(match c.kind {
                CovariateKind::Categorical { .. } => (*v as i64).to_string(),
                CovariateKind::Real => v.to_string(),
            });
        }
        rec.extend([pi.to_string(), wt.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_sample(prepared: &Prepared, path: &Path) -> anyhow::Result<SampleDesign> {
    let index: HashMap<i64, usize> = prepared
        .population
        .units()
        .iter()
        .enumerate()
        .map(|(i, u)| (u.unit_id, i))
        .collect();
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: missing column `{name}`", path.display()))
    };
    let (c_id, c_pi) = (col("unit_id")?, col("pi")?);
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id: i64 = rec[c_id].trim().parse().with_context(|| format!("row {}: bad unit_id", r + 1))?;
        let pi: f64 = rec[c_pi].trim().parse().with_context(|| format!("row {}: bad pi", r + 1))?;
        let Some(&i) = index.get(&id) else {
            bail!("row {}: unit {id} is not in the population", r + 1);
        };
        rows.push((i, pi));
    }
    rows.sort_by_key(|r| r.0);
    Ok(SampleDesign::new(
        rows.iter().map(|r| r.0).collect(),
        rows.iter().map(|r| r.1).collect(),
    )?)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Simulate => simulate(&cfg),
        Command::Sample { replicate } => {
            cfg.validate()?;
            let prepared = prepare_population(&cfg)?;
            let sample = draw_sample(&prepared, &cfg, replicate)?;
            std::fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join(format!("sample_rep{replicate}.csv"));
            write_sample(&prepared, &sample, &path)?;
            println!("{}", path.display());
            Ok(true)
        }
        Command::Fit {
            method,
            sample,
            replicate,
        } => {
            cfg.validate()?;
            let method: Method = method.parse()?;
            let prepared = prepare_population(&cfg)?;
            let design = read_sample(&prepared, &sample)?;
            let estimates = fit_method(&prepared, &design, method, &cfg, replicate)?;
            std::fs::create_dir_all(&cfg.out)?;
            let mut cells = std::collections::BTreeMap::new();
            cells.insert((replicate, method), estimates);
            write_estimates_csv(&cfg.out.join("estimates.csv"), &cells)?;
            Ok(true)
        }
        Command::Report { points_replicate } => {
            let estimates = read_estimates_csv(&cfg.out.join("estimates.csv"))?;
            let (area_ids, truth) = read_truth_csv(&cfg.out.join("truth.csv"))?;
            let mut methods: Vec<Method> = estimates.keys().map(|k| k.1).collect();
            methods.sort();
            methods.dedup();
            let output = RunOutput {
                area_ids,
                truth,
                estimates,
                failures: Vec::new(),
            };
            let metrics = output.metrics(&methods, cfg.abs_bias)?;
            write_metric_reports(&cfg.out, &metrics, &output, points_replicate)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! Replicated simulation protocol: fix a population, draw repeated Midzuno
//! samples, fit each method, and compare area totals of the vacancy
//! indicator with the population truth.
//!
//! Stream keys (all under the master seed):
//! `[POPULATION, attempt]`, `[SAMPLE, k]`, `[FIT, k, method]`,
//! `[PREDICT, k, method]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{
    generate_synthetic_population, informative_resample_weights, ingest_population_csv, midzuno_inclusion_probs,
    midzuno_sample, CsvSchema, DesignEncoder, MidzunoScheme, Population, SampleDesign, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::estimators::{
    direct_estimates, ga_predict, poststratify_totals, replicate_metrics, vacancy, AbsBiasMode, AreaEstimate,
    Method, MethodMetrics, UnsampledXi,
};
use crate::ga::{run_ga_gibbs, GaConfig};
use crate::pmlg::{run_gibbs, ModelData, PlpmlgConfig};
use crate::rng::{child_seed, stream};

const POPULATION: u64 = 0;
const SAMPLE: u64 = 1;
const FIT: u64 = 2;
const PREDICT: u64 = 3;

/// Synthetic populations are redrawn at most this many times when a size
/// measure would force a certainty unit.
const MAX_POPULATION_ATTEMPTS: u64 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationSource {
    Synthetic(SyntheticSpec),
    /// The size column holds the base design weights; the informative draw
    /// uses them as size measures.
    Csv { path: PathBuf, #[serde(default)] schema: CsvSchema },
}

impl Default for PopulationSource {
    fn default() -> Self {
        PopulationSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_sample: usize,
    pub n_replicates: usize,
    pub methods: Vec<Method>,
    pub out: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Replicate whose per-area point estimates are written out.
    pub points_replicate: usize,
    pub scheme: MidzunoScheme,
    pub unsampled_xi: UnsampledXi,
    pub abs_bias: AbsBiasMode,
    pub population: PopulationSource,
    pub plpmlg: PlpmlgConfig,
    pub ga: GaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_sample: 5000,
            n_replicates: 50,
            methods: Method::ALL.to_vec(),
            out: PathBuf::from("out"),
            workers: 0,
            points_replicate: 0,
            scheme: MidzunoScheme::default(),
            unsampled_xi: UnsampledXi::default(),
            abs_bias: AbsBiasMode::default(),
            population: PopulationSource::default(),
            plpmlg: PlpmlgConfig::default(),
            ga: GaConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_replicates == 0 {
            return Err(Error::Config("n_replicates must be at least 1".into()));
        }
        if self.n_sample < 2 {
            return Err(Error::Config("n_sample must be at least 2".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.points_replicate >= self.n_replicates {
            return Err(Error::Config(format!(
                "points_replicate {} is not below n_replicates {}",
                self.points_replicate, self.n_replicates
            )));
        }
        if let PopulationSource::Synthetic(spec) = &self.population {
            if self.n_sample > spec.n_units {
                return Err(Error::Config(format!(
                    "n_sample {} exceeds population size {}",
                    self.n_sample, spec.n_units
                )));
            }
        }
        self.plpmlg.validate()?;
        self.ga.validate()
    }

    /// Methods in canonical order without duplicates.
    pub fn method_list(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        m
    }
}

/// Written next to the reports; loadable as a config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub software: String,
    pub version: String,
    pub run: RunConfig,
}

impl Manifest {
    pub fn new(run: RunConfig) -> Self {
        Self {
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            run,
        }
    }
}

/// Parses a run config, or the `run` table of a manifest.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if value.contains_key("run") && value.contains_key("software") {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        return Ok(m.run);
    }
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text)
}

/// A population ready for sampling, with its vacancy truth.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub population: Population,
    pub encoder: DesignEncoder,
    /// Area totals of the vacancy indicator, in area order.
    pub truth: Vec<f64>,
}

impl Prepared {
    pub fn new(population: Population) -> Self {
        let encoder = DesignEncoder::new(population.covariates());
        let truth = population.area_totals(vacancy);
        Self {
            population,
            encoder,
            truth,
        }
    }

    pub fn area_ids(&self) -> &[i64] {
        self.population.areas()
    }
}

/// Loads or synthesizes the population. A synthetic population whose sizes
/// imply a certainty unit is redrawn from the next stream.
pub fn prepare_population(cfg: &RunConfig) -> Result<Prepared> {
    match &cfg.population {
        PopulationSource::Csv { path, schema } => {
            let pop = ingest_population_csv(path, schema)?;
            let sizes = informative_resample_weights(&pop.sizes())?;
            let pop = pop.with_sizes(&sizes)?;
            if cfg.n_sample > pop.len() {
                return Err(Error::Config(format!(
                    "n_sample {} exceeds population size {}",
                    cfg.n_sample,
                    pop.len()
                )));
            }
            midzuno_inclusion_probs(&sizes, cfg.n_sample, cfg.scheme)?;
            Ok(Prepared::new(pop))
        }
        PopulationSource::Synthetic(spec) => {
            let mut last = None;
            for attempt in 0..MAX_POPULATION_ATTEMPTS {
                let mut rng = stream(cfg.seed, &[POPULATION, attempt]);
                let pop = generate_synthetic_population(spec, &mut rng)?;
                match midzuno_inclusion_probs(&pop.sizes(), cfg.n_sample, cfg.scheme) {
                    Ok(_) => return Ok(Prepared::new(pop)),
                    Err(e @ Error::CertaintyUnit { .. }) => {
                        info!("population attempt {attempt} rejected: {e}");
                        last = Some(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(last.unwrap())
        }
    }
}

/// The Midzuno sample of replicate `k`.
pub fn draw_sample(prepared: &Prepared, cfg: &RunConfig, k: usize) -> Result<SampleDesign> {
    let mut rng = stream(cfg.seed, &[SAMPLE, k as u64]);
    midzuno_sample(&prepared.population, cfg.n_sample, cfg.scheme, &mut rng)
}

/// Model data of a sample with design-weight scaling.
pub fn sample_model_data(prepared: &Prepared, sample: &SampleDesign) -> Result<ModelData> {
    let units = prepared.population.units();
    let chosen = sample.selected.iter().map(|&i| &units[i]);
    ModelData::from_design_weights(
        sample.selected.iter().map(|&i| units[i].z).collect(),
        prepared.encoder.matrix(chosen),
        sample.selected.iter().map(|&i| units[i].area).collect(),
        prepared.population.n_areas(),
        &sample.w,
    )
}

/// Fits one method to replicate `k`'s sample and returns its area estimates.
pub fn fit_method(
    prepared: &Prepared,
    sample: &SampleDesign,
    method: Method,
    cfg: &RunConfig,
    k: usize,
) -> Result<Vec<AreaEstimate>> {
    let keys = [k as u64, method.index()];
    let mut rng = stream(cfg.seed, &[FIT, keys[0], keys[1]]);
    let predict_seed = child_seed(cfg.seed, &[PREDICT, keys[0], keys[1]]);
    let pop = &prepared.population;
    match method {
        Method::Direct => direct_estimates(pop, sample),
        Method::Ga => {
            let data = sample_model_data(prepared, sample)?;
            let draws = run_ga_gibbs(&data, &cfg.ga, &mut rng)?;
            let totals = ga_predict(&draws, pop, sample, &prepared.encoder, &cfg.ga, predict_seed)?;
            Ok(totals.summarize(method, pop.areas()))
        }
        Method::PlPmlg | Method::UwPmlg => {
            let mut data = sample_model_data(prepared, sample)?;
            if method == Method::UwPmlg {
                data = data.unweighted();
            }
            let mut draws = run_gibbs(&data, &cfg.plpmlg, &mut rng)?;
            draws.rng_seed = Some(child_seed(cfg.seed, &[FIT, keys[0], keys[1]]));
            let totals = poststratify_totals(
                &draws,
                pop,
                sample,
                &prepared.encoder,
                cfg.unsampled_xi,
                cfg.plpmlg.alpha_gauss,
                predict_seed,
            )?;
            Ok(totals.summarize(method, pop.areas()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub replicate: usize,
    pub method: Method,
    pub message: String,
}

/// Everything a run produces before metric aggregation.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub area_ids: Vec<i64>,
    pub truth: Vec<f64>,
    /// Successful cells keyed by `(replicate, method)`.
    pub estimates: BTreeMap<(usize, Method), Vec<AreaEstimate>>,
    pub failures: Vec<CellFailure>,
}

impl RunOutput {
    /// Per-method metrics over the replicates where that method succeeded.
    /// Methods with no successful replicate are omitted.
    pub fn metrics(&self, methods: &[Method], mode: AbsBiasMode) -> Result<Vec<MethodMetrics>> {
        let mut out = Vec::new();
        for &m in methods {
            let reps: Vec<Vec<AreaEstimate>> = self
                .estimates
                .iter()
                .filter(|((_, mm), _)| *mm == m)
                .map(|(_, v)| v.clone())
                .collect();
            if reps.is_empty() {
                continue;
            }
            let mut metrics = replicate_metrics(&reps, &self.truth, mode)?;
            metrics.method = m;
            out.push(metrics);
        }
        Ok(out)
    }
}

/// Runs every `(replicate, method)` cell. Cell failures are logged and
/// collected; only population or configuration problems are fatal.
pub fn run_replicates(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let prepared = prepare_population(cfg)?;
    let methods = cfg.method_list();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells: Vec<(usize, Method)> = (0..cfg.n_replicates)
        .flat_map(|k| methods.iter().map(move |&m| (k, m)))
        .collect();
    let results: Vec<((usize, Method), Result<Vec<AreaEstimate>>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(k, m)| {
                let res = draw_sample(&prepared, cfg, k).and_then(|s| fit_method(&prepared, &s, m, cfg, k));
                match &res {
                    Ok(_) => info!("replicate {k} {m}: done"),
                    Err(e) => error!("replicate {k} {m}: {e}"),
                }
                ((k, m), res)
            })
            .collect()
    });
    let mut estimates = BTreeMap::new();
    let mut failures = Vec::new();
    for ((k, m), res) in results {
        match res {
            Ok(v) => {
                estimates.insert((k, m), v);
            }
            Err(e) => failures.push(CellFailure {
                replicate: k,
                method: m,
                message: e.to_string(),
            }),
        }
    }
    Ok(RunOutput {
        area_ids: prepared.area_ids().to_vec(),
        truth: prepared.truth,
        estimates,
        failures,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

pub fn write_estimates_csv(path: &Path, estimates: &BTreeMap<(usize, Method), Vec<AreaEstimate>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["replicate", "area_id", "method", "point", "se", "flagged_missing"])?;
    for ((k, m), rows) in estimates {
        for e in rows {
            w.write_record([
                k.to_string(),
                e.area_id.to_string(),
                m.name().to_string(),
                e.point.to_string(),
                fmt_opt(e.se),
                e.se.is_none().to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_truth_csv(path: &Path, area_ids: &[i64], truth: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["area_id", "truth"])?;
    for (a, t) in area_ids.iter().zip(truth) {
        w.write_record([a.to_string(), t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an estimates CSV back into cells. Rows of a cell must list the
/// areas in `area_ids` order.
pub fn read_estimates_csv(path: &Path) -> Result<BTreeMap<(usize, Method), Vec<AreaEstimate>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<(usize, Method), Vec<AreaEstimate>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |msg: &str| Error::Csv {
            row: i + 1,
            message: msg.to_string(),
        };
        if rec.len() < 5 {
            return Err(bad("expected at least 5 columns"));
        }
        let k: usize = rec[0].trim().parse().map_err(|_| bad("bad replicate"))?;
        let area_id: i64 = rec[1].trim().parse().map_err(|_| bad("bad area_id"))?;
        let method: Method = rec[2].parse()?;
        let point: f64 = rec[3].trim().parse().map_err(|_| bad("bad point"))?;
        let se = match rec[4].trim() {
            "NA" | "" => None,
            s => Some(s.parse().map_err(|_| bad("bad se"))?),
        };
        out.entry((k, method)).or_default().push(AreaEstimate {
            area_id,
            method,
            point,
            se,
        });
    }
    Ok(out)
}

pub fn read_truth_csv(path: &Path) -> Result<(Vec<i64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut ids = Vec::new();
    let mut truth = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed = (rec.get(0).map(|s| s.trim().parse::<i64>()), rec.get(1).map(|s| s.trim().parse::<f64>()));
        match parsed {
            (Some(Ok(a)), Some(Ok(t))) => {
                ids.push(a);
                truth.push(t);
            }
            _ => {
                return Err(Error::Csv {
                    row: i + 1,
                    message: "expected area_id,truth".into(),
                })
            }
        }
    }
    Ok((ids, truth))
}

/// Writes `metrics.csv`, `avg_se.csv` and `points_rep<k>.csv`.
pub fn write_metric_reports(
    dir: &Path,
    metrics: &[MethodMetrics],
    output: &RunOutput,
    points_replicate: usize,
) -> Result<()> {
    if metrics.is_empty() {
        return Err(Error::InvalidParameter("no metrics to report".into()));
    }
    let path = dir.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["method", "mse", "abs_bias"])?;
    for m in metrics {
        w.write_record([m.method.name().to_string(), m.mse.to_string(), m.abs_bias.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("avg_se.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["area_id", "method", "avg_se"])?;
    for m in metrics {
        for (a, se) in output.area_ids.iter().zip(&m.avg_se) {
            w.write_record([a.to_string(), m.method.name().to_string(), fmt_opt(*se)])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(format!("points_rep{points_replicate}.csv"));
    let mut w = csv_writer(&path)?;
    w.write_record(["area_id", "method", "point", "se", "truth"])?;
    for ((k, m), rows) in &output.estimates {
        if *k != points_replicate {
            continue;
        }
        for (e, t) in rows.iter().zip(&output.truth) {
            w.write_record([
                e.area_id.to_string(),
                m.name().to_string(),
                e.point.to_string(),
                fmt_opt(e.se),
                t.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Writes every report file for a finished run into `cfg.out`.
pub fn emit_report(output: &RunOutput, metrics: &[MethodMetrics], cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.out;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metric_reports(dir, metrics, output, cfg.points_replicate)?;
    write_estimates_csv(&dir.join("estimates.csv"), &output.estimates)?;
    write_truth_csv(&dir.join("truth.csv"), &output.area_ids, &output.truth)?;

    let path = dir.join("failures.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["replicate", "method", "error"])?;
    for f in &output.failures {
        w.write_record([f.replicate.to_string(), f.method.name().to_string(), f.message.clone()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("manifest.toml");
    let text = toml::to_string(&Manifest::new(cfg.clone())).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(parse_run_config(&text).unwrap(), cfg);
        let manifest = toml::to_string(&Manifest::new(cfg.clone())).unwrap();
        assert_eq!(parse_run_config(&manifest).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = parse_run_config(
            "n_sample = 100\nmethods = [\"direct\", \"PL-PMLG\"]\n[population.synthetic]\nn_units = 500\n",
        )
        .unwrap();
        assert_eq!(cfg.n_sample, 100);
        assert_eq!(cfg.methods, vec![Method::Direct, Method::PlPmlg]);
        match cfg.population {
            PopulationSource::Synthetic(s) => assert_eq!((s.n_units, s.n_areas), (500, 20)),
            _ => panic!("expected synthetic source"),
        }
        assert!(parse_run_config("bogus = 1").is_err());
    }
}

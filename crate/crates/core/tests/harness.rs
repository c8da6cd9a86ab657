use std::collections::BTreeMap;
use std::fs;

use plpmlg::design::{generate_synthetic_population, write_population_csv, CsvSchema, SyntheticSpec};
use plpmlg::estimators::{AreaEstimate, Method};
use plpmlg::harness::*;
use plpmlg::rng::stream;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_units: 300,
        n_areas: 3,
        informativeness: 0.5,
        ..SyntheticSpec::default()
    }
}

fn small_config(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 5,
        n_sample: 60,
        n_replicates: 3,
        methods: vec![Method::Ga, Method::Direct],
        out: dir.to_path_buf(),
        workers: 1,
        population: PopulationSource::Synthetic(small_spec()),
        ..RunConfig::default()
    };
    cfg.ga.n_iter = 200;
    cfg.ga.burn_in = 100;
    cfg
}

fn line_count(path: &std::path::Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn direct_only_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        methods: vec![Method::Direct],
        n_sample: 40,
        population: PopulationSource::Synthetic(SyntheticSpec {
            n_units: 100,
            n_areas: 4,
            ..small_spec()
        }),
        ..small_config(dir.path())
    };
    let out = run_replicates(&cfg).unwrap();
    assert!(out.failures.is_empty());
    assert_eq!(out.estimates.len(), 3);
    assert_eq!(out.truth.len(), 4);
    let metrics = out.metrics(&cfg.method_list(), cfg.abs_bias).unwrap();
    assert_eq!(metrics.len(), 1);
    assert!(metrics[0].mse.is_finite());
}

#[test]
fn reports_have_one_row_per_method_and_area() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = run_replicates(&cfg).unwrap();
    let metrics = out.metrics(&cfg.method_list(), cfg.abs_bias).unwrap();
    emit_report(&out, &metrics, &cfg).unwrap();
    assert_eq!(line_count(&dir.path().join("metrics.csv")), 1 + 2);
    assert_eq!(line_count(&dir.path().join("avg_se.csv")), 1 + 6);
    assert_eq!(line_count(&dir.path().join("points_rep0.csv")), 1 + 6);
    assert_eq!(line_count(&dir.path().join("estimates.csv")), 1 + 3 * 2 * 3);
    let metrics_text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics_text.starts_with("method,mse,abs_bias\ndirect,"));
    assert!(metrics_text.contains("\nGA,"));
}

#[test]
fn flagged_standard_errors_are_written_as_na() {
    let dir = tempfile::tempdir().unwrap();
    let mut cells = BTreeMap::new();
    let row = |a: i64, se| AreaEstimate {
        area_id: a,
        method: Method::Direct,
        point: 0.0,
        se,
    };
    cells.insert((0, Method::Direct), vec![row(1, None), row(2, Some(2.5))]);
    let path = dir.path().join("est.csv");
    write_estimates_csv(&path, &cells).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains("0,1,direct,0,NA,true"));
    assert!(text.contains("0,2,direct,0,2.5,false"));
    assert_eq!(read_estimates_csv(&path).unwrap(), cells);

    let output = RunOutput {
        area_ids: vec![1, 2],
        truth: vec![0.0, 1.0],
        estimates: cells,
        failures: Vec::new(),
    };
    let metrics = output.metrics(&[Method::Direct], Default::default()).unwrap();
    write_metric_reports(dir.path(), &metrics, &output, 0).unwrap();
    let se = fs::read_to_string(dir.path().join("avg_se.csv")).unwrap();
    assert!(se.contains("1,direct,NA"));
    assert!(se.contains("2,direct,2.5"));
}

#[test]
fn manifest_reproduces_the_run() {
    let first = tempfile::tempdir().unwrap();
    let cfg = small_config(first.path());
    let out = run_replicates(&cfg).unwrap();
    emit_report(&out, &out.metrics(&cfg.method_list(), cfg.abs_bias).unwrap(), &cfg).unwrap();

    let second = tempfile::tempdir().unwrap();
    let mut again = load_run_config(&first.path().join("manifest.toml")).unwrap();
    assert_eq!(again, cfg);
    again.out = second.path().to_path_buf();
    let out2 = run_replicates(&again).unwrap();
    emit_report(&out2, &out2.metrics(&again.method_list(), again.abs_bias).unwrap(), &again).unwrap();
    for f in ["metrics.csv", "avg_se.csv", "estimates.csv", "truth.csv"] {
        assert_eq!(
            fs::read(first.path().join(f)).unwrap(),
            fs::read(second.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn csv_population_source() {
    let dir = tempfile::tempdir().unwrap();
    let pop = generate_synthetic_population(&small_spec(), &mut stream(2, &[])).unwrap();
    let path = dir.path().join("pop.csv");
    write_population_csv(&pop, &path).unwrap();
    let cfg = RunConfig {
        methods: vec![Method::Direct],
        population: PopulationSource::Csv {
            path,
            schema: CsvSchema {
                categorical: vec!["category".into()],
                ..CsvSchema::default()
            },
        },
        ..small_config(dir.path())
    };
    let prepared = prepare_population(&cfg).unwrap();
    assert_eq!(prepared.population.len(), 300);
    assert_eq!(prepared.area_ids(), &[1, 2, 3]);
    let out = run_replicates(&cfg).unwrap();
    assert_eq!(out.truth, pop.area_totals(plpmlg::estimators::vacancy));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = RunConfig {
        n_sample: 1000,
        ..small_config(dir.path())
    };
    assert!(run_replicates(&bad).is_err());
    let bad = RunConfig {
        points_replicate: 3,
        ..small_config(dir.path())
    };
    assert!(bad.validate().is_err());
    let bad = RunConfig {
        methods: Vec::new(),
        ..small_config(dir.path())
    };
    assert!(bad.validate().is_err());
}

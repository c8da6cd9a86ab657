//! Finite populations, probability-proportional-to-size sampling and design
//! weights.
//!
//! The default sampler is the generalized Midzuno procedure: the complement
//! of the sample is produced by Tille's elimination procedure run on
//! `1 - pi`, so the eliminated units form a without-replacement sample whose
//! first-order inclusion probabilities are exactly `pi_i = n x_i / sum(x)`.
//! The classical two-stage scheme is available as [`MidzunoScheme::TwoStage`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    /// Integer-coded factor; levels are the sorted distinct codes.
    Categorical { levels: Vec<i64> },
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationUnit {
    pub unit_id: i64,
    pub area_id: i64,
    /// Position of `area_id` in [`Population::areas`].
    pub area: usize,
    pub z: u64,
    pub covariates: Vec<f64>,
    pub size: f64,
}

/// An immutable, validated finite population.
#[derive(Clone, Debug)]
pub struct Population {
    units: Vec<PopulationUnit>,
    covariates: Vec<Covariate>,
    areas: Vec<i64>,
}

impl Population {
    /// Builds a population from raw units; `area` indices are (re)assigned from
    /// the sorted distinct area ids.
    pub fn new(mut units: Vec<PopulationUnit>, covariates: Vec<Covariate>) -> Result<Self> {
        let areas: Vec<i64> = units
            .iter()
            .map(|u| u.area_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<i64, usize> = areas.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        for (row, u) in units.iter_mut().enumerate() {
            if !(u.size > 0.0 && u.size.is_finite()) {
                return Err(Error::Csv {
                    row: row + 1,
                    message: format!("size measure {} must be positive", u.size),
                });
            }
            if u.covariates.len() != covariates.len() {
                return Err(Error::Csv {
                    row: row + 1,
                    message: format!(
                        "{} covariate values for {} declared covariates",
                        u.covariates.len(),
                        covariates.len()
                    ),
                });
            }
            for (c, v) in covariates.iter().zip(&u.covariates) {
                let ok = match &c.kind {
                    CovariateKind::Categorical { levels } => levels.contains(&(*v as i64)),
                    CovariateKind::Real => v.is_finite(),
                };
                if !ok {
                    return Err(Error::Csv {
                        row: row + 1,
                        message: format!("invalid value {v} for covariate `{}`", c.name),
                    });
                }
            }
            u.area = index[&u.area_id];
        }
        Ok(Self {
            units,
            covariates,
            areas,
        })
    }

    pub fn units(&self) -> &[PopulationUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    /// Sorted distinct area ids.
    pub fn areas(&self) -> &[i64] {
        &self.areas
    }

    pub fn n_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.size).collect()
    }

    /// Replaces every unit's size measure.
    pub fn with_sizes(&self, sizes: &[f64]) -> Result<Self> {
        if sizes.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} sizes for {} units",
                sizes.len(),
                self.len()
            )));
        }
        let mut units = self.units.clone();
        for (u, &s) in units.iter_mut().zip(sizes) {
            u.size = s;
        }
        Population::new(units, self.covariates.clone())
    }

    /// Per-area totals of `f(z)` over the whole population.
    pub fn area_totals(&self, f: impl Fn(u64) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_areas()];
        for u in &self.units {
            out[u.area] += f(u.z);
        }
        out
    }
}

/// Maps covariates to design-matrix rows: intercept, treatment-coded dummies
/// for every categorical covariate (first level is the baseline), then real
/// covariates as given.
#[derive(Clone, Debug)]
pub struct DesignEncoder {
    covariates: Vec<Covariate>,
    width: usize,
}

impl DesignEncoder {
    pub fn new(covariates: &[Covariate]) -> Self {
        let width = 1 + covariates
            .iter()
            .map(|c| match &c.kind {
                CovariateKind::Categorical { levels } => levels.len().saturating_sub(1),
                CovariateKind::Real => 1,
            })
            .sum::<usize>();
        Self {
            covariates: covariates.to_vec(),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, values: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.width);
        row.push(1.0);
        for (c, &v) in self.covariates.iter().zip(values) {
            match &c.kind {
                CovariateKind::Categorical { levels } => {
                    for level in levels.iter().skip(1) {
                        row.push(if v as i64 == *level { 1.0 } else { 0.0 });
                    }
                }
                CovariateKind::Real => row.push(v),
            }
        }
        row
    }

    pub fn matrix<'a>(&self, units: impl IntoIterator<Item = &'a PopulationUnit>) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = units.into_iter().map(|u| self.row(&u.covariates)).collect();
        DMatrix::from_fn(rows.len(), self.width, |i, j| rows[i][j])
    }
}

/// Column names for population CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub unit_id: String,
    pub area_id: String,
    pub z: String,
    /// Size-measure column. When unset, a column literally named `size` is
    /// used if present; otherwise every unit gets size 1.
    pub size: Option<String>,
    pub categorical: Vec<String>,
    pub real: Vec<String>,
    /// Optional declared area set; units outside it are rejected.
    pub areas: Option<Vec<i64>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            unit_id: "unit_id".into(),
            area_id: "area_id".into(),
            z: "z".into(),
            size: None,
            categorical: Vec::new(),
            real: Vec::new(),
            areas: None,
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_cell<T: std::str::FromStr>(rec: &csv::StringRecord, col: usize, row: usize, name: &str) -> Result<T> {
    let raw = rec.get(col).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::Csv {
        row,
        message: format!("cannot parse `{raw}` in column `{name}`"),
    })
}

/// Reads and validates a population CSV. Row numbers in errors count data
/// rows from 1 (the header is not counted).
pub fn ingest_population_csv(path: &Path, schema: &CsvSchema) -> Result<Population> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_population(file, schema)
}

pub fn read_population<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Population> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let c_unit = column(&headers, &schema.unit_id)?;
    let c_area = column(&headers, &schema.area_id)?;
    let c_z = column(&headers, &schema.z)?;
    let c_size = match &schema.size {
        Some(name) => Some(column(&headers, name)?),
        None => column(&headers, "size").ok(),
    };
    let c_cat: Vec<usize> = schema
        .categorical
        .iter()
        .map(|n| column(&headers, n))
        .collect::<Result<_>>()?;
    let c_real: Vec<usize> = schema
        .real
        .iter()
        .map(|n| column(&headers, n))
        .collect::<Result<_>>()?;
    let declared: Option<BTreeSet<i64>> = schema.areas.as_ref().map(|a| a.iter().copied().collect());

    let mut units = Vec::new();
    let mut cat_levels: Vec<BTreeSet<i64>> = vec![BTreeSet::new(); c_cat.len()];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Csv {
            row,
            message: e.to_string(),
        })?;
        let unit_id: i64 = parse_cell(&rec, c_unit, row, &schema.unit_id)?;
        let area_id: i64 = parse_cell(&rec, c_area, row, &schema.area_id)?;
        let z_raw: i64 = parse_cell(&rec, c_z, row, &schema.z)?;
        if z_raw < 0 {
            return Err(Error::Csv {
                row,
                message: format!("response {z_raw} is negative"),
            });
        }
        if let Some(set) = &declared {
            if !set.contains(&area_id) {
                return Err(Error::Csv {
                    row,
                    message: format!("area {area_id} is not in the declared area set"),
                });
            }
        }
        let size = match c_size {
            Some(c) => {
                let s: f64 = parse_cell(&rec, c, row, "size")?;
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Csv {
                        row,
                        message: format!("size measure {s} must be positive"),
                    });
                }
                s
            }
            None => 1.0,
        };
        let mut covariates = Vec::with_capacity(c_cat.len() + c_real.len());
        for (k, (&c, name)) in c_cat.iter().zip(&schema.categorical).enumerate() {
            let code: i64 = parse_cell(&rec, c, row, name)?;
            cat_levels[k].insert(code);
            covariates.push(code as f64);
        }
        for (&c, name) in c_real.iter().zip(&schema.real) {
            let v: f64 = parse_cell(&rec, c, row, name)?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    row,
                    message: format!("non-finite value in column `{name}`"),
                });
            }
            covariates.push(v);
        }
        units.push(PopulationUnit {
            unit_id,
            area_id,
            area: 0,
            z: z_raw as u64,
            covariates,
            size,
        });
    }
    let covariates = schema
        .categorical
        .iter()
        .zip(cat_levels)
        .map(|(name, levels)| Covariate {
            name: name.clone(),
            kind: CovariateKind::Categorical {
                levels: levels.into_iter().collect(),
            },
        })
        .chain(schema.real.iter().map(|name| Covariate {
            name: name.clone(),
            kind: CovariateKind::Real,
        }))
        .collect();
    Population::new(units, covariates)
}

/// Writes a population in the default schema (categorical covariates first).
pub fn write_population_csv(population: &Population, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["unit_id".to_string(), "area_id".into(), "z".into(), "size".into()];
    header.extend(population.covariates().iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for u in population.units() {
        let mut rec = vec![
            u.unit_id.to_string(),
            u.area_id.to_string(),
            u.z.to_string(),
            u.size.to_string(),
        ];
        for (c, v) in population.covariates().iter().zip(&u.covariates) {
            rec.push(match c.kind {
                CovariateKind::Categorical { .. } => (*v as i64).to_string(),
                CovariateKind::Real => v.to_string(),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parameters of the synthetic population generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_units: usize,
    pub n_areas: usize,
    /// Number of levels of the bedroom-like factor.
    pub n_categories: usize,
    /// Intercept followed by one effect per non-baseline category.
    pub beta_true: Vec<f64>,
    pub area_sd: f64,
    pub unit_sd: f64,
    /// Exponent linking the response to the size measure:
    /// `size = (1 + z)^informativeness * u` with `u ~ LogNormal(0, size_noise_sd)`.
    pub informativeness: f64,
    pub size_noise_sd: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_units: 20_000,
            n_areas: 20,
            n_categories: 5,
            beta_true: vec![0.4, 0.2, 0.45, 0.7, 0.95],
            area_sd: 0.25,
            unit_sd: 0.25,
            informativeness: 1.0,
            size_noise_sd: 0.25,
        }
    }
}

/// Draws a synthetic population. Units are assigned to areas in contiguous
/// balanced blocks; the factor level is uniform over `n_categories`.
pub fn generate_synthetic_population<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<Population> {
    if spec.n_areas == 0 || spec.n_units < spec.n_areas {
        return Err(Error::InvalidParameter(format!(
            "need n_units >= n_areas >= 1, got {} units and {} areas",
            spec.n_units, spec.n_areas
        )));
    }
    if spec.n_categories == 0 || spec.beta_true.len() != spec.n_categories {
        return Err(Error::InvalidParameter(format!(
            "beta_true needs {} entries (intercept plus one per extra category), got {}",
            spec.n_categories,
            spec.beta_true.len()
        )));
    }
    for (name, v) in [
        ("area_sd", spec.area_sd),
        ("unit_sd", spec.unit_sd),
        ("size_noise_sd", spec.size_noise_sd),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} = {v} must be >= 0")));
        }
    }
    if !spec.informativeness.is_finite() {
        return Err(Error::InvalidParameter("informativeness must be finite".into()));
    }

    let area_effects: Vec<f64> = (0..spec.n_areas)
        .map(|_| spec.area_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut units = Vec::with_capacity(spec.n_units);
    for i in 0..spec.n_units {
        let area = i * spec.n_areas / spec.n_units;
        let category = rng.random_range(0..spec.n_categories);
        let mut eta = spec.beta_true[0] + area_effects[area];
        if category > 0 {
            eta += spec.beta_true[category];
        }
        eta += spec.unit_sd * rng.sample::<f64, _>(StandardNormal);
        let lambda = eta.exp();
        let z = Poisson::new(lambda)
            .map_err(|e| Error::InvalidParameter(format!("Poisson mean {lambda}: {e}")))?
            .sample(rng) as u64;
        let noise = spec.size_noise_sd * rng.sample::<f64, _>(StandardNormal);
        let size = (spec.informativeness * (z as f64).ln_1p() + noise).exp();
        units.push(PopulationUnit {
            unit_id: i as i64 + 1,
            area_id: area as i64 + 1,
            area,
            z,
            covariates: vec![category as f64],
            size,
        });
    }
    Population::new(
        units,
        vec![Covariate {
            name: "category".into(),
            kind: CovariateKind::Categorical {
                levels: (0..spec.n_categories as i64).collect(),
            },
        }],
    )
}

/// Size measure for the informative redraw: the base design weights
/// themselves, so selection is inversely proportional to the original
/// selection probability.
pub fn informative_resample_weights(base_design_weights: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = base_design_weights
        .iter()
        .position(|w| !(*w > 0.0 && w.is_finite()))
    {
        return Err(Error::InvalidParameter(format!(
            "design weight {} at position {i} must be positive",
            base_design_weights[i]
        )));
    }
    Ok(base_design_weights.to_vec())
}

fn validate_sizes(sizes: &[f64], n: usize) -> Result<()> {
    if n == 0 || n > sizes.len() {
        return Err(Error::InvalidParameter(format!(
            "sample size {n} must be in 1..={}",
            sizes.len()
        )));
    }
    if let Some(i) = sizes.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "size {} at position {i} must be positive",
            sizes[i]
        )));
    }
    Ok(())
}

/// Variant of Midzuno's procedure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MidzunoScheme {
    /// Exact PPS: `pi_i = n s_i / sum(s)`, drawn by eliminating the
    /// complement with sizes `1 - pi`.
    #[default]
    Generalized,
    /// First unit drawn with probability `p_i = s_i / sum(s)`, the other
    /// `n - 1` by simple random sampling from the rest:
    /// `pi_i = p_i (N - n) / (N - 1) + (n - 1) / (N - 1)`.
    TwoStage,
}

/// First-order inclusion probabilities of a size-`n` Midzuno sample. A
/// census (`n == N`) gives `pi = 1`; otherwise any `pi_i >= 1` is rejected
/// as a certainty unit.
pub fn midzuno_inclusion_probs(sizes: &[f64], n: usize, scheme: MidzunoScheme) -> Result<Vec<f64>> {
    validate_sizes(sizes, n)?;
    let big_n = sizes.len();
    if n == big_n {
        return Ok(vec![1.0; big_n]);
    }
    let total: f64 = sizes.iter().sum();
    let pi: Vec<f64> = match scheme {
        MidzunoScheme::Generalized => sizes.iter().map(|s| n as f64 * s / total).collect(),
        MidzunoScheme::TwoStage => {
            let a = (big_n - n) as f64 / (big_n - 1) as f64;
            let b = (n - 1) as f64 / (big_n - 1) as f64;
            sizes.iter().map(|s| a * (s / total) + b).collect()
        }
    };
    if let Some(i) = pi.iter().position(|&p| p >= 1.0) {
        return Err(Error::CertaintyUnit { index: i, pi: pi[i] });
    }
    Ok(pi)
}

/// `min(1, k x_i / ...)` inclusion probabilities of size `k` for the sizes
/// `x`, computed with iterative capping. `order` sorts `x` descending and
/// `suffix[j]` is the sum of `x[order[j..]]`.
fn capped_level(x: &[f64], order: &[usize], suffix: &[f64], k: usize, out: &mut [f64]) {
    let mut capped = 0;
    while capped < k && capped < order.len() {
        let rest = suffix[capped];
        if rest <= 0.0 || (k - capped) as f64 * x[order[capped]] < rest {
            break;
        }
        capped += 1;
    }
    let rest = suffix[capped.min(order.len())];
    for (j, &i) in order.iter().enumerate() {
        out[i] = if j < capped {
            1.0
        } else if rest > 0.0 {
            ((k - capped) as f64 * x[i] / rest).min(1.0)
        } else {
            0.0
        };
    }
}

/// Draws the set of selected indices for inclusion probabilities `pi`
/// (which must sum to an integer `n`).
pub fn midzuno_select<R: Rng + ?Sized>(pi: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let big_n = pi.len();
    let n_float: f64 = pi.iter().sum();
    let n = n_float.round() as usize;
    if (n_float - n as f64).abs() > 1e-6 * (1.0 + n_float) {
        return Err(Error::InvalidParameter(format!(
            "inclusion probabilities sum to {n_float}, not an integer"
        )));
    }
    if let Some(i) = pi.iter().position(|p| !(*p > 0.0 && *p <= 1.0)) {
        return Err(Error::InvalidParameter(format!(
            "inclusion probability {} at position {i} outside (0, 1]",
            pi[i]
        )));
    }
    if n == big_n {
        return Ok((0..big_n).collect());
    }

    // Complement design: sizes 1 - pi, size N - n, reached by eliminating one
    // unit at each level k = N-1, ..., N-n. The eliminated units are the
    // sample.
    let x: Vec<f64> = pi.iter().map(|p| 1.0 - p).collect();
    let mut order: Vec<usize> = (0..big_n).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut suffix = vec![0.0; big_n + 1];
    for j in (0..big_n).rev() {
        suffix[j] = suffix[j + 1] + x[order[j]];
    }

    let mut alive = vec![true; big_n];
    let mut prev = vec![1.0; big_n];
    let mut cur = vec![0.0; big_n];
    let mut probs = vec![0.0; big_n];
    let mut selected = Vec::with_capacity(n);
    for k in ((big_n - n)..big_n).rev() {
        capped_level(&x, &order, &suffix, k, &mut cur);
        let mut total = 0.0;
        for i in 0..big_n {
            probs[i] = if alive[i] && prev[i] > 0.0 {
                (1.0 - cur[i] / prev[i]).max(0.0)
            } else {
                0.0
            };
            total += probs[i];
        }
        debug_assert!((total - 1.0).abs() < 1e-6, "elimination probabilities sum to {total}");
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for i in 0..big_n {
            if probs[i] > 0.0 {
                pick = Some(i);
                if target < probs[i] {
                    break;
                }
                target -= probs[i];
            }
        }
        let j = pick.ok_or_else(|| Error::InvalidParameter("no unit left to select".into()))?;
        alive[j] = false;
        selected.push(j);
        std::mem::swap(&mut prev, &mut cur);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Selected units with their inclusion probabilities and design weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDesign {
    /// Ascending population indices.
    pub selected: Vec<usize>,
    pub pi: Vec<f64>,
    /// `1 / pi`.
    pub w: Vec<f64>,
}

impl SampleDesign {
    pub fn new(selected: Vec<usize>, pi: Vec<f64>) -> Result<Self> {
        if selected.len() != pi.len() {
            return Err(Error::Dimension(format!(
                "{} units but {} probabilities",
                selected.len(),
                pi.len()
            )));
        }
        if let Some(i) = pi.iter().position(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "inclusion probability {} outside (0, 1]",
                pi[i]
            )));
        }
        let w = pi.iter().map(|p| 1.0 / p).collect();
        Ok(Self { selected, pi, w })
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Membership mask over a population of `n_population` units.
    pub fn mask(&self, n_population: usize) -> Vec<bool> {
        let mut m = vec![false; n_population];
        for &i in &self.selected {
            m[i] = true;
        }
        m
    }
}

/// Two-stage draw: one unit proportional to `sizes`, then `n - 1` by simple
/// random sampling without replacement from the remaining units.
pub fn two_stage_select<R: Rng + ?Sized>(sizes: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    validate_sizes(sizes, n)?;
    let total: f64 = sizes.iter().sum();
    let mut target = rng.random::<f64>() * total;
    let mut first = sizes.len() - 1;
    for (i, s) in sizes.iter().enumerate() {
        if target < *s {
            first = i;
            break;
        }
        target -= s;
    }
    let mut rest: Vec<usize> = (0..sizes.len()).filter(|&i| i != first).collect();
    for j in 0..n - 1 {
        let k = rng.random_range(j..rest.len());
        rest.swap(j, k);
    }
    let mut selected: Vec<usize> = std::iter::once(first).chain(rest[..n - 1].iter().copied()).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Midzuno sample of size `n` using the population's size measures.
pub fn midzuno_sample<R: Rng + ?Sized>(
    population: &Population,
    n: usize,
    scheme: MidzunoScheme,
    rng: &mut R,
) -> Result<SampleDesign> {
    let sizes = population.sizes();
    let pi_all = midzuno_inclusion_probs(&sizes, n, scheme)?;
    let selected = match scheme {
        MidzunoScheme::Generalized => midzuno_select(&pi_all, rng)?,
        MidzunoScheme::TwoStage => two_stage_select(&sizes, n, rng)?,
    };
    let pi = selected.iter().map(|&i| pi_all[i]).collect();
    SampleDesign::new(selected, pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn equal_sizes_give_srs_probabilities() {
        let pi = midzuno_inclusion_probs(&[3.0; 8], 3, MidzunoScheme::Generalized).unwrap();
        assert_eq!(pi, midzuno_inclusion_probs(&[3.0; 8], 3, MidzunoScheme::TwoStage).unwrap());
        assert!(pi.iter().all(|p| (p - 3.0 / 8.0).abs() < 1e-15));
    }

    #[test]
    fn census_and_certainty_units() {
        assert_eq!(midzuno_inclusion_probs(&[1.0, 5.0, 2.0], 3, MidzunoScheme::Generalized).unwrap(), vec![1.0; 3]);
        let err = midzuno_inclusion_probs(&[1.0, 1.0, 10.0], 2, MidzunoScheme::Generalized).unwrap_err();
        assert!(matches!(err, Error::CertaintyUnit { index: 2, .. }));
        assert!(midzuno_inclusion_probs(&[1.0, 0.0], 1, MidzunoScheme::Generalized).is_err());
        assert!(midzuno_inclusion_probs(&[1.0, 2.0], 0, MidzunoScheme::TwoStage).is_err());
    }

    #[test]
    fn sample_has_requested_size_and_weights() {
        let sizes: Vec<f64> = (1..=40).map(|i| 1.0 + (i % 7) as f64).collect();
        let units = sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| PopulationUnit {
                unit_id: i as i64,
                area_id: (i % 4) as i64,
                area: 0,
                z: 1,
                covariates: vec![],
                size: s,
            })
            .collect();
        let pop = Population::new(units, vec![]).unwrap();
        let s = midzuno_sample(&pop, 10, MidzunoScheme::Generalized, &mut stream(2, &[])).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.selected.windows(2).all(|w| w[0] < w[1]));
        for (p, w) in s.pi.iter().zip(&s.w) {
            assert_eq!(*w, 1.0 / p);
        }
        let again = midzuno_sample(&pop, 10, MidzunoScheme::Generalized, &mut stream(2, &[])).unwrap();
        assert_eq!(s, again);
        let two = midzuno_sample(&pop, 10, MidzunoScheme::TwoStage, &mut stream(2, &[])).unwrap();
        assert_eq!(two.len(), 10);
        assert!(two.selected.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn resample_weights_are_identity() {
        assert_eq!(informative_resample_weights(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(informative_resample_weights(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn encoder_uses_treatment_coding() {
        let enc = DesignEncoder::new(&[
            Covariate {
                name: "b".into(),
                kind: CovariateKind::Categorical { levels: vec![1, 2, 4] },
            },
            Covariate {
                name: "x".into(),
                kind: CovariateKind::Real,
            },
        ]);
        assert_eq!(enc.width(), 4);
        assert_eq!(enc.row(&[1.0, 0.5]), vec![1.0, 0.0, 0.0, 0.5]);
        assert_eq!(enc.row(&[4.0, -1.0]), vec![1.0, 0.0, 1.0, -1.0]);
    }

    #[test]
    fn csv_rows_are_validated() {
        let good = "unit_id,area_id,z,size,bed\n1,10,2,1.5,1\n2,10,0,2.0,2\n3,20,1,1.0,1\n";
        let schema = CsvSchema {
            categorical: vec!["bed".into()],
            ..CsvSchema::default()
        };
        let pop = read_population(good.as_bytes(), &schema).unwrap();
        assert_eq!(pop.len(), 3);
        assert_eq!(pop.areas(), &[10, 20]);
        assert_eq!(pop.units()[2].area, 1);

        let negative = "unit_id,area_id,z\n1,1,2\n2,1,-1\n";
        match read_population(negative.as_bytes(), &CsvSchema::default()) {
            Err(Error::Csv { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected row error, got {other:?}"),
        }
        let missing = "unit_id,z\n1,2\n";
        assert!(matches!(
            read_population(missing.as_bytes(), &CsvSchema::default()),
            Err(Error::MissingColumn(c)) if c == "area_id"
        ));
        let bad_size = "unit_id,area_id,z,size\n1,1,2,0\n";
        assert!(matches!(
            read_population(bad_size.as_bytes(), &CsvSchema::default()),
            Err(Error::Csv { row: 1, .. })
        ));
        let undeclared = CsvSchema {
            areas: Some(vec![10]),
            categorical: vec!["bed".into()],
            ..CsvSchema::default()
        };
        assert!(matches!(
            read_population(good.as_bytes(), &undeclared),
            Err(Error::Csv { row: 3, .. })
        ));
    }

    #[test]
    fn synthetic_rejects_bad_specs() {
        let mut rng = stream(1, &[]);
        let spec = SyntheticSpec {
            n_units: 3,
            n_areas: 5,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic_population(&spec, &mut rng).is_err());
        let spec = SyntheticSpec {
            beta_true: vec![0.0],
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic_population(&spec, &mut rng).is_err());
    }
}

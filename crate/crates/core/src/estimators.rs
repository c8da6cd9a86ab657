//! Direct and model-based area totals of the vacancy indicator `1{Z = 0}`,
//! and replicate-level accuracy metrics.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{DesignEncoder, Population, SampleDesign};
use crate::error::{Error, Result};
use crate::ga::{back_transform, GaConfig, GaDraws};
use crate::mlg::log_gamma_variate;
use crate::pmlg::{normalized_weights, PosteriorDraws};
use crate::rng::{stream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "GA")]
    Ga,
    #[serde(rename = "PL-PMLG")]
    PlPmlg,
    #[serde(rename = "UW-PMLG")]
    UwPmlg,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Direct, Method::Ga, Method::PlPmlg, Method::UwPmlg];

    pub fn name(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Ga => "GA",
            Method::PlPmlg => "PL-PMLG",
            Method::UwPmlg => "UW-PMLG",
        }
    }

    /// Position in [`Method::ALL`], used as a stream key.
    pub fn index(self) -> u64 {
        Method::ALL.iter().position(|m| *m == self).unwrap() as u64
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        match key.as_str() {
            "direct" | "ht" => Ok(Method::Direct),
            "ga" => Ok(Method::Ga),
            "pl-pmlg" | "plpmlg" => Ok(Method::PlPmlg),
            "uw-pmlg" | "uwpmlg" => Ok(Method::UwPmlg),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

/// One area's estimate. `se == None` marks a flagged-missing standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaEstimate {
    pub area_id: i64,
    pub method: Method,
    pub point: f64,
    pub se: Option<f64>,
}

/// The derived vacancy indicator.
pub fn vacancy(z: u64) -> f64 {
    if z == 0 {
        1.0
    } else {
        0.0
    }
}

fn check_pi(y: &[f64], pi: &[f64]) -> Result<()> {
    if y.len() != pi.len() {
        return Err(Error::Dimension(format!(
            "{} values but {} probabilities",
            y.len(),
            pi.len()
        )));
    }
    if let Some(i) = pi.iter().position(|p| !(*p > 0.0 && *p <= 1.0)) {
        return Err(Error::InvalidParameter(format!(
            "inclusion probability {} at position {i} outside (0, 1]",
            pi[i]
        )));
    }
    Ok(())
}

/// Horvitz-Thompson total `sum y_i / pi_i`.
pub fn ht_total(y: &[f64], pi: &[f64]) -> Result<f64> {
    check_pi(y, pi)?;
    Ok(y.iter().zip(pi).map(|(v, p)| v / p).sum())
}

/// Hajek variance `n/(n-1) sum (1 - pi)(y/pi - A)^2` with
/// `A = sum (1 - pi) y/pi / sum (1 - pi)`. `None` flags a missing value
/// (all `y` zero, so the point estimate is zero).
pub fn hajek_variance(y: &[f64], pi: &[f64]) -> Result<Option<f64>> {
    check_pi(y, pi)?;
    let n = y.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "variance needs at least two units, got {n}"
        )));
    }
    if y.iter().all(|v| *v == 0.0) {
        return Ok(None);
    }
    let c: Vec<f64> = pi.iter().map(|p| 1.0 - p).collect();
    let csum: f64 = c.iter().sum();
    if csum == 0.0 {
        return Ok(Some(0.0));
    }
    let e: Vec<f64> = y.iter().zip(pi).map(|(v, p)| v / p).collect();
    let a = c.iter().zip(&e).map(|(ci, ei)| ci * ei).sum::<f64>() / csum;
    let s: f64 = c.iter().zip(&e).map(|(ci, ei)| ci * (ei - a).powi(2)).sum();
    Ok(Some((n as f64 / (n as f64 - 1.0) * s).max(0.0)))
}

/// Per-area HT totals of the vacancy indicator with Hajek standard errors.
/// Areas with fewer than two sampled units, or no sampled vacancy, get a
/// flagged-missing SE.
pub fn direct_estimates(population: &Population, sample: &SampleDesign) -> Result<Vec<AreaEstimate>> {
    let r = population.n_areas();
    let mut y: Vec<Vec<f64>> = vec![Vec::new(); r];
    let mut pi: Vec<Vec<f64>> = vec![Vec::new(); r];
    for (&i, &p) in sample.selected.iter().zip(&sample.pi) {
        let u = &population.units()[i];
        y[u.area].push(vacancy(u.z));
        pi[u.area].push(p);
    }
    (0..r)
        .map(|a| {
            let point = ht_total(&y[a], &pi[a])?;
            let se = if y[a].len() >= 2 {
                hajek_variance(&y[a], &pi[a])?.map(f64::sqrt)
            } else {
                None
            };
            Ok(AreaEstimate {
                area_id: population.areas()[a],
                method: Method::Direct,
                point,
                se,
            })
        })
        .collect()
}

/// Posterior-predictive area totals, one row per kept draw.
#[derive(Clone, Debug)]
pub struct PredictiveTotals {
    /// kept x r
    pub area: DMatrix<f64>,
    /// Statewide total per draw, accumulated separately from `area`.
    pub statewide: Vec<f64>,
    /// Self-normalized draw weights.
    pub weights: Vec<f64>,
}

impl PredictiveTotals {
    /// Weighted mean and standard deviation of each area's total.
    pub fn summarize(&self, method: Method, area_ids: &[i64]) -> Vec<AreaEstimate> {
        (0..self.area.ncols())
            .map(|a| {
                let col = self.area.column(a);
                let mean: f64 = col.iter().zip(&self.weights).map(|(v, w)| w * v).sum();
                let var: f64 = col
                    .iter()
                    .zip(&self.weights)
                    .map(|(v, w)| w * (v - mean).powi(2))
                    .sum();
                AreaEstimate {
                    area_id: area_ids[a],
                    method,
                    point: mean,
                    se: Some(var.max(0.0).sqrt()),
                }
            })
            .collect()
    }
}

/// How unsampled units' unit-level effects are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsampledXi {
    /// Fresh draw from the MLG prior at the current `sigma_xi`.
    #[default]
    Prior,
    Zero,
}

/// Shared totalization: sampled units contribute their observed indicator;
/// each unsampled unit contributes `indicator(t, unit, linear_predictor, rng)`
/// for draw `t`. Draws run in parallel, each with stream `(seed, t)`.
fn predictive_totals<F>(
    population: &Population,
    sample: &SampleDesign,
    encoder: &DesignEncoder,
    beta: &DMatrix<f64>,
    eta: &DMatrix<f64>,
    weights: Vec<f64>,
    seed: u64,
    indicator: F,
) -> Result<PredictiveTotals>
where
    F: Fn(usize, f64, &mut StreamRng) -> f64 + Sync,
{
    let r = population.n_areas();
    let kept = beta.nrows();
    if kept == 0 {
        return Err(Error::InvalidParameter("no posterior draws".into()));
    }
    if beta.ncols() != encoder.width() || eta.ncols() != r || eta.nrows() != kept {
        return Err(Error::Dimension(format!(
            "draws have {} fixed and {} area effects; population needs {} and {r}",
            beta.ncols(),
            eta.ncols(),
            encoder.width()
        )));
    }
    let mask = sample.mask(population.len());
    let mut observed = vec![0.0; r];
    for &i in &sample.selected {
        let u = &population.units()[i];
        observed[u.area] += vacancy(u.z);
    }
    let unsampled: Vec<usize> = (0..population.len()).filter(|&i| !mask[i]).collect();
    let x = encoder.matrix(unsampled.iter().map(|&i| &population.units()[i]));
    let areas: Vec<usize> = unsampled.iter().map(|&i| population.units()[i].area).collect();

    let rows: Vec<(Vec<f64>, f64)> = (0..kept)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, &[t as u64]);
            let b = beta.row(t).transpose();
            let xb: DVector<f64> = &x * b;
            let mut totals = observed.clone();
            let mut state: f64 = observed.iter().sum();
            for (j, &a) in areas.iter().enumerate() {
                let v = indicator(t, xb[j] + eta[(t, a)], &mut rng);
                totals[a] += v;
                state += v;
            }
            (totals, state)
        })
        .collect();
    let mut area = DMatrix::zeros(kept, r);
    let mut statewide = Vec::with_capacity(kept);
    for (t, (totals, s)) in rows.into_iter().enumerate() {
        for a in 0..r {
            area[(t, a)] = totals[a];
        }
        statewide.push(s);
    }
    Ok(PredictiveTotals {
        area,
        statewide,
        weights,
    })
}

/// PMLG posterior-predictive vacancy totals. Each unsampled unit's
/// indicator is drawn as `Bernoulli(exp(-lambda))`, which has the law of
/// `1{Poisson(lambda) = 0}`.
pub fn poststratify_totals(
    draws: &PosteriorDraws,
    population: &Population,
    sample: &SampleDesign,
    encoder: &DesignEncoder,
    unsampled_xi: UnsampledXi,
    alpha_gauss: f64,
    seed: u64,
) -> Result<PredictiveTotals> {
    let weights = normalized_weights(&draws.imp_log_w)?;
    let scale: Vec<f64> = draws
        .sigma_xi
        .iter()
        .map(|s| alpha_gauss.sqrt() * s)
        .collect();
    let unit_effects = draws.xi.iter().any(|v| *v != 0.0);
    predictive_totals(
        population,
        sample,
        encoder,
        &draws.beta,
        &draws.eta,
        weights,
        seed,
        |t, lp, rng| {
            let xi = if unit_effects && unsampled_xi == UnsampledXi::Prior {
                scale[t] * log_gamma_variate(alpha_gauss, alpha_gauss, rng)
            } else {
                0.0
            };
            let p_zero = (-(lp + xi).exp()).exp();
            if rng.random::<f64>() < p_zero {
                1.0
            } else {
                0.0
            }
        },
    )
}

/// GA posterior-predictive vacancy totals: a unit is vacant when its
/// back-transformed prediction `max(0, exp(v) - delta)` is zero.
pub fn ga_predict(
    draws: &GaDraws,
    population: &Population,
    sample: &SampleDesign,
    encoder: &DesignEncoder,
    cfg: &GaConfig,
    seed: u64,
) -> Result<PredictiveTotals> {
    let kept = draws.kept();
    let sd: Vec<f64> = draws.sigma2_xi.iter().map(|v| v.sqrt()).collect();
    predictive_totals(
        population,
        sample,
        encoder,
        &draws.beta,
        &draws.eta,
        vec![1.0 / kept as f64; kept],
        seed,
        |t, lp, rng| {
            let v = if cfg.predictive_noise {
                lp + sd[t] * rng.sample::<f64, _>(rand_distr::StandardNormal)
            } else {
                lp
            };
            if back_transform(v, cfg.delta) == 0.0 {
                1.0
            } else {
                0.0
            }
        },
    )
}

/// How absolute bias is aggregated over areas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsBiasMode {
    /// Mean over areas of `|mean over replicates of (point - truth)|`.
    #[default]
    MeanOfAbsAreaBias,
    /// `|mean over replicates and areas of (point - truth)|`.
    AbsOfMeanBias,
}

/// Accuracy summary of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodMetrics {
    pub method: Method,
    pub mse: f64,
    pub abs_bias: f64,
    /// Per area: mean over replicates of the SE, flagged values excluded.
    pub avg_se: Vec<Option<f64>>,
    pub area_bias: Vec<f64>,
    pub area_mse: Vec<f64>,
}

/// MSE, absolute bias and averaged SEs for one method. `replicates[k]`
/// holds that replicate's estimates in area order.
pub fn replicate_metrics(replicates: &[Vec<AreaEstimate>], truth: &[f64], mode: AbsBiasMode) -> Result<MethodMetrics> {
    let first = replicates
        .first()
        .ok_or_else(|| Error::InvalidParameter("no replicates".into()))?;
    let method = first.first().map(|e| e.method).unwrap_or(Method::Direct);
    let r = truth.len();
    if let Some(k) = replicates.iter().position(|rep| rep.len() != r) {
        return Err(Error::Dimension(format!(
            "replicate {k} has {} areas but truth has {r}",
            replicates[k].len()
        )));
    }
    let k = replicates.len() as f64;
    let mut area_bias = vec![0.0; r];
    let mut area_mse = vec![0.0; r];
    let mut se_sum = vec![0.0; r];
    let mut se_count = vec![0usize; r];
    for rep in replicates {
        for (a, e) in rep.iter().enumerate() {
            let d = e.point - truth[a];
            area_bias[a] += d / k;
            area_mse[a] += d * d / k;
            if let Some(s) = e.se {
                se_sum[a] += s;
                se_count[a] += 1;
            }
        }
    }
    let mse = area_mse.iter().sum::<f64>() / r as f64;
    let abs_bias = match mode {
        AbsBiasMode::MeanOfAbsAreaBias => area_bias.iter().map(|b| b.abs()).sum::<f64>() / r as f64,
        AbsBiasMode::AbsOfMeanBias => (area_bias.iter().sum::<f64>() / r as f64).abs(),
    };
    let avg_se = se_sum
        .iter()
        .zip(&se_count)
        .map(|(s, &c)| if c == 0 { None } else { Some(s / c as f64) })
        .collect();
    Ok(MethodMetrics {
        method,
        mse,
        abs_bias,
        avg_se,
        area_bias,
        area_mse,
    })
}

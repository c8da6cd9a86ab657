//! Pseudo-likelihood Poisson multivariate log-Gamma (PL-PMLG) Gibbs sampler.
//!
//! Model, for sampled units `i` with scaled weights `w~_i`:
//!
//! ```text
//! Z_i | lambda_i       ~ Pois(lambda_i)^{w~_i},  log lambda_i = x_i' beta + eta_{a(i)} + xi_i
//! eta | sigma_k        ~ MLG(0, alpha^{1/2} sigma_k I_r, alpha 1, alpha 1)
//! xi  | sigma_xi       ~ MLG(0, alpha^{1/2} sigma_xi I_n, alpha 1, alpha 1)
//! beta                 ~ MLG(0, alpha^{1/2} sigma_beta I_p, alpha 1, alpha 1)
//! 1/sigma_k, 1/sigma_xi ~ LogGamma(omega, rho) restricted to (0, inf)
//! ```
//!
//! Every effect block is a cMLG conditional. Zero counts make data shapes
//! vanish, so such data are fitted as `Z + c` with pilot-scaled weights and
//! reweighted back by importance sampling.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::ars::{sample_log_concave, ExpFamilyKernel};
use crate::diagnostics::split_rhat;
use crate::error::{Error, Result};
use crate::mlg::{cmlg_log_kernel, gaussian_limit_params, log_gamma_variate, CmlgParams};

/// Rescales weights to sum to their count.
pub fn scale_weights(w: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = w.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "weight {} at position {i} must be positive",
            w[i]
        )));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter("weights sum to zero".into()));
    }
    let n = w.len() as f64;
    Ok(w.iter().map(|v| v * n / total).collect())
}

/// `log Pois(z | exp(log_lambda))`.
pub fn log_poisson(z: u64, log_lambda: f64) -> f64 {
    z as f64 * log_lambda - log_lambda.exp() - ln_factorial(z)
}

/// `sum_i w_i log Pois(Z_i | exp(log_lambda_i))`, log-factorials included.
pub fn log_pseudo_likelihood(z: &[u64], log_lambda: &[f64], w: &[f64]) -> Result<f64> {
    if z.len() != log_lambda.len() || z.len() != w.len() {
        return Err(Error::Dimension(format!(
            "{} counts, {} predictors, {} weights",
            z.len(),
            log_lambda.len(),
            w.len()
        )));
    }
    Ok(z.iter()
        .zip(log_lambda)
        .zip(w)
        .map(|((&zi, &l), &wi)| wi * log_poisson(zi, l))
        .sum())
}

/// `sum_i [w~_i log Pois(Z_i | lambda_i) - w~*_i log Pois(Z_i + c | lambda_i)]`.
pub fn importance_log_weight(
    z: &[u64],
    log_lambda: &[f64],
    w_tilde: &[f64],
    w_tilde_star: &[f64],
    c: u64,
) -> Result<f64> {
    if w_tilde_star.len() != z.len() {
        return Err(Error::Dimension(format!(
            "{} counts but {} adjusted weights",
            z.len(),
            w_tilde_star.len()
        )));
    }
    let shifted: Vec<u64> = z.iter().map(|v| v + c).collect();
    Ok(log_pseudo_likelihood(z, log_lambda, w_tilde)?
        - log_pseudo_likelihood(&shifted, log_lambda, w_tilde_star)?)
}

/// Kish effective sample size `(sum u)^2 / sum u^2` of log-weights.
pub fn importance_ess(log_w: &[f64]) -> f64 {
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return 0.0;
    }
    let (s1, s2) = log_w.iter().fold((0.0, 0.0), |(a, b), lw| {
        let u = (lw - top).exp();
        (a + u, b + u * u)
    });
    s1 * s1 / s2
}

/// Self-normalized importance weights.
pub fn normalized_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::DegenerateImportanceWeights);
    }
    let u: Vec<f64> = log_w.iter().map(|lw| (lw - top).exp()).collect();
    let total: f64 = u.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateImportanceWeights);
    }
    Ok(u.into_iter().map(|v| v / total).collect())
}

/// Sampled counts, covariates, area membership and scaled weights.
#[derive(Clone, Debug)]
pub struct ModelData {
    z: Vec<u64>,
    x: DMatrix<f64>,
    area: Vec<usize>,
    n_areas: usize,
    w_tilde: Vec<f64>,
    /// Index of each unit's row among the distinct rows of `x`.
    group: Vec<usize>,
    group_rows: DMatrix<f64>,
}

impl ModelData {
    /// `w_tilde` must already sum to the sample size.
    pub fn new(
        z: Vec<u64>,
        x: DMatrix<f64>,
        area: Vec<usize>,
        n_areas: usize,
        w_tilde: Vec<f64>,
    ) -> Result<Self> {
        let n = z.len();
        let total: f64 = w_tilde.iter().sum();
        if (total - n as f64).abs() > 1e-8 * (n as f64).max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "scaled weights sum to {total}, expected {n}"
            )));
        }
        Self::unchecked(z, x, area, n_areas, w_tilde)
    }

    /// Scales raw design weights and builds the data.
    pub fn from_design_weights(
        z: Vec<u64>,
        x: DMatrix<f64>,
        area: Vec<usize>,
        n_areas: usize,
        w: &[f64],
    ) -> Result<Self> {
        let w_tilde = scale_weights(w)?;
        Self::new(z, x, area, n_areas, w_tilde)
    }

    fn unchecked(
        z: Vec<u64>,
        x: DMatrix<f64>,
        area: Vec<usize>,
        n_areas: usize,
        w_tilde: Vec<f64>,
    ) -> Result<Self> {
        let n = z.len();
        if n == 0 {
            return Err(Error::InvalidParameter("empty sample".into()));
        }
        if x.nrows() != n || area.len() != n || w_tilde.len() != n {
            return Err(Error::Dimension(format!(
                "{n} counts, X has {} rows, {} area labels, {} weights",
                x.nrows(),
                area.len(),
                w_tilde.len()
            )));
        }
        if let Some(i) = area.iter().position(|&a| a >= n_areas) {
            return Err(Error::InvalidParameter(format!(
                "unit {i} is in area {} but there are {n_areas} areas",
                area[i]
            )));
        }
        if let Some(i) = w_tilde.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "scaled weight {} at unit {i} must be positive",
                w_tilde[i]
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("X has non-finite entries".into()));
        }
        let p = x.ncols();
        if p == 0 || p > n {
            return Err(Error::DegenerateDesign(format!("X is {n}x{p}")));
        }
        let r_diag = x.clone().qr().r().diagonal();
        let scale = x.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        if let Some(j) = r_diag.iter().position(|d| !(d.abs() > scale * n as f64 * 1e-12)) {
            return Err(Error::DegenerateDesign(format!(
                "column {j} of X is linearly dependent on earlier columns"
            )));
        }

        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut rows: Vec<usize> = Vec::new();
        let group = (0..n)
            .map(|i| {
                let key: Vec<u64> = x.row(i).iter().map(|v| v.to_bits()).collect();
                *index.entry(key).or_insert_with(|| {
                    rows.push(i);
                    rows.len() - 1
                })
            })
            .collect();
        let group_rows = DMatrix::from_fn(rows.len(), p, |g, j| x[(rows[g], j)]);
        Ok(Self {
            z,
            x,
            area,
            n_areas,
            w_tilde,
            group,
            group_rows,
        })
    }

    /// Same data with every scaled weight set to one.
    pub fn unweighted(&self) -> Self {
        Self {
            w_tilde: vec![1.0; self.n()],
            ..self.clone()
        }
    }

    /// Boundary-adjusted data: counts `Z + c`, weights `factor * w~`.
    pub fn adjusted(&self, c: u64, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weight factor {factor} must be positive"
            )));
        }
        Ok(Self {
            z: self.z.iter().map(|v| v + c).collect(),
            w_tilde: self.w_tilde.iter().map(|w| w * factor).collect(),
            ..self.clone()
        })
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn z(&self) -> &[u64] {
        &self.z
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Area index of each unit (the column holding the 1 in its row of Psi).
    pub fn area(&self) -> &[usize] {
        &self.area
    }

    pub fn w_tilde(&self) -> &[f64] {
        &self.w_tilde
    }

    pub fn has_zero(&self) -> bool {
        self.z.contains(&0)
    }

    /// The `n x r` incidence matrix.
    pub fn psi_matrix(&self) -> DMatrix<f64> {
        let mut psi = DMatrix::zeros(self.n(), self.n_areas);
        for (i, &a) in self.area.iter().enumerate() {
            psi[(i, a)] = 1.0;
        }
        psi
    }

    /// Distinct rows of `X` and the row index of each unit.
    pub fn groups(&self) -> (&DMatrix<f64>, &[usize]) {
        (&self.group_rows, &self.group)
    }
}

/// How the scale parameters `1/sigma` are updated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleUpdate {
    /// Exact conditional, including the `t^d` determinant of the MLG prior;
    /// drawn by adaptive rejection.
    #[default]
    Full,
    /// The cMLG kernel without the determinant, drawn by rejection from the
    /// projection sampler.
    DropJacobian,
}

/// How the effect blocks (`beta`, `eta`, `xi`) are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectDraw {
    /// Least-squares projection of independent log-Gamma variates.
    Projection,
    /// Exact univariate conditionals by adaptive rejection (coordinate-wise
    /// for `beta`).
    #[default]
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlpmlgConfig {
    pub alpha_gauss: f64,
    pub sigma_beta: f64,
    pub omega: f64,
    pub rho: f64,
    pub n_iter: usize,
    pub burn_in: usize,
    pub boundary_c: u64,
    pub pilot_iters: usize,
    pub trunc_max_attempts: usize,
    pub scale_update: ScaleUpdate,
    pub effect_draw: EffectDraw,
    /// Merge identical rows of each stacked `H` (summing shapes and rates)
    /// before projecting.
    pub collapse_rows: bool,
    pub area_effects: bool,
    pub unit_effects: bool,
}

impl Default for PlpmlgConfig {
    fn default() -> Self {
        Self {
            alpha_gauss: 1000.0,
            sigma_beta: 1000.0,
            omega: 1000.0,
            rho: 1000.0,
            n_iter: 2000,
            burn_in: 1000,
            boundary_c: 1,
            pilot_iters: 100,
            trunc_max_attempts: 10_000,
            scale_update: ScaleUpdate::Full,
            effect_draw: EffectDraw::Exact,
            collapse_rows: true,
            area_effects: true,
            unit_effects: true,
        }
    }
}

impl PlpmlgConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_gauss", self.alpha_gauss),
            ("sigma_beta", self.sigma_beta),
            ("omega", self.omega),
            ("rho", self.rho),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn_in ({}) must be below n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if !(1..=2).contains(&self.boundary_c) {
            return Err(Error::Config(format!(
                "boundary_c = {} must be 1 or 2",
                self.boundary_c
            )));
        }
        if self.pilot_iters == 0 {
            return Err(Error::Config("pilot_iters must be positive".into()));
        }
        if self.trunc_max_attempts == 0 {
            return Err(Error::Config("trunc_max_attempts must be positive".into()));
        }
        Ok(())
    }

    fn inv_sqrt_alpha(&self) -> f64 {
        self.alpha_gauss.sqrt().recip()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GibbsState {
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
    pub xi: DVector<f64>,
    pub sigma_k: f64,
    pub sigma_xi: f64,
}

impl GibbsState {
    /// `beta` from weighted least squares of `log(Z + 1)` on `X`; random
    /// effects at zero and unit scales.
    pub fn initial(data: &ModelData) -> Result<Self> {
        let x = data.x();
        let w = DVector::from_column_slice(data.w_tilde());
        let y = DVector::from_iterator(data.n(), data.z().iter().map(|&v| (v as f64).ln_1p()));
        let xw = DMatrix::from_fn(data.n(), data.p(), |i, j| x[(i, j)] * w[i]);
        let gram = xw.transpose() * x;
        let rhs = xw.transpose() * y;
        let beta = gram
            .cholesky()
            .ok_or_else(|| Error::DegenerateDesign("X'WX is not positive definite".into()))?
            .solve(&rhs);
        Ok(Self {
            beta,
            eta: DVector::zeros(data.n_areas()),
            xi: DVector::zeros(data.n()),
            sigma_k: 1.0,
            sigma_xi: 1.0,
        })
    }

    /// Log intensities `x_i' beta + eta_{a(i)} + xi_i`.
    pub fn log_lambda(&self, data: &ModelData) -> Vec<f64> {
        let xb = data.x() * &self.beta;
        (0..data.n())
            .map(|i| xb[i] + self.eta[data.area()[i]] + self.xi[i])
            .collect()
    }

    fn is_finite(v: &DVector<f64>) -> bool {
        v.iter().all(|x| x.is_finite())
    }
}

/// Unvalidated `cMLG(H, alpha, kappa)` parameters of a full conditional.
#[derive(Clone, Debug)]
pub struct Conditional {
    pub h: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub kappa: DVector<f64>,
}

impl Conditional {
    pub fn log_kernel(&self, t: &DVector<f64>) -> Result<f64> {
        cmlg_log_kernel(&self.h, &self.alpha, &self.kappa, t)
    }

    pub fn params(&self) -> Result<CmlgParams> {
        CmlgParams::new(self.h.clone(), self.alpha.clone(), self.kappa.clone())
    }
}

fn stack(
    data_h: DMatrix<f64>,
    data_alpha: Vec<f64>,
    data_kappa: Vec<f64>,
    prior_scale: f64,
    alpha: f64,
) -> Conditional {
    let (m, r) = data_h.shape();
    let mut h = DMatrix::zeros(m + r, r);
    h.rows_mut(0, m).copy_from(&data_h);
    for j in 0..r {
        h[(m + j, j)] = prior_scale;
    }
    let mut a = data_alpha;
    a.extend(std::iter::repeat_n(alpha, r));
    let mut k = data_kappa;
    k.extend(std::iter::repeat_n(alpha, r));
    Conditional {
        h,
        alpha: DVector::from_vec(a),
        kappa: DVector::from_vec(k),
    }
}

/// Per-area sums of `w~ Z` and `w~ exp(offset)`.
fn area_sums(data: &ModelData, offset: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let r = data.n_areas();
    let (mut a, mut k, mut seen) = (vec![0.0; r], vec![0.0; r], vec![false; r]);
    for i in 0..data.n() {
        let j = data.area[i];
        a[j] += data.w_tilde[i] * data.z[i] as f64;
        k[j] += data.w_tilde[i] * offset[i].exp();
        seen[j] = true;
    }
    (a, k, seen)
}

/// Per-row-group sums of `w~ Z` and `w~ exp(offset)`.
fn group_sums(data: &ModelData, offset: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let g = data.group_rows.nrows();
    let (mut a, mut k) = (vec![0.0; g], vec![0.0; g]);
    for i in 0..data.n() {
        let j = data.group[i];
        a[j] += data.w_tilde[i] * data.z[i] as f64;
        k[j] += data.w_tilde[i] * offset[i].exp();
    }
    (a, k)
}

fn eta_offset(state: &GibbsState, data: &ModelData) -> Vec<f64> {
    let xb = data.x() * &state.beta;
    (0..data.n()).map(|i| xb[i] + state.xi[i]).collect()
}

fn xi_offset(state: &GibbsState, data: &ModelData) -> Vec<f64> {
    let xb = data.x() * &state.beta;
    (0..data.n())
        .map(|i| xb[i] + state.eta[data.area[i]])
        .collect()
}

fn beta_offset(state: &GibbsState, data: &ModelData) -> Vec<f64> {
    (0..data.n())
        .map(|i| state.eta[data.area[i]] + state.xi[i])
        .collect()
}

/// `eta | .`: `H = [Psi; alpha^{-1/2} sigma_k^{-1} I_r]`. With `collapse`,
/// the `Psi` rows are merged per area (areas without units contribute no
/// data row).
pub fn eta_conditional(state: &GibbsState, data: &ModelData, cfg: &PlpmlgConfig, collapse: bool) -> Conditional {
    let s = cfg.inv_sqrt_alpha() / state.sigma_k;
    let offset = eta_offset(state, data);
    if collapse {
        let (a, k, seen) = area_sums(data, &offset);
        let areas: Vec<usize> = (0..data.n_areas()).filter(|&j| seen[j]).collect();
        let mut h = DMatrix::zeros(areas.len(), data.n_areas());
        for (row, &j) in areas.iter().enumerate() {
            h[(row, j)] = 1.0;
        }
        stack(
            h,
            areas.iter().map(|&j| a[j]).collect(),
            areas.iter().map(|&j| k[j]).collect(),
            s,
            cfg.alpha_gauss,
        )
    } else {
        stack(
            data.psi_matrix(),
            (0..data.n()).map(|i| data.w_tilde[i] * data.z[i] as f64).collect(),
            (0..data.n()).map(|i| data.w_tilde[i] * offset[i].exp()).collect(),
            s,
            cfg.alpha_gauss,
        )
    }
}

/// `xi | .`: `H = [I_n; alpha^{-1/2} sigma_xi^{-1} I_n]`.
pub fn xi_conditional(state: &GibbsState, data: &ModelData, cfg: &PlpmlgConfig) -> Conditional {
    let s = cfg.inv_sqrt_alpha() / state.sigma_xi;
    let offset = xi_offset(state, data);
    stack(
        DMatrix::identity(data.n(), data.n()),
        (0..data.n()).map(|i| data.w_tilde[i] * data.z[i] as f64).collect(),
        (0..data.n()).map(|i| data.w_tilde[i] * offset[i].exp()).collect(),
        s,
        cfg.alpha_gauss,
    )
}

/// `beta | .`: `H = [X; alpha^{-1/2} sigma_beta^{-1} I_p]`. With `collapse`,
/// identical rows of `X` are merged.
pub fn beta_conditional(state: &GibbsState, data: &ModelData, cfg: &PlpmlgConfig, collapse: bool) -> Conditional {
    let s = cfg.inv_sqrt_alpha() / cfg.sigma_beta;
    let offset = beta_offset(state, data);
    if collapse {
        let (a, k) = group_sums(data, &offset);
        stack(data.group_rows.clone(), a, k, s, cfg.alpha_gauss)
    } else {
        stack(
            data.x.clone(),
            (0..data.n()).map(|i| data.w_tilde[i] * data.z[i] as f64).collect(),
            (0..data.n()).map(|i| data.w_tilde[i] * offset[i].exp()).collect(),
            s,
            cfg.alpha_gauss,
        )
    }
}

/// `1/sigma | .` without the prior determinant:
/// `H = (alpha^{-1/2} effect', 1)'`, shapes `(alpha 1, omega)`, rates `(alpha 1, rho)`.
pub fn scale_conditional(effect: &DVector<f64>, cfg: &PlpmlgConfig) -> Conditional {
    let d = effect.len();
    let mut h = DMatrix::zeros(d + 1, 1);
    for (j, e) in effect.iter().enumerate() {
        h[(j, 0)] = cfg.inv_sqrt_alpha() * e;
    }
    h[(d, 0)] = 1.0;
    let mut alpha = DVector::from_element(d + 1, cfg.alpha_gauss);
    alpha[d] = cfg.omega;
    let mut kappa = DVector::from_element(d + 1, cfg.alpha_gauss);
    kappa[d] = cfg.rho;
    Conditional { h, alpha, kappa }
}

/// Exact log-density of `1/sigma | .` on `(0, inf)`: the cMLG kernel of
/// [`scale_conditional`] plus `d log t`.
pub fn scale_kernel(effect: &DVector<f64>, cfg: &PlpmlgConfig) -> ExpFamilyKernel {
    let mut f = ExpFamilyKernel::positive(effect.len() as f64);
    for e in effect.iter() {
        f.push(cfg.alpha_gauss, cfg.inv_sqrt_alpha() * e, cfg.alpha_gauss);
    }
    f.push(cfg.omega, 1.0, cfg.rho);
    f
}

/// Exact conditional of `beta_j` with the other coordinates fixed.
pub fn beta_coordinate_kernel(
    state: &GibbsState,
    data: &ModelData,
    cfg: &PlpmlgConfig,
    j: usize,
) -> ExpFamilyKernel {
    let offset = beta_offset(state, data);
    let (a, k) = group_sums(data, &offset);
    beta_coordinate_from_sums(&state.beta, &data.group_rows, &a, &k, cfg, j)
}

fn beta_coordinate_from_sums(
    beta: &DVector<f64>,
    rows: &DMatrix<f64>,
    a: &[f64],
    k: &[f64],
    cfg: &PlpmlgConfig,
    j: usize,
) -> ExpFamilyKernel {
    let mut f = ExpFamilyKernel::real();
    for g in 0..rows.nrows() {
        let xg = rows[(g, j)];
        if xg == 0.0 {
            continue;
        }
        let rest = rows.row(g).transpose().dot(beta) - xg * beta[j];
        f.push(a[g], xg, k[g] * rest.exp());
    }
    f.push(cfg.alpha_gauss, cfg.inv_sqrt_alpha() / cfg.sigma_beta, cfg.alpha_gauss);
    f
}

/// Exact conditional of `eta_j`.
pub fn eta_area_kernel(state: &GibbsState, data: &ModelData, cfg: &PlpmlgConfig, j: usize) -> ExpFamilyKernel {
    let (a, k, seen) = area_sums(data, &eta_offset(state, data));
    let mut f = ExpFamilyKernel::real();
    if seen[j] {
        f.push(a[j], 1.0, k[j]);
    }
    f.push(cfg.alpha_gauss, cfg.inv_sqrt_alpha() / state.sigma_k, cfg.alpha_gauss);
    f
}

/// Exact conditional of `xi_i`.
pub fn xi_unit_kernel(state: &GibbsState, data: &ModelData, cfg: &PlpmlgConfig, i: usize) -> ExpFamilyKernel {
    let offset = xi_offset(state, data);
    unit_kernel(
        data.w_tilde[i] * data.z[i] as f64,
        data.w_tilde[i] * offset[i].exp(),
        cfg.inv_sqrt_alpha() / state.sigma_xi,
        cfg.alpha_gauss,
    )
}

fn unit_kernel(a: f64, k: f64, s: f64, alpha: f64) -> ExpFamilyKernel {
    let mut f = ExpFamilyKernel::real();
    f.push(a, 1.0, k);
    f.push(alpha, s, alpha);
    f
}

/// Log of the truncated LogGamma(omega, rho) prior density of `t = 1/sigma`,
/// up to a constant.
fn log_scale_prior(t: f64, cfg: &PlpmlgConfig) -> f64 {
    if t > 0.0 {
        cfg.omega * t - cfg.rho * t.exp()
    } else {
        f64::NEG_INFINITY
    }
}

/// Log pseudo-posterior (up to a constant) over
/// `(beta, eta, xi, 1/sigma_k, 1/sigma_xi)`: pseudo-likelihood plus every
/// prior log-density. Disabled effect blocks contribute nothing.
pub fn log_joint(state: &GibbsState, data: &ModelData, cfg: &PlpmlgConfig) -> Result<f64> {
    let alpha = cfg.alpha_gauss;
    let mut total = log_pseudo_likelihood(data.z(), &state.log_lambda(data), data.w_tilde())?;
    let p = data.p();
    total += gaussian_limit_params(
        DVector::zeros(p),
        &(DMatrix::identity(p, p) * cfg.sigma_beta),
        alpha,
    )?
    .log_density(&state.beta)?;
    if cfg.area_effects {
        let r = data.n_areas();
        total += gaussian_limit_params(
            DVector::zeros(r),
            &(DMatrix::identity(r, r) * state.sigma_k),
            alpha,
        )?
        .log_density(&state.eta)?;
        total += log_scale_prior(1.0 / state.sigma_k, cfg);
    }
    if cfg.unit_effects {
        let n = data.n();
        total += gaussian_limit_params(
            DVector::zeros(n),
            &(DMatrix::identity(n, n) * state.sigma_xi),
            alpha,
        )?
        .log_density(&state.xi)?;
        total += log_scale_prior(1.0 / state.sigma_xi, cfg);
    }
    Ok(total)
}

/// Kept draws of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    /// kept x p
    pub beta: DMatrix<f64>,
    /// kept x r
    pub eta: DMatrix<f64>,
    /// kept x n
    pub xi: DMatrix<f64>,
    pub sigma_k: Vec<f64>,
    pub sigma_xi: Vec<f64>,
    /// Importance log-weights; all zero when no boundary correction ran.
    pub imp_log_w: Vec<f64>,
    /// Seed of the stream that produced the chain, when known.
    pub rng_seed: Option<u64>,
    /// Mean pilot ratio, when the boundary correction ran.
    pub pilot_ratio: Option<f64>,
}

impl PosteriorDraws {
    pub fn kept(&self) -> usize {
        self.imp_log_w.len()
    }

    pub fn ess(&self) -> f64 {
        importance_ess(&self.imp_log_w)
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        normalized_weights(&self.imp_log_w)
    }

    /// Importance-weighted mean of each `beta` component.
    pub fn beta_mean(&self) -> Result<DVector<f64>> {
        let w = self.weights()?;
        Ok(DVector::from_fn(self.beta.ncols(), |j, _| {
            (0..self.kept()).map(|t| w[t] * self.beta[(t, j)]).sum()
        }))
    }

    /// One column per parameter, one row per kept iteration.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = Vec::new();
        header.extend((0..self.beta.ncols()).map(|j| format!("beta_{j}")));
        header.extend((0..self.eta.ncols()).map(|j| format!("eta_{j}")));
        header.extend((0..self.xi.ncols()).map(|j| format!("xi_{j}")));
        header.extend(["sigma_k", "sigma_xi", "imp_log_w"].map(String::from));
        w.write_record(&header)?;
        for t in 0..self.kept() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            rec.extend(self.beta.row(t).iter().map(|v| v.to_string()));
            rec.extend(self.eta.row(t).iter().map(|v| v.to_string()));
            rec.extend(self.xi.row(t).iter().map(|v| v.to_string()));
            rec.push(self.sigma_k[t].to_string());
            rec.push(self.sigma_xi[t].to_string());
            rec.push(self.imp_log_w[t].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Gibbs sweeps for one data set and configuration.
pub struct Sampler<'a> {
    data: &'a ModelData,
    cfg: &'a PlpmlgConfig,
    /// Projection factors for `beta`, whose `H` never changes.
    beta_h: Option<CmlgParams>,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a ModelData, cfg: &'a PlpmlgConfig) -> Result<Self> {
        cfg.validate()?;
        let beta_h = if cfg.effect_draw == EffectDraw::Projection {
            let init = GibbsState::initial(data)?;
            let cond = beta_conditional(&init, data, cfg, cfg.collapse_rows);
            let ones = DVector::from_element(cond.h.nrows(), 1.0);
            Some(CmlgParams::new(cond.h, ones.clone(), ones)?)
        } else {
            None
        };
        Ok(Self { data, cfg, beta_h })
    }

    pub fn draw_beta<R: Rng + ?Sized>(&self, state: &GibbsState, rng: &mut R) -> Result<DVector<f64>> {
        let (data, cfg) = (self.data, self.cfg);
        match &self.beta_h {
            Some(base) => {
                let cond = beta_conditional(state, data, cfg, cfg.collapse_rows);
                base.with_shape_rate(cond.alpha, cond.kappa)?.sample(rng)
            }
            None => {
                let (a, k) = group_sums(data, &beta_offset(state, data));
                let mut beta = state.beta.clone();
                for j in 0..data.p() {
                    let f = beta_coordinate_from_sums(&beta, &data.group_rows, &a, &k, cfg, j);
                    beta[j] = sample_log_concave(&f, beta[j], cfg.trunc_max_attempts, rng)?;
                }
                Ok(beta)
            }
        }
    }

    pub fn draw_eta<R: Rng + ?Sized>(&self, state: &GibbsState, rng: &mut R) -> Result<DVector<f64>> {
        let (data, cfg) = (self.data, self.cfg);
        let alpha = cfg.alpha_gauss;
        let s = cfg.inv_sqrt_alpha() / state.sigma_k;
        let r = data.n_areas();
        match cfg.effect_draw {
            EffectDraw::Projection if cfg.collapse_rows => {
                // Block-diagonal H: each area projects its own (data, prior)
                // pair. Variates are drawn in the stacked order.
                let (a, k, seen) = area_sums(data, &eta_offset(state, data));
                let mut w1 = vec![0.0; r];
                for j in (0..r).filter(|&j| seen[j]) {
                    w1[j] = log_gamma_variate(a[j], k[j], rng);
                }
                let mut eta = DVector::zeros(r);
                for j in 0..r {
                    let w2 = log_gamma_variate(alpha, alpha, rng);
                    eta[j] = if seen[j] {
                        (w1[j] + s * w2) / (1.0 + s * s)
                    } else {
                        w2 / s
                    };
                }
                Ok(eta)
            }
            EffectDraw::Projection => eta_conditional(state, data, cfg, false).params()?.sample(rng),
            EffectDraw::Exact => {
                let (a, k, seen) = area_sums(data, &eta_offset(state, data));
                let mut eta = DVector::zeros(r);
                for j in 0..r {
                    let mut f = ExpFamilyKernel::real();
                    if seen[j] {
                        f.push(a[j], 1.0, k[j]);
                    }
                    f.push(alpha, s, alpha);
                    eta[j] = sample_log_concave(&f, state.eta[j], cfg.trunc_max_attempts, rng)?;
                }
                Ok(eta)
            }
        }
    }

    /// `H_xi` is block diagonal by unit, so the projection reduces to
    /// `(w1_i + s w2_i) / (1 + s^2)` with all data variates drawn before the
    /// prior ones, matching the stacked draw.
    pub fn draw_xi<R: Rng + ?Sized>(&self, state: &GibbsState, rng: &mut R) -> Result<DVector<f64>> {
        let (data, cfg) = (self.data, self.cfg);
        let alpha = cfg.alpha_gauss;
        let s = cfg.inv_sqrt_alpha() / state.sigma_xi;
        let n = data.n();
        let offset = xi_offset(state, data);
        match cfg.effect_draw {
            EffectDraw::Projection => {
                let w1: Vec<f64> = (0..n)
                    .map(|i| {
                        let wt = data.w_tilde[i];
                        log_gamma_variate(wt * data.z[i] as f64, wt * offset[i].exp(), rng)
                    })
                    .collect();
                let mut xi = DVector::zeros(n);
                for i in 0..n {
                    let w2 = log_gamma_variate(alpha, alpha, rng);
                    xi[i] = (w1[i] + s * w2) / (1.0 + s * s);
                }
                Ok(xi)
            }
            EffectDraw::Exact => {
                let mut xi = DVector::zeros(n);
                for i in 0..n {
                    let wt = data.w_tilde[i];
                    let f = unit_kernel(wt * data.z[i] as f64, wt * offset[i].exp(), s, alpha);
                    xi[i] = sample_log_concave(&f, state.xi[i], cfg.trunc_max_attempts, rng)?;
                }
                Ok(xi)
            }
        }
    }

    pub fn draw_sigma_k<R: Rng + ?Sized>(&self, state: &GibbsState, rng: &mut R) -> Result<f64> {
        draw_scale(&state.eta, state.sigma_k, self.cfg, rng)
    }

    pub fn draw_sigma_xi<R: Rng + ?Sized>(&self, state: &GibbsState, rng: &mut R) -> Result<f64> {
        draw_scale(&state.xi, state.sigma_xi, self.cfg, rng)
    }

    /// One full sweep in the order beta, eta, xi, sigma_k, sigma_xi.
    pub fn sweep<R: Rng + ?Sized>(&self, state: &mut GibbsState, iteration: usize, rng: &mut R) -> Result<()> {
        let cfg = self.cfg;
        state.beta = self.draw_beta(state, rng)?;
        if !GibbsState::is_finite(&state.beta) {
            return Err(Error::NonFiniteState { block: "beta", iteration });
        }
        if cfg.area_effects {
            state.eta = self.draw_eta(state, rng)?;
            if !GibbsState::is_finite(&state.eta) {
                return Err(Error::NonFiniteState { block: "eta", iteration });
            }
        }
        if cfg.unit_effects {
            state.xi = self.draw_xi(state, rng)?;
            if !GibbsState::is_finite(&state.xi) {
                return Err(Error::NonFiniteState { block: "xi", iteration });
            }
        }
        if cfg.area_effects {
            state.sigma_k = self.draw_sigma_k(state, rng)?;
            if !(state.sigma_k > 0.0 && state.sigma_k.is_finite()) {
                return Err(Error::NonFiniteState { block: "sigma_k", iteration });
            }
        }
        if cfg.unit_effects {
            state.sigma_xi = self.draw_sigma_xi(state, rng)?;
            if !(state.sigma_xi > 0.0 && state.sigma_xi.is_finite()) {
                return Err(Error::NonFiniteState { block: "sigma_xi", iteration });
            }
        }
        Ok(())
    }
}

fn draw_scale<R: Rng + ?Sized>(effect: &DVector<f64>, sigma: f64, cfg: &PlpmlgConfig, rng: &mut R) -> Result<f64> {
    let t = match cfg.scale_update {
        ScaleUpdate::Full => {
            let f = scale_kernel(effect, cfg);
            sample_log_concave(&f, 1.0 / sigma, cfg.trunc_max_attempts, rng)?
        }
        ScaleUpdate::DropJacobian => scale_conditional(effect, cfg)
            .params()?
            .sample_truncated_positive(cfg.trunc_max_attempts, rng)?,
    };
    Ok(1.0 / t)
}

/// Free-standing forms of the block updates.
pub fn draw_beta<R: Rng + ?Sized>(state: &GibbsState, data: &ModelData, cfg: &PlpmlgConfig, rng: &mut R) -> Result<DVector<f64>> {
    Sampler::new(data, cfg)?.draw_beta(state, rng)
}

pub fn draw_eta<R: Rng + ?Sized>(state: &GibbsState, data: &ModelData, cfg: &PlpmlgConfig, rng: &mut R) -> Result<DVector<f64>> {
    Sampler::new(data, cfg)?.draw_eta(state, rng)
}

pub fn draw_xi<R: Rng + ?Sized>(state: &GibbsState, data: &ModelData, cfg: &PlpmlgConfig, rng: &mut R) -> Result<DVector<f64>> {
    Sampler::new(data, cfg)?.draw_xi(state, rng)
}

pub fn draw_sigma_k<R: Rng + ?Sized>(state: &GibbsState, cfg: &PlpmlgConfig, rng: &mut R) -> Result<f64> {
    draw_scale(&state.eta, state.sigma_k, cfg, rng)
}

pub fn draw_sigma_xi<R: Rng + ?Sized>(state: &GibbsState, cfg: &PlpmlgConfig, rng: &mut R) -> Result<f64> {
    draw_scale(&state.xi, state.sigma_xi, cfg, rng)
}

/// Runs the pilot chain on `adjusted` (which must be `truth` shifted by a
/// constant) and returns the mean ratio of the true to the adjusted log
/// pseudo-likelihood, together with the final state.
pub fn run_pilot<R: Rng + ?Sized>(
    adjusted: &ModelData,
    truth: &ModelData,
    cfg: &PlpmlgConfig,
    rng: &mut R,
) -> Result<(f64, GibbsState)> {
    cfg.validate()?;
    if adjusted.n() != truth.n() {
        return Err(Error::Dimension("adjusted and true data differ in size".into()));
    }
    let c = adjusted.z[0].checked_sub(truth.z[0]);
    let consistent = c.is_some()
        && adjusted
            .z
            .iter()
            .zip(&truth.z)
            .all(|(a, t)| a.checked_sub(*t) == c);
    if !consistent {
        return Err(Error::PilotFailure(
            "adjusted counts are not the true counts plus a constant".into(),
        ));
    }
    let sampler = Sampler::new(adjusted, cfg)?;
    let mut state = GibbsState::initial(adjusted)?;
    let mut sum = 0.0;
    let mut sign = 0.0;
    for it in 0..cfg.pilot_iters {
        sampler.sweep(&mut state, it, rng)?;
        let ll = state.log_lambda(adjusted);
        let adj = log_pseudo_likelihood(&adjusted.z, &ll, &adjusted.w_tilde)?;
        let tru = log_pseudo_likelihood(&truth.z, &ll, &truth.w_tilde)?;
        if adj == 0.0 || !adj.is_finite() {
            return Err(Error::PilotFailure(format!(
                "adjusted log pseudo-likelihood is {adj} at iteration {it}"
            )));
        }
        if sign != 0.0 && adj.signum() != sign {
            warn!("adjusted log pseudo-likelihood changed sign during the pilot chain");
        }
        sign = adj.signum();
        sum += tru / adj;
    }
    Ok((sum / cfg.pilot_iters as f64, state))
}

/// Pilot ratio only.
pub fn run_pilot_chain<R: Rng + ?Sized>(
    adjusted: &ModelData,
    truth: &ModelData,
    cfg: &PlpmlgConfig,
    rng: &mut R,
) -> Result<f64> {
    run_pilot(adjusted, truth, cfg, rng).map(|(r, _)| r)
}

/// Full PL-PMLG fit. Data with zero counts go through the boundary
/// correction (pilot chain, then a chain on `Z + c` with weights
/// `rbar * w~` whose kept draws carry importance log-weights); otherwise the
/// chain runs on the data directly with zero log-weights. The main chain
/// continues from the pilot's final state.
pub fn run_gibbs<R: Rng + ?Sized>(data: &ModelData, cfg: &PlpmlgConfig, rng: &mut R) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let (work, mut state, correction) = if data.has_zero() {
        let pilot_data = data.adjusted(cfg.boundary_c, 1.0)?;
        let (ratio, state) = run_pilot(&pilot_data, data, cfg, rng)?;
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::PilotFailure(format!("mean ratio {ratio} is not positive")));
        }
        (data.adjusted(cfg.boundary_c, ratio)?, state, Some(ratio))
    } else {
        (data.clone(), GibbsState::initial(data)?, None)
    };
    let sampler = Sampler::new(&work, cfg)?;
    let kept = cfg.n_iter - cfg.burn_in;
    let (n, p, r) = (data.n(), data.p(), data.n_areas());
    let mut beta = DMatrix::zeros(kept, p);
    let mut eta = DMatrix::zeros(kept, r);
    let mut xi = DMatrix::zeros(kept, n);
    let mut sigma_k = Vec::with_capacity(kept);
    let mut sigma_xi = Vec::with_capacity(kept);
    let mut imp_log_w = Vec::with_capacity(kept);
    for it in 0..cfg.n_iter {
        sampler.sweep(&mut state, it, rng)?;
        if it < cfg.burn_in {
            continue;
        }
        let t = it - cfg.burn_in;
        beta.row_mut(t).copy_from(&state.beta.transpose());
        eta.row_mut(t).copy_from(&state.eta.transpose());
        xi.row_mut(t).copy_from(&state.xi.transpose());
        sigma_k.push(state.sigma_k);
        sigma_xi.push(state.sigma_xi);
        let lw = match correction {
            Some(_) => {
                let ll = state.log_lambda(data);
                let lw = importance_log_weight(&data.z, &ll, &data.w_tilde, &work.w_tilde, cfg.boundary_c)?;
                if !lw.is_finite() {
                    return Err(Error::NonFiniteState {
                        block: "importance weight",
                        iteration: it,
                    });
                }
                lw
            }
            None => 0.0,
        };
        imp_log_w.push(lw);
    }
    for j in 0..p {
        let col: Vec<f64> = beta.column(j).iter().copied().collect();
        let rhat = split_rhat(&col);
        if rhat > 1.1 {
            warn!("split R-hat {rhat:.3} for beta_{j} exceeds 1.1");
        }
    }
    Ok(PosteriorDraws {
        beta,
        eta,
        xi,
        sigma_k,
        sigma_xi,
        imp_log_w,
        rng_seed: None,
        pilot_ratio: correction,
    })
}

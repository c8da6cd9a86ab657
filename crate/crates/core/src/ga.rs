//! Gaussian-approximation (GA) comparison model.
//!
//! ```text
//! log(Z_i + delta) ~ N(x_i' beta + eta_{a(i)}, sigma2_xi)^{w~_i}
//! beta ~ N(0, sigma2_beta I),  eta ~ N(0, sigma2_eta I)
//! sigma2_xi, sigma2_eta ~ InvGamma(ig_shape, ig_rate)
//! ```
//!
//! A weight `w~_i` turns unit `i`'s Normal term into a Normal with variance
//! `sigma2_xi / w~_i`, so every update is conjugate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pmlg::ModelData;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub delta: f64,
    pub sigma2_beta: f64,
    pub ig_shape: f64,
    pub ig_rate: f64,
    pub n_iter: usize,
    pub burn_in: usize,
    /// Include the unit-level `N(0, sigma2_xi)` term in predictions.
    pub predictive_noise: bool,
    pub area_effects: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            delta: 5.0,
            sigma2_beta: 1000.0,
            ig_shape: 0.1,
            ig_rate: 0.1,
            n_iter: 2000,
            burn_in: 1000,
            predictive_noise: true,
            area_effects: true,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("sigma2_beta", self.sigma2_beta),
            ("ig_shape", self.ig_shape),
            ("ig_rate", self.ig_rate),
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
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaState {
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
    pub sigma2_xi: f64,
    pub sigma2_eta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaDraws {
    pub beta: DMatrix<f64>,
    pub eta: DMatrix<f64>,
    pub sigma2_xi: Vec<f64>,
    pub sigma2_eta: Vec<f64>,
}

impl GaDraws {
    pub fn kept(&self) -> usize {
        self.sigma2_xi.len()
    }
}

/// Transformed responses `log(Z + delta)`.
pub fn transformed_response(data: &ModelData, delta: f64) -> DVector<f64> {
    DVector::from_iterator(data.n(), data.z().iter().map(|&z| (z as f64 + delta).ln()))
}

/// Gaussian full conditional given by its mean and precision matrix.
#[derive(Clone, Debug)]
pub struct NormalConditional {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl NormalConditional {
    /// Log density up to a constant.
    pub fn log_kernel(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        -0.5 * (d.transpose() * &self.precision * &d)[(0, 0)]
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let chol = self
            .precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateDesign("conditional precision is not positive definite".into()))?;
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::DegenerateDesign("triangular solve failed".into()))?;
        Ok(&self.mean + dev)
    }
}

/// Inverse-Gamma full conditional (shape, rate).
#[derive(Clone, Copy, Debug)]
pub struct InvGammaConditional {
    pub shape: f64,
    pub rate: f64,
}

impl InvGammaConditional {
    pub fn log_kernel(&self, v: f64) -> f64 {
        -(self.shape + 1.0) * v.ln() - self.rate / v
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let g = Gamma::new(self.shape, 1.0 / self.rate)
            .map_err(|e| Error::InvalidParameter(format!("inverse-gamma parameters: {e}")))?;
        Ok(1.0 / g.sample(rng))
    }
}

fn residual_offset(state: &GaState, data: &ModelData, y: &DVector<f64>, with_beta: bool, with_eta: bool) -> DVector<f64> {
    let xb = data.x() * &state.beta;
    DVector::from_fn(data.n(), |i, _| {
        let mut v = y[i];
        if with_beta {
            v -= xb[i];
        }
        if with_eta {
            v -= state.eta[data.area()[i]];
        }
        v
    })
}

/// `beta | .`: precision `X'W~X / sigma2_xi + I / sigma2_beta`.
pub fn beta_conditional(state: &GaState, data: &ModelData, cfg: &GaConfig) -> Result<NormalConditional> {
    let y = transformed_response(data, cfg.delta);
    let target = residual_offset(state, data, &y, false, cfg.area_effects);
    let x = data.x();
    let w = data.w_tilde();
    let xw = DMatrix::from_fn(data.n(), data.p(), |i, j| x[(i, j)] * w[i]);
    let precision = xw.transpose() * x / state.sigma2_xi
        + DMatrix::identity(data.p(), data.p()) / cfg.sigma2_beta;
    let rhs = xw.transpose() * target / state.sigma2_xi;
    let mean = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateDesign("beta precision is not positive definite".into()))?
        .solve(&rhs);
    Ok(NormalConditional { mean, precision })
}

/// `eta | .`: diagonal precision `sum_{i in a} w~_i / sigma2_xi + 1 / sigma2_eta`.
pub fn eta_conditional(state: &GaState, data: &ModelData, cfg: &GaConfig) -> NormalConditional {
    let y = transformed_response(data, cfg.delta);
    let target = residual_offset(state, data, &y, true, false);
    let r = data.n_areas();
    let mut prec = vec![1.0 / state.sigma2_eta; r];
    let mut rhs = vec![0.0; r];
    for i in 0..data.n() {
        let a = data.area()[i];
        let w = data.w_tilde()[i];
        prec[a] += w / state.sigma2_xi;
        rhs[a] += w * target[i] / state.sigma2_xi;
    }
    NormalConditional {
        mean: DVector::from_fn(r, |a, _| rhs[a] / prec[a]),
        precision: DMatrix::from_diagonal(&DVector::from_vec(prec)),
    }
}

/// `sigma2_xi | .`: shape `a + sum w~ / 2`, rate `b + sum w~ e^2 / 2`.
pub fn sigma2_xi_conditional(state: &GaState, data: &ModelData, cfg: &GaConfig) -> InvGammaConditional {
    let y = transformed_response(data, cfg.delta);
    let e = residual_offset(state, data, &y, true, cfg.area_effects);
    let w = data.w_tilde();
    InvGammaConditional {
        shape: cfg.ig_shape + 0.5 * w.iter().sum::<f64>(),
        rate: cfg.ig_rate + 0.5 * (0..data.n()).map(|i| w[i] * e[i] * e[i]).sum::<f64>(),
    }
}

/// `sigma2_eta | .`: shape `a + r / 2`, rate `b + eta'eta / 2`.
pub fn sigma2_eta_conditional(state: &GaState, cfg: &GaConfig) -> InvGammaConditional {
    InvGammaConditional {
        shape: cfg.ig_shape + 0.5 * state.eta.len() as f64,
        rate: cfg.ig_rate + 0.5 * state.eta.norm_squared(),
    }
}

/// Log pseudo-posterior over `(beta, eta, sigma2_xi, sigma2_eta)` up to a
/// constant.
pub fn log_joint(state: &GaState, data: &ModelData, cfg: &GaConfig) -> f64 {
    let y = transformed_response(data, cfg.delta);
    let e = residual_offset(state, data, &y, true, cfg.area_effects);
    let w = data.w_tilde();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let normal = |v: f64, var: f64| -0.5 * (ln2pi + var.ln() + v * v / var);
    let ig = |v: f64| -(cfg.ig_shape + 1.0) * v.ln() - cfg.ig_rate / v;
    let mut total: f64 = (0..data.n()).map(|i| w[i] * normal(e[i], state.sigma2_xi)).sum();
    total += state.beta.iter().map(|b| normal(*b, cfg.sigma2_beta)).sum::<f64>();
    total += ig(state.sigma2_xi);
    if cfg.area_effects {
        total += state.eta.iter().map(|v| normal(*v, state.sigma2_eta)).sum::<f64>();
        total += ig(state.sigma2_eta);
    }
    total
}

/// Conjugate Gibbs sampler; sweep order beta, eta, sigma2_xi, sigma2_eta.
/// Starts from least squares for `beta`, `eta = 0`, the weighted residual
/// variance for `sigma2_xi` and `sigma2_eta = 1`.
pub fn run_ga_gibbs<R: Rng + ?Sized>(data: &ModelData, cfg: &GaConfig, rng: &mut R) -> Result<GaDraws> {
    cfg.validate()?;
    let (p, r) = (data.p(), data.n_areas());
    let mut state = GaState {
        beta: DVector::zeros(p),
        eta: DVector::zeros(r),
        sigma2_xi: 1.0,
        sigma2_eta: 1.0,
    };
    // A flat-ish prior pass gives the least-squares start.
    state.beta = beta_conditional(&state, data, cfg)?.mean;
    state.sigma2_xi = {
        let c = sigma2_xi_conditional(&state, data, cfg);
        ((c.rate - cfg.ig_rate) / (c.shape - cfg.ig_shape)).max(1e-6)
    };

    let kept = cfg.n_iter - cfg.burn_in;
    let mut out = GaDraws {
        beta: DMatrix::zeros(kept, p),
        eta: DMatrix::zeros(kept, r),
        sigma2_xi: Vec::with_capacity(kept),
        sigma2_eta: Vec::with_capacity(kept),
    };
    for it in 0..cfg.n_iter {
        state.beta = beta_conditional(&state, data, cfg)?.sample(rng)?;
        if cfg.area_effects {
            state.eta = eta_conditional(&state, data, cfg).sample(rng)?;
        }
        state.sigma2_xi = sigma2_xi_conditional(&state, data, cfg).sample(rng)?;
        if cfg.area_effects {
            state.sigma2_eta = sigma2_eta_conditional(&state, cfg).sample(rng)?;
        }
        let finite = state.beta.iter().chain(state.eta.iter()).all(|v| v.is_finite())
            && state.sigma2_xi.is_finite()
            && state.sigma2_eta.is_finite();
        if !finite {
            return Err(Error::NonFiniteState { block: "ga", iteration: it });
        }
        if it >= cfg.burn_in {
            let t = it - cfg.burn_in;
            out.beta.row_mut(t).copy_from(&state.beta.transpose());
            out.eta.row_mut(t).copy_from(&state.eta.transpose());
            out.sigma2_xi.push(state.sigma2_xi);
            out.sigma2_eta.push(state.sigma2_eta);
        }
    }
    Ok(out)
}

/// `max(0, exp(v) - delta)`.
pub fn back_transform(v: f64, delta: f64) -> f64 {
    (v.exp() - delta).max(0.0)
}

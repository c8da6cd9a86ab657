//! Multivariate log-Gamma (MLG) laws and their conditional (cMLG) form.
//!
//! `Y ~ MLG(mu, V, alpha, kappa)` is generated as `Y = V log(g) + mu` with
//! `g_i ~ Gamma(alpha_i, kappa_i)` independent (shape/rate). Its density is
//!
//! ```text
//! |det V^-1| prod_i kappa_i^alpha_i / Gamma(alpha_i)
//!     * exp[ alpha' V^-1 (y - mu) - kappa' exp{V^-1 (y - mu)} ]
//! ```
//!
//! A cMLG law `cMLG(H, alpha, kappa)` has unnormalized density
//! `exp{alpha' H t - kappa' exp(H t)}` and is drawn by projecting a
//! `MLG(0, I, alpha, kappa)` vector onto the column space of `H`:
//! `t = (H'H)^-1 H' w`. Any location offset is folded into `kappa` by the
//! caller (`kappa <- kappa * exp(-offset)`); the normalizing constant is never
//! needed.

use nalgebra::{DMatrix, DVector, Dyn, LU, QR};
use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Draws `log g` for `g ~ Gamma(shape, rate)` without ever forming `g`.
///
/// Shapes `>= 1` use the Marsaglia-Tsang squeeze; smaller shapes are boosted
/// with `log G(a) = log G(a + 1) + log(U) / a`, which stays finite where `g`
/// itself would underflow.
pub fn log_gamma_variate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && rate > 0.0);
    let log_std = if shape >= 1.0 {
        log_std_gamma_ge1(shape, rng)
    } else {
        let u: f64 = rng.sample(Open01);
        log_std_gamma_ge1(shape + 1.0, rng) + u.ln() / shape
    };
    log_std - rate.ln()
}

fn log_std_gamma_ge1<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v3 = v * v * v;
        let u: f64 = rng.sample(Open01);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d.ln() + v3.ln();
        }
        let log_v3 = v3.ln();
        if u.ln() < 0.5 * x2 + d * (1.0 - v3 + log_v3) {
            return d.ln() + log_v3;
        }
    }
}

/// Independent `log Gamma(alpha_i, kappa_i)` components, i.e. one
/// `MLG(0, I, alpha, kappa)` draw.
pub fn sample_standard_mlg<R: Rng + ?Sized>(
    alpha: &DVector<f64>,
    kappa: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if alpha.len() != kappa.len() {
        return Err(Error::Dimension(format!(
            "shape has length {} but rate has length {}",
            alpha.len(),
            kappa.len()
        )));
    }
    let mut out = DVector::zeros(alpha.len());
    for i in 0..alpha.len() {
        let w = log_gamma_variate(alpha[i], kappa[i], rng);
        if !w.is_finite() {
            return Err(Error::SamplingFailure { index: i });
        }
        out[i] = w;
    }
    Ok(out)
}

fn check_shape_rate(alpha: &DVector<f64>, kappa: &DVector<f64>) -> Result<()> {
    if let Some(i) = alpha.iter().position(|a| !(*a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "shape[{i}] = {} must be positive and finite",
            alpha[i]
        )));
    }
    if let Some(i) = kappa.iter().position(|k| !(*k > 0.0 && k.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "rate[{i}] = {} must be positive and finite",
            kappa[i]
        )));
    }
    Ok(())
}

/// Parameters of `MLG(mu, V, alpha, kappa)`.
#[derive(Clone, Debug)]
pub struct MlgParams {
    mu: DVector<f64>,
    scale: DMatrix<f64>,
    alpha: DVector<f64>,
    kappa: DVector<f64>,
    scale_lu: LU<f64, Dyn, Dyn>,
    log_abs_det_inv: f64,
    log_norm: f64,
}

impl MlgParams {
    pub fn new(
        mu: DVector<f64>,
        scale: DMatrix<f64>,
        alpha: DVector<f64>,
        kappa: DVector<f64>,
    ) -> Result<Self> {
        let n = mu.len();
        if scale.nrows() != n || scale.ncols() != n || alpha.len() != n || kappa.len() != n {
            return Err(Error::Dimension(format!(
                "location {n}, scale {}x{}, shape {}, rate {}",
                scale.nrows(),
                scale.ncols(),
                alpha.len(),
                kappa.len()
            )));
        }
        check_shape_rate(&alpha, &kappa)?;

        let scale_lu = scale.clone().lu();
        let u = scale_lu.u();
        let max_diag = u.diagonal().amax();
        let mut log_abs_det = 0.0;
        for d in u.diagonal().iter() {
            if !(d.abs() > max_diag * 1e-13 * n as f64) || !d.is_finite() {
                return Err(Error::SingularScale);
            }
            log_abs_det += d.abs().ln();
        }
        if !log_abs_det.is_finite() {
            return Err(Error::SingularScale);
        }

        let log_norm = alpha
            .iter()
            .zip(kappa.iter())
            .map(|(&a, &k)| a * k.ln() - ln_gamma(a))
            .sum();

        Ok(Self {
            mu,
            scale,
            alpha,
            kappa,
            scale_lu,
            log_abs_det_inv: -log_abs_det,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn kappa(&self) -> &DVector<f64> {
        &self.kappa
    }

    /// `log |det V^-1|`.
    pub fn log_abs_det_inv(&self) -> f64 {
        self.log_abs_det_inv
    }

    /// Returns the same law with a different location.
    pub fn with_location(&self, mu: DVector<f64>) -> Result<Self> {
        if mu.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "location has length {}, expected {}",
                mu.len(),
                self.dim()
            )));
        }
        Ok(Self { mu, ..self.clone() })
    }

    /// `Y = V log(g) + mu`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let g_log = sample_standard_mlg(&self.alpha, &self.kappa, rng)?;
        let y = &self.scale * g_log + &self.mu;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::SamplingFailure { index: i });
        }
        Ok(y)
    }

    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has length {}, expected {}",
                y.len(),
                self.dim()
            )));
        }
        let centered = y - &self.mu;
        let z = self.scale_lu.solve(&centered).ok_or(Error::SingularScale)?;
        let kernel: f64 = z
            .iter()
            .zip(self.alpha.iter().zip(self.kappa.iter()))
            .map(|(&zi, (&a, &k))| a * zi - k * zi.exp())
            .sum();
        Ok(self.log_abs_det_inv + self.log_norm + kernel)
    }
}

/// `MLG(c, alpha^{1/2} V, alpha 1, alpha 1)`, which tends to `N(c, V)` as
/// `alpha` grows.
pub fn gaussian_limit_params(
    center: DVector<f64>,
    scale: &DMatrix<f64>,
    alpha: f64,
) -> Result<MlgParams> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "shape {alpha} must be positive"
        )));
    }
    let n = center.len();
    MlgParams::new(
        center,
        scale * alpha.sqrt(),
        DVector::from_element(n, alpha),
        DVector::from_element(n, alpha),
    )
}

/// Parameters of `cMLG(H, alpha, kappa)`.
#[derive(Clone, Debug)]
pub struct CmlgParams {
    h: DMatrix<f64>,
    alpha: DVector<f64>,
    kappa: DVector<f64>,
    qr: QR<f64, Dyn, Dyn>,
}

impl CmlgParams {
    pub fn new(h: DMatrix<f64>, alpha: DVector<f64>, kappa: DVector<f64>) -> Result<Self> {
        let (m, r) = h.shape();
        if alpha.len() != m || kappa.len() != m {
            return Err(Error::Dimension(format!(
                "H is {m}x{r} but shape has length {} and rate {}",
                alpha.len(),
                kappa.len()
            )));
        }
        if r == 0 || r > m {
            return Err(Error::DegenerateDesign(format!(
                "H is {m}x{r}; need 1 <= columns <= rows"
            )));
        }
        check_shape_rate(&alpha, &kappa)?;
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("H has non-finite entries".into()));
        }
        let qr = h.clone().qr();
        let diag = qr.r().diagonal();
        let scale = h.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        let tol = scale * (m as f64) * 1e-12;
        if let Some(j) = diag.iter().position(|d| !(d.abs() > tol)) {
            return Err(Error::DegenerateDesign(format!(
                "column {j} of H is (numerically) dependent on earlier columns"
            )));
        }
        Ok(Self { h, alpha, kappa, qr })
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    pub fn cols(&self) -> usize {
        self.h.ncols()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn kappa(&self) -> &DVector<f64> {
        &self.kappa
    }

    /// Least-squares coefficients `(H'H)^-1 H' w` via the stored QR factors.
    pub fn project(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != self.rows() {
            return Err(Error::Dimension(format!(
                "vector has length {}, expected {}",
                w.len(),
                self.rows()
            )));
        }
        let r = self.cols();
        let mut qtw = w.clone();
        self.qr.q_tr_mul(&mut qtw);
        let rhs = qtw.rows(0, r).into_owned();
        let rmat = self.qr.r();
        rmat.solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::DegenerateDesign("triangular solve failed".into()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let w = sample_standard_mlg(&self.alpha, &self.kappa, rng)?;
        let t = self.project(&w)?;
        if let Some(i) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::SamplingFailure { index: i });
        }
        Ok(t)
    }

    /// Rejection draw of a scalar cMLG restricted to positive values.
    pub fn sample_truncated_positive<R: Rng + ?Sized>(
        &self,
        max_attempts: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if self.cols() != 1 {
            return Err(Error::Dimension(format!(
                "truncated draw needs a single column, H has {}",
                self.cols()
            )));
        }
        for _ in 0..max_attempts {
            let t = self.sample(rng)?[0];
            if t > 0.0 {
                return Ok(t);
            }
        }
        Err(Error::TruncationFailure {
            attempts: max_attempts,
            acceptance_rate: if max_attempts == 0 {
                f64::NAN
            } else {
                // No acceptances: report the rule-of-three upper bound.
                3.0 / max_attempts as f64
            },
        })
    }

    /// Same `H` (and factorization) with new shapes and rates.
    pub fn with_shape_rate(&self, alpha: DVector<f64>, kappa: DVector<f64>) -> Result<Self> {
        if alpha.len() != self.rows() || kappa.len() != self.rows() {
            return Err(Error::Dimension(format!(
                "H has {} rows but shape has length {} and rate {}",
                self.rows(),
                alpha.len(),
                kappa.len()
            )));
        }
        check_shape_rate(&alpha, &kappa)?;
        Ok(Self {
            h: self.h.clone(),
            alpha,
            kappa,
            qr: self.qr.clone(),
        })
    }

    /// Unnormalized log density `alpha' H t - kappa' exp(H t)`.
    pub fn log_kernel(&self, t: &DVector<f64>) -> Result<f64> {
        cmlg_log_kernel(&self.h, &self.alpha, &self.kappa, t)
    }
}

/// `alpha' H t - kappa' exp(H t)` without validating the parameters, so
/// zero shapes (boundary data) are allowed.
pub fn cmlg_log_kernel(
    h: &DMatrix<f64>,
    alpha: &DVector<f64>,
    kappa: &DVector<f64>,
    t: &DVector<f64>,
) -> Result<f64> {
    if t.len() != h.ncols() || alpha.len() != h.nrows() || kappa.len() != h.nrows() {
        return Err(Error::Dimension(format!(
            "H is {}x{}, shape {}, rate {}, point {}",
            h.nrows(),
            h.ncols(),
            alpha.len(),
            kappa.len(),
            t.len()
        )));
    }
    let ht = h * t;
    Ok(ht
        .iter()
        .zip(alpha.iter().zip(kappa.iter()))
        .map(|(&x, (&a, &k))| a * x - k * x.exp())
        .sum())
}

//! Adaptive rejection sampling for univariate log-concave densities.
//!
//! Targets live either on the whole real line or on `(0, inf)`. The scale
//! updates use the positive form, whose exact conditional
//! `t^d exp{a' h t - k' exp(h t)}` is log-concave but not of cMLG form once
//! the `t^d` Jacobian of the MLG prior is kept.

use rand::Rng;
use rand_distr::Open01;

use crate::error::{Error, Result};

/// A log-concave target.
pub trait LogConcave {
    /// Log density (up to a constant) and its first two derivatives at `t`.
    fn eval(&self, t: f64) -> (f64, f64, f64);

    /// Lower end of the support: `0.0` for `(0, inf)`, `-inf` for the real line.
    fn lower(&self) -> f64 {
        0.0
    }
}

/// `sum_j (a_j h_j t - k_j exp(h_j t)) + d log t`, the shape of every scalar
/// full conditional in the PMLG hierarchy. With `d > 0` the support is
/// `(0, inf)`; otherwise the caller chooses.
#[derive(Clone, Debug, Default)]
pub struct ExpFamilyKernel {
    /// `(a_j, h_j, k_j)` triples.
    pub terms: Vec<(f64, f64, f64)>,
    pub log_t_coef: f64,
    pub positive: bool,
}

impl ExpFamilyKernel {
    pub fn real() -> Self {
        Self::default()
    }

    pub fn positive(log_t_coef: f64) -> Self {
        Self {
            terms: Vec::new(),
            log_t_coef,
            positive: true,
        }
    }

    pub fn push(&mut self, a: f64, h: f64, k: f64) {
        if h != 0.0 {
            self.terms.push((a, h, k));
        }
    }
}

impl LogConcave for ExpFamilyKernel {
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for &(a, h, k) in &self.terms {
            let e = k * (h * t).exp();
            v += a * h * t - e;
            d1 += h * (a - e);
            d2 -= h * h * e;
        }
        if self.log_t_coef != 0.0 {
            v += self.log_t_coef * t.ln();
            d1 += self.log_t_coef / t;
            d2 -= self.log_t_coef / (t * t);
        }
        (v, d1, d2)
    }

    fn lower(&self) -> f64 {
        if self.positive {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

const MAX_POINTS: usize = 64;

struct Hull {
    lower: f64,
    xs: Vec<f64>,
    hs: Vec<f64>,
    gs: Vec<f64>,
}

impl Hull {
    fn insert<F: LogConcave>(&mut self, f: &F, x: f64) {
        let pos = self.xs.partition_point(|&v| v < x);
        if pos < self.xs.len() && self.xs[pos] == x {
            return;
        }
        let (h, g, _) = f.eval(x);
        self.xs.insert(pos, x);
        self.hs.insert(pos, h);
        self.gs.insert(pos, g);
    }

    /// Breakpoints `z_0 = lower < z_1 < ... < z_k = inf` of the tangent envelope.
    fn breakpoints(&self) -> Vec<f64> {
        let k = self.xs.len();
        let mut z = Vec::with_capacity(k + 1);
        z.push(self.lower);
        for j in 0..k - 1 {
            let (x0, x1) = (self.xs[j], self.xs[j + 1]);
            let (h0, h1) = (self.hs[j], self.hs[j + 1]);
            let (g0, g1) = (self.gs[j], self.gs[j + 1]);
            let zj = if (g0 - g1).abs() > 1e-12 * (g0.abs() + g1.abs()).max(1e-300) {
                (h1 - h0 - x1 * g1 + x0 * g0) / (g0 - g1)
            } else {
                0.5 * (x0 + x1)
            };
            z.push(zj.clamp(x0, x1));
        }
        z.push(f64::INFINITY);
        z
    }

    fn upper(&self, j: usize, x: f64) -> f64 {
        self.hs[j] + self.gs[j] * (x - self.xs[j])
    }
}

/// Log of the mass of `exp(g (x - x0))` over `[a, b]`.
fn log_piece_mass(g: f64, x0: f64, a: f64, b: f64) -> f64 {
    if g.abs() < 1e-12 && a.is_finite() && b.is_finite() {
        return (b - a).ln();
    }
    let ea = g * (a - x0);
    let eb = g * (b - x0);
    if g > 0.0 {
        if a.is_infinite() {
            eb - g.ln()
        } else {
            eb + (-(-(eb - ea)).exp_m1()).ln() - g.ln()
        }
    } else if b.is_infinite() {
        ea - (-g).ln()
    } else {
        ea + (-(eb - ea).exp_m1()).ln() - (-g).ln()
    }
}

/// Inverse-CDF draw from `exp(g x)` restricted to `[a, b]`.
fn sample_piece(g: f64, a: f64, b: f64, u: f64) -> f64 {
    if b.is_infinite() {
        // g < 0 here.
        return a + (1.0 - u).ln() / g;
    }
    if a.is_infinite() {
        // g > 0 here.
        return b + u.ln() / g;
    }
    if g.abs() < 1e-12 {
        return a + u * (b - a);
    }
    let span = g * (b - a);
    let x = if g > 0.0 {
        b + (u + (1.0 - u) * (-span).exp()).ln() / g
    } else {
        a + (u * span.exp_m1()).ln_1p() / g
    };
    x.clamp(a, b)
}

fn converged(g: f64, c: f64) -> bool {
    c < 0.0 && g.abs() <= 1e-9 * (-c).sqrt()
}

/// Locates the mode of a strictly log-concave density by safeguarded Newton
/// iteration (in `log t` on the positive half-line).
pub fn find_mode<F: LogConcave>(f: &F, start: f64) -> Result<f64> {
    if f.lower() == 0.0 {
        find_mode_positive(f, start)
    } else {
        find_mode_real(f, start)
    }
}

fn find_mode_positive<F: LogConcave>(f: &F, start: f64) -> Result<f64> {
    let mut lo = 0.0_f64;
    let mut hi = f64::INFINITY;
    let mut t = if start > 0.0 && start.is_finite() { start } else { 1.0 };
    for _ in 0..200 {
        let (_, g, c) = f.eval(t);
        if !g.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "log-density derivative not finite at {t}"
            )));
        }
        if g > 0.0 {
            lo = lo.max(t);
        } else {
            hi = hi.min(t);
        }
        if converged(g, c) {
            return Ok(t);
        }
        // Newton in u = log t: d/du = t g, d2/du2 = t g + t^2 c.
        let du_num = t * g;
        let du_den = t * g + t * t * c;
        let mut next = if du_den < 0.0 {
            t * (-du_num / du_den).clamp(-3.0, 3.0).exp()
        } else if g > 0.0 {
            t * 4.0
        } else {
            t / 4.0
        };
        if !(next > lo && next < hi) {
            next = if hi.is_finite() {
                if lo > 0.0 {
                    0.5 * (lo + hi)
                } else {
                    hi / 4.0
                }
            } else {
                lo * 4.0
            };
        }
        if (next - t).abs() <= 1e-14 * t {
            return Ok(next);
        }
        t = next;
    }
    Ok(t)
}

fn find_mode_real<F: LogConcave>(f: &F, start: f64) -> Result<f64> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut t = if start.is_finite() { start } else { 0.0 };
    let mut width = 1.0_f64;
    for _ in 0..400 {
        let (_, g, c) = f.eval(t);
        if !g.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "log-density derivative not finite at {t}"
            )));
        }
        if g > 0.0 {
            lo = lo.max(t);
        } else {
            hi = hi.min(t);
        }
        if converged(g, c) {
            return Ok(t);
        }
        let newton = if c < 0.0 { -g / c } else { f64::INFINITY };
        let mut next = if newton.abs() <= width {
            t + newton
        } else {
            width *= 2.0;
            if g > 0.0 {
                t + 0.5 * width
            } else {
                t - 0.5 * width
            }
        };
        if !(next > lo && next < hi) {
            next = if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if hi.is_infinite() {
                t + width
            } else {
                t - width
            };
            width *= 2.0;
        }
        if (next - t).abs() <= 1e-14 * (1.0 + t.abs()) {
            return Ok(next);
        }
        t = next;
    }
    Ok(t)
}

/// One exact draw from the log-concave density `f`.
pub fn sample_log_concave<F: LogConcave, R: Rng + ?Sized>(
    f: &F,
    start: f64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<f64> {
    let lower = f.lower();
    let mode = find_mode(f, start)?;
    let (_, _, curv) = f.eval(mode);
    let sd = if curv < 0.0 {
        (-curv).sqrt().recip()
    } else {
        mode.abs().max(1.0)
    };
    let mut hull = Hull {
        lower,
        xs: Vec::with_capacity(8),
        hs: Vec::with_capacity(8),
        gs: Vec::with_capacity(8),
    };
    let left = if mode - sd > lower { mode - sd } else { 0.5 * mode };
    hull.insert(f, left);
    hull.insert(f, mode);
    hull.insert(f, mode + sd);
    // Unbounded end pieces must decay.
    let mut step = sd;
    while *hull.gs.last().unwrap() >= 0.0 {
        step *= 2.0;
        let right = hull.xs.last().unwrap() + step;
        hull.insert(f, right);
        if hull.xs.len() > MAX_POINTS {
            return Err(Error::InvalidParameter(
                "density does not decay to the right".into(),
            ));
        }
    }
    if lower.is_infinite() {
        let mut step = sd;
        while hull.gs[0] <= 0.0 {
            step *= 2.0;
            let left = hull.xs[0] - step;
            hull.insert(f, left);
            if hull.xs.len() > MAX_POINTS {
                return Err(Error::InvalidParameter(
                    "density does not decay to the left".into(),
                ));
            }
        }
    }

    for _ in 0..max_attempts {
        let z = hull.breakpoints();
        let k = hull.xs.len();
        let log_masses: Vec<f64> = (0..k)
            .map(|j| hull.hs[j] + log_piece_mass(hull.gs[j], hull.xs[j], z[j], z[j + 1]))
            .collect();
        let top = log_masses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_masses.iter().map(|m| (m - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut pick: f64 = rng.random::<f64>() * total;
        let mut j = 0;
        while j + 1 < k && pick >= weights[j] {
            pick -= weights[j];
            j += 1;
        }
        let u: f64 = rng.sample(Open01);
        let x = sample_piece(hull.gs[j], z[j], z[j + 1], u);
        if !(x > lower && x.is_finite()) {
            continue;
        }
        let (hx, _, _) = f.eval(x);
        let accept_log: f64 = rng.sample::<f64, _>(Open01).ln();
        if accept_log <= hx - hull.upper(j, x) {
            return Ok(x);
        }
        if hull.xs.len() < MAX_POINTS {
            hull.insert(f, x);
        }
    }
    Err(Error::TruncationFailure {
        attempts: max_attempts,
        acceptance_rate: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// Gamma(shape, rate) density on t > 0.
    struct GammaTarget(f64, f64);

    impl LogConcave for GammaTarget {
        fn eval(&self, t: f64) -> (f64, f64, f64) {
            let (a, b) = (self.0, self.1);
            (
                (a - 1.0) * t.ln() - b * t,
                (a - 1.0) / t - b,
                -(a - 1.0) / (t * t),
            )
        }
    }

    fn moments(draws: &[f64]) -> (f64, f64) {
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn finds_gamma_mode() {
        let m = find_mode(&GammaTarget(5.0, 2.0), 100.0).unwrap();
        assert!((m - 2.0).abs() < 1e-9);
    }

    #[test]
    fn matches_gamma_moments() {
        let target = GammaTarget(4.0, 3.0);
        let mut rng = stream(17, &[]);
        let n = 40_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_log_concave(&target, 1.0, 100, &mut rng).unwrap())
            .collect();
        let (mean, var) = moments(&draws);
        let true_var = 4.0 / 9.0;
        assert!((mean - 4.0 / 3.0).abs() < 4.0 * (true_var / n as f64).sqrt());
        assert!((var / true_var - 1.0).abs() < 0.04);
    }

    #[test]
    fn real_line_log_gamma_kernel() {
        // a t - k e^t is the log-density of log G, G ~ Gamma(a, k).
        let mut f = ExpFamilyKernel::real();
        f.push(3.0, 1.0, 2.0);
        let mode = find_mode(&f, 40.0).unwrap();
        assert!((mode - (1.5f64).ln()).abs() < 1e-8);
        let mut rng = stream(5, &[]);
        let n = 40_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_log_concave(&f, -30.0, 100, &mut rng).unwrap())
            .collect();
        let (mean, var) = moments(&draws);
        // psi(3) - ln 2 and psi'(3).
        let true_mean = 1.5 - 0.577_215_664_901_532_9 - 2f64.ln();
        let true_var = std::f64::consts::PI.powi(2) / 6.0 - 1.25;
        assert!((mean - true_mean).abs() < 4.0 * (true_var / n as f64).sqrt());
        assert!((var / true_var - 1.0).abs() < 0.04);
    }

    #[test]
    fn kernel_derivatives_match_finite_differences() {
        let mut f = ExpFamilyKernel::positive(3.0);
        f.push(10.0, 0.3, 10.0);
        f.push(2.0, -1.1, 0.5);
        let t = 0.8;
        let h = 1e-5;
        let (_, d1, d2) = f.eval(t);
        let fd1 = (f.eval(t + h).0 - f.eval(t - h).0) / (2.0 * h);
        let fd2 = (f.eval(t + h).1 - f.eval(t - h).1) / (2.0 * h);
        assert!((d1 - fd1).abs() < 1e-6);
        assert!((d2 - fd2).abs() < 1e-6);
    }
}

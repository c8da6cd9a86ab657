//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    // Split into panels so narrow peaks are not missed by the first estimate.
    let panels = 64;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (fa, fb, fm) = (f(lo), f(hi), f(0.5 * (lo + hi)));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            step(f, lo, hi, fa, fm, fb, whole, tol / panels as f64, 40)
        })
        .sum()
}

pub fn digamma(x: f64) -> f64 {
    statrs::function::gamma::digamma(x)
}

/// Trigamma by upward recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0 + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// One-sample Kolmogorov-Smirnov statistic against `cdf`.
pub fn ks_statistic(sample: &mut [f64], cdf: &dyn Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS critical value at level `alpha`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Two-sample KS statistic.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

pub fn ks_two_sample_critical(na: usize, nb: usize, alpha: f64) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    (-(alpha / 2.0).ln() / 2.0).sqrt() * ((na + nb) / (na * nb)).sqrt()
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Exact design of the two-stage scheme: first unit with probability
/// proportional to size, then `n - 1` of the other `N - 1` uniformly.
pub fn two_stage_design(sizes: &[f64], n: usize) -> BTreeMap<Vec<usize>, f64> {
    let big_n = sizes.len();
    let total: f64 = sizes.iter().sum();
    let mut design = BTreeMap::new();
    for first in 0..big_n {
        let rest: Vec<usize> = (0..big_n).filter(|&i| i != first).collect();
        let completions = subsets(rest.len(), n - 1);
        let each = sizes[first] / total / completions.len() as f64;
        for c in completions {
            let mut s: Vec<usize> = c.iter().map(|&j| rest[j]).chain(std::iter::once(first)).collect();
            s.sort_unstable();
            *design.entry(s).or_insert(0.0) += each;
        }
    }
    design
}

/// Size-`k` inclusion probabilities proportional to `x`, capped at one by
/// repeated rescaling.
fn capped(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut fixed = vec![false; x.len()];
    loop {
        let free: f64 = x.iter().zip(&fixed).filter(|(_, f)| !**f).map(|(v, _)| v).sum();
        let slots = k as f64 - fixed.iter().filter(|f| **f).count() as f64;
        let mut changed = false;
        for i in 0..x.len() {
            if fixed[i] {
                out[i] = 1.0;
            } else {
                out[i] = if free > 0.0 { slots * x[i] / free } else { 0.0 };
                if out[i] >= 1.0 {
                    fixed[i] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Exact design of the elimination procedure drawing a size-`n` sample
/// whose complement is eliminated with sizes `1 - pi`: the units eliminated
/// at levels `N-1, ..., N-n` form the sample.
pub fn elimination_design(pi: &[f64]) -> BTreeMap<Vec<usize>, f64> {
    let big_n = pi.len();
    let n = pi.iter().sum::<f64>().round() as usize;
    let mut design = BTreeMap::new();
    if n == big_n {
        design.insert((0..big_n).collect(), 1.0);
        return design;
    }
    let x: Vec<f64> = pi.iter().map(|p| 1.0 - p).collect();
    fn rec(
        x: &[f64],
        level: usize,
        stop: usize,
        prev: &[f64],
        alive: &mut Vec<bool>,
        chosen: &mut Vec<usize>,
        prob: f64,
        out: &mut BTreeMap<Vec<usize>, f64>,
    ) {
        if level == stop {
            let mut s = chosen.clone();
            s.sort_unstable();
            *out.entry(s).or_insert(0.0) += prob;
            return;
        }
        let k = level - 1;
        let cur = capped(x, k);
        for i in 0..x.len() {
            if !alive[i] || prev[i] <= 0.0 {
                continue;
            }
            let p = 1.0 - cur[i] / prev[i];
            if p <= 0.0 {
                continue;
            }
            alive[i] = false;
            chosen.push(i);
            rec(x, k, stop, &cur, alive, chosen, prob * p, out);
            chosen.pop();
            alive[i] = true;
        }
    }
    rec(
        &x,
        big_n,
        big_n - n,
        &vec![1.0; big_n],
        &mut vec![true; big_n],
        &mut Vec::new(),
        1.0,
        &mut design,
    );
    design
}

/// First-order inclusion probabilities of an enumerated design.
pub fn inclusion_from_design(design: &BTreeMap<Vec<usize>, f64>, big_n: usize) -> Vec<f64> {
    let mut pi = vec![0.0; big_n];
    for (s, p) in design {
        for &i in s {
            pi[i] += p;
        }
    }
    pi
}

/// Synthetic data with `n` units in `r` areas, an intercept plus two
/// covariates, about 30% zero counts and unequal weights.
pub fn mixed_data(n: usize, r: usize, seed: u64) -> plpmlg::pmlg::ModelData {
    mixed_data_with_intercept(n, r, seed, 0.3)
}

/// As [`mixed_data`] with intercept `b0` on the log-rate scale.
pub fn mixed_data_with_intercept(n: usize, r: usize, seed: u64, b0: f64) -> plpmlg::pmlg::ModelData {
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};
    let mut rng = plpmlg::rng::stream(seed, &[n as u64, r as u64]);
    let x = nalgebra::DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => (i % 2) as f64,
        _ => ((i * 7) % 11) as f64 / 10.0 - 0.5,
    });
    let area: Vec<usize> = (0..n).map(|i| i % r).collect();
    let z: Vec<u64> = (0..n)
        .map(|i| {
            let lambda = (b0 + 0.4 * x[(i, 1)] + 0.5 * x[(i, 2)] + 0.2 * (area[i] as f64 - 2.0) / 2.0).exp();
            Poisson::new(lambda).unwrap().sample(&mut rng) as u64
        })
        .collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..4.0)).collect();
    plpmlg::pmlg::ModelData::from_design_weights(z, x, area, r, &w).unwrap()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut m = k;
            while m + 1 < idx.len() && v[idx[m + 1]] == v[idx[k]] {
                m += 1;
            }
            let avg = (k + m) as f64 / 2.0;
            for &i in &idx[k..=m] {
                r[i] = avg;
            }
            k = m + 1;
        }
        r
    }
    pearson(&ranks(a), &ranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

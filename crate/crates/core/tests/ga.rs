mod common;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};

use plpmlg::design::{generate_synthetic_population, DesignEncoder, SampleDesign, SyntheticSpec};
use plpmlg::estimators::vacancy;
use plpmlg::ga::*;
use plpmlg::pmlg::ModelData;
use plpmlg::rng::stream;

fn fixed_only() -> GaConfig {
    GaConfig {
        area_effects: false,
        n_iter: 6000,
        burn_in: 1000,
        ..GaConfig::default()
    }
}

fn intercept_data(z: Vec<u64>) -> ModelData {
    let n = z.len();
    ModelData::new(z, DMatrix::from_element(n, 1, 1.0), vec![0; n], 1, vec![1.0; n]).unwrap()
}

#[test]
fn conditionals_match_hand_formulas() {
    let data = common::mixed_data(30, 3, 6);
    let cfg = GaConfig::default();
    let state = GaState {
        beta: DVector::from_vec(vec![1.2, 0.1, -0.3]),
        eta: DVector::from_vec(vec![0.2, -0.1, 0.05]),
        sigma2_xi: 0.4,
        sigma2_eta: 0.7,
    };
    let y: Vec<f64> = data.z().iter().map(|&z| (z as f64 + cfg.delta).ln()).collect();
    let w = data.w_tilde();
    let xb = data.x() * &state.beta;

    let eta = eta_conditional(&state, &data, &cfg);
    for a in 0..3 {
        let units: Vec<usize> = (0..data.n()).filter(|&i| data.area()[i] == a).collect();
        let prec = 1.0 / 0.7 + units.iter().map(|&i| w[i]).sum::<f64>() / 0.4;
        let rhs: f64 = units.iter().map(|&i| w[i] * (y[i] - xb[i])).sum::<f64>() / 0.4;
        assert_abs_diff_eq!(eta.precision[(a, a)], prec, epsilon = 1e-10);
        assert_abs_diff_eq!(eta.mean[a], rhs / prec, epsilon = 1e-10);
    }

    let s = sigma2_xi_conditional(&state, &data, &cfg);
    let rss: f64 = (0..data.n())
        .map(|i| w[i] * (y[i] - xb[i] - state.eta[data.area()[i]]).powi(2))
        .sum();
    assert_abs_diff_eq!(s.shape, cfg.ig_shape + 15.0, epsilon = 1e-10);
    assert_abs_diff_eq!(s.rate, cfg.ig_rate + rss / 2.0, epsilon = 1e-10);

    let e = sigma2_eta_conditional(&state, &cfg);
    assert_abs_diff_eq!(e.shape, cfg.ig_shape + 1.5, epsilon = 1e-12);
    assert_abs_diff_eq!(e.rate, cfg.ig_rate + 0.5 * (0.04 + 0.01 + 0.0025), epsilon = 1e-12);
}

#[test]
fn unit_weights_reduce_to_ordinary_regression() {
    let data = common::mixed_data(40, 4, 2).unweighted();
    let cfg = GaConfig::default();
    let state = GaState {
        beta: DVector::zeros(3),
        eta: DVector::from_vec(vec![0.1, 0.0, -0.2, 0.3]),
        sigma2_xi: 0.5,
        sigma2_eta: 1.0,
    };
    let b = beta_conditional(&state, &data, &cfg).unwrap();
    let x = data.x();
    let y = transformed_response(&data, cfg.delta);
    let target = DVector::from_fn(40, |i, _| y[i] - state.eta[data.area()[i]]);
    let prec = x.transpose() * x / 0.5 + DMatrix::identity(3, 3) / cfg.sigma2_beta;
    let mean = prec.clone().lu().solve(&(x.transpose() * target / 0.5)).unwrap();
    for j in 0..3 {
        assert_abs_diff_eq!(b.mean[j], mean[j], epsilon = 1e-9);
        for k in 0..3 {
            assert_abs_diff_eq!(b.precision[(j, k)], prec[(j, k)], epsilon = 1e-9);
        }
    }
}

/// With a vague prior, `beta | y` is approximately Student-t centred at the
/// mean of `y`, and `sigma2 | y` is `InvGamma(a + (n-1)/2, b + S/2)`.
#[test]
fn intercept_posterior_matches_normal_inverse_gamma() {
    let z: Vec<u64> = (0..200).map(|i| [0, 1, 3, 4, 7, 2, 12, 5][i % 8]).collect();
    let data = intercept_data(z);
    let cfg = fixed_only();
    let y = transformed_response(&data, cfg.delta);
    let n = y.len() as f64;
    let ybar = y.mean();
    let s: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let shape = cfg.ig_shape + (n - 1.0) / 2.0;
    let rate = cfg.ig_rate + s / 2.0;
    let sigma2_mean = rate / (shape - 1.0);

    let draws = run_ga_gibbs(&data, &cfg, &mut stream(10, &[])).unwrap();
    let beta: Vec<f64> = draws.beta.column(0).iter().copied().collect();
    let (bm, bv) = common::mean_var(&beta);
    let (sm, _) = common::mean_var(&draws.sigma2_xi);
    assert!((bm - ybar).abs() < 0.01 * ybar.abs(), "{bm} vs {ybar}");
    assert!((bv - sigma2_mean / n).abs() < 0.1 * sigma2_mean / n, "{bv}");
    assert!((sm - sigma2_mean).abs() < 0.03 * sigma2_mean, "{sm} vs {sigma2_mean}");
}

#[test]
fn back_transform_boundary() {
    let delta: f64 = 5.0;
    assert_eq!(back_transform(delta.ln(), delta), 0.0);
    assert_eq!(back_transform(0.0, delta), 0.0);
    assert_abs_diff_eq!(back_transform(12f64.ln(), delta), 7.0, epsilon = 1e-12);
    assert!(back_transform(delta.ln() + 1e-9, delta) > 0.0);
}

#[test]
fn census_prediction_returns_observed_totals() {
    let spec = SyntheticSpec {
        n_units: 300,
        n_areas: 4,
        ..SyntheticSpec::default()
    };
    let pop = generate_synthetic_population(&spec, &mut stream(3, &[])).unwrap();
    let encoder = DesignEncoder::new(pop.covariates());
    let census = SampleDesign::new((0..pop.len()).collect(), vec![1.0; pop.len()]).unwrap();
    let kept = 5;
    let draws = GaDraws {
        beta: DMatrix::from_element(kept, encoder.width(), 0.3),
        eta: DMatrix::zeros(kept, 4),
        sigma2_xi: vec![0.5; kept],
        sigma2_eta: vec![1.0; kept],
    };
    let totals = plpmlg::estimators::ga_predict(&draws, &pop, &census, &encoder, &GaConfig::default(), 9).unwrap();
    let truth = pop.area_totals(vacancy);
    for t in 0..kept {
        for a in 0..4 {
            assert_eq!(totals.area[(t, a)], truth[a]);
        }
    }
}

#[test]
fn ga_runs_are_deterministic() {
    let data = common::mixed_data(60, 3, 8);
    let cfg = GaConfig {
        n_iter: 100,
        burn_in: 50,
        ..GaConfig::default()
    };
    let a = run_ga_gibbs(&data, &cfg, &mut stream(1, &[])).unwrap();
    let b = run_ga_gibbs(&data, &cfg, &mut stream(1, &[])).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.kept(), 50);
}

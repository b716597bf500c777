mod common;

use common::{mixture_data, ols, random_params};
use mixlasso::em::path_lambda_max;
use mixlasso::model::penalized_loglik;
use mixlasso::{bic, bic_select, em_fit, fit_path, EmConfig, MixtureParams, Sigma2Mode};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn config(k: usize, lambda: f64, max_iter: usize) -> EmConfig {
    let mut cfg = EmConfig::new(k).with_lambda(lambda);
    cfg.max_iter = max_iter;
    cfg.conv_tol = 1e-8;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn penalized_likelihood_never_decreases(seed in 0u64..100_000, k in 1usize..4, p in 2usize..30, frac in 0.0f64..0.5) {
        let (data, _, _) = mixture_data(seed, 120, p, k, 2.min(p));
        let init = random_params(seed ^ 1, p, 1, k, 0.5);
        let lambda = frac * path_lambda_max(&data, &init).unwrap();
        let fit = em_fit(&data, &init, &config(k, lambda, 30)).unwrap();
        for w in fit.trace.records.windows(2) {
            prop_assert!(w[1].penalized_loglik >= w[0].penalized_loglik - 1e-8, "{} -> {}", w[0].penalized_loglik, w[1].penalized_loglik);
        }
        // The trace agrees with an independent evaluation at the final parameters.
        let last = fit.trace.records.last().unwrap();
        prop_assert!((last.penalized_loglik - penalized_loglik(&fit.params, &data, lambda).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn scaled_objective_never_decreases_at_other_variances(seed in 0u64..100_000, k in 2usize..4, sigma2 in 0.3f64..3.0) {
        let (data, _, _) = mixture_data(seed, 150, 10, k, 3);
        let init = random_params(seed ^ 2, 10, 1, k, 0.5);
        let lambda = 0.1 * path_lambda_max(&data, &init).unwrap();
        let cfg = config(k, lambda, 30).with_sigma2(Sigma2Mode::Fixed(sigma2));
        let fit = em_fit(&data, &init, &cfg).unwrap();
        for w in fit.trace.records.windows(2) {
            prop_assert!(w[1].objective >= w[0].objective - 1e-8);
        }
    }

    #[test]
    fn relabeled_start_gives_relabeled_fit(seed in 0u64..100_000, shift in 1usize..3) {
        let k = 3;
        let (data, _, _) = mixture_data(seed, 150, 12, k, 3);
        let init = random_params(seed ^ 3, 12, 1, k, 0.5);
        let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
        let cfg = config(k, 0.05, 15);
        let a = em_fit(&data, &init, &cfg).unwrap();
        let b = em_fit(&data, &init.permuted(&perm), &cfg).unwrap();
        let expected = a.params.permuted(&perm);
        prop_assert!(b.params.beta_distance(&expected) < 1e-9);
        prop_assert!((&b.params.omega - &expected.omega).amax() < 1e-9);
        prop_assert_eq!(a.iterations(), b.iterations());
    }
}

#[test]
fn identical_inputs_give_identical_traces() {
    let (data, _, _) = mixture_data(5, 200, 20, 2, 4);
    let init = random_params(6, 20, 1, 2, 0.5);
    let cfg = config(2, 0.05, 25);
    let a = em_fit(&data, &init, &cfg).unwrap();
    let b = em_fit(&data, &init, &cfg).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.params, b.params);
}

#[test]
fn converged_fit_is_self_consistent() {
    let (data, _, _) = mixture_data(8, 300, 15, 2, 4);
    let init = random_params(9, 15, 1, 2, 0.5);
    let mut cfg = config(2, 0.02, 500);
    cfg.conv_tol = 1e-6;
    let fit = em_fit(&data, &init, &cfg).unwrap();
    assert!(fit.converged);
    let mut one = cfg.clone();
    one.max_iter = 1;
    let again = em_fit(&data, &fit.params, &one).unwrap();
    assert!(again.params.beta_distance(&fit.params) < cfg.conv_tol);
}

#[test]
fn one_mixture_without_penalty_is_least_squares() {
    for seed in 0..5 {
        let (data, _, _) = mixture_data(seed, 60, 6, 1, 6);
        let init = random_params(seed, 6, 1, 1, 1.0);
        let fit = em_fit(&data, &init, &config(1, 0.0, 5)).unwrap();
        let exact = ols(data.x(), data.y());
        assert!((&fit.params.beta[0] - exact).amax() < 1e-6);
        assert_eq!(fit.params.omega[0], 1.0);
    }
}

#[test]
fn penalty_at_path_maximum_zeroes_everything() {
    let (data, _, _) = mixture_data(11, 200, 30, 2, 5);
    let init = random_params(12, 30, 1, 2, 0.5);
    let lmax = path_lambda_max(&data, &init).unwrap();
    for scale in [1.0, 1.5, 10.0] {
        let fit = em_fit(&data, &init, &config(2, lmax * scale, 20)).unwrap();
        assert!(fit.params.beta.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(fit.support.is_empty());
    }
}

#[test]
fn collapsing_weight_is_flagged() {
    let (data, truth, _) = mixture_data(13, 200, 5, 2, 3);
    let mut init = truth.clone();
    init.beta[1] = init.beta[0].clone();
    init.omega = DVector::from_vec(vec![0.9999, 0.0001]);
    let fit = em_fit(&data, &init, &config(2, 0.0, 20)).unwrap();
    assert!(fit.degenerate());
    assert!(!fit.trace.warnings.is_empty());
}

#[test]
fn adaptive_variance_tracks_the_noise_level() {
    let (data, truth, _) = mixture_data(14, 800, 5, 2, 3);
    let cfg = config(2, 0.0, 100).with_sigma2(Sigma2Mode::Adaptive { initial: 4.0 });
    let fit = em_fit(&data, &truth, &cfg).unwrap();
    assert!((fit.params.sigma2 - 1.0).abs() < 0.2, "{}", fit.params.sigma2);
}

#[test]
fn path_and_bic_selection() {
    let (data, truth, _) = mixture_data(15, 300, 40, 2, 4);
    let lmax = path_lambda_max(&data, &truth).unwrap();
    let grid: Vec<f64> = (0..8).map(|i| lmax * 0.5f64.powi(i)).collect();
    let path = fit_path(&data, &truth, &grid, &EmConfig::new(2)).unwrap();
    assert_eq!(path.len(), grid.len());
    assert!(path[0].support.is_empty());
    for (fit, &l) in path.iter().zip(&grid) {
        assert_eq!(fit.lambda, l);
    }
    let chosen = bic_select(&path, &data).unwrap();
    let best = path
        .iter()
        .map(|f| bic(f, &data).unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(chosen.bic, Some(best));
    // BIC by hand: −2n·loglik + (K·groups + K)·ln n, the likelihood taken at
    // the responsibility-weighted residual variance.
    let n = data.n() as f64;
    let params = &chosen.params;
    let resid: Vec<DVector<f64>> = params
        .beta
        .iter()
        .map(|b| (data.y() - data.x() * b).column(0).into_owned())
        .collect();
    let density = |r: f64, s2: f64| (-0.5 * r * r / s2).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
    let mut s2_hat = 0.0;
    for i in 0..data.n() {
        let w: Vec<f64> = (0..2)
            .map(|k| params.omega[k] * density(resid[k][i], params.sigma2))
            .collect();
        let total: f64 = w.iter().sum();
        s2_hat += (0..2).map(|k| w[k] / total * resid[k][i].powi(2)).sum::<f64>() / n;
    }
    let ll: f64 = (0..data.n())
        .map(|i| {
            (0..2)
                .map(|k| params.omega[k] * density(resid[k][i], s2_hat))
                .sum::<f64>()
                .ln()
        })
        .sum::<f64>()
        / n;
    let by_hand = -2.0 * n * ll + (2 * chosen.support.len() + 2) as f64 * n.ln();
    assert!((by_hand - best).abs() < 1e-9 * best.abs());
    assert!(fit_path(&data, &truth, &[1.0, 2.0], &EmConfig::new(2)).is_err());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (data, truth, _) = mixture_data(16, 50, 4, 2, 2);
    assert!(em_fit(&data, &truth, &EmConfig::new(3)).is_err());
    let wrong_p = MixtureParams::new(truth.omega.clone(), vec![DMatrix::zeros(3, 1); 2], 1.0).unwrap();
    assert!(em_fit(&data, &wrong_p, &EmConfig::new(2)).is_err());
    assert!(em_fit(&data, &truth, &EmConfig::new(2).with_lambda(-1.0)).is_err());
}

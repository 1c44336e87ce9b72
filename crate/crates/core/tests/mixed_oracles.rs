mod common;

use std::sync::Arc;

use common::oracles::*;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_sae::frame::{Population, Sample};
use robust_sae::mixed::{
    eblup_total_at, fit_lmm, fit_lmm_with, pseudo_eblup_total, shrinkage, Criterion, LmmOptions,
    MixedFit, PseudoEblupFit,
};
use robust_sae::model::{Formula, ModelSpec, PredictionMode, VarianceStructure};

fn toy_sample(seed: u64, per_domain: usize, taken: usize) -> Sample {
    let pop = Arc::new(linear_mixed_population(&[per_domain; 3], (5.0, 2.0), 2.0, 1.5, seed));
    let mut rows = Vec::new();
    for d in 0..3 {
        rows.extend_from_slice(&pop.domain_rows(d)[..taken]);
    }
    let n = rows.len();
    subsample(&pop, rows, vec![0.5; n])
}

#[test]
fn three_domain_toy_matches_dense_blup() {
    let sample = toy_sample(11, 8, 5);
    for (variance, criterion) in [
        (VarianceStructure::Homo, Criterion::Ml),
        (VarianceStructure::Homo, Criterion::Reml),
        (VarianceStructure::Wp2, Criterion::Ml),
    ] {
        let spec = ModelSpec::new(Formula::Linear).with_variance(variance);
        let fit = fit_lmm(&sample, &spec, criterion).unwrap();
        let o = dense_lmm(&sample, &fit);
        for (a, b) in fit.beta.iter().zip(o.beta.iter()) {
            assert!(rel_close(*a, *b, 1e-10), "{a} vs {b}");
        }
        assert!(rel_close(fit.log_lik, o.log_lik, 1e-10), "{} vs {}", fit.log_lik, o.log_lik);
        for d in 0..3 {
            let got = eblup_total_at(&fit, &sample, d).unwrap();
            let want = dense_lmm_total(&sample, &fit, &o, d);
            assert!(rel_close(got, want, 1e-10), "domain {d}: {got} vs {want}");
        }
    }
}

#[test]
fn by_sc_likelihood_matches_dense_and_is_maximal() {
    let pop = linear_mixed_population(&[14, 12, 16, 10], (3.0, 1.0), 1.0, 2.0, 5);
    let sample = census(pop);
    let spec = ModelSpec::new(Formula::Linear).with_variance(VarianceStructure::BySc);
    let fit = fit_lmm(&sample, &spec, Criterion::Ml).unwrap();
    let o = dense_lmm(&sample, &fit);
    assert!(rel_close(fit.log_lik, o.log_lik, 1e-10));
    // perturbing any variance parameter lowers the dense likelihood
    for k in 0..=fit.level1.len() {
        for f in [0.9, 1.1] {
            let mut other = fit.clone();
            if k == 0 {
                if fit.sigma2_u == 0.0 {
                    continue;
                }
                other.sigma2_u *= f;
            } else {
                other.level1[k - 1] *= f;
            }
            assert!(dense_lmm(&sample, &other).log_lik < o.log_lik + 1e-9);
        }
    }
}

/// Balanced one-way layout: intercept only, `m` units in each of `D` domains.
fn balanced(d: usize, m: usize, seed: u64) -> (Sample, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut units = Vec::new();
    let mut ys = vec![vec![0.0; m]; d];
    for (g, row) in ys.iter_mut().enumerate() {
        let u: f64 = rng.random_range(-6.0..6.0);
        for (j, y) in row.iter_mut().enumerate() {
            *y = 50.0 + u + rng.random_range(-2.0..2.0);
            units.push(unit(g * m + j, &format!("G{g}"), 3, 1.0, *y));
        }
    }
    let mean_d: Vec<f64> = ys.iter().map(|r| r.iter().sum::<f64>() / m as f64).collect();
    let grand = mean_d.iter().sum::<f64>() / d as f64;
    let ssb: f64 = mean_d.iter().map(|a| m as f64 * (a - grand).powi(2)).sum();
    let ssw: f64 = ys
        .iter()
        .zip(&mean_d)
        .map(|(r, a)| r.iter().map(|y| (y - a).powi(2)).sum::<f64>())
        .sum();
    let msb = ssb / (d - 1) as f64;
    let msw = ssw / (d * (m - 1)) as f64;
    (census(Population::new(units).unwrap()), msb, msw)
}

#[test]
fn balanced_one_way_matches_anova() {
    let (d, m) = (6, 5);
    let (sample, msb, msw) = balanced(d, m, 3);
    assert!(msb > 3.0 * msw);
    let spec = ModelSpec::new(Formula::Intercept);

    let reml = fit_lmm(&sample, &spec, Criterion::Reml).unwrap();
    assert!(rel_close(reml.level1[0], msw, 1e-6), "{} vs {msw}", reml.level1[0]);
    let want = (msb - msw) / m as f64;
    assert!(rel_close(reml.sigma2_u, want, 1e-6), "{} vs {want}", reml.sigma2_u);

    let ml = fit_lmm(&sample, &spec, Criterion::Ml).unwrap();
    assert!(rel_close(ml.level1[0], msw, 1e-6));
    let want = ((1.0 - 1.0 / d as f64) * msb - msw) / m as f64;
    assert!(rel_close(ml.sigma2_u, want, 1e-6), "{} vs {want}", ml.sigma2_u);
    assert!(!ml.boundary && !reml.boundary);
}

#[test]
fn equal_domain_means_hit_the_boundary() {
    // every domain holds the same multiset of outcomes, so the between SS is 0
    let vals = [3.0, 7.0, 4.5, 9.0];
    let mut units = Vec::new();
    for g in 0..5 {
        for j in 0..4 {
            units.push(unit(g * 4 + j, &format!("G{g}"), 1, 1.0, vals[(j + g) % 4]));
        }
    }
    let sample = census(Population::new(units).unwrap());
    let fit = fit_lmm(&sample, &ModelSpec::new(Formula::Intercept), Criterion::Ml).unwrap();
    assert!(fit.boundary);
    assert_eq!(fit.sigma2_u, 0.0);
    assert!(fit.u_hat.iter().all(|&u| u == 0.0));
}

#[test]
fn monte_carlo_consistency_n2000() {
    let (beta, s2u, s2e): ((f64, f64), f64, f64) = ((10.0, 2.0), 4.0, 9.0);
    let (d, m) = (40usize, 50usize);
    let pop = linear_mixed_population(&vec![m; d], beta, s2u.sqrt(), s2e.sqrt(), 2024);
    let sample = census(pop);
    let fit = fit_lmm(&sample, &ModelSpec::new(Formula::Linear), Criterion::Ml).unwrap();
    // asymptotic standard errors of the balanced layout
    let se_u = (2.0 / d as f64).sqrt() * (s2u + s2e / m as f64);
    let se_e = s2e * (2.0 / (d * (m - 1)) as f64).sqrt();
    let se_b0 = ((s2u + s2e / m as f64) / d as f64 + s2e * 25.0 / (d * m) as f64 / (100.0 / 12.0)).sqrt();
    let se_b1 = (s2e / (d * m) as f64 / (100.0 / 12.0)).sqrt();
    assert!((fit.sigma2_u - s2u).abs() < 3.0 * se_u, "sigma2_u {}", fit.sigma2_u);
    assert!((fit.level1[0] - s2e).abs() < 3.0 * se_e, "sigma2_e {}", fit.level1[0]);
    assert!((fit.beta[0] - beta.0).abs() < 3.0 * se_b0, "b0 {}", fit.beta[0]);
    assert!((fit.beta[1] - beta.1).abs() < 3.0 * se_b1, "b1 {}", fit.beta[1]);
}

#[test]
fn ml_argmax_is_start_invariant() {
    let pop = linear_mixed_population(&[20, 15, 30, 12, 25, 18], (4.0, 1.5), 1.5, 2.0, 77);
    let sample = census(pop);
    for variance in [VarianceStructure::Homo, VarianceStructure::BySc] {
        let spec = ModelSpec::new(Formula::Linear).with_variance(variance);
        let base = fit_lmm(&sample, &spec, Criterion::Ml).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let s2u = 10f64.powf(rng.random_range(-3.0..2.0));
            let l1 = (0..variance.groups()).map(|_| 10f64.powf(rng.random_range(-1.0..2.0))).collect();
            let opts = LmmOptions { start: Some((s2u, l1)), ..Default::default() };
            let fit = fit_lmm_with(&sample, &spec, Criterion::Ml, &opts).unwrap();
            assert!((fit.log_lik - base.log_lik).abs() < 1e-6, "{variance}: {} vs {}", fit.log_lik, base.log_lik);
        }
    }
}

#[test]
fn information_criteria_and_nesting() {
    let pop = linear_mixed_population(&[20, 15, 30, 12], (4.0, 1.5), 1.0, 2.0, 1);
    let sample = census(pop);
    let full = fit_lmm(&sample, &ModelSpec::new(Formula::Full), Criterion::Ml).unwrap();
    let reduced = fit_lmm(&sample, &ModelSpec::new(Formula::Reduced), Criterion::Ml).unwrap();
    assert!(full.log_lik >= reduced.log_lik - 1e-9);
    let (aic, bic, ll) = full.information_criteria();
    assert_eq!(aic, -2.0 * ll + 2.0 * full.n_params as f64);
    assert_eq!(bic, -2.0 * ll + full.n_params as f64 * (sample.len() as f64).ln());
    assert_eq!(full.n_params, 8 + 2);
}

#[test]
fn single_domain_is_rejected() {
    let pop = linear_mixed_population(&[30], (1.0, 1.0), 1.0, 1.0, 1);
    let sample = census(pop);
    assert!(fit_lmm(&sample, &ModelSpec::new(Formula::Linear), Criterion::Ml).is_err());
}

#[test]
fn census_domain_total_is_observed_sum() {
    let sample = toy_sample(4, 5, 5);
    let fit = fit_lmm(&sample, &ModelSpec::new(Formula::Linear), Criterion::Ml).unwrap();
    let pop = sample.parent();
    for d in 0..3 {
        let truth: f64 = pop.domain_rows(d).iter().map(|&r| pop.unit(r).tto).sum();
        assert_eq!(eblup_total_at(&fit, &sample, d).unwrap(), truth);
    }
}

#[test]
fn all_predicted_mode_uses_predictions_everywhere() {
    let sample = toy_sample(8, 8, 4);
    let spec = ModelSpec::new(Formula::Linear).with_prediction(PredictionMode::AllPredicted);
    let fit = fit_lmm(&sample, &spec, Criterion::Ml).unwrap();
    let pop = sample.parent();
    for d in 0..3 {
        let want: f64 = pop
            .domain_rows(d)
            .iter()
            .map(|&r| Formula::Linear.predict(pop.unit(r), &fit.beta) + fit.u_hat[d])
            .sum();
        assert!(rel_close(eblup_total_at(&fit, &sample, d).unwrap(), want, 1e-12));
    }
}

#[test]
fn eblup_is_scale_equivariant() {
    let sample = toy_sample(21, 10, 6);
    let spec = ModelSpec::new(Formula::Linear);
    let fit = fit_lmm(&sample, &spec, Criterion::Ml).unwrap();
    for c in [0.01, 3.0, 250.0] {
        let pop = sample.parent();
        let units = pop
            .units()
            .iter()
            .map(|u| {
                let mut u = u.clone();
                u.tto *= c;
                u.tax1 *= c;
                u
            })
            .collect();
        let scaled = sample.rebind(Arc::new(Population::new(units).unwrap())).unwrap();
        let fit_c = fit_lmm(&scaled, &spec, Criterion::Ml).unwrap();
        assert!(rel_close(fit_c.sigma2_u, c * c * fit.sigma2_u, 1e-5));
        for d in 0..3 {
            let a = eblup_total_at(&fit, &sample, d).unwrap();
            let b = eblup_total_at(&fit_c, &scaled, d).unwrap();
            assert!(rel_close(b, c * a, 1e-7), "{b} vs {}", c * a);
        }
    }
}

fn homo_source(sigma2_u: f64, sigma2_e: f64) -> MixedFit {
    MixedFit {
        spec: ModelSpec::new(Formula::Intercept),
        criterion: Criterion::Ml,
        beta: vec![0.0],
        sigma2_u,
        level1: vec![sigma2_e],
        u_hat: vec![0.0; 2],
        log_lik: 0.0,
        aic: 0.0,
        bic: 0.0,
        n_params: 3,
        n_obs: 0,
        boundary: false,
        converged: true,
        iterations: 0,
    }
}

#[test]
fn pseudo_eblup_two_domain_hand_solution() {
    // domain A: 6 units, sample rows 0,1,2 with weights 2,2,2
    // domain B: 8 units, sample rows 6,7 with weights 4,4
    let ys = [10.0, 14.0, 12.0, 0.0, 0.0, 0.0, 30.0, 26.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let units = (0..14)
        .map(|i| unit(i, if i < 6 { "A" } else { "B" }, 1, 1.0, ys[i]))
        .collect();
    let pop = Arc::new(Population::new(units).unwrap());
    let sample = subsample(&pop, vec![0, 1, 2, 6, 7], vec![0.5, 0.5, 0.5, 0.25, 0.25]);
    let spec = ModelSpec::new(Formula::Intercept);
    let source = homo_source(2.0, 4.0);
    // hand solution with x = 1
    let ga = 2.0 / (2.0 + 4.0 / 3.0);
    let gb = 2.0 / (2.0 + 4.0 / 2.0);
    let (ybar_a, ybar_b) = (12.0, 28.0);
    let (wa, wb) = (6.0, 8.0);
    let beta = (wa * (1.0 - ga) * ybar_a + wb * (1.0 - gb) * ybar_b)
        / (wa * (1.0 - ga) + wb * (1.0 - gb));
    let want_a = ga * 6.0 * ybar_a + (6.0 - ga * 6.0) * beta;
    let want_b = gb * 8.0 * ybar_b + (8.0 - gb * 8.0) * beta;
    let got_a = pseudo_eblup_total(&sample, &spec, &source, "A").unwrap();
    let got_b = pseudo_eblup_total(&sample, &spec, &source, "B").unwrap();
    assert!(rel_close(got_a, want_a, 1e-12), "{got_a} vs {want_a}");
    assert!(rel_close(got_b, want_b, 1e-12), "{got_b} vs {want_b}");

    let fit = PseudoEblupFit::fit(&sample, &spec, &source).unwrap();
    assert!((fit.delta[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!((fit.gamma[1].unwrap() - shrinkage(2.0, 4.0, 0.5)).abs() < 1e-15);
    assert!((shrinkage(2.0, 4.0, 0.5) - 0.5).abs() < 1e-15);
}

#[test]
fn pseudo_eblup_requires_homo_source() {
    let sample = toy_sample(2, 8, 4);
    let mut source = homo_source(1.0, 1.0);
    source.spec = source.spec.with_variance(VarianceStructure::BySc);
    source.level1 = vec![1.0; 5];
    assert!(pseudo_eblup_total(&sample, &ModelSpec::new(Formula::Linear), &source, "D00").is_err());
}

use krrlab::distributions::{target, DataModel, GridOptions};
use krrlab::krr::{analytic_segment, predict_set, sigma_f};
use krrlab::{build_test_grid, fit, fit_1d, gram, sample_1d, test_error, SampleSet, TestSpec};
use proptest::prelude::*;

fn sorted_xs(s: &SampleSet<f64>) -> Vec<f64> {
    let mut xs = s.first_coordinates();
    xs.sort_by(f64::total_cmp);
    xs
}

#[test]
fn interpolation_at_ridge_floor() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let s = sample_1d(300, &model, 1).unwrap();
    let g = gram(&s, 100.0);
    let dense = fit(&g, s.labels(), 0.0).unwrap();
    let chain = fit_1d(&s, 0.0, 100.0).unwrap();
    for i in 0..s.len() {
        let y = s.labels()[i];
        assert!((dense.predict(s.point(i)) - y).abs() < 1e-6);
        assert!((dense.predict_direct(s.point(i)) - y).abs() < 1e-6);
        assert!((chain.predict(s.point(i)) - y).abs() < 1e-6);
        assert!((dense.predict(s.point(i)) - y).abs() <= 1e-12 * dense.alpha[i].abs() * 1.01 + 1e-12);
    }
}

#[test]
fn gram_is_symmetric_with_unit_diagonal() {
    let model = DataModel::new(1.0, 0.0, 100.0, 2, 3.0).unwrap();
    let s = krrlab::sample_cylinder(50, &model, 2).unwrap();
    let g = gram(&s, 100.0);
    for i in 0..50 {
        assert_eq!(g.entries[(i, i)], 1.0);
        for j in 0..50 {
            assert_eq!(g.entries[(i, j)], g.entries[(j, i)]);
            assert!(g.entries[(i, j)] > 0.0 && g.entries[(i, j)] <= 1.0);
        }
    }
}

#[test]
fn far_field_decay_bound() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let s = sample_1d(100, &model, 3).unwrap();
    let sigma = 0.5;
    let p = fit(&gram(&s, sigma), s.labels(), 1e-3).unwrap();
    let l1: f64 = p.alpha.iter().map(|a| a.abs()).sum();
    for &x in &[10.0, 20.0, -15.0] {
        let dist = s.first_coordinates().iter().map(|&xi| (x - xi).abs()).fold(f64::INFINITY, f64::min);
        assert!(p.predict(&[x]).abs() < (-dist / sigma).exp() * l1);
    }
}

fn straddling_pair(xs: &[f64]) -> (f64, f64) {
    let k = xs.partition_point(|&x| x < 0.0);
    (xs[k - 1], xs[k])
}

#[test]
fn piecewise_linear_limit_between_extremal_points() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    for seed in 0..5 {
        let s = sample_1d(200, &model, 40 + seed).unwrap();
        let (xa, xb) = straddling_pair(&sorted_xs(&s));
        let p = fit(&gram(&s, 1e3), s.labels(), 0.0).unwrap();
        let q = fit_1d(&s, 0.0, 1e3).unwrap();
        for k in 0..=20 {
            let x = xa + (xb - xa) * k as f64 / 20.0;
            let lin = (2.0 * x - xa - xb) / (xb - xa);
            assert!((p.predict_direct(&[x]) - lin).abs() < 0.01, "dense, x {x}");
            assert!((q.predict_1d(x) - lin).abs() < 0.01, "chain, x {x}");
        }
    }
}

fn segment_error(a: f64, chi: f64, w: f64) -> f64 {
    4.0 / (w * w) * a.powf(chi + 3.0) * (1.0 / (chi + 3.0) - 2.0 / (chi + 2.0) + 1.0 / (chi + 1.0))
}

#[test]
fn test_error_of_piecewise_linear_predictor() {
    for &chi in &[0.0, 1.0, 2.0] {
        let model = DataModel::new(chi, 0.0, 1e3, 1, 3.0).unwrap();
        let s = sample_1d(400, &model, 7).unwrap();
        let (xa, xb) = straddling_pair(&sorted_xs(&s));
        let p = fit_1d(&s, 0.0, 1e3).unwrap();
        let grid = build_test_grid(&p, &model, &GridOptions::default()).unwrap();
        let eps = test_error(&p, &model, TestSpec::Grid(&grid)).unwrap();
        let norm = (krrlab::log_gamma(0.5 * (1.0 + chi)).unwrap()).exp() * model.truncated_mass();
        let w = xb - xa;
        let closed = (segment_error(xb, chi, w) + segment_error(-xa, chi, w)) / norm;
        assert!((eps / closed - 1.0).abs() < 0.05, "chi {chi}: {eps} vs {closed}");
    }
}

#[test]
fn test_error_vanishes_for_exact_predictor_and_is_permutation_invariant() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let s = sample_1d(200, &model, 8).unwrap();
    let p = fit_1d(&s, 0.0, 100.0).unwrap();
    let grid = build_test_grid(&p, &model, &GridOptions { resolution_scale: 0.1, max_points: None }).unwrap();
    let e1 = test_error(&p, &model, TestSpec::Grid(&grid)).unwrap();
    let rev: Vec<usize> = (0..s.len()).rev().collect();
    let s2 = s.select(&rev);
    let p2 = fit_1d(&s2, 0.0, 100.0).unwrap();
    let e2 = test_error(&p2, &model, TestSpec::Grid(&grid)).unwrap();
    assert!(f64::abs(e1 - e2) <= 1e-12 * e1);
    let test = sample_1d(2000, &model, 99).unwrap();
    let zero = test_error(&p, &model, TestSpec::Sample(&test)).unwrap();
    assert!(zero > 0.0);
    assert!(test_error(&p, &model, TestSpec::MonteCarlo { samples: 999, seed: 1 }).is_err());
    // a test set labelled by the predictor itself has zero error
    let preds = predict_set(&p, &test);
    let own = SampleSet::new(1, test.coords().to_vec(), preds, 0).unwrap();
    assert_eq!(test_error(&p, &model, TestSpec::Sample(&own)).unwrap(), 0.0);
}

#[test]
fn predictor_agrees_with_segment_form_on_every_interval() {
    for &(xi, sigma) in &[(0.0, 1.0), (0.5, 1.0), (0.0, 10.0), (0.3, 5.0)] {
        let model = DataModel::new(1.0, xi, sigma, 1, 3.0).unwrap();
        let s = sample_1d(150, &model, 21).unwrap();
        let xs = sorted_xs(&s);
        let chain = fit_1d(&s, 0.0, sigma).unwrap();
        let dense = fit(&gram(&s, sigma), s.labels(), 0.0).unwrap();
        for w in xs.windows(2) {
            let (a, b) = analytic_segment(w[0], w[1] - w[0], xi, sigma).unwrap();
            let scale = w[0].abs().powf(-xi);
            for k in 1..4 {
                let x = w[0] + (w[1] - w[0]) * k as f64 / 4.0;
                let u = (x - w[0]) / sigma;
                let seg = scale * (a * u.exp() + b * (-u).exp());
                assert!((chain.predict_1d(x) - seg).abs() < 1e-8, "chain xi {xi} sigma {sigma} x {x}");
                assert!((dense.predict_direct(&[x]) - seg).abs() < 1e-8, "dense xi {xi} sigma {sigma} x {x}");
            }
        }
    }
}

#[test]
fn segment_boundary_conditions() {
    for &(x, d, xi) in &[(0.3, 0.01, 0.0), (-0.3, 0.01, 0.7), (-0.004, 0.01, 0.4), (1.2, 0.5, 0.9)] {
        let sigma = 100.0;
        let (a, b) = analytic_segment(x, d, xi, sigma).unwrap();
        let s: f64 = f64::abs(x).powf(-xi);
        let e = (d / sigma).exp();
        assert!((s * (a + b) - target(x, xi).unwrap()).abs() < 1e-12);
        assert!((s * (a * e + b / e) - target(x + d, xi).unwrap()).abs() < 1e-12 * (1.0 + target(x + d, xi).unwrap().abs()));
    }
}

proptest! {
    #[test]
    fn segment_matches_direct_solve(x in -2.0f64..2.0, frac in 0.01f64..1.0, xi in 0.0f64..0.9, sigma in 0.5f64..200.0) {
        prop_assume!(x.abs() > 1e-3);
        let d = frac * 0.5;
        prop_assume!((x + d).abs() > 1e-3);
        let (a, b) = analytic_segment(x, d, xi, sigma).unwrap();
        let s = x.abs().powf(-xi);
        let (y0, y1) = (target(x, xi).unwrap() / s, target(x + d, xi).unwrap() / s);
        let (e, ei) = ((d / sigma).exp(), (-d / sigma).exp());
        let det = ei - e;
        let a_ref = (y0 * ei - y1) / det;
        let b_ref = (y1 - y0 * e) / det;
        prop_assert!((a - a_ref).abs() < 1e-10 * (1.0 + a_ref.abs()));
        prop_assert!((b - b_ref).abs() < 1e-10 * (1.0 + b_ref.abs()));
    }
}

#[test]
fn sigma_f_of_identical_and_flipped_predictors() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let s = sample_1d(100, &model, 4).unwrap();
    let test = sample_1d(2000, &model, 5).unwrap();
    let a = fit_1d(&s, 1e-3, 100.0).unwrap();
    assert_eq!(sigma_f(&a, &a, &test), 0.0);
    let flipped_labels: Vec<f64> = s.labels().iter().map(|y| -y).collect();
    let sf = SampleSet::new(1, s.coords().to_vec(), flipped_labels, 0).unwrap();
    let b = fit_1d(&sf, 1e-3, 100.0).unwrap();
    let fa = predict_set(&a, &test);
    let expected = fa.iter().filter(|v| **v != 0.0).map(|v| 4.0 * v * v).sum::<f64>() / fa.iter().filter(|v| **v != 0.0).count() as f64;
    assert!((sigma_f(&a, &b, &test) / expected - 1.0).abs() < 1e-10);
}

#[test]
fn large_ridge_shrinks_predictor() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let s = sample_1d(200, &model, 6).unwrap();
    for &lam in &[1e3, 1e5, 1e7] {
        let p = fit_1d(&s, lam, 100.0).unwrap();
        let bound = 200.0 / lam;
        for k in 0..50 {
            let x = -3.0 + 6.0 * k as f64 / 49.0;
            assert!(p.predict_1d(x).abs() <= bound);
        }
    }
}

#[test]
fn f32_chain_tracks_f64() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let s = sample_1d(200, &model, 12).unwrap();
    let p64 = fit_1d(&s, 1e-3, 100.0).unwrap();
    let coords: Vec<f32> = s.coords().iter().map(|&v| v as f32).collect();
    let labels: Vec<f32> = s.labels().iter().map(|&v| v as f32).collect();
    let s32 = SampleSet::new(1, coords, labels, 0).unwrap();
    let p32 = fit_1d(&s32, 1e-3f32, 100.0f32).unwrap();
    for k in 0..40 {
        let x = -2.5 + 5.0 * k as f64 / 39.0;
        assert!((p32.predict_1d(x as f32) as f64 - p64.predict_1d(x)).abs() < 1e-3);
    }
}

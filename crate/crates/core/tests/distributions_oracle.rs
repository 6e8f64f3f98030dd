use krrlab::distributions::{self, target, DataModel, GridOptions};
use krrlab::quad::integrate_adaptive;
use krrlab::{build_test_grid, sample_1d, sample_cylinder};

fn quad_cdf(chi: f64, x_max: f64) -> impl Fn(f64) -> f64 {
    let half = integrate_adaptive(|x| distributions::density(x, chi), 0.0, x_max, 1e-13, 0.0);
    move |x: f64| {
        let x = x.clamp(-x_max, x_max);
        let m = integrate_adaptive(|t| distributions::density(t, chi), 0.0, x.abs(), 1e-13, 0.0);
        0.5 + 0.5 * x.signum() * m / half
    }
}

fn ks_distance(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    d
}

#[test]
fn density_normalised_on_the_line() {
    for &chi in &[0.0, 0.5, 1.0, 2.0, 4.0] {
        let left = integrate_adaptive(|x| distributions::density(x, chi), -12.0, 0.0, 1e-14, 0.0);
        let right = integrate_adaptive(|x| distributions::density(x, chi), 0.0, 12.0, 1e-14, 0.0);
        assert!((left + right - 1.0).abs() < 1e-8, "chi {chi}: {}", left + right);
    }
}

#[test]
fn series_cdf_agrees_with_quadrature() {
    for &chi in &[0.0, 1.0, 2.5] {
        let q = quad_cdf(chi, 3.0);
        for &x in &[-2.9, -1.0, -0.01, 0.0, 0.3, 1.7, 3.0] {
            assert!((q(x) - distributions::sampling_cdf(chi, 3.0, x)).abs() < 1e-10);
        }
    }
}

#[test]
fn sample_1d_ks_against_quadrature_cdf() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let s = sample_1d(10_000, &model, 17).unwrap();
    let d = ks_distance(s.first_coordinates(), quad_cdf(1.0, 3.0));
    assert!(d < 0.02, "KS distance {d}");
}

#[test]
fn sampler_is_deterministic() {
    let model = DataModel::one_d(2.0, 0.5).unwrap();
    assert_eq!(sample_1d(500, &model, 3).unwrap(), sample_1d(500, &model, 3).unwrap());
    assert_ne!(sample_1d(500, &model, 3).unwrap(), sample_1d(500, &model, 4).unwrap());
}

#[test]
fn labels_follow_target() {
    let model = DataModel::one_d(2.0, 0.5).unwrap();
    let s = sample_1d(2000, &model, 9).unwrap();
    for i in 0..s.len() {
        let x: f64 = s.point(i)[0];
        assert!(x != 0.0 && f64::abs(x) <= 3.0);
        assert_eq!(s.labels()[i], target(x, 0.5).unwrap());
    }
    assert!((target(-0.5, 0.5).unwrap() + 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn sign_balance_at_chi_zero() {
    let model = DataModel::one_d(0.0, 0.0).unwrap();
    let p = 10_000;
    let s = sample_1d(p, &model, 5).unwrap();
    let pos = s.first_coordinates().iter().filter(|&&x| x > 0.0).count() as f64;
    assert!((pos - p as f64 / 2.0).abs() < 4.0 * (p as f64).sqrt());
}

fn min_positive_slope(chi: f64) -> f64 {
    let model = DataModel::one_d(chi, 0.0).unwrap();
    let ps = [100usize, 1000, 10_000];
    let mut logs = Vec::new();
    for &p in &ps {
        let mut acc = 0.0;
        for seed in 0..200u64 {
            let s = sample_1d(p, &model, 1000 * p as u64 + seed).unwrap();
            let m = s.first_coordinates().into_iter().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
            acc += m;
        }
        logs.push(((p as f64).ln(), (acc / 200.0).ln()));
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|v| v.0).sum::<f64>() / n;
    let my = logs.iter().map(|v| v.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|v| (v.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn smallest_positive_sample_scaling() {
    for &chi in &[0.0, 1.0, 2.0] {
        let slope = min_positive_slope(chi);
        let expected = -1.0 / (chi + 1.0);
        assert!((slope - expected).abs() < 0.1, "chi {chi}: slope {slope}");
    }
}

#[test]
fn cylinder_embedding() {
    let model = DataModel::new(1.0, 0.0, 100.0, 3, 3.0).unwrap();
    let p = 10_000;
    let s = sample_cylinder(p, &model, 11).unwrap();
    assert_eq!(s.width(), 4);
    let mut mean2 = 0.0;
    for i in 0..p {
        let pt = s.point(i);
        let norm: f64 = pt[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        mean2 += pt[1];
        assert_eq!(s.labels()[i], target(pt[0], 0.0).unwrap());
    }
    mean2 /= p as f64;
    assert!(mean2.abs() < 3.0 / (p as f64).sqrt());
    let d = ks_distance(s.first_coordinates(), quad_cdf(1.0, 3.0));
    assert!(d < 0.02, "KS distance {d}");
}

#[test]
fn test_grid_length_and_bins() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let a = 0.05;
    let profile = move |x: f64| (-x.abs() / a).exp();
    let opts = GridOptions { resolution_scale: 1.0, max_points: None };
    let grid = build_test_grid(&profile, &model, &opts).unwrap();
    // independent bisection on the analytic derivative
    let (mut lo, mut hi) = (0.0f64, 3.0f64);
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if (-m / a).exp() > 0.1 {
            lo = m;
        } else {
            hi = m;
        }
    }
    let xt = grid.x_tilde.unwrap();
    assert!((xt - hi).abs() < 1e-6 * 3.0, "{xt} vs {hi}");
    let m = grid.bin_counts.len();
    assert_eq!(m, (3.0 / xt).ceil() as usize);
    let q = (1e5 / m as f64).max(2000.0).floor() as usize;
    for w in grid.bin_counts.windows(2) {
        assert!(w[0] >= w[1]);
    }
    assert!(grid.bin_counts.iter().all(|&c| c >= q));
    assert!(grid.nodes.windows(2).all(|w| w[0] < w[1]));
    // weights carry p / Z; multiplying back by Z recovers the plain integral of p
    let plain = 2.0 * integrate_adaptive(|x| distributions::density(x, 1.0), 0.0, 3.0, 1e-13, 0.0);
    let total: f64 = grid.weights.iter().sum();
    assert!((total * model.truncated_mass() - plain).abs() < 1e-4);
    assert!((total - 1.0).abs() < 1e-4);
    let first = grid.integrate(|x| x * x);
    let exact = integrate_adaptive(|x| x * x * distributions::density(x, 1.0), 0.0, 3.0, 1e-13, 0.0) * 2.0 / model.truncated_mass();
    assert!((first - exact).abs() < 1e-6);
}

#[test]
fn test_grid_falls_back_to_uniform() {
    let model = DataModel::one_d(0.0, 0.0).unwrap();
    let flat = |_x: f64| 1.0;
    let grid = build_test_grid(&flat, &model, &GridOptions::default()).unwrap();
    assert!(grid.x_tilde.is_none());
    assert_eq!(grid.len(), 200_000);
    let cyl = DataModel::new(0.0, 0.0, 100.0, 2, 3.0).unwrap();
    assert!(build_test_grid(&flat, &cyl, &GridOptions::default()).is_err());
}

use krrlab::distributions::{sample_1d, DataModel, SampleSet};
use krrlab::experiments::*;
use krrlab::krr::{fit_1d, sigma_f};
use rand::Rng;
use rand_distr::StandardNormal;

fn small_config(model: DataModel) -> ExperimentConfig {
    ExperimentConfig {
        model,
        p_values: vec![100, 400],
        seeds: vec![3, 8, 11, 20],
        ridges: RidgeGrid::AroundCrossover { points: 5, decades: 4.0 },
        resolution_scale: 0.1,
        test_samples: 5000,
        ..Default::default()
    }
}

fn csv_without_wall(rows: &[ExperimentRow], cfg: &ExperimentConfig) -> String {
    let mut buf = Vec::new();
    write_rows_csv(&mut buf, rows, &Metadata::new(cfg, cfg.global_seed).unwrap()).unwrap();
    String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| if l.starts_with('#') { l.to_string() } else { l.rsplit_once(',').unwrap().0.to_string() })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn exact_power_law_fit() {
    let xs: Vec<f64> = (1..=12).map(|k| 10f64.powf(k as f64 / 4.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 7.0 * x.powf(-1.5)).collect();
    let (m, b, se) = fit_power_law(&xs, &ys).unwrap();
    assert!((m + 1.5).abs() < 1e-12 && (b - 7f64.ln()).abs() < 1e-10 && se < 1e-12);
    let (m, _, _) = fit_power_law(&xs, &vec![0.3; xs.len()]).unwrap();
    assert!(m.abs() < 1e-14);
    assert!(matches!(fit_power_law(&xs[..2], &ys[..2]), Err(ExperimentError::TooFewPoints(2))));
    let mut bad = ys.clone();
    bad[4] = 0.0;
    assert!(matches!(fit_power_law(&xs, &bad), Err(ExperimentError::NonPositive { index: 4, .. })));
}

#[test]
fn power_law_stderr_tracks_noise() {
    // log-normal noise of width s on one decade: stderr = s / sqrt(sum (ln x - mean)^2)
    let s = 0.2;
    let mut rng = krrlab::krr::rng_from(5);
    let mut run = |n: usize| {
        let xs: Vec<f64> = (0..n).map(|k| 10f64.powf(k as f64 / (n - 1) as f64)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.powf(-0.7) * (s * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
        let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let mean = lx.iter().sum::<f64>() / n as f64;
        let sxx: f64 = lx.iter().map(|v| (v - mean).powi(2)).sum();
        let (m, _, se) = fit_power_law(&xs, &ys).unwrap();
        assert!((m + 0.7).abs() < 5.0 * se);
        (se, s / sxx.sqrt())
    };
    let (se_small, th_small) = run(50);
    let (se_large, th_large) = run(800);
    assert!((se_small / th_small - 1.0).abs() < 0.3);
    assert!((se_large / th_large - 1.0).abs() < 0.1);
    let ratio = se_small / se_large;
    assert!(ratio > 3.0 && ratio < 5.3, "{ratio}");
}

#[test]
fn collapse_of_synthetic_curves() {
    let ridges = log_grid(1e-8, 1e-1, 40);
    let g = |u: f64| 1.0 + u.powf(0.6);
    let curves: Vec<Curve> = [500usize, 1000, 2000, 4000]
        .iter()
        .map(|&p| Curve { p, ridges: ridges.clone(), values: ridges.iter().map(|&l| g(l / (p as f64).powf(-0.5) * 1e4)).collect() })
        .collect();
    assert!(collapse_score(&curves, -0.5).unwrap() < 1e-6);
    let same = vec![curves[0].clone(), Curve { p: 500, ..curves[0].clone() }];
    assert_eq!(collapse_score(&same, 0.3).unwrap(), 0.0);
    let (e, _) = best_collapse_exponent(&curves, -1.5, 0.5, 200).unwrap();
    assert!((e + 0.5).abs() < 0.011, "{e}");
    let apart = vec![
        Curve { p: 10, ridges: vec![1.0, 2.0], values: vec![1.0, 1.0] },
        Curve { p: 1000, ridges: vec![1.0, 2.0], values: vec![1.0, 1.0] },
    ];
    assert!(matches!(collapse_score(&apart, 1.0), Err(ExperimentError::NoOverlap)));
}

#[test]
fn replicate_rows_depend_only_on_their_seed() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let cfg = ExperimentConfig { estimators: Estimators { eps_t: true, eps_b: false, eps_k: true, sigma_f: false }, ..small_config(model) };
    let a = ridge_sweep(&cfg, None).unwrap();
    let b = ridge_sweep(&ExperimentConfig { seeds: vec![20], ..cfg.clone() }, None).unwrap();
    let strip = |r: &ExperimentRow| ExperimentRow { wall_ms: 0.0, ..r.clone() };
    let from_a: Vec<ExperimentRow> = a.iter().filter(|r| r.seed == 20).map(strip).collect();
    assert_eq!(from_a, b.iter().map(strip).collect::<Vec<_>>());
    assert!(ExperimentConfig { seeds: vec![3, 3], ..cfg }.validate().is_err());
}

#[test]
fn csv_is_reproducible_and_worker_independent() {
    let model = DataModel::one_d(2.0, 0.0).unwrap();
    let cfg = ExperimentConfig {
        estimators: Estimators { eps_t: true, eps_b: false, eps_k: true, sigma_f: true },
        workers: 1,
        ..small_config(model)
    };
    let serial = ridge_sweep(&cfg, None).unwrap();
    let again = ridge_sweep(&cfg, None).unwrap();
    let parallel = ridge_sweep(&ExperimentConfig { workers: 3, ..cfg.clone() }, None).unwrap();
    let text = csv_without_wall(&serial, &cfg);
    assert_eq!(text, csv_without_wall(&again, &cfg));
    assert_eq!(text, csv_without_wall(&parallel, &cfg));
    assert!(text.lines().any(|l| l == "p,ridge,seed,eps_t,eps_b,eps_k,sigma_f"));
    assert!(serial.iter().all(|r| r.eps_t.map_or(true, |v| v >= 0.0) && r.eps_k.map_or(true, |v| v >= 0.0)));
    // two seed pairs per P, five ridges each
    assert_eq!(serial.iter().filter(|r| r.sigma_f.is_some()).count(), 2 * 2 * 5);
}

#[test]
fn persisted_files_embed_the_config() {
    let dir = std::env::temp_dir().join(format!("krrlab-exp-{}", std::process::id()));
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let cfg = ExperimentConfig { output: Some(dir.join("sweep.csv")), ..small_config(model) };
    let rows = ridge_sweep(&cfg, None).unwrap();
    let (rows_path, summary_path) = persist(&cfg, &rows, &[]).unwrap().unwrap();
    let text = std::fs::read_to_string(&rows_path).unwrap();
    let json = text.lines().find_map(|l| l.strip_prefix("# config ")).unwrap();
    let back: ExperimentConfig = serde_json::from_str(json).unwrap();
    assert_eq!(back, cfg);
    let summary = std::fs::read_to_string(summary_path).unwrap();
    let header = summary.lines().find(|l| !l.starts_with('#')).unwrap();
    for col in ["ridge_over_crossover", "eps_t_rescaled", "eps_b", "sigma_f_mean"] {
        assert!(header.split(',').any(|c| c == col), "{col}");
    }
    assert_eq!(summary.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 5);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn eps_b_requires_a_spectrum() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let cfg = ExperimentConfig { estimators: Estimators { eps_b: true, ..Default::default() }, ..small_config(model) };
    assert!(matches!(ridge_sweep(&cfg, None), Err(ExperimentError::MissingSpectrum)));
}

#[test]
fn learning_curve_exponent_with_target_singularity() {
    // chi = 2: m = 1 - 2 xi / 3
    let ps: Vec<usize> = log_grid(100.0, 5000.0, 9).iter().map(|p| p.round() as usize).collect();
    for &xi in &[0.3, 0.6] {
        let cfg = ExperimentConfig {
            model: DataModel::one_d(2.0, xi).unwrap(),
            p_values: ps.clone(),
            seeds: (0..FIT_REPLICATES as u64).collect(),
            ..Default::default()
        };
        let (m, _, _) = learning_curve_exponent(&learning_curve(&cfg).unwrap()).unwrap();
        assert!((m + 1.0 - 2.0 * xi / 3.0).abs() < 0.1, "xi {xi} slope {m}");
    }
}

#[test]
fn identical_training_sets_have_no_variance() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let s = sample_1d(300, &model, 4).unwrap();
    let test = sample_1d(5000, &model, 5).unwrap();
    let a = fit_1d(&s, 1e-6, 100.0).unwrap();
    let b = fit_1d(&s, 1e-6, 100.0).unwrap();
    assert_eq!(sigma_f(&a, &b, &test), 0.0);
}

#[test]
fn sigma_f_regimes() {
    let model = DataModel::one_d(1.0, 0.0).unwrap();
    let crossover = |p: usize| krrlab::theory::crossover_ridge(p, &model);
    let run = |p: usize, lam: f64| {
        let cfg = ExperimentConfig {
            model,
            p_values: vec![p],
            seeds: (0..40).collect(),
            ridges: RidgeGrid::Absolute { values: vec![lam] },
            test_samples: 100_000,
            ..Default::default()
        };
        let rows = sigma_f_study(&cfg).unwrap();
        rows.iter().map(|r| r.sigma_f.unwrap()).sum::<f64>() / rows.len() as f64
    };
    // at a fixed large ridge the fluctuations decay with P
    let lam = 100.0 * crossover(250);
    let decay = run(4000, lam) / run(250, lam);
    assert!(decay < 0.7, "{decay}");
    // at a fixed multiple of the crossover they collapse
    for ratio in [0.01, 100.0] {
        let r = run(2000, ratio * crossover(2000)) / run(200, ratio * crossover(200));
        assert!(r > 0.5 && r < 2.0, "ratio {ratio}: {r}");
    }
}

#[test]
fn ridge_regime_slope_in_two_dimensions() {
    // eps_t ~ lambda^{(1+chi)/(1+d+chi)} = lambda^{1/2} well above the crossover
    let model = DataModel::new(1.0, 0.0, 100.0, 2, 3.0).unwrap();
    let c = krrlab::theory::crossover_ridge(1000, &model);
    let cfg = ExperimentConfig {
        model,
        p_values: vec![1000],
        seeds: (0..3).collect(),
        ridges: RidgeGrid::Absolute { values: log_grid(30.0 * c, 3000.0 * c, 7) },
        test_samples: 20_000,
        ..Default::default()
    };
    let summary = summarize(&ridge_sweep(&cfg, None).unwrap(), &model);
    let xs: Vec<f64> = summary.iter().map(|s| s.ridge).collect();
    let ys: Vec<f64> = summary.iter().map(|s| s.eps_t_mean.unwrap()).collect();
    let (m, _, _) = fit_power_law(&xs, &ys).unwrap();
    assert!((m - 0.5).abs() < 0.1, "{m}");
}

fn toy() -> &'static str {
    "label,a,b\n1,0.5,2\n-1,-0.25,3.5\n1,1e-3,0\n"
}

#[test]
fn dataset_round_trip() {
    let d = parse_dataset(toy().as_bytes()).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.width(), 2);
    assert_eq!(d.labels(), &[1.0, -1.0, 1.0]);
    assert_eq!(d.coords(), &[0.5, 2.0, -0.25, 3.5, 1e-3, 0.0]);
    let mut buf = Vec::new();
    write_dataset_csv(&mut buf, &d).unwrap();
    let e = parse_dataset(buf.as_slice()).unwrap();
    assert_eq!(e.coords(), d.coords());
    assert_eq!(e.labels(), d.labels());
}

#[test]
fn dataset_errors_carry_the_row() {
    match parse_dataset("1,0.5\n-1,0.2\n0,0.1\n".as_bytes()) {
        Err(ExperimentError::Dataset { row: 2, reason }) => assert!(reason.contains("label")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_dataset("1,0.5,1\n-1,0.2\n".as_bytes()), Err(ExperimentError::Dataset { row: 1, .. })));
    assert!(matches!(parse_dataset("# nothing\n\n".as_bytes()), Err(ExperimentError::EmptyDataset)));
    let missing = load_dataset_csv(std::path::Path::new("/nonexistent/krrlab.csv"));
    assert!(matches!(missing, Err(ExperimentError::Io(_))));
}

fn stand_in(n: usize) -> SampleSet {
    let model = DataModel::new(1.0, 0.0, 100.0, 2, 3.0).unwrap();
    krrlab::distributions::sample_cylinder(n, &model, 77).unwrap()
}

#[test]
fn dataset_sweep_ignores_row_order_and_splits() {
    let data = stand_in(400);
    let cfg = DatasetConfig { ridges: vec![1e-6, 1e-2], seeds: vec![1, 2], ..Default::default() };
    let a = dataset_sweep(&data, &cfg).unwrap();
    let mut idx: Vec<usize> = (0..data.len()).rev().collect();
    idx.swap(3, 200);
    let b = dataset_sweep(&data.select(&idx), &cfg).unwrap();
    let key = |r: &ExperimentRow| (r.p, r.seed, r.ridge.to_bits(), r.eps_t.unwrap().to_bits(), r.eps_k.unwrap().to_bits());
    assert_eq!(a.iter().map(key).collect::<Vec<_>>(), b.iter().map(key).collect::<Vec<_>>());
    // 80 held out, 320 for training
    assert!(a.iter().all(|r| r.p == 320));
    // the training split cannot hold two disjoint sets of 320
    assert!(a.iter().all(|r| r.sigma_f.is_none()));
    let c = dataset_sweep(&data, &DatasetConfig { p_values: vec![100], ..cfg }).unwrap();
    assert!(c.iter().all(|r| r.sigma_f.is_some()));
}

#[test]
fn dataset_sweep_regimes_on_stand_in_data() {
    // large ridge: KARE tracks the held-out error; small ridge: the error plateaus
    let data = stand_in(1500);
    let ridges = log_grid(1e-7, 1e1, 9);
    let cfg = DatasetConfig { ridges: ridges.clone(), seeds: (0..3).collect(), ..Default::default() };
    let rows = dataset_sweep(&data, &cfg).unwrap();
    let t = mean_by(&rows, |r| r.ridge.to_bits(), |r| r.eps_t);
    let k = mean_by(&rows, |r| r.ridge.to_bits(), |r| r.eps_k);
    let at = |v: &[(u64, f64)], lam: f64| v.iter().find(|(b, _)| *b == lam.to_bits()).unwrap().1;
    for &lam in &ridges[7..] {
        let (et, ek) = (at(&t, lam), at(&k, lam));
        assert!((et - ek).abs() / et < 0.3, "lambda {lam}: {et} vs {ek}");
    }
    let plateau = at(&t, ridges[0]) / at(&t, ridges[2]);
    assert!(plateau > 0.8 && plateau < 1.25, "{plateau}");
}

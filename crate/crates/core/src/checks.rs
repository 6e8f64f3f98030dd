//! Fast invariant checks shared by the `selftest` command and the acceptance suite.

use serde::Serialize;

use crate::distributions::{sample_1d, DataModel};
use crate::experiments::{ridge_sweep, write_rows_csv, Estimators, ExperimentConfig, Metadata, RidgeGrid};
use crate::krr::{analytic_segment, fit, fit_1d, gram};
use crate::spectral::{eigenpair_ode, eigenvalues_gram, gram_quadrature, mode_of, verify_eigenpair, OdeOptions, Parity, Provenance, Spectrum, SpectrumEntry};
use crate::specialfn::airy;
use crate::theory::replica_error;

/// Outcome of one check: the worst observed value against its threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub worst: f64,
    pub threshold: f64,
}

impl Check {
    fn below(name: &'static str, worst: f64, threshold: f64) -> Self {
        Self { name, passed: worst.is_finite() && worst < threshold, worst, threshold }
    }

    fn failed(name: &'static str, threshold: f64) -> Self {
        Self { name, passed: false, worst: f64::NAN, threshold }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: worst {:.3e} (threshold {:.1e})", self.name, self.worst, self.threshold)
    }
}

/// `|pi W(Ai, Bi) - 1|` on `n` points of `[-20, 10]`.
pub fn airy_wronskian(n: usize) -> Check {
    let mut worst = 0.0f64;
    for k in 0..n {
        let x = -20.0 + 30.0 * k as f64 / (n - 1).max(1) as f64;
        match airy(x) {
            Ok(a) => worst = worst.max((std::f64::consts::PI * a.wronskian() - 1.0).abs()),
            Err(_) => return Check::failed("airy Wronskian", 1e-10),
        }
    }
    Check::below("airy Wronskian", worst, 1e-10)
}

/// Training residual at the ridge floor, chain and dense solvers.
pub fn interpolation_residual() -> Check {
    let model = DataModel::one_d(1.0, 0.0).expect("model");
    let run = || -> Option<f64> {
        let s = sample_1d(400, &model, 11).ok()?;
        let chain = fit_1d(&s, 0.0, model.sigma).ok()?;
        let dense = fit(&gram(&s, model.sigma), s.labels(), 0.0).ok()?;
        let mut worst = 0.0f64;
        for i in 0..s.len() {
            let y = s.labels()[i];
            worst = worst.max((chain.predict(s.point(i)) - y).abs()).max((dense.predict_direct(s.point(i)) - y).abs());
        }
        Some(worst)
    };
    run().map_or(Check::failed("KRR interpolation residual", 1e-6), |w| Check::below("KRR interpolation residual", w, 1e-6))
}

/// Chain predictor against the closed-form segment solution between neighbours.
pub fn analytic_segments() -> Check {
    let mut worst = 0.0f64;
    for &(chi, xi, sigma) in &[(1.0, 0.0, 100.0), (2.0, 0.5, 100.0), (0.5, 0.3, 2.0)] {
        let model = DataModel::one_d(chi, xi).expect("model");
        let Ok(s) = sample_1d(120, &model, 5) else { return Check::failed("analytic segment agreement", 1e-8) };
        let Ok(pred) = fit_1d(&s, 0.0, sigma) else { return Check::failed("analytic segment agreement", 1e-8) };
        let mut xs = s.first_coordinates();
        xs.sort_by(f64::total_cmp);
        for w in xs.windows(2) {
            let Ok((a, b)) = analytic_segment(w[0], w[1] - w[0], xi, sigma) else {
                return Check::failed("analytic segment agreement", 1e-8);
            };
            let scale = w[0].abs().powf(-xi);
            for k in 1..4 {
                let x = w[0] + (w[1] - w[0]) * k as f64 / 4.0;
                let u = (x - w[0]) / sigma;
                worst = worst.max((pred.predict_1d(x) - scale * (a * u.exp() + b * (-u).exp())).abs());
            }
        }
    }
    Check::below("analytic segment agreement", worst, 1e-8)
}

/// Largest eigenpair residual over ranks `1..=max_rank`, seeded from a Nyström
/// grid of `half_size` nodes per half-line.
pub fn eigenpair_residuals(max_rank: usize, half_size: usize) -> Check {
    let model = DataModel::one_d(1.0, 0.0).expect("model");
    let g = gram_quadrature(&model, half_size);
    let Ok(s) = eigenvalues_gram(&g.nodes, &g.weights, &model) else { return Check::failed("eigenpair residual", 1e-3) };
    let ode = OdeOptions::default();
    let mut worst = 0.0f64;
    for rank in 1..=max_rank.min(s.len()) {
        let (p, mode) = mode_of(rank);
        match eigenpair_ode(&model, p, mode, s.entries[rank - 1].eigenvalue, &ode) {
            Ok(f) if f.zero_count == mode => worst = worst.max(verify_eigenpair(&f, f.lambda, &model)),
            _ => return Check::failed("eigenpair residual", 1e-3),
        }
    }
    Check::below("eigenpair residual", worst, 1e-3)
}

/// Replica error at `P = 0` and at a huge ridge, where it equals `sum c^2`.
pub fn replica_limits() -> Check {
    let model = DataModel::one_d(1.0, 0.0).expect("model");
    let entries = (1..=2000)
        .map(|rank| {
            let (parity, _) = mode_of(rank);
            let r = rank as f64;
            let c = if parity == Parity::Odd { r.powf(-7.0 / 6.0) } else { 0.0 };
            SpectrumEntry { rank, eigenvalue: 1e-2 / (r * r), parity, coefficient: Some(c), provenance: Provenance::Extrapolated }
        })
        .collect();
    let s = Spectrum { entries, model };
    let total: f64 = s.coefficients_sq().iter().sum();
    let mut worst = 0.0f64;
    for (p, lam) in [(0usize, 1e-3), (0, 1.0), (100, 1e30), (10_000, 1e30)] {
        match replica_error(&s, p, lam) {
            Ok(e) => worst = worst.max((e.epsilon_b / total - 1.0).abs()),
            Err(_) => return Check::failed("replica limits", 1e-12),
        }
    }
    Check::below("replica limits", worst, 1e-12)
}

/// Two runs of a small sweep give byte-identical CSV apart from `wall_ms`.
pub fn determinism() -> Check {
    let model = DataModel::one_d(1.0, 0.0).expect("model");
    let cfg = ExperimentConfig {
        model,
        p_values: vec![50, 200],
        seeds: vec![1, 2, 3, 4],
        ridges: RidgeGrid::AroundCrossover { points: 4, decades: 4.0 },
        estimators: Estimators { eps_t: true, eps_b: false, eps_k: true, sigma_f: true },
        resolution_scale: 0.05,
        test_samples: 2000,
        ..Default::default()
    };
    let render = || -> Option<String> {
        let rows = ridge_sweep(&cfg, None).ok()?;
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &rows, &Metadata::new(&cfg, cfg.global_seed).ok()?).ok()?;
        let text = String::from_utf8(buf).ok()?;
        Some(text.lines().map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a).to_string()).collect::<Vec<_>>().join("\n"))
    };
    match (render(), render()) {
        (Some(a), Some(b)) => Check::below("determinism", if a == b { 0.0 } else { 1.0 }, 0.5),
        _ => Check::failed("determinism", 0.5),
    }
}

/// Every check, with the eigenpair check on `half_size` Nyström nodes.
pub fn all(half_size: usize) -> Vec<Check> {
    vec![
        airy_wronskian(1000),
        interpolation_residual(),
        analytic_segments(),
        eigenpair_residuals(200, half_size),
        replica_limits(),
        determinism(),
    ]
}

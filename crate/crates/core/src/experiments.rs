//! Learning curves, ridge sweeps, variance studies and exponent fits, with
//! CSV persistence.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use faer::{Mat, Side};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{build_test_grid, sample_cylinder, DataModel, GridOptions, ModelError, SampleSet};
use crate::krr::{
    effective_ridge, fit, gram, kare, laplace, predict_set, rng_from, sigma_f_values, test_error, ChainFactor, KrrError,
    TestSpec, RIDGE_FLOOR,
};
use crate::spectral::Spectrum;
use crate::theory::{crossover_ridge, replica_error, scaling_laws, TheoryError};

/// Replicates per point for `eps_t` and `eps_K` in ridge sweeps.
pub const SWEEP_REPLICATES: usize = 200;
/// Predictor pairs per point for `sigma_f`.
pub const SIGMA_F_PAIRS: usize = 50;
/// Replicates per point for exponent fits.
pub const FIT_REPLICATES: usize = 20;
/// Monte Carlo test points for `d >= 2` and for `sigma_f`.
pub const DEFAULT_TEST_SAMPLES: usize = 100_000;
/// Fraction of an external dataset held out for testing.
pub const DEFAULT_HOLDOUT: f64 = 0.2;
/// Row cap for external datasets.
pub const MAX_DATASET_ROWS: usize = 10_000;
/// Largest training set accepted by default.
pub const DEFAULT_MAX_P: usize = 20_000;

const TEST_STREAM: u64 = 0x7465_7374;
const PAIR_STREAM: u64 = 0x7061_6972;
const SPLIT_STREAM: u64 = 0x7370_6c74;
const PREDICT_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Krr(#[from] KrrError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("eps_B requested but no spectrum was supplied")]
    MissingSpectrum,
    #[error("power-law fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("power-law fit needs positive data; point {index} is ({x}, {y})")]
    NonPositive { index: usize, x: f64, y: f64 },
    #[error("collapse needs at least two curves with overlapping rescaled support")]
    NoOverlap,
    #[error("dataset row {row}: {reason}")]
    Dataset { row: usize, reason: String },
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which estimators a run evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Estimators {
    pub eps_t: bool,
    pub eps_b: bool,
    pub eps_k: bool,
    pub sigma_f: bool,
}

impl Default for Estimators {
    fn default() -> Self {
        Self { eps_t: true, eps_b: false, eps_k: false, sigma_f: false }
    }
}

/// Ridge values visited for each training set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RidgeGrid {
    /// The ridge floor only.
    Ridgeless,
    /// Values of `lambda / P`; zero stands for the floor.
    PerP { ratios: Vec<f64> },
    /// The same absolute ridges for every `P`.
    Absolute { values: Vec<f64> },
    /// `points` logarithmic values spanning `decades` centred on `lambda*(P)`.
    AroundCrossover { points: usize, decades: f64 },
}

impl Default for RidgeGrid {
    fn default() -> Self {
        RidgeGrid::AroundCrossover { points: 20, decades: 6.0 }
    }
}

impl RidgeGrid {
    pub fn values(&self, p: usize, model: &DataModel) -> Vec<f64> {
        match self {
            RidgeGrid::Ridgeless => vec![RIDGE_FLOOR],
            RidgeGrid::PerP { ratios } => ratios.iter().map(|&r| (r * p as f64).max(RIDGE_FLOOR)).collect(),
            RidgeGrid::Absolute { values } => values.iter().map(|&v| v.max(RIDGE_FLOOR)).collect(),
            RidgeGrid::AroundCrossover { points, decades } => {
                let c = crossover_ridge(p, model);
                log_grid(c * 10f64.powf(-decades / 2.0), c * 10f64.powf(decades / 2.0), *points)
            }
        }
    }

    fn check(&self) -> Result<(), ExperimentError> {
        let bad = |v: &f64| !(v.is_finite() && *v >= 0.0);
        match self {
            RidgeGrid::Ridgeless => Ok(()),
            RidgeGrid::PerP { ratios: v } | RidgeGrid::Absolute { values: v } => {
                if v.is_empty() || v.iter().any(bad) {
                    Err(ExperimentError::Config("ridge values must be a nonempty list of nonnegative numbers".into()))
                } else {
                    Ok(())
                }
            }
            RidgeGrid::AroundCrossover { points, decades } => {
                if *points == 0 || !(decades.is_finite() && *decades >= 0.0) {
                    Err(ExperimentError::Config("crossover grid needs points >= 1 and finite decades".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// `n` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// Replicate count after dividing a reference count by `divisor`, at least 2.
pub fn scaled_replicates(reference: usize, divisor: usize) -> usize {
    (reference / divisor.max(1)).max(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: DataModel,
    pub p_values: Vec<usize>,
    pub ridges: RidgeGrid,
    /// Replicate identifiers; each one names an independent training set.
    pub seeds: Vec<u64>,
    pub global_seed: u64,
    pub estimators: Estimators,
    /// Point-count multiplier of the one-dimensional test grid.
    pub resolution_scale: f64,
    /// Cap on the nodes per half-line of the one-dimensional test grid.
    pub grid_max_points: Option<usize>,
    /// Monte Carlo test points for `d >= 2` and for `sigma_f`.
    pub test_samples: usize,
    pub max_p: usize,
    /// Worker threads; zero uses every core.
    pub workers: usize,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: DataModel::one_d(1.0, 0.0).expect("default model"),
            p_values: vec![100, 200, 500, 1000, 2000, 5000, 10_000],
            ridges: RidgeGrid::default(),
            seeds: (0..FIT_REPLICATES as u64).collect(),
            global_seed: 0,
            estimators: Estimators::default(),
            resolution_scale: 1.0,
            grid_max_points: None,
            test_samples: DEFAULT_TEST_SAMPLES,
            max_p: DEFAULT_MAX_P,
            workers: 0,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate()?;
        if self.p_values.is_empty() || self.p_values.contains(&0) {
            return Err(ExperimentError::Config("p_values must be a nonempty list of positive sizes".into()));
        }
        if let Some(&p) = self.p_values.iter().find(|&&p| p > self.max_p) {
            return Err(ExperimentError::Config(format!("P = {p} exceeds max_p = {}", self.max_p)));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("no seeds".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(ExperimentError::Config("seeds must be distinct".into()));
        }
        if !(self.resolution_scale > 0.0 && self.resolution_scale.is_finite()) {
            return Err(ExperimentError::Config("resolution_scale must be positive".into()));
        }
        if self.test_samples < crate::krr::MIN_MC_SAMPLES {
            return Err(ExperimentError::Config(format!("test_samples must be at least {}", crate::krr::MIN_MC_SAMPLES)));
        }
        self.ridges.check()
    }
}

/// One measurement; absent estimators are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub p: usize,
    pub ridge: f64,
    pub seed: u64,
    pub eps_t: Option<f64>,
    pub eps_b: Option<f64>,
    pub eps_k: Option<f64>,
    pub sigma_f: Option<f64>,
    pub wall_ms: f64,
}

impl ExperimentRow {
    fn empty(p: usize, ridge: f64, seed: u64) -> Self {
        Self { p, ridge, seed, eps_t: None, eps_b: None, eps_k: None, sigma_f: None, wall_ms: 0.0 }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random stream for a task, mixed from the global seed and task labels.
pub fn stream_seed(global: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(splitmix(global), |z, &l| splitmix(z ^ splitmix(l)))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, ExperimentError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Config(format!("worker pool: {e}")))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Eigendecomposition of a Gram matrix, reused across ridges.
struct DenseSolver {
    u: Mat<f64>,
    s: Vec<f64>,
    uty: Vec<f64>,
}

impl DenseSolver {
    fn new(g: &crate::krr::GramMatrix, labels: &[f64]) -> Result<Self, ExperimentError> {
        let e = g.entries.self_adjoint_eigen(Side::Lower).map_err(|e| ExperimentError::Eigen(format!("{e:?}")))?;
        let n = g.size();
        let u = e.U().to_owned();
        let s: Vec<f64> = (0..n).map(|i| e.S().column_vector()[i].max(0.0)).collect();
        let y = Mat::from_fn(n, 1, |i, _| labels[i]);
        let uty_m = u.transpose() * &y;
        let uty = (0..n).map(|i| uty_m[(i, 0)]).collect();
        Ok(Self { u, s, uty })
    }

    fn alpha(&self, lam: f64) -> Vec<f64> {
        let n = self.s.len();
        let g = Mat::from_fn(n, 1, |i, _| self.uty[i] / (self.s[i] + lam));
        let a = &self.u * &g;
        (0..n).map(|i| a[(i, 0)]).collect()
    }

    fn kare(&self, lam: f64) -> f64 {
        let n = self.s.len() as f64;
        let num: f64 = self.s.iter().zip(&self.uty).map(|(&s, &v)| (v / (s + lam)).powi(2)).sum::<f64>() / n;
        let tr: f64 = self.s.iter().map(|&s| 1.0 / (s + lam)).sum::<f64>() / n;
        num / (tr * tr)
    }
}

/// Predictions of several dual vectors sharing the training points, evaluated
/// chunk by chunk through the test kernel matrix.
fn dense_predictions(points: &SampleSet, sigma: f64, alphas: &[Vec<f64>], test: &SampleSet) -> Vec<Vec<f64>> {
    let n = points.len();
    let a = Mat::from_fn(n, alphas.len(), |i, j| alphas[j][i]);
    let mut out = vec![Vec::with_capacity(test.len()); alphas.len()];
    let mut start = 0;
    while start < test.len() {
        let end = (start + PREDICT_CHUNK).min(test.len());
        let k = Mat::from_fn(end - start, n, |r, c| {
            let x = test.point(start + r);
            let y = points.point(c);
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            laplace(d2.sqrt(), sigma)
        });
        let f = &k * &a;
        for (j, col) in out.iter_mut().enumerate() {
            col.extend((0..end - start).map(|r| f[(r, j)]));
        }
        start = end;
    }
    out
}

fn mean_sq(pred: &[f64], labels: &[f64]) -> f64 {
    pred.iter().zip(labels).map(|(f, y)| (f - y) * (f - y)).sum::<f64>() / pred.len() as f64
}

/// Training sample of replicate `seed` at size index `p_index`.
fn training_set(cfg: &ExperimentConfig, p_index: usize, seed: u64) -> Result<SampleSet, ExperimentError> {
    let p = cfg.p_values[p_index];
    Ok(sample_cylinder(p, &cfg.model, stream_seed(cfg.global_seed, &[p_index as u64, seed]))?)
}

fn replicate_rows(cfg: &ExperimentConfig, p_index: usize, seed: u64, ridges: &[f64]) -> Result<Vec<ExperimentRow>, ExperimentError> {
    let p = cfg.p_values[p_index];
    let est = cfg.estimators;
    let sample = training_set(cfg, p_index, seed)?;
    let mut rows = Vec::with_capacity(ridges.len());
    let model = &cfg.model;
    if model.dim == 1 {
        let factor = ChainFactor::new(&sample, model.sigma)?;
        let grid_opts = GridOptions { resolution_scale: cfg.resolution_scale, max_points: cfg.grid_max_points };
        for &lam in ridges {
            let t = Instant::now();
            let mut row = ExperimentRow::empty(p, lam, seed);
            let pred = factor.fit(&sample, lam)?;
            if est.eps_t {
                let grid = build_test_grid(&pred, model, &grid_opts)?;
                row.eps_t = Some(test_error(&pred, model, TestSpec::Grid(&grid))?);
            }
            if est.eps_k {
                let n = p as f64;
                let num = pred.alpha.iter().map(|a| a * a).sum::<f64>() / n;
                let tr = factor.trace_inverse(pred.ridge) / n;
                row.eps_k = Some(num / (tr * tr));
            }
            row.wall_ms = ms(t);
            rows.push(row);
        }
        return Ok(rows);
    }
    if !(est.eps_t || est.eps_k) {
        return Ok(ridges.iter().map(|&lam| ExperimentRow::empty(p, lam, seed)).collect());
    }
    let t0 = Instant::now();
    let g = gram(&sample, model.sigma);
    let test = if est.eps_t {
        Some(sample_cylinder(cfg.test_samples, model, stream_seed(cfg.global_seed, &[TEST_STREAM, p_index as u64, seed]))?)
    } else {
        None
    };
    if ridges.len() == 1 {
        let lam = ridges[0];
        let mut row = ExperimentRow::empty(p, lam, seed);
        if est.eps_t {
            let pred = fit(&g, sample.labels(), lam)?;
            let test = test.as_ref().unwrap();
            row.eps_t = Some(mean_sq(&dense_predictions(&sample, model.sigma, &[pred.alpha], test)[0], test.labels()));
        }
        if est.eps_k {
            row.eps_k = Some(kare(&g, sample.labels(), effective_ridge(lam)?)?);
        }
        row.wall_ms = ms(t0);
        return Ok(vec![row]);
    }
    let solver = DenseSolver::new(&g, sample.labels())?;
    let setup = ms(t0) / ridges.len() as f64;
    let lams: Vec<f64> = ridges.iter().map(|&l| effective_ridge(l)).collect::<Result<_, _>>()?;
    let t1 = Instant::now();
    let preds = match &test {
        Some(test) => {
            let alphas: Vec<Vec<f64>> = lams.iter().map(|&l| solver.alpha(l)).collect();
            Some(dense_predictions(&sample, model.sigma, &alphas, test))
        }
        None => None,
    };
    let eval = ms(t1) / ridges.len() as f64;
    for (j, &lam) in ridges.iter().enumerate() {
        let t = Instant::now();
        let mut row = ExperimentRow::empty(p, lam, seed);
        if let (Some(preds), Some(test)) = (&preds, &test) {
            row.eps_t = Some(mean_sq(&preds[j], test.labels()));
        }
        if est.eps_k {
            row.eps_k = Some(solver.kare(lams[j]));
        }
        row.wall_ms = setup + eval + ms(t);
        rows.push(row);
    }
    Ok(rows)
}

/// Predictions of a fitted sample at every ridge on a shared test set.
fn predictions_all_ridges(sample: &SampleSet, model: &DataModel, ridges: &[f64], test: &SampleSet) -> Result<Vec<Vec<f64>>, ExperimentError> {
    if sample.width() == 1 {
        let factor = ChainFactor::new(sample, model.sigma)?;
        return ridges
            .iter()
            .map(|&lam| Ok(predict_set(&factor.fit(sample, lam)?, test)))
            .collect();
    }
    let g = gram(sample, model.sigma);
    if ridges.len() == 1 {
        let pred = fit(&g, sample.labels(), ridges[0])?;
        return Ok(dense_predictions(sample, model.sigma, &[pred.alpha], test));
    }
    let solver = DenseSolver::new(&g, sample.labels())?;
    let alphas: Vec<Vec<f64>> = ridges.iter().map(|&l| effective_ridge(l).map(|l| solver.alpha(l))).collect::<Result<_, _>>()?;
    Ok(dense_predictions(sample, model.sigma, &alphas, test))
}

fn pair_rows(cfg: &ExperimentConfig, p_index: usize, pair: (u64, u64), ridges: &[f64]) -> Result<Vec<ExperimentRow>, ExperimentError> {
    let p = cfg.p_values[p_index];
    let t = Instant::now();
    let test = sample_cylinder(cfg.test_samples, &cfg.model, stream_seed(cfg.global_seed, &[PAIR_STREAM, p_index as u64]))?;
    let a = predictions_all_ridges(&training_set(cfg, p_index, pair.0)?, &cfg.model, ridges, &test)?;
    let b = predictions_all_ridges(&training_set(cfg, p_index, pair.1)?, &cfg.model, ridges, &test)?;
    let per = ms(t) / ridges.len() as f64;
    Ok(ridges
        .iter()
        .enumerate()
        .map(|(j, &lam)| ExperimentRow { sigma_f: Some(sigma_f_values(&a[j], &b[j])), wall_ms: per, ..ExperimentRow::empty(p, lam, pair.0) })
        .collect())
}

/// Consecutive disjoint seed pairs, at most [`SIGMA_F_PAIRS`] in a ridge sweep.
fn seed_pairs(seeds: &[u64], cap: Option<usize>) -> Vec<(u64, u64)> {
    let n = seeds.len() / 2;
    let n = cap.map_or(n, |c| n.min(c));
    (0..n).map(|k| (seeds[2 * k], seeds[2 * k + 1])).collect()
}

#[derive(Clone, Copy)]
enum Job {
    Replicate { p_index: usize, rep: usize },
    Pair { p_index: usize, pair: usize },
}

fn run_jobs(
    cfg: &ExperimentConfig,
    ridges: &[Vec<f64>],
    pairs: &[(u64, u64)],
    jobs: Vec<Job>,
) -> Result<Vec<ExperimentRow>, ExperimentError> {
    let results: Vec<Result<(usize, usize, usize, Vec<ExperimentRow>), ExperimentError>> = pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|&job| match job {
                Job::Replicate { p_index, rep } => {
                    replicate_rows(cfg, p_index, cfg.seeds[rep], &ridges[p_index]).map(|r| (p_index, 0, rep, r))
                }
                Job::Pair { p_index, pair } => pair_rows(cfg, p_index, pairs[pair], &ridges[p_index]).map(|r| (p_index, 1, pair, r)),
            })
            .collect()
    });
    let mut keyed = Vec::new();
    for r in results {
        let (p_index, kind, k, rows) = r?;
        for (j, row) in rows.into_iter().enumerate() {
            keyed.push(((p_index, j, kind, k), row));
        }
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(keyed.into_iter().map(|(_, r)| r).collect())
}

fn attach_replica(cfg: &ExperimentConfig, rows: &mut [ExperimentRow], spectrum: Option<&Spectrum>) -> Result<(), ExperimentError> {
    if !cfg.estimators.eps_b {
        return Ok(());
    }
    let spectrum = spectrum.ok_or(ExperimentError::MissingSpectrum)?;
    let mut cache: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    for row in rows.iter_mut().filter(|r| r.sigma_f.is_none()) {
        let key = (row.p, row.ridge.to_bits());
        let v = match cache.get(&key) {
            Some(&v) => v,
            None => {
                let v = replica_error(spectrum, row.p, row.ridge)?.corrected();
                cache.insert(key, v);
                v
            }
        };
        row.eps_b = Some(v);
    }
    Ok(())
}

/// Ridgeless test error for every `(P, seed)`.
pub fn learning_curve(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>, ExperimentError> {
    let cfg = ExperimentConfig {
        ridges: RidgeGrid::Ridgeless,
        estimators: Estimators { eps_t: true, eps_b: false, eps_k: false, sigma_f: false },
        ..cfg.clone()
    };
    cfg.validate()?;
    let ridges: Vec<Vec<f64>> = cfg.p_values.iter().map(|_| vec![RIDGE_FLOOR]).collect();
    let jobs = (0..cfg.p_values.len())
        .flat_map(|p_index| (0..cfg.seeds.len()).map(move |rep| Job::Replicate { p_index, rep }))
        .collect();
    run_jobs(&cfg, &ridges, &[], jobs)
}

/// Grid over `(P, lambda, seed)` with every requested estimator. `eps_B`
/// comes from `spectrum`, is the same for every seed and is attached to the
/// per-replicate rows; `sigma_f` rows come from disjoint seed pairs.
pub fn ridge_sweep(cfg: &ExperimentConfig, spectrum: Option<&Spectrum>) -> Result<Vec<ExperimentRow>, ExperimentError> {
    cfg.validate()?;
    let est = cfg.estimators;
    let ridges: Vec<Vec<f64>> = cfg.p_values.iter().map(|&p| cfg.ridges.values(p, &cfg.model)).collect();
    let pairs = if est.sigma_f { seed_pairs(&cfg.seeds, Some(SIGMA_F_PAIRS)) } else { Vec::new() };
    let mut jobs = Vec::new();
    for p_index in 0..cfg.p_values.len() {
        if est.eps_t || est.eps_k || est.eps_b {
            jobs.extend((0..cfg.seeds.len()).map(|rep| Job::Replicate { p_index, rep }));
        }
        jobs.extend((0..pairs.len()).map(|pair| Job::Pair { p_index, pair }));
    }
    let mut rows = run_jobs(cfg, &ridges, &pairs, jobs)?;
    attach_replica(cfg, &mut rows, spectrum)?;
    Ok(rows)
}

/// `sigma_f` for every `(P, lambda)` from disjoint seed pairs evaluated on a
/// test sample shared by all pairs at that `P`.
pub fn sigma_f_study(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>, ExperimentError> {
    cfg.validate()?;
    let pairs = seed_pairs(&cfg.seeds, None);
    if pairs.is_empty() {
        return Err(ExperimentError::Config("sigma_f needs at least two seeds".into()));
    }
    let ridges: Vec<Vec<f64>> = cfg.p_values.iter().map(|&p| cfg.ridges.values(p, &cfg.model)).collect();
    let jobs = (0..cfg.p_values.len())
        .flat_map(|p_index| (0..pairs.len()).map(move |pair| Job::Pair { p_index, pair }))
        .collect();
    run_jobs(cfg, &ridges, &pairs, jobs)
}

/// Least squares on `(ln x, ln y)`: `(slope, ln intercept, slope stderr)`.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64), ExperimentError> {
    let n = xs.len().min(ys.len());
    if n < 3 {
        return Err(ExperimentError::TooFewPoints(n));
    }
    for (index, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        if !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()) {
            return Err(ExperimentError::NonPositive { index, x, y });
        }
    }
    let lx: Vec<f64> = xs[..n].iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys[..n].iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(ExperimentError::Config("all abscissae are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = (rss / (n as f64 - 2.0) / sxx).sqrt();
    Ok((slope, intercept, stderr))
}

/// A curve `lambda -> value` measured at one training set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub p: usize,
    pub ridges: Vec<f64>,
    pub values: Vec<f64>,
}

fn log_interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&v| v < x).clamp(1, xs.len() - 1);
    let t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    ys[k - 1] + t * (ys[k] - ys[k - 1])
}

/// Mean pairwise squared distance of `ln value` between curves drawn against
/// `ln(lambda / P^exponent)`, on 64 points of each pair's common support.
pub fn collapse_score(curves: &[Curve], exponent: f64) -> Result<f64, ExperimentError> {
    let logs: Vec<(Vec<f64>, Vec<f64>)> = curves
        .iter()
        .filter(|c| c.ridges.len() >= 2)
        .map(|c| {
            let shift = exponent * (c.p as f64).ln();
            let mut pts: Vec<(f64, f64)> = c
                .ridges
                .iter()
                .zip(&c.values)
                .filter(|(r, v)| **r > 0.0 && **v > 0.0)
                .map(|(r, v)| (r.ln() - shift, v.ln()))
                .collect();
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
            pts.into_iter().unzip()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..logs.len() {
        for j in i + 1..logs.len() {
            let (xa, ya) = &logs[i];
            let (xb, yb) = &logs[j];
            if xa.len() < 2 || xb.len() < 2 {
                continue;
            }
            let lo = xa[0].max(xb[0]);
            let hi = xa[xa.len() - 1].min(xb[xb.len() - 1]);
            if !(hi > lo) {
                continue;
            }
            let m = 64;
            let s: f64 = (0..m)
                .map(|k| {
                    let x = lo + (hi - lo) * k as f64 / (m - 1) as f64;
                    (log_interp(xa, ya, x) - log_interp(xb, yb, x)).powi(2)
                })
                .sum();
            total += s / m as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(ExperimentError::NoOverlap);
    }
    Ok(total / pairs as f64)
}

/// Trial exponent in `[lo, hi]` (`steps` equal intervals) with the lowest
/// collapse score.
pub fn best_collapse_exponent(curves: &[Curve], lo: f64, hi: f64, steps: usize) -> Result<(f64, f64), ExperimentError> {
    let mut best: Option<(f64, f64)> = None;
    for k in 0..=steps {
        let e = lo + (hi - lo) * k as f64 / steps.max(1) as f64;
        if let Ok(s) = collapse_score(curves, e) {
            if best.map_or(true, |(_, b)| s < b) {
                best = Some((e, s));
            }
        }
    }
    best.ok_or(ExperimentError::NoOverlap)
}

/// Seed-averaged estimators at one `(P, lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub p: usize,
    pub ridge: f64,
    pub ridge_over_p: f64,
    /// `lambda / lambda*(P)`.
    pub ridge_over_crossover: f64,
    pub replicates: usize,
    pub eps_t_mean: Option<f64>,
    pub eps_t_stderr: Option<f64>,
    /// `eps_t P^{-m}` with `m` the ridgeless test-error exponent.
    pub eps_t_rescaled: Option<f64>,
    pub eps_b: Option<f64>,
    pub eps_k_mean: Option<f64>,
    pub eps_k_stderr: Option<f64>,
    pub sigma_f_mean: Option<f64>,
    pub sigma_f_stderr: Option<f64>,
    pub sigma_f_pairs: usize,
}

fn mean_stderr(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (Some(m), None);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(m), Some((var / n).sqrt()))
}

/// Aggregates rows per `(P, lambda)`, in ascending order of both.
pub fn summarize(rows: &[ExperimentRow], model: &DataModel) -> Vec<SummaryRow> {
    let m = scaling_laws(model.chi, model.xi, model.dim).ok().map(|t| t.test_error.value);
    let mut groups: BTreeMap<(usize, u64), Vec<&ExperimentRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.p, r.ridge.to_bits())).or_default().push(r);
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((p, bits), rs)| {
            let ridge = f64::from_bits(bits);
            let pick = |f: fn(&ExperimentRow) -> Option<f64>| rs.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
            let t = pick(|r| r.eps_t);
            let k = pick(|r| r.eps_k);
            let s = pick(|r| r.sigma_f);
            let b = pick(|r| r.eps_b);
            let (eps_t_mean, eps_t_stderr) = mean_stderr(&t);
            let (eps_k_mean, eps_k_stderr) = mean_stderr(&k);
            let (sigma_f_mean, sigma_f_stderr) = mean_stderr(&s);
            SummaryRow {
                p,
                ridge,
                ridge_over_p: ridge / p as f64,
                ridge_over_crossover: ridge / crossover_ridge(p, model),
                replicates: t.len().max(k.len()),
                eps_t_mean,
                eps_t_stderr,
                eps_t_rescaled: eps_t_mean.zip(m).map(|(e, m)| e * (p as f64).powf(-m)),
                eps_b: b.first().copied(),
                eps_k_mean,
                eps_k_stderr,
                sigma_f_mean,
                sigma_f_stderr,
                sigma_f_pairs: s.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| (a.p, a.ridge).partial_cmp(&(b.p, b.ridge)).unwrap_or(Ordering::Equal));
    out
}

/// Curves of `eps_t P^{-m}` against `lambda`, one per `P`, for collapse tests.
pub fn rescaled_curves(summary: &[SummaryRow]) -> Vec<Curve> {
    let mut by_p: BTreeMap<usize, Curve> = BTreeMap::new();
    for s in summary {
        if let Some(v) = s.eps_t_rescaled {
            let c = by_p.entry(s.p).or_insert_with(|| Curve { p: s.p, ridges: Vec::new(), values: Vec::new() });
            c.ridges.push(s.ridge);
            c.values.push(v);
        }
    }
    by_p.into_values().collect()
}

/// Rows averaged over seeds into `(P or lambda, mean)` pairs selected by `key`.
pub fn mean_by<K: Ord + Copy>(rows: &[ExperimentRow], key: impl Fn(&ExperimentRow) -> K, value: impl Fn(&ExperimentRow) -> Option<f64>) -> Vec<(K, f64)> {
    let mut m: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(v) = value(r) {
            let e = m.entry(key(r)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Metadata written as `#` lines ahead of every CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub config_json: String,
    pub global_seed: u64,
    pub notes: Vec<String>,
}

impl Metadata {
    pub fn new(config: &impl Serialize, global_seed: u64) -> Result<Self, ExperimentError> {
        Ok(Self { config_json: serde_json::to_string(config)?, global_seed, notes: Vec::new() })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# krrlab {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "# global_seed {}", self.global_seed)?;
        writeln!(w, "# config {}", self.config_json)?;
        for n in &self.notes {
            writeln!(w, "# {n}")?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| x.to_string())
}

pub fn write_rows_csv<W: Write>(w: &mut W, rows: &[ExperimentRow], meta: &Metadata) -> std::io::Result<()> {
    meta.write(w)?;
    writeln!(w, "p,ridge,seed,eps_t,eps_b,eps_k,sigma_f,wall_ms")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:.3}",
            r.p,
            r.ridge,
            r.seed,
            opt(r.eps_t),
            opt(r.eps_b),
            opt(r.eps_k),
            opt(r.sigma_f),
            r.wall_ms
        )?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(w: &mut W, rows: &[SummaryRow], meta: &Metadata) -> std::io::Result<()> {
    meta.write(w)?;
    writeln!(
        w,
        "p,ridge,ridge_over_p,ridge_over_crossover,replicates,eps_t_mean,eps_t_stderr,eps_t_rescaled,eps_b,eps_k_mean,eps_k_stderr,sigma_f_mean,sigma_f_stderr,sigma_f_pairs"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.p,
            r.ridge,
            r.ridge_over_p,
            r.ridge_over_crossover,
            r.replicates,
            opt(r.eps_t_mean),
            opt(r.eps_t_stderr),
            opt(r.eps_t_rescaled),
            opt(r.eps_b),
            opt(r.eps_k_mean),
            opt(r.eps_k_stderr),
            opt(r.sigma_f_mean),
            opt(r.sigma_f_stderr),
            r.sigma_f_pairs
        )?;
    }
    Ok(())
}

/// `<stem>.summary.csv` next to `path`.
pub fn summary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
    path.with_file_name(format!("{stem}.summary.csv"))
}

/// Writes the rows to `cfg.output` and the summary beside it; returns the paths.
pub fn persist(cfg: &ExperimentConfig, rows: &[ExperimentRow], notes: &[String]) -> Result<Option<(PathBuf, PathBuf)>, ExperimentError> {
    let Some(path) = &cfg.output else { return Ok(None) };
    let mut meta = Metadata::new(cfg, cfg.global_seed)?;
    meta.notes.extend(notes.iter().cloned());
    if cfg.model.dim >= 2 {
        meta.notes.push(format!("test error from {} Monte Carlo points", cfg.test_samples));
    } else {
        meta.notes.push(format!("test error on the weighted grid, resolution scale {}", cfg.resolution_scale));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_rows_csv(&mut f, rows, &meta)?;
    f.flush()?;
    let sp = summary_path(path);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&sp)?);
    write_summary_csv(&mut f, &summarize(rows, &cfg.model), &meta)?;
    f.flush()?;
    Ok(Some((path.clone(), sp)))
}

/// Labelled features from CSV: label in {-1, +1} then the features. Blank
/// and `#` lines are skipped, a non-numeric first line is taken as a header,
/// and rows past [`MAX_DATASET_ROWS`] are dropped.
pub fn load_dataset_csv(path: &Path) -> Result<SampleSet, ExperimentError> {
    parse_dataset(BufReader::new(std::fs::File::open(path)?))
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<SampleSet, ExperimentError> {
    let mut width = None;
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut row = 0usize;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if row == 0 && width.is_none() && line_no == 0 => continue,
            Err(e) => return Err(ExperimentError::Dataset { row, reason: format!("unparsable value ({e})") }),
        };
        if values.len() < 2 {
            return Err(ExperimentError::Dataset { row, reason: "needs a label and at least one feature".into() });
        }
        let w = *width.get_or_insert(values.len() - 1);
        if values.len() - 1 != w {
            return Err(ExperimentError::Dataset { row, reason: format!("{} features, expected {w}", values.len() - 1) });
        }
        if values[0] != 1.0 && values[0] != -1.0 {
            return Err(ExperimentError::Dataset { row, reason: format!("label {} is not -1 or +1", values[0]) });
        }
        if values[1..].iter().any(|v| !v.is_finite()) {
            return Err(ExperimentError::Dataset { row, reason: "non-finite feature".into() });
        }
        if row >= MAX_DATASET_ROWS {
            break;
        }
        labels.push(values[0]);
        coords.extend_from_slice(&values[1..]);
        row += 1;
    }
    let Some(w) = width else { return Err(ExperimentError::EmptyDataset) };
    Ok(SampleSet::new(w, coords, labels, 0)?)
}

pub fn write_dataset_csv<W: Write>(w: &mut W, data: &SampleSet) -> std::io::Result<()> {
    for i in 0..data.len() {
        write!(w, "{}", data.labels()[i])?;
        for v in data.point(i) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Training sizes; empty uses the whole training split.
    pub p_values: Vec<usize>,
    /// Absolute ridges.
    pub ridges: Vec<f64>,
    /// One random split per seed.
    pub seeds: Vec<u64>,
    pub global_seed: u64,
    pub holdout: f64,
    pub sigma: f64,
    pub estimators: Estimators,
    pub workers: usize,
    pub output: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            p_values: Vec::new(),
            ridges: log_grid(1e-6, 1e2, 20),
            seeds: (0..10).collect(),
            global_seed: 0,
            holdout: DEFAULT_HOLDOUT,
            sigma: crate::distributions::DEFAULT_SIGMA,
            estimators: Estimators { eps_t: true, eps_b: false, eps_k: true, sigma_f: true },
            workers: 0,
            output: None,
        }
    }
}

/// Rows in a canonical order, so that results do not depend on file order.
fn canonical(data: &SampleSet) -> SampleSet {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| {
        data.point(a)
            .iter()
            .chain(std::iter::once(&data.labels()[a]))
            .zip(data.point(b).iter().chain(std::iter::once(&data.labels()[b])))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    data.select(&idx)
}

fn dataset_rows(data: &SampleSet, cfg: &DatasetConfig, seed: u64) -> Result<Vec<ExperimentRow>, ExperimentError> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng_from(stream_seed(cfg.global_seed, &[SPLIT_STREAM, seed])));
    let n_test = ((data.len() as f64 * cfg.holdout).ceil() as usize).clamp(1, data.len() - 1);
    let test = data.select(&idx[..n_test]);
    let train = &idx[n_test..];
    let sizes = if cfg.p_values.is_empty() { vec![train.len()] } else { cfg.p_values.clone() };
    let mut rows = Vec::new();
    for p in sizes {
        if p > train.len() {
            return Err(ExperimentError::Config(format!("P = {p} exceeds the {} training rows", train.len())));
        }
        let t0 = Instant::now();
        let a = data.select(&train[..p]);
        let g = gram(&a, cfg.sigma);
        let solver = DenseSolver::new(&g, a.labels())?;
        let lams: Vec<f64> = cfg.ridges.iter().map(|&l| effective_ridge(l)).collect::<Result<_, _>>()?;
        let alphas: Vec<Vec<f64>> = lams.iter().map(|&l| solver.alpha(l)).collect();
        let preds = if cfg.estimators.eps_t || cfg.estimators.sigma_f {
            dense_predictions(&a, cfg.sigma, &alphas, &test)
        } else {
            Vec::new()
        };
        let other = if cfg.estimators.sigma_f && 2 * p <= train.len() {
            let b = data.select(&train[p..2 * p]);
            let sb = DenseSolver::new(&gram(&b, cfg.sigma), b.labels())?;
            let ab: Vec<Vec<f64>> = lams.iter().map(|&l| sb.alpha(l)).collect();
            Some(dense_predictions(&b, cfg.sigma, &ab, &test))
        } else {
            None
        };
        let per = ms(t0) / lams.len() as f64;
        for (j, &lam) in cfg.ridges.iter().enumerate() {
            let mut row = ExperimentRow::empty(p, lam, seed);
            if cfg.estimators.eps_t {
                row.eps_t = Some(mean_sq(&preds[j], test.labels()));
            }
            if cfg.estimators.eps_k {
                row.eps_k = Some(solver.kare(lams[j]));
            }
            if let Some(o) = &other {
                row.sigma_f = Some(sigma_f_values(&preds[j], &o[j]));
            }
            row.wall_ms = per;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Ridge sweep on external data: held-out test error, KARE and `sigma_f`
/// from two disjoint training subsets, one random split per seed.
pub fn dataset_sweep(data: &SampleSet, cfg: &DatasetConfig) -> Result<Vec<ExperimentRow>, ExperimentError> {
    if data.len() < 4 {
        return Err(ExperimentError::EmptyDataset);
    }
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) {
        return Err(ExperimentError::Config("holdout must lie in (0, 1)".into()));
    }
    if cfg.ridges.is_empty() || cfg.seeds.is_empty() {
        return Err(ExperimentError::Config("ridges and seeds must be nonempty".into()));
    }
    if !(cfg.sigma > 0.0) {
        return Err(ExperimentError::Config("sigma must be positive".into()));
    }
    if cfg.estimators.eps_b {
        return Err(ExperimentError::Config("eps_B is not available for external data".into()));
    }
    let data = canonical(data);
    let results: Vec<Result<Vec<ExperimentRow>, ExperimentError>> =
        pool(cfg.workers)?.install(|| cfg.seeds.par_iter().map(|&s| dataset_rows(&data, cfg, s)).collect());
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let pos: BTreeMap<u64, usize> = cfg.seeds.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    rows.sort_by(|a, b| (a.p, pos[&a.seed]).cmp(&(b.p, pos[&b.seed])).then(a.ridge.total_cmp(&b.ridge)));
    Ok(rows)
}

/// Fits ridgeless rows to `eps_t ~ P^m` using the seed means.
pub fn learning_curve_exponent(rows: &[ExperimentRow]) -> Result<(f64, f64, f64), ExperimentError> {
    let means = mean_by(rows, |r| r.p, |r| r.eps_t);
    let xs: Vec<f64> = means.iter().map(|(p, _)| *p as f64).collect();
    let ys: Vec<f64> = means.iter().map(|(_, v)| *v).collect();
    fit_power_law(&xs, &ys)
}

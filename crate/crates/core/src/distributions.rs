//! Data law `p(x) = |x|^chi e^{-x^2} / Gamma((1+chi)/2)`, the singular target
//! `sign(x)|x|^{-xi}`, seeded samplers and the adaptive one-dimensional test grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::specialfn::log_gamma;

/// Default kernel width.
pub const DEFAULT_SIGMA: f64 = 100.0;
/// Default sampling truncation.
pub const DEFAULT_X_MAX: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("chi must be finite and >= 0, got {0}")]
    Chi(f64),
    #[error("xi = {xi} violates xi < (chi + 1)/2 = {bound} (target not square integrable)")]
    Xi { xi: f64, bound: f64 },
    #[error("sigma must be finite and > 0, got {0}")]
    Sigma(f64),
    #[error("dimension must be >= 1")]
    Dim,
    #[error("x_max must be finite and > 0, got {0}")]
    XMax(f64),
    #[error("target is singular at x = 0 for xi = {0} > 0")]
    SingularTarget(f64),
    #[error("sample size must be >= 1")]
    EmptySample,
    #[error("sample set layout is inconsistent: {0}")]
    Layout(String),
    #[error("test grids are one-dimensional; model has dim = {0}")]
    GridDimension(usize),
}

/// Problem instance: density exponent, target exponent, kernel width,
/// dimension of the cylinder embedding and sampling truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataModel<T = f64> {
    pub chi: T,
    pub xi: T,
    pub sigma: T,
    pub dim: usize,
    pub x_max: T,
}

impl<T: Scalar> DataModel<T> {
    pub fn new(chi: T, xi: T, sigma: T, dim: usize, x_max: T) -> Result<Self, ModelError> {
        let m = Self { chi, xi, sigma, dim, x_max };
        m.validate()?;
        Ok(m)
    }

    /// One-dimensional model with the default width and truncation.
    pub fn one_d(chi: T, xi: T) -> Result<Self, ModelError> {
        Self::new(chi, xi, T::lit(DEFAULT_SIGMA), 1, T::lit(DEFAULT_X_MAX))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let chi = self.chi.to_f64_lossless();
        let xi = self.xi.to_f64_lossless();
        if !(chi.is_finite() && chi >= 0.0) {
            return Err(ModelError::Chi(chi));
        }
        let bound = 0.5 * (chi + 1.0);
        if !(xi.is_finite() && xi < bound) {
            return Err(ModelError::Xi { xi, bound });
        }
        let sigma = self.sigma.to_f64_lossless();
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(ModelError::Sigma(sigma));
        }
        if self.dim == 0 {
            return Err(ModelError::Dim);
        }
        let x_max = self.x_max.to_f64_lossless();
        if !(x_max.is_finite() && x_max > 0.0) {
            return Err(ModelError::XMax(x_max));
        }
        Ok(())
    }

    /// Untruncated density.
    pub fn density(&self, x: T) -> T {
        density(x, self.chi)
    }

    /// Probability mass of the untruncated law inside `[-x_max, x_max]`.
    pub fn truncated_mass(&self) -> f64 {
        central_mass(self.chi.to_f64_lossless(), self.x_max.to_f64_lossless())
    }

    /// Density of the sampling law: `p` restricted to `[-x_max, x_max]` and renormalised.
    pub fn sampling_density(&self, x: T) -> T {
        if x.abs() > self.x_max {
            return T::zero();
        }
        density(x, self.chi) / T::lit(self.truncated_mass())
    }

    pub fn target(&self, x: T) -> Result<T, ModelError> {
        target(x, self.xi)
    }

    /// Target with the singular point mapped to zero; used on measure-zero sets.
    pub fn target_or_zero(&self, x: T) -> T {
        target(x, self.xi).unwrap_or(T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> DataModel<U> {
        DataModel {
            chi: U::lit(self.chi.to_f64_lossless()),
            xi: U::lit(self.xi.to_f64_lossless()),
            sigma: U::lit(self.sigma.to_f64_lossless()),
            dim: self.dim,
            x_max: U::lit(self.x_max.to_f64_lossless()),
        }
    }
}

/// `|x|^chi e^{-x^2} / Gamma((1+chi)/2)`.
pub fn density<T: Scalar>(x: T, chi: T) -> T {
    let norm = log_gamma(T::lit(0.5) * (T::one() + chi)).unwrap_or(T::zero());
    let ax = x.abs();
    let power = if chi == T::zero() { T::one() } else { ax.powf(chi) };
    power * (-(x * x) - norm).exp()
}

/// `sign(x)|x|^{-xi}`; zero at the origin when `xi <= 0`.
pub fn target<T: Scalar>(x: T, xi: T) -> Result<T, ModelError> {
    if x == T::zero() {
        if xi > T::zero() {
            return Err(ModelError::SingularTarget(xi.to_f64_lossless()));
        }
        return Ok(T::zero());
    }
    let mag = if xi == T::zero() { T::one() } else { x.abs().powf(-xi) };
    Ok(if x > T::zero() { mag } else { -mag })
}

/// Regularised lower incomplete gamma `P(s, z)` by its power series; adequate
/// for the moderate arguments used by the truncation mass.
fn lower_gamma_regularized(s: f64, z: f64) -> f64 {
    if z <= 0.0 {
        return 0.0;
    }
    let mut term = 1.0 / s;
    let mut sum = term;
    let mut k = 1.0;
    while term > 1e-17 * sum && k < 10_000.0 {
        term *= z / (s + k);
        sum += term;
        k += 1.0;
    }
    (s * z.ln() - z - libm::lgamma(s) + sum.ln()).exp().min(1.0)
}

/// `P(|X| <= a)` under the untruncated law.
pub fn central_mass(chi: f64, a: f64) -> f64 {
    lower_gamma_regularized(0.5 * (1.0 + chi), a * a)
}

/// Cumulative distribution function of the sampling law.
pub fn sampling_cdf(chi: f64, x_max: f64, x: f64) -> f64 {
    let x = x.clamp(-x_max, x_max);
    let half = 0.5 * central_mass(chi, x.abs()) / central_mass(chi, x_max);
    if x >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

/// Training or test points together with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T = f64> {
    width: usize,
    coords: Vec<T>,
    labels: Vec<T>,
    seed: u64,
}

impl<T: Scalar> SampleSet<T> {
    /// Row-major coordinates, `width` values per point.
    pub fn new(width: usize, coords: Vec<T>, labels: Vec<T>, seed: u64) -> Result<Self, ModelError> {
        if width == 0 {
            return Err(ModelError::Layout("zero width".into()));
        }
        if coords.len() != width * labels.len() {
            return Err(ModelError::Layout(format!(
                "{} coordinates for {} labels of width {width}",
                coords.len(),
                labels.len()
            )));
        }
        Ok(Self { width, coords, labels, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.coords[i * self.width..(i + 1) * self.width]
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn labels(&self) -> &[T] {
        &self.labels
    }

    /// First coordinate of every point.
    pub fn first_coordinates(&self) -> Vec<T> {
        self.coords.chunks(self.width).map(|c| c[0]).collect()
    }

    /// Points at the given indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(idx.len() * self.width);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            coords.extend_from_slice(self.point(i));
            labels.push(self.labels[i]);
        }
        Self { width: self.width, coords, labels, seed: self.seed }
    }
}

fn draw_first_coordinate(rng: &mut ChaCha8Rng, chi: f64, xi: f64, x_max: f64) -> f64 {
    let peak = (0.5 * chi).sqrt().min(x_max);
    let bound = density(peak, chi);
    loop {
        let u: f64 = rng.gen::<f64>() * 2.0 * x_max - x_max;
        let v: f64 = rng.gen::<f64>() * bound;
        if v < density(u, chi) {
            if xi > 0.0 && u.abs() < 1e-300 {
                continue;
            }
            return u;
        }
    }
}

/// `P` i.i.d. draws from the truncated one-dimensional law by rejection
/// sampling under a uniform envelope.
pub fn sample_1d<T: Scalar>(p: usize, model: &DataModel<T>, seed: u64) -> Result<SampleSet<T>, ModelError> {
    if p == 0 {
        return Err(ModelError::EmptySample);
    }
    model.validate()?;
    let chi = model.chi.to_f64_lossless();
    let xi = model.xi.to_f64_lossless();
    let x_max = model.x_max.to_f64_lossless();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(p);
    let mut labels = Vec::with_capacity(p);
    for _ in 0..p {
        let x = draw_first_coordinate(&mut rng, chi, xi, x_max);
        coords.push(T::lit(x));
        labels.push(T::lit(target(x, xi)?));
    }
    SampleSet::new(1, coords, labels, seed)
}

/// Cylinder embedding: the first coordinate follows the one-dimensional law,
/// the remaining `dim` coordinates form a uniformly random unit vector.
pub fn sample_cylinder<T: Scalar>(p: usize, model: &DataModel<T>, seed: u64) -> Result<SampleSet<T>, ModelError> {
    if model.dim == 1 {
        return sample_1d(p, model, seed);
    }
    if p == 0 {
        return Err(ModelError::EmptySample);
    }
    model.validate()?;
    let chi = model.chi.to_f64_lossless();
    let xi = model.xi.to_f64_lossless();
    let x_max = model.x_max.to_f64_lossless();
    let d = model.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(p * (d + 1));
    let mut labels = Vec::with_capacity(p);
    let mut g = vec![0.0f64; d];
    for _ in 0..p {
        let x = draw_first_coordinate(&mut rng, chi, xi, x_max);
        let norm = loop {
            for v in g.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-150 {
                break n;
            }
        };
        coords.push(T::lit(x));
        coords.extend(g.iter().map(|v| T::lit(v / norm)));
        labels.push(T::lit(target(x, xi)?));
    }
    SampleSet::new(d + 1, coords, labels, seed)
}

/// Something with a derivative along the informative coordinate.
pub trait SlopeProfile<T> {
    fn slope(&self, x: T) -> T;
}

impl<T, F: Fn(T) -> T> SlopeProfile<T> for F {
    fn slope(&self, x: T) -> T {
        self(x)
    }
}

/// Resolution controls for [`build_test_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Multiplies every point count.
    pub resolution_scale: f64,
    /// Upper bound on the number of nodes on the positive half-line; counts
    /// are scaled down proportionally when exceeded.
    pub max_points: Option<usize>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { resolution_scale: 1.0, max_points: Some(4_000_000) }
    }
}

const GRID_BASE: f64 = 1e5;
const GRID_Q_FLOOR: f64 = 2000.0;
const SLOPE_RATIO: f64 = 0.1;
const SCAN_POINTS: usize = 100_000;

/// Quadrature nodes and weights for `int p(x) g(x) dx` over `[-x_max, x_max]`.
#[derive(Debug, Clone)]
pub struct WeightedGrid<T = f64> {
    /// Sorted ascending.
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
    /// Characteristic length of the predictor, `None` when the uniform fallback was used.
    pub x_tilde: Option<T>,
    /// Points per bin on the positive half-line.
    pub bin_counts: Vec<usize>,
}

impl<T: Scalar> WeightedGrid<T> {
    pub fn integrate(&self, mut g: impl FnMut(T) -> T) -> T {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * g(x)).sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// First `x` in `(0, x_max]` where `|f'(x)|` drops to a tenth of `|f'(0)|`,
/// located on a geometric scan and refined by bisection.
pub fn characteristic_length<T: Scalar>(profile: &impl SlopeProfile<T>, x_max: f64) -> Option<f64> {
    let s0 = profile.slope(T::zero()).to_f64_lossless().abs();
    if !(s0.is_finite() && s0 > 0.0) {
        return None;
    }
    let thr = SLOPE_RATIO * s0;
    let below = |x: f64| profile.slope(T::lit(x)).to_f64_lossless().abs() <= thr;
    let lo_exp = -10.0f64;
    let mut prev = 0.0;
    for i in 0..=SCAN_POINTS {
        let x = x_max * 10f64.powf(lo_exp * (1.0 - i as f64 / SCAN_POINTS as f64));
        if below(x) {
            let (mut a, mut b) = (prev, x);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if below(m) {
                    b = m;
                } else {
                    a = m;
                }
            }
            return Some(b);
        }
        prev = x;
    }
    None
}

/// Adaptive test grid: `m` bins of width `x~` on `[0, x_max]`, bin `j` holding
/// `1e5 e^{-j} + q` midpoint nodes with `q = max(1e5/m, 2000)`, mirrored to
/// negative `x`. Weights include the sampling density. Falls back to a uniform
/// grid of `1e5` nodes per half-line when the slope never decays.
pub fn build_test_grid<T: Scalar>(
    profile: &impl SlopeProfile<T>,
    model: &DataModel<T>,
    options: &GridOptions,
) -> Result<WeightedGrid<T>, ModelError> {
    if model.dim != 1 {
        return Err(ModelError::GridDimension(model.dim));
    }
    let x_max = model.x_max.to_f64_lossless();
    let scale = options.resolution_scale.max(1e-9);
    let x_tilde = characteristic_length(profile, x_max).filter(|&x| x < x_max);
    let (width, mut counts) = match x_tilde {
        Some(xt) => {
            let m = (x_max / xt).ceil() as usize;
            let q = (GRID_BASE / m as f64).max(GRID_Q_FLOOR);
            let counts: Vec<f64> = (0..m).map(|j| scale * (GRID_BASE * (-(j as f64)).exp() + q)).collect();
            (xt, counts)
        }
        None => (x_max, vec![scale * GRID_BASE]),
    };
    if let Some(cap) = options.max_points {
        let total: f64 = counts.iter().sum();
        if total > cap as f64 {
            let r = cap as f64 / total;
            counts.iter_mut().for_each(|c| *c *= r);
        }
    }
    let counts: Vec<usize> = counts.iter().map(|c| (c.floor() as usize).max(4)).collect();
    let z = model.truncated_mass();
    let chi = model.chi.to_f64_lossless();
    let mut pos_nodes = Vec::new();
    let mut pos_w = Vec::new();
    for (j, &n) in counts.iter().enumerate() {
        let a = j as f64 * width;
        let b = ((j + 1) as f64 * width).min(x_max);
        if b <= a {
            continue;
        }
        let h = (b - a) / n as f64;
        for k in 0..n {
            let x = a + (k as f64 + 0.5) * h;
            pos_nodes.push(x);
            pos_w.push(h * density(x, chi) / z);
        }
    }
    let mut nodes = Vec::with_capacity(2 * pos_nodes.len());
    let mut weights = Vec::with_capacity(2 * pos_nodes.len());
    for i in (0..pos_nodes.len()).rev() {
        nodes.push(T::lit(-pos_nodes[i]));
        weights.push(T::lit(pos_w[i]));
    }
    for i in 0..pos_nodes.len() {
        nodes.push(T::lit(pos_nodes[i]));
        weights.push(T::lit(pos_w[i]));
    }
    Ok(WeightedGrid { nodes, weights, x_tilde: x_tilde.map(T::lit), bin_counts: counts })
}

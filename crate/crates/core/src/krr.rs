//! Kernel ridge regression with the Laplace kernel `exp(-|x - y| / sigma)`.
//!
//! Two exact solvers are provided. [`fit`] factorises the dense Gram matrix
//! and works in any dimension. [`fit_1d`] exploits that in one dimension the
//! inverse Laplace Gram matrix of sorted points is tridiagonal, so that
//! `(K + lambda)^{-1}` can be applied in `O(P)`; it is the workhorse for
//! learning curves at large `P`.
//!
//! In one dimension the predictor restricted to an interval between adjacent
//! training points is a combination of `e^{x/sigma}` and `e^{-x/sigma}`, hence
//! fixed by its two endpoint values. [`Predictor`] stores those values (the
//! fitted values `w = y - lambda alpha`) and evaluates in `O(log P)`.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::distributions::{sample_cylinder, DataModel, ModelError, SampleSet, SlopeProfile, WeightedGrid};
use crate::scalar::Scalar;

/// Smallest ridge used by the solvers.
pub const RIDGE_FLOOR: f64 = 1e-12;
/// Minimum number of Monte Carlo test points.
pub const MIN_MC_SAMPLES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KrrError {
    #[error("kernel system is not positive definite (failed pivot {pivot_index}, value {pivot_value:e})")]
    Conditioning { pivot_index: usize, pivot_value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("negative or non-finite ridge {0}")]
    Ridge(f64),
    #[error("coincident training points at x = {0}; use the dense solver")]
    Coincident(f64),
    #[error("degenerate segment: delta = 0")]
    DegenerateSegment,
    #[error("Monte Carlo test error needs at least {MIN_MC_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("the ridge must be positive for this estimator")]
    ZeroRidge,
    #[error("one-dimensional operation on {0}-wide points")]
    NotOneDimensional(usize),
    #[error("solve residual {0:e} exceeds tolerance")]
    Residual(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Laplace kernel as a function of distance.
#[inline]
pub fn laplace<T: Scalar>(dist: T, sigma: T) -> T {
    (-dist / sigma).exp()
}

fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    if a.len() == 1 {
        return (a[0] - b[0]).abs();
    }
    a.iter().zip(b).map(|(&u, &v)| (u - v) * (u - v)).sum::<T>().sqrt()
}

/// Dense Gram matrix of a sample set.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub entries: Mat<f64>,
    pub sigma: f64,
    pub points: SampleSet<f64>,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.entries.nrows()
    }
}

pub fn gram(points: &SampleSet<f64>, sigma: f64) -> GramMatrix {
    let n = points.len();
    let mut entries = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        entries[(j, j)] = 1.0;
        for i in j + 1..n {
            let v = laplace(distance(points.point(i), points.point(j)), sigma);
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    GramMatrix { entries, sigma, points: points.clone() }
}

/// The ridge actually used: `ridge` raised to [`RIDGE_FLOOR`].
pub fn effective_ridge(ridge: f64) -> Result<f64, KrrError> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(KrrError::Ridge(ridge));
    }
    Ok(ridge.max(RIDGE_FLOOR))
}

/// Sorted-node representation of a one-dimensional predictor.
#[derive(Debug, Clone)]
pub struct Chain<T = f64> {
    /// Training abscissae, ascending.
    pub xs: Vec<T>,
    /// Predictor values at `xs`.
    pub values: Vec<T>,
    sigma: T,
}

impl<T: Scalar> Chain<T> {
    pub fn new(xs: Vec<T>, values: Vec<T>, sigma: T) -> Self {
        Self { xs, values, sigma }
    }

    fn locate(&self, x: T) -> usize {
        // number of nodes <= x
        self.xs.partition_point(|&v| v <= x)
    }

    fn eval_in(&self, k: usize, x: T) -> (T, T) {
        let n = self.xs.len();
        let s = self.sigma;
        if k == 0 {
            let v = self.values[0] * ((x - self.xs[0]) / s).exp();
            return (v, v / s);
        }
        if k == n {
            let v = self.values[n - 1] * (-(x - self.xs[n - 1]) / s).exp();
            return (v, -v / s);
        }
        let (xl, xr) = (self.xs[k - 1], self.xs[k]);
        let (wl, wr) = (self.values[k - 1], self.values[k]);
        let d = (xr - xl) / s;
        if d == T::zero() {
            return (wl, T::zero());
        }
        let sd = d.sinh();
        let a = (xr - x) / s;
        let b = (x - xl) / s;
        let v = (wl * a.sinh() + wr * b.sinh()) / sd;
        let dv = (-wl * a.cosh() + wr * b.cosh()) / (s * sd);
        (v, dv)
    }

    pub fn value(&self, x: T) -> T {
        self.eval_in(self.locate(x), x).0
    }

    pub fn slope(&self, x: T) -> T {
        self.eval_in(self.locate(x), x).1
    }

    /// Values at ascending abscissae by a single merge pass.
    pub fn values_sorted(&self, xs: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(xs.len());
        let mut k = 0usize;
        let n = self.xs.len();
        for &x in xs {
            while k < n && self.xs[k] <= x {
                k += 1;
            }
            out.push(self.eval_in(k, x).0);
        }
        out
    }
}

/// Fitted KRR state.
#[derive(Debug, Clone)]
pub struct Predictor<T = f64> {
    pub points: SampleSet<T>,
    pub alpha: Vec<T>,
    /// Effective ridge after applying the floor.
    pub ridge: T,
    pub sigma: T,
    chain: Option<Chain<T>>,
}

impl<T: Scalar> Predictor<T> {
    /// Predictor from dual coefficients obtained elsewhere, e.g. an eigendecomposition.
    pub fn from_alpha(points: SampleSet<T>, alpha: Vec<T>, ridge: T, sigma: T) -> Result<Self, KrrError> {
        if alpha.len() != points.len() {
            return Err(KrrError::Dimension(format!("{} coefficients for {} points", alpha.len(), points.len())));
        }
        let chain = if points.width() == 1 { Some(chain_from_alpha(&points, &alpha, ridge, sigma)) } else { None };
        Ok(Self { points, alpha, ridge, sigma, chain })
    }

    pub fn labels(&self) -> &[T] {
        self.points.labels()
    }

    /// `sum_i alpha_i K(x, x_i)` by direct summation.
    pub fn predict_direct(&self, x: &[T]) -> T {
        let mut s = T::zero();
        for i in 0..self.points.len() {
            s = s + self.alpha[i] * laplace(distance(x, self.points.point(i)), self.sigma);
        }
        s
    }

    pub fn predict(&self, x: &[T]) -> T {
        match &self.chain {
            Some(c) => c.value(x[0]),
            None => self.predict_direct(x),
        }
    }

    /// One-dimensional predictor value.
    pub fn predict_1d(&self, x: T) -> T {
        match &self.chain {
            Some(c) => c.value(x),
            None => self.predict_direct(&[x]),
        }
    }

    /// Predictions at many points, given row-major with the training width.
    pub fn predict_many(&self, coords: &[T]) -> Vec<T> {
        let w = self.points.width();
        if let Some(c) = &self.chain {
            let xs: Vec<T> = coords.to_vec();
            if xs.windows(2).all(|p| p[0] <= p[1]) {
                return c.values_sorted(&xs);
            }
            return xs.iter().map(|&x| c.value(x)).collect();
        }
        coords.chunks(w).map(|p| self.predict_direct(p)).collect()
    }

    pub fn chain(&self) -> Option<&Chain<T>> {
        self.chain.as_ref()
    }

    /// Fitted values `f_P(x_i)` in training order.
    pub fn fitted_values(&self) -> Vec<T> {
        let lam = self.ridge;
        self.points.labels().iter().zip(&self.alpha).map(|(&y, &a)| y - lam * a).collect()
    }
}

impl<T: Scalar> SlopeProfile<T> for Predictor<T> {
    fn slope(&self, x: T) -> T {
        match &self.chain {
            Some(c) => c.slope(x),
            None => {
                let h = T::lit(1e-7) * (T::one() + x.abs());
                (self.predict_direct(&[x + h]) - self.predict_direct(&[x - h])) / (h + h)
            }
        }
    }
}

/// Dense solve of `(K + lambda) alpha = y` by Cholesky factorisation.
pub fn fit(gram: &GramMatrix, labels: &[f64], ridge: f64) -> Result<Predictor<f64>, KrrError> {
    let n = gram.size();
    if labels.len() != n {
        return Err(KrrError::Dimension(format!("{} labels for a {n}x{n} Gram matrix", labels.len())));
    }
    let lam = effective_ridge(ridge)?;
    let mut a = gram.entries.clone();
    for i in 0..n {
        a[(i, i)] += lam;
    }
    let llt = match a.llt(Side::Lower) {
        Ok(f) => f,
        Err(_) => return Err(conditioning_report(&a)),
    };
    let rhs = Mat::from_fn(n, 1, |i, _| labels[i]);
    let sol = llt.solve(&rhs);
    let alpha: Vec<f64> = (0..n).map(|i| sol[(i, 0)]).collect();
    let ymax = labels.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut r = lam * alpha[i] - labels[i];
        for j in 0..n {
            r += gram.entries[(i, j)] * alpha[j];
        }
        worst = worst.max(r.abs());
    }
    if worst > 1e-8 * ymax.max(f64::MIN_POSITIVE) {
        return Err(KrrError::Residual(worst));
    }
    let points = SampleSet::new(gram.points.width(), gram.points.coords().to_vec(), labels.to_vec(), gram.points.seed())?;
    let chain = if points.width() == 1 { Some(chain_from_alpha(&points, &alpha, lam, gram.sigma)) } else { None };
    Ok(Predictor { points, alpha, ridge: lam, sigma: gram.sigma, chain })
}

fn conditioning_report(a: &Mat<f64>) -> KrrError {
    // Recompute the Cholesky pivots to report where positivity is lost.
    let n = a.nrows();
    let mut l = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return KrrError::Conditioning { pivot_index: j, pivot_value: d };
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    KrrError::Conditioning { pivot_index: n, pivot_value: f64::NAN }
}

fn chain_from_alpha<T: Scalar>(points: &SampleSet<T>, alpha: &[T], lam: T, sigma: T) -> Chain<T> {
    let labels = points.labels();
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points.point(a)[0].partial_cmp(&points.point(b)[0]).unwrap());
    let xs = idx.iter().map(|&i| points.point(i)[0]).collect();
    let values = idx.iter().map(|&i| labels[i] - lam * alpha[i]).collect();
    Chain::new(xs, values, sigma)
}

/// Tridiagonal structure of `K^{-1}` for sorted one-dimensional points.
#[derive(Debug, Clone)]
pub struct ChainFactor<T = f64> {
    order: Vec<usize>,
    xs: Vec<T>,
    /// Diagonal of `K^{-1}`.
    q_diag: Vec<T>,
    /// Super-diagonal of `K^{-1}`.
    q_off: Vec<T>,
    sigma: T,
}

impl<T: Scalar> ChainFactor<T> {
    pub fn new(points: &SampleSet<T>, sigma: T) -> Result<Self, KrrError> {
        if points.width() != 1 {
            return Err(KrrError::NotOneDimensional(points.width()));
        }
        let n = points.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| points.point(a)[0].partial_cmp(&points.point(b)[0]).unwrap());
        let xs: Vec<T> = order.iter().map(|&i| points.point(i)[0]).collect();
        let mut inv_e = Vec::with_capacity(n.saturating_sub(1));
        let mut q_off = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n.saturating_sub(1) {
            let d = (xs[i + 1] - xs[i]) / sigma;
            // 1 - a^2 with a = e^{-d}
            let e = -(-(d + d)).exp_m1();
            if !(e > T::zero()) {
                return Err(KrrError::Coincident(xs[i].to_f64_lossless()));
            }
            inv_e.push(T::one() / e);
            q_off.push(-(-d).exp() / e);
        }
        let mut q_diag = vec![T::one(); n];
        if n > 1 {
            q_diag[0] = inv_e[0];
            q_diag[n - 1] = inv_e[n - 2];
            for i in 1..n - 1 {
                q_diag[i] = inv_e[i - 1] + inv_e[i] - T::one();
            }
        }
        Ok(Self { order, xs, q_diag, q_off, sigma })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Sorted abscissae.
    pub fn xs(&self) -> &[T] {
        &self.xs
    }

    /// Original indices in sorted order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn q_apply(&self, v: &[T]) -> (Vec<T>, Vec<T>) {
        // returns (Q v, error scale of each component)
        let n = v.len();
        let mut out = vec![T::zero(); n];
        let mut mag = vec![T::zero(); n];
        for i in 0..n {
            let mut s = self.q_diag[i] * v[i];
            let mut m = s.abs();
            if i > 0 {
                let t = self.q_off[i - 1] * v[i - 1];
                s = s + t;
                m = m + t.abs();
            }
            if i + 1 < n {
                let t = self.q_off[i] * v[i + 1];
                s = s + t;
                m = m + t.abs();
            }
            out[i] = s;
            mag[i] = m;
        }
        (out, mag)
    }

    /// Tridiagonal `T = I + lambda Q` as (diag, off).
    fn shifted(&self, lam: T) -> (Vec<T>, Vec<T>) {
        let d = self.q_diag.iter().map(|&q| T::one() + lam * q).collect();
        let o = self.q_off.iter().map(|&q| lam * q).collect();
        (d, o)
    }

    /// Solves `(I + lambda Q) w = y` for `y` in sorted order.
    fn solve_shifted(&self, lam: T, y: &[T]) -> Vec<T> {
        let (d, o) = self.shifted(lam);
        thomas(&d, &o, y)
    }

    /// Fits labels given in the original (unsorted) order.
    pub fn fit(&self, points: &SampleSet<T>, ridge: T) -> Result<Predictor<T>, KrrError> {
        let lam = T::lit(effective_ridge(ridge.to_f64_lossless())?);
        let labels = points.labels();
        if labels.len() != self.len() {
            return Err(KrrError::Dimension("label count differs from factor size".into()));
        }
        let ys: Vec<T> = self.order.iter().map(|&i| labels[i]).collect();
        let w = self.solve_shifted(lam, &ys);
        let alpha_sorted = self.dual_from_fitted(lam, &ys, &w);
        let mut alpha = vec![T::zero(); self.len()];
        for (k, &i) in self.order.iter().enumerate() {
            alpha[i] = alpha_sorted[k];
        }
        let chain = Chain::new(self.xs.clone(), w, self.sigma);
        Ok(Predictor { points: points.clone(), alpha, ridge: lam, sigma: self.sigma, chain: Some(chain) })
    }

    /// `alpha = Q w = (y - w) / lambda`, each component taken from whichever
    /// form has the smaller rounding bound.
    fn dual_from_fitted(&self, lam: T, ys: &[T], w: &[T]) -> Vec<T> {
        let (qw, mag) = self.q_apply(w);
        (0..ys.len())
            .map(|i| {
                let direct = (ys[i] - w[i]) / lam;
                let direct_err = (ys[i].abs() + w[i].abs()) / lam;
                if direct_err < mag[i] {
                    direct
                } else {
                    qw[i]
                }
            })
            .collect()
    }

    /// `Tr (K + lambda)^{-1}` in `O(P)`.
    pub fn trace_inverse(&self, lam: T) -> T {
        let n = self.len();
        let (d, o) = self.shifted(lam);
        let (diag, off) = tridiagonal_inverse_bands(&d, &o);
        let mut total = T::zero();
        for i in 0..n {
            // (K+lam)^{-1} = Q T^{-1} = (I - T^{-1}) / lam
            let direct = (T::one() - diag[i]) / lam;
            let direct_err = T::one() / lam;
            let mut s = self.q_diag[i] * diag[i];
            let mut m = s.abs();
            if i > 0 {
                let t = self.q_off[i - 1] * off[i - 1];
                s = s + t;
                m = m + t.abs();
            }
            if i + 1 < n {
                let t = self.q_off[i] * off[i];
                s = s + t;
                m = m + t.abs();
            }
            total = total + if direct_err < m { direct } else { s };
        }
        total
    }
}

/// Thomas algorithm for a symmetric, diagonally dominant tridiagonal system.
fn thomas<T: Scalar>(d: &[T], o: &[T], rhs: &[T]) -> Vec<T> {
    let n = d.len();
    let mut c = vec![T::zero(); n];
    let mut x = vec![T::zero(); n];
    let mut beta = d[0];
    x[0] = rhs[0] / beta;
    for i in 1..n {
        c[i] = o[i - 1] / beta;
        beta = d[i] - o[i - 1] * c[i];
        x[i] = (rhs[i] - o[i - 1] * x[i - 1]) / beta;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        x[i] = x[i] - c[i + 1] * x[i + 1];
    }
    x
}

/// Diagonal and super-diagonal of the inverse of a symmetric tridiagonal
/// matrix, from forward and backward pivots.
fn tridiagonal_inverse_bands<T: Scalar>(d: &[T], o: &[T]) -> (Vec<T>, Vec<T>) {
    let n = d.len();
    let mut fwd = vec![T::zero(); n];
    let mut bwd = vec![T::zero(); n];
    fwd[0] = d[0];
    for i in 1..n {
        fwd[i] = d[i] - o[i - 1] * o[i - 1] / fwd[i - 1];
    }
    bwd[n - 1] = d[n - 1];
    for i in (0..n.saturating_sub(1)).rev() {
        bwd[i] = d[i] - o[i] * o[i] / bwd[i + 1];
    }
    let diag: Vec<T> = (0..n).map(|i| T::one() / (fwd[i] + bwd[i] - d[i])).collect();
    let off = (0..n.saturating_sub(1)).map(|i| -o[i] * diag[i + 1] / fwd[i]).collect();
    (diag, off)
}

/// Exact one-dimensional fit in `O(P log P)`.
pub fn fit_1d<T: Scalar>(points: &SampleSet<T>, ridge: T, sigma: T) -> Result<Predictor<T>, KrrError> {
    ChainFactor::new(points, sigma)?.fit(points, ridge)
}

/// Coefficients `(A, B)` of `f(x) = |x_i|^{-xi} [A e^{(x-x_i)/sigma} + B e^{-(x-x_i)/sigma}]`
/// interpolating the target at `x_i` and `x_i + delta`.
pub fn analytic_segment<T: Scalar>(x_i: T, delta: T, xi: T, sigma: T) -> Result<(T, T), KrrError> {
    if delta == T::zero() {
        return Err(KrrError::DegenerateSegment);
    }
    if x_i == T::zero() || x_i + delta == T::zero() {
        return Err(KrrError::Model(ModelError::SingularTarget(xi.to_f64_lossless())));
    }
    let d = delta / sigma;
    let two_sinh = T::lit(2.0) * d.sinh();
    let ratio = (T::one() + delta / x_i).abs();
    // r - 1 with r = |1 + delta/x_i|^{-xi}, kept accurate for small delta
    let r_minus_1 = (-xi * ratio.ln()).exp_m1();
    let r = T::one() + r_minus_1;
    // 1 - e^{-d}
    let one_minus_em = -(-d).exp_m1();
    let (a, b) = if x_i > T::zero() {
        // labels +1 at both ends (scaled)
        let a = (r_minus_1 + one_minus_em) / two_sinh;
        (a, T::one() - a)
    } else if x_i + delta < T::zero() {
        let a = (r_minus_1 + one_minus_em) / two_sinh;
        (-a, a - T::one())
    } else {
        // the segment straddling the origin: labels -1 and +r
        let a = (r + (-d).exp()) / two_sinh;
        (a, -T::one() - a)
    };
    Ok((a, b))
}

/// How the test error integral is estimated.
#[derive(Debug, Clone, Copy)]
pub enum TestSpec<'a, T = f64> {
    /// Weighted one-dimensional grid.
    Grid(&'a WeightedGrid<T>),
    /// Fresh i.i.d. draws from the data law.
    MonteCarlo { samples: usize, seed: u64 },
    /// A given test sample with equal weights.
    Sample(&'a SampleSet<T>),
}

/// `int p(x) (f_P(x) - f*(x))^2 dx`.
pub fn test_error<T: Scalar>(predictor: &Predictor<T>, model: &DataModel<T>, spec: TestSpec<'_, T>) -> Result<T, KrrError> {
    match spec {
        TestSpec::Grid(grid) => {
            let pred = predictor.predict_many(&grid.nodes);
            let mut s = T::zero();
            for ((&x, &w), &f) in grid.nodes.iter().zip(&grid.weights).zip(&pred) {
                let e = f - model.target_or_zero(x);
                s = s + w * e * e;
            }
            Ok(s)
        }
        TestSpec::MonteCarlo { samples, seed } => {
            if samples < MIN_MC_SAMPLES {
                return Err(KrrError::TooFewSamples(samples));
            }
            let test = sample_cylinder(samples, model, seed)?;
            Ok(sample_error(predictor, &test))
        }
        TestSpec::Sample(test) => {
            if test.width() != predictor.points.width() {
                return Err(KrrError::Dimension("test width differs from training width".into()));
            }
            Ok(sample_error(predictor, test))
        }
    }
}

fn sample_error<T: Scalar>(predictor: &Predictor<T>, test: &SampleSet<T>) -> T {
    let pred = predict_set(predictor, test);
    let n = T::from_usize(test.len()).unwrap();
    pred.iter().zip(test.labels()).map(|(&f, &y)| (f - y) * (f - y)).sum::<T>() / n
}

/// Predictions at every point of a sample set, in its order.
pub fn predict_set<T: Scalar>(predictor: &Predictor<T>, test: &SampleSet<T>) -> Vec<T> {
    if let Some(c) = predictor.chain() {
        let xs = test.first_coordinates();
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
        let sorted: Vec<T> = idx.iter().map(|&i| xs[i]).collect();
        let vals = c.values_sorted(&sorted);
        let mut out = vec![T::zero(); xs.len()];
        for (k, &i) in idx.iter().enumerate() {
            out[i] = vals[k];
        }
        return out;
    }
    predictor.predict_many(test.coords())
}

/// Mean squared discrepancy of two predictors over the test points where
/// their signs disagree; zero when they never disagree.
pub fn sigma_f<T: Scalar>(pred_a: &Predictor<T>, pred_b: &Predictor<T>, test: &SampleSet<T>) -> T {
    let fa = predict_set(pred_a, test);
    let fb = predict_set(pred_b, test);
    sigma_f_values(&fa, &fb)
}

/// [`sigma_f`] on precomputed prediction vectors.
pub fn sigma_f_values<T: Scalar>(fa: &[T], fb: &[T]) -> T {
    let mut s = T::zero();
    let mut n = 0usize;
    for (&a, &b) in fa.iter().zip(fb) {
        if a.signum() != b.signum() {
            s = s + (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        T::zero()
    } else {
        s / T::from_usize(n).unwrap()
    }
}

/// KARE estimate `(1/P) y^T (K+lambda)^{-2} y / ((1/P) Tr (K+lambda)^{-1})^2`
/// from the dense Gram matrix.
pub fn kare(gram: &GramMatrix, labels: &[f64], ridge: f64) -> Result<f64, KrrError> {
    if !(ridge > 0.0) {
        return Err(KrrError::ZeroRidge);
    }
    let n = gram.size();
    if labels.len() != n {
        return Err(KrrError::Dimension("label count differs from Gram size".into()));
    }
    let mut a = gram.entries.clone();
    for i in 0..n {
        a[(i, i)] += ridge;
    }
    let llt = a.llt(Side::Lower).map_err(|_| conditioning_report(&a))?;
    let rhs = Mat::from_fn(n, 1, |i, _| labels[i]);
    let alpha = llt.solve(&rhs);
    let num: f64 = (0..n).map(|i| alpha[(i, 0)] * alpha[(i, 0)]).sum::<f64>() / n as f64;
    let inv = llt.inverse();
    let tr: f64 = (0..n).map(|i| inv[(i, i)]).sum::<f64>() / n as f64;
    Ok(num / (tr * tr))
}

/// KARE in `O(P)` for one-dimensional data.
pub fn kare_1d<T: Scalar>(factor: &ChainFactor<T>, points: &SampleSet<T>, ridge: T) -> Result<T, KrrError> {
    if !(ridge > T::zero()) {
        return Err(KrrError::ZeroRidge);
    }
    let pred = factor.fit(points, ridge)?;
    let n = T::from_usize(points.len()).unwrap();
    let num = pred.alpha.iter().map(|&a| a * a).sum::<T>() / n;
    let tr = factor.trace_inverse(pred.ridge) / n;
    Ok(num / (tr * tr))
}

/// Deterministic generator for auxiliary randomness in this module's tests and callers.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[f64], xi: f64) -> SampleSet<f64> {
        let labels = xs.iter().map(|&x| crate::distributions::target(x, xi).unwrap()).collect();
        SampleSet::new(1, xs.to_vec(), labels, 0).unwrap()
    }

    #[test]
    fn scalar_solve() {
        let s = SampleSet::new(1, vec![0.3], vec![1.0], 0).unwrap();
        let g = gram(&s, 1.0);
        let p = fit(&g, &[1.0], 1.0).unwrap();
        assert!((p.alpha[0] - 0.5).abs() < 1e-15);
        assert!((p.predict(&[0.3]) - 0.5).abs() < 1e-15);
        let q = fit_1d(&s, 1.0, 1.0).unwrap();
        assert!((q.alpha[0] - 0.5).abs() < 1e-15);
        assert!((q.predict_1d(0.3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gram_entries() {
        let s = set(&[0.0001, 1.0001, 3.0001], 0.0);
        let g = gram(&s, 1.0);
        assert_eq!(g.entries[(1, 1)], 1.0);
        assert!((g.entries[(0, 1)] - (-1f64).exp()).abs() < 1e-15);
        let g = gram(&s, 100.0);
        assert!((g.entries[(0, 2)] - (-0.03f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn chain_matches_dense() {
        let xs: Vec<f64> = (0..60).map(|i| (i as f64 * 0.7311).sin() * 2.7).collect();
        let s = set(&xs, 0.0);
        let f = ChainFactor::new(&s, 1.3).unwrap();
        let g = gram(&s, 1.3);
        for &lam in &[1e-12, 1e-6, 1e-2, 1.0, 50.0] {
            let a = fit(&g, s.labels(), lam).unwrap();
            let b = f.fit(&s, lam).unwrap();
            for i in 0..xs.len() {
                assert!((a.alpha[i] - b.alpha[i]).abs() <= 1e-6 * (1.0 + a.alpha[i].abs()), "lam {lam} i {i}");
            }
            for k in 0..200 {
                let x = -3.2 + k as f64 * 0.032;
                let (u, v) = (a.predict_direct(&[x]), b.predict_1d(x));
                assert!((u - v).abs() < 1e-9, "lam {lam} x {x}: {u} vs {v}");
            }
            if lam > 1e-8 {
                let ka = kare(&g, s.labels(), lam).unwrap();
                let kb = kare_1d(&f, &s, lam).unwrap();
                assert!((ka / kb - 1.0).abs() < 1e-8, "kare {ka} vs {kb}");
            }
        }
    }

    #[test]
    fn tridiagonal_inverse_matches_dense() {
        let d = [4.0f64, 5.0, 3.5, 6.0];
        let o = [1.0f64, -2.0, 0.5];
        let (diag, off) = tridiagonal_inverse_bands(&d, &o);
        let m = Mat::from_fn(4, 4, |i, j| if i == j { d[i] } else if i + 1 == j { o[i] } else if j + 1 == i { o[j] } else { 0.0 });
        let inv = m.llt(Side::Lower).unwrap().inverse();
        for i in 0..4 {
            assert!((inv[(i, i)] - diag[i]).abs() < 1e-14);
        }
        for i in 0..3 {
            assert!((inv[(i, i + 1)] - off[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn segment_both_positive_labels() {
        let (a, b) = analytic_segment(0.4f64, 0.05, 0.0, 100.0).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
        let d: f64 = 0.05 / 100.0;
        assert!((a * d.exp() + b * (-d).exp() - 1.0).abs() < 1e-12);
        assert!(analytic_segment(0.4f64, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn kare_limits() {
        let s = SampleSet::new(1, vec![0.3], vec![1.0], 0).unwrap();
        let g = gram(&s, 1.0);
        assert!((kare(&g, &[1.0], 0.7).unwrap() - 1.0).abs() < 1e-14);
        let s2 = set(&[-0.5, 0.2, 0.9], 0.0);
        let g2 = gram(&s2, 1.0);
        assert_eq!(kare(&g2, &[0.0, 0.0, 0.0], 0.3).unwrap(), 0.0);
        assert!(kare(&g2, s2.labels(), 0.0).is_err());
    }

    #[test]
    fn sigma_f_basics() {
        let a = [0.5f64, -0.5, 0.5];
        let b = [-0.5, 0.5, -0.5];
        assert!((sigma_f_values(&a, &b) - 1.0).abs() < 1e-15);
        assert_eq!(sigma_f_values(&a, &a), 0.0);
    }
}

//! Predictions to compare against simulations: the replica test error, the
//! infinite-`P` predictor and its boundary scale, and the exponent table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{DataModel, ModelError};
use crate::spectral::{Parity, Spectrum};

pub use crate::krr::{kare, kare_1d};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("replica fixed point has no solution: the spectrum has {ranks} ranks for P = {p} at zero ridge")]
    SpectrumTooShort { ranks: usize, p: usize },
    #[error("replica fixed point did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("replica solution is unstable: 1 - P gamma/(lambda + t)^2 = {0:e}")]
    ReplicaInstability(f64),
    #[error("ridge must be finite and >= 0, got {0}")]
    Ridge(f64),
    #[error("lambda/P must be finite and > 0, got {0}")]
    RidgeRatio(f64),
    #[error("mesh too coarse: only {cells} cells below the boundary scale {scale:e}")]
    Resolution { cells: usize, scale: f64 },
    #[error("no plateau in the predictor: {0}")]
    NoPlateau(String),
    #[error("the boundary-value problem is one-dimensional; model has dim = {0}")]
    Dimension(usize),
    #[error("empty spectrum")]
    EmptySpectrum,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Solution of `t = sum_rho (1/lambda_rho + P/(lambda + t))^{-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicaState {
    pub t: f64,
    pub gamma: f64,
    pub p: usize,
    pub ridge: f64,
    /// Ranks in the spectrum the sums ran over.
    pub ranks: usize,
    /// Set when the spectrum holds fewer than five ranks per training point,
    /// so that the truncated sums are biased.
    pub truncated: bool,
}

impl ReplicaState {
    pub fn kappa(&self) -> f64 {
        self.ridge + self.t
    }
}

const REPLICA_MAX_ITER: usize = 10_000;

/// Root of the monotone form `t/(lambda + t) = sum lambda_rho/(lambda + t + P lambda_rho)`
/// by bisection in `log t`, bracketed by `0 < t <= sum lambda_rho`.
pub fn replica_fixed_point(spectrum: &Spectrum, p: usize, ridge: f64) -> Result<ReplicaState, TheoryError> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(TheoryError::Ridge(ridge));
    }
    let lam = spectrum.eigenvalues();
    if lam.is_empty() {
        return Err(TheoryError::EmptySpectrum);
    }
    let pf = p as f64;
    let total: f64 = lam.iter().sum();
    let finish = |t: f64| -> ReplicaState {
        let k = ridge + t;
        let gamma = lam.iter().map(|&l| (l * k / (k + pf * l)).powi(2)).sum();
        ReplicaState { t, gamma, p, ridge, ranks: lam.len(), truncated: lam.len() < 5 * p }
    };
    if p == 0 {
        return Ok(finish(total));
    }
    if ridge == 0.0 && lam.len() <= p {
        return Err(TheoryError::SpectrumTooShort { ranks: lam.len(), p });
    }
    // F(t) increases from F(0+) < 0 to F(total) >= 0
    let f = |t: f64| -> f64 {
        let k = ridge + t;
        t / k - lam.iter().map(|&l| l / (k + pf * l)).sum::<f64>()
    };
    let mut hi = total;
    if f(hi) <= 0.0 {
        return Ok(finish(hi));
    }
    let mut lo = hi;
    let mut steps = 0;
    while f(lo) > 0.0 {
        lo *= 1e-3;
        steps += 1;
        if lo < f64::MIN_POSITIVE * 1e10 || steps > 400 {
            return Err(TheoryError::NoConvergence(steps));
        }
    }
    for _ in 0..REPLICA_MAX_ITER {
        let mid = (lo * hi).sqrt();
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi / lo - 1.0 < 1e-14 {
            return Ok(finish((lo * hi).sqrt()));
        }
    }
    Err(TheoryError::NoConvergence(REPLICA_MAX_ITER))
}

/// Replica test error with its truncation estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicaError {
    /// Sum over the ranks present in the spectrum.
    pub epsilon_b: f64,
    /// Contribution of ranks beyond the spectrum, from the power-law continuation
    /// of the squared odd coefficients; `None` when no decaying fit exists.
    pub tail: Option<f64>,
    pub state: ReplicaState,
}

impl ReplicaError {
    pub fn corrected(&self) -> f64 {
        self.epsilon_b + self.tail.unwrap_or(0.0)
    }
}

pub fn replica_error(spectrum: &Spectrum, p: usize, ridge: f64) -> Result<ReplicaError, TheoryError> {
    let state = replica_fixed_point(spectrum, p, ridge)?;
    let k = state.kappa();
    let pf = p as f64;
    let lam = spectrum.eigenvalues();
    let c2 = spectrum.coefficients_sq();
    if p == 0 {
        let epsilon_b = c2.iter().sum();
        return Ok(ReplicaError { epsilon_b, tail: tail_estimate(spectrum, 1.0), state });
    }
    let load: f64 = lam.iter().map(|&l| pf * (l / (k + pf * l)).powi(2)).sum();
    let stability = 1.0 - load;
    if !(stability > 0.0) {
        return Err(TheoryError::ReplicaInstability(stability));
    }
    let sum: f64 = lam.iter().zip(&c2).map(|(&l, &c)| c * (k / (k + pf * l)).powi(2)).sum();
    Ok(ReplicaError { epsilon_b: sum / stability, tail: tail_estimate(spectrum, 1.0 / stability), state })
}

fn tail_estimate(spectrum: &Spectrum, factor: f64) -> Option<f64> {
    let last = spectrum.entries.last()?.rank;
    let pts: Vec<(f64, f64)> = spectrum
        .entries
        .iter()
        .filter(|e| e.parity == Parity::Odd && e.rank * 10 >= last)
        .filter_map(|e| e.coefficient.filter(|c| *c != 0.0).map(|c| ((e.rank as f64).ln(), (c * c).ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|v| v.0).sum::<f64>() / n;
    let my = pts.iter().map(|v| v.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|v| (v.0 - mx).powi(2)).sum();
    let s = -sxy / sxx;
    if !(s > 1.0) {
        return None;
    }
    let a = (my + s * mx).exp();
    // odd ranks fill every other slot
    let nf = last as f64;
    Some(factor * 0.5 * a * nf.powf(1.0 - s) / (s - 1.0))
}

/// Infinite-`P` predictor on the positive half-line, extended by odd symmetry.
#[derive(Debug, Clone)]
pub struct TabulatedPredictor {
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
    pub lambda_over_p: f64,
    /// Largest discrete residual relative to the largest term of the equation.
    pub residual: f64,
    pub model: DataModel,
}

impl TabulatedPredictor {
    pub fn value(&self, x: f64) -> f64 {
        let ax = x.abs();
        let k = self.nodes.partition_point(|&v| v < ax);
        let v = if k == 0 {
            self.values[0]
        } else if k == self.nodes.len() {
            *self.values.last().unwrap()
        } else {
            let (a, b) = (self.nodes[k - 1], self.nodes[k]);
            let t = (ax - a) / (b - a);
            self.values[k - 1] * (1.0 - t) + self.values[k] * t
        };
        if x < 0.0 {
            -v
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BvpOptions {
    /// Mesh `x_j = x_max (j/N)^3`.
    pub cells: usize,
    /// Source cutoff for singular targets.
    pub epsilon0: f64,
    pub boundary: OuterBoundary,
}

impl Default for BvpOptions {
    fn default() -> Self {
        Self { cells: 4000, epsilon0: 1e-6, boundary: OuterBoundary::Target }
    }
}

/// Condition at `x_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterBoundary {
    /// `f(x_max) = f*(x_max)`.
    Target,
    /// `f'(x_max) = -f(x_max)/sigma`, the decay of the predictor outside the data.
    Free,
}

/// Solves `sigma^2 f'' = (sigma p/r + 1) f - (sigma p/r) f*` with `r = lambda/P` and
/// `p` the sampling density, on `[0, x_max]` with `f(0) = 0` and the outer
/// condition selected in `opts`.
pub fn infinite_p_predictor(model: &DataModel, lambda_over_p: f64, opts: &BvpOptions) -> Result<TabulatedPredictor, TheoryError> {
    model.validate()?;
    if model.dim != 1 {
        return Err(TheoryError::Dimension(model.dim));
    }
    if !(lambda_over_p.is_finite() && lambda_over_p > 0.0) {
        return Err(TheoryError::RidgeRatio(lambda_over_p));
    }
    let n = opts.cells;
    let l = model.x_max;
    let sigma = model.sigma;
    let nodes: Vec<f64> = (0..=n).map(|j| l * (j as f64 / n as f64).powi(3)).collect();
    let scale = (sigma * lambda_over_p).powf(1.0 / (2.0 + model.chi));
    let cells_below = nodes.partition_point(|&x| x < scale).saturating_sub(1);
    if cells_below < 4 {
        return Err(TheoryError::Resolution { cells: cells_below, scale });
    }
    let src = |x: f64| -> f64 {
        let ax = x.abs().max(opts.epsilon0);
        ax.powf(-model.xi)
    };
    let a: Vec<f64> = nodes.iter().map(|&x| sigma * model.sampling_density(x) / lambda_over_p).collect();
    // rows j = 1..=last: lower f_{j-1} + diag f_j + upper f_{j+1} = rhs
    let last = match opts.boundary {
        OuterBoundary::Target => n - 1,
        OuterBoundary::Free => n,
    };
    let mut lower = vec![0.0; last];
    let mut diag = vec![0.0; last];
    let mut upper = vec![0.0; last];
    let mut rhs = vec![0.0; last];
    let s2 = sigma * sigma;
    for j in 1..=last {
        let i = j - 1;
        rhs[i] = a[j] * src(nodes[j]);
        if j < n {
            let (hm, hp) = (nodes[j] - nodes[j - 1], nodes[j + 1] - nodes[j]);
            let c = 2.0 * s2 / (hm + hp);
            lower[i] = -c / hm;
            upper[i] = -c / hp;
            diag[i] = c / hm + c / hp + a[j] + 1.0;
        } else {
            // mirrored ghost node carries f' = -f/sigma
            let h = nodes[n] - nodes[n - 1];
            let c = 2.0 * s2 / (h * h);
            lower[i] = -c;
            diag[i] = c * (1.0 + h / sigma) + a[j] + 1.0;
        }
    }
    let f_end = src(l);
    if last == n - 1 {
        rhs[last - 1] -= upper[last - 1] * f_end;
    }
    let solved = solve_tridiagonal(&lower, &diag, &upper, &rhs);
    let mut values = Vec::with_capacity(n + 1);
    values.push(0.0);
    values.extend_from_slice(&solved);
    if last == n - 1 {
        values.push(f_end);
    }
    let mut residual = 0.0f64;
    for j in 1..=last {
        let i = j - 1;
        let up = if j < n { upper[i] * values[j + 1] } else { 0.0 };
        let source = a[j] * src(nodes[j]);
        let terms = [lower[i] * values[j - 1], diag[i] * values[j], up, source];
        let r = terms[0] + terms[1] + terms[2] - source;
        let size = terms.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        residual = residual.max(r.abs() / size);
    }
    Ok(TabulatedPredictor { nodes, values, lambda_over_p, residual, model: *model })
}

fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let den = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / den;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / den;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Smallest `x` where `f` reaches `1 - 1/e` of its plateau. The plateau is the
/// largest tabulated value, and must hold to within 5% over the outer half of the
/// support.
pub fn characteristic_scale(f: &TabulatedPredictor) -> Result<f64, TheoryError> {
    let plateau = f.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(plateau > 0.0) {
        return Err(TheoryError::NoPlateau("predictor is not positive".into()));
    }
    let half = 0.5 * f.model.x_max;
    let start = f.nodes.partition_point(|&x| x < half);
    if f.values[start..].iter().any(|&v| (v / plateau - 1.0).abs() > 0.05) {
        return Err(TheoryError::NoPlateau(format!("values beyond x = {half} leave 5% of {plateau}")));
    }
    let level = (1.0 - (-1.0f64).exp()) * plateau;
    let k = f.values.iter().position(|&v| v >= level).unwrap();
    if k == 0 {
        return Ok(f.nodes[0]);
    }
    let (x0, x1, v0, v1) = (f.nodes[k - 1], f.nodes[k], f.values[k - 1], f.values[k]);
    Ok(x0 + (x1 - x0) * (level - v0) / (v1 - v0))
}

/// One predicted exponent with a tag naming the law it comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exponent {
    pub value: f64,
    pub law: String,
}

fn exp(value: f64, law: &'static str) -> Exponent {
    Exponent { value, law: law.to_string() }
}

/// Asymptotic exponents for a given `(chi, xi, d)`. Exponents in `P` unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryPrediction {
    pub chi: f64,
    pub xi: f64,
    pub dim: usize,
    /// Ridgeless test error.
    pub test_error: Exponent,
    /// Ridgeless replica error.
    pub spectral_bias_error: Exponent,
    /// Replica error against `lambda/P`.
    pub replica_error_vs_ridge: Exponent,
    /// Cross-over ridge.
    pub crossover_ridge: Exponent,
    /// Boundary scale against `lambda/P`.
    pub boundary_scale: Exponent,
    /// Squared odd coefficients against rank (one dimension only).
    pub coefficient_slope: Option<Exponent>,
    /// Squared coefficients against rank that would make the spectral-bias sum
    /// reproduce the ridgeless test error (one dimension only).
    pub spectral_bias_coefficient_slope: Option<Exponent>,
    /// Eigenvalues against rank (one dimension only).
    pub eigenvalue_slope: Option<Exponent>,
    /// Nearest-neighbour distance at the decision boundary.
    pub r_min: Exponent,
    /// Rank-`P` eigenvalue of the Laplace kernel.
    pub lambda_p: Exponent,
}

pub fn scaling_laws(chi: f64, xi: f64, dim: usize) -> Result<TheoryPrediction, TheoryError> {
    DataModel::new(chi, xi, 1.0, dim, 1.0)?;
    let d = dim as f64;
    let one_d = dim == 1;
    let test_error = if one_d {
        exp(-1.0 + 2.0 * xi / (chi + 1.0), "ridgeless-test-error-1d")
    } else {
        exp(-(1.0 + chi) / (d + chi), "ridgeless-test-error-boundary-ball")
    };
    let spectral_bias_error = if one_d {
        exp(-1.0 - (chi - 4.0 * xi) / (chi + 2.0), "spectral-bias-coefficient-sum")
    } else {
        exp(-(1.0 + 1.0 / d) * (1.0 + chi) / (1.0 + d + chi), "spectral-bias-at-rank-p-eigenvalue")
    };
    let replica_error_vs_ridge = if one_d {
        exp((1.0 + chi - 2.0 * xi) / (2.0 + chi), "replica-error-vs-ridge-1d")
    } else {
        exp((1.0 + chi) / (1.0 + d + chi), "replica-error-vs-ridge")
    };
    Ok(TheoryPrediction {
        chi,
        xi,
        dim,
        test_error,
        spectral_bias_error,
        replica_error_vs_ridge,
        crossover_ridge: exp(-1.0 / (d + chi), "crossover-ridge"),
        boundary_scale: exp(1.0 / (1.0 + d + chi), "boundary-scale"),
        coefficient_slope: one_d.then(|| exp(-(3.0 * chi + 4.0 - 4.0 * xi) / (chi + 2.0), "coefficient-decay")),
        spectral_bias_coefficient_slope: one_d.then(|| exp(-(2.0 * chi + 2.0 - 2.0 * xi) / (chi + 1.0), "spectral-bias-consistent-coefficient-decay")),
        eigenvalue_slope: one_d.then(|| exp(-2.0, "eigenvalue-decay")),
        r_min: exp(-1.0 / (d + chi), "boundary-nearest-neighbour"),
        lambda_p: exp(-1.0 - 1.0 / d, "laplace-rank-p-eigenvalue"),
    })
}

/// `lambda*(P)` with unit prefactor and the kernel width folded in.
pub fn crossover_ridge(p: usize, model: &DataModel) -> f64 {
    (p as f64).powf(-1.0 / (model.dim as f64 + model.chi)) / model.sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{Provenance, SpectrumEntry};

    fn spectrum(values: &[(f64, f64)]) -> Spectrum {
        let entries = values
            .iter()
            .enumerate()
            .map(|(i, &(l, c))| SpectrumEntry {
                rank: i + 1,
                eigenvalue: l,
                parity: if i % 2 == 0 { Parity::Even } else { Parity::Odd },
                coefficient: Some(c),
                provenance: Provenance::Gram,
            })
            .collect();
        Spectrum { entries, model: DataModel::one_d(1.0, 0.0).unwrap() }
    }

    #[test]
    fn zero_samples() {
        let s = spectrum(&[(0.5, 0.3), (0.2, 0.4), (0.05, 0.1)]);
        let st = replica_fixed_point(&s, 0, 0.0).unwrap();
        assert_eq!(st.t, 0.75);
        assert!((st.gamma - (0.25 + 0.04 + 0.0025)).abs() < 1e-15);
        let e = replica_error(&s, 0, 0.3).unwrap();
        assert!((e.epsilon_b - 0.26).abs() < 1e-15);
    }

    #[test]
    fn exponent_table_examples() {
        let t = scaling_laws(1.0, 0.0, 1).unwrap();
        assert!((t.test_error.value + 1.0).abs() < 1e-15);
        assert!((t.spectral_bias_error.value + 4.0 / 3.0).abs() < 1e-15);
        assert!((t.crossover_ridge.value + 0.5).abs() < 1e-15);
        assert!(scaling_laws(1.0, 1.0, 1).is_err());
        assert!(scaling_laws(1.0, 0.0, 0).is_err());
    }
}

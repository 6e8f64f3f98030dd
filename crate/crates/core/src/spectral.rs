//! Spectrum of the Laplace kernel integral operator under the data density.
//!
//! The eigenproblem `int p(y) K(x, y) phi(y) dy = lambda phi(x)` is equivalent to
//! `phi'' = (1/sigma^2 - 2 p / (lambda sigma)) phi`. On the truncated support
//! `[-x_max, x_max]` the integral form adds the Robin condition
//! `phi'(x_max) = -phi(x_max) / sigma`. Eigenpairs of that problem are found by
//! shooting on a Prüfer angle, seeded from either the self-consistent Airy
//! matching scheme or a parity-split Nyström discretisation.
//!
//! Ranks follow the descending order of eigenvalues starting at 1. The ground
//! state is even, so odd eigenfunctions sit at even ranks: even mode `m` has rank
//! `2m + 1` and odd mode `m` has rank `2m + 2`. [`eigenvalues_self_consistent`]
//! instead uses the doublet labelling `rho = 2n + 1` (odd) and `rho = 2n + 2`
//! (even) of the matching construction, which is the Sturm rank plus one; their
//! first odd entry has no eigenfunction behind it.

use std::fmt;
use std::io::{BufRead, Write};

use faer::{Mat, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{DataModel, ModelError};
use crate::quad::{gauss_legendre, GaussRule};
use crate::specialfn::{airy, SpecialFnError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("no turning point: 2p/(lambda sigma) - 1/sigma^2 never becomes positive for lambda = {lambda:e}")]
    NoTurningPoint { lambda: f64 },
    #[error("self-consistent iteration diverged for rank {rank}: last iterates {last:e}, {previous:e}")]
    Divergence { rank: usize, last: f64, previous: f64 },
    #[error("quadrature grid is not symmetric about the origin: {0}")]
    NonSymmetricGrid(String),
    #[error("need at least {need} exact odd-rank coefficients, have {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("x = {x} is outside the bulk window [{lo}, {hi}]")]
    OutOfWindow { x: f64, lo: f64, hi: f64 },
    #[error("shooting failed for {parity} mode {mode}: {detail}")]
    Shooting { mode: usize, parity: Parity, detail: String },
    #[error("eigenvalue computation failed: {0}")]
    Eigen(String),
    #[error("spectrum is not strictly decreasing at rank {0}")]
    Ordering(usize),
    #[error("malformed spectrum file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Special(#[from] SpecialFnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Odd,
    Even,
}

impl Parity {
    pub fn sign(self) -> f64 {
        match self {
            Parity::Odd => -1.0,
            Parity::Even => 1.0,
        }
    }
}

impl fmt::Display for Parity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parity::Odd => "odd",
            Parity::Even => "even",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Gram,
    SelfConsistent,
    /// Refined by shooting on the eigenfunction equation.
    Ode,
    Extrapolated,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Gram => "gram",
            Provenance::SelfConsistent => "self-consistent",
            Provenance::Ode => "ode",
            Provenance::Extrapolated => "extrapolated",
        })
    }
}

impl std::str::FromStr for Provenance {
    type Err = SpectralError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gram" => Ok(Provenance::Gram),
            "self-consistent" => Ok(Provenance::SelfConsistent),
            "ode" => Ok(Provenance::Ode),
            "extrapolated" => Ok(Provenance::Extrapolated),
            other => Err(SpectralError::Format(format!("unknown provenance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub rank: usize,
    pub eigenvalue: f64,
    pub parity: Parity,
    /// Projection of the target; `None` when not computed.
    pub coefficient: Option<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub entries: Vec<SpectrumEntry>,
    pub model: DataModel,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.eigenvalue).collect()
    }

    /// Squared coefficients, with missing values read as zero.
    pub fn coefficients_sq(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.coefficient.map_or(0.0, |c| c * c)).collect()
    }

    pub fn of_parity(&self, parity: Parity) -> impl Iterator<Item = &SpectrumEntry> {
        self.entries.iter().filter(move |e| e.parity == parity)
    }

    /// Checks strict decrease and positivity.
    pub fn check_order(&self) -> Result<(), SpectralError> {
        for (i, e) in self.entries.iter().enumerate() {
            if !(e.eigenvalue > 0.0) {
                return Err(SpectralError::Ordering(e.rank));
            }
            if i > 0 && !(e.eigenvalue < self.entries[i - 1].eigenvalue) {
                return Err(SpectralError::Ordering(e.rank));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "rank,eigenvalue,parity,coefficient,provenance")?;
        for e in &self.entries {
            let c = e.coefficient.map_or(String::new(), |c| format!("{c:e}"));
            writeln!(out, "{},{:e},{},{},{}", e.rank, e.eigenvalue, e.parity, c, e.provenance)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, model: DataModel) -> Result<Self, SpectralError> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| SpectralError::Format(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("rank") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(SpectralError::Format(format!("line {}: expected 5 fields", i + 1)));
            }
            let bad = |what: &str| SpectralError::Format(format!("line {}: bad {what}", i + 1));
            let parity = match f[2] {
                "odd" => Parity::Odd,
                "even" => Parity::Even,
                _ => return Err(bad("parity")),
            };
            entries.push(SpectrumEntry {
                rank: f[0].parse().map_err(|_| bad("rank"))?,
                eigenvalue: f[1].parse().map_err(|_| bad("eigenvalue"))?,
                parity,
                coefficient: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad("coefficient"))?) },
                provenance: f[4].parse()?,
            });
        }
        Ok(Spectrum { entries, model })
    }
}

/// Rank of a mode in the descending order of eigenvalues.
pub fn rank_of(parity: Parity, mode: usize) -> usize {
    match parity {
        Parity::Even => 2 * mode + 1,
        Parity::Odd => 2 * mode + 2,
    }
}

/// Inverse of [`rank_of`].
pub fn mode_of(rank: usize) -> (Parity, usize) {
    assert!(rank >= 1);
    if rank % 2 == 1 {
        (Parity::Even, (rank - 1) / 2)
    } else {
        (Parity::Odd, (rank - 2) / 2)
    }
}

/// Untruncated density with the normalising constant cached.
#[derive(Debug, Clone, Copy)]
struct Density {
    chi: f64,
    norm: f64,
}

impl Density {
    fn raw(model: &DataModel) -> Self {
        let chi = model.chi;
        Self { chi, norm: (-libm::lgamma(0.5 * (1.0 + chi))).exp() }
    }

    fn sampling(model: &DataModel) -> Self {
        let mut d = Self::raw(model);
        d.norm /= model.truncated_mass();
        d
    }

    #[inline]
    fn at(&self, x: f64) -> f64 {
        let x = x.abs();
        if self.chi == 0.0 {
            return self.norm * (-x * x).exp();
        }
        if x == 0.0 {
            return 0.0;
        }
        self.norm * (self.chi * x.ln() - x * x).exp()
    }

    fn peak(&self) -> f64 {
        (0.5 * self.chi).sqrt()
    }
}

/// Roots of `Gamma^2(x) = 2 p(x) / (lambda sigma) - 1/sigma^2` on the positive axis.
#[derive(Debug, Clone, Copy)]
pub struct TurningPoints {
    pub x1: f64,
    pub x2: f64,
    pub lambda: f64,
    sigma: f64,
    density: Density,
}

impl TurningPoints {
    pub fn gamma_sq(&self, x: f64) -> f64 {
        2.0 * self.density.at(x) / (self.lambda * self.sigma) - 1.0 / (self.sigma * self.sigma)
    }
}

fn bisect(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if m <= lo || m >= hi || (hi - lo) <= 1e-15 * hi.abs() {
            break;
        }
        if (f(m) > 0.0) == (flo > 0.0) {
            lo = m;
        } else {
            hi = m;
        }
    }
    0.5 * (lo + hi)
}

pub fn turning_points(lambda: f64, model: &DataModel) -> Result<TurningPoints, SpectralError> {
    model.validate()?;
    let density = Density::raw(model);
    let sigma = model.sigma;
    let g = |x: f64| 2.0 * density.at(x) / (lambda * sigma) - 1.0 / (sigma * sigma);
    let peak = density.peak();
    if !(lambda > 0.0) || !(g(peak) > 0.0) {
        return Err(SpectralError::NoTurningPoint { lambda });
    }
    let x1 = if model.chi == 0.0 { 0.0 } else { bisect(g, 0.0, peak) };
    let mut hi = peak.max(1.0);
    while g(hi) > 0.0 {
        hi *= 2.0;
    }
    let x2 = bisect(g, peak, hi);
    Ok(TurningPoints { x1, x2, lambda, sigma, density })
}

/// `int_{x1}^{x2} sqrt(2p/sigma - lambda/sigma^2) dx`, i.e. `sqrt(lambda)` times the phase.
pub fn phase_numerator(tp: &TurningPoints) -> f64 {
    let (a, b) = (tp.x1, tp.x2);
    let half = 0.5 * (b - a);
    let rule = phase_rule();
    let lam = tp.lambda;
    let f = |x: f64| (lam * tp.gamma_sq(x)).max(0.0).sqrt();
    // x = a + half (1 - cos t) removes the square-root endpoints
    let panels = 8;
    let mut s = 0.0;
    for k in 0..panels {
        let t0 = std::f64::consts::PI * k as f64 / panels as f64;
        let t1 = std::f64::consts::PI * (k + 1) as f64 / panels as f64;
        s += rule.integrate(t0, t1, |t| f(a + half * (1.0 - t.cos())) * half * t.sin());
    }
    s
}

fn phase_rule() -> &'static GaussRule {
    static RULE: std::sync::OnceLock<GaussRule> = std::sync::OnceLock::new();
    RULE.get_or_init(|| GaussRule::new(24))
}

/// Argument of the Airy functions in the inner matching.
pub fn airy_argument(lambda: f64, model: &DataModel) -> f64 {
    let chi = model.chi;
    if chi == 0.0 {
        return 0.0;
    }
    let lg = libm::lgamma(0.5 * (1.0 + chi));
    let ln = chi.ln() + (2.0 / chi) * (lambda.ln() + lg) - (2.0 / chi) * 2f64.ln() - 2.0 * (1.0 + chi) * model.sigma.ln();
    (ln / 3.0).exp()
}

/// Mixing coefficient `Ai(mu)/Bi(mu)` (odd) or `Ai'(mu)/Bi'(mu)` (even).
pub fn mixing_coefficient(lambda: f64, parity: Parity, model: &DataModel) -> Result<f64, SpectralError> {
    let a = airy::<f64>(airy_argument(lambda, model))?;
    Ok(match parity {
        Parity::Odd => a.ai / a.bi,
        Parity::Even => a.ai_prime / a.bi_prime,
    })
}

/// Options for [`eigenvalues_self_consistent`].
#[derive(Debug, Clone, Copy)]
pub struct SelfConsistentOptions {
    pub damping: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SelfConsistentOptions {
    fn default() -> Self {
        Self { damping: 0.5, rel_tol: 1e-12, max_iter: 1000 }
    }
}

fn doublet(rank: usize) -> (Parity, usize) {
    if rank % 2 == 1 {
        (Parity::Odd, (rank - 1) / 2)
    } else {
        (Parity::Even, (rank - 2) / 2)
    }
}

/// Solves the self-consistent Airy-matching relation for one doublet-labelled rank.
pub fn self_consistent_eigenvalue(
    rank: usize,
    model: &DataModel,
    guess: Option<f64>,
    opts: &SelfConsistentOptions,
) -> Result<f64, SpectralError> {
    assert!(rank >= 1);
    let (parity, n) = doublet(rank);
    let map = |lam: f64| -> Result<f64, SpectralError> {
        let tp = turning_points(lam, model)?;
        let gamma = mixing_coefficient(lam, parity, model)?;
        let den = (-1.0 / gamma).atan() + n as f64 * std::f64::consts::PI;
        Ok((phase_numerator(&tp) / den).powi(2))
    };
    let mut lam = match guess {
        Some(g) => g,
        None => initial_guess(rank, parity, n, model)?,
    };
    let mut prev = lam;
    for _ in 0..opts.max_iter {
        let next = (1.0 - opts.damping) * lam + opts.damping * map(lam)?;
        prev = lam;
        lam = next;
        if ((lam - prev) / lam).abs() < opts.rel_tol {
            return Ok(lam);
        }
    }
    Err(SpectralError::Divergence { rank, last: lam, previous: prev })
}

fn initial_guess(rank: usize, parity: Parity, n: usize, model: &DataModel) -> Result<f64, SpectralError> {
    // lambda -> 0 limit of the numerator, with a moderate starting value
    let density = Density::raw(model);
    let upper = 6.0f64.max(4.0 * density.peak());
    let i0 = crate::quad::integrate_adaptive(|x| (2.0 * density.at(x) / model.sigma).sqrt(), 0.0, upper, 1e-10, 0.0);
    let gamma = if model.chi == 0.0 {
        mixing_coefficient(0.0, parity, model)?
    } else {
        mixing_coefficient(1e-300, parity, model)?
    };
    let den = (-1.0 / gamma).atan() + n as f64 * std::f64::consts::PI;
    let _ = rank;
    let mut lam = (i0 / den).powi(2);
    // keep the start inside the domain where turning points exist
    let sup = 2.0 * density.at(density.peak()) * model.sigma;
    if lam >= sup {
        lam = 0.5 * sup;
    }
    Ok(lam)
}

/// Self-consistent eigenvalues for doublet-labelled ranks `rank_range`.
pub fn eigenvalues_self_consistent(
    model: &DataModel,
    rank_range: std::ops::RangeInclusive<usize>,
    opts: &SelfConsistentOptions,
) -> Result<Spectrum, SpectralError> {
    model.validate()?;
    let ranks: Vec<usize> = rank_range.collect();
    let values: Vec<Result<f64, SpectralError>> =
        ranks.par_iter().map(|&r| self_consistent_eigenvalue(r, model, None, opts)).collect();
    let mut entries = Vec::with_capacity(ranks.len());
    for (&r, v) in ranks.iter().zip(values) {
        entries.push(SpectrumEntry {
            rank: r,
            eigenvalue: v?,
            parity: doublet(r).0,
            coefficient: None,
            provenance: Provenance::SelfConsistent,
        });
    }
    Ok(Spectrum { entries, model: *model })
}

/// Symmetric quadrature grid for the Nyström discretisation.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    /// Ascending, symmetric about the origin, without a node at zero.
    pub nodes: Vec<f64>,
    /// Plain `dx` weights.
    pub weights: Vec<f64>,
}

/// Composite Gauss-Legendre grid on `[-x_max, x_max]` with panel widths shrinking
/// where `sqrt(p)` is large, so that oscillatory eigenfunctions are resolved evenly.
pub fn gram_quadrature(model: &DataModel, half_size: usize) -> QuadratureGrid {
    let order = 8usize;
    let panels = half_size.div_ceil(order).max(1);
    let density = Density::sampling(model);
    let l = model.x_max;
    let fine = 20_000usize;
    let peak = density.at(density.peak()).sqrt();
    let w = |x: f64| density.at(x).sqrt() + 0.05 * peak;
    let mut cum = vec![0.0; fine + 1];
    for i in 0..fine {
        let (a, b) = (l * i as f64 / fine as f64, l * (i + 1) as f64 / fine as f64);
        cum[i + 1] = cum[i] + (b - a) * (w(a) + 4.0 * w(0.5 * (a + b)) + w(b)) / 6.0;
    }
    let total = cum[fine];
    let mut edges = vec![0.0];
    let mut j = 0usize;
    for k in 1..panels {
        let s = total * k as f64 / panels as f64;
        while cum[j + 1] < s {
            j += 1;
        }
        let t = (s - cum[j]) / (cum[j + 1] - cum[j]);
        edges.push(l * (j as f64 + t) / fine as f64);
    }
    edges.push(l);
    let (gx, gw) = gauss_legendre(order);
    let mut pos = Vec::with_capacity(panels * order);
    let mut pw = Vec::with_capacity(panels * order);
    for e in edges.windows(2) {
        let (mid, half) = (0.5 * (e[0] + e[1]), 0.5 * (e[1] - e[0]));
        for (x, wt) in gx.iter().zip(&gw) {
            pos.push(mid + half * x);
            pw.push(half * wt);
        }
    }
    let mut nodes: Vec<f64> = pos.iter().rev().map(|x| -x).collect();
    let mut weights: Vec<f64> = pw.iter().rev().copied().collect();
    nodes.extend_from_slice(&pos);
    weights.extend_from_slice(&pw);
    QuadratureGrid { nodes, weights }
}

/// Eigenvalues of the discretised operator `D^{1/2} K D^{1/2}` with `D` the
/// density-weighted quadrature weights, split exactly into parity blocks.
/// Entries carry Sturm ranks; only roughly the top tenth is trustworthy.
pub fn eigenvalues_gram(nodes: &[f64], weights: &[f64], model: &DataModel) -> Result<Spectrum, SpectralError> {
    model.validate()?;
    let n = nodes.len();
    if weights.len() != n || n == 0 || n % 2 == 1 {
        return Err(SpectralError::NonSymmetricGrid("node and weight counts must match and be even".into()));
    }
    let h = n / 2;
    for i in 0..h {
        let (a, b) = (nodes[h - 1 - i], nodes[h + i]);
        if !(b > 0.0) || (a + b).abs() > 1e-12 * b.max(1.0) || (weights[h - 1 - i] - weights[h + i]).abs() > 1e-12 * weights[h + i].abs() {
            return Err(SpectralError::NonSymmetricGrid(format!("pair {i}: ({a}, {b})")));
        }
        if i > 0 && !(nodes[h + i] > nodes[h + i - 1]) {
            return Err(SpectralError::NonSymmetricGrid("nodes must ascend".into()));
        }
    }
    let density = Density::sampling(model);
    let x = &nodes[h..];
    let d: Vec<f64> = (0..h).map(|i| weights[h + i] * density.at(x[i])).collect();
    let sigma = model.sigma;
    let block = |sign: f64| -> Result<Vec<f64>, SpectralError> {
        let a = Mat::from_fn(h, h, |i, j| {
            let k = (-(x[i] - x[j]).abs() / sigma).exp() + sign * (-(x[i] + x[j]) / sigma).exp();
            (d[i] * d[j]).sqrt() * k
        });
        let mut ev = a.self_adjoint_eigenvalues(Side::Lower).map_err(|e| SpectralError::Eigen(format!("{e:?}")))?;
        ev.sort_by(|p, q| q.total_cmp(p));
        Ok(ev)
    };
    let even = block(1.0)?;
    let odd = block(-1.0)?;
    let mut entries = Vec::with_capacity(n);
    let mut tagged: Vec<(f64, Parity)> = even.into_iter().map(|v| (v, Parity::Even)).chain(odd.into_iter().map(|v| (v, Parity::Odd))).collect();
    tagged.sort_by(|p, q| q.0.total_cmp(&p.0));
    for (i, (v, p)) in tagged.into_iter().enumerate() {
        entries.push(SpectrumEntry { rank: i + 1, eigenvalue: v, parity: p, coefficient: None, provenance: Provenance::Gram });
    }
    Ok(Spectrum { entries, model: *model })
}

/// Eigenvalues of one parity from [`eigenvalues_gram`], descending.
pub fn parity_values(spectrum: &Spectrum, parity: Parity) -> Vec<f64> {
    spectrum.of_parity(parity).map(|e| e.eigenvalue).collect()
}

/// Eigenfunction on the positive half-line, extended by parity.
#[derive(Debug, Clone)]
pub struct TabulatedFunction {
    /// Ascending nodes on `[0, x_max]`: step ends interleaved with step midpoints.
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
    /// Composite Simpson weights for `int_0^{x_max} g dx`.
    pub weights: Vec<f64>,
    /// True at step ends, where the operator residual is evaluated.
    pub step_ends: Vec<bool>,
    pub parity: Parity,
    pub lambda: f64,
    /// `|phi'(x_max) + phi(x_max)/sigma| / max(|phi'(x_max)|, |phi(x_max)|/sigma)`.
    pub boundary_mismatch: f64,
    /// Largest `|phi|` relative to its bulk envelope, when integration was cut short.
    pub blow_up: Option<f64>,
    /// Sign changes on `(0, x_max]`.
    pub zero_count: usize,
}

impl TabulatedFunction {
    /// Value at any `x` by parity and linear interpolation.
    pub fn value(&self, x: f64) -> f64 {
        let ax = x.abs();
        let k = self.nodes.partition_point(|&v| v < ax).min(self.nodes.len() - 1);
        let v = if k == 0 || self.nodes[k] == ax {
            self.values[k]
        } else {
            let (a, b) = (self.nodes[k - 1], self.nodes[k]);
            let t = (ax - a) / (b - a);
            self.values[k - 1] * (1.0 - t) + self.values[k] * t
        };
        if x < 0.0 && self.parity == Parity::Odd {
            -v
        } else {
            v
        }
    }

    /// `int_{-x_max}^{x_max} p phi^2`.
    pub fn norm_sq(&self, model: &DataModel) -> f64 {
        let d = Density::sampling(model);
        2.0 * self.nodes.iter().zip(&self.values).zip(&self.weights).map(|((&x, &v), &w)| w * d.at(x) * v * v).sum::<f64>()
    }
}

/// Options for the shooting integrator.
#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    /// Target phase advance per step.
    pub step_factor: f64,
    /// Upper bound on the step length.
    pub max_step: f64,
    /// Tolerance on the boundary angle mismatch.
    pub angle_tol: f64,
    pub max_iter: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { step_factor: 0.1, max_step: 0.02, angle_tol: 1e-10, max_iter: 60 }
    }
}

/// Step ladder and tabulated density for integration at `u = 1/sqrt(lambda)` up to `u_max`.
#[derive(Debug, Clone)]
pub struct ShootingGrid {
    x: Vec<f64>,
    p_end: Vec<f64>,
    p_mid: Vec<f64>,
    u_max: f64,
    sigma: f64,
    x_max: f64,
}

impl ShootingGrid {
    pub fn new(model: &DataModel, u_max: f64, opts: &OdeOptions) -> Self {
        let d = Density::sampling(model);
        let (sigma, l) = (model.sigma, model.x_max);
        let kscale = u_max * (2.0 / sigma).sqrt();
        let kpeak = kscale * d.at(d.peak()).sqrt() + 1.0 / l;
        let h_min = 1e-3 * opts.step_factor / kpeak;
        let mut x = vec![0.0];
        let mut p_end = vec![d.at(0.0)];
        let mut p_mid = Vec::new();
        let mut cur = 0.0f64;
        while cur < l {
            let k = kscale * d.at(cur).sqrt() + 1.0 / l;
            let mut h = (opts.step_factor / k).min(opts.max_step).min(0.25 * cur + h_min);
            // do not step across the rising edge of the density at small x
            if cur + h > l {
                h = l - cur;
            } else if l - (cur + h) < 0.25 * h {
                h = l - cur;
            }
            p_mid.push(d.at(cur + 0.5 * h));
            cur = if cur + h >= l { l } else { cur + h };
            x.push(cur);
            p_end.push(d.at(cur));
        }
        Self { x, p_end, p_mid, u_max, sigma, x_max: l }
    }

    pub fn steps(&self) -> usize {
        self.p_mid.len()
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    #[inline]
    fn q(&self, p: f64, c: f64) -> f64 {
        // phi'' = q phi
        1.0 / (self.sigma * self.sigma) - c * p
    }

    fn angle_scale(&self, p: f64, c: f64) -> f64 {
        ((c * p - 1.0 / (self.sigma * self.sigma)).abs() + 1.0 / (self.x_max * self.x_max)).sqrt()
    }
}

struct PassResult {
    angle: f64,
    phi: f64,
    dphi: f64,
    zeros: usize,
}

fn start(parity: Parity) -> (f64, f64) {
    match parity {
        Parity::Odd => (0.0, 1.0),
        Parity::Even => (1.0, 0.0),
    }
}

/// One RK4 pass; `record` receives `(x0, h, phi0, dphi0, phi1, dphi1)` per step.
fn integrate_pass(grid: &ShootingGrid, u: f64, parity: Parity, mut record: Option<&mut dyn FnMut(f64, f64, f64, f64, f64, f64)>) -> PassResult {
    let c = 2.0 * u * u / grid.sigma;
    let (mut y, mut z) = start(parity);
    let mut sign = if parity == Parity::Odd { 1.0 } else { y.signum() };
    let mut zeros = 0usize;
    for j in 0..grid.steps() {
        let h = grid.x[j + 1] - grid.x[j];
        let q0 = grid.q(grid.p_end[j], c);
        let qm = grid.q(grid.p_mid[j], c);
        let q1 = grid.q(grid.p_end[j + 1], c);
        let (k1y, k1z) = (z, q0 * y);
        let (y2, z2) = (y + 0.5 * h * k1y, z + 0.5 * h * k1z);
        let (k2y, k2z) = (z2, qm * y2);
        let (y3, z3) = (y + 0.5 * h * k2y, z + 0.5 * h * k2z);
        let (k3y, k3z) = (z3, qm * y3);
        let (y4, z4) = (y + h * k3y, z + h * k3z);
        let (k4y, k4z) = (z4, q1 * y4);
        let yn = y + h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        let zn = z + h / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z);
        if let Some(r) = record.as_mut() {
            r(grid.x[j], h, y, z, yn, zn);
        }
        if yn != 0.0 && yn.signum() != sign {
            zeros += 1;
            sign = yn.signum();
        }
        y = yn;
        z = zn;
        // keep the amplitude representable in long forbidden stretches
        let m = y.abs().max(z.abs());
        if m > 1e100 {
            y /= m;
            z /= m;
        }
    }
    let s = grid.angle_scale(*grid.p_end.last().unwrap(), c);
    let a = (s * y * sign).atan2(z * sign);
    PassResult { angle: zeros as f64 * std::f64::consts::PI + a, phi: y, dphi: z, zeros }
}

/// Prüfer angle at `x_max` satisfying the Robin condition for mode `mode`.
fn target_angle(grid: &ShootingGrid, u: f64, mode: usize) -> f64 {
    let c = 2.0 * u * u / grid.sigma;
    let s = grid.angle_scale(*grid.p_end.last().unwrap(), c);
    mode as f64 * std::f64::consts::PI + std::f64::consts::FRAC_PI_2 + (1.0 / (s * grid.sigma)).atan()
}

fn mismatch(grid: &ShootingGrid, u: f64, parity: Parity, mode: usize) -> f64 {
    integrate_pass(grid, u, parity, None).angle - target_angle(grid, u, mode)
}

/// Eigenvalue of the truncated problem for the given parity and mode.
pub fn shoot_eigenvalue(
    model: &DataModel,
    parity: Parity,
    mode: usize,
    guess: f64,
    grid: Option<&ShootingGrid>,
    opts: &OdeOptions,
) -> Result<f64, SpectralError> {
    let fail = |detail: String| SpectralError::Shooting { mode, parity, detail };
    if !(guess > 0.0 && guess.is_finite()) {
        return Err(fail(format!("invalid guess {guess}")));
    }
    let owned;
    let mut u0 = 1.0 / guess.sqrt();
    let grid = match grid {
        Some(g) if g.u_max >= 1.02 * u0 => g,
        _ => {
            owned = ShootingGrid::new(model, 2.0 * u0, opts);
            &owned
        }
    };
    let mut f0 = mismatch(grid, u0, parity, mode);
    // bracket the root; the angle grows with u
    let (mut lo, mut hi): (Option<(f64, f64)>, Option<(f64, f64)>) = (None, None);
    let assign = |u: f64, f: f64, lo: &mut Option<(f64, f64)>, hi: &mut Option<(f64, f64)>| {
        if f < 0.0 {
            if lo.map_or(true, |(ul, _)| u > ul) {
                *lo = Some((u, f));
            }
        } else if hi.map_or(true, |(uh, _)| u < uh) {
            *hi = Some((u, f));
        }
    };
    assign(u0, f0, &mut lo, &mut hi);
    if f0.abs() < opts.angle_tol {
        return Ok(1.0 / (u0 * u0));
    }
    let theta0 = (mode as f64 + 1.0) * std::f64::consts::PI;
    let mut u1 = u0 * (1.0 - f0 / theta0);
    if !(u1 > 0.0) {
        u1 = 0.5 * u0;
    }
    for _ in 0..opts.max_iter {
        if u1 > grid.u_max {
            return Err(fail(format!("u = {u1} left the integration grid")));
        }
        let f1 = mismatch(grid, u1, parity, mode);
        assign(u1, f1, &mut lo, &mut hi);
        if f1.abs() < opts.angle_tol {
            return Ok(1.0 / (u1 * u1));
        }
        let mut next = if f1 != f0 { u1 - f1 * (u1 - u0) / (f1 - f0) } else { u1 * (1.0 + 1e-3) };
        match (lo, hi) {
            (Some((ul, _)), Some((uh, _))) => {
                if !(next > ul && next < uh) {
                    next = 0.5 * (ul + uh);
                }
                if (uh - ul) <= 1e-15 * uh {
                    return Ok(1.0 / (next * next));
                }
            }
            (Some((ul, _)), None) => {
                if !(next > ul) {
                    next = ul * 1.1;
                }
            }
            (None, Some((uh, _))) => {
                if !(next < uh && next > 0.0) {
                    next = uh / 1.1;
                }
            }
            (None, None) => unreachable!(),
        }
        u0 = u1;
        f0 = f1;
        u1 = next;
    }
    Err(fail("no convergence".into()))
}

/// Integrates the eigenfunction equation at `lambda` and returns the normalised
/// solution. When `lambda` is not an eigenvalue the solution drifts away from the
/// decaying branch; the integration is cut where `|phi|` exceeds `10^3` times its
/// bulk envelope and the overshoot is reported.
pub fn eigenfunction_ode(lambda: f64, parity: Parity, model: &DataModel, opts: &OdeOptions) -> Result<TabulatedFunction, SpectralError> {
    model.validate()?;
    let u = 1.0 / lambda.sqrt();
    let grid = ShootingGrid::new(model, u, opts);
    Ok(tabulate(&grid, u, parity, model))
}

fn tabulate(grid: &ShootingGrid, u: f64, parity: Parity, model: &DataModel) -> TabulatedFunction {
    let n = grid.steps();
    let mut nodes = Vec::with_capacity(2 * n + 1);
    let mut values = Vec::with_capacity(2 * n + 1);
    let mut weights = Vec::with_capacity(2 * n + 1);
    let mut step_ends = Vec::with_capacity(2 * n + 1);
    let (y0, _) = start(parity);
    nodes.push(0.0);
    values.push(y0);
    weights.push(0.0);
    step_ends.push(true);
    let mut envelope = 0.0f64;
    let mut blow_up = None;
    let end = {
        let mut rec = |x0: f64, h: f64, phi0: f64, dphi0: f64, phi1: f64, dphi1: f64| {
            if blow_up.is_some() {
                return;
            }
            let mid = 0.5 * (phi0 + phi1) + h * (dphi0 - dphi1) / 8.0;
            let amp = phi1.abs().max(mid.abs());
            if envelope > 0.0 && amp > 1e3 * envelope {
                blow_up = Some(amp / envelope);
                return;
            }
            envelope = envelope.max(amp);
            let last = weights.len() - 1;
            weights[last] += h / 6.0;
            nodes.push(x0 + 0.5 * h);
            values.push(mid);
            weights.push(4.0 * h / 6.0);
            step_ends.push(false);
            nodes.push(x0 + h);
            values.push(phi1);
            weights.push(h / 6.0);
            step_ends.push(true);
        };
        integrate_pass(grid, u, parity, Some(&mut rec))
    };
    let sigma = model.sigma;
    let bm = (end.dphi + end.phi / sigma).abs() / end.dphi.abs().max(end.phi.abs() / sigma);
    let mut f = TabulatedFunction {
        nodes,
        values,
        weights,
        step_ends,
        parity,
        lambda: 1.0 / (u * u),
        boundary_mismatch: bm,
        blow_up,
        zero_count: end.zeros,
    };
    let nrm = f.norm_sq(model).sqrt();
    f.values.iter_mut().for_each(|v| *v /= nrm);
    f
}

/// Eigenvalue and normalised eigenfunction of a mode, refined by shooting.
pub fn eigenpair_ode(
    model: &DataModel,
    parity: Parity,
    mode: usize,
    guess: f64,
    opts: &OdeOptions,
) -> Result<TabulatedFunction, SpectralError> {
    let u = 1.0 / guess.sqrt();
    let grid = ShootingGrid::new(model, 2.0 * u, opts);
    let lam = shoot_eigenvalue(model, parity, mode, guess, Some(&grid), opts)?;
    let mut f = tabulate(&grid, 1.0 / lam.sqrt(), parity, model);
    f.lambda = lam;
    Ok(f)
}

/// `|| int p K phi - lambda phi || / || lambda phi ||` in the `p`-weighted norm,
/// with the operator applied by the quadrature of the tabulation and the
/// residual sampled at step ends.
pub fn verify_eigenpair(phi: &TabulatedFunction, lambda: f64, model: &DataModel) -> f64 {
    let d = Density::sampling(model);
    let sigma = model.sigma;
    let n = phi.nodes.len();
    let c: Vec<f64> = (0..n).map(|j| phi.weights[j] * d.at(phi.nodes[j]) * phi.values[j]).collect();
    // S(x_i) = sum_j c_j e^{-|x_i - x_j|/sigma}
    let mut left = vec![0.0; n];
    let mut right = vec![0.0; n];
    for i in 0..n {
        left[i] = c[i] + if i > 0 { (-(phi.nodes[i] - phi.nodes[i - 1]) / sigma).exp() * left[i - 1] } else { 0.0 };
    }
    for i in (0..n).rev() {
        right[i] = if i + 1 < n { (-(phi.nodes[i + 1] - phi.nodes[i]) / sigma).exp() * (c[i + 1] + right[i + 1]) } else { 0.0 };
    }
    // mirror contribution sum_j c_j e^{-(x_i + x_j)/sigma}
    let mirror: f64 = (0..n).map(|j| c[j] * (-phi.nodes[j] / sigma).exp()).sum();
    let s = phi.parity.sign();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        if !phi.step_ends[i] {
            continue;
        }
        let tphi = left[i] + right[i] + s * (-phi.nodes[i] / sigma).exp() * mirror;
        let w = d.at(phi.nodes[i]) * step_end_weight(phi, i);
        let r = tphi - lambda * phi.values[i];
        num += w * r * r;
        den += w * (lambda * phi.values[i]).powi(2);
    }
    (num / den).sqrt()
}

fn step_end_weight(phi: &TabulatedFunction, i: usize) -> f64 {
    // trapezoid weight on the step-end subgrid
    let prev = if i >= 2 { phi.nodes[i] - phi.nodes[i - 2] } else { 0.0 };
    let next = if i + 2 < phi.nodes.len() { phi.nodes[i + 2] - phi.nodes[i] } else { 0.0 };
    0.5 * (prev + next)
}

/// `c = int p f* phi dx` over `[-x_max, x_max]`, summed in mirrored pairs so that
/// even functions give exactly zero.
pub fn project_coefficient(phi: &TabulatedFunction, model: &DataModel) -> f64 {
    let d = Density::sampling(model);
    let s = phi.parity.sign();
    let mut acc = 0.0;
    for j in 0..phi.nodes.len() {
        let x = phi.nodes[j];
        if x == 0.0 {
            continue;
        }
        let f = model.target_or_zero(x);
        let v = phi.values[j];
        // f*(-x) phi(-x) = -f (s v)
        acc += phi.weights[j] * d.at(x) * (f * v - f * (s * v));
    }
    acc
}

/// Calibrated constants of the bulk window `[zeta lambda^{1/(2+chi)}, x2 - delta/sqrt(-ln lambda)]`.
pub const WKB_ZETA: f64 = 6.0;
pub const WKB_DELTA: f64 = 1.5;
/// The window also ends at this fraction of `x_max`, where reflection off the
/// truncation edge starts to shift the phase.
pub const WKB_EDGE: f64 = 0.8;

pub fn wkb_window(lambda: f64, model: &DataModel) -> Result<(f64, f64), SpectralError> {
    let tp = turning_points(lambda, model)?;
    let lo = (WKB_ZETA * lambda.powf(1.0 / (2.0 + model.chi))).max(tp.x1);
    let hi = (tp.x2 - WKB_DELTA / (-lambda.ln()).sqrt()).min(WKB_EDGE * model.x_max);
    Ok((lo, hi))
}

/// Bulk WKB form `Gamma^2(x)^{-1/4} [sin(S(x) + pi/4) - gamma cos(S(x) + pi/4)]`
/// with `S(x) = int_{x1}^x sqrt(Gamma^2)`, up to a constant factor.
pub fn wkb_bulk(x: f64, lambda: f64, parity: Parity, model: &DataModel) -> Result<f64, SpectralError> {
    let (lo, hi) = wkb_window(lambda, model)?;
    let ax = x.abs();
    if !(ax >= lo && ax <= hi) {
        return Err(SpectralError::OutOfWindow { x, lo, hi });
    }
    let tp = turning_points(lambda, model)?;
    let gamma = mixing_coefficient(lambda, parity, model)?;
    let s = bulk_phase(&tp, ax);
    let arg = s + std::f64::consts::FRAC_PI_4;
    let v = tp.gamma_sq(ax).powf(-0.25) * (arg.sin() - gamma * arg.cos());
    Ok(if x < 0.0 && parity == Parity::Odd { -v } else { v })
}

/// `int_{x1}^{x} sqrt(Gamma^2(z)) dz` with the substitution `z = x1 + t^2`.
pub fn bulk_phase(tp: &TurningPoints, x: f64) -> f64 {
    if x <= tp.x1 {
        return 0.0;
    }
    let rule = phase_rule();
    let tmax = (x - tp.x1).sqrt();
    let panels = 16;
    let mut s = 0.0;
    for k in 0..panels {
        let (a, b) = (tmax * k as f64 / panels as f64, tmax * (k + 1) as f64 / panels as f64);
        s += rule.integrate(a, b, |t| 2.0 * t * tp.gamma_sq(tp.x1 + t * t).max(0.0).sqrt());
    }
    s
}

/// Power-law fit `y = A x^slope` by least squares in log-log.
fn loglog_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Extends a spectrum to `target_rank`. Squared coefficients of odd ranks follow a
/// linear fit of `log c^2` against `log rank` over the upper decade of exact odd
/// ranks (all of them when that decade holds fewer than ten); eigenvalues follow
/// the fitted power law of the last decade, anchored at the last exact rank so
/// that the order stays strict.
pub fn extrapolate_coefficients(spectrum: &Spectrum, target_rank: usize) -> Result<Spectrum, SpectralError> {
    let exact: Vec<&SpectrumEntry> =
        spectrum.entries.iter().filter(|e| e.parity == Parity::Odd && e.coefficient.is_some() && e.provenance != Provenance::Extrapolated).collect();
    if exact.len() < 10 {
        return Err(SpectralError::InsufficientData { need: 10, have: exact.len() });
    }
    let rmax = exact.iter().map(|e| e.rank).max().unwrap();
    let mut window: Vec<&&SpectrumEntry> = exact.iter().filter(|e| e.rank * 10 >= rmax).collect();
    if window.len() < 10 {
        window = exact.iter().collect();
    }
    let window: Vec<&&SpectrumEntry> = window.into_iter().filter(|e| e.coefficient.unwrap() != 0.0).collect();
    if window.len() < 2 {
        return Err(SpectralError::InsufficientData { need: 10, have: window.len() });
    }
    let (cs, ci) = loglog_fit(
        &window.iter().map(|e| e.rank as f64).collect::<Vec<_>>(),
        &window.iter().map(|e| e.coefficient.unwrap().powi(2)).collect::<Vec<_>>(),
    );
    let last = spectrum.entries.last().unwrap();
    let lam_window: Vec<&SpectrumEntry> = spectrum.entries.iter().filter(|e| e.rank * 10 >= last.rank).collect();
    let (ls, _) = loglog_fit(
        &lam_window.iter().map(|e| e.rank as f64).collect::<Vec<_>>(),
        &lam_window.iter().map(|e| e.eigenvalue).collect::<Vec<_>>(),
    );
    let mut out = spectrum.clone();
    let (r0, l0) = (last.rank as f64, last.eigenvalue);
    for rank in last.rank + 1..=target_rank {
        let (parity, _) = mode_of(rank);
        let r = rank as f64;
        let coefficient = match parity {
            Parity::Odd => Some((0.5 * (ci + cs * r.ln())).exp()),
            Parity::Even => Some(0.0),
        };
        out.entries.push(SpectrumEntry {
            rank,
            eigenvalue: l0 * (r / r0).powf(ls.min(-1e-3)),
            parity,
            coefficient,
            provenance: Provenance::Extrapolated,
        });
    }
    Ok(out)
}

/// Thresholds for the assembled spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrumOptions {
    /// Nodes per half-line of the Nyström grid.
    pub gram_half_size: usize,
    /// Ranks whose Nyström eigenvalues seed the shooting directly.
    pub gram_ranks: usize,
    /// Highest rank with an eigenfunction and coefficient from the ODE.
    pub exact_ranks: usize,
    /// Length of the spectrum after extrapolation.
    pub target_rank: usize,
    pub step_factor: f64,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self { gram_half_size: 2000, gram_ranks: 400, exact_ranks: 10_000, target_rank: 51_000, step_factor: 0.1 }
    }
}

/// Exact eigenpairs of one parity for modes `0..modes`, solved in sequence with
/// each seed extrapolated from the previous two modes.
fn solve_parity(
    model: &DataModel,
    parity: Parity,
    modes: usize,
    seeds: &[f64],
    ode: &OdeOptions,
    with_coefficients: bool,
) -> Result<Vec<(f64, Option<f64>)>, SpectralError> {
    let mut out: Vec<(f64, Option<f64>)> = Vec::with_capacity(modes);
    let mut us: Vec<f64> = Vec::with_capacity(modes);
    let mut grid: Option<ShootingGrid> = None;
    for m in 0..modes {
        let guess_u = if m < seeds.len() && (m < 2 || m < seeds.len().saturating_sub(1)) {
            1.0 / seeds[m].sqrt()
        } else {
            2.0 * us[m - 1] - us[m - 2]
        };
        if grid.as_ref().map_or(true, |g| g.u_max < 1.02 * guess_u) {
            grid = Some(ShootingGrid::new(model, 1.2 * guess_u, ode));
        }
        let g = grid.as_ref().unwrap();
        let guess = 1.0 / (guess_u * guess_u);
        let lam = match shoot_eigenvalue(model, parity, m, guess, Some(g), ode) {
            Ok(v) => v,
            Err(_) => {
                // a poor seed can push u off the grid; retry on a wider one
                let wide = ShootingGrid::new(model, 4.0 * guess_u.max(us.last().copied().unwrap_or(0.0)), ode);
                let v = shoot_eigenvalue(model, parity, m, guess, Some(&wide), ode)?;
                grid = Some(wide);
                v
            }
        };
        let g = grid.as_ref().unwrap();
        let u = 1.0 / lam.sqrt();
        if let Some(&prev) = us.last() {
            if !(u > prev) {
                return Err(SpectralError::Shooting { mode: m, parity, detail: format!("mode skipped: u = {u} after {prev}") });
            }
        }
        let c = if with_coefficients {
            let mut f = tabulate(g, u, parity, model);
            f.lambda = lam;
            Some(project_coefficient(&f, model))
        } else {
            None
        };
        us.push(u);
        out.push((lam, c));
    }
    Ok(out)
}

/// Spectrum with Nyström-seeded, shooting-refined eigenvalues and ODE coefficients
/// up to `exact_ranks`. Beyond that, eigenvalues come from the self-consistent
/// scheme rescaled to meet the last exact rank, and coefficients from
/// [`extrapolate_coefficients`].
pub fn hybrid_spectrum(model: &DataModel, opts: &SpectrumOptions) -> Result<Spectrum, SpectralError> {
    model.validate()?;
    let ode = OdeOptions { step_factor: opts.step_factor, ..OdeOptions::default() };
    let grid = gram_quadrature(model, opts.gram_half_size);
    let gram = eigenvalues_gram(&grid.nodes, &grid.weights, model)?;
    let trusted = opts.gram_ranks.min(gram.len() / 10);
    let seeds_of = |p: Parity| -> Vec<f64> { gram.entries[..trusted].iter().filter(|e| e.parity == p).map(|e| e.eigenvalue).collect() };
    let exact = opts.exact_ranks.max(4);
    let odd_modes = exact / 2;
    let even_modes = exact.div_ceil(2);
    let (odd, even) = rayon::join(
        || solve_parity(model, Parity::Odd, odd_modes, &seeds_of(Parity::Odd), &ode, true),
        || solve_parity(model, Parity::Even, even_modes, &seeds_of(Parity::Even), &ode, false),
    );
    let (odd, even) = (odd?, even?);
    let mut entries = Vec::with_capacity(exact);
    for rank in 1..=exact {
        let (parity, m) = mode_of(rank);
        let (lam, c) = match parity {
            Parity::Odd => odd[m],
            Parity::Even => (even[m].0, Some(0.0)),
        };
        entries.push(SpectrumEntry { rank, eigenvalue: lam, parity, coefficient: c, provenance: Provenance::Ode });
    }
    let s = Spectrum { entries, model: *model };
    s.check_order()?;
    if opts.target_rank <= exact {
        return Ok(s);
    }
    let mut out = extrapolate_coefficients(&s, opts.target_rank)?;
    let sc = SelfConsistentOptions::default();
    let anchor = self_consistent_eigenvalue(exact + 1, model, None, &sc)?;
    let scale = s.entries[exact - 1].eigenvalue / anchor;
    let mut guess = [anchor, self_consistent_eigenvalue(exact + 2, model, None, &sc)?];
    for e in out.entries[exact..].iter_mut() {
        let slot = e.rank % 2;
        let lam = self_consistent_eigenvalue(e.rank + 1, model, Some(guess[slot]), &sc)?;
        guess[slot] = lam;
        e.eigenvalue = scale * lam;
        e.provenance = Provenance::SelfConsistent;
    }
    out.check_order()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_mode_roundtrip() {
        for r in 1..50 {
            let (p, m) = mode_of(r);
            assert_eq!(rank_of(p, m), r);
        }
        assert_eq!(mode_of(1), (Parity::Even, 0));
        assert_eq!(mode_of(2), (Parity::Odd, 0));
    }

    #[test]
    fn phase_numerator_matches_adaptive_quadrature() {
        for &(chi, lam) in &[(0.0, 1e-4), (1.0, 1e-5), (2.0, 1e-6), (2.5, 3e-5)] {
            let model = DataModel::new(chi, 0.0, 100.0, 1, 3.0).unwrap();
            let tp = turning_points(lam, &model).unwrap();
            let reference = crate::quad::integrate_sqrt_endpoints(|x| (lam * tp.gamma_sq(x)).max(0.0).sqrt(), tp.x1, tp.x2, 1e-13);
            assert!((phase_numerator(&tp) / reference - 1.0).abs() < 1e-10, "chi {chi}");
        }
    }

    #[test]
    fn inner_phase_constant_at_chi_zero() {
        let model = DataModel::one_d(0.0, 0.0).unwrap();
        let g = mixing_coefficient(1e-6, Parity::Odd, &model).unwrap();
        assert!((g - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!(((-1.0 / g).atan() + std::f64::consts::PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_roundtrip() {
        let model = DataModel::one_d(1.0, 0.0).unwrap();
        let s = Spectrum {
            entries: vec![
                SpectrumEntry { rank: 1, eigenvalue: 0.5, parity: Parity::Even, coefficient: Some(0.0), provenance: Provenance::Gram },
                SpectrumEntry { rank: 2, eigenvalue: 0.25, parity: Parity::Odd, coefficient: Some(-0.125), provenance: Provenance::Ode },
                SpectrumEntry { rank: 3, eigenvalue: 0.1, parity: Parity::Even, coefficient: None, provenance: Provenance::Extrapolated },
            ],
            model,
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = Spectrum::read_csv(std::io::Cursor::new(buf), model).unwrap();
        assert_eq!(back, s);
    }
}

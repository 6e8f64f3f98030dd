//! Real-valued special functions: Airy functions, erfc and log-gamma.
//!
//! Airy evaluation uses three regimes:
//!
//! * `|x| <= MACLAURIN_RADIUS`: the Maclaurin series in `x^3`.
//! * `|x| >= ASYMPTOTIC_RADIUS`: the large-argument asymptotic expansions.
//! * in between, Taylor continuation of the Airy equation `y'' = x y`
//!   started from the nearest regime with full accuracy (forward from
//!   `-MACLAURIN_RADIUS` on the oscillatory side, backward from
//!   `ASYMPTOTIC_RADIUS` for the recessive `Ai` on the positive side).
//!   `Bi` for `x > 0` has no cancellation in the Maclaurin series and uses it
//!   up to `ASYMPTOTIC_RADIUS`.

use thiserror::Error;

use crate::scalar::Scalar;

/// Below this radius the Maclaurin series is used.
pub const MACLAURIN_RADIUS: f64 = 2.5;
/// Beyond this radius the asymptotic expansions are used.
pub const ASYMPTOTIC_RADIUS: f64 = 8.0;
/// Largest |x| accepted by [`airy`].
pub const AIRY_MAX_ABS: f64 = 100.0;

const AI0: f64 = 0.355_028_053_887_817_239_26;
const NEG_AIP0: f64 = 0.258_819_403_792_806_798_405;
const SQRT3: f64 = 1.732_050_807_568_877_293_5;
const TAYLOR_STEP: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecialFnError {
    #[error("airy argument {x} outside the supported range |x| <= {AIRY_MAX_ABS}")]
    OutOfRange { x: f64 },
    #[error("argument {x} is not finite")]
    NotFinite { x: f64 },
    #[error("log_gamma requires a positive argument, got {x}")]
    NonPositive { x: f64 },
}

/// `Ai`, `Bi` and their first derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AiryPair<T = f64> {
    pub ai: T,
    pub bi: T,
    pub ai_prime: T,
    pub bi_prime: T,
}

impl<T: Scalar> AiryPair<T> {
    /// `Ai Bi' - Ai' Bi`, which equals `1/pi` identically.
    pub fn wronskian(&self) -> T {
        self.ai * self.bi_prime - self.ai_prime * self.bi
    }
}

/// Airy functions of the first and second kind with derivatives.
pub fn airy<T: Scalar>(x: T) -> Result<AiryPair<T>, SpecialFnError> {
    let xf = x.to_f64_lossless();
    if !xf.is_finite() {
        return Err(SpecialFnError::NotFinite { x: xf });
    }
    if xf.abs() > AIRY_MAX_ABS {
        return Err(SpecialFnError::OutOfRange { x: xf });
    }
    let r_small = T::lit(MACLAURIN_RADIUS);
    let r_big = T::lit(ASYMPTOTIC_RADIUS);
    if x.abs() <= r_small {
        return Ok(maclaurin(x));
    }
    if x >= r_big {
        return Ok(asymptotic_positive(x));
    }
    if x <= -r_big {
        return Ok(asymptotic_negative(-x));
    }
    if x < T::zero() {
        let start = maclaurin(-r_small);
        let (ai, ai_prime) = taylor_continue(-r_small, start.ai, start.ai_prime, x);
        let (bi, bi_prime) = taylor_continue(-r_small, start.bi, start.bi_prime, x);
        return Ok(AiryPair { ai, bi, ai_prime, bi_prime });
    }
    let anchor = asymptotic_positive(r_big);
    let (ai, ai_prime) = taylor_continue(r_big, anchor.ai, anchor.ai_prime, x);
    let series = maclaurin(x);
    Ok(AiryPair { ai, bi: series.bi, ai_prime, bi_prime: series.bi_prime })
}

fn maclaurin<T: Scalar>(x: T) -> AiryPair<T> {
    let x3 = x * x * x;
    let tiny = T::lit(1e-18);
    // f, g and their derivatives as in the standard decomposition
    // Ai = c1 f - c2 g, Bi = sqrt(3) (c1 f + c2 g).
    let (mut f, mut g) = (T::one(), x);
    let (mut fp, mut gp) = (T::zero(), T::one());
    let (mut tf, mut tg) = (T::one(), x);
    let mut tfp = x * x / T::lit(2.0);
    let mut tgp = T::one();
    fp = fp + tfp;
    let mut k = 1usize;
    loop {
        let kf = T::lit(3.0 * k as f64);
        tf = tf * x3 / ((kf - T::one()) * kf);
        tg = tg * x3 / (kf * (kf + T::one()));
        tgp = tgp * x3 / ((kf - T::lit(2.0)) * kf);
        f = f + tf;
        g = g + tg;
        gp = gp + tgp;
        tfp = tfp * x3 / (kf * (kf + T::lit(2.0)));
        fp = fp + tfp;
        let scale = f.abs() + g.abs() + fp.abs() + gp.abs();
        let last = tf.abs() + tg.abs() + tfp.abs() + tgp.abs();
        if last <= tiny * scale || k > 400 {
            break;
        }
        k += 1;
    }
    let c1 = T::lit(AI0);
    let c2 = T::lit(NEG_AIP0);
    let s3 = T::lit(SQRT3);
    AiryPair {
        ai: c1 * f - c2 * g,
        bi: s3 * (c1 * f + c2 * g),
        ai_prime: c1 * fp - c2 * gp,
        bi_prime: s3 * (c1 * fp + c2 * gp),
    }
}

/// Continues a solution of `y'' = x y` from `x0` to `x1` with Taylor steps.
fn taylor_continue<T: Scalar>(x0: T, y0: T, dy0: T, x1: T) -> (T, T) {
    let span = x1 - x0;
    let steps = (span.abs() / T::lit(TAYLOR_STEP)).ceil().to_usize().unwrap_or(1).max(1);
    let h = span / T::from_usize(steps).unwrap();
    let (mut x, mut y, mut dy) = (x0, y0, dy0);
    let tiny = T::lit(1e-19);
    for _ in 0..steps {
        // a_{n+1} = (x a_{n-1} + a_{n-2}) / ((n+1) n)
        let mut a_prev2 = y;
        let mut a_prev1 = dy;
        let mut a_n = x * y / T::lit(2.0);
        let mut hp = h * h;
        let mut val = y + dy * h + a_n * hp;
        let mut der = dy + T::lit(2.0) * a_n * h;
        let mut n = 2usize;
        loop {
            let next = (x * a_prev1 + a_prev2) / T::lit(((n + 1) * n) as f64);
            a_prev2 = a_prev1;
            a_prev1 = a_n;
            a_n = next;
            n += 1;
            let dterm = T::lit(n as f64) * a_n * hp;
            hp = hp * h;
            let term = a_n * hp;
            val = val + term;
            der = der + dterm;
            if (n > 6 && term.abs() + dterm.abs() <= tiny * (val.abs() + der.abs())) || n > 80 {
                break;
            }
        }
        y = val;
        dy = der;
        x = x + h;
    }
    (y, dy)
}

/// Asymptotic coefficients `u_k` and `v_k` up to `k = n`.
fn uv_coefficients<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    let mut u = Vec::with_capacity(n + 1);
    let mut v = Vec::with_capacity(n + 1);
    u.push(T::one());
    v.push(T::one());
    for k in 1..=n {
        let kf = k as f64;
        let prev = u[k - 1];
        let uk = prev * T::lit((6.0 * kf - 5.0) * (6.0 * kf - 3.0) * (6.0 * kf - 1.0))
            / T::lit((2.0 * kf - 1.0) * 216.0 * kf);
        u.push(uk);
        v.push(-uk * T::lit((6.0 * kf + 1.0) / (6.0 * kf - 1.0)));
    }
    (u, v)
}

/// Sums `sum_k c_k s_k z^{-k}` for a sign pattern, stopping at the smallest term.
fn asym_sum<T: Scalar>(coef: &[T], inv_z: T, sign: impl Fn(usize) -> T, start: usize, stride: usize) -> T {
    let mut total = T::zero();
    let mut best = T::infinity();
    let mut k = start;
    while k < coef.len() {
        let term = sign(k) * coef[k] * inv_z.powi(k as i32);
        if term.abs() > best {
            break;
        }
        best = term.abs();
        total = total + term;
        if best <= T::lit(1e-18) * total.abs() {
            break;
        }
        k += stride;
    }
    total
}

fn asymptotic_positive<T: Scalar>(x: T) -> AiryPair<T> {
    let zeta = T::lit(2.0 / 3.0) * x * x.sqrt();
    let inv = T::one() / zeta;
    let (u, v) = uv_coefficients::<T>(40);
    let alt = |k: usize| if k % 2 == 0 { T::one() } else { -T::one() };
    let plus = |_k: usize| T::one();
    let sp = T::PI().sqrt();
    let q = x.sqrt().sqrt();
    let decay = (-zeta).exp();
    let growth = zeta.exp();
    AiryPair {
        ai: decay / (T::lit(2.0) * sp * q) * asym_sum(&u, inv, alt, 0, 1),
        ai_prime: -q * decay / (T::lit(2.0) * sp) * asym_sum(&v, inv, alt, 0, 1),
        bi: growth / (sp * q) * asym_sum(&u, inv, plus, 0, 1),
        bi_prime: q * growth / sp * asym_sum(&v, inv, plus, 0, 1),
    }
}

fn asymptotic_negative<T: Scalar>(z: T) -> AiryPair<T> {
    let zeta = T::lit(2.0 / 3.0) * z * z.sqrt();
    let inv = T::one() / zeta;
    let (u, v) = uv_coefficients::<T>(40);
    // (-1)^k applied to the even-indexed (k = 2m) and odd-indexed (k = 2m+1) terms
    let sgn = |k: usize| if (k / 2) % 2 == 0 { T::one() } else { -T::one() };
    let pu = asym_sum(&u, inv, sgn, 0, 2);
    let qu = asym_sum(&u, inv, sgn, 1, 2);
    let pv = asym_sum(&v, inv, sgn, 0, 2);
    let qv = asym_sum(&v, inv, sgn, 1, 2);
    let phase = zeta + T::FRAC_PI_4();
    let (s, c) = phase.sin_cos();
    let sp = T::PI().sqrt();
    let q = z.sqrt().sqrt();
    AiryPair {
        ai: (s * pu - c * qu) / (sp * q),
        bi: (c * pu + s * qu) / (sp * q),
        ai_prime: -q * (c * pv + s * qv) / sp,
        bi_prime: q * (s * pv - c * qv) / sp,
    }
}

/// Complementary error function.
pub fn erfc<T: Scalar>(x: T) -> T {
    x.erfc_raw()
}

/// Natural logarithm of the gamma function for `x > 0`.
pub fn log_gamma<T: Scalar>(x: T) -> Result<T, SpecialFnError> {
    let xf = x.to_f64_lossless();
    if !xf.is_finite() {
        return Err(SpecialFnError::NotFinite { x: xf });
    }
    if xf <= 0.0 {
        return Err(SpecialFnError::NonPositive { x: xf });
    }
    Ok(x.lgamma_raw())
}

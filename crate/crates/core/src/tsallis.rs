//! Tsallis-deformed exponential and logarithm, and the q-deformed KL divergence.
//!
//! `exp_q(x) = [1 + (1-q) x]_+^{1/(1-q)}` and `ln_q(x) = (x^{1-q} - 1) / (1-q)`,
//! both collapsing to the ordinary `exp`/`ln` at `q = 1`. The entmax solver
//! uses `exp_{1-alpha}` for probabilities and `ln_{1+alpha}` for its bounds;
//! [`Deformation`] bundles that pairing.

use crate::error::{Error, Result};

/// `|q - 1|` below this is treated as exactly `q = 1`.
pub const UNIT_Q_EPS: f64 = 1e-12;

/// q-exponential. Clips to zero when the base `1 + (1-q) x` is non-positive
/// and the exponent is positive; for `q > 1` past the pole the value is `+inf`.
pub fn q_exp(q: f64, x: f64) -> f64 {
    let k = 1.0 - q;
    if k.abs() < UNIT_Q_EPS {
        return x.exp();
    }
    let kx = k * x;
    if kx <= -1.0 {
        return if k > 0.0 { 0.0 } else { f64::INFINITY };
    }
    // exp(log1p(kx) / k) never forms the raw power, so large exponents
    // 1/k cannot overflow an intermediate.
    (kx.ln_1p() / k).exp()
}

/// q-logarithm, defined for `x > 0`.
pub fn q_log(q: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("q_log requires x > 0, got {x}")));
    }
    Ok(q_log_positive(q, x))
}

/// `q_log` without the domain check; callers guarantee `x > 0`.
pub(crate) fn q_log_positive(q: f64, x: f64) -> f64 {
    let k = 1.0 - q;
    if k.abs() < UNIT_Q_EPS {
        return x.ln();
    }
    (k * x.ln()).exp_m1() / k
}

/// q-deformed KL divergence `sum_i p1_i * (-ln_q(p2_i / p1_i))`.
///
/// Terms with `p1_i = 0` contribute nothing. Errors when the inputs are not
/// probability vectors of equal length or when `p2` vanishes where `p1` does not.
pub fn q_kl(q: f64, p1: &[f64], p2: &[f64]) -> Result<f64> {
    if p1.len() != p2.len() {
        return Err(Error::DimensionMismatch {
            expected: p1.len(),
            got: p2.len(),
        });
    }
    check_probability_vector(p1, "p1")?;
    check_probability_vector(p2, "p2")?;

    let mut acc = 0.0;
    for (&a, &b) in p1.iter().zip(p2) {
        if a == 0.0 {
            continue;
        }
        if b <= 0.0 {
            return Err(Error::Domain(
                "q_kl: p2 must be positive wherever p1 is".to_string(),
            ));
        }
        acc -= a * q_log_positive(q, b / a);
    }
    Ok(acc)
}

fn check_probability_vector(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Domain(format!("{name} is empty")));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// The entmax deformation parameter `alpha`.
///
/// Probabilities use `exp_{1-alpha}`; the tightened multiplier bounds use
/// `ln_{1+alpha}`. `alpha = 0` is softmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deformation {
    pub alpha: f64,
}

impl Deformation {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::Domain(format!("alpha must be finite, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    /// `exp_{1-alpha}(x) = [1 + alpha x]_+^{1/alpha}`.
    #[inline]
    pub fn exp(&self, x: f64) -> f64 {
        if self.alpha == 0.0 {
            return x.exp();
        }
        q_exp(1.0 - self.alpha, x)
    }

    /// `ln_{1+alpha}(x)` for `x > 0`.
    #[inline]
    pub fn ln(&self, x: f64) -> Result<f64> {
        q_log(1.0 + self.alpha, x)
    }
}

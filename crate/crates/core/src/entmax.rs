//! Entmax probabilities over a batch of scaled scores.
//!
//! The solution is `P_i = [1 + alpha (J_i - lambda)]_+^{1/alpha}` (softmax at
//! `alpha = 0`), where `lambda` makes the masses sum to one. `lambda` is
//! bracketed analytically by [`lambda_bounds`] and then estimated with a fixed
//! three-evaluation Ridders step ([`solve_approx`]). [`solve_oracle`] is the
//! iterative bisection reference.

use crate::error::{Error, Result};
use crate::tsallis::{q_log_positive, Deformation};

/// Below this bracket width the bounds are treated as a single point.
pub const DEGENERATE_WIDTH: f64 = 1e-12;

/// Scaled objective values `beta * J(x_i)`; non-empty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch(Vec<f64>);

impl ScoreBatch {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Domain("score batch must be non-empty".into()));
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score {bad}")));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `ln sum_i exp(J_i)`, max-shifted.
    pub fn log_sum_exp(&self) -> f64 {
        let m = self.max();
        m + self.0.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaBounds {
    pub lower: f64,
    pub upper: f64,
}

impl LambdaBounds {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() < DEGENERATE_WIDTH
    }
}

/// How a multiplier estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Bounds collapsed to a point; no residual evaluations.
    Exact,
    /// The three-evaluation Ridders estimate.
    Approximate,
    /// Ridders denominator was non-positive; fell back to the inner midpoint.
    Fallback,
    /// Midpoint of the bounds, no evaluations.
    Midpoint,
    Converged,
    NotConverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntmaxSolution {
    pub lambda: f64,
    /// Renormalized probabilities.
    pub probs: Vec<f64>,
    /// `e(lambda)` before renormalization.
    pub residual: f64,
    /// Residual evaluations spent locating `lambda`.
    pub evaluations: usize,
    pub status: SolveStatus,
}

/// Conventional bracket `[J_max, J_max + ln_{1+alpha} N]`.
pub fn conventional_bounds(scores: &ScoreBatch, alpha: f64) -> LambdaBounds {
    let jmax = scores.max();
    LambdaBounds {
        lower: jmax,
        upper: jmax + q_log_positive(1.0 + alpha, scores.len() as f64),
    }
}

/// Tightened bracket on the multiplier.
///
/// Lower: `max{LSE, J_min + ln_{1+a} N}` for `a <= 0`, `max{J_max, J_min + ln_{1+a} N}` otherwise.
/// Upper: `J_max + ln_{1+a} N` for `a < 0`, `min{J_max + ln_{1+a} N, LSE}` otherwise.
/// At `a = 0` both collapse onto `LSE(J)`.
pub fn lambda_bounds(scores: &ScoreBatch, alpha: f64) -> LambdaBounds {
    let jmax = scores.max();
    let jmin = scores.min();
    let lse = scores.log_sum_exp();
    let ln_n = q_log_positive(1.0 + alpha, scores.len() as f64);

    let lower = if alpha <= 0.0 {
        lse.max(jmin + ln_n)
    } else {
        jmax.max(jmin + ln_n)
    };
    let upper = if alpha < 0.0 {
        jmax + ln_n
    } else {
        (jmax + ln_n).min(lse)
    };
    LambdaBounds { lower, upper }
}

/// `e(lambda) = ln sum_i exp_{1-alpha}(J_i - lambda)`; zero at the exact multiplier,
/// non-increasing in `lambda`, and `-inf` once every term has clipped.
pub fn residual(scores: &ScoreBatch, alpha: f64, lambda: f64) -> f64 {
    if alpha == 0.0 {
        return scores.log_sum_exp() - lambda;
    }
    let d = Deformation { alpha };
    scores
        .as_slice()
        .iter()
        .map(|&j| d.exp(j - lambda))
        .sum::<f64>()
        .ln()
}

/// Renormalized entmax probabilities at a given multiplier.
pub fn probabilities(scores: &ScoreBatch, alpha: f64, lambda: f64) -> Result<Vec<f64>> {
    probabilities_with_residual(scores, alpha, lambda).map(|(p, _)| p)
}

/// Probabilities and the pre-normalization residual `ln sum_i P_i`.
pub fn probabilities_with_residual(
    scores: &ScoreBatch,
    alpha: f64,
    lambda: f64,
) -> Result<(Vec<f64>, f64)> {
    let d = Deformation { alpha };
    let mut raw: Vec<f64> = scores
        .as_slice()
        .iter()
        .map(|&j| d.exp(j - lambda))
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Degenerate { lambda });
    }
    raw.iter_mut().for_each(|p| *p /= sum);
    Ok((raw, sum.ln()))
}

/// Residual evaluator that counts its calls.
struct CountingResidual<'a> {
    scores: &'a ScoreBatch,
    alpha: f64,
    calls: usize,
}

impl<'a> CountingResidual<'a> {
    fn new(scores: &'a ScoreBatch, alpha: f64) -> Self {
        Self {
            scores,
            alpha,
            calls: 0,
        }
    }

    fn eval(&mut self, lambda: f64) -> f64 {
        self.calls += 1;
        residual(self.scores, self.alpha, lambda)
    }
}

fn finish(
    scores: &ScoreBatch,
    alpha: f64,
    lambda: f64,
    evaluations: usize,
    status: SolveStatus,
) -> Result<EntmaxSolution> {
    let (probs, residual) = probabilities_with_residual(scores, alpha, lambda)?;
    Ok(EntmaxSolution {
        lambda,
        probs,
        residual,
        evaluations,
        status,
    })
}

/// Constant-cost estimate of the multiplier: three residual evaluations
/// (zero when the bounds are degenerate), then one Ridders step.
pub fn solve_approx(scores: &ScoreBatch, alpha: f64) -> Result<EntmaxSolution> {
    let bounds = lambda_bounds(scores, alpha);
    if bounds.is_degenerate() {
        return finish(scores, alpha, bounds.lower, 0, SolveStatus::Exact);
    }
    let (lambda, evaluations, status) = ridders_step(scores, alpha, bounds);
    finish(scores, alpha, lambda, evaluations, status)
}

fn ridders_step(
    scores: &ScoreBatch,
    alpha: f64,
    bounds: LambdaBounds,
) -> (f64, usize, SolveStatus) {
    let mut e = CountingResidual::new(scores, alpha);

    let l0 = bounds.midpoint();
    let e0 = e.eval(l0);
    // e0 == 0 pairs with the lower bound; the sign below must agree with this choice.
    let (l2, sign) = if e0 > 0.0 {
        (bounds.upper, 1.0)
    } else {
        (bounds.lower, -1.0)
    };
    let e2 = e.eval(l2);
    let l1 = 0.5 * (l0 + l2);
    let e1 = e.eval(l1);

    let denom = e1 * e1 - e0 * e2;
    if !(denom > 0.0) || !denom.is_finite() {
        return (l1, e.calls, SolveStatus::Fallback);
    }
    let lambda = l1 + (l1 - l0) * sign * e1 / denom.sqrt();
    if !lambda.is_finite() {
        return (l1, e.calls, SolveStatus::Fallback);
    }
    (lambda, e.calls, SolveStatus::Approximate)
}

/// Midpoint of the tightened bounds, the zero-evaluation baseline.
pub fn solve_midpoint(scores: &ScoreBatch, alpha: f64) -> Result<EntmaxSolution> {
    let bounds = lambda_bounds(scores, alpha);
    let (lambda, status) = if bounds.is_degenerate() {
        (bounds.lower, SolveStatus::Exact)
    } else {
        (bounds.midpoint(), SolveStatus::Midpoint)
    };
    finish(scores, alpha, lambda, 0, status)
}

/// Bisection on `e(lambda)` over the tightened bounds until `|e| <= tol`
/// or `max_iters` evaluations are spent.
pub fn solve_oracle(
    scores: &ScoreBatch,
    alpha: f64,
    max_iters: usize,
    tol: f64,
) -> Result<EntmaxSolution> {
    if max_iters == 0 || !(tol > 0.0) {
        return Err(Error::Domain(
            "solve_oracle needs max_iters >= 1 and tol > 0".into(),
        ));
    }
    bisect_within(scores, alpha, lambda_bounds(scores, alpha), max_iters, tol)
}

/// Bisection over an explicit bracket, e.g. the conventional one.
pub fn bisect_within(
    scores: &ScoreBatch,
    alpha: f64,
    bounds: LambdaBounds,
    max_iters: usize,
    tol: f64,
) -> Result<EntmaxSolution> {
    if bounds.is_degenerate() {
        return finish(scores, alpha, bounds.lower, 0, SolveStatus::Exact);
    }
    let mut e = CountingResidual::new(scores, alpha);
    let (mut lo, mut hi) = (bounds.lower, bounds.upper);
    let mut mid = 0.5 * (lo + hi);
    let mut status = SolveStatus::NotConverged;
    while e.calls < max_iters {
        mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // bracket is down to adjacent floats
            break;
        }
        let r = e.eval(mid);
        if r.abs() <= tol {
            status = SolveStatus::Converged;
            break;
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    finish(scores, alpha, mid, e.calls, status)
}

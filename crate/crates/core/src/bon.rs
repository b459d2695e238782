//! Best-of-N action selection: random, hard (argmax), and entmax-weighted.
//!
//! The entmax strategy rescales non-negative scores to unit mean, solves the
//! entmax multiplier with the constant-cost approximation and draws an index
//! from the resulting categorical distribution. `alpha = 0` is the softmax
//! (soft best-of-N) case; large positive `alpha` approaches the hard argmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::entmax::{solve_approx, ScoreBatch};
use crate::error::{Error, Result};

/// Default number of candidates per decision.
pub const DEFAULT_SAMPLES: usize = 256;

/// Mean score below which scaling is meaningless and selection is uniform.
pub const MIN_MEAN_SCORE: f64 = 1e-12;

/// `N` candidate items paired with non-negative finite scores.
#[derive(Debug, Clone)]
pub struct Candidates<T> {
    items: Vec<T>,
    scores: Vec<f64>,
}

impl<T> Candidates<T> {
    pub fn new(items: Vec<T>, scores: Vec<f64>) -> Result<Self> {
        if items.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                expected: items.len(),
                got: scores.len(),
            });
        }
        if items.is_empty() {
            return Err(Error::Domain("need at least one candidate".into()));
        }
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Domain(format!(
                "candidate scores must be finite and non-negative, got {bad}"
            )));
        }
        Ok(Self { items, scores })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn into_items(self) -> Vec<T> {
        self.items
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Strategy {
    /// One draw from the source policy, scores ignored.
    Random,
    /// Argmax over `N` candidates.
    Hard,
    /// Entmax-weighted draw over `N` candidates.
    Ent { alpha: f64 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Hard => "hard",
            Strategy::Ent { .. } => "ent",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            Strategy::Ent { alpha } => Some(*alpha),
            _ => None,
        }
    }

    /// Candidates actually drawn per decision.
    pub fn candidate_count(&self, n_samples: usize) -> usize {
        match self {
            Strategy::Random => 1,
            _ => n_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub n_samples: usize,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy, n_samples: usize) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if let Strategy::Ent { alpha } = strategy {
            if !alpha.is_finite() {
                return Err(Error::Config(format!("alpha must be finite, got {alpha}")));
            }
        }
        Ok(Self {
            strategy,
            n_samples,
        })
    }
}

/// Outcome of one selection.
#[derive(Debug, Clone)]
pub struct Selection<'a, T> {
    pub item: &'a T,
    pub index: usize,
    /// Selection law over the candidates (one-hot for hard selection).
    pub probs: Vec<f64>,
}

impl<T> Selection<'_, T> {
    /// Shannon entropy of the selection law, in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Reciprocal of the sample mean, so `beta * J` has unit mean.
/// `None` when the mean is too small to scale (callers select uniformly).
pub fn auto_beta(scores: &[f64]) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    if mean < MIN_MEAN_SCORE {
        None
    } else {
        Some(1.0 / mean)
    }
}

/// Auto-scaled entmax selection law over raw non-negative scores.
pub fn entmax_law(scores: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let n = scores.len();
    let Some(beta) = auto_beta(scores) else {
        return Ok(vec![1.0 / n as f64; n]);
    };
    let scaled = ScoreBatch::new(scores.iter().map(|&j| beta * j).collect())?;
    Ok(solve_approx(&scaled, alpha)?.probs)
}

/// Smallest index whose cumulative mass exceeds `u`.
pub fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if acc > u {
            return i;
        }
    }
    // rounding left the cumulative sum at or below u: take the last bucket with mass
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// Argmax of the scores; the lowest index wins ties.
pub fn select_hard<T>(c: &Candidates<T>) -> Selection<'_, T> {
    let mut best = 0;
    for (i, &s) in c.scores.iter().enumerate().skip(1) {
        if s > c.scores[best] {
            best = i;
        }
    }
    let mut probs = vec![0.0; c.len()];
    probs[best] = 1.0;
    Selection {
        item: &c.items[best],
        index: best,
        probs,
    }
}

/// Uniform draw that ignores the scores.
pub fn select_random<'a, T, R: Rng + ?Sized>(
    c: &'a Candidates<T>,
    rng: &mut R,
) -> Selection<'a, T> {
    let n = c.len();
    let index = rng.random_range(0..n);
    Selection {
        item: &c.items[index],
        index,
        probs: vec![1.0 / n as f64; n],
    }
}

/// Entmax selection over auto-scaled scores.
pub fn select_ebon<'a, T, R: Rng + ?Sized>(
    c: &'a Candidates<T>,
    alpha: f64,
    rng: &mut R,
) -> Result<Selection<'a, T>> {
    let probs = entmax_law(&c.scores, alpha)?;
    let u: f64 = rng.random();
    let index = sample_categorical(&probs, u);
    Ok(Selection {
        item: &c.items[index],
        index,
        probs,
    })
}

/// Dispatch on the configured strategy.
pub fn select<'a, T, R: Rng + ?Sized>(
    strategy: Strategy,
    c: &'a Candidates<T>,
    rng: &mut R,
) -> Result<Selection<'a, T>> {
    match strategy {
        Strategy::Random => Ok(select_random(c, rng)),
        Strategy::Hard => Ok(select_hard(c)),
        Strategy::Ent { alpha } => select_ebon(c, alpha, rng),
    }
}

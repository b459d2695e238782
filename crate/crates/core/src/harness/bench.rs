//! Error/time study of the multiplier estimates over a grid of batch sizes,
//! score scales and α values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{iqm, substream};
use crate::entmax::{
    bisect_within, conventional_bounds, lambda_bounds, residual, solve_approx, solve_midpoint,
    solve_oracle, LambdaBounds, ScoreBatch, SolveStatus,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub batches: usize,
    pub seed: u64,
    pub oracle_iters: usize,
    pub oracle_tol: f64,
    pub bisect_iters: usize,
    pub bisect_tol: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ns: vec![4, 16, 64, 256, 1024],
            sigmas: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            alphas: grid_alphas(),
            batches: 100,
            seed: 0,
            oracle_iters: 200,
            oracle_tol: 1e-12,
            bisect_iters: 30,
            bisect_tol: 1e-5,
        }
    }
}

/// `-2.0, -1.9, ..., 2.0` without 0.
pub fn grid_alphas() -> Vec<f64> {
    (-20..=20)
        .filter(|&i| i != 0)
        .map(|i| i as f64 / 10.0)
        .collect()
}

/// Per-method residual and timing statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub name: String,
    pub iqm_abs_residual: f64,
    pub max_abs_residual: f64,
    /// Residual evaluations per solve, as a histogram.
    pub evaluations: BTreeMap<usize, usize>,
    /// `(N, median ns, IQR ns)` of single-solve wall time.
    pub timing_by_n: Vec<(usize, f64, f64)>,
}

impl MethodReport {
    /// Largest per-N ratio of wall-time IQR to median.
    pub fn worst_iqr_over_median(&self) -> f64 {
        self.timing_by_n
            .iter()
            .map(|&(_, med, iqr)| iqr / med)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub cases: usize,
    pub ridders: MethodReport,
    pub midpoint: MethodReport,
    pub bisect: MethodReport,
    pub oracle: MethodReport,
    /// Cases with the oracle multiplier inside the tightened bounds.
    pub oracle_in_bounds: usize,
    /// Cases with the tightened interval inside the conventional one.
    pub tight_in_conventional: usize,
    /// Cases where the Ridders denominator forced the midpoint fallback.
    pub fallbacks: usize,
    /// Oracle cases with `|e| <= 1e-9`.
    pub oracle_within_1e9: usize,
    /// α = 0 cells evaluated on the same N × σ grid.
    pub zero_alpha_cases: usize,
    pub zero_alpha_max_width: f64,
    /// Largest `|lower - LSE(J)|` at α = 0, relative to `1 + |LSE|`.
    pub zero_alpha_max_lse_gap: f64,
    /// Largest `|e|` of any method at α = 0.
    pub zero_alpha_max_residual: f64,
}

impl BenchReport {
    pub fn ridders_over_midpoint(&self) -> f64 {
        self.ridders.iqm_abs_residual / self.midpoint.iqm_abs_residual
    }

    pub fn ridders_over_bisect(&self) -> f64 {
        self.ridders.iqm_abs_residual / self.bisect.iqm_abs_residual
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cases: {}", self.cases);
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>14}  evaluations",
            "method", "IQM |e|", "max |e|"
        );
        for m in [&self.ridders, &self.midpoint, &self.bisect, &self.oracle] {
            let _ = writeln!(
                s,
                "{:<10} {:>14.4e} {:>14.4e}  {:?}",
                m.name, m.iqm_abs_residual, m.max_abs_residual, m.evaluations
            );
        }
        let _ = writeln!(
            s,
            "ridders / midpoint IQM ratio: {:.4e}",
            self.ridders_over_midpoint()
        );
        let _ = writeln!(
            s,
            "ridders / bisect IQM ratio:   {:.4e}",
            self.ridders_over_bisect()
        );
        let _ = writeln!(
            s,
            "oracle inside tightened bounds: {}/{}",
            self.oracle_in_bounds, self.cases
        );
        let _ = writeln!(
            s,
            "tightened inside conventional:  {}/{}",
            self.tight_in_conventional, self.cases
        );
        let _ = writeln!(s, "ridders fallbacks: {}", self.fallbacks);
        let _ = writeln!(
            s,
            "oracle |e| <= 1e-9: {}/{}",
            self.oracle_within_1e9, self.cases
        );
        let _ = writeln!(
            s,
            "alpha = 0: {} cases, max width {:.3e}, max LSE gap {:.3e}, max |e| {:.3e}",
            self.zero_alpha_cases,
            self.zero_alpha_max_width,
            self.zero_alpha_max_lse_gap,
            self.zero_alpha_max_residual
        );
        let _ = writeln!(s, "single-solve wall time by N (median / IQR, ns):");
        for m in [&self.ridders, &self.midpoint, &self.bisect] {
            let cells: Vec<String> = m
                .timing_by_n
                .iter()
                .map(|(n, med, iqr)| format!("N={n}: {med:.0}/{iqr:.0}"))
                .collect();
            let _ = writeln!(s, "  {:<9} {}", m.name, cells.join("  "));
        }
        s
    }
}

/// A bracket built only from the sign of `e`, independent of either bound formula.
pub fn oracle_bracket(scores: &ScoreBatch, alpha: f64) -> LambdaBounds {
    let mut step = 1.0 + scores.max() - scores.min();
    let mut lower = scores.min() - step;
    while !(residual(scores, alpha, lower) > 0.0) {
        step *= 2.0;
        lower -= step;
    }
    let mut step = 1.0 + scores.max() - scores.min();
    let mut upper = scores.max() + step;
    while !(residual(scores, alpha, upper) < 0.0) {
        step *= 2.0;
        upper += step;
    }
    LambdaBounds { lower, upper }
}

struct Samples {
    name: &'static str,
    abs_e: Vec<f64>,
    evals: BTreeMap<usize, usize>,
    ns_by_n: BTreeMap<usize, Vec<f64>>,
}

impl Samples {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            abs_e: Vec::new(),
            evals: BTreeMap::new(),
            ns_by_n: BTreeMap::new(),
        }
    }

    fn record(&mut self, n: usize, e: f64, evaluations: usize, ns: f64) {
        self.abs_e.push(e.abs());
        *self.evals.entry(evaluations).or_default() += 1;
        self.ns_by_n.entry(n).or_default().push(ns);
    }

    fn finish(self) -> MethodReport {
        let timing_by_n = self
            .ns_by_n
            .into_iter()
            .map(|(n, mut t)| {
                t.sort_by(f64::total_cmp);
                let q = |p: f64| t[((t.len() - 1) as f64 * p).round() as usize];
                (n, q(0.5), q(0.75) - q(0.25))
            })
            .collect();
        MethodReport {
            name: self.name.to_string(),
            iqm_abs_residual: iqm(&self.abs_e),
            max_abs_residual: self.abs_e.iter().copied().fold(0.0, f64::max),
            evaluations: self.evals,
            timing_by_n,
        }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_nanos() as f64)
}

fn draw_batch(rng: &mut rand_chacha::ChaCha8Rng, n: usize, sigma: f64) -> Result<ScoreBatch> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    ScoreBatch::new((0..n).map(|_| normal.sample(rng)).collect())
}

pub fn entmax_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.batches == 0 || cfg.ns.is_empty() || cfg.sigmas.is_empty() || cfg.alphas.is_empty() {
        return Err(Error::Config("benchmark grid is empty".into()));
    }
    let mut ridders = Samples::new("ridders");
    let mut midpoint = Samples::new("midpoint");
    let mut bisect = Samples::new("bisect");
    let mut oracle = Samples::new("oracle");
    let mut cases = 0;
    let mut in_bounds = 0;
    let mut nested = 0;
    let mut fallbacks = 0;
    let mut oracle_ok = 0;
    let mut cell = 0u64;

    for &n in &cfg.ns {
        for &sigma in &cfg.sigmas {
            for &alpha in &cfg.alphas {
                let mut rng = substream(cfg.seed, cell);
                cell += 1;
                for _ in 0..cfg.batches {
                    let scores = draw_batch(&mut rng, n, sigma)?;
                    cases += 1;

                    let (r, ns) = timed(|| solve_approx(&scores, alpha));
                    let r = r?;
                    fallbacks += usize::from(r.status == SolveStatus::Fallback);
                    ridders.record(n, r.residual, r.evaluations, ns);

                    let (m, ns) = timed(|| solve_midpoint(&scores, alpha));
                    let m = m?;
                    midpoint.record(n, m.residual, m.evaluations, ns);

                    let (b, ns) =
                        timed(|| solve_oracle(&scores, alpha, cfg.bisect_iters, cfg.bisect_tol));
                    let b = b?;
                    bisect.record(n, b.residual, b.evaluations, ns);

                    let wide = oracle_bracket(&scores, alpha);
                    let (o, ns) = timed(|| {
                        bisect_within(&scores, alpha, wide, cfg.oracle_iters, cfg.oracle_tol)
                    });
                    let o = o?;
                    oracle.record(n, o.residual, o.evaluations, ns);
                    oracle_ok += usize::from(o.residual.abs() <= 1e-9);

                    let tight = lambda_bounds(&scores, alpha);
                    let slack = 1e-9 * (1.0 + o.lambda.abs());
                    in_bounds += usize::from(
                        o.lambda >= tight.lower - slack && o.lambda <= tight.upper + slack,
                    );
                    let conv = conventional_bounds(&scores, alpha);
                    let slack = 1e-12 * (1.0 + conv.upper.abs());
                    nested += usize::from(
                        tight.lower >= conv.lower - slack && tight.upper <= conv.upper + slack,
                    );
                }
            }
        }
    }

    let mut zero_cases = 0;
    let mut max_width: f64 = 0.0;
    let mut max_gap: f64 = 0.0;
    let mut max_zero_e: f64 = 0.0;
    for &n in &cfg.ns {
        for &sigma in &cfg.sigmas {
            let mut rng = substream(cfg.seed, cell);
            cell += 1;
            for _ in 0..cfg.batches {
                let scores = draw_batch(&mut rng, n, sigma)?;
                zero_cases += 1;
                let b = lambda_bounds(&scores, 0.0);
                max_width = max_width.max(b.width());
                let lse = scores.log_sum_exp();
                max_gap = max_gap.max((b.lower - lse).abs() / (1.0 + lse.abs()));
                for e in [
                    solve_approx(&scores, 0.0)?.residual,
                    solve_midpoint(&scores, 0.0)?.residual,
                    solve_oracle(&scores, 0.0, cfg.bisect_iters, cfg.bisect_tol)?.residual,
                ] {
                    max_zero_e = max_zero_e.max(e.abs());
                }
            }
        }
    }

    Ok(BenchReport {
        cases,
        ridders: ridders.finish(),
        midpoint: midpoint.finish(),
        bisect: bisect.finish(),
        oracle: oracle.finish(),
        oracle_in_bounds: in_bounds,
        tight_in_conventional: nested,
        fallbacks,
        oracle_within_1e9: oracle_ok,
        zero_alpha_cases: zero_cases,
        zero_alpha_max_width: max_width,
        zero_alpha_max_lse_gap: max_gap,
        zero_alpha_max_residual: max_zero_e,
    })
}

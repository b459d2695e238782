//! Fast invariant checks runnable from the command line.

use ndarray::Array2;
use rand::Rng;

use super::bench::{entmax_bench, BenchConfig};
use super::substream;
use crate::empowerment::TransitionModels;
use crate::entmax::{solve_approx, ScoreBatch};
use crate::envs::{Env, EnvKind};
use crate::nn::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed,
        detail,
    }
}

fn entmax_grid() -> CheckResult {
    let cfg = BenchConfig {
        ns: vec![4, 64, 256],
        sigmas: vec![0.1, 1.0, 10.0],
        alphas: vec![-2.0, -0.7, -0.1, 0.1, 0.7, 2.0],
        batches: 5,
        ..BenchConfig::default()
    };
    match entmax_bench(&cfg) {
        Ok(r) => {
            let counts_ok = r.ridders.evaluations.keys().all(|&k| k == 0 || k == 3);
            let ok =
                r.oracle_in_bounds == r.cases && r.tight_in_conventional == r.cases && counts_ok;
            check(
                "entmax bounds and evaluation count",
                ok,
                format!(
                    "{}/{} in bounds, {}/{} nested, evaluations {:?}",
                    r.oracle_in_bounds,
                    r.cases,
                    r.tight_in_conventional,
                    r.cases,
                    r.ridders.evaluations
                ),
            )
        }
        Err(e) => check("entmax bounds and evaluation count", false, e.to_string()),
    }
}

fn softmax_limit() -> CheckResult {
    let mut rng = substream(0, 11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let b = ScoreBatch::new(v).expect("finite scores");
        for alpha in [-1e-6, 1e-6] {
            match solve_approx(&b, alpha) {
                Ok(sol) => {
                    for (p, q) in sol.probs.iter().zip(&e) {
                        worst = worst.max((p - q / z).abs());
                    }
                }
                Err(_) => worst = f64::INFINITY,
            }
        }
    }
    check(
        "entmax softmax limit",
        worst <= 1e-4,
        format!("max L-inf gap {worst:.3e}"),
    )
}

fn objective_non_negative() -> CheckResult {
    let mut rng = substream(0, 12);
    let models = TransitionModels::new(4, 2, 10, &[32, 32], 1e-3, &mut rng);
    let mut min = f64::INFINITY;
    for _ in 0..100 {
        let s: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = Array2::from_shape_fn((16, 2), |_| rng.random_range(-1.0..1.0));
        match models.objective(&s, a.view()) {
            Ok(j) => min = j.iter().copied().fold(min, f64::min),
            Err(_) => min = f64::NAN,
        }
    }
    check(
        "objective non-negative",
        min >= 0.0,
        format!("min J {min:.3e}"),
    )
}

fn network_gradient() -> CheckResult {
    let mut rng = substream(0, 13);
    let net = Network::new(3, &[12, 12], 2, &mut rng);
    let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
    let c = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
    let loss = |n: &Network| (n.predict(x.view()).expect("dims") * &c).sum();
    let (_, tape) = net.forward(x.view()).expect("dims");
    let (g, _) = net.backward(&tape, c.view());
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let i = rng.random_range(0..net.num_params());
        let h = 1e-5;
        let mut p = net.clone();
        p.params_mut()[i] += h;
        let mut m = net.clone();
        m.params_mut()[i] -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / fd.abs().max(1e-3));
    }
    check(
        "network gradient",
        worst <= 1e-4,
        format!("max relative error {worst:.3e}"),
    )
}

fn env_determinism() -> CheckResult {
    let mut ok = true;
    for kind in [EnvKind::CartpoleSparse, EnvKind::Pointmass] {
        let mut a = Env::new(kind);
        let mut b = Env::new(kind);
        ok &= a.reset(42) == b.reset(42);
        let action = vec![0.3; a.action_dim()];
        for _ in 0..50 {
            ok &= matches!((a.step(&action), b.step(&action)), (Ok(x), Ok(y)) if x == y);
        }
    }
    check("environment determinism", ok, String::new())
}

/// Runs every check; none of them take more than a few seconds.
pub fn selfcheck() -> Vec<CheckResult> {
    vec![
        entmax_grid(),
        softmax_limit(),
        objective_non_negative(),
        network_gradient(),
        env_determinism(),
    ]
}

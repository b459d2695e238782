//! Densities used by the transition models and the policy.
//!
//! * [`StudentT`]: diagonal multivariate Student-t with one shared dof.
//! * [`MixtureT`]: weighted mixture of [`StudentT`] components.
//! * [`PolicyDist`]: PERT-style scaled Beta on `[-1, 1]` per action
//!   dimension, parameterized by mode and sharpness, with the analytical mean.
//!
//! Each density exposes its log-likelihood gradient with respect to its own
//! parameters so the network heads can backpropagate through it.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use statrs::function::beta::{beta_reg, inv_beta_reg, ln_beta};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Minimum degrees of freedom; the mean and variance both exist from here.
pub const MIN_DOF: f64 = 2.0;

/// Policy samples in Beta coordinates are kept this far from {0, 1}.
pub const BETA_EDGE: f64 = 1e-9;

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// `ln Gamma((v+1)/2) - ln Gamma(v/2) - ln(v pi)/2`.
fn t_log_norm(dof: f64) -> f64 {
    ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof) - 0.5 * (dof * std::f64::consts::PI).ln()
}

/// Gradient of a Student-t log-density with respect to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentTGrad {
    pub loc: Vec<f64>,
    pub scale: Vec<f64>,
    pub dof: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentT {
    loc: Vec<f64>,
    scale: Vec<f64>,
    dof: f64,
    log_norm: f64,
}

impl StudentT {
    pub fn new(loc: Vec<f64>, scale: Vec<f64>, dof: f64) -> Result<Self> {
        check_dim(loc.len(), scale.len())?;
        if loc.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("student-t location".into()));
        }
        if scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Domain("student-t scale must be positive".into()));
        }
        if !(dof >= MIN_DOF && dof.is_finite()) {
            return Err(Error::Domain(format!(
                "student-t dof must be >= 2, got {dof}"
            )));
        }
        Ok(Self {
            loc,
            scale,
            dof,
            log_norm: t_log_norm(dof),
        })
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    pub fn loc(&self) -> &[f64] {
        &self.loc
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    /// The mean, which equals the location for dof > 1.
    pub fn mean(&self) -> &[f64] {
        &self.loc
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let v = self.dof;
        let c = self.log_norm;
        Ok(x.iter()
            .zip(&self.loc)
            .zip(&self.scale)
            .map(|((&xi, &mu), &sigma)| {
                let z = (xi - mu) / sigma;
                c - sigma.ln() - 0.5 * (v + 1.0) * (z * z / v).ln_1p()
            })
            .sum())
    }

    pub fn log_pdf_grad(&self, x: &[f64]) -> Result<(f64, StudentTGrad)> {
        check_dim(self.dim(), x.len())?;
        let v = self.dof;
        let c = self.log_norm;
        let dc = 0.5 * digamma(0.5 * (v + 1.0)) - 0.5 * digamma(0.5 * v) - 0.5 / v;
        let d = self.dim();
        let mut grad = StudentTGrad {
            loc: vec![0.0; d],
            scale: vec![0.0; d],
            dof: 0.0,
        };
        let mut lp = 0.0;
        for i in 0..d {
            let sigma = self.scale[i];
            let z = (x[i] - self.loc[i]) / sigma;
            let z2v = z * z / v;
            let log_u = z2v.ln_1p();
            let u = 1.0 + z2v;
            lp += c - sigma.ln() - 0.5 * (v + 1.0) * log_u;
            grad.loc[i] = (v + 1.0) * z / (v * sigma * u);
            grad.scale[i] = -1.0 / sigma + (v + 1.0) * z * z / (v * sigma * u);
            grad.dof += dc - 0.5 * log_u + 0.5 * (v + 1.0) * z2v / (v * u);
        }
        Ok((lp, grad))
    }
}

/// Gradient of a mixture log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGrad {
    /// Posterior component responsibilities; with softmax-parameterized
    /// weights the gradient w.r.t. logit `k` is `resp[k] - weight[k]`.
    pub responsibilities: Vec<f64>,
    /// Per-component parameter gradients, already scaled by responsibility.
    pub components: Vec<StudentTGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureT {
    weights: Vec<f64>,
    components: Vec<StudentT>,
}

impl MixtureT {
    pub fn new(weights: Vec<f64>, components: Vec<StudentT>) -> Result<Self> {
        check_dim(weights.len(), components.len())?;
        if components.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Domain("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("mixture weights sum to {total}")));
        }
        let d = components[0].dim();
        for c in &components {
            check_dim(d, c.dim())?;
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[StudentT] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// `ln sum_k w_k exp(ln p_k(x))`, max-shifted; zero-weight components are skipped.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let terms = self
            .weights
            .iter()
            .zip(&self.components)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, c)| Ok(w.ln() + c.log_pdf(x)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(log_sum_exp(&terms))
    }

    pub fn log_pdf_grad(&self, x: &[f64]) -> Result<(f64, MixtureGrad)> {
        check_dim(self.dim(), x.len())?;
        let k = self.components.len();
        let mut terms = Vec::with_capacity(k);
        let mut grads = Vec::with_capacity(k);
        for (w, c) in self.weights.iter().zip(&self.components) {
            let (lp, g) = c.log_pdf_grad(x)?;
            terms.push(if *w > 0.0 {
                w.ln() + lp
            } else {
                f64::NEG_INFINITY
            });
            grads.push(g);
        }
        let total = log_sum_exp(&terms);
        let responsibilities: Vec<f64> = terms.iter().map(|t| (t - total).exp()).collect();
        for (g, &r) in grads.iter_mut().zip(&responsibilities) {
            g.loc.iter_mut().for_each(|v| *v *= r);
            g.scale.iter_mut().for_each(|v| *v *= r);
            g.dof *= r;
        }
        Ok((
            total,
            MixtureGrad {
                responsibilities,
                components: grads,
            },
        ))
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Per-dimension shape gradients of a policy log-density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeGrad {
    pub a: f64,
    pub b: f64,
}

/// PERT-style bounded action distribution.
///
/// Per dimension, `x = 2y - 1` with `y ~ Beta(a, b)`,
/// `a = 1 + s (m + 1) / 2` and `b = 1 + s (1 - m) / 2`. The mode of `x` is `m`
/// and its mean is `s m / (s + 2)`; `s = 0` is uniform on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDist {
    mode: Vec<f64>,
    sharpness: Vec<f64>,
}

impl PolicyDist {
    pub fn new(mode: Vec<f64>, sharpness: Vec<f64>) -> Result<Self> {
        check_dim(mode.len(), sharpness.len())?;
        if mode.iter().any(|m| !(m.abs() <= 1.0)) {
            return Err(Error::Domain("policy mode must lie in [-1, 1]".into()));
        }
        if sharpness.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Domain(
                "policy sharpness must be non-negative".into(),
            ));
        }
        Ok(Self { mode, sharpness })
    }

    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    pub fn mode(&self) -> &[f64] {
        &self.mode
    }

    pub fn sharpness(&self) -> &[f64] {
        &self.sharpness
    }

    /// Beta shape parameters `(a, b)` of dimension `i`.
    pub fn shapes(&self, i: usize) -> (f64, f64) {
        let (m, s) = (self.mode[i], self.sharpness[i]);
        (1.0 + 0.5 * s * (m + 1.0), 1.0 + 0.5 * s * (1.0 - m))
    }

    /// Analytical mean, used as the greedy action.
    pub fn mean(&self) -> Vec<f64> {
        self.mode
            .iter()
            .zip(&self.sharpness)
            .map(|(&m, &s)| s * m / (s + 2.0))
            .collect()
    }

    /// Draws an action and returns it with its joint log-density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let x: Vec<f64> = (0..self.dim())
            .map(|i| {
                let (a, b) = self.shapes(i);
                let y: f64 = Beta::new(a, b).expect("shapes are >= 1").sample(rng);
                2.0 * y.clamp(BETA_EDGE, 1.0 - BETA_EDGE) - 1.0
            })
            .collect();
        let lp = self.log_pdf_unchecked(&x);
        (x, lp)
    }

    /// Inverse-CDF draw from uniforms `u`; differentiable in the shapes.
    pub fn sample_from_uniform(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), u.len())?;
        Ok(u.iter()
            .enumerate()
            .map(|(i, &ui)| {
                let (a, b) = self.shapes(i);
                let y = inv_beta_reg(a, b, ui.clamp(0.0, 1.0));
                2.0 * y.clamp(BETA_EDGE, 1.0 - BETA_EDGE) - 1.0
            })
            .collect())
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.log_pdf_unchecked(x))
    }

    fn log_pdf_unchecked(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, &xi)| {
                let (a, b) = self.shapes(i);
                let y = beta_coord(xi);
                (a - 1.0) * y.ln() + (b - 1.0) * (1.0 - y).ln()
                    - ln_beta(a, b)
                    - std::f64::consts::LN_2
            })
            .sum()
    }

    /// Gradient of the log-density w.r.t. the Beta shapes, per dimension, at fixed `x`.
    pub fn log_pdf_shape_grad(&self, x: &[f64]) -> Result<Vec<ShapeGrad>> {
        check_dim(self.dim(), x.len())?;
        Ok(x.iter()
            .enumerate()
            .map(|(i, &xi)| {
                let (a, b) = self.shapes(i);
                let y = beta_coord(xi);
                let dab = digamma(a + b);
                ShapeGrad {
                    a: y.ln() - digamma(a) + dab,
                    b: (1.0 - y).ln() - digamma(b) + dab,
                }
            })
            .collect())
    }

    /// `d ln pi(x) / d x`, per dimension.
    pub fn log_pdf_x_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(x.iter()
            .enumerate()
            .map(|(i, &xi)| {
                let (a, b) = self.shapes(i);
                let y = beta_coord(xi);
                0.5 * ((a - 1.0) / y - (b - 1.0) / (1.0 - y))
            })
            .collect())
    }

    /// Implicit reparameterization `dx/da`, `dx/db` of a sample `x`:
    /// holding the CDF value fixed, `dy/dθ = -(∂F/∂θ) / f(y)`.
    pub fn sample_shape_grad(&self, x: &[f64]) -> Result<Vec<ShapeGrad>> {
        check_dim(self.dim(), x.len())?;
        Ok(x.iter()
            .enumerate()
            .map(|(i, &xi)| {
                let (a, b) = self.shapes(i);
                let y = beta_coord(xi);
                let log_f = (a - 1.0) * y.ln() + (b - 1.0) * (1.0 - y).ln() - ln_beta(a, b);
                let f = log_f.exp();
                let ha = 1e-5 * a;
                let hb = 1e-5 * b;
                let dfa = (beta_reg(a + ha, b, y) - beta_reg(a - ha, b, y)) / (2.0 * ha);
                let dfb = (beta_reg(a, b + hb, y) - beta_reg(a, b - hb, y)) / (2.0 * hb);
                // x = 2y - 1
                ShapeGrad {
                    a: -2.0 * dfa / f,
                    b: -2.0 * dfb / f,
                }
            })
            .collect())
    }

    /// Chain a per-dimension shape gradient onto `(mode, sharpness)`.
    pub fn shape_to_param_grad(&self, i: usize, g: ShapeGrad) -> (f64, f64) {
        let (m, s) = (self.mode[i], self.sharpness[i]);
        let d_mode = 0.5 * s * (g.a - g.b);
        let d_sharp = 0.5 * (m + 1.0) * g.a + 0.5 * (1.0 - m) * g.b;
        (d_mode, d_sharp)
    }

    /// Closed-form differential entropy of the joint distribution.
    pub fn entropy(&self) -> f64 {
        (0..self.dim())
            .map(|i| {
                let (a, b) = self.shapes(i);
                ln_beta(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
                    + (a + b - 2.0) * digamma(a + b)
                    + std::f64::consts::LN_2
            })
            .sum()
    }
}

#[inline]
fn beta_coord(x: f64) -> f64 {
    (0.5 * (x + 1.0)).clamp(BETA_EDGE, 1.0 - BETA_EDGE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
        let z = (x - mu) / sigma;
        -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn t_logpdf_hand_value() {
        let t = StudentT::new(vec![0.0], vec![1.0], 2.0).unwrap();
        let want = (1.0 / (2.0 * 2f64.sqrt())).ln();
        assert!((t.log_pdf(&[0.0]).unwrap() - want).abs() < 1e-12);
        assert!((want + 1.03972).abs() < 1e-5);
    }

    #[test]
    fn t_logpdf_peaks_at_loc() {
        let t = StudentT::new(vec![0.3, -1.0], vec![0.5, 2.0], 3.5).unwrap();
        let peak = t.log_pdf(&[0.3, -1.0]).unwrap();
        for dx in [-1.0, -0.1, 0.01, 0.5, 3.0] {
            assert!(t.log_pdf(&[0.3 + dx, -1.0]).unwrap() < peak);
            assert!(t.log_pdf(&[0.3, -1.0 + dx]).unwrap() < peak);
        }
    }

    #[test]
    fn t_large_dof_is_gaussian() {
        let t = StudentT::new(vec![0.0], vec![1.0], 1e6).unwrap();
        let d = t.log_pdf(&[1.0]).unwrap() - normal_logpdf(1.0, 0.0, 1.0);
        assert!(d.abs() <= 1e-4, "{d}");
    }

    #[test]
    fn t_validation() {
        assert!(StudentT::new(vec![0.0], vec![0.0], 3.0).is_err());
        assert!(StudentT::new(vec![0.0], vec![1.0], 1.9).is_err());
        assert!(StudentT::new(vec![0.0, 1.0], vec![1.0], 3.0).is_err());
        let t = StudentT::new(vec![0.0], vec![1.0], 3.0).unwrap();
        assert!(matches!(
            t.log_pdf(&[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn t_mean_is_loc() {
        let t = StudentT::new(vec![1.0, 2.0], vec![0.1, 9.0], 2.0).unwrap();
        assert_eq!(t.mean(), &[1.0, 2.0]);
        let t = StudentT::new(vec![0.0; 3], vec![4.0; 3], 40.0).unwrap();
        assert_eq!(t.mean(), &[0.0; 3]);
    }

    #[test]
    fn t_grad_matches_finite_differences() {
        let t = StudentT::new(vec![0.2, -0.7], vec![0.6, 1.7], 3.3).unwrap();
        let x = [1.1, -2.0];
        let (_, g) = t.log_pdf_grad(&x).unwrap();
        let h = 1e-6;
        let f = |loc: Vec<f64>, scale: Vec<f64>, dof: f64| {
            StudentT::new(loc, scale, dof).unwrap().log_pdf(&x).unwrap()
        };
        for i in 0..2 {
            let mut lp = t.loc.clone();
            let mut lm = t.loc.clone();
            lp[i] += h;
            lm[i] -= h;
            let fd = (f(lp, t.scale.clone(), t.dof) - f(lm, t.scale.clone(), t.dof)) / (2.0 * h);
            assert!((fd - g.loc[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            let mut sp = t.scale.clone();
            let mut sm = t.scale.clone();
            sp[i] += h;
            sm[i] -= h;
            let fd = (f(t.loc.clone(), sp, t.dof) - f(t.loc.clone(), sm, t.dof)) / (2.0 * h);
            assert!((fd - g.scale[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        let fd = (f(t.loc.clone(), t.scale.clone(), t.dof + h)
            - f(t.loc.clone(), t.scale.clone(), t.dof - h))
            / (2.0 * h);
        assert!((fd - g.dof).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    #[test]
    fn mixture_one_hot_and_duplicates() {
        let a = StudentT::new(vec![0.0, 1.0], vec![1.0, 0.5], 2.5).unwrap();
        let b = StudentT::new(vec![3.0, -1.0], vec![2.0, 0.7], 7.0).unwrap();
        let x = [0.4, 0.2];
        let m = MixtureT::new(vec![0.0, 1.0], vec![a.clone(), b.clone()]).unwrap();
        assert!((m.log_pdf(&x).unwrap() - b.log_pdf(&x).unwrap()).abs() < 1e-14);
        let m = MixtureT::new(vec![0.5, 0.5], vec![a.clone(), a.clone()]).unwrap();
        assert!((m.log_pdf(&x).unwrap() - a.log_pdf(&x).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn mixture_matches_direct_sum() {
        let a = StudentT::new(vec![-5.0], vec![0.3], 1e4).unwrap();
        let b = StudentT::new(vec![5.0], vec![0.3], 1e4).unwrap();
        let m = MixtureT::new(vec![0.5, 0.5], vec![a.clone(), b.clone()]).unwrap();
        for x in [-5.0, -4.5, 0.0, 4.9, 6.0] {
            let direct =
                (0.5 * a.log_pdf(&[x]).unwrap().exp() + 0.5 * b.log_pdf(&[x]).unwrap().exp()).ln();
            assert!((m.log_pdf(&[x]).unwrap() - direct).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn mixture_validation() {
        let a = StudentT::new(vec![0.0], vec![1.0], 3.0).unwrap();
        let b = StudentT::new(vec![0.0, 0.0], vec![1.0, 1.0], 3.0).unwrap();
        assert!(MixtureT::new(vec![0.5, 0.4], vec![a.clone(), a.clone()]).is_err());
        assert!(MixtureT::new(vec![0.5, 0.5], vec![a.clone(), b]).is_err());
        assert!(MixtureT::new(vec![], vec![]).is_err());
        let m = MixtureT::new(vec![1.0], vec![a]).unwrap();
        assert!(m.log_pdf(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn mixture_grad_matches_finite_differences() {
        let comps = vec![
            StudentT::new(vec![0.1, 0.0], vec![0.5, 1.2], 2.4).unwrap(),
            StudentT::new(vec![-1.0, 0.6], vec![0.9, 0.4], 5.0).unwrap(),
        ];
        let w = vec![0.3, 0.7];
        let x = [-0.3, 0.5];
        let m = MixtureT::new(w.clone(), comps.clone()).unwrap();
        let (_, g) = m.log_pdf_grad(&x).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            for i in 0..2 {
                let mut cp = comps.clone();
                let mut cm = comps.clone();
                cp[k].loc[i] += h;
                cm[k].loc[i] -= h;
                let fd = (MixtureT::new(w.clone(), cp).unwrap().log_pdf(&x).unwrap()
                    - MixtureT::new(w.clone(), cm).unwrap().log_pdf(&x).unwrap())
                    / (2.0 * h);
                assert!((fd - g.components[k].loc[i]).abs() < 1e-6);
            }
        }
        // logits: w = softmax(l); d/dl_k = resp_k - w_k
        let logits: Vec<f64> = w.iter().map(|v: &f64| v.ln()).collect();
        let eval = |l: &[f64]| {
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            let ww: Vec<f64> = l.iter().map(|v| v.exp() / z).collect();
            MixtureT::new(ww, comps.clone())
                .unwrap()
                .log_pdf(&x)
                .unwrap()
        };
        for k in 0..2 {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp[k] += h;
            lm[k] -= h;
            let fd = (eval(&lp) - eval(&lm)) / (2.0 * h);
            assert!((fd - (g.responsibilities[k] - w[k])).abs() < 1e-6);
        }
    }

    #[test]
    fn policy_mean_examples() {
        let p = PolicyDist::new(vec![0.0], vec![3.0]).unwrap();
        assert_eq!(p.mean(), vec![0.0]);
        let p = PolicyDist::new(vec![0.5], vec![4.0]).unwrap();
        assert!((p.mean()[0] - 1.0 / 3.0).abs() < 1e-15);
        let p = PolicyDist::new(vec![0.8], vec![1e9]).unwrap();
        assert!((p.mean()[0] - 0.8).abs() < 1e-8);
        assert!(p.mean()[0] < 0.8);
    }

    #[test]
    fn policy_symmetric_mode_zero() {
        let p = PolicyDist::new(vec![0.0], vec![2.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| p.sample(&mut rng).0[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * (var / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn policy_sample_mean_matches_analytic() {
        let p = PolicyDist::new(vec![0.5], vec![4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let mean = (0..n).map(|_| p.sample(&mut rng).0[0]).sum::<f64>() / n as f64;
        assert!((mean - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn policy_density_integrates_to_one() {
        for (m, s) in [(0.5, 4.0), (-0.9, 12.0), (0.0, 0.0), (0.99, 1.5)] {
            let p = PolicyDist::new(vec![m], vec![s]).unwrap();
            let n = 200_000;
            let h = 2.0 / n as f64;
            let mut total = 0.0;
            for k in 0..=n {
                let x = -1.0 + k as f64 * h;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                total += w * p.log_pdf(&[x]).unwrap().exp();
            }
            assert!(
                (total * h - 1.0).abs() < 1e-4,
                "m={m} s={s} got {}",
                total * h
            );
        }
    }

    #[test]
    fn policy_log_density_at_sample_matches() {
        let p = PolicyDist::new(vec![0.2, -0.6], vec![3.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (x, lp) = p.sample(&mut rng);
            assert!(lp.is_finite());
            assert!((p.log_pdf(&x).unwrap() - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_entropy_bounded_by_uniform() {
        for (m, s) in [(0.0, 0.0), (0.3, 1.0), (-0.7, 20.0)] {
            let p = PolicyDist::new(vec![m], vec![s]).unwrap();
            assert!(p.entropy() <= std::f64::consts::LN_2 + 1e-12);
            // Monte-Carlo agrees with the closed form
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let n = 50_000;
            let mc = -(0..n).map(|_| p.sample(&mut rng).1).sum::<f64>() / n as f64;
            assert!(mc <= std::f64::consts::LN_2 + 0.01);
            assert!((mc - p.entropy()).abs() < 0.02, "m={m} s={s} mc={mc}");
        }
        let p = PolicyDist::new(vec![0.0], vec![0.0]).unwrap();
        assert!((p.entropy() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn policy_shape_grads_match_finite_differences() {
        let p = PolicyDist::new(vec![0.3], vec![2.5]).unwrap();
        let x = [0.1];
        let (a, b) = p.shapes(0);
        let g = p.log_pdf_shape_grad(&x).unwrap()[0];
        let lp = |a: f64, b: f64| {
            let y = 0.5 * (x[0] + 1.0);
            (a - 1.0) * y.ln() + (b - 1.0) * (1.0 - y).ln() - ln_beta(a, b) - std::f64::consts::LN_2
        };
        let h = 1e-6;
        assert!(((lp(a + h, b) - lp(a - h, b)) / (2.0 * h) - g.a).abs() < 1e-7);
        assert!(((lp(a, b + h) - lp(a, b - h)) / (2.0 * h) - g.b).abs() < 1e-7);

        let dx = p.log_pdf_x_grad(&x).unwrap()[0];
        let fd = (p.log_pdf(&[x[0] + h]).unwrap() - p.log_pdf(&[x[0] - h]).unwrap()) / (2.0 * h);
        assert!((fd - dx).abs() < 1e-6);
    }

    /// Bisection inverse of the regularized incomplete beta, independent of statrs' inverse.
    fn inv_cdf_bisect(a: f64, b: f64, u: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if beta_reg(a, b, mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn implicit_reparam_matches_inverse_cdf_differences() {
        for (a, b, u) in [
            (2.0, 3.0, 0.3),
            (1.2, 1.05, 0.8),
            (7.0, 2.0, 0.5),
            (1.0, 4.0, 0.1),
        ] {
            // recover (m, s) from (a, b): s = a + b - 2, m = (a - b) / s
            let s = a + b - 2.0;
            let m = (a - b) / s;
            let p = PolicyDist::new(vec![m], vec![s]).unwrap();
            let x = 2.0 * inv_cdf_bisect(a, b, u) - 1.0;
            let g = p.sample_shape_grad(&[x]).unwrap()[0];
            let h = 1e-5;
            let fa = 2.0 * (inv_cdf_bisect(a + h, b, u) - inv_cdf_bisect(a - h, b, u)) / (2.0 * h);
            let fb = 2.0 * (inv_cdf_bisect(a, b + h, u) - inv_cdf_bisect(a, b - h, u)) / (2.0 * h);
            assert!(
                (fa - g.a).abs() < 1e-5 * (1.0 + fa.abs()),
                "a={a} b={b}: {fa} vs {}",
                g.a
            );
            assert!(
                (fb - g.b).abs() < 1e-5 * (1.0 + fb.abs()),
                "a={a} b={b}: {fb} vs {}",
                g.b
            );
        }
    }

    #[test]
    fn inverse_cdf_sampling_agrees_with_bisection() {
        let p = PolicyDist::new(vec![0.4], vec![6.0]).unwrap();
        let (a, b) = p.shapes(0);
        for u in [0.01, 0.3, 0.5, 0.77, 0.99] {
            let x = p.sample_from_uniform(&[u]).unwrap()[0];
            assert!((x - (2.0 * inv_cdf_bisect(a, b, u) - 1.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn policy_validation() {
        assert!(PolicyDist::new(vec![1.2], vec![1.0]).is_err());
        assert!(PolicyDist::new(vec![0.0], vec![-1.0]).is_err());
        assert!(PolicyDist::new(vec![0.0, 0.1], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn t_translation_covariant(
            loc in -5.0f64..5.0, scale in 0.1f64..3.0, dof in 2.0f64..30.0,
            x in -10.0f64..10.0, shift in -100.0f64..100.0,
        ) {
            let a = StudentT::new(vec![loc], vec![scale], dof).unwrap().log_pdf(&[x]).unwrap();
            let b = StudentT::new(vec![loc + shift], vec![scale], dof).unwrap().log_pdf(&[x + shift]).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()) + 1e-11);
        }

        #[test]
        fn mixture_lower_bound(
            w0 in 0.05f64..0.95, l0 in -3.0f64..3.0, l1 in -3.0f64..3.0,
            s0 in 0.2f64..2.0, s1 in 0.2f64..2.0, x in -6.0f64..6.0,
        ) {
            let c0 = StudentT::new(vec![l0], vec![s0], 3.0).unwrap();
            let c1 = StudentT::new(vec![l1], vec![s1], 9.0).unwrap();
            let lmin = c0.log_pdf(&[x]).unwrap().min(c1.log_pdf(&[x]).unwrap());
            let m = MixtureT::new(vec![w0, 1.0 - w0], vec![c0, c1]).unwrap();
            prop_assert!(m.log_pdf(&[x]).unwrap() >= lmin + w0.min(1.0 - w0).ln() - 1e-12);
        }

        #[test]
        fn policy_samples_in_box(m in -1.0f64..=1.0, s in 0.0f64..200.0, seed in 0u64..10_000) {
            let p = PolicyDist::new(vec![m, -m], vec![s, s * 0.5]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, lp) = p.sample(&mut rng);
            prop_assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(lp.is_finite());
        }
    }
}

//! One-step empowerment objective and the two transition models it compares.
//!
//! The conditioned model `p_e(s' | s, a)` is a diagonal Student-t; the marginal
//! model `p_m(s' | s)` is a Student-t mixture. Both predict `s' = s + delta`
//! so that an untrained head starts near "nothing moves".

use ndarray::{concatenate, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::density::{MixtureT, StudentT, StudentTGrad, MIN_DOF};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Adam, Network};

pub const DEFAULT_COMPONENTS: usize = 10;
/// Added to the softplus of the raw scale output.
pub const SCALE_FLOOR: f64 = 1e-3;
/// Log-ratios below this are clamped before `exp(-d)` so `J` stays finite.
const MIN_LOG_RATIO: f64 = -300.0;

/// `f(d) = d + exp(-d) - 1`, the non-negative Monte-Carlo KL term.
pub fn objective_from_log_ratio(d: f64) -> f64 {
    let d = d.max(MIN_LOG_RATIO);
    d + (-d).exp_m1()
}

fn check_rows(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Raw outputs `[delta (D), scale (D), dof (1)]` for one Student-t.
fn decode_t(state: ArrayView1<f64>, raw: &[f64]) -> Result<StudentT> {
    let d = state.len();
    let loc = state.iter().zip(&raw[..d]).map(|(s, dl)| s + dl).collect();
    let scale = raw[d..2 * d]
        .iter()
        .map(|&r| softplus(r) + SCALE_FLOOR)
        .collect();
    StudentT::new(loc, scale, MIN_DOF + softplus(raw[2 * d]))
}

/// Writes `scale * dlp/d(raw)` for one decoded Student-t into `out`.
fn encode_t_grad(raw: &[f64], g: &StudentTGrad, scale: f64, out: &mut [f64]) {
    let d = g.loc.len();
    for i in 0..d {
        out[i] = scale * g.loc[i];
        out[d + i] = scale * g.scale[i] * sigmoid(raw[d + i]);
    }
    out[2 * d] = scale * g.dof * sigmoid(raw[2 * d]);
}

/// `p_e(s' | s, a)`: a diagonal Student-t per state-action pair.
#[derive(Debug, Clone)]
pub struct ConditionedHead {
    net: Network,
    opt: Adam,
    state_dim: usize,
    action_dim: usize,
}

impl ConditionedHead {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        lr: f64,
        rng: &mut R,
    ) -> Self {
        let net = Network::new(state_dim + action_dim, hidden, 2 * state_dim + 1, rng);
        let opt = Adam::new(net.num_params(), lr);
        Self {
            net,
            opt,
            state_dim,
            action_dim,
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    fn inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_rows(self.state_dim, states.ncols())?;
        check_rows(self.action_dim, actions.ncols())?;
        check_rows(states.nrows(), actions.nrows())?;
        Ok(concatenate(Axis(1), &[states, actions]).expect("row counts checked"))
    }

    pub fn distributions(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Vec<StudentT>> {
        let raw = self.net.predict(self.inputs(states, actions)?.view())?;
        states
            .rows()
            .into_iter()
            .zip(raw.rows())
            .map(|(s, r)| decode_t(s, r.as_slice().expect("standard layout")))
            .collect()
    }

    /// Mean negative log-likelihood and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        next: ArrayView2<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        check_rows(states.nrows(), next.nrows())?;
        let (raw, tape) = self.net.forward(self.inputs(states, actions)?.view())?;
        let b = states.nrows() as f64;
        let mut d_out = Array2::zeros(raw.raw_dim());
        let mut loss = 0.0;
        for (i, (s, r)) in states.rows().into_iter().zip(raw.rows()).enumerate() {
            let r = r.as_slice().expect("standard layout");
            let dist = decode_t(s, r)?;
            let (lp, g) = dist.log_pdf_grad(next.row(i).as_slice().expect("standard layout"))?;
            loss -= lp / b;
            let mut row = d_out.row_mut(i);
            encode_t_grad(
                r,
                &g,
                -1.0 / b,
                row.as_slice_mut().expect("standard layout"),
            );
        }
        let (grads, _) = self.net.backward(&tape, d_out.view());
        Ok((loss, grads))
    }

    pub fn nll(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        next: ArrayView2<f64>,
    ) -> Result<f64> {
        check_rows(states.nrows(), next.nrows())?;
        let dists = self.distributions(states, actions)?;
        let mut total = 0.0;
        for (d, x) in dists.iter().zip(next.rows()) {
            total -= d.log_pdf(x.as_slice().expect("standard layout"))?;
        }
        Ok(total / states.nrows() as f64)
    }
}

/// `p_m(s' | s)`: a `K`-component Student-t mixture per state.
#[derive(Debug, Clone)]
pub struct MixtureHead {
    net: Network,
    opt: Adam,
    state_dim: usize,
    components: usize,
}

impl MixtureHead {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        components: usize,
        hidden: &[usize],
        lr: f64,
        rng: &mut R,
    ) -> Self {
        assert!(components >= 1, "a mixture needs at least one component");
        let net = Network::new(state_dim, hidden, components * (2 * state_dim + 2), rng);
        let opt = Adam::new(net.num_params(), lr);
        Self {
            net,
            opt,
            state_dim,
            components,
        }
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    fn block(&self) -> usize {
        2 * self.state_dim + 1
    }

    fn decode(&self, state: ArrayView1<f64>, raw: &[f64]) -> Result<MixtureT> {
        let (k, w) = (self.components, self.block());
        let logits = &raw[k * w..];
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let weights = exps.iter().map(|e| e / total).collect();
        let comps = (0..k)
            .map(|j| decode_t(state, &raw[j * w..(j + 1) * w]))
            .collect::<Result<Vec<_>>>()?;
        MixtureT::new(weights, comps)
    }

    pub fn distributions(&self, states: ArrayView2<f64>) -> Result<Vec<MixtureT>> {
        check_rows(self.state_dim, states.ncols())?;
        let raw = self.net.predict(states)?;
        states
            .rows()
            .into_iter()
            .zip(raw.rows())
            .map(|(s, r)| self.decode(s, r.as_slice().expect("standard layout")))
            .collect()
    }

    pub fn loss_and_grad(
        &self,
        states: ArrayView2<f64>,
        next: ArrayView2<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        check_rows(self.state_dim, states.ncols())?;
        check_rows(states.nrows(), next.nrows())?;
        let (raw, tape) = self.net.forward(states)?;
        let (k, w) = (self.components, self.block());
        let b = states.nrows() as f64;
        let mut d_out = Array2::zeros(raw.raw_dim());
        let mut loss = 0.0;
        for (i, (s, r)) in states.rows().into_iter().zip(raw.rows()).enumerate() {
            let r = r.as_slice().expect("standard layout");
            let mix = self.decode(s, r)?;
            let (lp, g) = mix.log_pdf_grad(next.row(i).as_slice().expect("standard layout"))?;
            loss -= lp / b;
            let mut row = d_out.row_mut(i);
            let row = row.as_slice_mut().expect("standard layout");
            for j in 0..k {
                encode_t_grad(
                    &r[j * w..(j + 1) * w],
                    &g.components[j],
                    -1.0 / b,
                    &mut row[j * w..(j + 1) * w],
                );
                row[k * w + j] = -(g.responsibilities[j] - mix.weights()[j]) / b;
            }
        }
        let (grads, _) = self.net.backward(&tape, d_out.view());
        Ok((loss, grads))
    }

    pub fn nll(&self, states: ArrayView2<f64>, next: ArrayView2<f64>) -> Result<f64> {
        check_rows(states.nrows(), next.nrows())?;
        let dists = self.distributions(states)?;
        let mut total = 0.0;
        for (d, x) in dists.iter().zip(next.rows()) {
            total -= d.log_pdf(x.as_slice().expect("standard layout"))?;
        }
        Ok(total / states.nrows() as f64)
    }

    /// One optimizer step on the mean NLL; returns the pre-step loss.
    pub fn step(&mut self, states: ArrayView2<f64>, next: ArrayView2<f64>) -> Result<f64> {
        let (loss, grads) = self.loss_and_grad(states, next)?;
        if loss.is_finite() {
            self.opt.step(self.net.params_mut(), &grads);
        }
        Ok(loss)
    }
}

impl ConditionedHead {
    /// One optimizer step on the mean NLL; returns the pre-step loss.
    pub fn step(
        &mut self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        next: ArrayView2<f64>,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grad(states, actions, next)?;
        if loss.is_finite() {
            self.opt.step(self.net.params_mut(), &grads);
        }
        Ok(loss)
    }
}

/// Both transition models, trained together.
#[derive(Debug, Clone)]
pub struct TransitionModels {
    pub conditioned: ConditionedHead,
    pub marginal: MixtureHead,
    skipped: u64,
}

impl TransitionModels {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        components: usize,
        hidden: &[usize],
        lr: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            conditioned: ConditionedHead::new(state_dim, action_dim, hidden, lr, rng),
            marginal: MixtureHead::new(state_dim, components, hidden, lr, rng),
            skipped: 0,
        }
    }

    /// Updates skipped because the loss or a gradient was non-finite.
    pub fn skipped_updates(&self) -> u64 {
        self.skipped + self.conditioned.opt.skipped() + self.marginal.opt.skipped()
    }

    /// `J(a, s)` for one state and a set of candidate actions (rows of `actions`).
    ///
    /// Deterministic: `s'` is the conditioned model's mean, so no sampling happens.
    pub fn objective(&self, state: &[f64], actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        let n = actions.nrows();
        let s = ArrayView1::from(state);
        let states = s.broadcast((n, state.len())).expect("broadcast a row");
        let conds = self.conditioned.distributions(states, actions)?;
        let marginal = self
            .marginal
            .distributions(s.insert_axis(Axis(0)))?
            .pop()
            .expect("one state in, one mixture out");
        conds
            .iter()
            .map(|pe| {
                let s_next = pe.mean();
                let d = pe.log_pdf(s_next)? - marginal.log_pdf(s_next)?;
                Ok(objective_from_log_ratio(d))
            })
            .collect()
    }

    /// `J(a, s)` for a single action.
    pub fn objective_one(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let a = ArrayView1::from(action).insert_axis(Axis(0));
        Ok(self.objective(state, a)?[0])
    }

    /// One NLL step on both heads; returns the summed pre-step loss.
    pub fn update(
        &mut self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        next: ArrayView2<f64>,
    ) -> Result<f64> {
        if states.nrows() == 0 {
            return Err(Error::Domain("model update needs a non-empty batch".into()));
        }
        let (le, ge) = self.conditioned.loss_and_grad(states, actions, next)?;
        let (lm, gm) = self.marginal.loss_and_grad(states, next)?;
        let loss = le + lm;
        if !loss.is_finite() {
            self.skipped += 1;
            return Ok(loss);
        }
        self.conditioned
            .opt
            .step(self.conditioned.net.params_mut(), &ge);
        self.marginal.opt.step(self.marginal.net.params_mut(), &gm);
        Ok(loss)
    }
}

//! Fixed-architecture MLPs with hand-written reverse mode, and an Adam optimizer.
//!
//! Hidden layers are `affine -> RMSNorm (trainable gain) -> squareplus`; the
//! output layer is affine. Parameters live in one flat `Vec<f64>` so that
//! optimizer state, Polyak averaging and checkpoints all work on slices.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: [usize; 2] = [100, 100];
pub const DEFAULT_LR: f64 = 1e-4;
const RMS_EPS: f64 = 1e-8;
const MAGIC: &[u8; 8] = b"EBONNET1";

/// `0.5 (x + sqrt(x^2 + 4))`.
#[inline]
pub fn squareplus(x: f64) -> f64 {
    0.5 * (x + (x * x + 4.0).sqrt())
}

#[inline]
pub fn squareplus_grad(x: f64) -> f64 {
    0.5 * (1.0 + x / (x * x + 4.0).sqrt())
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    w: usize,
    b: usize,
    gain: Option<usize>,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediates recorded by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    /// RMS-normalized pre-activations, before the gain.
    normalized: Vec<Array2<f64>>,
    inv_rms: Vec<Array1<f64>>,
    /// Gain-scaled activations fed to squareplus.
    scaled: Vec<Array2<f64>>,
}

impl Network {
    /// `input -> hidden[0] -> ... -> output`, weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases, unit gains.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut net = Self {
            params: vec![0.0; Self::count_params(&sizes)],
            sizes,
        };
        for slot in net.slots() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for p in &mut net.params[slot.w..slot.w + slot.fan_in * slot.fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            if let Some(g) = slot.gain {
                net.params[g..g + slot.fan_out].fill(1.0);
            }
        }
        net
    }

    fn count_params(sizes: &[usize]) -> usize {
        let layers = sizes.len() - 1;
        (0..layers)
            .map(|l| {
                let hidden = l + 1 < layers;
                sizes[l] * sizes[l + 1] + sizes[l + 1] * if hidden { 2 } else { 1 }
            })
            .sum()
    }

    fn slots(&self) -> Vec<LayerSlots> {
        let layers = self.sizes.len() - 1;
        let mut off = 0;
        (0..layers)
            .map(|l| {
                let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
                let w = off;
                off += fan_in * fan_out;
                let b = off;
                off += fan_out;
                let gain = (l + 1 < layers).then(|| {
                    let g = off;
                    off += fan_out;
                    g
                });
                LayerSlots {
                    w,
                    b,
                    gain,
                    fan_in,
                    fan_out,
                }
            })
            .collect()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Output-layer bias, for heads that want a specific initial output.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let last = *self.slots().last().expect("at least one layer");
        &mut self.params[last.b..last.b + last.fan_out]
    }

    fn weight(&self, s: &LayerSlots) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (s.fan_in, s.fan_out),
            &self.params[s.w..s.w + s.fan_in * s.fan_out],
        )
        .expect("layout")
    }

    fn vector(&self, at: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[at..at + len])
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Batched forward pass without recording intermediates.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.run(x, None))
    }

    /// Batched forward pass that records what [`Network::backward`] needs.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let mut tape = Tape {
            inputs: Vec::new(),
            normalized: Vec::new(),
            inv_rms: Vec::new(),
            scaled: Vec::new(),
        };
        let out = self.run(x, Some(&mut tape));
        Ok((out, tape))
    }

    fn run(&self, x: ArrayView2<f64>, mut tape: Option<&mut Tape>) -> Array2<f64> {
        let mut h = x.to_owned();
        for s in self.slots() {
            let mut z = h.dot(&self.weight(&s));
            z += &self.vector(s.b, s.fan_out);
            let Some(g) = s.gain else {
                if let Some(t) = tape.as_deref_mut() {
                    t.inputs.push(h);
                }
                return z;
            };
            let inv_rms = z.map_axis(Axis(1), |row| {
                1.0 / (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + RMS_EPS).sqrt()
            });
            let normalized = &z * &inv_rms.view().insert_axis(Axis(1));
            let scaled = &normalized * &self.vector(g, s.fan_out);
            let next = scaled.mapv(squareplus);
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(h);
                t.normalized.push(normalized);
                t.inv_rms.push(inv_rms);
                t.scaled.push(scaled);
            }
            h = next;
        }
        unreachable!("network always ends with an output layer")
    }

    /// Reverse pass. `d_out` is the loss gradient w.r.t. the outputs of the
    /// recorded batch. Returns flat parameter gradients and input gradients.
    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let slots = self.slots();
        let mut delta = d_out.to_owned();
        for (l, s) in slots.iter().enumerate().rev() {
            if let Some(g) = s.gain {
                // delta holds dL/d(squareplus output) of hidden layer l
                let scaled = &tape.scaled[l];
                let normalized = &tape.normalized[l];
                let gain = self.vector(g, s.fan_out);
                let d_scaled = &delta * &scaled.mapv(squareplus_grad);
                let d_gain = (&d_scaled * normalized).sum_axis(Axis(0));
                grads[g..g + s.fan_out]
                    .iter_mut()
                    .zip(d_gain.iter())
                    .for_each(|(a, b)| *a += b);
                let d_norm = &d_scaled * &gain;
                let proj = (&d_norm * normalized)
                    .mean_axis(Axis(1))
                    .expect("non-empty row");
                let d_z = (&d_norm - normalized * &proj.insert_axis(Axis(1)))
                    * &tape.inv_rms[l].view().insert_axis(Axis(1));
                delta = d_z;
            }
            let input = &tape.inputs[l];
            let d_w = input.t().dot(&delta);
            grads[s.w..s.w + s.fan_in * s.fan_out]
                .iter_mut()
                .zip(d_w.iter())
                .for_each(|(a, b)| *a += b);
            let d_b = delta.sum_axis(Axis(0));
            grads[s.b..s.b + s.fan_out]
                .iter_mut()
                .zip(d_b.iter())
                .for_each(|(a, b)| *a += b);
            delta = delta.dot(&self.weight(s).t());
        }
        (grads, delta)
    }

    /// `self <- (1 - tau) self + tau other`.
    pub fn soft_update_from(&mut self, other: &Network, tau: f64) {
        assert_eq!(
            self.sizes, other.sizes,
            "soft update between different architectures"
        );
        for (t, o) in self.params.iter_mut().zip(&other.params) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Binary record: magic, size count (u32), sizes (u64), param count (u64),
    /// params as little-endian f64.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a network record".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(bad)?;
        let n_sizes = u32::from_le_bytes(b4) as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::Checkpoint(format!(
                "implausible layer count {n_sizes}"
            )));
        }
        let mut b8 = [0u8; 8];
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            r.read_exact(&mut b8).map_err(bad)?;
            sizes.push(u64::from_le_bytes(b8) as usize);
        }
        r.read_exact(&mut b8).map_err(bad)?;
        let count = u64::from_le_bytes(b8) as usize;
        if sizes.iter().any(|&s| s == 0) || count != Self::count_params(&sizes) {
            return Err(Error::Checkpoint(
                "parameter count does not match layer sizes".into(),
            ));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8).map_err(bad)?;
            params.push(f64::from_le_bytes(b8));
        }
        Ok(Self { sizes, params })
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
    skipped: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            steps: 0,
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Steps rejected because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Applies one update; returns `false` (and leaves `params` untouched)
    /// when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> bool {
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer built for a different size"
        );
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return false;
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        debug_assert!(params.iter().all(|p| p.is_finite()));
        true
    }
}

/// Stacks row vectors into a batch matrix.
pub fn stack_rows<'a, I>(rows: I, width: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        debug_assert_eq!(r.len(), width);
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, width), data).expect("rows have equal width")
}

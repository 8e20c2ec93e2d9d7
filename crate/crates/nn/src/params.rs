//! Named parameter storage, dense layers and the AdamW optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Grads, Mat, Tape, Var};

/// Flat list of parameter matrices, addressed by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Uniform Glorot initialization, `U(-a, a)` with `a = √(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> usize {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let m = Mat::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a));
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    /// Records every parameter on `tape`, as leaves when gradients are wanted.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|m| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) })
            .collect()
    }

    /// Gradients of the bound parameters, zero where the loss ignores one.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Grads) -> Vec<Mat> {
        vars.iter()
            .zip(&self.values)
            .map(|(v, m)| grads.take(*v).unwrap_or_else(|| Mat::zeros(m.rows, m.cols)))
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    /// Overwrites all values from a flat slice in storage order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), String> {
        if flat.len() != self.count() {
            return Err(format!("expected {} parameters, got {}", self.count(), flat.len()));
        }
        let mut off = 0;
        for m in &mut self.values {
            let n = m.data.len();
            m.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Fully connected layer `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, fan_out));
        Dense {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        tape.linear(x, p[self.weight], p[self.bias])
    }
}

/// Learnable per-feature scale and shift of a normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub gamma: usize,
    pub beta: usize,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Affine {
            gamma: store.add(format!("{name}.gamma"), Mat::from_vec(1, width, vec![1.0; width])),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, width)),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay:
/// `θ ← θ − α·(m̂ / (√v̂ + eps) + γ·θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros = || store.values().iter().map(|m| vec![0.0; m.data.len()]).collect();
        AdamW {
            learning_rate,
            weight_decay,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (a, wd) = (self.learning_rate, self.weight_decay);
        for (k, (p, g)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= a * (mh / (vh.sqrt() + self.eps) + wd * p.data[i]);
            }
        }
    }
}

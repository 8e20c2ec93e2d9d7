//! Encode-process-decode message-passing network.
//!
//! ```text
//! h⁰ᵢ   = LayerNorm(MLP_enc(xᵢ))
//! mᵢⱼ   = ψ(h_i, h_j, x_i − x_j)              for every edge j → i
//! hˡ⁺¹ᵢ = InstanceNorm(φ(hᵢ, mean_j mᵢⱼ))
//! pᵢ    = MLP_dec(hᴸᵢ)
//! ```
//!
//! The first dense layer of ψ acts on the concatenation `[h_i ∥ h_j ∥ Δx]`.
//! Its weight is stored as three row blocks so the two `H × H` products run
//! once per node instead of once per edge; the result is the same layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::GraphBatch;
use crate::params::{Affine, Dense, ParamStore};
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnShape {
    /// Input features per node.
    pub k: usize,
    /// Latent width.
    pub hidden: usize,
    /// Message-passing layers.
    pub layers: usize,
    /// Output channels per node.
    pub out: usize,
}

#[derive(Debug, Clone, Copy)]
struct MessageLayer {
    psi_self: usize,
    psi_neighbor: usize,
    psi_offset: usize,
    psi_bias: usize,
    psi2: Dense,
    phi1: Dense,
    phi2: Dense,
    norm: Affine,
}

#[derive(Debug, Clone)]
pub struct GnnModel {
    shape: GnnShape,
    params: ParamStore,
    enc1: Dense,
    enc2: Dense,
    enc_norm: Affine,
    layers: Vec<MessageLayer>,
    dec1: Dense,
    dec2: Dense,
}

impl GnnModel {
    /// Fresh model with Glorot-uniform weights, zero biases and unit norms.
    pub fn new(shape: GnnShape, seed: u64) -> Self {
        let GnnShape { k, hidden: h, layers, out } = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let enc1 = Dense::new(&mut p, "enc.0", k, h, &mut rng);
        let enc2 = Dense::new(&mut p, "enc.1", h, h, &mut rng);
        let enc_norm = Affine::new(&mut p, "enc.norm", h);
        let psi_bound = (6.0 / (2 * h + k + h) as f64).sqrt();
        let block = |p: &mut ParamStore, name: String, rows: usize, rng: &mut ChaCha8Rng| {
            p.add(name, Mat::from_fn(rows, h, |_, _| rng.random_range(-psi_bound..psi_bound)))
        };
        let mut mp = Vec::with_capacity(layers);
        for l in 0..layers {
            let psi_self = block(&mut p, format!("mp.{l}.psi.0.weight_i"), h, &mut rng);
            let psi_neighbor = block(&mut p, format!("mp.{l}.psi.0.weight_j"), h, &mut rng);
            let psi_offset = block(&mut p, format!("mp.{l}.psi.0.weight_dx"), k, &mut rng);
            let psi_bias = p.add(format!("mp.{l}.psi.0.bias"), Mat::zeros(1, h));
            let psi2 = Dense::new(&mut p, &format!("mp.{l}.psi.1"), h, h, &mut rng);
            let phi1 = Dense::new(&mut p, &format!("mp.{l}.phi.0"), 2 * h, h, &mut rng);
            let phi2 = Dense::new(&mut p, &format!("mp.{l}.phi.1"), h, h, &mut rng);
            let norm = Affine::new(&mut p, &format!("mp.{l}.norm"), h);
            mp.push(MessageLayer {
                psi_self,
                psi_neighbor,
                psi_offset,
                psi_bias,
                psi2,
                phi1,
                phi2,
                norm,
            });
        }
        let dec1 = Dense::new(&mut p, "dec.0", h, h, &mut rng);
        let dec2 = Dense::new(&mut p, "dec.1", h, out, &mut rng);
        GnnModel {
            shape,
            params: p,
            enc1,
            enc2,
            enc_norm,
            layers: mp,
            dec1,
            dec2,
        }
    }

    pub fn shape(&self) -> GnnShape {
        self.shape
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Records the forward pass for `batch` using parameter variables `p`
    /// (from [`ParamStore::bind`]); returns the `N × out` prediction.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], batch: &GraphBatch) -> Var {
        let x = tape.constant(batch.x.clone());
        let dx = tape.constant(batch.dx.clone());
        let h = self.enc1.forward(tape, p, x);
        let h = tape.silu(h);
        let h = self.enc2.forward(tape, p, h);
        let h = tape.silu(h);
        let mut h = tape.layer_norm(h, p[self.enc_norm.gamma], p[self.enc_norm.beta]);
        for l in &self.layers {
            let hi = tape.matmul(h, p[l.psi_self]);
            let hj = tape.matmul(h, p[l.psi_neighbor]);
            let off = tape.linear(dx, p[l.psi_offset], p[l.psi_bias]);
            let m = tape.edge_sum(hi, batch.dst.clone(), hj, batch.src.clone(), off);
            let m = tape.silu(m);
            let m = l.psi2.forward(tape, p, m);
            let m = tape.silu(m);
            let agg = tape.scatter_mean(m, batch.dst.clone(), batch.inv_degree.clone());
            let u = tape.concat_cols(&[h, agg]);
            let u = l.phi1.forward(tape, p, u);
            let u = tape.silu(u);
            let u = l.phi2.forward(tape, p, u);
            let u = tape.silu(u);
            h = tape.instance_norm(u, p[l.norm.gamma], p[l.norm.beta], batch.segments.clone());
        }
        let o = self.dec1.forward(tape, p, h);
        let o = tape.silu(o);
        self.dec2.forward(tape, p, o)
    }

    /// Forward pass without gradients.
    pub fn predict(&self, batch: &GraphBatch) -> Mat {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, batch);
        tape.value(out).clone()
    }
}

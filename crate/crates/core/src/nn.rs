//! Layers shared by the backbone, the heads and the aggregator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::{Tape, Var};

pub const LN_EPS: f32 = 1e-6;
const INIT_STD: f32 = 0.02;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: b.trunc_normal("weight", &[in_dim, out_dim], INIT_STD)?,
            bias: b.constant("bias", &[out_dim], 0.0)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add_broadcast(y, p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: b.constant("weight", &[dim], 1.0)?,
            bias: b.constant("bias", &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.weight], p[self.bias], LN_EPS)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub drop_path: f32,
}

impl Block {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        drop_path: f32,
    ) -> Result<Self> {
        Ok(Block {
            norm1: LayerNorm::new(&mut b.child("norm1"), dim)?,
            qkv: Linear::new(&mut b.child("attn.qkv"), dim, 3 * dim)?,
            proj: Linear::new(&mut b.child("attn.proj"), dim, dim)?,
            norm2: LayerNorm::new(&mut b.child("norm2"), dim)?,
            fc1: Linear::new(&mut b.child("mlp.fc1"), dim, mlp_ratio * dim)?,
            fc2: Linear::new(&mut b.child("mlp.fc2"), mlp_ratio * dim, dim)?,
            heads,
            drop_path,
        })
    }

    /// `x: [b, t, d]`. Drop-path is applied only when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let a = tape.attention(qkv, self.heads)?;
        let a = self.proj.forward(tape, p, a)?;
        let a = drop_path(tape, a, self.drop_path, rng.as_deref_mut())?;
        let x = tape.add(x, a)?;

        let h = self.norm2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h)?;
        let h = drop_path(tape, h, self.drop_path, rng)?;
        tape.add(x, h)
    }
}

/// Per-sample stochastic depth on a residual branch.
pub fn drop_path(tape: &mut Tape, x: Var, rate: f32, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let factors = (0..tape.shape(x)[0])
        .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.scale_samples(x, factors)
}

/// GELU MLP: GELU between layers, none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder<'_>, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut b.child(&i.to_string()), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i != last {
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }
}

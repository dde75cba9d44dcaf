//! Projection and prediction MLPs, and the two-block aggregator that turns
//! an averaged patch token plus its retrieved neighbours into a local-group
//! feature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, Mlp};
use crate::params::{Bound, ParamBuilder, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpHeadConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub num_layers: usize,
}

impl MlpHeadConfig {
    pub fn projection(in_dim: usize) -> Self {
        MlpHeadConfig { in_dim, hidden_dim: 256, out_dim: 64, num_layers: 3 }
    }

    pub fn prediction(dim: usize) -> Self {
        MlpHeadConfig { in_dim: dim, hidden_dim: 256, out_dim: dim, num_layers: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.num_layers) {
            return Err(Error::Config(format!(
                "head num_layers must be 2 or 3, got {}",
                self.num_layers
            )));
        }
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.in_dim];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.num_layers - 1));
        dims.push(self.out_dim);
        dims
    }
}

/// GELU MLP used for both projection (3 layers) and prediction (2 layers).
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub config: MlpHeadConfig,
    pub mlp: Mlp,
}

impl MlpHead {
    pub fn new(b: &mut ParamBuilder<'_>, config: MlpHeadConfig) -> Result<Self> {
        config.validate()?;
        Ok(MlpHead { config, mlp: Mlp::new(b, &config.dims())? })
    }

    /// `x: [b, in] → [b, out]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.config.in_dim {
            return Err(Error::dim(
                "head",
                format!("expected [b, {}], got {s:?}", self.config.in_dim),
            ));
        }
        self.mlp.forward(tape, p, x)
    }

    /// Gradient-free forward on plain tensors.
    pub fn apply(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Neighbours per query; the aggregator sees `k + 1` tokens.
    pub k: usize,
}

impl AggregatorConfig {
    pub fn new(embed_dim: usize, num_heads: usize, k: usize) -> Self {
        AggregatorConfig { embed_dim, depth: 2, num_heads, mlp_ratio: 4, k }
    }

    pub fn max_tokens(&self) -> usize {
        self.k + 1
    }
}

/// Transformer over `[ȳ; neighbours]` without positional embeddings or a
/// patch stage; the output is the transformed first slot.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub config: AggregatorConfig,
    pub blocks: Vec<Block>,
}

impl Aggregator {
    pub fn new(b: &mut ParamBuilder<'_>, config: AggregatorConfig) -> Result<Self> {
        if config.num_heads == 0 || config.embed_dim % config.num_heads != 0 {
            return Err(Error::Config(format!(
                "aggregator embed_dim {} must be a multiple of num_heads {}",
                config.embed_dim, config.num_heads
            )));
        }
        if config.k == 0 {
            return Err(Error::Config("aggregator needs k >= 1".into()));
        }
        let blocks = (0..config.depth)
            .map(|i| {
                Block::new(
                    &mut b.child(&format!("blocks.{i}")),
                    config.embed_dim,
                    config.num_heads,
                    config.mlp_ratio,
                    0.0,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Aggregator { config, blocks })
    }

    /// `avg: [b, d]`, `neighbors: [b, k, d]` → `[b, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, avg: Var, neighbors: Var) -> Result<Var> {
        let (d, k) = (self.config.embed_dim, self.config.k);
        let sa = tape.shape(avg).to_vec();
        let sn = tape.shape(neighbors).to_vec();
        if sa.len() != 2 || sa[1] != d {
            return Err(Error::dim("aggregator", format!("expected [b, {d}] query, got {sa:?}")));
        }
        if sn.len() != 3 || sn[0] != sa[0] || sn[2] != d {
            return Err(Error::dim(
                "aggregator",
                format!("expected [{}, k, {d}] neighbours, got {sn:?}", sa[0]),
            ));
        }
        if sn[1] != k {
            return Err(Error::Contract(format!("aggregator expects {k} neighbours, got {}", sn[1])));
        }
        let b = sa[0];
        let q = tape.reshape(avg, &[b, 1, d])?;
        let mut x = tape.concat(&[q, neighbors], 1)?;
        for block in &self.blocks {
            x = block.forward(tape, p, x, None)?;
        }
        let first = tape.narrow(x, 1, 0, 1)?;
        tape.reshape(first, &[b, d])
    }
}

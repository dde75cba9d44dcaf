//! Gradient clipping and AdamW.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Global L2 norm over every gradient tensor, accumulated in f64.
pub fn global_norm(grads: &[Tensor]) -> f32 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns `(norm before clipping, applied factor)`.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f32) -> Result<(f32, f32)> {
    if !(max_norm > 0.0) {
        return Err(Error::Contract(format!("clip norm {max_norm} must be positive")));
    }
    let norm = global_norm(grads);
    if norm <= max_norm {
        return Ok((norm, 1.0));
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
    Ok((norm, factor))
}

/// Per-parameter hyper-parameter overrides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamGroup {
    pub lr_scale: f32,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub groups: Vec<ParamGroup>,
}

impl AdamW {
    pub fn new(params: &ParamSet, groups: Vec<ParamGroup>) -> Result<Self> {
        if groups.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} parameter groups for {} parameters",
                groups.len(),
                params.len()
            )));
        }
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Ok(AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros, groups })
    }

    /// One decoupled-decay Adam step over every tensor in `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f32, weight_decay: f32) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, name, _) in params.iter() {
            if !grads[id.index()].is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let group = self.groups[i];
            let lr = lr * group.lr_scale;
            let wd = if group.decay { weight_decay } else { 0.0 };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                p[j] -= lr * wd * p[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] as f64 / bc1;
                let vh = v[j] as f64 / bc2;
                p[j] -= (lr as f64 * mh / (vh.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

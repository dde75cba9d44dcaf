//! Instance, local-group and group supervision, their weighted sum, and
//! the teacher-centering state.
//!
//! Each loss comes in two forms. The tape form works on batches and is what
//! training differentiates. The value form takes plain vectors and builds a
//! throwaway tape; it exists for inspection and testing.

use serde::{Deserialize, Serialize};

use crate::buffer::FifoBuffer;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LOG_FLOOR: f32 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub instance: f32,
    pub local_group: f32,
    pub group: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { instance: 1.0 / 3.0, local_group: 1.0 / 3.0, group: 1.0 / 3.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("instance", self.instance),
            ("local_group", self.local_group),
            ("group", self.group),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("lambda {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Fixed loss hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_instance: f32,
    pub tau_local_group: f32,
    pub tau_student_group: f32,
    pub center_momentum: f32,
    pub weights: LossWeights,
    pub k: usize,
    /// Unit-normalize head outputs and prototypes before the group dot product.
    pub normalize_prototypes: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_instance: 0.2,
            tau_local_group: 0.2,
            tau_student_group: 0.1,
            center_momentum: 0.9,
            weights: LossWeights::default(),
            k: 8,
            normalize_prototypes: false,
        }
    }
}

/// Mutable state carried across steps: centre and the three buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionState {
    pub center: Tensor,
    /// Teacher instance embeddings; negatives for the instance loss.
    pub instance_bank: FifoBuffer,
    /// Averaged patch tokens; neighbour pool for the aggregator.
    pub neighbor_bank: FifoBuffer,
    /// Teacher local-group embeddings; negatives for the local-group loss.
    pub local_group_bank: FifoBuffer,
}

impl SupervisionState {
    pub fn new(capacity: usize, embed_dim: usize, head_dim: usize) -> Result<Self> {
        Ok(SupervisionState {
            center: Tensor::zeros([head_dim]),
            instance_bank: FifoBuffer::new(capacity, head_dim)?,
            neighbor_bank: FifoBuffer::new(capacity, embed_dim)?,
            local_group_bank: FifoBuffer::new(capacity, head_dim)?,
        })
    }
}

/// Per-row InfoNCE averaged over the batch.
///
/// `z1n`, `z2n: [b, d]` are unit rows; `neg_logits: [b, n]` holds the
/// cosines of each `z2` row with the negatives. Row `i` contributes
/// `−log softmax([z1ᵢ·z2ᵢ, negᵢ] / τ)₀`.
pub fn infonce_normalized(
    tape: &mut Tape,
    z1n: Var,
    z2n: Var,
    neg_logits: Option<Var>,
    tau: f32,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let b = tape.shape(z1n)[0];
    let prod = tape.mul(z1n, z2n)?;
    let pos = tape.sum_axis(prod, 1)?;
    let pos = tape.reshape(pos, &[b, 1])?;
    let logits = match neg_logits {
        Some(neg) => tape.concat(&[pos, neg], 1)?,
        None => pos,
    };
    let logits = tape.scale(logits, 1.0 / tau);
    let lsm = tape.log_softmax(logits)?;
    let first = tape.narrow(lsm, 1, 0, 1)?;
    let mean = tape.mean_all(first);
    Ok(tape.scale(mean, -1.0))
}

/// Cosines of each row of `z2n` against the negatives `[n, d]`.
pub fn negative_logits(tape: &mut Tape, z2n: Var, negatives: Option<Var>) -> Result<Option<Var>> {
    match negatives {
        None => Ok(None),
        Some(neg) => {
            let negn = tape.l2_normalize(neg)?;
            Ok(Some(tape.matmul_t(z2n, negn)?))
        }
    }
}

/// Batched InfoNCE from raw embeddings.
pub fn infonce_tape(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    negatives: Option<Var>,
    tau: f32,
) -> Result<Var> {
    let z1n = tape.l2_normalize(z1)?;
    let z2n = tape.l2_normalize(z2)?;
    let neg = negative_logits(tape, z2n, negatives)?;
    infonce_normalized(tape, z1n, z2n, neg, tau)
}

fn check_nonzero(v: &[f32], what: &'static str) -> Result<()> {
    if v.iter().map(|x| x * x).sum::<f32>().sqrt() <= 1e-12 {
        return Err(Error::Degenerate(what));
    }
    Ok(())
}

/// InfoNCE for a single positive pair. Negatives are compared against `z2`.
pub fn infonce(z1: &[f32], z2: &[f32], negatives: Option<&Tensor>, tau: f32) -> Result<f32> {
    check_nonzero(z1, "zero anchor vector")?;
    check_nonzero(z2, "zero positive vector")?;
    if let Some(neg) = negatives {
        for row in neg.data().chunks(z1.len()) {
            check_nonzero(row, "zero negative vector")?;
        }
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new([1, z1.len()], z1.to_vec())?);
    let b = tape.constant(Tensor::new([1, z2.len()], z2.to_vec())?);
    let n = negatives.map(|t| tape.constant(t.clone()));
    let loss = infonce_tape(&mut tape, a, b, n, tau)?;
    tape.value(loss).item()
}

/// Centred, sharpened teacher assignment; rows of the result sum to one and
/// carry no gradient.
pub fn teacher_probs(
    tape: &mut Tape,
    teacher_head: Var,
    center: &Tensor,
    prototypes: Var,
    tau: f32,
    normalize: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let h = tape.detach(teacher_head);
    let negated = center.data().iter().map(|v| -v).collect();
    let neg_center = tape.constant(Tensor::new(center.shape().to_vec(), negated)?);
    let centered = tape.add_broadcast(h, neg_center)?;
    let c = tape.detach(prototypes);
    let logits = prototype_logits(tape, centered, c, normalize)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let p = tape.softmax(logits, 1)?;
    Ok(tape.detach(p))
}

/// Student assignment `softmax(h·Cᵀ/τ')`, differentiable in both `h` and
/// the prototypes. Returns `(probs, clamped log-probs)`.
pub fn student_probs(
    tape: &mut Tape,
    student_head: Var,
    prototypes: Var,
    tau: f32,
    normalize: bool,
) -> Result<(Var, Var)> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let logits = prototype_logits(tape, student_head, prototypes, normalize)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let p = tape.softmax(logits, 1)?;
    let logp = tape.log_clamp(p, LOG_FLOOR);
    Ok((p, logp))
}

fn prototype_logits(tape: &mut Tape, h: Var, c: Var, normalize: bool) -> Result<Var> {
    if normalize {
        let hn = tape.l2_normalize(h)?;
        let cn = tape.l2_normalize(c)?;
        tape.matmul_t(hn, cn)
    } else {
        tape.matmul_t(h, c)
    }
}

/// Soft-label cross-entropy `−Σ pᵗ log pˢ`, averaged over rows.
pub fn group_loss_tape(tape: &mut Tape, teacher_p: Var, student_logp: Var) -> Result<Var> {
    let prod = tape.mul(teacher_p, student_logp)?;
    let per_row = tape.sum_axis(prod, 1)?;
    let mean = tape.mean_all(per_row);
    Ok(tape.scale(mean, -1.0))
}

fn row_tensor(v: &[f32]) -> Result<Tensor> {
    Tensor::new([1, v.len()], v.to_vec())
}

/// Teacher assignment for one head output.
pub fn teacher_assignment(
    head: &[f32],
    center: &[f32],
    prototypes: &Tensor,
    tau: f32,
) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let h = tape.constant(row_tensor(head)?);
    let c = tape.constant(prototypes.clone());
    let p = teacher_probs(&mut tape, h, &Tensor::vector(center)?, c, tau, false)?;
    Ok(tape.value(p).data().to_vec())
}

/// Student assignment for one head output.
pub fn student_assignment(head: &[f32], prototypes: &Tensor, tau: f32) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let h = tape.constant(row_tensor(head)?);
    let c = tape.constant(prototypes.clone());
    let (p, _) = student_probs(&mut tape, h, c, tau, false)?;
    Ok(tape.value(p).data().to_vec())
}

/// Soft-label cross-entropy between two distributions.
pub fn group_loss(teacher_p: &[f32], student_p: &[f32]) -> Result<f32> {
    if teacher_p.len() != student_p.len() {
        return Err(Error::Contract(format!(
            "assignment lengths differ: {} vs {}",
            teacher_p.len(),
            student_p.len()
        )));
    }
    let mut tape = Tape::new();
    let pt = tape.constant(row_tensor(teacher_p)?);
    let ps = tape.constant(row_tensor(student_p)?);
    let logp = tape.log_clamp(ps, LOG_FLOOR);
    let l = group_loss_tape(&mut tape, pt, logp)?;
    tape.value(l).item()
}

/// `center ← ρ·center + (1−ρ)·mean(batch rows)`.
pub fn update_center(center: &mut Tensor, batch: &Tensor, rho: f32) -> Result<()> {
    let d = center.numel();
    if batch.numel() == 0 {
        return Err(Error::EmptyInput("center update batch"));
    }
    if batch.rank() != 2 || batch.shape()[1] != d {
        return Err(Error::shape("update_center", center.shape(), batch.shape()));
    }
    let n = batch.shape()[0] as f32;
    let mut mean = vec![0.0f32; d];
    for row in batch.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    for (c, m) in center.data_mut().iter_mut().zip(mean) {
        *c = rho * *c + (1.0 - rho) * (m / n);
    }
    Ok(())
}

/// `λ_in·L_in + λ_lg·L_lg + λ_g·L_g`.
pub fn total_loss(l_in: f32, l_lg: f32, l_g: f32, w: &LossWeights) -> f32 {
    w.instance * l_in + w.local_group * l_lg + w.group * l_g
}

/// Tape form of [`total_loss`].
pub fn total_loss_tape(tape: &mut Tape, l_in: Var, l_lg: Var, l_g: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(l_in, w.instance);
    let b = tape.scale(l_lg, w.local_group);
    let c = tape.scale(l_g, w.group);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

//! Random micro-instances shared by the audit suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::buffer::FifoBuffer;
use crate::error::Result;
use crate::losses::SupervisionState;
use crate::model::{Architecture, ModelPair};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::objective::ViewBatch;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Overwrites every tensor with uniform values in `[-scale, scale)`.
pub fn randomize(set: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f32) {
    for id in set.ids().collect::<Vec<_>>() {
        for v in set.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Micro pair with independent random student and teacher weights.
pub fn micro_pair(rng: &mut ChaCha8Rng) -> Result<ModelPair> {
    let arch = Architecture::micro();
    let mut pair = ModelPair::new(&arch, rng.random())?;
    randomize(&mut pair.student, rng, 0.4);
    randomize(&mut pair.teacher, rng, 0.4);
    Ok(pair)
}

pub fn filled_buffer(rng: &mut ChaCha8Rng, capacity: usize, dim: usize, fill: usize) -> Result<FifoBuffer> {
    let rows = uniform(rng, &[fill.max(1), dim], 1.0);
    FifoBuffer::from_rows(capacity, dim, &rows.data()[..fill * dim])
}

/// State with random centre and buffers holding the given fills.
pub fn random_state(rng: &mut ChaCha8Rng, arch: &Architecture, fills: [usize; 3]) -> Result<SupervisionState> {
    let cap = 6;
    let (d, out) = (arch.vit.embed_dim, arch.head_out_dim);
    Ok(SupervisionState {
        center: uniform(rng, &[out], 0.3),
        instance_bank: filled_buffer(rng, cap, out, fills[0])?,
        neighbor_bank: filled_buffer(rng, cap, d, fills[1])?,
        local_group_bank: filled_buffer(rng, cap, out, fills[2])?,
    })
}

pub fn random_views(rng: &mut ChaCha8Rng, arch: &Architecture, batch: usize, locals: usize) -> ViewBatch {
    let (g, l) = (arch.vit.image_size_global, arch.vit.image_size_local);
    ViewBatch {
        batch,
        globals: uniform(rng, &[2 * batch, g, g, 3], 1.5),
        locals: (locals > 0).then(|| uniform(rng, &[locals * batch, l, l, 3], 1.5)),
    }
}

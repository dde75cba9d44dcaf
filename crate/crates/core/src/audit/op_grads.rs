//! Finite-difference audit of every differentiable tape operation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, random_tensor, GradCheck, GradCheckReport};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

type OpCase = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_batched", vec![vec![2, 3, 4], vec![4, 5]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_t", vec![vec![3, 4], vec![5, 4]], Box::new(|t, v| t.matmul_t(v[0], v[1]))),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.mul(v[0], v[1]))),
        (
            "add_broadcast",
            vec![vec![2, 3, 4], vec![3, 4]],
            Box::new(|t, v| t.add_broadcast(v[0], v[1])),
        ),
        ("scale", vec![vec![5]], Box::new(|t, v| Ok(t.scale(v[0], -2.5)))),
        ("gelu", vec![vec![3, 4]], Box::new(|t, v| Ok(t.gelu(v[0])))),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("softmax_last", vec![vec![3, 5]], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax_axis0", vec![vec![4, 3]], Box::new(|t, v| t.softmax(v[0], 0))),
        ("log_softmax", vec![vec![3, 5]], Box::new(|t, v| t.log_softmax(v[0]))),
        (
            "log_clamp",
            vec![vec![2, 4]],
            Box::new(|t, v| {
                // shift inputs into (1, 3) so the clamp stays inactive
                let one = t.constant(Tensor::full([2, 4], 2.0));
                let x = t.add(v[0], one)?;
                Ok(t.log_clamp(x, 1e-12))
            }),
        ),
        ("l2_normalize", vec![vec![3, 4]], Box::new(|t, v| t.l2_normalize(v[0]))),
        ("sum_axis", vec![vec![2, 3, 4]], Box::new(|t, v| t.sum_axis(v[0], 1))),
        ("mean_axis", vec![vec![2, 3, 4]], Box::new(|t, v| t.mean_axis(v[0], 0))),
        ("sum_all", vec![vec![2, 3]], Box::new(|t, v| Ok(t.sum_all(v[0])))),
        ("mean_all", vec![vec![2, 3]], Box::new(|t, v| Ok(t.mean_all(v[0])))),
        ("narrow", vec![vec![2, 5, 3]], Box::new(|t, v| t.narrow(v[0], 1, 1, 3))),
        (
            "concat",
            vec![vec![2, 1, 3], vec![2, 4, 3]],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        ("expand_leading", vec![vec![2, 3]], Box::new(|t, v| t.expand_leading(v[0], 3))),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        (
            "scale_samples",
            vec![vec![3, 2, 2]],
            Box::new(|t, v| t.scale_samples(v[0], vec![0.0, 1.25, -0.5])),
        ),
        ("attention", vec![vec![2, 4, 12]], Box::new(|t, v| t.attention(v[0], 2))),
        ("attention_one_head", vec![vec![1, 3, 6]], Box::new(|t, v| t.attention(v[0], 1))),
    ]
}

/// Runs the central-difference check on every tape operation with random
/// inputs in `[-1, 1]`.
pub fn audit_ops(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    audit_ops_with(seed, GradCheck::default())
}

pub fn audit_ops_with(seed: u64, cfg: GradCheck) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, f) in cases() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let report = check_gradients(&inputs, cfg, seed ^ 0x5eed, f)?;
        out.push((name, report));
    }
    Ok(out)
}

use std::collections::VecDeque;

use mugs::buffer::FifoBuffer;
use mugs::losses::{self, LossWeights};
use mugs::train::optim::{clip_gradients, global_norm};
use mugs::Tensor;
use proptest::prelude::*;

fn rows(n: usize, dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, n * dim)
}

proptest! {
    #[test]
    fn buffer_replays_a_truncated_list(
        cap in 1usize..8,
        pushes in prop::collection::vec(1usize..12, 1..10),
        seed in any::<u64>(),
    ) {
        let dim = 2;
        let mut buf = FifoBuffer::new(cap, dim).unwrap();
        let mut model: VecDeque<Vec<f32>> = VecDeque::new();
        let mut counter = seed as f32 % 97.0;
        for n in pushes {
            let data: Vec<f32> = (0..n * dim).map(|_| { counter += 1.0; counter }).collect();
            buf.push_batch(&Tensor::new([n, dim], data.clone()).unwrap()).unwrap();
            for r in data.chunks(dim) {
                model.push_back(r.to_vec());
                if model.len() > cap {
                    model.pop_front();
                }
            }
            prop_assert!(buf.fill() <= cap);
            let got: Vec<Vec<f32>> = buf.rows().map(<[f32]>::to_vec).collect();
            prop_assert_eq!(got, Vec::from(model.clone()));
        }
    }

    #[test]
    fn retrieval_ignores_ring_offset(
        real in rows(6, 3),
        query in rows(1, 3),
        offset in 1usize..6,
        k in 1usize..6,
    ) {
        let (cap, dim) = (6, 3);
        let plain = FifoBuffer::from_rows(cap, dim, &real).unwrap();
        let mut rotated = FifoBuffer::new(cap, dim).unwrap();
        rotated.push_batch(&Tensor::new([offset, dim], vec![0.5; offset * dim]).unwrap()).unwrap();
        rotated.push_batch(&Tensor::new([cap, dim], real.clone()).unwrap()).unwrap();
        let a = plain.topk_neighbors(&query, k).unwrap();
        let b = rotated.topk_neighbors(&query, k).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn assignments_are_distributions(
        m in 2usize..8,
        out in 1usize..6,
        seed in any::<u64>(),
        tau in 0.03f32..0.2,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, s: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(-s..s)).collect() };
        let protos = Tensor::new([m, out], draw(m * out, 2.0)).unwrap();
        let (h, c) = (draw(out, 2.0), draw(out, 1.0));
        for p in [
            losses::teacher_assignment(&h, &c, &protos, tau).unwrap(),
            losses::student_assignment(&h, &protos, tau).unwrap(),
        ] {
            let s: f64 = p.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "sum {s}");
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    /// A shared logit offset is injected through an extra coordinate: the
    /// head gets `a`, every prototype gets 1.
    #[test]
    fn teacher_argmax_ignores_logit_shift(
        h in rows(1, 4),
        protos in rows(5, 4),
        shift in -5.0f32..5.0,
    ) {
        let c = vec![0.0; 4];
        let base = losses::teacher_assignment(&h, &c, &Tensor::new([5, 4], protos.clone()).unwrap(), 0.05).unwrap();
        let mut h2 = h.clone();
        h2.push(shift);
        let p2: Vec<f32> = protos.chunks(4).flat_map(|r| r.iter().copied().chain([1.0])).collect();
        let shifted = losses::teacher_assignment(&h2, &[c, vec![0.0]].concat(), &Tensor::new([5, 5], p2).unwrap(), 0.05).unwrap();
        let argmax = |p: &[f32]| p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b });
        prop_assert_eq!(argmax(&base), argmax(&shifted));
        for (a, b) in base.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn infonce_is_nonnegative(z1 in rows(1, 5), z2 in rows(1, 5), n in 0usize..5, negs in rows(4, 5)) {
        prop_assume!(z1.iter().any(|v| v.abs() > 1e-3) && z2.iter().any(|v| v.abs() > 1e-3));
        let negatives = (n > 0).then(|| Tensor::new([n, 5], negs[..n * 5].to_vec()).unwrap());
        let l = losses::infonce(&z1, &z2, negatives.as_ref(), 0.2).unwrap();
        prop_assert!(l >= -1e-6, "loss {l}");
        if n > 0 {
            prop_assert!(l > 0.0);
        }
    }

    #[test]
    fn infonce_vanishes_for_aligned_pair_without_negatives(z in rows(1, 5), scale in 0.1f32..10.0) {
        prop_assume!(z.iter().any(|v| v.abs() > 1e-2));
        let z2: Vec<f32> = z.iter().map(|v| v * scale).collect();
        let l = losses::infonce(&z, &z2, None, 0.2).unwrap();
        prop_assert!(l.abs() < 1e-6, "loss {l}");
    }

    #[test]
    fn total_is_weighted_sum(l in rows(1, 3), w in prop::collection::vec(0.0f32..1.0, 3)) {
        let (li, ll, lg) = (l[0].abs(), l[1].abs(), l[2].abs());
        let weights = LossWeights { instance: w[0], local_group: w[1], group: w[2] };
        let t = losses::total_loss(li, ll, lg, &weights);
        prop_assert!((t - (w[0] * li + w[1] * ll + w[2] * lg)).abs() < 1e-6);
        let only = LossWeights { instance: 0.0, local_group: 1.0, group: 0.0 };
        prop_assert_eq!(losses::total_loss(li, ll, lg, &only), ll);
    }

    #[test]
    fn clipping_never_increases_the_norm(g in rows(3, 4), max_norm in 0.01f32..10.0) {
        let mut grads = vec![Tensor::new([3, 4], g).unwrap()];
        let before = global_norm(&grads);
        let (reported, factor) = clip_gradients(&mut grads, max_norm).unwrap();
        let after = global_norm(&grads);
        prop_assert_eq!(reported, before);
        prop_assert!(factor <= 1.0);
        prop_assert!(after <= before * (1.0 + 1e-6));
        prop_assert!(after <= max_norm * (1.0 + 1e-5));
    }

    #[test]
    fn center_update_is_convex_combination(c in rows(1, 3), batch in rows(4, 3), rho in 0.0f32..1.0) {
        let mut center = Tensor::new([3], c.clone()).unwrap();
        losses::update_center(&mut center, &Tensor::new([4, 3], batch.clone()).unwrap(), rho).unwrap();
        for j in 0..3 {
            let mean = (0..4).map(|i| batch[i * 3 + j]).sum::<f32>() / 4.0;
            prop_assert!((center.data()[j] - (rho * c[j] + (1.0 - rho) * mean)).abs() < 1e-6);
        }
    }
}

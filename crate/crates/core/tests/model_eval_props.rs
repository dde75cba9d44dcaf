use mugs::audit::fixture::{micro_pair, random_state, random_views};
use mugs::data::augment::sample_crop;
use mugs::eval::{knn_classify, FeatureBank};
use mugs::losses::LossConfig;
use mugs::model::Architecture;
use mugs::train::objective::assemble_multicrop_loss;
use mugs::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random orthogonal matrix by Gram-Schmidt on Gaussian-ish columns.
fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

fn clustered_bank(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize, noise: f32) -> FeatureBank {
    let centers: Vec<Vec<f32>> = (0..classes).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let data = labels
        .iter()
        .flat_map(|&l| centers[l].iter().map(|c| c + rng.random_range(-noise..noise)).collect::<Vec<_>>())
        .collect();
    FeatureBank::new(Tensor::new([n, d], data).unwrap(), labels).unwrap()
}

fn rotate(bank: &FeatureBank, q: &[Vec<f64>]) -> FeatureBank {
    let d = bank.dim();
    let data = bank
        .features
        .data()
        .chunks(d)
        .flat_map(|r| q.iter().map(move |row| row.iter().zip(r).map(|(a, &b)| a * b as f64).sum::<f64>() as f32))
        .collect();
    FeatureBank::new(Tensor::new([bank.len(), d], data).unwrap(), bank.labels.clone()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn knn_accuracy_is_rotation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train, test) = (clustered_bank(&mut rng, 40, 6, 4, 0.3), clustered_bank(&mut rng, 20, 6, 4, 0.3));
        let q = orthogonal(&mut rng, 6);
        let a = knn_classify(&train, &test, &[1, 5, 10], 0.07).unwrap();
        let b = knn_classify(&rotate(&train, &q), &rotate(&test, &q), &[1, 5, 10], 0.07).unwrap();
        prop_assert_eq!(a.per_k, b.per_k);
    }

    #[test]
    fn knn_with_k1_is_nearest_neighbour(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train, test) = (clustered_bank(&mut rng, 30, 5, 3, 1.0), clustered_bank(&mut rng, 15, 5, 3, 1.0));
        let cos = |a: &[f32], b: &[f32]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let (mut correct, mut ambiguous) = (0usize, false);
        for (t, &truth) in test.features.data().chunks(5).zip(&test.labels) {
            let mut sims: Vec<(f64, usize)> = train.features.data().chunks(5).map(|r| cos(t, r)).zip(0..).collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0));
            ambiguous |= sims[0].0 - sims[1].0 < 1e-5;
            correct += usize::from(train.labels[sims[0].1] == truth);
        }
        prop_assume!(!ambiguous);
        let r = knn_classify(&train, &test, &[1], 1e-4).unwrap();
        prop_assert_eq!(r.per_k[0].1, correct as f32 / 15.0);
    }

    #[test]
    fn normalized_bank_rows_are_unit(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = clustered_bank(&mut rng, 10, 7, 2, 0.5).normalized().unwrap();
        for row in bank.features.data().chunks(7) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn ema_is_elementwise_interpolation(seed in any::<u64>(), m in 0.0f32..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pair = micro_pair(&mut rng).unwrap();
        let before = pair.teacher.clone();
        pair.ema_update_teacher(m).unwrap();
        for id in pair.teacher.ids() {
            let (t0, s, t1) = (before.get(id).data(), pair.student.get(id).data(), pair.teacher.get(id).data());
            for i in 0..t0.len() {
                prop_assert!((t1[i] - (m * t0[i] + (1.0 - m) * s[i])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn objective_is_symmetric_in_the_globals(seed in any::<u64>(), locals in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = micro_pair(&mut rng).unwrap();
        let views = random_views(&mut rng, &pair.arch, 2, locals);
        let state = random_state(&mut rng, &pair.arch, [4, 4, 4]).unwrap();
        let cfg = LossConfig { k: pair.arch.k, ..LossConfig::default() };
        let total = |v: &mugs::train::objective::ViewBatch| {
            let mut tape = Tape::new();
            let s = pair.student.bind(&mut tape, false);
            let t = pair.teacher.bind(&mut tape, false);
            let out = assemble_multicrop_loss(&mut tape, &pair, &s, &t, v, &state, &cfg, 0.05, None, false).unwrap();
            tape.value(out.total).item().unwrap()
        };
        let (a, b) = (total(&views), total(&views.swap_globals().unwrap()));
        prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn crops_stay_inside_their_scale_range(seed in any::<u64>(), h in 8usize..64, aspect in 0.75f32..1.33) {
        let w = ((h as f32 * aspect).round() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for scale in [(0.25f32, 1.0f32), (0.05, 0.25)] {
            let c = sample_crop(&mut rng, h, w, scale);
            let a = c.area_fraction(h, w);
            prop_assert!(a >= scale.0 * 0.999 && a <= scale.1 * 1.001, "area {a} for {scale:?}");
            prop_assert!(c.x >= 0.0 && c.y >= 0.0);
            prop_assert!(c.x + c.w <= w as f32 + 1e-3 && c.y + c.h <= h as f32 + 1e-3);
        }
    }
}

#[test]
fn patch_count_is_grid_square() {
    let arch = Architecture::default();
    for size in [arch.vit.image_size_global, arch.vit.image_size_local] {
        let side = size / arch.vit.patch_size;
        assert_eq!(arch.vit.patches_for(size), side * side);
    }
}

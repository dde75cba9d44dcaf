//! Buffer, retrieval, crop-pairing, EMA, centring and replay mechanics.

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixture::{micro_pair, random_state, random_views, uniform};
use super::reference as r;
use super::{CaseReport, SuiteReport};
use crate::buffer::FifoBuffer;
use crate::config::TrainConfig;
use crate::data::synth::{synth_hierarchical_dataset, SynthSpec};
use crate::error::Result;
use crate::losses::{update_center, LossConfig};
use crate::tensor::Tape;
use crate::train::objective::{assemble_multicrop_loss, crop_pairs};
use crate::train::Trainer;

fn fifo_replay(seed: u64) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let runs = 100;
    for _ in 0..runs {
        let cap = rng.random_range(1..10);
        let dim = rng.random_range(1..4);
        let mut buf = FifoBuffer::new(cap, dim)?;
        let mut model: VecDeque<Vec<f32>> = VecDeque::new();
        for _ in 0..rng.random_range(1..12) {
            let n = rng.random_range(1..2 * cap + 2);
            let batch = uniform(&mut rng, &[n, dim], 1.0);
            buf.push_batch(&batch)?;
            for row in batch.data().chunks(dim) {
                model.push_back(row.to_vec());
                if model.len() > cap {
                    model.pop_front();
                }
            }
            let got: Vec<Vec<f32>> = buf.rows().map(<[f32]>::to_vec).collect();
            if got != Vec::from(model.clone()) || buf.fill() != model.len() {
                mismatches += 1;
            }
        }
    }
    Ok(CaseReport::exact("fifo_replay", runs, mismatches))
}

/// Engine top-k against an f64 brute force. A differing selection is
/// accepted only when the swapped rows tie with the k-th similarity to
/// within 1e-6.
fn topk_bruteforce(seed: u64) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (queries, dim, fill, k) = (1000, 16, 300, 8);
    let stored = uniform(&mut rng, &[fill, dim], 1.0);
    let buf = FifoBuffer::from_rows(fill, dim, stored.data())?;
    let rows: Vec<Vec<f64>> = stored.data().chunks(dim).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
    let q = uniform(&mut rng, &[queries, dim], 1.0);
    let got = buf.topk_indices(&q, k)?;
    let (mut worst, mut exact) = (0.0f64, 0);
    for (qi, engine) in got.iter().enumerate() {
        let qv: Vec<f64> = q.data()[qi * dim..(qi + 1) * dim].iter().map(|&v| v as f64).collect();
        let oracle = r::topk(&rows, &qv, k);
        if &oracle == engine {
            exact += 1;
            continue;
        }
        let kth = r::cosine(&qv, &rows[oracle[k - 1]]);
        for j in engine.iter().filter(|j| !oracle.contains(j)) {
            worst = worst.max((r::cosine(&qv, &rows[*j]) - kth).abs());
        }
        // same set, different order: compare similarities pairwise
        for (a, b) in engine.iter().zip(&oracle) {
            worst = worst.max((r::cosine(&qv, &rows[*a]) - r::cosine(&qv, &rows[*b])).abs());
        }
    }
    Ok(CaseReport::new("topk_bruteforce", queries, worst, 1e-6)
        .with_note(format!("{exact} of {queries} rankings identical; the rest differ only within the tie tolerance")))
}

fn crop_enumeration(seed: u64) -> Result<CaseReport> {
    let mut mismatches = 0;
    for v in [0usize, 2, 10] {
        let mut hand = Vec::new();
        for g in 0..2 {
            for c in 0..2 + v {
                if c != g {
                    hand.push((g, c));
                }
            }
        }
        if crop_pairs(v) != hand || hand.len() != 2 * (v + 1) {
            mismatches += 1;
        }
    }
    // the assembled objective reports the same term set
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = micro_pair(&mut rng)?;
    for v in [0usize, 2, 10] {
        let views = random_views(&mut rng, &pair.arch, 1, v);
        let state = random_state(&mut rng, &pair.arch, [3, 3, 3])?;
        let cfg = LossConfig { k: pair.arch.k, ..LossConfig::default() };
        let mut tape = Tape::new();
        let s = pair.student.bind(&mut tape, false);
        let t = pair.teacher.bind(&mut tape, false);
        let out = assemble_multicrop_loss(&mut tape, &pair, &s, &t, &views, &state, &cfg, 0.04, None, false)?;
        let expected = if v == 10 { 22 } else { 2 * (v + 1) };
        if out.pairs.len() != expected || out.pairs != crop_pairs(v) {
            mismatches += 1;
        }
    }
    Ok(CaseReport::exact("crop_pair_enumeration", 6, mismatches).with_note("V = 0, 2, 10"))
}

fn ema_contraction(seed: u64) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pair = micro_pair(&mut rng)?;
    let m = 0.9f64;
    let ids: Vec<_> = pair.teacher.ids().collect();
    let gap0: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            pair.teacher.get(id).data().iter().zip(pair.student.get(id).data()).map(|(t, s)| (t - s) as f64).collect()
        })
        .collect();
    let mut worst = 0.0f64;
    let steps = 30;
    for n in 1..=steps {
        pair.ema_update_teacher(m as f32)?;
        for (gi, &id) in ids.iter().enumerate() {
            for ((t, s), g0) in pair.teacher.get(id).data().iter().zip(pair.student.get(id).data()).zip(&gap0[gi]) {
                let expected = m.powi(n) * g0.abs();
                worst = worst.max((((t - s) as f64).abs() - expected).abs());
            }
        }
    }
    Ok(CaseReport::new("ema_contraction", steps as usize, worst, 1e-6).with_note("m = 0.9, student frozen"))
}

fn center_closed_form(seed: u64) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let rho = 0.9f64;
    let runs = 100;
    for _ in 0..runs {
        let d = rng.random_range(1..6);
        let mut c = uniform(&mut rng, &[d], 1.0);
        let c0: Vec<f64> = c.data().iter().map(|&v| v as f64).collect();
        let mut means = Vec::new();
        for _ in 0..3 {
            let b = rng.random_range(1..5);
            let batch = uniform(&mut rng, &[b, d], 1.0);
            means.push(
                (0..d)
                    .map(|j| (0..b).map(|i| batch.data()[i * d + j] as f64).sum::<f64>() / b as f64)
                    .collect::<Vec<f64>>(),
            );
            update_center(&mut c, &batch, rho as f32)?;
        }
        for j in 0..d {
            let closed = rho.powi(3) * c0[j] + (1.0 - rho) * (rho * rho * means[0][j] + rho * means[1][j] + means[2][j]);
            worst = worst.max((c.data()[j] as f64 - closed).abs());
        }
    }
    Ok(CaseReport::new("center_closed_form", runs, worst, 1e-6))
}

/// Ten training steps twice from the same seed.
fn seed_replay(seed: u64) -> Result<CaseReport> {
    let cfg = TrainConfig { seed, epochs: 5, ..TrainConfig::micro() };
    let ds = synth_hierarchical_dataset(SynthSpec::new(seed, 1));
    let run = || -> Result<(Vec<String>, String)> {
        let mut t = Trainer::new(&cfg, ds.normalization(), ds.len())?;
        let mut rows = Vec::new();
        for _ in 0..10 {
            let v = t.next_views(&ds)?;
            rows.push(format!("{:?}", t.train_step(&v)?));
        }
        Ok((rows, format!("{}{}", t.pair.student.digest(), t.pair.teacher.digest())))
    };
    let (a, da) = run()?;
    let (b, db) = run()?;
    let mismatches = a.iter().zip(&b).filter(|(x, y)| x != y).count() + usize::from(da != db);
    Ok(CaseReport::exact("seed_replay_10_steps", 10, mismatches))
}

/// Mechanics checks: exact comparisons or the stated tolerances.
pub fn run_structure_oracles(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let cases = vec![
        fifo_replay(seed ^ 11)?,
        topk_bruteforce(seed ^ 12)?,
        crop_enumeration(seed ^ 13)?,
        ema_contraction(seed ^ 14)?,
        center_closed_form(seed ^ 15)?,
        seed_replay(seed)?,
    ];
    Ok(SuiteReport::finish("structure", seed, start, cases))
}

//! Loss values of the engine against the f64 reference.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixture::{filled_buffer, micro_pair, random_state, random_views, uniform};
use super::reference::{self as r, Mat};
use super::{CaseReport, SuiteReport};
use crate::error::Result;
use crate::losses::{self, LossConfig, LossWeights};
use crate::model::ModelPair;
use crate::tensor::{ops, Tape, Tensor};
use crate::train::objective::assemble_multicrop_loss;

pub const INSTANCES: usize = 100;
pub const TOLERANCE: f64 = 1e-5;

fn f64s(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

fn bank_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(f64s).collect()
}

fn ref_head(p: &crate::params::ParamSet, prefix: &str, layers: usize, x: &[f32]) -> Result<Vec<f64>> {
    Ok(r::mlp(p, prefix, layers, &Mat::from_f32(1, x.len(), x))?.v)
}

/// Engine pipeline for one contrastive pair: teacher projection of `y1`
/// against the student's predicted projection of `y2`.
fn engine_pair(pair: &ModelPair, instance: bool, y1: &Tensor, y2: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = &pair.nets;
    let (head, pred) = if instance {
        (&n.instance_head, &n.instance_predictor)
    } else {
        (&n.local_group_head, &n.local_group_predictor)
    };
    let z1 = head.apply(&pair.teacher, y1)?;
    let z2 = pred.apply(&pair.student, &head.apply(&pair.student, y2)?)?;
    Ok((z1, z2))
}

fn contrastive_case(seed: u64, instance: bool) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (head, pred, name) = if instance {
        ("head_instance", "predictor_instance", "instance_loss")
    } else {
        ("head_local_group", "predictor_local_group", "local_group_loss")
    };
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let pair = micro_pair(&mut rng)?;
        let d = pair.arch.vit.embed_dim;
        let out = pair.arch.head_out_dim;
        let y1 = uniform(&mut rng, &[1, d], 1.0);
        let y2 = uniform(&mut rng, &[1, d], 1.0);
        let n_neg = rng.random_range(0..6);
        let negs = (n_neg > 0).then(|| uniform(&mut rng, &[n_neg, out], 1.0));
        let tau = 0.2;

        let (z1, z2) = engine_pair(&pair, instance, &y1, &y2)?;
        let engine = losses::infonce(z1.data(), z2.data(), negs.as_ref(), tau)?;

        let rz1 = ref_head(&pair.teacher, head, 3, y1.data())?;
        let rz2 = r::mlp(&pair.student, pred, 2, &Mat::new(1, out, ref_head(&pair.student, head, 3, y2.data())?))?.v;
        let neg_rows = negs.as_ref().map(bank_rows).unwrap_or_default();
        let oracle = r::infonce(&rz1, &rz2, &neg_rows, tau as f64);
        worst = worst.max((engine as f64 - oracle).abs());
    }
    Ok(CaseReport::new(name, INSTANCES, worst, TOLERANCE))
}

fn local_group_feature_case(seed: u64) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let pair = micro_pair(&mut rng)?;
        let (d, k) = (pair.arch.vit.embed_dim, pair.arch.k);
        let patches = uniform(&mut rng, &[4, d], 1.0);
        let fill = rng.random_range(k..=6);
        let bank = filled_buffer(&mut rng, 6, d, fill)?;

        let query = ops::mean_rows(&patches)?;
        let nb = bank.topk_neighbors(query.data(), k)?;
        let mut tape = Tape::new();
        let p = pair.student.bind(&mut tape, false);
        let q = tape.constant(query.clone().reshape([1, d])?);
        let nbv = tape.constant(nb.reshape([1, k, d])?);
        let y = pair.nets.aggregator.forward(&mut tape, &p, q, nbv)?;
        let engine = tape.value(y).data().to_vec();

        let rq = r::mean_rows(&Mat::from_f32(4, d, patches.data()));
        let rows: Vec<Vec<f64>> = bank.rows().map(f64s).collect();
        let picked: Vec<Vec<f64>> = r::topk(&rows, &rq, k).into_iter().map(|j| rows[j].clone()).collect();
        let oracle = r::aggregate(&pair.student, 2, pair.arch.aggregator_heads, &rq, &picked)?;
        worst = worst.max(max_diff(&engine, &oracle));
    }
    Ok(CaseReport::new("local_group_feature", INSTANCES, worst, TOLERANCE))
}

/// Returns the assignment case and the cross-entropy case.
fn group_cases(seed: u64) -> Result<(CaseReport, CaseReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_p, mut worst_ce) = (0.0f64, 0.0f64);
    for _ in 0..INSTANCES {
        let m = rng.random_range(2..8);
        let out = rng.random_range(2..6);
        let protos = uniform(&mut rng, &[m, out], 1.0);
        let ht = uniform(&mut rng, &[out], 1.0);
        let hs = uniform(&mut rng, &[out], 1.0);
        let center = uniform(&mut rng, &[out], 0.5);
        let tau_g = rng.random_range(0.04f32..0.07);
        let tau_s = 0.1f32;

        let pt = losses::teacher_assignment(ht.data(), center.data(), &protos, tau_g)?;
        let ps = losses::student_assignment(hs.data(), &protos, tau_s)?;
        let ce = losses::group_loss(&pt, &ps)?;

        let rows = bank_rows(&protos);
        let rpt = r::assignment(&f64s(ht.data()), Some(&f64s(center.data())), &rows, tau_g as f64);
        let rps = r::assignment(&f64s(hs.data()), None, &rows, tau_s as f64);
        worst_p = worst_p.max(max_diff(&pt, &rpt)).max(max_diff(&ps, &rps));
        worst_ce = worst_ce.max((ce as f64 - r::cross_entropy(&rpt, &rps)).abs());
    }
    Ok((
        CaseReport::new("assignments", INSTANCES, worst_p, TOLERANCE),
        CaseReport::new("group_loss", INSTANCES, worst_ce, TOLERANCE),
    ))
}

fn objective_case(seed: u64) -> Result<(CaseReport, CaseReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for i in 0..INSTANCES {
        let pair = micro_pair(&mut rng)?;
        let locals = i % 3;
        let views = random_views(&mut rng, &pair.arch, 2, locals);
        let fills = [rng.random_range(0..=6), rng.random_range(0..=6), rng.random_range(0..=6)];
        let state = random_state(&mut rng, &pair.arch, fills)?;
        let w = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let cfg = LossConfig {
            k: pair.arch.k,
            weights: LossWeights { instance: w[0], local_group: w[1], group: w[2] },
            ..LossConfig::default()
        };
        let tau_g = rng.random_range(0.04f32..0.07);

        let mut tape = Tape::new();
        let s = pair.student.bind(&mut tape, false);
        let t = pair.teacher.bind(&mut tape, false);
        let out = assemble_multicrop_loss(&mut tape, &pair, &s, &t, &views, &state, &cfg, tau_g, None, false)?;
        let e = [out.instance, out.local_group, out.group, out.total].map(|v| tape.value(v).item().unwrap());

        let o = r::objective(&pair, &views, &state, &cfg, tau_g as f64)?;
        let diffs = [e[0] as f64 - o.instance, e[1] as f64 - o.local_group, e[2] as f64 - o.group, e[3] as f64 - o.total];
        worst = diffs.iter().fold(worst, |m, d| m.max(d.abs()));
        let sum = losses::total_loss(e[0], e[1], e[2], &cfg.weights);
        worst_sum = worst_sum.max((sum - e[3]).abs() as f64);
    }
    Ok((
        CaseReport::new("multicrop_objective", INSTANCES, worst, TOLERANCE)
            .with_note("V in {0, 1, 2}, batch 2, random buffer fills and weights"),
        CaseReport::new("total_is_weighted_sum", INSTANCES, worst_sum, 1e-6),
    ))
}

/// Every supervision checked on [`INSTANCES`] random micro-instances
/// against the straight-line reference.
pub fn run_equation_oracles(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let (assign, ce) = group_cases(seed ^ 4)?;
    let (full, sum) = objective_case(seed ^ 6)?;
    let cases = vec![
        contrastive_case(seed ^ 1, true)?,
        local_group_feature_case(seed ^ 2)?,
        contrastive_case(seed ^ 3, false)?,
        assign,
        ce,
        sum,
        full,
    ];
    Ok(SuiteReport::finish("equations", seed, start, cases))
}

//! Finite-difference audit of the tape operations and of the full objective.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fixture::{micro_pair, random_state, random_views};
use super::gradcheck::GradCheck;
use super::op_grads::audit_ops_with;
use super::{CaseReport, SuiteReport};
use crate::error::Result;
use crate::losses::{LossConfig, SupervisionState};
use crate::model::ModelPair;
use crate::params::ParamSet;
use crate::tensor::{Tape, Tensor};
use crate::train::objective::{assemble_multicrop_loss, assemble_with_target_prototypes, ViewBatch};

pub const OP_TOLERANCE: f64 = 1e-2;
/// Relative error is measured on entries above `atol`; below it the f32
/// rounding of the forward pass dominates the difference quotient.
pub const OP_CHECK: GradCheck = GradCheck { step: 1e-2, atol: 1e-2, rtol: 1e-2, extrapolate: true };
pub const END_TO_END_TOLERANCE: f64 = 5e-2;
pub const SAMPLED_PARAMS: usize = 20;
/// Entries whose analytic gradient is below this fraction of the largest
/// one are not sampled: their central differences drown in f32 rounding.
pub const MIN_RELATIVE_MAGNITUDE: f32 = 0.05;
const FD_STEP: f32 = 5e-3;

struct Fixture {
    pair: ModelPair,
    views: ViewBatch,
    state: SupervisionState,
    cfg: LossConfig,
}

/// Total loss at `student`, with the detached teacher targets scored against
/// the unperturbed prototypes.
fn loss_value(f: &Fixture, student: &ParamSet) -> Result<f64> {
    let mut tape = Tape::new();
    let s = student.bind(&mut tape, false);
    let t = f.pair.teacher.bind(&mut tape, false);
    let target = tape.constant(f.pair.student.get(f.pair.nets.prototypes).clone());
    let out = assemble_with_target_prototypes(
        &mut tape, &f.pair, &s, &t, &f.views, &f.state, &f.cfg, 0.05, None, false, target,
    )?;
    Ok(tape.value(out.total).item()? as f64)
}

/// Cases: end-to-end sampled gradients, and the exact-zero checks for the
/// teacher parameters and buffer inputs.
fn end_to_end(seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = micro_pair(&mut rng)?;
    let views = random_views(&mut rng, &pair.arch, 2, 2);
    let state = random_state(&mut rng, &pair.arch, [5, 5, 5])?;
    let cfg = LossConfig { k: pair.arch.k, ..LossConfig::default() };
    let f = Fixture { pair, views, state, cfg };

    let mut tape = Tape::new();
    let s = f.pair.student.bind(&mut tape, true);
    let t = f.pair.teacher.bind(&mut tape, true);
    let out = assemble_multicrop_loss(&mut tape, &f.pair, &s, &t, &f.views, &f.state, &f.cfg, 0.05, None, true)?;
    assert!(out.local_group_active, "fixture keeps every supervision active");
    let grads = tape.backward(out.total)?;

    let zero_count = |vars: &[crate::tensor::Var]| -> (usize, f64) {
        let mut n = 0;
        let mut worst = 0.0f64;
        for &v in vars {
            let g = grads.get(v).expect("tracked leaves receive gradients");
            n += g.numel();
            worst = g.data().iter().fold(worst, |m, x| m.max(x.abs() as f64));
        }
        (n, worst)
    };
    let (tn, tw) = zero_count(t.vars());
    let (bn, bw) = zero_count(&out.buffer_leaves);

    // flat (tensor, entry, analytic) list of student entries
    let analytic: Vec<Tensor> = s.vars().iter().map(|&v| grads.get(v).unwrap().clone()).collect();
    let flat: Vec<(usize, usize, f32)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.data().iter().enumerate().map(move |(j, &x)| (i, j, x)))
        .collect();
    let biggest = flat.iter().fold(0.0f32, |m, e| m.max(e.2.abs()));
    let candidates: Vec<&(usize, usize, f32)> =
        flat.iter().filter(|e| e.2.abs() >= MIN_RELATIVE_MAGNITUDE * biggest).collect();
    let picks = sample(&mut rng, candidates.len(), SAMPLED_PARAMS.min(candidates.len()));
    let ids: Vec<_> = f.pair.student.ids().collect();
    let mut worst = 0.0f64;
    let mut probe = f.pair.student.clone();
    for p in picks.iter() {
        let &(ti, j, a) = candidates[p];
        let id = ids[ti];
        let orig = probe.get(id).data()[j];
        probe.get_mut(id).data_mut()[j] = orig + FD_STEP;
        let up = loss_value(&f, &probe)?;
        probe.get_mut(id).data_mut()[j] = orig - FD_STEP;
        let down = loss_value(&f, &probe)?;
        probe.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP as f64);
        let a = a as f64;
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
    }
    Ok(vec![
        CaseReport::new("end_to_end_total_loss", picks.len(), worst, END_TO_END_TOLERANCE).with_note(format!(
            "{} student entries sampled from {} with |grad| >= {MIN_RELATIVE_MAGNITUDE} x max",
            picks.len(),
            candidates.len()
        )),
        CaseReport::new("teacher_gradient_zero", tn, tw, 0.0),
        CaseReport::new("buffer_gradient_zero", bn, bw, 0.0),
    ])
}

/// Per-op central differences plus the end-to-end objective on the micro
/// architecture (d = 8, depth 1, m = 4, k = 2).
pub fn run_gradient_audit(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases: Vec<CaseReport> = audit_ops_with(seed, OP_CHECK)?
        .into_iter()
        .map(|(name, r)| CaseReport::new(format!("op_{name}"), r.checked, r.max_rel_err as f64, OP_TOLERANCE))
        .collect();
    cases.extend(end_to_end(seed)?);
    Ok(SuiteReport::finish("gradients", seed, start, cases))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn end_to_end_holds_across_seeds() {
        for seed in 0..12 {
            for c in end_to_end(seed).unwrap() {
                assert!(c.passed, "seed {seed}: {} {:.3e}", c.name, c.max_err);
            }
        }
    }
}

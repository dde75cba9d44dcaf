//! Multi-crop loss assembly.
//!
//! The teacher sees the two global views; the student sees every view. Each
//! teacher global supervises each student crop other than itself, and the
//! per-supervision losses are averaged over those pairs.

use rand_chacha::ChaCha8Rng;

use crate::buffer::FifoBuffer;
use crate::error::{Error, Result};
use crate::losses::{
    group_loss_tape, infonce_normalized, student_probs, teacher_probs, total_loss_tape, LossConfig,
    SupervisionState,
};
use crate::model::ModelPair;
use crate::params::Bound;
use crate::tensor::{Tape, Tensor, Var};

/// Crops stacked view-major: rows `v·b .. (v+1)·b` hold view `v`.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub batch: usize,
    /// `[2b, Sg, Sg, 3]`.
    pub globals: Tensor,
    /// `[V·b, Sl, Sl, 3]`, absent when `V = 0`.
    pub locals: Option<Tensor>,
}

impl ViewBatch {
    pub fn num_locals(&self) -> usize {
        self.locals.as_ref().map_or(0, |l| l.shape()[0] / self.batch)
    }

    /// Exchanges the two global views.
    pub fn swap_globals(&self) -> Result<ViewBatch> {
        let b = self.batch;
        let idx: Vec<usize> = (b..2 * b).chain(0..b).collect();
        Ok(ViewBatch {
            batch: b,
            globals: self.globals.gather_rows(&idx)?,
            locals: self.locals.clone(),
        })
    }
}

/// `(teacher global, student crop)` pairs; crops `0, 1` are the globals.
pub fn crop_pairs(num_locals: usize) -> Vec<(usize, usize)> {
    (0..2)
        .flat_map(|g| (0..2 + num_locals).filter(move |&c| c != g).map(move |c| (g, c)))
        .collect()
}

/// Loss graph handles plus the detached values the step needs afterwards.
#[derive(Debug)]
pub struct MulticropLoss {
    pub total: Var,
    pub instance: Var,
    pub local_group: Var,
    pub group: Var,
    pub pairs: Vec<(usize, usize)>,
    /// False while the neighbour bank holds fewer than `k` rows.
    pub local_group_active: bool,
    /// Teacher instance embeddings of both globals, `[2b, out]`.
    pub teacher_instance: Tensor,
    /// Averaged patch tokens of both globals from both networks, `[2b, d]` each.
    pub teacher_avg: Tensor,
    pub student_global_avg: Tensor,
    /// Teacher local-group embeddings of both globals, when active.
    pub teacher_local_group: Option<Tensor>,
    /// Teacher group-head outputs before centring, `[2b, out]`.
    pub teacher_group_head: Tensor,
    /// Buffer inputs placed on the tape (requires-grad only when tracked).
    pub buffer_leaves: Vec<Var>,
}

/// Places buffer-derived data on the tape behind a stop-gradient.
fn buffer_input(tape: &mut Tape, t: Tensor, track: bool, leaves: &mut Vec<Var>) -> Var {
    let leaf = tape.leaf(t.with_requires_grad(track));
    leaves.push(leaf);
    tape.detach(leaf)
}

fn neighbors(
    tape: &mut Tape,
    bank: &FifoBuffer,
    queries: &Tensor,
    k: usize,
    track: bool,
    leaves: &mut Vec<Var>,
) -> Result<Var> {
    let nb = bank.topk_batch(queries, k)?;
    Ok(buffer_input(tape, nb, track, leaves))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f32))
}

/// Builds the full objective on `tape`.
///
/// `student` and `teacher` are the bound parameter sets; `rng` enables
/// student drop-path. With `track_buffers`, buffer inputs enter as
/// requires-grad leaves (listed in [`MulticropLoss::buffer_leaves`]) so a
/// caller can confirm they receive no gradient.
#[allow(clippy::too_many_arguments)]
pub fn assemble_multicrop_loss(
    tape: &mut Tape,
    pair: &ModelPair,
    student: &Bound,
    teacher: &Bound,
    views: &ViewBatch,
    state: &SupervisionState,
    cfg: &LossConfig,
    tau_g: f32,
    rng: Option<&mut ChaCha8Rng>,
    track_buffers: bool,
) -> Result<MulticropLoss> {
    let protos = student[pair.nets.prototypes];
    assemble_with_target_prototypes(tape, pair, student, teacher, views, state, cfg, tau_g, rng, track_buffers, protos)
}

/// As [`assemble_multicrop_loss`], with the teacher assignment scored against
/// `target_protos` instead of the student's prototypes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn assemble_with_target_prototypes(
    tape: &mut Tape,
    pair: &ModelPair,
    student: &Bound,
    teacher: &Bound,
    views: &ViewBatch,
    state: &SupervisionState,
    cfg: &LossConfig,
    tau_g: f32,
    mut rng: Option<&mut ChaCha8Rng>,
    track_buffers: bool,
    target_protos: Var,
) -> Result<MulticropLoss> {
    let b = views.batch;
    if views.globals.shape()[0] != 2 * b {
        return Err(Error::Contract(format!(
            "expected exactly 2 global views, got {} rows for batch {b}",
            views.globals.shape()[0]
        )));
    }
    let nets = &pair.nets;
    let k = cfg.k;
    let mut leaves = Vec::new();

    // teacher: globals only, no drop-path
    let t_out = nets.backbone.forward(tape, teacher, &views.globals, None)?;
    let t_cls = tape.detach(t_out.class_token);
    let t_z_in = nets.instance_head.forward(tape, teacher, t_cls)?;
    let t_z_in = tape.detach(t_z_in);
    let t_avg = tape.mean_axis(t_out.patch_tokens, 1)?;
    let t_avg = tape.detach(t_avg);
    let t_h_g = nets.group_head.forward(tape, teacher, t_cls)?;
    let t_h_g = tape.detach(t_h_g);

    // student: every crop, globals first
    let s_g = nets.backbone.forward(tape, student, &views.globals, rng.as_deref_mut())?;
    let mut s_cls = s_g.class_token;
    let s_global_avg = tape.mean_axis(s_g.patch_tokens, 1)?;
    let mut s_avg = s_global_avg;
    if let Some(locals) = &views.locals {
        let s_l = nets.backbone.forward(tape, student, locals, rng.as_deref_mut())?;
        s_cls = tape.concat(&[s_cls, s_l.class_token], 0)?;
        let l_avg = tape.mean_axis(s_l.patch_tokens, 1)?;
        s_avg = tape.concat(&[s_avg, l_avg], 0)?;
    }
    let s_h_in = nets.instance_head.forward(tape, student, s_cls)?;
    let s_z_in = nets.instance_predictor.forward(tape, student, s_h_in)?;
    let s_h_g = nets.group_head.forward(tape, student, s_cls)?;

    let pairs = crop_pairs(views.num_locals());
    let protos = student[nets.prototypes];

    // instance discrimination
    let t_z_in_n = tape.l2_normalize(t_z_in)?;
    let s_z_in_n = tape.l2_normalize(s_z_in)?;
    let in_neg = match state.instance_bank.snapshot() {
        Some(neg) => {
            let neg = buffer_input(tape, neg, track_buffers, &mut leaves);
            let negn = tape.l2_normalize(neg)?;
            Some(tape.matmul_t(s_z_in_n, negn)?)
        }
        None => None,
    };
    let mut in_terms = Vec::with_capacity(pairs.len());
    for &(g, c) in &pairs {
        let z1 = tape.narrow(t_z_in_n, 0, g * b, b)?;
        let z2 = tape.narrow(s_z_in_n, 0, c * b, b)?;
        let neg = match in_neg {
            Some(n) => Some(tape.narrow(n, 0, c * b, b)?),
            None => None,
        };
        in_terms.push(infonce_normalized(tape, z1, z2, neg, cfg.tau_instance)?);
    }
    let instance = mean_of(tape, &in_terms)?;

    // local-group discrimination
    let local_group_active = state.neighbor_bank.fill() >= k;
    let (local_group, teacher_local_group) = if local_group_active {
        let t_avg_v = tape.value(t_avg).clone();
        let t_nb = neighbors(tape, &state.neighbor_bank, &t_avg_v, k, track_buffers, &mut leaves)?;
        let t_hat = nets.aggregator.forward(tape, teacher, t_avg, t_nb)?;
        let t_z_lg = nets.local_group_head.forward(tape, teacher, t_hat)?;
        let t_z_lg = tape.detach(t_z_lg);

        let s_avg_v = tape.value(s_avg).clone();
        let s_nb = neighbors(tape, &state.neighbor_bank, &s_avg_v, k, track_buffers, &mut leaves)?;
        let s_hat = nets.aggregator.forward(tape, student, s_avg, s_nb)?;
        let s_h_lg = nets.local_group_head.forward(tape, student, s_hat)?;
        let s_z_lg = nets.local_group_predictor.forward(tape, student, s_h_lg)?;

        let t_n = tape.l2_normalize(t_z_lg)?;
        let s_n = tape.l2_normalize(s_z_lg)?;
        let lg_neg = match state.local_group_bank.snapshot() {
            Some(neg) => {
                let neg = buffer_input(tape, neg, track_buffers, &mut leaves);
                let negn = tape.l2_normalize(neg)?;
                Some(tape.matmul_t(s_n, negn)?)
            }
            None => None,
        };
        let mut terms = Vec::with_capacity(pairs.len());
        for &(g, c) in &pairs {
            let z1 = tape.narrow(t_n, 0, g * b, b)?;
            let z2 = tape.narrow(s_n, 0, c * b, b)?;
            let neg = match lg_neg {
                Some(n) => Some(tape.narrow(n, 0, c * b, b)?),
                None => None,
            };
            terms.push(infonce_normalized(tape, z1, z2, neg, cfg.tau_local_group)?);
        }
        (mean_of(tape, &terms)?, Some(tape.value(t_z_lg).clone()))
    } else {
        (tape.constant(Tensor::scalar(0.0)), None)
    };

    // group discrimination
    let p_t = teacher_probs(tape, t_h_g, &state.center, target_protos, tau_g, cfg.normalize_prototypes)?;
    let (_, logp_s) =
        student_probs(tape, s_h_g, protos, cfg.tau_student_group, cfg.normalize_prototypes)?;
    let mut g_terms = Vec::with_capacity(pairs.len());
    for &(g, c) in &pairs {
        let pt = tape.narrow(p_t, 0, g * b, b)?;
        let ls = tape.narrow(logp_s, 0, c * b, b)?;
        g_terms.push(group_loss_tape(tape, pt, ls)?);
    }
    let group = mean_of(tape, &g_terms)?;

    let total = total_loss_tape(tape, instance, local_group, group, &cfg.weights)?;
    Ok(MulticropLoss {
        total,
        instance,
        local_group,
        group,
        pairs,
        local_group_active,
        teacher_instance: tape.value(t_z_in).clone(),
        teacher_avg: tape.value(t_avg).clone(),
        student_global_avg: tape.value(s_global_avg).clone(),
        teacher_local_group,
        teacher_group_head: tape.value(t_h_g).clone(),
        buffer_leaves: leaves,
    })
}

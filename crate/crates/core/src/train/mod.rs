//! Pretraining loop.
//!
//! One step, in order: forward both networks, backward, clip, AdamW on the
//! student, EMA into the teacher, centre update, buffer pushes. All
//! randomness is derived from the run seed and the step or epoch index, so
//! a run restored from a checkpoint continues exactly as if uninterrupted.

pub mod objective;
pub mod optim;
pub mod schedule;

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{CropBatch, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::losses::{update_center, SupervisionState};
use crate::metrics::{MetricsWriter, StepMetrics};
use crate::model::ModelPair;
use crate::rng;
use crate::tensor::{Tape, Tensor};

use objective::{assemble_multicrop_loss, ViewBatch};
use optim::{clip_gradients, AdamW, ParamGroup};
use schedule::{cosine_value, temperature_tau_g, LrSchedule};

/// Full mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub pair: ModelPair,
    pub state: SupervisionState,
    pub optim: AdamW,
    pub norm: Normalization,
    /// Steps completed so far.
    pub step: u64,
    pub steps_per_epoch: u64,
}

pub(crate) fn param_groups(pair: &ModelPair, cfg: &TrainConfig) -> Vec<ParamGroup> {
    pair.student
        .iter()
        .map(|(_, name, t)| ParamGroup {
            lr_scale: if name.starts_with("backbone.patch_embed.") { cfg.patch_embed_lr_scale } else { 1.0 },
            decay: t.rank() > 1,
        })
        .collect()
}

impl Trainer {
    /// Fresh state for a dataset of `dataset_len` images.
    pub fn new(cfg: &TrainConfig, norm: Normalization, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        if dataset_len < cfg.batch_size {
            return Err(Error::Config(format!(
                "dataset holds {dataset_len} images, fewer than batch_size {}",
                cfg.batch_size
            )));
        }
        let arch = cfg.architecture();
        let init_seed = rand::Rng::random::<u64>(&mut rng::stream(cfg.seed, &[rng::TAG_INIT]));
        let pair = ModelPair::new(&arch, init_seed)?;
        let state = SupervisionState::new(cfg.buffer_capacity, cfg.embed_dim, cfg.head_out_dim)?;
        let optim = AdamW::new(&pair.student, param_groups(&pair, cfg))?;
        Ok(Trainer {
            cfg: cfg.clone(),
            pair,
            state,
            optim,
            norm,
            step: 0,
            steps_per_epoch: (dataset_len / cfg.batch_size) as u64,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.epochs * self.steps_per_epoch
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.cfg.base_lr,
            final_lr: self.cfg.final_lr,
            warmup_start: self.cfg.warmup_start_lr,
            warmup_steps: self.cfg.warmup_epochs * self.steps_per_epoch,
            total_steps: self.total_steps(),
        }
    }

    /// `(lr, τ_g, teacher momentum)` for `step`.
    pub fn schedules(&self, step: u64) -> Result<(f32, f32, f32)> {
        let epoch = step / self.steps_per_epoch;
        let lr = self.lr_schedule().at(step)?;
        let tau = temperature_tau_g(epoch, self.cfg.tau_g_start, self.cfg.tau_g_end, self.cfg.tau_g_warmup_epochs);
        let ema = cosine_value(step, self.total_steps(), self.cfg.ema_start, self.cfg.ema_end)?;
        Ok((lr, tau, ema))
    }

    /// Image order for `epoch`; batches are consecutive chunks, the
    /// remainder is dropped.
    pub fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(self.cfg.seed, &[rng::TAG_SHUFFLE, epoch]));
        idx
    }

    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let within = (step % self.steps_per_epoch) as usize;
        let b = self.cfg.batch_size;
        self.epoch_order(epoch, n)[within * b..(within + 1) * b].to_vec()
    }

    /// Builds the crops for the next step.
    pub fn next_views(&self, ds: &Dataset) -> Result<ViewBatch> {
        let idx = self.batch_indices(self.step, ds.len());
        let crops = CropBatch::build(ds, &idx, self.cfg.seed, self.epoch(), &self.cfg.multicrop(), &self.norm)?;
        crops.to_views()
    }

    /// One optimization step on `views`.
    pub fn train_step(&mut self, views: &ViewBatch) -> Result<StepMetrics> {
        let step = self.step;
        let epoch = self.epoch();
        let (lr, tau_g, ema) = self.schedules(step)?;
        let loss_cfg = self.cfg.loss();

        let mut tape = Tape::new();
        let student = self.pair.student.bind(&mut tape, true);
        let teacher = self.pair.teacher.bind(&mut tape, false);
        let mut dp = rng::stream(self.cfg.seed, &[rng::TAG_DROP_PATH, step]);
        let out = assemble_multicrop_loss(
            &mut tape,
            &self.pair,
            &student,
            &teacher,
            views,
            &self.state,
            &loss_cfg,
            tau_g,
            Some(&mut dp),
            false,
        )?;
        let l_in = tape.value(out.instance).item()?;
        let l_lg = tape.value(out.local_group).item()?;
        let l_g = tape.value(out.group).item()?;
        if !(l_in.is_finite() && l_lg.is_finite() && l_g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "step {step} (epoch {epoch}): losses instance={l_in} local_group={l_lg} group={l_g}"
            )));
        }

        let mut grads = tape.backward(out.total)?;
        let mut g: Vec<Tensor> = student
            .vars()
            .iter()
            .map(|&v| grads.take(v).expect("student leaves require gradients"))
            .collect();
        drop(tape);
        let (grad_norm, _) = clip_gradients(&mut g, self.cfg.clip_norm)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("step {step}: gradient norm {grad_norm}")));
        }
        self.optim.step(&mut self.pair.student, &g, lr, self.cfg.weight_decay)?;
        self.pair.ema_update_teacher(ema)?;
        update_center(&mut self.state.center, &out.teacher_group_head, loss_cfg.center_momentum)?;

        self.state.instance_bank.push_batch(&out.teacher_instance)?;
        self.state.neighbor_bank.push_batch(&out.teacher_avg)?;
        self.state.neighbor_bank.push_batch(&out.student_global_avg)?;
        if let Some(z) = &out.teacher_local_group {
            self.state.local_group_bank.push_batch(z)?;
        }
        self.step += 1;

        let w = loss_cfg.weights;
        Ok(StepMetrics {
            step,
            epoch,
            loss_total: w.instance as f64 * l_in as f64
                + w.local_group as f64 * l_lg as f64
                + w.group as f64 * l_g as f64,
            loss_instance: l_in,
            loss_local_group: l_lg,
            loss_group: l_g,
            lr,
            tau_g,
            ema_momentum: ema,
            grad_norm,
        })
    }
}

/// Artifacts of a finished [`pretrain_run`].
#[derive(Debug)]
pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub trainer: Trainer,
}

pub fn checkpoint_path(out_dir: &Path, epoch: Option<u64>) -> PathBuf {
    match epoch {
        Some(e) => out_dir.join(format!("checkpoint_epoch{e:04}.mgck")),
        None => out_dir.join("checkpoint.mgck"),
    }
}

/// Runs (or resumes) pretraining as configured. `on_epoch` is called after
/// every finished epoch with its metrics rows.
pub fn pretrain_run(
    cfg: &TrainConfig,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(u64, &[StepMetrics]),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let ds = Dataset::load(Path::new(&cfg.data))?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = checkpoint::load_checkpoint(path)?;
            checkpoint::check_architecture(&t, cfg)?;
            checkpoint::check_resumable(&t.cfg, cfg)?;
            t.cfg = cfg.clone();
            t
        }
        None => Trainer::new(cfg, ds.normalization(), ds.len())?,
    };
    if trainer.steps_per_epoch != (ds.len() / cfg.batch_size) as u64 {
        return Err(Error::Config("dataset size differs from the checkpointed run".into()));
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path, trainer.step)?;

    let mut all = Vec::new();
    while trainer.epoch() < cfg.epochs {
        let epoch = trainer.epoch();
        let mut rows = Vec::with_capacity(trainer.steps_per_epoch as usize);
        for _ in 0..trainer.steps_per_epoch {
            let views = trainer.next_views(&ds)?;
            let m = trainer.train_step(&views)?;
            writer.write(&m)?;
            rows.push(m);
        }
        writer.flush()?;
        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs {
            checkpoint::save_checkpoint(&trainer, &checkpoint_path(&out_dir, Some(done)))?;
        }
        on_epoch(epoch, &rows);
        all.extend(rows);
    }
    let ckpt = checkpoint_path(&out_dir, None);
    checkpoint::save_checkpoint(&trainer, &ckpt)?;
    Ok(RunOutcome { checkpoint: ckpt, metrics_path, metrics: all, trainer })
}

use rand::seq::SliceRandom;

use super::loss::reconstruction_loss;
use super::model::{student_forward, teacher_forward, StudentModel, TeacherModel};
use super::schedule::{lr_at, TrainSchedule};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mve::sample_window_plan;
use crate::rng::{derive_seed, substream};
use crate::tensor::{lit, AdamW, ParamStore, Scalar, Session, Tensor};
use crate::vit::sample_mask;

const STUDENT_ENCODER: [&str; 2] = ["student.patch_embed.", "student.encoder."];

/// Copies every student patch-embedding and encoder tensor onto its teacher
/// counterpart. Decoder, projections and mask token stay with the student.
/// Returns the number of tensors copied.
pub fn breakpoint_copy<F: Scalar>(store: &mut ParamStore<F>) -> Result<usize> {
    let mut pairs = Vec::new();
    let mut problems = Vec::new();
    for (id, p) in store.iter() {
        let Some(rest) = p.name.strip_prefix("teacher.") else {
            continue;
        };
        let src = format!("student.{rest}");
        match store.id(&src) {
            Some(sid) if store.get(sid).tensor.shape() == p.tensor.shape() => pairs.push((sid, id)),
            Some(sid) => problems.push(format!(
                "{}: student {:?} vs teacher {:?}",
                rest,
                store.get(sid).tensor.shape(),
                p.tensor.shape()
            )),
            None => problems.push(format!("{src}: missing")),
        }
    }
    let student_count = store
        .iter()
        .filter(|(_, p)| STUDENT_ENCODER.iter().any(|pre| p.name.starts_with(pre)))
        .count();
    if student_count != pairs.len() + problems.len() {
        problems.push(format!(
            "student encoder has {student_count} tensors, teacher {}",
            pairs.len() + problems.len()
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join("; ")));
    }
    for &(src, dst) in &pairs {
        let t = store.get(src).tensor.clone();
        store.get_mut(dst).tensor = t;
    }
    Ok(pairs.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainSummary {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Hooks into the training loop; every method defaults to doing nothing.
pub trait PretrainObserver {
    fn on_step(&mut self, _trainer: &Pretrainer, _report: &StepReport) -> Result<()> {
        Ok(())
    }
    /// Called right after the teacher received the student's encoder.
    fn on_breakpoint(&mut self, _trainer: &Pretrainer, _epoch: usize) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _trainer: &Pretrainer, _epoch: usize, _mean_loss: f64) -> Result<()> {
        Ok(())
    }
}

impl PretrainObserver for () {}

/// Student, frozen teacher and optimizer sharing one parameter store.
pub struct Pretrainer {
    pub cfg: RunConfig,
    pub store: ParamStore<f32>,
    pub student: StudentModel<f32>,
    pub teacher: TeacherModel<f32>,
    pub optim: AdamW<f32>,
    pub schedule: TrainSchedule,
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: usize,
    pub breakpoints_applied: usize,
}

impl Pretrainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let student = StudentModel::new(&mut store, cfg, &mut substream(cfg.seed, "init", &[0]))?;
        let teacher = TeacherModel::new(
            &mut store,
            cfg,
            &mut substream(cfg.seed, "teacher-init", &[]),
        )?;
        let optim = AdamW::new(cfg.adamw(), &store);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            student,
            teacher,
            optim,
            schedule: TrainSchedule::pretrain(cfg),
            epoch: 0,
            global_step: 0,
            breakpoints_applied: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "pretrain".into(),
            config_echo: self.cfg.echo(),
            seed: self.cfg.seed,
            epoch: self.epoch as u64,
            global_step: self.global_step as u64,
            breakpoints_applied: self.breakpoints_applied as u64,
            params: self.store.clone(),
            optimizer: self.optim.states.clone(),
        }
    }

    /// Rebuilds a trainer from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::parse(&ckpt.config_echo)?;
        let mut t = Self::new(&cfg)?;
        ckpt.restore_into(&mut t.store)?;
        if ckpt.optimizer.len() != t.optim.states.len() {
            return Err(Error::Checkpoint(
                "optimizer state count differs from model".into(),
            ));
        }
        t.optim.states = ckpt.optimizer.clone();
        t.epoch = ckpt.epoch as usize;
        t.global_step = ckpt.global_step as usize;
        t.breakpoints_applied = ckpt.breakpoints_applied as usize;
        Ok(t)
    }

    /// Mask and window seeds for image slot `slot` of `step` in `epoch`.
    pub fn plan_seeds(&self, epoch: usize, step: usize, slot: usize) -> (u64, u64) {
        let ids = [epoch as u64, step as u64, slot as u64];
        (
            derive_seed(self.cfg.seed, "mask", &ids),
            derive_seed(self.cfg.seed, "window", &ids),
        )
    }

    /// One optimizer step over `batch` (patch tokens per image).
    pub fn train_step(
        &mut self,
        batch: &[&Tensor<f32>],
        epoch: usize,
        step: usize,
        lr: f64,
    ) -> Result<f64> {
        let beta = lit::<f32>(self.cfg.loss_beta());
        let scale = 1.0 / batch.len() as f32;
        let mut total = 0.0;
        for (slot, tokens) in batch.iter().enumerate() {
            let (mask_seed, window_seed) = self.plan_seeds(epoch, step, slot);
            let mask = sample_mask(self.cfg.tokens(), self.cfg.mask_ratio, mask_seed)?;
            let windows = sample_window_plan(self.cfg.grid(), &self.cfg.window_plan, window_seed)?;
            let targets = teacher_forward(&self.store, &self.teacher, tokens, &windows)?;

            let s = Session::new(&self.store);
            let out = student_forward(&s, &self.student, tokens, &mask, &windows)?;
            if cfg!(debug_assertions) && out.coords != targets.coords {
                return Err(Error::Invalid(format!(
                    "teacher and student windows disagree (window seed {window_seed:#x})"
                )));
            }
            let loss = reconstruction_loss(&out.predictions, &targets.targets, &out.masked, beta)?;
            let value = loss.value().data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    batch_seed: derive_seed(self.cfg.seed, "data", &[epoch as u64, step as u64]),
                });
            }
            total += f64::from(value);
            loss.backward()?;
            let grads = s.param_grads();
            drop(s);
            for (id, g) in grads {
                self.store.accumulate_grad(id, &g, scale);
            }
        }
        self.optim.step(&mut self.store, lr);
        self.global_step += 1;
        Ok(total / batch.len() as f64)
    }

    /// Runs the remaining epochs over `data` (one `[T, p²]` token tensor per
    /// image). Breakpoint copies happen at the start of their epoch.
    pub fn run(
        &mut self,
        data: &[Tensor<f32>],
        obs: &mut dyn PretrainObserver,
    ) -> Result<PretrainSummary> {
        self.run_until(data, self.schedule.total_epochs, obs)
    }

    /// Like [`Pretrainer::run`] but stops before epoch `end`, which lets a
    /// run be checkpointed and resumed part way through.
    pub fn run_until(
        &mut self,
        data: &[Tensor<f32>],
        end: usize,
        obs: &mut dyn PretrainObserver,
    ) -> Result<PretrainSummary> {
        if data.is_empty() {
            return Err(Error::Data("no pretraining images".into()));
        }
        let per_epoch = self.schedule.steps_per_epoch(data.len());
        let mut summary = PretrainSummary::default();
        while self.epoch < end.min(self.schedule.total_epochs) {
            let epoch = self.epoch;
            let due = self
                .schedule
                .breakpoints
                .iter()
                .filter(|&&b| b <= epoch)
                .count();
            if due > self.breakpoints_applied {
                let n = breakpoint_copy(&mut self.store)?;
                self.breakpoints_applied = due;
                log::info!("epoch {epoch}: copied {n} encoder tensors into the teacher");
                obs.on_breakpoint(self, epoch)?;
            }

            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut substream(self.cfg.seed, "data", &[epoch as u64]));
            let mut sum = 0.0;
            for (step, chunk) in order.chunks(self.schedule.batch_size).enumerate() {
                let lr = lr_at(&self.schedule, self.global_step, per_epoch);
                let batch: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data[i]).collect();
                let loss = self.train_step(&batch, epoch, step, lr)?;
                sum += loss;
                let report = StepReport {
                    epoch,
                    step,
                    global_step: self.global_step - 1,
                    loss,
                    lr,
                };
                obs.on_step(self, &report)?;
            }
            let mean = sum / per_epoch as f64;
            summary.epoch_losses.push(mean);
            self.epoch += 1;
            obs.on_epoch(self, epoch, mean)?;
        }
        summary.steps = self.global_step;
        Ok(summary)
    }
}

/// Builds a fresh trainer from `cfg` and trains it to completion.
pub fn pretrain_loop(
    cfg: &RunConfig,
    data: &[Tensor<f32>],
    obs: &mut dyn PretrainObserver,
) -> Result<(Pretrainer, PretrainSummary)> {
    let mut t = Pretrainer::new(cfg)?;
    let summary = t.run(data, obs)?;
    Ok((t, summary))
}

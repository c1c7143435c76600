use rand::seq::SliceRandom;

use super::metrics::{IouAccumulator, MiouReport};
use super::model::{load_encoder, segment, SegModel};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pretrain::{lr_at, TrainSchedule};
use crate::rng::{derive_seed, substream};
use crate::synth::SegSample;
use crate::tensor::{AdamW, AdamWConfig, ParamStore, Session, Tensor};
use crate::vit::patchify;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub lr: f64,
}

struct Prepared {
    tokens: Tensor<f32>,
    labels: Vec<usize>,
}

fn prepare(samples: &[SegSample], patch: usize) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                tokens: patchify(&s.image, patch)?.tokens,
                labels: s.labels.iter().map(|&l| l as usize).collect(),
            })
        })
        .collect()
}

/// Full finetuning of encoder and head with per-pixel cross-entropy.
pub struct Finetuner {
    pub cfg: RunConfig,
    pub store: ParamStore<f32>,
    pub model: SegModel<f32>,
    pub optim: AdamW<f32>,
    pub schedule: TrainSchedule,
    pub epoch: usize,
    pub global_step: usize,
}

impl Finetuner {
    /// Builds the model from `cfg.seed`; with `pretrained`, the encoder is
    /// then overwritten by the student encoder stored there. Both paths draw
    /// the same initial head.
    pub fn new(cfg: &RunConfig, pretrained: Option<&ParamStore<f32>>) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(cfg.seed, "init", &[1]);
        let model = SegModel::new(&mut store, cfg, &mut rng)?;
        if let Some(src) = pretrained {
            let n = load_encoder(&mut store, src)?;
            log::info!("loaded {n} pretrained encoder tensors");
        }
        let optim = AdamW::new(
            AdamWConfig {
                lr: cfg.finetune_lr,
                ..cfg.adamw()
            },
            &store,
        );
        Ok(Self {
            cfg: cfg.clone(),
            store,
            model,
            optim,
            schedule: TrainSchedule::finetune(cfg),
            epoch: 0,
            global_step: 0,
        })
    }

    fn step(&mut self, batch: &[&Prepared], lr: f64) -> Result<f64> {
        let scale = 1.0 / batch.len() as f32;
        let mut total = 0.0;
        for item in batch {
            let s = Session::new(&self.store);
            let loss = self
                .model
                .forward(&s, &item.tokens)?
                .cross_entropy(&item.labels)?;
            let value = loss.value().data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch: self.epoch,
                    step: self.global_step,
                    batch_seed: derive_seed(self.cfg.seed, "data", &[self.epoch as u64, 1]),
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

    /// Trains for the remaining epochs, reporting validation mIoU after each.
    pub fn run(
        &mut self,
        train: &[SegSample],
        val: &[SegSample],
        mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
    ) -> Result<Vec<EpochReport>> {
        if train.is_empty() {
            return Err(Error::Data("no finetuning samples".into()));
        }
        let data = prepare(train, self.cfg.patch_size)?;
        let per_epoch = self.schedule.steps_per_epoch(data.len());
        let mut reports = Vec::new();
        while self.epoch < self.schedule.total_epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut substream(
                self.cfg.seed,
                "data",
                &[self.epoch as u64, 1],
            ));
            let mut sum = 0.0;
            let mut lr = 0.0;
            for chunk in order.chunks(self.schedule.batch_size) {
                lr = lr_at(&self.schedule, self.global_step, per_epoch);
                let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
                sum += self.step(&batch, lr)?;
            }
            let val_miou = if val.is_empty() {
                0.0
            } else {
                self.evaluate(val)?.mean
            };
            let report = EpochReport {
                epoch: self.epoch,
                train_loss: sum / per_epoch as f64,
                val_miou,
                lr,
            };
            self.epoch += 1;
            on_epoch(&report)?;
            reports.push(report);
        }
        Ok(reports)
    }

    pub fn predict(&self, sample: &SegSample) -> Result<Vec<u8>> {
        let logits = segment(&self.store, &self.model, &sample.image)?;
        Ok(argmax_classes(&logits))
    }

    pub fn evaluate(&self, samples: &[SegSample]) -> Result<MiouReport> {
        let mut acc = IouAccumulator::new(self.cfg.num_classes);
        for s in samples {
            acc.add(&self.predict(s)?, &s.labels)?;
        }
        Ok(acc.report())
    }
}

/// Per-pixel argmax of `[classes, H, W]` logits (first maximum wins).
pub fn argmax_classes(logits: &Tensor<f32>) -> Vec<u8> {
    let classes = logits.shape()[0];
    let pixels = logits.numel() / classes;
    let d = logits.data();
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if d[c * pixels + p] > d[best * pixels + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

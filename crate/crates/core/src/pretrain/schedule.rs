use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub breakpoints: Vec<usize>,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl TrainSchedule {
    pub fn pretrain(cfg: &RunConfig) -> Self {
        Self {
            total_epochs: cfg.epochs,
            breakpoints: cfg.breakpoints.clone(),
            warmup_epochs: cfg.warmup_epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
        }
    }

    pub fn finetune(cfg: &RunConfig) -> Self {
        Self {
            total_epochs: cfg.finetune_epochs,
            breakpoints: Vec::new(),
            warmup_epochs: cfg.finetune_warmup_epochs,
            lr: cfg.finetune_lr,
            batch_size: cfg.finetune_batch_size,
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size).max(1)
    }
}

/// Linear warmup to `lr`, then cosine decay to zero at the last step.
pub fn lr_at(schedule: &TrainSchedule, global_step: usize, steps_per_epoch: usize) -> f64 {
    let warmup = schedule.warmup_epochs * steps_per_epoch;
    let total = schedule.total_epochs * steps_per_epoch;
    if global_step < warmup {
        return schedule.lr * (global_step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (global_step - warmup) as f64 / span;
    schedule.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

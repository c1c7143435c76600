//! Flat `key = value` run configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. A `preset` key
//! (`toy` or `full`) selects the starting point, every other key overrides a
//! single field, and environment variables named `LOCALMIM_<KEY>` override the
//! file. [`RunConfig::echo`] renders every field, so an echoed file reproduces
//! the run exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mve::{format_counts, parse_counts, WindowCounts};
use crate::tensor::AdamWConfig;
use crate::vit::StackConfig;

pub const ENV_PREFIX: &str = "LOCALMIM_";

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, String);

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl ConfigValue for WindowCounts {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_counts(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        format_counts(self)
    }
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $name:ident : $t:ty ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $name: $t, )*
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$t as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::config(key, e))?;
                    } )*
                    _ => return Err(Error::config(key, "unknown key")),
                }
                Ok(())
            }

            /// Every field as `key = value`, one per line, in declaration order.
            pub fn echo(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{} = {}", stringify!($name), ConfigValue::render(&self.$name)); )*
                out
            }
        }
    };
}

run_config! {
    /// Starting point the remaining keys override: `toy` or `full`.
    preset: String,
    /// Master seed; every random stream derives from it.
    seed: u64,
    image_size: usize,
    channels: usize,
    patch_size: usize,
    enc_depth: usize,
    enc_dim: usize,
    enc_heads: usize,
    mlp_ratio: usize,
    dec_depth: usize,
    dec_dim: usize,
    dec_heads: usize,
    mask_ratio: f64,
    window_plan: WindowCounts,
    /// `smooth_l1` or `l1`.
    loss: String,
    smooth_l1_beta: f64,
    epochs: usize,
    /// Epoch boundaries at which the student encoder is copied into the teacher.
    breakpoints: Vec<usize>,
    warmup_epochs: usize,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    adam_eps: f64,
    batch_size: usize,
    pretrain_images: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    data_seed: u64,
    /// Labeled training images used for finetuning (a prefix of the train split).
    finetune_images: usize,
    finetune_epochs: usize,
    finetune_warmup_epochs: usize,
    finetune_lr: f64,
    finetune_batch_size: usize,
    /// 1-based encoder blocks feeding the pyramid head; empty means depth·{¼,½,¾,1}.
    taps: Vec<usize>,
    tap_scales: Vec<usize>,
    fpn_dim: usize,
    num_classes: usize,
    bench_grids: Vec<usize>,
    /// Windows for the attention benchmark; must fit the smallest bench grid.
    bench_window_plan: WindowCounts,
    bench_trials: usize,
    threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// Desk-scale defaults: 64×64 grayscale, 8×8 patch grid.
    pub fn toy() -> Self {
        Self {
            preset: "toy".into(),
            seed: 0,
            image_size: 64,
            channels: 1,
            patch_size: 8,
            enc_depth: 4,
            enc_dim: 64,
            enc_heads: 4,
            mlp_ratio: 4,
            dec_depth: 2,
            dec_dim: 64,
            dec_heads: 4,
            mask_ratio: 0.6,
            window_plan: WindowCounts::from([(3, 4), (4, 2), (5, 1)]),
            loss: "smooth_l1".into(),
            smooth_l1_beta: 1.0,
            epochs: 30,
            breakpoints: vec![8],
            warmup_epochs: 4,
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 32,
            pretrain_images: 2000,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            data_seed: 1,
            finetune_images: 200,
            finetune_epochs: 10,
            finetune_warmup_epochs: 1,
            finetune_lr: 1e-3,
            finetune_batch_size: 8,
            taps: Vec::new(),
            tap_scales: vec![4, 8, 16, 32],
            fpn_dim: 32,
            num_classes: 4,
            bench_grids: vec![14, 28],
            bench_window_plan: crate::mve::default_counts(),
            bench_trials: 20,
            threads: 1,
        }
    }

    /// Full-size geometry: 224×224 input, 16×16 patches, 24-block encoder.
    pub fn full() -> Self {
        Self {
            preset: "full".into(),
            image_size: 224,
            patch_size: 16,
            enc_depth: 24,
            enc_dim: 1024,
            enc_heads: 16,
            dec_depth: 4,
            dec_dim: 512,
            dec_heads: 16,
            window_plan: crate::mve::default_counts(),
            epochs: 300,
            breakpoints: vec![80],
            warmup_epochs: 40,
            finetune_epochs: 40,
            finetune_warmup_epochs: 5,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::config("preset", format!("unknown preset {other:?}"))),
        }
    }

    /// Parses `key = value` text (no environment overrides).
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = match pairs.get("preset") {
            Some(p) => Self::preset(p)?,
            None => Self::toy(),
        };
        for (k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text)
    }

    /// Applies `LOCALMIM_<KEY>` overrides from `vars`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            if key == "preset" {
                continue;
            }
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn set_value(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value)
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size.max(1);
        (g, g)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn encoder(&self) -> StackConfig {
        StackConfig {
            depth: self.enc_depth,
            dim: self.enc_dim,
            heads: self.enc_heads,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch_size,
        }
    }

    pub fn decoder(&self) -> StackConfig {
        StackConfig {
            depth: self.dec_depth,
            dim: self.dec_dim,
            heads: self.dec_heads,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch_size,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Effective tap blocks: explicit `taps`, or depth·{¼,½,¾,1} rounded up.
    pub fn effective_taps(&self) -> Vec<usize> {
        if !self.taps.is_empty() {
            return self.taps.clone();
        }
        default_taps(self.enc_depth, self.tap_scales.len())
    }

    /// SmoothL1 β actually used; plain L1 is the β = 0 limit.
    pub fn loss_beta(&self) -> f64 {
        if self.loss == "l1" {
            0.0
        } else {
            self.smooth_l1_beta
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(
                "mask_ratio",
                format!("{} not in [0, 1)", self.mask_ratio),
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!(
                    "image_size {} not divisible by {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if self.channels != 1 {
            return Err(Error::config(
                "channels",
                "synthetic data is single-channel",
            ));
        }
        self.encoder().validate("enc")?;
        self.decoder().validate("dec")?;
        if !self.enc_dim.is_multiple_of(4) {
            return Err(Error::config(
                "enc_dim",
                "positional table needs a multiple of 4",
            ));
        }
        let (gh, gw) = self.grid();
        if let Some((&size, _)) = self.window_plan.iter().find(|(&s, _)| s > gh.min(gw)) {
            return Err(Error::config(
                "window_plan",
                format!("window size {size} exceeds grid {gh}x{gw}"),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        for &b in &self.breakpoints {
            if b == 0 || b >= self.epochs {
                return Err(Error::config(
                    "breakpoints",
                    format!("breakpoint {b} not in (0, {})", self.epochs),
                ));
            }
        }
        if self.loss != "smooth_l1" && self.loss != "l1" {
            return Err(Error::config(
                "loss",
                format!("{:?} is not smooth_l1 or l1", self.loss),
            ));
        }
        if self.loss == "smooth_l1" && self.smooth_l1_beta <= 0.0 {
            return Err(Error::config("smooth_l1_beta", "must be positive"));
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("finetune_batch_size", self.finetune_batch_size),
            ("fpn_dim", self.fpn_dim),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        let taps = self.effective_taps();
        if taps.len() != self.tap_scales.len() || taps.is_empty() {
            return Err(Error::config(
                "taps",
                format!(
                    "{} taps for {} tap_scales",
                    taps.len(),
                    self.tap_scales.len()
                ),
            ));
        }
        if let Some(&bad) = taps.iter().find(|&&t| t == 0 || t > self.enc_depth) {
            return Err(Error::config(
                "taps",
                format!("tap {bad} exceeds encoder depth {}", self.enc_depth),
            ));
        }
        let smallest = self.bench_grids.iter().copied().min().unwrap_or(0);
        if let Some((&size, _)) = self.bench_window_plan.iter().find(|(&s, _)| s > smallest) {
            return Err(Error::config(
                "bench_window_plan",
                format!("window size {size} exceeds bench grid {smallest}"),
            ));
        }
        crate::seg::pyramid_sizes(self.grid(), self.patch_size, &self.tap_scales)?;
        if self.finetune_images > self.n_train {
            return Err(Error::config("finetune_images", "exceeds n_train"));
        }
        if self.pretrain_images > self.n_train {
            return Err(Error::config("pretrain_images", "exceeds n_train"));
        }
        Ok(())
    }
}

pub fn default_taps(depth: usize, count: usize) -> Vec<usize> {
    (1..=count).map(|i| (depth * i).div_ceil(count)).collect()
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected key = value"))?;
        let key = k.trim().to_string();
        if !RunConfig::KEYS.contains(&key.as_str()) {
            return Err(Error::config(key, "unknown key"));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(key, "assigned twice"));
        }
    }
    Ok(out)
}

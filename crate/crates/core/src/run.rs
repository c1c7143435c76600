//! Run directories and the end-to-end commands built on the library.
//!
//! A run directory holds `config.cfg` (the full echo), `metrics.jsonl`,
//! `timing.jsonl` and `checkpoints/`. Metrics rows carry no wall-clock data,
//! so two runs with the same config produce byte-identical streams; elapsed
//! seconds for the same rows go to `timing.jsonl`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pretrain::{PretrainObserver, PretrainSummary, Pretrainer, StepReport};
use crate::seg::{write_eval_csv, write_label_png, EpochReport, Finetuner, MiouReport};
use crate::synth::{
    self, load_split, make_split, read_manifest, read_sample, write_manifest, write_sample,
    ManifestEntry, SceneSpec, SegSample, Split, CLASS_NAMES,
};
use crate::tensor::Tensor;
use crate::vit::patchify;

pub const CONFIG_FILE: &str = "config.cfg";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";

#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `path`, refusing to touch a non-empty directory unless `force`.
    pub fn create(path: &Path, force: bool) -> Result<Self> {
        let occupied = fs::read_dir(path)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if occupied {
            if !force {
                return Err(Error::config(
                    "out",
                    format!(
                        "{} already exists; pass --force to overwrite",
                        path.display()
                    ),
                ));
            }
            fs::remove_dir_all(path).map_err(Error::io(path))?;
        }
        fs::create_dir_all(path.join("checkpoints")).map_err(Error::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let p = self.file(CONFIG_FILE);
        fs::write(&p, cfg.echo()).map_err(Error::io(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub phase: &'static str,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

impl MetricsRow {
    fn new(phase: &'static str, epoch: usize) -> Self {
        Self {
            phase,
            epoch,
            step: None,
            loss: None,
            lr: None,
            val_miou: None,
        }
    }
}

#[derive(Serialize)]
struct TimingRow {
    phase: &'static str,
    epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    step: Option<usize>,
    seconds: f64,
}

pub struct MetricsWriter {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    start: Instant,
    dir: PathBuf,
}

impl MetricsWriter {
    pub fn create(run: &RunDir) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = run.file(name);
            Ok(BufWriter::new(File::create(&p).map_err(Error::io(p))?))
        };
        Ok(Self {
            metrics: open(METRICS_FILE)?,
            timing: open(TIMING_FILE)?,
            start: Instant::now(),
            dir: run.path.clone(),
        })
    }

    pub fn row(&mut self, row: &MetricsRow) -> Result<()> {
        let timing = TimingRow {
            phase: row.phase,
            epoch: row.epoch,
            step: row.step,
            seconds: self.start.elapsed().as_secs_f64(),
        };
        let io = Error::io(&self.dir);
        let mut line = serde_json::to_vec(row)?;
        line.push(b'\n');
        let mut tline = serde_json::to_vec(&timing)?;
        tline.push(b'\n');
        self.metrics
            .write_all(&line)
            .and_then(|_| self.timing.write_all(&tline))
            .map_err(io)
    }

    pub fn flush(&mut self) -> Result<()> {
        let io = Error::io(&self.dir);
        self.metrics
            .flush()
            .and_then(|_| self.timing.flush())
            .map_err(io)
    }
}

pub fn scene_template(cfg: &RunConfig) -> SceneSpec {
    SceneSpec::with_size(cfg.image_size)
}

pub fn manifest_for(cfg: &RunConfig) -> Result<Vec<ManifestEntry>> {
    make_split(
        &scene_template(cfg),
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        cfg.data_seed,
    )
}

fn sample_path(dir: &Path, entry: &ManifestEntry) -> PathBuf {
    dir.join(entry.split.name())
        .join(format!("{:05}.bin", entry.index))
}

/// Writes every split as sample files plus `manifest.jsonl` into `dir`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<usize> {
    let manifest = manifest_for(cfg)?;
    let template = scene_template(cfg);
    for split in [Split::Train, Split::Val, Split::Test] {
        let d = dir.join(split.name());
        fs::create_dir_all(&d).map_err(Error::io(&d))?;
    }
    for e in &manifest {
        write_sample(&sample_path(dir, e), &synth::regenerate(e, &template)?)?;
    }
    let spec_path = dir.join("scene.json");
    fs::write(&spec_path, serde_json::to_vec_pretty(&template)?).map_err(Error::io(&spec_path))?;
    write_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest.len())
}

/// The first `limit` samples of `split`, read from a generated data
/// directory or regenerated in memory from the config.
pub fn load_samples(
    cfg: &RunConfig,
    data: Option<&Path>,
    split: Split,
    limit: usize,
) -> Result<Vec<SegSample>> {
    match data {
        None => load_split(&manifest_for(cfg)?, split, &scene_template(cfg), limit),
        Some(dir) => {
            let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
            let samples: Vec<SegSample> = manifest
                .iter()
                .filter(|e| e.split == split)
                .take(limit)
                .map(|e| read_sample(&sample_path(dir, e)))
                .collect::<Result<_>>()?;
            if let Some(s) = samples
                .iter()
                .find(|s| s.height() != cfg.image_size || s.width() != cfg.image_size)
            {
                return Err(Error::Data(format!(
                    "sample is {}x{}, config expects {}",
                    s.height(),
                    s.width(),
                    cfg.image_size
                )));
            }
            Ok(samples)
        }
    }
}

pub fn to_tokens(cfg: &RunConfig, samples: &[SegSample]) -> Result<Vec<Tensor<f32>>> {
    samples
        .iter()
        .map(|s| Ok(patchify(&s.image, cfg.patch_size)?.tokens))
        .collect()
}

struct PretrainRecorder<'a> {
    run: &'a RunDir,
    metrics: MetricsWriter,
}

impl PretrainObserver for PretrainRecorder<'_> {
    fn on_step(&mut self, _t: &Pretrainer, r: &StepReport) -> Result<()> {
        self.metrics.row(&MetricsRow {
            step: Some(r.global_step),
            loss: Some(r.loss),
            lr: Some(r.lr),
            ..MetricsRow::new("step", r.epoch)
        })
    }

    fn on_breakpoint(&mut self, t: &Pretrainer, epoch: usize) -> Result<()> {
        self.metrics.row(&MetricsRow::new("breakpoint", epoch))?;
        t.to_checkpoint().save(
            &self
                .run
                .file(&format!("checkpoints/breakpoint-{epoch:03}.ckpt")),
        )
    }

    fn on_epoch(&mut self, _t: &Pretrainer, epoch: usize, mean: f64) -> Result<()> {
        self.metrics.row(&MetricsRow {
            loss: Some(mean),
            ..MetricsRow::new("epoch", epoch)
        })?;
        self.metrics.flush()
    }
}

pub fn run_pretrain(cfg: &RunConfig, data: Option<&Path>, run: &RunDir) -> Result<PretrainSummary> {
    cfg.validate()?;
    run.write_config(cfg)?;
    let samples = load_samples(cfg, data, Split::Train, cfg.pretrain_images)?;
    let tokens = to_tokens(cfg, &samples)?;
    let mut trainer = Pretrainer::new(cfg)?;
    let mut rec = PretrainRecorder {
        run,
        metrics: MetricsWriter::create(run)?,
    };
    let summary = trainer.run(&tokens, &mut rec)?;
    rec.metrics.flush()?;
    trainer.to_checkpoint().save(&run.file(FINAL_CHECKPOINT))?;
    Ok(summary)
}

fn finetune_checkpoint(ft: &Finetuner) -> Checkpoint {
    Checkpoint {
        kind: "finetune".into(),
        config_echo: ft.cfg.echo(),
        seed: ft.cfg.seed,
        epoch: ft.epoch as u64,
        global_step: ft.global_step as u64,
        breakpoints_applied: 0,
        params: ft.store.clone(),
        optimizer: ft.optim.states.clone(),
    }
}

/// Finetunes from a pretraining checkpoint (or from scratch), then evaluates
/// on the test split and writes `eval.csv`.
pub fn run_finetune(
    cfg: &RunConfig,
    pretrained: Option<&Path>,
    data: Option<&Path>,
    run: &RunDir,
) -> Result<(Vec<EpochReport>, MiouReport)> {
    cfg.validate()?;
    run.write_config(cfg)?;
    let source = pretrained.map(Checkpoint::load).transpose()?;
    if let Some(c) = &source {
        if c.kind != "pretrain" {
            return Err(Error::Checkpoint(format!(
                "expected a pretrain checkpoint, got {:?}",
                c.kind
            )));
        }
    }
    let mut ft = Finetuner::new(cfg, source.as_ref().map(|c| &c.params))?;
    let train = load_samples(cfg, data, Split::Train, cfg.finetune_images)?;
    let val = load_samples(cfg, data, Split::Val, cfg.n_val)?;
    let test = load_samples(cfg, data, Split::Test, cfg.n_test)?;
    let mut metrics = MetricsWriter::create(run)?;
    let epochs = ft.run(&train, &val, |r| {
        metrics.row(&MetricsRow {
            loss: Some(r.train_loss),
            lr: Some(r.lr),
            val_miou: Some(r.val_miou),
            ..MetricsRow::new("finetune", r.epoch)
        })
    })?;
    let report = ft.evaluate(&test)?;
    metrics.row(&MetricsRow {
        val_miou: Some(report.mean),
        ..MetricsRow::new("test", ft.epoch)
    })?;
    metrics.flush()?;
    finetune_checkpoint(&ft).save(&run.file(FINAL_CHECKPOINT))?;
    write_eval_csv(&run.file("eval.csv"), &report, &CLASS_NAMES)?;
    Ok((epochs, report))
}

/// Evaluates a finetuned checkpoint on `split`; writes `eval.csv` and the
/// first `pngs` predicted label maps under `predictions/`.
pub fn run_eval(
    checkpoint: &Path,
    split: Split,
    data: Option<&Path>,
    out: &RunDir,
    pngs: usize,
) -> Result<MiouReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.kind != "finetune" {
        return Err(Error::Checkpoint(format!(
            "expected a finetune checkpoint, got {:?}",
            ckpt.kind
        )));
    }
    let cfg = RunConfig::parse(&ckpt.config_echo)?;
    let mut ft = Finetuner::new(&cfg, None)?;
    ckpt.restore_into(&mut ft.store)?;
    let limit = match split {
        Split::Train => cfg.n_train,
        Split::Val => cfg.n_val,
        Split::Test => cfg.n_test,
    };
    let samples = load_samples(&cfg, data, split, limit)?;
    let report = ft.evaluate(&samples)?;
    write_eval_csv(&out.file("eval.csv"), &report, &CLASS_NAMES)?;
    if pngs > 0 {
        let dir = out.file("predictions");
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for (i, s) in samples.iter().take(pngs).enumerate() {
            let pred = ft.predict(s)?;
            write_label_png(
                &dir.join(format!("{i:05}-pred.png")),
                &pred,
                s.height(),
                s.width(),
            )?;
            write_label_png(
                &dir.join(format!("{i:05}-gt.png")),
                &s.labels,
                s.height(),
                s.width(),
            )?;
        }
    }
    Ok(report)
}

/// Config key swept by a named ablation axis.
pub fn sweep_key(axis: &str) -> Result<&'static str> {
    let key = match axis {
        "mask_ratio" => "mask_ratio",
        "decoder_depth" => "dec_depth",
        "window_plan" => "window_plan",
        "dataset_size" => "pretrain_images",
        other => RunConfig::KEYS
            .iter()
            .copied()
            .find(|k| *k == other)
            .ok_or_else(|| Error::config("axis", format!("unknown axis {other:?}")))?,
    };
    Ok(key)
}

/// One pretraining run per value, in `root/<axis>=<value>`.
pub fn run_sweep(
    base: &RunConfig,
    axis: &str,
    values: &[String],
    data: Option<&Path>,
    root: &Path,
    force: bool,
) -> Result<Vec<PathBuf>> {
    let key = sweep_key(axis)?;
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set_value(key, v)?;
            cfg.validate()?;
            Ok((v, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut dirs = Vec::with_capacity(configs.len());
    for (v, cfg) in configs {
        let run = RunDir::create(&root.join(format!("{axis}={v}")), force)?;
        log::info!("sweep {axis}={v} -> {}", run.path.display());
        run_pretrain(&cfg, data, &run)?;
        dirs.push(run.path);
    }
    Ok(dirs)
}

mod common;

use common::{rand_tensor, store_gradcheck, tiny_config};
use localmim::checkpoint::Checkpoint;
use localmim::mve::{sample_window_plan, WindowPlan};
use localmim::pretrain::{
    breakpoint_copy, reconstruction_loss, student_forward, teacher_forward, PretrainObserver,
    Pretrainer, StepReport, StudentModel, TeacherModel,
};
use localmim::rng::substream;
use localmim::run::{load_samples, to_tokens};
use localmim::synth::Split;
use localmim::vit::{sample_mask, MaskPlan};
use localmim::{Error, ParamStore, RunConfig, Session, Tensor};

fn micro_config() -> RunConfig {
    let cfg = RunConfig::parse(
        "image_size = 16\npatch_size = 4\nenc_depth = 1\nenc_dim = 8\nenc_heads = 2\nmlp_ratio = 2\n\
         dec_depth = 1\ndec_dim = 8\ndec_heads = 2\nwindow_plan = 2x1\ntap_scales = 4,8\nmask_ratio = 0.5",
    )
    .unwrap();
    cfg.validate().unwrap();
    cfg
}

fn models<F: localmim::Scalar>(
    cfg: &RunConfig,
) -> (ParamStore<F>, StudentModel<F>, TeacherModel<F>) {
    let mut store = ParamStore::new();
    let s = StudentModel::new(&mut store, cfg, &mut substream(cfg.seed, "init", &[0])).unwrap();
    let t = TeacherModel::new(
        &mut store,
        cfg,
        &mut substream(cfg.seed, "teacher-init", &[]),
    )
    .unwrap();
    (store, s, t)
}

fn teacher_snapshot(store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
    store
        .with_prefix("teacher.")
        .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
        .collect()
}

#[test]
fn micro_end_to_end_gradient_check() {
    let cfg = micro_config();
    let (mut store, student, teacher) = models::<f64>(&cfg);
    let tokens = rand_tensor(&[16, 16], 4);
    let mask = sample_mask(16, 0.5, 3).unwrap();
    let plan = WindowPlan::from_triples((4, 4), 0, &[(2, 1, 1)]).unwrap();
    let worst = store_gradcheck(&mut store, 1e-6, |s| {
        let targets = teacher_forward(s.store(), &teacher, &tokens, &plan).unwrap();
        let out = student_forward(s, &student, &tokens, &mask, &plan).unwrap();
        reconstruction_loss(&out.predictions, &targets.targets, &out.masked, 1.0).unwrap()
    });
    assert!(worst <= 1e-3, "worst relative error {worst:e}");
}

#[test]
fn full_plan_prediction_shapes() {
    let mut cfg = RunConfig::full();
    for (k, v) in [
        ("enc_depth", "1"),
        ("enc_dim", "8"),
        ("enc_heads", "2"),
        ("dec_depth", "1"),
        ("dec_dim", "8"),
        ("dec_heads", "2"),
    ] {
        cfg.set_value(k, v).unwrap();
    }
    let (store, student, _) = models::<f32>(&cfg);
    let plan = sample_window_plan((14, 14), &cfg.window_plan, 1).unwrap();
    let mask = sample_mask(196, 0.6, 1).unwrap();
    let s = Session::no_grad(&store);
    let out = student_forward(&s, &student, &Tensor::zeros(&[196, 256]), &mask, &plan).unwrap();
    let rows: Vec<usize> = out.predictions.iter().map(|p| p.shape()[0]).collect();
    assert_eq!(rows, vec![25, 25, 25, 25, 49, 49, 81]);
    assert!(out.predictions.iter().all(|p| p.shape()[1] == 8));
}

#[test]
fn unmasked_identity_decoder_projects_encoder_features() {
    let mut cfg = micro_config();
    cfg.dec_depth = 0;
    let (store, student, _) = models::<f64>(&cfg);
    let tokens = rand_tensor(&[16, 16], 6);
    let plan = WindowPlan::from_triples((4, 4), 0, &[(2, 0, 0), (3, 1, 1)]).unwrap();
    let s = Session::no_grad(&store);
    let out = student_forward(&s, &student, &tokens, &MaskPlan::none(16), &plan).unwrap();
    let enc = student
        .encoder
        .forward(&s, student.embed.forward(&s, &tokens).unwrap())
        .unwrap();
    for (w, pred) in plan.specs.iter().zip(&out.predictions) {
        let x = enc.gather(&w.token_indices).unwrap();
        let expect = student
            .decoder_out
            .forward(&s, student.decoder_in.forward(&s, x).unwrap())
            .unwrap();
        assert_eq!(pred.to_tensor(), expect.to_tensor());
    }
}

#[test]
fn teacher_is_deterministic_and_window_local() {
    let cfg = micro_config();
    let (store, _, teacher) = models::<f64>(&cfg);
    let plan = WindowPlan::from_triples((4, 4), 0, &[(2, 0, 0), (2, 2, 2)]).unwrap();
    let tokens = rand_tensor(&[16, 16], 7);
    let a = teacher_forward(&store, &teacher, &tokens, &plan).unwrap();
    let b = teacher_forward(&store, &teacher, &tokens.clone(), &plan).unwrap();
    assert_eq!(a.targets, b.targets);

    // Token 0 lies in the first window only.
    let mut edited = tokens.clone();
    edited.data_mut()[3] += 1.0;
    let c = teacher_forward(&store, &teacher, &edited, &plan).unwrap();
    assert_ne!(c.targets[0], a.targets[0]);
    assert_eq!(c.targets[1], a.targets[1]);

    let wrong = WindowPlan::from_triples((3, 3), 0, &[(2, 0, 0)]).unwrap();
    assert!(teacher_forward(&store, &teacher, &tokens, &wrong).is_err());
}

#[test]
fn visible_targets_never_reach_the_loss() {
    let cfg = micro_config();
    let (store, student, teacher) = models::<f32>(&cfg);
    let tokens: Tensor<f32> = rand_tensor(&[16, 16], 8).cast();
    for seed in 0..10 {
        let mask = sample_mask(16, 0.5, seed).unwrap();
        let plan = sample_window_plan(
            (4, 4),
            &localmim::mve::parse_counts("2x2+3x1").unwrap(),
            seed,
        )
        .unwrap();
        let targets = teacher_forward(&store, &teacher, &tokens, &plan).unwrap();
        let s = Session::no_grad(&store);
        let out = student_forward(&s, &student, &tokens, &mask, &plan).unwrap();
        let base =
            reconstruction_loss(&out.predictions, &targets.targets, &out.masked, 1.0).unwrap();
        let mut noisy = targets.targets.clone();
        for (t, flags) in noisy.iter_mut().zip(&out.masked) {
            let d = t.shape()[1];
            let junk: Tensor<f32> = rand_tensor(t.shape(), seed + 100).cast();
            for (r, &m) in flags.iter().enumerate() {
                if !m {
                    t.data_mut()[r * d..(r + 1) * d]
                        .copy_from_slice(&junk.data()[r * d..(r + 1) * d]);
                }
            }
        }
        let again = reconstruction_loss(&out.predictions, &noisy, &out.masked, 1.0).unwrap();
        assert_eq!(
            base.value().data()[0].to_bits(),
            again.value().data()[0].to_bits()
        );
    }
}

#[test]
fn breakpoint_copy_semantics() {
    let cfg = micro_config();
    let (mut store, _, _) = models::<f32>(&cfg);
    let n = breakpoint_copy(&mut store).unwrap();
    assert_eq!(n, store.with_prefix("teacher.").count());
    for (_, p) in store.with_prefix("teacher.") {
        let src = store
            .by_name(&p.name.replacen("teacher.", "student.", 1))
            .unwrap();
        assert_eq!(src.tensor, p.tensor);
        assert!(!p.trainable);
    }
    assert!(store.by_name("teacher.mask_token").is_none());

    let mut broken = ParamStore::<f32>::new();
    broken
        .add("student.encoder.x", Tensor::zeros(&[2, 2]), true)
        .unwrap();
    broken
        .add("teacher.encoder.x", Tensor::zeros(&[2, 3]), false)
        .unwrap();
    assert!(matches!(
        breakpoint_copy(&mut broken),
        Err(Error::Checkpoint(_))
    ));
}

struct Watch {
    snapshot: Vec<(String, Tensor<f32>)>,
    breakpoints: Vec<usize>,
    changed_outside_breakpoint: bool,
    teacher_grads: bool,
    losses: Vec<f64>,
}

impl PretrainObserver for Watch {
    fn on_step(&mut self, t: &Pretrainer, r: &StepReport) -> localmim::Result<()> {
        let now = teacher_snapshot(&t.store);
        self.changed_outside_breakpoint |= now != self.snapshot;
        self.teacher_grads |= t
            .store
            .with_prefix("teacher.")
            .any(|(_, p)| p.grad.is_some());
        self.losses.push(r.loss);
        Ok(())
    }

    fn on_breakpoint(&mut self, t: &Pretrainer, epoch: usize) -> localmim::Result<()> {
        self.breakpoints.push(epoch);
        self.snapshot = teacher_snapshot(&t.store);
        Ok(())
    }
}

fn tiny_data(cfg: &RunConfig) -> Vec<Tensor<f32>> {
    to_tokens(
        cfg,
        &load_samples(cfg, None, Split::Train, cfg.pretrain_images).unwrap(),
    )
    .unwrap()
}

fn watch(trainer: &Pretrainer) -> Watch {
    Watch {
        snapshot: teacher_snapshot(&trainer.store),
        breakpoints: Vec::new(),
        changed_outside_breakpoint: false,
        teacher_grads: false,
        losses: Vec::new(),
    }
}

#[test]
fn teacher_frozen_between_single_breakpoint() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let mut t = Pretrainer::new(&cfg).unwrap();
    let mut w = watch(&t);
    t.run(&data, &mut w).unwrap();
    assert_eq!(w.breakpoints, vec![1]);
    assert!(!w.changed_outside_breakpoint);
    assert!(!w.teacher_grads);
    assert!(w.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn same_seed_same_losses() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let run = || {
        let mut t = Pretrainer::new(&cfg).unwrap();
        let mut w = watch(&t);
        t.run(&data, &mut w).unwrap();
        (w.losses, t.to_checkpoint().to_bytes())
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_roundtrip_and_resume() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let mut straight = Pretrainer::new(&cfg).unwrap();
    straight.run(&data, &mut ()).unwrap();

    let mut partial = Pretrainer::new(&cfg).unwrap();
    partial.run_until(&data, 2, &mut ()).unwrap();
    let ckpt = partial.to_checkpoint();
    let bytes = ckpt.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);

    let mut resumed = Pretrainer::from_checkpoint(&ckpt).unwrap();
    resumed.run(&data, &mut ()).unwrap();
    assert_eq!(
        resumed.to_checkpoint().to_bytes(),
        straight.to_checkpoint().to_bytes()
    );
}

#[test]
fn checkpoint_rejects_garbage() {
    assert!(Checkpoint::from_bytes(b"nope").is_err());
    let cfg = tiny_config();
    let bytes = Pretrainer::new(&cfg).unwrap().to_checkpoint().to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn non_finite_loss_reports_batch_seed() {
    let cfg = tiny_config();
    let mut data = tiny_data(&cfg);
    data[0].data_mut()[0] = f32::NAN;
    let mut t = Pretrainer::new(&cfg).unwrap();
    let err = t.run(&data, &mut ()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

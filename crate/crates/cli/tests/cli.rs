use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
image_size = 64
patch_size = 16
enc_depth = 2
enc_dim = 16
enc_heads = 2
mlp_ratio = 2
dec_depth = 1
dec_dim = 16
dec_heads = 2
window_plan = 2x2+3x1
epochs = 3
breakpoints = 1
warmup_epochs = 1
batch_size = 4
pretrain_images = 8
n_train = 8
n_val = 4
n_test = 4
finetune_images = 8
finetune_epochs = 2
finetune_batch_size = 4
fpn_dim = 8
bench_grids = 9
bench_window_plan = 3x2+5x1
bench_trials = 2
";

fn localmim(dir: &Path, args: &[&str]) -> Output {
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    Command::new(env!("CARGO_BIN_EXE_localmim"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(["--config", "tiny.cfg"])
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pretrain_writes_run_directory_and_refuses_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let o = localmim(tmp.path(), &["pretrain", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");
    for f in [
        "config.cfg",
        "metrics.jsonl",
        "timing.jsonl",
        "checkpoints/final.ckpt",
        "checkpoints/breakpoint-001.ckpt",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }

    let again = localmim(tmp.path(), &["pretrain", "--out", "run"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let forced = localmim(tmp.path(), &["pretrain", "--out", "run", "--force"]);
    assert!(forced.status.success());
    assert_eq!(
        fs::read_to_string(run.join("metrics.jsonl")).unwrap(),
        metrics
    );
}

#[test]
fn bad_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = localmim(
        tmp.path(),
        &["pretrain", "--out", "r", "--set", "mask_ratio=1.5"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mask_ratio"), "{}", stderr(&o));
    let o = localmim(
        tmp.path(),
        &["pretrain", "--out", "r2", "--set", "nonsense"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = localmim(
        tmp.path(),
        &["eval", "--checkpoint", "nope.ckpt", "--out", "e"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn environment_overrides_config_file_and_set() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.cfg"), TINY).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_localmim"))
        .current_dir(tmp.path())
        .env("LOCALMIM_MASK_RATIO", "0.25")
        .args([
            "--config",
            "tiny.cfg",
            "pretrain",
            "--out",
            "r",
            "--set",
            "mask_ratio=0.9",
            "--seed",
            "7",
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = fs::read_to_string(tmp.path().join("r/config.cfg")).unwrap();
    assert!(echo.contains("mask_ratio = 0.25"), "{echo}");
    assert!(echo.contains("seed = 7"), "{echo}");
}

#[test]
fn sweep_over_decoder_depth() {
    let tmp = tempfile::tempdir().unwrap();
    let o = localmim(
        tmp.path(),
        &[
            "sweep",
            "--axis",
            "decoder_depth",
            "--values",
            "2,4,8",
            "--out",
            "sw",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for v in [2, 4, 8] {
        let d = tmp.path().join(format!("sw/decoder_depth={v}"));
        assert!(d.join("checkpoints/final.ckpt").exists());
        assert!(fs::read_to_string(d.join("config.cfg"))
            .unwrap()
            .contains(&format!("dec_depth = {v}")));
    }
}

#[test]
fn gen_data_finetune_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let o = localmim(tmp.path(), &["gen-data", "--out", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("data/manifest.jsonl").exists());
    assert!(tmp.path().join("data/test/00003.bin").exists());

    let o = localmim(tmp.path(), &["pretrain", "--out", "pre", "--data", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = localmim(
        tmp.path(),
        &[
            "finetune",
            "--checkpoint",
            "pre/checkpoints/final.ckpt",
            "--out",
            "ft",
            "--data",
            "data",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("ft/eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "class_name,iou");
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("mean,"));

    let o = localmim(
        tmp.path(),
        &[
            "eval",
            "--checkpoint",
            "ft/checkpoints/final.ckpt",
            "--out",
            "ev",
            "--data",
            "data",
            "--png",
            "1",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(tmp.path().join("ev/eval.csv")).unwrap(),
        csv
    );
    assert_eq!(String::from_utf8_lossy(&o.stdout), csv);
    assert!(tmp.path().join("ev/predictions/00000-pred.png").exists());

    let o = localmim(tmp.path(), &["finetune", "--scratch", "--out", "sc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = localmim(tmp.path(), &["finetune", "--out", "x"]);
    assert!(!o.status.success());
}

#[test]
fn bench_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = localmim(
        tmp.path(),
        &[
            "bench",
            "--out",
            "b",
            "--grids",
            "14",
            "--plan",
            "5x4+7x2+9x1",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("b/bench.json")).unwrap())
            .unwrap();
    let e = &json["entries"][0];
    assert_eq!(e["global_pairs"], 38_416);
    assert_eq!(e["windowed_pairs"], 13_863);
    assert_eq!(e["counted_windowed"], 13_863);
    assert!(tmp.path().join("b/bench.txt").exists());
}

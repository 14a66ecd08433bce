use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fusecap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusecap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let synth = fusecap(&["synth", "--out", dir.join("data").to_str().unwrap(), "--n-train", "4", "--n-test", "2", "--image-size", "16"]);
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    let text = format!(
        "fusion.family = feature\n\
         fusion.method = concat\n\
         fusion.position = late\n\
         fusion.inputs = rgb+depth\n\
         model.d_model = 16\n\
         model.heads = 2\n\
         model.decoder_layers = 1\n\
         model.decoder_ff = 32\n\
         model.backbone_channels = 4,8\n\
         data.image_size = 8\n\
         data.train = data/train.jsonl\n\
         data.val = data/val.jsonl\n\
         data.test = data/test.jsonl\n\
         train.batch_size = 2\n\
         train.steps = 3\n\
         train.out = run\n{extra}"
    );
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn metrics_prints_the_report_header() {
    let dir = tempfile::tempdir().unwrap();
    let (h, r) = (dir.path().join("h.txt"), dir.path().join("r.txt"));
    fs::write(&h, "a man rides a horse\n").unwrap();
    fs::write(&r, "a man rides a horse\ta person on a horse\n").unwrap();
    let o = fusecap(&["metrics", "--hyp", h.to_str().unwrap(), "--refs", r.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("b1,"));
    assert!(lines.next().unwrap().starts_with("100"));
}

#[test]
fn mismatched_metric_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (h, r) = (dir.path().join("h.txt"), dir.path().join("r.txt"));
    fs::write(&h, "a\nb\n").unwrap();
    fs::write(&r, "a\n").unwrap();
    let o = fusecap(&["metrics", "--hyp", h.to_str().unwrap(), "--refs", r.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_and_bad_usage_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.cfg");
    fs::write(&p, "model.nonsense = 3\n").unwrap();
    let o = fusecap(&["params", "--config", p.to_str().unwrap(), "--vocab-size", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    assert_eq!(fusecap(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn params_lists_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = fusecap(&["params", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("fusion"), "{out}");
    assert!(out.contains("backbone"), "{out}");
}

#[test]
fn train_eval_caption_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = fusecap(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = fs::read_dir(dir.path().join("run"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "fckp"))
        .expect("a checkpoint file");
    let ck = ckpt.to_str().unwrap();
    let test = dir.path().join("data/test.jsonl");
    let report = dir.path().join("report");
    let o = fusecap(&["eval", "--checkpoint", ck, "--manifest", test.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("b1,"));
    assert!(report.join("report.csv").exists());

    let data = dir.path().join("data");
    let o = fusecap(&[
        "caption",
        "--checkpoint",
        ck,
        "--rgb",
        data.join("rgb/test_0000a.ppm").to_str().unwrap(),
        "--depth",
        data.join("depth/test_0000a.pgm").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 1);

    let o = fusecap(&["caption", "--checkpoint", ck, "--rgb", data.join("rgb/test_0000a.ppm").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "missing depth must be rejected");
}

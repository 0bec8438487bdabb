use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use arc_core::data::{parse_annotations, IgnorePolicy};
use arc_core::loss::BoxRole;

fn arc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    let o = arc(&[
        "train", "--synthetic", "4", "--n", "4", "--m", "1", "--size", "16", "--epochs", "1", "--batch", "2",
        "--lr", "1e-3", "--seed", seed, "--out", s(&out),
    ]);
    assert!(o.status.success(), "train failed: {}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(arc(&["--help"]).status.code(), Some(0));
    assert_eq!(arc(&[]).status.code(), Some(1));
    assert_eq!(arc(&["train", "--bogus"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.ckpt");
    let o = arc(&["train", "--synthetic", "4", "--size", "16", "--m", "1", "--epochs", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let o = arc(&["train", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn encode_decode_round_trip_and_wrong_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), "a.ckpt", "1");
    let other = train_tiny(dir.path(), "b.ckpt", "2");
    assert!(model.with_extension("log.csv").is_file());

    let data = dir.path().join("data");
    assert!(arc(&["synth", "--out", s(&data), "--count", "2", "--size", "16"]).status.success());
    let image = data.join("synth_00000.png");
    let bits = dir.path().join("x.arc");
    let o = arc(&["encode", "--model", s(&model), "--in", s(&image), "--out", s(&bits)]);
    assert!(o.status.success());
    let size = std::fs::metadata(&bits).unwrap().len();
    let line = stdout(&o);
    assert!(line.starts_with(&format!("bytes {size} bpp ")), "{line}");
    let bpp: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!((bpp - 8.0 * size as f64 / 256.0).abs() < 1e-6);

    let png = dir.path().join("x.png");
    let o = arc(&["decode", "--model", s(&model), "--in", s(&bits), "--out", s(&png)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "decoded 16x16");
    assert_eq!(image::image_dimensions(&png).unwrap(), (16, 16));

    let o = arc(&["decode", "--model", s(&other), "--in", s(&bits), "--out", s(&png)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model mismatch"));

    let mut corrupt = std::fs::read(&bits).unwrap();
    corrupt[0] = b'X';
    std::fs::write(&bits, corrupt).unwrap();
    let o = arc(&["decode", "--model", s(&model), "--in", s(&bits), "--out", s(&png)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_counts_every_timed_run() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), "a.ckpt", "1");
    let data = dir.path().join("data");
    assert!(arc(&["synth", "--out", s(&data), "--count", "2", "--size", "16"]).status.success());
    let csv = dir.path().join("lat.csv");
    let o = arc(&["bench", "--model", s(&model), "--images", s(&data), "--repeats", "3", "--csv", s(&csv)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("samples 6"), "{}", stdout(&o));
    assert!(csv.is_file());
    let o = arc(&["bench", "--model", s(&model), "--images", s(&data), "--repeats", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_ap_perfect_and_empty_detections() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(arc(&["synth", "--out", s(&data), "--count", "3", "--size", "32"]).status.success());
    let gt = data.join("annotations.odgt");

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = arc(&["eval-ap", "--gt", s(&gt), "--dets", s(&empty)]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("ap 0.000000 tp 0 fp 0 num_gt 3"), "{}", stdout(&o));

    let records = parse_annotations(&gt, IgnorePolicy::Drop).unwrap();
    let lines: Vec<String> = records
        .iter()
        .flat_map(|r| {
            r.boxes.with_role(BoxRole::Vbox).into_iter().map(move |b| {
                format!(r#"{{"id": "{}", "class": "person", "box": [{}, {}, {}, {}], "score": 0.9}}"#, r.id, b.x, b.y, b.w, b.h)
            })
        })
        .collect();
    let perfect = dir.path().join("perfect.jsonl");
    std::fs::write(&perfect, lines.join("\n")).unwrap();
    let csv = dir.path().join("rate.csv");
    let o = arc(&["eval-ap", "--gt", s(&gt), "--dets", s(&perfect), "--csv", s(&csv), "--bpp", "0.5"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("ap 1.000000 tp 3 fp 0"), "{}", stdout(&o));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": \"x\"}\n").unwrap();
    assert_eq!(arc(&["eval-ap", "--gt", s(&gt), "--dets", s(&bad)]).status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("arc.toml");
    std::fs::write(&cfg, format!("[synth]\nout = \"{}\"\ncount = 5\nsize = 16\n", s(&data))).unwrap();
    let o = arc(&["--config", s(&cfg), "synth", "--count", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("wrote 2 images"));

    std::fs::write(&cfg, "[synth]\nunknown = 1\n").unwrap();
    assert_eq!(arc(&["--config", s(&cfg), "synth"]).status.code(), Some(1));
}

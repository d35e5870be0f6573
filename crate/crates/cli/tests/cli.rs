use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use voxdepth::io;

const FRAMES: usize = 12;

fn small_scene() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes/small.json")
}

fn voxdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxdepth")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = voxdepth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let cfg = small_scene();
    let mut args = vec!["synth", "--config", s(&cfg), "--output", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn run(data: &Path, out: &Path, extra: &[&str]) {
    let cfg = small_scene();
    let mut args = vec!["run", "--config", s(&cfg), "--input", s(data), "--output", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn corrected(dir: &Path) -> Vec<voxdepth::DepthImage> {
    (0..FRAMES)
        .map(|i| io::read_depth(dir.join(format!("corrected_{i:06}.png"))).unwrap())
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn drop_from_manifest(data: &Path, gt: bool, masks: bool) {
    let mut m = io::load_sequence(data).unwrap();
    m.has_ground_truth &= !gt;
    m.has_hole_masks &= !masks;
    io::write_manifest(&m).unwrap();
}

#[test]
fn run_writes_outputs() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("data"), t.path().join("out"));
    synth(&data, &[]);
    run(&data, &out, &["--masked-rmse"]);
    assert_eq!(corrected(&out).len(), FRAMES);

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "frame,psnr_db,masked_rmse,hole_ratio,raw,epoch,good_count"
    );
    assert_eq!(lines.count(), FRAMES);

    let report = json(&out.join("report.json"));
    assert_eq!(report["frames"], FRAMES);
    assert_eq!(report["method"], "voxdepth");
    assert!(report["masked_rmse"].is_number());
    let cfg = json(&out.join("config.json"));
    assert_eq!(cfg["pipeline"]["fusion"]["window"], 3);
}

#[test]
fn pipelined_and_sequential_agree() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, &[]);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    run(&data, &a, &["--pipelined"]);
    run(&data, &b, &["--pipelined=false"]);
    assert_eq!(corrected(&a), corrected(&b));
    assert_eq!(json(&a.join("report.json"))["pipelined"], true);
    assert_eq!(json(&b.join("report.json"))["pipelined"], false);
}

#[test]
fn method_none_is_identity_and_eval_agrees() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("data"), t.path().join("out"));
    synth(&data, &[]);
    run(&data, &out, &["--method", "none"]);
    let m = io::load_sequence(&data).unwrap();
    for (i, img) in corrected(&out).iter().enumerate() {
        assert_eq!(*img, io::read_frame(&m, i).unwrap().depth);
    }

    let ev = t.path().join("eval");
    ok(&["eval", "--input", s(&data), "--predictions", s(&out), "--output", s(&ev)]);
    let csv = std::fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), FRAMES + 2);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    let run_psnr = json(&out.join("report.json"))["mean_psnr_db"].as_f64().unwrap();
    let eval_psnr = json(&ev.join("eval.json"))["mean_psnr_db"].as_f64().unwrap();
    assert!((run_psnr - eval_psnr).abs() < 1e-9);
}

#[test]
fn synth_is_deterministic_and_overridable() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    synth(&a, &["--seed", "5"]);
    synth(&b, &["--seed", "5"]);
    synth(&c, &["--seed", "5", "--set", "noise.theta=0.5"]);
    let read = |d: &Path| {
        let m = io::load_sequence(d).unwrap();
        (0..FRAMES).map(|i| io::read_frame(&m, i).unwrap().depth).collect::<Vec<_>>()
    };
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn print_config_reflects_overrides() {
    let cfg = small_scene();
    let out = ok(&[
        "run",
        "--config",
        s(&cfg),
        "--set",
        "noise.theta=0.5",
        "--set",
        "pipeline.force_refusion_every=7",
        "--pipelined=false",
        "--print-config",
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["noise"]["theta"], 0.5);
    assert_eq!(v["pipeline"]["force_refusion_every"], 7);
    assert_eq!(v["pipeline"]["pipelined"], false);
    assert_eq!(v["scene"]["width"], 160);
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, &[]);
    let out = t.path().join("out");

    let code = |args: &[&str]| voxdepth(args).status.code().unwrap();
    assert_eq!(code(&["synth", "--config", "/nonexistent/scene.json", "--output", s(&out)]), 2);
    assert_eq!(code(&["synth", "--set", "noise.no_such_key=1", "--output", s(&out)]), 2);
    assert_eq!(code(&["synth", "--set", "scene.width=0", "--output", s(&out)]), 2);
    assert_eq!(code(&["run", "--input", s(&t.path().join("missing")), "--output", s(&out)]), 3);
    assert_eq!(code(&["run", "--output", s(&out)]), 2);

    drop_from_manifest(&data, false, true);
    assert_eq!(code(&["run", "--input", s(&data), "--output", s(&out), "--masked-rmse"]), 2);
    drop_from_manifest(&data, true, true);
    assert_eq!(code(&["eval", "--input", s(&data), "--output", s(&out)]), 2);
    assert_eq!(
        code(&["study", "--input", s(&data), "--output", s(&out), "--frequencies", "never", "--windows", "2"]),
        2
    );
}

#[test]
fn bench_reports_components() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("data"), t.path().join("bench"));
    synth(&data, &[]);
    let cfg = small_scene();
    let stdout = ok(&["bench", "--config", s(&cfg), "--input", s(&data), "--output", s(&out)]).stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("total"));
    let b = json(&out.join("bench.json"));
    let names: Vec<&str> = b["components"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["component"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["fusion", "inpainting", "transform", "combine"]);
    assert_eq!(b["total"]["frames"], FRAMES);
    assert!(b["total"]["fps"].as_f64().unwrap() > 0.0);
}

#[test]
fn study_writes_tables() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("data"), t.path().join("study"));
    synth(&data, &[]);
    let cfg = small_scene();
    ok(&[
        "study",
        "--config",
        s(&cfg),
        "--input",
        s(&data),
        "--output",
        s(&out),
        "--frequencies",
        "4,never",
        "--windows",
        "1,3",
        "--hole-fractions",
        "0.05,0.2",
        "--work-sizes",
        "80,120",
    ]);
    for (file, rows) in [
        ("fusion_frequency.csv", 2),
        ("init_window.csv", 2),
        ("resize.csv", 2),
    ] {
        let text = std::fs::read_to_string(out.join(file)).unwrap();
        assert_eq!(text.lines().count(), rows + 1, "{file}");
    }
    assert!(out.join("hole_curve.csv").is_file());
}

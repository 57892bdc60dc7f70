use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use anchorvid_core::{read_tensor, write_tensor, Tensor};
use serde_json::Value;

fn anchorvid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchorvid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = anchorvid(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn t2i(dir: &Path, steps: &str, seed: &str) {
    ok(&[
        "t2i",
        "--prompt",
        "a cat",
        "--seed",
        seed,
        "--steps",
        steps,
        "--out",
        s(dir),
    ]);
}

fn latent_count(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name();
            let name = name.to_string_lossy();
            name.starts_with("z_") && name.ends_with(".azt")
        })
        .count()
}

#[test]
fn t2i_writes_one_latent_per_step_and_the_final_latent() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("trace");
    let stdout = ok(&[
        "t2i",
        "--prompt",
        "a cat",
        "--seed",
        "3",
        "--steps",
        "10",
        "--out",
        s(&trace),
    ]);
    assert_eq!(latent_count(&trace), 11);
    assert!(trace.join("manifest.json").exists());
    let manifest = fs::read(trace.join("manifest.json")).unwrap();
    assert_eq!(stdout.trim(), anchorvid_core::sha256_hex(&manifest));
}

#[test]
fn animate_writes_video_report_and_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("trace");
    let out = tmp.path().join("video");
    t2i(&trace, "8", "4");
    ok(&[
        "animate",
        "--trace",
        s(&trace),
        "--steps",
        "8",
        "--frames",
        "5",
        "--export-frames",
        "--out",
        s(&out),
    ]);
    let video = read_tensor(out.join("video.azt")).unwrap();
    assert_eq!(video.dims(), &[5, 8, 8, 8]);
    let frames: Vec<_> = fs::read_dir(out.join("frames")).unwrap().collect();
    assert_eq!(frames.len(), 5);
    let pgm = fs::read(out.join("frames/frame_001.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), b"P5\n8 8\n255\n".len() + 64);

    let report: Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["command"], "animate");
    assert_eq!(report["step_log"]["steps"], 8);
    assert_eq!(report["metrics"]["first_frame_mse"], 0.0);
    assert_eq!(report["config"]["sampler"]["encoder_mode"], "window-pc");
}

#[test]
fn step_count_mismatch_is_a_trace_error() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("trace");
    t2i(&trace, "6", "1");
    let out = anchorvid(&[
        "animate",
        "--trace",
        s(&trace),
        "--steps",
        "7",
        "--out",
        s(&tmp.path().join("v")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("trace");
    t2i(&trace, "6", "1");
    let v = tmp.path().join("v");
    let bad_range = anchorvid(&[
        "animate",
        "--trace",
        s(&trace),
        "--steps",
        "6",
        "--time-travel",
        "--tt-range",
        "5:9",
        "--out",
        s(&v),
    ]);
    assert_eq!(bad_range.status.code(), Some(2));
    let unknown = anchorvid(&["animate", "--trace", s(&trace), "--frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    // the range only matters when time travel is on
    ok(&[
        "animate",
        "--trace",
        s(&trace),
        "--steps",
        "6",
        "--frames",
        "2",
        "--tt-range",
        "5:9",
        "--out",
        s(&v),
    ]);
}

#[test]
fn missing_trace_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = anchorvid(&[
        "animate",
        "--trace",
        s(&tmp.path().join("nope")),
        "--out",
        s(&tmp.path().join("v")),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn inverted_traces_drive_animation_with_shared_kv() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("zero.azt");
    write_tensor(&input, &Tensor::new(vec![8, 8, 8], vec![0.0; 512]).unwrap()).unwrap();
    let inverted = tmp.path().join("inv");
    ok(&[
        "invert",
        "--input",
        s(&input),
        "--prompt",
        "grey",
        "--steps",
        "6",
        "--out",
        s(&inverted),
    ]);
    assert_eq!(latent_count(&inverted), 7);
    let z_t = read_tensor(inverted.join("z_6.azt")).unwrap();
    assert!(z_t.data().iter().all(|x| x.is_finite()));

    let out = tmp.path().join("v");
    ok(&[
        "animate",
        "--trace",
        s(&inverted),
        "--steps",
        "6",
        "--frames",
        "3",
        "--share-kv",
        "--out",
        s(&out),
    ]);
    let video = read_tensor(out.join("video.azt")).unwrap();
    assert_eq!(
        video.outer(0),
        read_tensor(inverted.join("z_0.azt")).unwrap().data()
    );
}

#[test]
fn interpolate_accepts_three_frames_and_rejects_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    t2i(&a, "5", "1");
    t2i(&b, "5", "2");
    let out = tmp.path().join("v");
    ok(&[
        "interpolate",
        "--trace",
        s(&a),
        "--trace-b",
        s(&b),
        "--steps",
        "5",
        "--frames",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(read_tensor(out.join("video.azt")).unwrap().dims()[0], 3);
    let two = anchorvid(&[
        "interpolate",
        "--trace",
        s(&a),
        "--trace-b",
        s(&b),
        "--steps",
        "5",
        "--frames",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(two.status.code(), Some(2));
}

#[test]
fn check_output_is_stable_and_corruption_exits_4() {
    let first = ok(&["check"]);
    assert_eq!(first, ok(&["check"]));
    let corrupt = anchorvid(&["check", "--corrupt-position-table"]);
    assert_eq!(corrupt.status.code(), Some(4));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sofas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sofas")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sofas(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .parse()
        .unwrap()
}

fn hexagon(dir: &Path) -> PathBuf {
    let events = dir.join("hex.txt");
    ok(&["synth", "--shape", "hexagon", "--width", "65", "--vel", "58,0", "--dur", "2.0", "-o", p(&events)]);
    events
}

#[test]
fn synth_run_eval_recovers_the_hexagon_flow() {
    let dir = tempfile::tempdir().unwrap();
    let events = hexagon(dir.path());
    let gt = dir.path().join("hex.txt.gt");
    assert!(gt.exists());

    let flow = dir.path().join("hex.flow");
    ok(&["run", p(&events), "-o", p(&flow)]);
    assert!(dir.path().join("hex.flow.manifest").exists());
    let snaps = std::fs::read_to_string(dir.path().join("hex.flow.snapshots.csv")).unwrap();
    assert!(snaps.lines().count() > 1);

    let summary = ok(&["eval", p(&flow), "--gt", p(&gt), "--since", "0.5"]);
    assert!(field(&summary, "magnitude_abs_median") < 10.0, "{summary}");
    assert!(field(&summary, "angle_median") < 10.0, "{summary}");
    assert_eq!(field(&summary, "segments"), 1.0);
}

#[test]
fn lk_output_is_evaluable_and_biased_low() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("rect.txt");
    ok(&["synth", "--shape", "rectangle", "--width", "120", "--height", "60", "-o", p(&events)]);
    let lk = dir.path().join("rect.lk");
    ok(&["lk", p(&events), "-o", p(&lk)]);
    let summary = ok(&["eval", p(&lk), "--gt", &format!("{}.gt", p(&events))]);
    assert!(field(&summary, "magnitude_median") < 0.0, "{summary}");
    assert_eq!(field(&summary, "segments"), 0.0);
}

#[test]
fn manifests_replay_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("noisy.txt");
    ok(&["synth", "--set", "noise_rate=500", "--seed", "7", "--dur", "1", "-o", p(&events)]);
    let manifest = dir.path().join("noisy.txt.manifest");
    let again = dir.path().join("again.txt");
    ok(&["synth", "--config", p(&manifest), "-o", p(&again), "--set", "manifest=/dev/null"]);
    assert_eq!(std::fs::read(&events).unwrap(), std::fs::read(&again).unwrap());

    let first = dir.path().join("a.flow");
    ok(&["run", p(&events), "-o", p(&first), "--set", "flow_plane.p_stable=400"]);
    let text = std::fs::read_to_string(dir.path().join("a.flow.manifest")).unwrap();
    assert!(text.contains("flow_plane.p_stable = 400"));
    let second = dir.path().join("b.flow");
    let replay_snaps = dir.path().join("b.csv");
    ok(&[
        "run",
        "--config",
        p(&dir.path().join("a.flow.manifest")),
        "-o",
        p(&second),
        "--set",
        &format!("snapshots={}", p(&replay_snaps)),
        "--set",
        &format!("manifest={}", p(&dir.path().join("b.manifest"))),
    ]);
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.flow.snapshots.csv")).unwrap(),
        std::fs::read(&replay_snaps).unwrap()
    );
}

#[test]
fn render_writes_frames_and_handles_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.flow");
    std::fs::write(&empty, "").unwrap();
    let frames = dir.path().join("none");
    let out = ok(&["render", p(&empty), "-o", p(&frames)]);
    assert_eq!(field(&out, "frames"), 0.0);
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 0);

    let events = hexagon(dir.path());
    let flow = dir.path().join("hex.flow");
    ok(&["run", p(&events), "-o", p(&flow)]);
    let frames = dir.path().join("frames");
    let out = ok(&["render", p(&flow), "-o", p(&frames), "--mode", "segment", "--frame-us", "100000"]);
    assert_eq!(field(&out, "frames"), 20.0);
    let first = std::fs::read(frames.join("frame_00000.ppm")).unwrap();
    assert!(first.starts_with(b"P6\n240 180\n255\n"));
    assert_eq!(first.len(), "P6\n240 180\n255\n".len() + 240 * 180 * 3);
}

#[test]
fn bench_reports_throughput() {
    let out = ok(&["bench", "--repeat", "1"]);
    assert!(field(&out, "engine_events_per_sec") > 0.0);
    assert!(field(&out, "events") > 0.0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&sofas(&["frobnicate"])), 1);
    assert_eq!(code(&sofas(&["run", "--no-such-flag"])), 1);
    assert_eq!(code(&sofas(&[])), 1);
    assert_eq!(code(&sofas(&["--help"])), 0);
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let events = hexagon(dir.path());
    let cfg = dir.path().join("bad.cfg");

    std::fs::write(&cfg, "flow_plane.n = lots\n").unwrap();
    let out = sofas(&["run", p(&events), "--config", p(&cfg)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("flow_plane.n"));

    std::fs::write(&cfg, "track_plane.m_grid = 4\n").unwrap();
    let out = sofas(&["run", p(&events), "--config", p(&cfg)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("track_plane.m_grid"));

    let out = sofas(&["run", p(&events), "--set", "flow_plane.typo=1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("flow_plane.typo"));

    let out = sofas(&["synth", "--shape", "star", "-o", p(&dir.path().join("x"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape"));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = sofas(&["run", p(&dir.path().join("missing.txt"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));

    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "100 1 1 1\n50 1 1 1\n").unwrap();
    assert_eq!(code(&sofas(&["run", p(&bad)])), 2);
    std::fs::write(&bad, "100 1 1 maybe\n").unwrap();
    let out = sofas(&["lk", p(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let events = hexagon(dir.path());
    let flow = dir.path().join("hex.flow");
    ok(&["run", p(&events), "-o", p(&flow)]);
    let short_gt = dir.path().join("short.gt");
    std::fs::write(&short_gt, "0 1 0 0\n").unwrap();
    assert_eq!(code(&sofas(&["eval", p(&flow), "--gt", p(&short_gt)])), 2);
}

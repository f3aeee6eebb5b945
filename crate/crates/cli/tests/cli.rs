use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use curvetext::eval::SceneDetection;
use curvetext::io;

const TINY: &str = r#"
seeds = 1
train_scenes = 4
test_scenes = 3
rotation_angles = [30.0]

[train]
iters = 8
batch = 16
grid = 7

[train.head]
roi_dim = 49
fc_dim = 16
k = 2
pfam_mode = "both_fc"
pfam_hidden = 8
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_curvetext"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn core_fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn golden(name: &str, actual: &str) {
    let path = fixture(name);
    if std::env::var_os("CURVETEXT_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} differs from its golden file");
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    cfg
}

fn gen_data(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["gen", "--out", p(&out), "--scenes", "3", "--seed", "5"];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["gen"])), 1);
    assert_eq!(code(&run(&["gradcheck", "--seeds", "many"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d", &[]);
    let dets = dir.path().join("none.jsonl");
    std::fs::write(&dets, "").unwrap();
    let o = run(&["eval", "--data", p(&data), "--detections", p(&dets), "--rotate", "20"]);
    assert_eq!(code(&o), 1);
    let o = run(&["train", "--data", p(&data), "--scheme", "fancy", "--out", p(&dir.path().join("c.json"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown scheme"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["render", "--data", p(&dir.path().join("missing")), "--out", p(&dir.path().join("svg"))]);
    assert_eq!(code(&o), 2);
    let o = run(&["fit", "--in", p(&core_fixture("ctw1500_malformed.txt"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1:"));
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "seeds = \"five\"\n").unwrap();
    assert_eq!(code(&run(&["--config", p(&bad_cfg), "gradcheck", "--seeds", "1"])), 2);
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck", "--seeds", "3", "--dims", "8"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.contains(" PASS ")).count(), 7, "{out}");
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_data(dir.path(), "a", &[]);
    let b = gen_data(dir.path(), "b", &[]);
    for f in ["scenes.jsonl", "proposals.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let c = gen_data(dir.path(), "c", &["--pair-probability", "0"]);
    assert_ne!(std::fs::read(a.join("scenes.jsonl")).unwrap(), std::fs::read(c.join("scenes.jsonl")).unwrap());
}

#[test]
fn train_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = gen_data(dir.path(), "d", &[]);
    let mut outputs = Vec::new();
    for run_id in 0..2 {
        let ck = dir.path().join(format!("ck{run_id}.json"));
        let o = run(&["--config", p(&cfg), "train", "--data", p(&data), "--scheme", "omts", "--pfam", "2fc", "--seed", "3", "--out", p(&ck)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(dir.path().join(format!("ck{run_id}.json.loss.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.starts_with(io::LOSS_CSV_HEADER));
        outputs.push((std::fs::read(&ck).unwrap(), csv, o.stdout));
    }
    assert!(outputs[0] == outputs[1]);
    let head = io::checkpoint_from_json(&String::from_utf8(outputs[0].0.clone()).unwrap()).unwrap();
    assert_eq!(head.config.fc_dim, 16);
}

#[test]
fn bench_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut outputs = Vec::new();
    for run_id in 0..2 {
        let out = dir.path().join(format!("bench{run_id}.json"));
        let o = run(&["--config", p(&cfg), "bench", "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((std::fs::read(&out).unwrap(), o.stdout));
    }
    assert!(outputs[0] == outputs[1]);
    let table = String::from_utf8_lossy(&outputs[0].1);
    assert!(table.contains("Baseline + PFAM(2fc) + OMTS"));
    assert!(table.contains("Rotated"));
}

#[test]
fn checkpoint_eval_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = gen_data(dir.path(), "d", &[]);
    let ck = dir.path().join("ck.json");
    assert_eq!(code(&run(&["--config", p(&cfg), "train", "--data", p(&data), "--out", p(&ck)])), 0);
    let dets = dir.path().join("dets.jsonl");
    let report = dir.path().join("report.json");
    let o = run(&["--config", p(&cfg), "eval", "--data", p(&data), "--checkpoint", p(&ck), "--save-detections", p(&dets), "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["f_measure"].is_number());
    io::read_jsonl_detections(&std::fs::read_to_string(&dets).unwrap()).unwrap();
    let o = run(&["--config", p(&cfg), "eval", "--data", p(&data), "--checkpoint", p(&ck), "--rotate", "45"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = dir.path().join("svg");
    assert_eq!(code(&run(&["render", "--data", p(&data), "--detections", p(&dets), "--out", p(&svg)])), 0);
    assert_eq!(std::fs::read_dir(&svg).unwrap().count(), 3);
}

#[test]
fn perfect_detections_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d", &[]);
    let scenes = io::read_jsonl_scenes(&std::fs::read_to_string(data.join("scenes.jsonl")).unwrap()).unwrap();
    let dets: Vec<SceneDetection> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.instances.iter().map(move |&shape| SceneDetection { scene: i, score: 0.9, shape }))
        .collect();
    let path = dir.path().join("dets.jsonl");
    std::fs::write(&path, io::write_jsonl_detections(&dets)).unwrap();
    let o = run(&["eval", "--data", p(&data), "--detections", p(&path)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("100.00  100.00  100.00"));

    let stray = vec![SceneDetection { scene: 9, ..dets[0] }];
    std::fs::write(&path, io::write_jsonl_detections(&stray)).unwrap();
    assert_eq!(code(&run(&["eval", "--data", p(&data), "--detections", p(&path)])), 2);
}

#[test]
fn fit_golden() {
    let o = run(&["fit", "--in", p(&core_fixture("ctw1500_valid.txt"))]);
    assert_eq!(code(&o), 0);
    golden("fit_ctw1500.json", &String::from_utf8(o.stdout).unwrap());
    let o = run(&["fit", "--in", p(&core_fixture("icdar15_valid.txt")), "--format", "icdar15"]);
    assert_eq!(code(&o), 0);
    golden("fit_icdar15.json", &String::from_utf8(o.stdout).unwrap());
}

#[test]
fn render_golden() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::copy(core_fixture("scenes.jsonl"), data.join("scenes.jsonl")).unwrap();
    let svg = dir.path().join("svg");
    let o = run(&["render", "--data", p(&data), "--detections", p(&core_fixture("detections.jsonl")), "--out", p(&svg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    golden("render_scene_0000.svg", &std::fs::read_to_string(svg.join("scene_0000.svg")).unwrap());
}

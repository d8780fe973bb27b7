use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sadnn::checkpoint::{load_checkpoint, Checkpoint};
use sadnn::cost::parse_report;
use sadnn::data::{decode_pgm, export_pgm, synth_seg_dataset};
use sadnn::layers::dice_coefficient;
use sadnn::models::{ModelConfig, NetworkGraph};
use sadnn::verify::VerifyReport;
use sadnn::Tensor;

fn sadnn(args: &[&str]) -> Output {
    sadnn_env(args, &[])
}

fn sadnn_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sadnn"));
    cmd.args(args).env_remove("SADNN_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", out.status.code(), String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn repo(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).to_string_lossy().into_owned()
}

fn p(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn eval_value(out: &Output) -> f64 {
    let t: toml::Table = ok(out).parse().unwrap();
    t["value"].as_float().unwrap()
}

#[test]
fn seg_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, log) = (p(&dir, "seg.sadn"), p(&dir, "seg.jsonl"));
    let out = sadnn(&["train", "--task", "seg", "--out", s(&ckpt), "--log", s(&log), "--test-n", "0"]);
    ok(&out);
    assert!(stderr(&out).contains("seed 1"));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 25);
    assert_eq!(lines[0]["seed"], 1);

    let (q1, q2) = (p(&dir, "q1.sadn"), p(&dir, "q2.sadn"));
    ok(&sadnn(&["quantize", "--checkpoint", s(&ckpt), "--out", s(&q1)]));
    ok(&sadnn(&["quantize", "--checkpoint", s(&ckpt), "--out", s(&q2)]));
    assert_eq!(std::fs::read(&q1).unwrap(), std::fs::read(&q2).unwrap());

    let float = eval_value(&sadnn(&["eval", "--checkpoint", s(&ckpt), "--format", "structured"]));
    let quant = eval_value(&sadnn(&["eval", "--checkpoint", s(&q1), "--format", "structured"]));
    assert!(float >= 0.95, "float DSC {float}");
    assert!(float - quant <= 0.03, "float {float} int8 {quant}");
    assert_eq!(float, eval_value(&sadnn(&["eval", "--checkpoint", s(&ckpt), "--format", "structured"])));

    let sample = &synth_seg_dataset(1, 32, 4242).unwrap()[0];
    let (img, mask) = (p(&dir, "blob.pgm"), p(&dir, "mask.pgm"));
    export_pgm(&sample.image, &img).unwrap();
    ok(&sadnn(&["predict", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&mask)]));
    let bytes = std::fs::read(&mask).unwrap();
    let pred = decode_pgm(&bytes).unwrap();
    assert!(pred.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let truth = sample.label.reshape(&[1, 1, 32, 32]).unwrap();
    let dsc = dice_coefficient(&pred, &truth, 0.5).unwrap();
    assert!(dsc >= 0.9, "blob DSC {dsc}");
    ok(&sadnn(&["predict", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&mask)]));
    assert_eq!(std::fs::read(&mask).unwrap(), bytes);

    let big = p(&dir, "big.pgm");
    let up = Tensor::from_fn(&[1, 1, 64, 64], |i| sample.image.data()[(i / 64 / 2) * 32 + (i % 64) / 2]);
    export_pgm(&up, &big).unwrap();
    ok(&sadnn(&["predict", "--checkpoint", s(&q1), "--image", s(&big), "--out", s(&mask)]));
    assert_eq!(decode_pgm(&std::fs::read(&mask).unwrap()).unwrap().shape(), &[1, 1, 64, 64]);
}

#[test]
fn cls_quantized_size_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, q) = (p(&dir, "cls.sadn"), p(&dir, "q.sadn"));
    ok(&sadnn(&["train", "--task", "cls", "--n", "32", "--epochs", "1", "--test-n", "0", "--out", s(&ckpt)]));
    let out = ok(&sadnn(&["quantize", "--checkpoint", s(&ckpt), "--out", s(&q)]));
    let ratio = std::fs::metadata(&q).unwrap().len() as f64 / std::fs::metadata(&ckpt).unwrap().len() as f64;
    assert!((0.25..=0.30).contains(&ratio), "{ratio}");
    assert!(out.contains(&format!("{ratio:.4}")), "{out}");
    let scores = ok(&sadnn(&["predict", "--checkpoint", s(&q), "--image", s(&write_blank(&dir))]));
    assert_eq!(scores.lines().count(), 3);
    assert!(scores.starts_with("circle "));
    assert_eq!(code(&sadnn(&["quantize", "--checkpoint", s(&q), "--out", s(&p(&dir, "qq.sadn"))])), 1);
}

fn write_blank(dir: &tempfile::TempDir) -> PathBuf {
    let path = p(dir, "blank.pgm");
    export_pgm(&Tensor::zeros(&[1, 1, 20, 20]), &path).unwrap();
    path
}

#[test]
fn zero_epochs_write_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = p(&dir, "init.sadn");
    ok(&sadnn(&["train", "--task", "seg", "--epochs", "0", "--n", "4", "--test-n", "0", "--out", s(&ckpt)]));
    let Checkpoint::Float(net) = load_checkpoint(&ckpt).unwrap() else { panic!("float checkpoint expected") };
    assert_eq!(net, NetworkGraph::build(&ModelConfig::toy_seg()).unwrap());
}

#[test]
fn user_errors_exit_one_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = sadnn(&["train", "--task", "seg", "--out", "/nonexistent/dir/x.sadn"]);
    assert_eq!(code(&out), 1);
    assert!(!stderr(&out).contains("epoch"), "{}", stderr(&out));
    assert_eq!(code(&sadnn(&["train", "--task", "seg", "--lr", "0", "--out", s(&p(&dir, "a"))])), 1);
    assert_eq!(code(&sadnn(&["train", "--out", s(&p(&dir, "a"))])), 1);
    assert_eq!(code(&sadnn(&["train", "--task", "dog", "--out", s(&p(&dir, "a"))])), 1);
    assert_eq!(code(&sadnn(&["frobnicate"])), 1);
    assert_eq!(code(&sadnn(&["--help"])), 0);

    let corrupt = p(&dir, "corrupt.sadn");
    std::fs::write(&corrupt, b"SADN\x01\x00garbage").unwrap();
    let out = sadnn(&["eval", "--checkpoint", s(&corrupt)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("archive"), "{}", stderr(&out));
    assert_eq!(code(&sadnn(&["quantize", "--checkpoint", s(&corrupt), "--out", s(&p(&dir, "q"))])), 1);

    let ckpt = p(&dir, "seg.sadn");
    ok(&sadnn(&["train", "--task", "seg", "--epochs", "0", "--n", "1", "--test-n", "0", "--out", s(&ckpt)]));
    assert_eq!(code(&sadnn(&["eval", "--checkpoint", s(&ckpt), "--task", "cls"])), 1);
    let out = sadnn(&["eval", "--checkpoint", s(&ckpt), "--n", "0"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("empty"));
    assert_eq!(code(&sadnn(&["predict", "--checkpoint", s(&ckpt), "--image", s(&write_blank(&dir))])), 1);
    assert_eq!(code(&sadnn(&["predict", "--checkpoint", s(&ckpt), "--image", s(&p(&dir, "none.pgm")), "--out", s(&p(&dir, "m.pgm"))])), 1);
}

#[test]
fn analyze_baselines_and_reports() {
    let out = ok(&sadnn(&["analyze", &repo("specs/resnet18.spec"), "--format", "structured"]));
    let r = parse_report(&out).unwrap();
    assert!((r.params as f64 / 11.17e6 - 1.0).abs() <= 0.005, "{}", r.params);
    let human = ok(&sadnn(&["analyze", &repo("specs/resnet18.spec"), "--input-shape", "3x352x352", "--paper-convention"]));
    assert!(human.contains("mul+add"));
    assert!(human.contains("8950653440"));

    let dir = tempfile::tempdir().unwrap();
    let empty = p(&dir, "empty.spec");
    std::fs::write(&empty, "# nothing\n").unwrap();
    let r = parse_report(&ok(&sadnn(&["analyze", s(&empty), "--format", "structured"]))).unwrap();
    assert_eq!((r.params, r.ops_mul, r.ops_add), (0, 0, 0));
    assert_eq!(r.energy_j_fp32, 0.0);

    let bad = p(&dir, "bad.spec");
    std::fs::write(&bad, "input shape=1x8x8\nrelu\nconv2d out=4 kernel=3 wat=1\n").unwrap();
    let out = sadnn(&["analyze", s(&bad)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    let table = p(&dir, "energy.toml");
    std::fs::write(&table, "[fp32]\nmul_pj = 7.4\nadd_pj = 1.8\n").unwrap();
    let base = parse_report(&ok(&sadnn(&["analyze", &repo("specs/resnet18.spec"), "--format", "structured"]))).unwrap();
    let over = parse_report(&ok(&sadnn(&["analyze", &repo("specs/resnet18.spec"), "--format", "structured", "--energy-table", s(&table)]))).unwrap();
    assert!((over.energy_j_fp32 / base.energy_j_fp32 - 2.0).abs() < 1e-9);
    assert_eq!(over.energy_j_int8, base.energy_j_int8);

    let ckpt = p(&dir, "cls.sadn");
    ok(&sadnn(&["train", "--task", "cls", "--epochs", "0", "--n", "1", "--test-n", "0", "--out", s(&ckpt)]));
    let r = parse_report(&ok(&sadnn(&["analyze", s(&ckpt), "--format", "structured"]))).unwrap();
    assert_eq!(r.params, 39339);
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = p(&dir, "c.sadn");
    let cfg = p(&dir, "run.toml");
    std::fs::write(
        &cfg,
        format!("task = \"seg\"\nthreads = 2\n[train]\nepochs = 1\nn = 8\ntest_n = 0\nseed = 5\nout = {:?}\n", s(&ckpt)),
    )
    .unwrap();
    let out = sadnn(&["--config", s(&cfg), "train"]);
    ok(&out);
    assert!(stderr(&out).contains("8 images of 32x32 (seed 5), 1 epochs"), "{}", stderr(&out));
    let out = sadnn(&["train", "--config", s(&cfg), "--seed", "6", "--epochs", "2"]);
    ok(&out);
    assert!(stderr(&out).contains("(seed 6), 2 epochs"), "{}", stderr(&out));

    std::fs::write(&cfg, "[train]\nbogus = 1\n").unwrap();
    assert_eq!(code(&sadnn(&["--config", s(&cfg), "train", "--task", "seg", "--out", s(&ckpt)])), 1);
    assert_eq!(code(&sadnn(&["--config", s(&p(&dir, "missing.toml")), "verify"])), 1);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = p(&dir, "c.sadn");
    ok(&sadnn(&["train", "--task", "cls", "--n", "24", "--epochs", "1", "--test-n", "0", "--out", s(&ckpt)]));
    let one = ok(&sadnn(&["--threads", "1", "eval", "--checkpoint", s(&ckpt), "--format", "structured"]));
    let three = ok(&sadnn_env(&["eval", "--checkpoint", s(&ckpt), "--format", "structured"], &[("SADNN_THREADS", "3")]));
    assert_eq!(one, three);
    assert_eq!(code(&sadnn_env(&["eval", "--checkpoint", s(&ckpt)], &[("SADNN_THREADS", "lots")])), 1);
    assert_eq!(code(&sadnn(&["--threads", "0", "eval", "--checkpoint", s(&ckpt)])), 1);
}

#[test]
fn verify_subset_and_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (p(&dir, "a.toml"), p(&dir, "b.toml"));
    let out = ok(&sadnn(&["verify", "--only", "3,4,5", "--out", s(&a)]));
    assert!(out.contains("PASS"));
    ok(&sadnn(&["verify", "--only", "3,4,5", "--out", s(&b)]));
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let report = VerifyReport::from_toml(&text).unwrap();
    assert_eq!(report.checks.iter().map(|c| c.id).collect::<Vec<_>>(), vec![3, 4, 5]);
    assert_eq!(report.to_toml(), text);

    let table = p(&dir, "energy.toml");
    std::fs::write(&table, "[int8]\nmul_pj = 0.4\nadd_pj = 0.03\n").unwrap();
    let out = sadnn(&["verify", "--only", "1", "--energy-table", s(&table)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert_eq!(code(&sadnn(&["verify", "--only", "11"])), 1);
}

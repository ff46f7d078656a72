use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use tempfile::TempDir;

fn ofnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofnet")).args(args).env_remove("OFNET_THREADS").output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn ok(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    o
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn gen(dir: &Path, count: usize, size: usize, seed: u64) {
    ok(ofnet(&["gen-data", "--out", p(dir), "--count", &count.to_string(), "--size", &size.to_string(), "--seed", &seed.to_string()]));
}

/// Dataset plus a briefly trained checkpoint.
fn trained(tmp: &TempDir) -> (PathBuf, PathBuf) {
    let data = tmp.path().join("data");
    gen(&data, 2, 40, 3);
    let run = tmp.path().join("run");
    ok(ofnet(&["train", "--dataset", p(&data), "--out", p(&run), "--iters", "2", "--crop", "0", "--log-every", "0"]));
    (data, run.join("last.ofnt"))
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 3, 48, 7);
    gen(&b, 3, 48, 7);
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    assert!(ca.len() > 3);
    assert_eq!(ca, cb);

    let c = tmp.path().join("c");
    gen(&c, 3, 48, 8);
    assert_ne!(ca.get("0000.png"), dir_contents(&c).get("0000.png"));
}

#[test]
fn gen_data_refuses_a_non_empty_directory_without_force() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    gen(&d, 2, 40, 1);
    let o = ofnet(&["gen-data", "--out", p(&d), "--count", "1", "--size", "40"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));

    fs::write(d.join("notes.md"), "keep me").unwrap();
    ok(ofnet(&["gen-data", "--out", p(&d), "--count", "1", "--size", "40", "--force"]));
    let names: Vec<String> = dir_contents(&d).into_keys().collect();
    assert!(names.contains(&"notes.md".to_string()));
    assert!(!names.iter().any(|n| n.starts_with("0001")), "{names:?}");
}

#[test]
fn gen_data_with_zero_samples_writes_an_empty_manifest() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("empty");
    ok(ofnet(&["gen-data", "--out", p(&d), "--count", "0"]));
    let manifest = fs::read_to_string(d.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l.trim() == "count 0"), "{manifest}");
}

#[test]
fn gen_data_config_reproduces_the_dataset() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    gen(&a, 2, 40, 11);
    let b = tmp.path().join("b");
    ok(ofnet(&["gen-data", "--config", p(&a.join("config.toml")), "--out", p(&b)]));
    assert_eq!(dir_contents(&a), dir_contents(&b));
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 1, 40, 0);
    let run = tmp.path().join("run");
    ok(ofnet(&["train", "--dataset", p(&data), "--out", p(&run), "--iters", "0"]));
    let ckpts: Vec<String> = dir_contents(&run).into_keys().filter(|n| n.ends_with(".ofnt")).collect();
    assert_eq!(ckpts, vec!["step_000000.ofnt".to_string()]);
    assert!(run.join("config.toml").exists());
}

#[test]
fn training_is_reproducible_from_its_config() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 40, 5);
    let a = tmp.path().join("a");
    ok(ofnet(&["train", "--dataset", p(&data), "--out", p(&a), "--iters", "2", "--crop", "32", "--seed", "9", "--lambda", "0.25", "--log-every", "0"]));
    let cfg = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(cfg.contains("lambda = 0.25"), "{cfg}");
    let b = tmp.path().join("b");
    ok(ofnet(&["train", "--config", p(&a.join("config.toml")), "--out", p(&b), "--log-every", "0"]));
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());
    assert_eq!(fs::read(a.join("last.ofnt")).unwrap(), fs::read(b.join("last.ofnt")).unwrap());
}

#[test]
fn a_diverging_run_exits_with_the_numeric_code_and_names_the_step() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 40, 2);
    let o = ofnet(&["train", "--dataset", p(&data), "--out", p(&tmp.path().join("r")), "--iters", "20", "--crop", "0", "--lr", "1e30"]);
    assert_eq!(o.status.code(), Some(3), "stderr: {}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("at step "), "{err}");
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 1, 40, 0);
    let o = ofnet(&["train", "--dataset", p(&data), "--out", p(&tmp.path().join("r")), "--variant", "huge"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("head-3x3"));
}

#[test]
fn infer_writes_raw_maps_of_the_image_size() {
    let tmp = TempDir::new().unwrap();
    let (data, ckpt) = trained(&tmp);
    let out = tmp.path().join("pred");
    ok(ofnet(&["infer", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--out", p(&out)]));
    for id in ["0000", "0001"] {
        for kind in ["edge_prob", "orientation", "thin_edge", "boundary_ori"] {
            let bytes = fs::read(out.join(format!("{id}.{kind}.f32"))).unwrap();
            assert_eq!(bytes.len(), 40 * 40 * 4, "{id}.{kind}");
        }
        assert!(out.join(format!("{id}.boundary.png")).exists());
    }
}

#[test]
fn blank_image_gives_finite_outputs() {
    let tmp = TempDir::new().unwrap();
    let (_, ckpt) = trained(&tmp);
    let img = tmp.path().join("blank.png");
    ofnet::dataset::write_mask_png(&img, &Array2::from_elem((37, 53), false)).unwrap();
    let out = tmp.path().join("pred");
    ok(ofnet(&["infer", "--checkpoint", p(&ckpt), "--out", p(&out), p(&img)]));
    for kind in ["edge_prob", "orientation"] {
        let map = ofnet::dataset::read_f32_map(&out.join(format!("blank.{kind}.f32")), 37, 53).unwrap();
        assert!(map.iter().all(|v| v.is_finite()), "{kind}");
    }
}

#[test]
fn infer_rejects_a_corrupt_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 1, 40, 0);
    let bad = tmp.path().join("bad.ofnt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = ofnet(&["infer", "--checkpoint", p(&bad), "--dataset", p(&data), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_lists_missing_predictions() {
    let tmp = TempDir::new().unwrap();
    let (data, ckpt) = trained(&tmp);
    let pred = tmp.path().join("pred");
    ok(ofnet(&["infer", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--out", p(&pred)]));
    let manifest = fs::read_to_string(pred.join("predictions.txt")).unwrap();
    let kept: Vec<&str> = manifest.lines().filter(|l| !l.contains("0001")).map(|l| if l.starts_with("count") { "count 1" } else { l }).collect();
    fs::write(pred.join("predictions.txt"), kept.join("\n")).unwrap();

    let o = ofnet(&["eval", "--predictions", p(&pred), "--dataset", p(&data), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing predictions: 0001"), "{}", stderr(&o));
}

#[test]
fn eval_plot_round_trip() {
    let tmp = TempDir::new().unwrap();
    let (data, ckpt) = trained(&tmp);
    let pred = tmp.path().join("pred");
    ok(ofnet(&["infer", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--out", p(&pred)]));
    let rep = tmp.path().join("baseline-run");
    let o = ok(ofnet(&["eval", "--predictions", p(&pred), "--dataset", p(&data), "--out", p(&rep), "--tol", "0.02", "--thresholds", "11"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ODS"));
    let curve = fs::read_to_string(rep.join("epr_pr.csv")).unwrap();
    assert_eq!(curve.lines().count(), 12);
    let report = fs::read_to_string(rep.join("report.json")).unwrap();
    assert!(report.contains("\"tolerance\": 0.02"), "{report}");

    let (a, b) = (tmp.path().join("plot_a"), tmp.path().join("plot_b"));
    ok(ofnet(&["plot", "--out", p(&a), p(&rep)]));
    ok(ofnet(&["plot", "--out", p(&b), p(&rep)]));
    for svg in ["epr_pr.svg", "opr_pr.svg"] {
        let text = fs::read_to_string(a.join(svg)).unwrap();
        assert_eq!(text, fs::read_to_string(b.join(svg)).unwrap());
        assert_eq!(text.matches("baseline-run").count(), 1, "one legend entry");
        assert!(text.contains("F=0.5"), "iso-F contours");
    }
}

#[test]
fn plot_reports_the_line_of_a_malformed_csv() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("epr_mine.csv");
    fs::write(&csv, "threshold,precision,recall\n0.1,0.5,0.5\n0.2,oops,0.4\n").unwrap();
    let o = ofnet(&["plot", "--out", p(&tmp.path().join("o")), p(&csv)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn plot_without_reports_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let o = ofnet(&["plot", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_writes_a_report_and_table() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("abl");
    let o = ok(ofnet(&[
        "ablate", "--out", p(&out), "--variants", "full,no-mcl", "--seeds", "0", "--iters", "1", "--crop", "0", "--train-count", "1",
        "--test-count", "1", "--size", "40",
    ]));
    let table = fs::read_to_string(out.join("table.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&o.stdout), table);
    assert!(table.contains("no-mcl"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 2);
    assert!(out.join("config.toml").exists());
}

#[test]
fn usage_errors_and_thread_cap() {
    assert_eq!(ofnet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ofnet(&["eval", "--tol", "x"]).status.code(), Some(1));
    assert_eq!(ofnet(&["--help"]).status.code(), Some(0));
    assert_eq!(ofnet(&["train", "--out", "/nonexistent"]).status.code(), Some(1));

    let tmp = TempDir::new().unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ofnet"));
    let o = cmd.args(["gen-data", "--out", p(&tmp.path().join("d")), "--count", "0"]).env("OFNET_THREADS", "0").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_ofnet"))
        .args(["gen-data", "--out", p(&tmp.path().join("d")), "--count", "1", "--size", "40"])
        .env("OFNET_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

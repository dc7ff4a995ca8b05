use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const SMALL: [&str; 4] = ["--sequences", "4", "--snapshots", "60"];
const QUICK: [&str; 4] = ["--epochs", "2", "--set", "d_model=16"];

fn beamfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamfuse")).args(args).output().expect("spawn beamfuse")
}

fn ok(args: &[&str]) -> String {
    let out = beamfuse(args);
    assert!(out.status.success(), "{}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(args: &[&str]) -> i32 {
    beamfuse(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset, trained fusion checkpoint with report, and map, built once.
struct Run {
    _root: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
    map: PathBuf,
}

fn pipeline() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let (data, ckpt, map) = (root.path().join("data"), root.path().join("ckpt"), root.path().join("map"));
        let mut args = vec!["gen", "--out", s(&data)];
        args.extend(SMALL);
        ok(&args);
        let mut args = vec!["train", "--data", s(&data), "--out", s(&ckpt)];
        args.extend(QUICK);
        ok(&args);
        ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt)]);
        ok(&["map", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&map)]);
        Run {
            _root: root,
            data,
            ckpt,
            map,
        }
    })
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_records_manifest_labels_and_config() {
    let run = pipeline();
    for f in ["manifest.json", "labels.json", "config.txt", "seq_0.bin", "seq_3.bin"] {
        assert!(run.data.join(f).is_file(), "{f}");
    }
    let manifest = json(&run.data.join("manifest.json"));
    assert_eq!(manifest["sequences"].as_array().unwrap().len(), 4);
    let config = fs::read_to_string(run.data.join("config.txt")).unwrap();
    assert!(config.lines().any(|l| l.replace(' ', "") == "sequences=4"));
    let labels = json(&run.data.join("labels.json"));
    let split = &labels["split"];
    let sizes: Vec<usize> = ["train", "val", "test"].iter().map(|k| split[k].as_array().unwrap().len()).collect();
    assert_eq!(sizes.iter().sum::<usize>(), 4);
    assert!(sizes.iter().all(|&n| n >= 1));
}

#[test]
fn train_log_has_the_documented_columns() {
    let run = pipeline();
    let log = fs::read_to_string(run.ckpt.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,split,loss,loss_beam,loss_blk,loss_pose,top1,top3,se_drop,f1_blk,rmse,lr"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().all(|r| r.len() == 12));
    // initial validation, two epochs of train and val, then the test row
    assert_eq!(rows.len(), 6);
    assert_eq!((rows[0][0], rows[0][1]), ("0", "val"));
    assert_eq!(rows[5][1], "test");
    let initial: f64 = rows[0][3].parse().unwrap();
    assert!((initial - 64f64.ln()).abs() < 1e-3);
}

#[test]
fn report_and_checkpoint_agree() {
    let run = pipeline();
    let report = json(&run.ckpt.join("report.json"));
    let sidecar = json(&run.ckpt.join("model.json"));
    assert_eq!(report["split"], "test");
    assert_eq!(report["modality"], "all");
    assert_eq!(report["checkpoint"], sidecar["checkpoint_id"]);
    assert_eq!(report["config_hash"], sidecar["config_hash"]);
    for k in ["top1", "top3", "se_drop", "f1_blk", "rmse"] {
        assert!(report[k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert!(report["top3"].as_f64() >= report["top1"].as_f64());
}

#[test]
fn eval_is_deterministic() {
    let run = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("again.json");
    ok(&["eval", "--data", s(&run.data), "--checkpoint", s(&run.ckpt), "--out", s(&out)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(run.ckpt.join("report.json")).unwrap());
}

#[test]
fn map_outputs_are_consistent() {
    let run = pipeline();
    let meta = json(&run.map.join("map_meta.json"));
    let ppm = fs::read(run.map.join("map.ppm")).unwrap();
    let (w, h) = (meta["width_px"].as_u64().unwrap() as usize, meta["height_px"].as_u64().unwrap() as usize);
    let header = format!("P6\n{w} {h}\n255\n");
    assert!(ppm.starts_with(header.as_bytes()));
    assert_eq!(ppm.len(), header.len() + 3 * w * h);

    let csv = fs::read_to_string(run.map.join("trajectories.csv")).unwrap();
    let labels = json(&run.data.join("labels.json"));
    let test_ids = labels["split"]["test"].as_array().unwrap().len();
    assert_eq!(csv.lines().count(), 1 + 60 * test_ids);
    assert_eq!(meta["snapshots"].as_u64().unwrap() as usize, 60 * test_ids);

    let (mut sq, mut n) = (0.0, 0);
    for line in csv.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        sq += (v[2] - v[0]).powi(2) + (v[3] - v[1]).powi(2);
        n += 1;
    }
    let rmse = json(&run.ckpt.join("report.json"))["rmse"].as_f64().unwrap();
    assert!(((sq / n as f64).sqrt() - rmse).abs() < 1e-5);
}

#[test]
fn too_few_sequences_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["gen", "--out", s(&dir.path().join("d")), "--sequences", "1", "--snapshots", "10"]), 2);
    assert!(!dir.path().join("d").exists());
}

#[test]
fn unknown_keys_and_modalities_are_config_errors() {
    let run = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&["gen", "--out", s(&out), "--set", "no_such_key=1"]), 2);
    assert_eq!(code(&["train", "--data", s(&run.data), "--out", s(&out), "--modality", "sonar"]), 2);
}

#[test]
fn missing_inputs_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    assert_eq!(code(&["train", "--data", s(&nowhere), "--out", s(&dir.path().join("o"))]), 3);
}

#[test]
fn mismatched_hashes_are_refused() {
    let run = pipeline();
    // a config change after training
    assert_eq!(code(&["eval", "--data", s(&run.data), "--checkpoint", s(&run.ckpt), "--lr", "5e-4"]), 5);
    // an override that would have produced a different dataset
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--data", s(&run.data), "--out", s(&dir.path().join("t")), "--set", "gps_sigma=3"]), 5);

    let copy = dir.path().join("ckpt");
    fs::create_dir(&copy).unwrap();
    for f in ["model.json", "model.bfck"] {
        fs::copy(run.ckpt.join(f), copy.join(f)).unwrap();
    }
    let weights = copy.join("model.bfck");
    let mut bytes = fs::read(&weights).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&weights, bytes).unwrap();
    assert_eq!(code(&["eval", "--data", s(&run.data), "--checkpoint", s(&copy)]), 5);
}

#[test]
fn ablation_trains_every_variant() {
    let run = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    ok(&["ablate", "--data", s(&run.data), "--out", s(&out), "--epochs", "1", "--set", "d_model=8"]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["camera", "lidar", "radar", "gps", "mmwave", "all"]);
    for n in names {
        assert!(out.join(n).join("model.bfck").is_file(), "{n}");
    }
    assert_eq!(json(&out.join("ablation.json")).as_array().unwrap().len(), 6);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use pgpc::geometry::{write_ply, PlyFormat};
use pgpc::prior::{posed_mesh, read_params_file, TemplateModel};
use pgpc::training::toy_dataset;
use tempfile::TempDir;

fn pgpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgpc"))
        .args(args)
        .env_remove("PGPC_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "version": 1,
  "dataset": { "count": 3, "precisions": [5], "seed": 7 },
  "training": {
    "lambdas": [0.5, 4.0],
    "epochs": 1,
    "warmup_epochs": 1,
    "batch_size": 2,
    "network": { "scales": 2, "channels": [4, 4], "latent_channels": 2, "vrn": true }
  }
}"#;

/// A trained tiny model and a 5-bit toy cloud shared by the tests.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    model: PathBuf,
    cloud: PathBuf,
    points: usize,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("train.json");
        std::fs::write(&config, TINY_CONFIG).unwrap();
        let out = root.join("models");
        let o = pgpc(&["train", s(&config), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let t = TemplateModel::toy_humanoid();
        let sample = &toy_dataset(&t, 1, &[5], 99).unwrap()[0];
        let cloud = root.join("cloud.ply");
        let pts: Vec<[f64; 3]> = sample.voxels.iter().map(|c| c.to_array().map(f64::from)).collect();
        write_ply(&cloud, &pts, &[], PlyFormat::Ascii).unwrap();
        Fixture {
            _dir: dir,
            model: out.join("lambda_0.5.pgw"),
            root,
            cloud,
            points: pts.len(),
        }
    })
}

fn scratch() -> TempDir {
    TempDir::new_in(&fixture().root).unwrap()
}

#[test]
fn help_and_usage_errors() {
    let o = pgpc(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("encode"));
    let o = pgpc(&["encode", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--bogus"));
    assert_eq!(code(&pgpc(&[])), 1);
    assert_eq!(code(&pgpc(&["eval", "--csv", "x.csv", "--source", "a.ply", "--bitstream", "a.bin"])), 1);
}

#[test]
fn missing_or_bad_data_exits_with_two() {
    let f = fixture();
    let d = scratch();
    let o = pgpc(&["decode", "/nonexistent.bin", s(&d.path().join("o.ply")), "--model", s(&f.model)]);
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("o.ply").exists());
    let junk = d.path().join("junk.bin");
    std::fs::write(&junk, b"PGPC\x01garbage").unwrap();
    let o = pgpc(&["decode", s(&junk), s(&d.path().join("o.ply")), "--model", s(&f.model)]);
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("o.ply").exists(), "no partial output on failure");
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, r#"{ "version": 1, "training": { "nonsense": 1 } }"#).unwrap();
    assert_eq!(code(&pgpc(&["train", s(&bad), "--out", s(d.path())])), 2);
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_pgpc"))
        .args(["report", "x.bin"])
        .env("PGPC_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn train_writes_one_model_per_lambda_and_a_log() {
    let f = fixture();
    let dir = f.model.parent().unwrap();
    for l in ["0.5", "4"] {
        assert!(dir.join(format!("lambda_{l}.pgw")).exists());
    }
    let log = std::fs::read_to_string(dir.join("train.log")).unwrap();
    assert!(log.lines().count() >= 2);
    assert!(log.lines().all(|l| l.split(',').count() == 5));
    let echoed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["training"]["lambdas"], serde_json::json!([0.5, 4.0]));
}

#[test]
fn init_writes_a_loadable_default() {
    let d = scratch();
    let path = d.path().join("default.json");
    assert_eq!(code(&pgpc(&["train", s(&path), "--init"])), 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["version"], 1);
    assert_eq!(v["training"]["lambdas"].as_array().unwrap().len(), 7);
}

#[test]
fn encode_decode_eval_accounting() {
    let f = fixture();
    let d = scratch();
    let bin = d.path().join("c.bin");
    let o = pgpc(&["encode", s(&f.cloud), s(&bin), "--model", s(&f.model), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dec = d.path().join("c.ply");
    assert_eq!(code(&pgpc(&["decode", s(&bin), s(&dec), "--model", s(&f.model)])), 0);
    let decoded = pgpc::geometry::read_ply(&dec).unwrap();
    assert_eq!(decoded.vertices.len(), f.points);

    let csv = d.path().join("rd.csv");
    for _ in 0..2 {
        let o = pgpc(&[
            "eval", "--source", s(&f.cloud), "--bitstream", s(&bin), "--decoded", s(&dec), "--csv", s(&csv),
            "--lambda", "0.5",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], pgpc::metrics::CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], lines[2]);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "cloud");
    let size = std::fs::metadata(&bin).unwrap().len();
    assert_eq!(fields[2], format!("{:.6}", 8.0 * size as f64 / f.points as f64));

    // Decoding inside eval gives the same row.
    let csv2 = d.path().join("rd2.csv");
    let o = pgpc(&[
        "eval", "--source", s(&f.cloud), "--bitstream", s(&bin), "--model", s(&f.model), "--csv", s(&csv2),
        "--lambda", "0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&csv2).unwrap().lines().nth(1).unwrap(), lines[1]);
}

#[test]
fn encoding_is_idempotent() {
    let f = fixture();
    let d = scratch();
    let (a, b) = (d.path().join("a.bin"), d.path().join("b.bin"));
    for out in [&a, &b] {
        assert_eq!(code(&pgpc(&["encode", s(&f.cloud), s(out), "--model", s(&f.model), "--seed", "5"])), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn no_prior_report_has_zero_parameter_share() {
    let f = fixture();
    let d = scratch();
    let bin = d.path().join("n.bin");
    assert_eq!(code(&pgpc(&["encode", s(&f.cloud), s(&bin), "--model", s(&f.model), "--no-prior"])), 0);
    let json = d.path().join("r.json");
    let o = pgpc(&["report", s(&bin), "--json", s(&json)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("parameters  0 bits (0.00%)"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["param_share"], 0.0);
    assert_eq!(v["points"], f.points as u64);
}

#[test]
fn fit_then_encode_with_parameters() {
    let f = fixture();
    let d = scratch();
    let params = d.path().join("p.txt");
    let o = pgpc(&["fit", s(&f.cloud), s(&params), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    read_params_file(&params).unwrap();
    let bin = d.path().join("p.bin");
    let o = pgpc(&["encode", s(&f.cloud), s(&bin), "--model", s(&f.model), "--params", s(&params)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = pgpc(&["report", s(&bin)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("parameters  1408 bits"));
}

#[test]
fn sample_mesh_to_cloud() {
    let d = scratch();
    let mesh = posed_mesh(&TemplateModel::toy_humanoid(), &Default::default()).unwrap();
    let input = d.path().join("mesh.ply");
    write_ply(&input, &mesh.vertices, &mesh.faces, PlyFormat::BinaryLittleEndian).unwrap();
    let out = d.path().join("s.ply");
    let o = pgpc(&["sample", s(&input), s(&out), "--points", "500", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(pgpc::geometry::read_ply(&out).unwrap().vertices.len(), 500);
    let vox = d.path().join("v.ply");
    assert_eq!(code(&pgpc(&["sample", s(&input), s(&vox), "--points", "500", "--precision", "6", "--binary"])), 0);
    let v = pgpc::geometry::read_ply(&vox).unwrap();
    assert!(v.vertices.iter().flatten().all(|&x| x.fract() == 0.0 && (0.0..64.0).contains(&x)));
    // A cloud without faces cannot be sampled.
    assert_eq!(code(&pgpc(&["sample", s(&out), s(&vox), "--points", "10"])), 2);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use advcompose::imagecore::{decode_ppm, save_ppm, synth_dataset, Image, Shape};
use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advcompose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// A small trained checkpoint shared by the tests in this file.
fn checkpoint() -> &'static PathBuf {
    static CKPT: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &CKPT
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("net.ckpt");
            let o = bin(&["train", "--data", "synth:1:30:16", "--epochs", "8", "--out", s(&path)]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            (dir, path)
        })
        .1
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    for p in [&a, &b] {
        assert_eq!(code(&bin(&["train", "--data", "synth:1:10:8", "--epochs", "2", "--out", s(p)])), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = std::fs::read_to_string(dir.path().join("a.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let m = json(&dir.path().join("a.manifest.json"));
    assert_eq!(m["run"]["subcommand"], "train");
    assert_eq!(m["tool"], "advcompose");
}

#[test]
fn missing_data_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["train", "--data", "cifar:/no/such/batch.bin", "--out", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("/no/such/batch.bin"));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.csv");
    let ck = checkpoint();
    let unknown = bin(&["matrix", "--defenses", s(ck), "--attacks", "nonsense", "--out", s(&out)]);
    assert_eq!(code(&unknown), 2);
    assert!(stderr(&unknown).contains("nonsense"));
    assert_eq!(code(&bin(&["sweep", "--defense", s(ck), "--delta-grid", "", "--out", s(&out)])), 2);
    assert_eq!(code(&bin(&["train", "--lr", "-1", "--out", s(&out)])), 2);
    assert_eq!(code(&bin(&["frobnicate"])), 2);
    assert_eq!(code(&bin(&["replay", "--manifest", s(&dir.path().join("missing.json"))])), 2);
    // 8x8 data against a 16x16 network
    let mismatch = bin(&["matrix", "--defenses", s(ck), "--attacks", "identity", "--data", "synth:1:2:8", "--out", s(&out)]);
    assert_eq!(code(&mismatch), 3);
}

#[test]
fn matrix_has_ground_and_identity_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let ck = checkpoint();
    let defenses = format!("a={},b={}", s(ck), s(ck));
    let o = bin(&["matrix", "--defenses", &defenses, "--attacks", "identity,fgsm,delta", "--data", "synth:2:4:16", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "defense,Ground,identity,fgsm,delta");
    let cells: usize = lines[1..].iter().map(|l| l.split(',').count() - 1).sum();
    assert_eq!(cells, 2 * (3 + 1));
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[1], f[2]);
    }
}

#[test]
fn sweep_writes_grid_sized_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw.csv");
    let o = bin(&[
        "sweep", "--defense", s(checkpoint()), "--delta-grid", "0,2,4", "--flow-grid", "0,0.5", "--data", "synth:2:2:16",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&first[..3], &["0", "0", "0"]);
    assert_eq!(&first[5..], &["0", "0", "0", "0"]);
    let heat = decode_ppm(&std::fs::read(dir.path().join("sw.accuracy.pgm")).unwrap()).unwrap();
    assert_eq!((heat.height(), heat.width(), heat.channels()), (3, 2, 1));
    let m = json(&dir.path().join("sw.manifest.json"));
    let acc = &m["results"]["heatmaps"]["accuracy"];
    assert!(acc["min"].as_f64().unwrap() <= acc["max"].as_f64().unwrap());
}

#[test]
fn theorem_reports_absence_and_certificates() {
    let dir = tempfile::tempdir().unwrap();
    let flat = dir.path().join("flat.ppm");
    save_ppm(&Image::filled(Shape::new(8, 8, 3), 0.5).unwrap(), &flat).unwrap();
    let out = dir.path().join("t.json");
    assert_eq!(code(&bin(&["theorem", "--image", s(&flat), "--out", s(&out)])), 0);
    let r = &json(&out)["results"][0];
    assert!(r["witness"].is_null());
    assert_eq!(r["reason"], "no high-contrast pixel");

    let step = dir.path().join("step.pgm");
    let img = Image::new(Shape::new(4, 4, 1), (0..16).map(|i| if i % 4 == 3 { 1.0 } else { 0.0 }).collect()).unwrap();
    save_ppm(&img, &step).unwrap();
    assert_eq!(code(&bin(&["theorem", "--image", s(&step), "--eps", "0.05", "--out", s(&out)])), 0);
    let w = &json(&out)["results"][0]["witness"];
    assert!(w["margin_p"].as_f64().unwrap() > 0.0);
    assert!(w["margin_q"].as_f64().unwrap() > 0.0);

    let scan_out = dir.path().join("scan.json");
    assert_eq!(code(&bin(&["theorem", "--data", "synth:1:10:16", "--out", s(&scan_out)])), 0);
    assert_eq!(json(&scan_out)["disjointness_violations"], 0);
}

#[test]
fn identity_attack_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let x = synth_dataset(5, 1, 16).unwrap().images[0].clone();
    let input = dir.path().join("x.ppm");
    save_ppm(&x, &input).unwrap();
    let out = dir.path().join("att");
    let o = bin(&["attack", "--input", s(&input), "--label", "0", "--ckpt", s(checkpoint()), "--attack", "identity", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let read = |n: &str| decode_ppm(&std::fs::read(out.join(n)).unwrap()).unwrap();
    let original = read("../x.ppm");
    assert_eq!(read("perturbed.ppm"), original);
    let diff = read("diff.ppm");
    assert!(diff.data().iter().all(|&v| v == diff.data()[0] && (v - 0.5).abs() <= 0.5 / 255.0));
    let r = json(&out.join("result.json"));
    assert_eq!(r["iterations"], 0);
    assert_eq!(r["success"].as_bool().unwrap(), r["predicted"].as_u64().unwrap() != 0);
}

#[test]
fn gradcheck_flags_a_corrupted_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    let ok = bin(&["gradcheck", "--points", "5", "--out", s(&out)]);
    assert_eq!(code(&ok), 0);
    let ops: Vec<String> = json(&out)["ops"].as_array().unwrap().iter().map(|o| o["op"].as_str().unwrap().to_string()).collect();
    let mut unique = ops.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), ops.len());
    let bad = bin(&["gradcheck", "--points", "5", "--corrupt", "flow"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("flow"));
}

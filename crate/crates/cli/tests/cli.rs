//! End-to-end runs of the `mslayout` binary.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use mslayout_core::corpus::{parse_annotation_file, read_manifest_file, Split};
use mslayout_model::train::{StageConfig, TrainingConfig};
use mslayout_model::NetworkConfig;

fn mslayout(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mslayout"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mslayout(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_synth_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("synth.json");
    let cfg = r#"{"width": 256, "height": 256, "lines_per_page": [2, 3], "line_spacing": [28.0, 40.0]}"#;
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn synth_train_infer_evaluate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let synth_cfg = write_synth_config(root);
    ok(&["synth", "--config", p(&synth_cfg), "--n", "4", "--seed", "3", "--out", p(&corpus)]);

    let annotations = corpus.join("annotations.json");
    let manifest = corpus.join("manifest.json");
    let docs = parse_annotation_file(&annotations).unwrap();
    assert_eq!(docs.len(), 4);
    for d in &docs {
        let img = corpus.join(&d.image_path);
        assert!(img.is_file(), "{img:?} missing");
    }
    let man = read_manifest_file(&manifest).unwrap();
    let total: usize = Split::ALL.iter().map(|&s| man.doc_ids(s).len()).sum();
    assert_eq!(total, 4);

    let train_cfg = TrainingConfig {
        network: NetworkConfig::desk(),
        stages: StageConfig::schedule([1, 1, 1]),
        steps_per_epoch: Some(2),
        rois_per_image: 16,
        ..TrainingConfig::default()
    };
    let stages = root.join("train.json");
    std::fs::write(&stages, serde_json::to_string(&train_cfg).unwrap()).unwrap();
    let ckpt_dir = root.join("ckpt");
    ok(&[
        "train", "--corpus", p(&annotations), "--manifest", p(&manifest), "--stages", p(&stages),
        "--seed", "1", "--out", p(&ckpt_dir),
    ]);
    let log = std::fs::read_to_string(ckpt_dir.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["total"].as_f64().unwrap().is_finite());
    }
    let ckpt = ckpt_dir.join("model.ckpt");
    assert!(ckpt.is_file());

    let preds = root.join("out/preds.json");
    ok(&["infer", "--ckpt", p(&ckpt), "--image", p(&corpus.join("images")), "--out", p(&preds)]);
    let predicted = parse_annotation_file(&preds).unwrap();
    let mut ids: Vec<_> = predicted.iter().map(|d| d.doc_id.clone()).collect();
    let mut expected: Vec<_> = docs.iter().map(|d| d.doc_id.clone()).collect();
    ids.sort();
    expected.sort();
    assert_eq!(ids, expected);
    for d in &predicted {
        assert!(d.regions.iter().all(|r| r.score.is_some()));
    }

    let single = root.join("single.json");
    let first = corpus.join(&docs[0].image_path);
    ok(&["infer", "--ckpt", p(&ckpt), "--image", p(&first), "--out", p(&single)]);
    assert_eq!(parse_annotation_file(&single).unwrap().len(), 1);

    let report = root.join("report.json");
    let out = ok(&[
        "evaluate", "--pred", p(&preds), "--gt", p(&annotations), "--manifest", p(&manifest), "--out",
        p(&report),
    ]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json.is_object());
    let text = std::fs::read_to_string(root.join("report.json.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), text);
    assert!(text.contains("AP50"), "{text}");

    let split_report = root.join("train_report.json");
    ok(&[
        "evaluate", "--pred", p(&preds), "--gt", p(&annotations), "--manifest", p(&manifest), "--split",
        "train", "--out", p(&split_report),
    ]);
}

#[test]
fn synth_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_synth_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["synth", "--config", p(&cfg), "--n", "3", "--seed", "9", "--out", p(&a)]);
    ok(&["synth", "--config", p(&cfg), "--n", "3", "--seed", "9", "--out", p(&b)]);
    ok(&["synth", "--config", p(&cfg), "--n", "3", "--seed", "10", "--out", p(&c)]);
    let read = |d: &Path| std::fs::read(d.join("annotations.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    let out = mslayout(&["synth", "--config", p(&bad), "--n", "1", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_field"));

    let out = mslayout(&["infer", "--ckpt", "/nonexistent.ckpt", "--image", "/nonexistent.png", "--out", "x.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = mslayout(&["evaluate", "--pred", "a", "--gt", "b", "--manifest", "c", "--split", "dev", "--out", "r"]);
    assert!(!out.status.success());

    let out = mslayout(&["synth", "--n", "1"]);
    assert!(!out.status.success());
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn get(port: u16, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut body = Vec::new();
    stream.read_to_end(&mut body).ok()?;
    Some(String::from_utf8_lossy(&body).into_owned())
}

#[test]
fn serve_exposes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_synth_config(dir.path());
    let corpus = dir.path().join("corpus");
    ok(&["synth", "--config", p(&cfg), "--n", "2", "--seed", "1", "--out", p(&corpus)]);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let store = dir.path().join("events.jsonl");
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_mslayout"))
            .args(["serve", "--corpus-dir", p(&corpus), "--store", p(&store), "--port", &port.to_string()])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let deadline = Instant::now() + Duration::from_secs(30);
    let response = loop {
        if let Some(r) = get(port, "/documents") {
            break r;
        }
        assert!(Instant::now() < deadline, "server never came up");
        std::thread::sleep(Duration::from_millis(100));
    };
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let docs = parse_annotation_file(corpus.join("annotations.json")).unwrap();
    for d in &docs {
        assert!(response.contains(&d.doc_id));
    }
    let image = get(port, &format!("/documents/{}/image", docs[0].doc_id)).unwrap();
    assert!(image.starts_with("HTTP/1.1 200"));
}
